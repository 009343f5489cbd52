//! Run-length structure over per-timestep concept labels.

/// For each timestep, the index of the last state of its label run; the
/// final run maps to `T - 1`.
pub fn key_state_targets(labels: &[usize]) -> Vec<usize> {
    assert!(!labels.is_empty(), "label sequence must be nonempty");
    let t = labels.len();
    let mut out = vec![0; t];
    out[t - 1] = t - 1;
    for i in (0..t - 1).rev() {
        out[i] = if labels[i] == labels[i + 1] { out[i + 1] } else { i };
    }
    out
}

/// Indices where the label changes, plus the final index. Sorted and
/// strictly increasing by construction.
pub fn run_ends(labels: &[usize]) -> Vec<usize> {
    assert!(!labels.is_empty());
    let mut out: Vec<usize> = labels
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, _)| i)
        .collect();
    out.push(labels.len() - 1);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: for each position scan right to the end of its run.
    fn targets_by_scan(labels: &[usize]) -> Vec<usize> {
        (0..labels.len())
            .map(|t| {
                let mut u = t;
                while u + 1 < labels.len() && labels[u + 1] == labels[t] {
                    u += 1;
                }
                u
            })
            .collect()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(key_state_targets(&[1, 1, 2, 2, 2, 3]), vec![1, 1, 4, 4, 4, 5]);
        assert_eq!(key_state_targets(&[2, 2, 2]), vec![2, 2, 2]);
        assert_eq!(key_state_targets(&[1, 2, 1]), vec![0, 1, 2]);
        assert_eq!(run_ends(&[1, 1, 2, 2, 2, 3]), vec![1, 4, 5]);
        assert_eq!(run_ends(&[7]), vec![0]);
    }

    proptest! {
        #[test]
        fn matches_scan_oracle(labels in proptest::collection::vec(0usize..5, 1..60)) {
            let fast = key_state_targets(&labels);
            let slow = targets_by_scan(&labels);
            prop_assert_eq!(&fast, &slow);
            // Idempotence and the run-end invariant.
            for (t, &u) in fast.iter().enumerate() {
                prop_assert!(u >= t);
                prop_assert_eq!(labels[u], labels[t]);
                prop_assert!(u + 1 == labels.len() || labels[u + 1] != labels[u]);
            }
            let ends = run_ends(&labels);
            prop_assert!(ends.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*ends.last().unwrap(), labels.len() - 1);
            for &e in &ends {
                prop_assert_eq!(fast[e], e);
            }
        }
    }
}
