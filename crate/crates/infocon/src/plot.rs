//! Static SVG rendering of a labeled trajectory: the 2D agent path with
//! concept-colored segments, predicted key states, ground-truth keys and
//! waypoints. Output bytes are deterministic.

use crate::evallab::TrajLabels;
use crate::synthdata::{SyntheticTaskSpec, Trajectory};
use std::fmt::Write;

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2", "#edc948", "#ff9da7",
    "#9c755f", "#bab0ac",
];

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

struct Mapper {
    min_x: f64,
    min_y: f64,
    scale: f64,
}

impl Mapper {
    fn new(points: &[(f64, f64)]) -> Self {
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for &(x, y) in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
        Self {
            min_x,
            min_y,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.min_x) * self.scale,
            SIZE - MARGIN - (y - self.min_y) * self.scale,
        )
    }
}

/// Render one trajectory to an SVG document.
pub fn render_trajectory_svg(
    traj: &Trajectory,
    labels: &TrajLabels,
    spec: &SyntheticTaskSpec,
) -> String {
    let t_len = traj.len();
    let mut points = Vec::with_capacity(t_len + spec.num_phases);
    for t in 0..t_len {
        points.push((traj.states[(t, 0)], traj.states[(t, 1)]));
    }
    for k in 0..spec.num_phases {
        points.push((traj.states[(0, 2 + 2 * k)], traj.states[(0, 3 + 2 * k)]));
    }
    let mapper = Mapper::new(&points);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);

    // Path segments colored by the concept of their starting step.
    for t in 0..t_len - 1 {
        let (x1, y1) = mapper.map(traj.states[(t, 0)], traj.states[(t, 1)]);
        let (x2, y2) = mapper.map(traj.states[(t + 1, 0)], traj.states[(t + 1, 1)]);
        let color = PALETTE[labels.concept_ids[t] % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}" stroke="{color}" stroke-width="2.5"/>"#
        );
    }

    // Waypoints as labeled squares.
    for k in 0..spec.num_phases {
        let (x, y) = mapper.map(traj.states[(0, 2 + 2 * k)], traj.states[(0, 3 + 2 * k)]);
        let _ = writeln!(
            svg,
            r#"<rect x="{:.3}" y="{:.3}" width="12" height="12" fill="none" stroke="black" stroke-width="1.5"/>"#,
            x - 6.0,
            y - 6.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.3}" font-size="11" font-family="monospace">w{k}</text>"#,
            x + 8.0,
            y - 8.0
        );
    }

    // Predicted key states: filled circles in the segment color.
    for &kt in &labels.key_times {
        let (x, y) = mapper.map(traj.states[(kt, 0)], traj.states[(kt, 1)]);
        let color = PALETTE[labels.concept_ids[kt] % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<circle cx="{x:.3}" cy="{y:.3}" r="5" fill="{color}" stroke="black" stroke-width="1"/>"#
        );
    }

    // Ground-truth keys: crosses on top.
    if let Some(gt) = &traj.gt_key_times {
        for &kt in gt {
            let (x, y) = mapper.map(traj.states[(kt, 0)], traj.states[(kt, 1)]);
            let _ = writeln!(
                svg,
                r#"<path d="M {:.3} {:.3} L {:.3} {:.3} M {:.3} {:.3} L {:.3} {:.3}" stroke="black" stroke-width="1.8"/>"#,
                x - 6.0,
                y - 6.0,
                x + 6.0,
                y + 6.0,
                x - 6.0,
                y + 6.0,
                x + 6.0,
                y - 6.0
            );
        }
    }

    let _ = writeln!(
        svg,
        r#"<text x="12" y="22" font-size="13" font-family="monospace">T={t_len} keys={} gt={}</text>"#,
        labels.key_times.len(),
        traj.gt_key_times.as_ref().map_or(0, |g| g.len())
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evallab::LabelSet;
    use crate::synthdata::{generate_trajectory, standard_fixture_spec};

    /// Minimal well-formedness check: every opened tag closes in order.
    pub fn xml_is_balanced(doc: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(start) = rest.find('<') {
            rest = &rest[start + 1..];
            let Some(end) = rest.find('>') else {
                return false;
            };
            let tag = &rest[..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                match stack.pop() {
                    Some(open) if open == name => {}
                    _ => return false,
                }
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name: String = tag.split_whitespace().next().unwrap_or("").to_string();
                stack.push(name);
            }
        }
        stack.is_empty()
    }

    #[test]
    fn svg_is_deterministic_and_balanced() {
        let spec = standard_fixture_spec();
        let traj = generate_trajectory(&spec, 3).unwrap();
        let labels = LabelSet::from_ids("m", vec![traj.gt_phase.clone().unwrap()]);
        let a = render_trajectory_svg(&traj, &labels.trajectories[0], &spec);
        let b = render_trajectory_svg(&traj, &labels.trajectories[0], &spec);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(xml_is_balanced(&a), "unbalanced svg");
        assert!(a.contains("<circle"));
    }
}
