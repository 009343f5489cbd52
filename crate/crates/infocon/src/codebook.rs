//! The concept codebook: prototype storage, assignment, EMA updates and
//! straight-through selection.
//!
//! Each concept is a pair `(alpha, p)`: a unit prototype in latent space and
//! a compressed parameter vector the hyper-network decodes into that
//! concept's compatibility function. Prototypes are updated only by EMA
//! pulls toward the mean of their assigned latents; the assignment softmax
//! treats them as constants, so the optimizer never touches them. The `p`
//! vectors live in the parameter store and train through the classification
//! loss.

use crate::autodiff::{Tape, Var};
use crate::config::{CodebookConfig, HyperNetConfig};
use crate::nn::{randn, ParamStore, PRef};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

pub struct Codebook {
    /// K x (M+1) unit prototypes. EMA-updated, excluded from the optimizer.
    pub alpha: Array2<f64>,
    /// Compressed compatibility parameters, K x L_p, SGD-trained.
    pub p: PRef,
    pub tau: f64,
    pub c_ema: f64,
}

impl Codebook {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &CodebookConfig,
        hn: &HyperNetConfig,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut alpha = randn(rng, cfg.num_concepts, latent_dim, 1.0);
        for mut row in alpha.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        let p = ps.add("codebook.p", randn(rng, cfg.num_concepts, hn.param_len(), 0.02));
        Self {
            alpha,
            p,
            tau: cfg.tau,
            c_ema: cfg.c_ema,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.alpha.nrows()
    }

    /// Assignment probabilities for one unit latent: softmax over cosine
    /// similarity with each prototype divided by `tau`. Returns the winning
    /// index (ties take the lowest) and the full distribution.
    pub fn assign(&self, z: ArrayView1<f64>) -> (usize, Array1<f64>) {
        let k = self.num_concepts();
        let mut sims = Array1::zeros(k);
        for (i, a) in self.alpha.rows().into_iter().enumerate() {
            sims[i] = z.dot(&a) / self.tau;
        }
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = sims.mapv(|s| (s - max).exp());
        let sum = probs.sum();
        probs.mapv_inplace(|p| p / sum);
        let mut best = 0;
        for i in 1..k {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        (best, probs)
    }

    /// Batched [`Codebook::assign`] over rows.
    pub fn assign_batch(&self, z: ArrayView2<f64>) -> (Vec<usize>, Array2<f64>) {
        let mut hard = Vec::with_capacity(z.nrows());
        let mut probs = Array2::zeros((z.nrows(), self.num_concepts()));
        for (i, row) in z.rows().into_iter().enumerate() {
            let (k, p) = self.assign(row);
            hard.push(k);
            probs.row_mut(i).assign(&p);
        }
        (hard, probs)
    }

    /// Pull each prototype toward the normalized mean of its assigned
    /// latents. Concepts without assignments (or with a degenerate zero
    /// mean) stay unchanged; `p` vectors are untouched.
    pub fn ema_update(&mut self, latents: ArrayView2<f64>, hard: &[usize]) {
        assert_eq!(latents.nrows(), hard.len());
        let k = self.num_concepts();
        let dim = self.alpha.ncols();
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (row, &a) in latents.rows().into_iter().zip(hard) {
            sums.row_mut(a).scaled_add(1.0, &row);
            counts[a] += 1;
        }
        for ki in 0..k {
            if counts[ki] == 0 {
                continue;
            }
            let mut mean = sums.row(ki).to_owned();
            mean.mapv_inplace(|x| x / counts[ki] as f64);
            let n = mean.dot(&mean).sqrt();
            if n < 1e-12 {
                // Antipodal latents cancelled out; skip this transient.
                continue;
            }
            mean.mapv_inplace(|x| x / n);
            let mut blended = self.alpha.row(ki).to_owned();
            blended.zip_mut_with(&mean, |a, m| *a = self.c_ema * *a + (1.0 - self.c_ema) * m);
            let bn = blended.dot(&blended).sqrt().max(1e-12);
            blended.mapv_inplace(|x| x / bn);
            self.alpha.row_mut(ki).assign(&blended);
        }
    }

    /// Assignment probabilities on the tape. Prototypes enter as constants,
    /// so gradients only reach the latents.
    pub fn assign_probs_tape(&self, tape: &mut Tape, z: Var) -> (Var, Vec<usize>) {
        let alpha_t = self.alpha.t().to_owned();
        let at = tape.constant(alpha_t);
        let sims = tape.matmul(z, at);
        let scaled = tape.scale(sims, 1.0 / self.tau);
        let probs = tape.softmax_rows(scaled);
        let hard = argmax_rows(tape.value(probs));
        (probs, hard)
    }

    /// Straight-through selection of a per-row table entry: the forward
    /// value is the hard-selected row of `table`, the backward path is the
    /// soft mixture `probs . table` with the table held constant.
    pub fn straight_through(
        tape: &mut Tape,
        probs: Var,
        hard: &[usize],
        table: &Array2<f64>,
    ) -> Var {
        let tc = tape.constant(table.clone());
        let soft = tape.matmul(probs, tc);
        let mut hard_values = Array2::zeros((hard.len(), table.ncols()));
        for (r, &k) in hard.iter().enumerate() {
            hard_values.row_mut(r).assign(&table.row(k));
        }
        tape.override_value(soft, hard_values)
    }

    /// Both effective concept vectors for every row: `(alpha_eff, p_eff)`.
    pub fn select_effective(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        probs: Var,
        hard: &[usize],
    ) -> (Var, Var) {
        let alpha_eff = Self::straight_through(tape, probs, hard, &self.alpha);
        let p_eff = Self::straight_through(tape, probs, hard, store.get(self.p));
        (alpha_eff, p_eff)
    }
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Confidence loss over assignment probabilities: the mean negative log
/// probability of the chosen concept, averaged per concept and then over
/// concepts. `k_divisor` selects between batch-active concepts (`None`) and
/// a fixed K.
pub fn assignment_entropy_loss(
    probs: ArrayView2<f64>,
    hard: &[usize],
    k_divisor: Option<usize>,
) -> f64 {
    let k = probs.ncols();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (r, &a) in hard.iter().enumerate() {
        sums[a] += probs[(r, a)].clamp(1e-7, 1.0 - 1e-7).ln();
        counts[a] += 1;
    }
    let active = counts.iter().filter(|&&c| c > 0).count();
    let divisor = k_divisor.unwrap_or(active).max(1) as f64;
    let mut total = 0.0;
    for ki in 0..k {
        if counts[ki] > 0 {
            total += sums[ki] / counts[ki] as f64;
        }
    }
    -total / divisor
}

/// Tape version of [`assignment_entropy_loss`]; identical arithmetic.
pub fn assignment_entropy_loss_tape(
    tape: &mut Tape,
    probs: Var,
    hard: &[usize],
    k_divisor: Option<usize>,
) -> Var {
    let k = tape.value(probs).ncols();
    let picked = tape.gather_cols(probs, hard);
    let logp = tape.log_clamped(picked, 1e-7, 1.0 - 1e-7);
    let mut counts = vec![0usize; k];
    for &a in hard {
        counts[a] += 1;
    }
    let active = counts.iter().filter(|&&c| c > 0).count();
    let divisor = k_divisor.unwrap_or(active).max(1) as f64;
    let weights = Array1::from_iter(
        hard.iter()
            .map(|&a| -1.0 / (divisor * counts[a] as f64)),
    );
    let summed = tape.weighted_row_sum(logp, weights);
    tape.mean_all(summed)
}
