//! Learned heads: the hyper-network-decoded compatibility function, the
//! generative key-state predictor and the action policy.
//!
//! The compatibility function for a concept is a tiny generated MLP: each
//! segment of the concept's compressed parameter vector passes through its
//! own shared layer, then a single shared output layer emits the flattened
//! weight matrix and bias of one generated hidden layer. The score is the
//! sigmoid of the cosine similarity between the final hidden feature and the
//! probe segment, divided by the assignment temperature.
//!
//! `compat_input_grad` builds the gradient of the score w.r.t. the state as
//! an explicit tape computation (tanh backpropagation written forward), so
//! the training loss can differentiate through it into the hyper-network and
//! the encoder path.

use crate::autodiff::{Tape, Var};
use crate::config::{HyperNetConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore, Transformer, TransformerSpec};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

pub struct HyperNet {
    /// Per-segment first-stage layers.
    seg_layers: Vec<Linear>,
    /// Shared second stage emitting `[W_flat | b]` per generated layer.
    out_layer: Linear,
    pub cfg: HyperNetConfig,
    pub tau: f64,
    pub state_dim: usize,
}

/// Generated weights for all rows of a decode: one `(w_flat, bias)` pair per
/// hidden layer, plus the probe segment.
pub struct DecodedCompat {
    pub layers: Vec<(Var, Var)>,
    pub probe: Var,
}

/// Forward pass values kept for the analytic input gradient.
pub struct CompatForward {
    pub score: Var,
    /// tanh activations per layer, row-per-state.
    activations: Vec<Var>,
    cos_sim: Var,
    f_norm: Var,
    denom: Var,
}

impl HyperNet {
    pub fn new(ps: &mut ParamStore, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let cfg = model.hypernet.clone();
        let w = cfg.hidden_width;
        // Concept parameter vectors start near zero, so the hyper-network
        // stages carry the scale: unit-fan-in weights plus a nonzero output
        // bias keep the generated layers away from the degenerate all-zero
        // regime where the cosine head is ill-conditioned.
        let seg_std = 1.0 / (cfg.seg_len() as f64).sqrt();
        let seg_layers = (0..cfg.num_hidden_layers)
            .map(|i| {
                Linear::with_std(
                    ps,
                    &format!("hypernet.seg{i}"),
                    cfg.seg_len(),
                    cfg.mid_dim,
                    rng,
                    seg_std,
                    0.0,
                )
            })
            .collect();
        let out_std = 1.0 / (cfg.mid_dim as f64).sqrt();
        let gen_scale = 1.0 / (model.state_dim as f64).sqrt();
        let out_layer = Linear::with_std(
            ps,
            "hypernet.out",
            cfg.mid_dim,
            w * w + w,
            rng,
            out_std,
            gen_scale,
        );
        Self {
            seg_layers,
            out_layer,
            cfg,
            tau: model.codebook.tau,
            state_dim: model.state_dim,
        }
    }

    /// Decode N rows of compressed parameters into generated layers.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, p: Var) -> DecodedCompat {
        let seg = self.cfg.seg_len();
        let w = self.cfg.hidden_width;
        let mut layers = Vec::with_capacity(self.cfg.num_hidden_layers);
        for (i, sl) in self.seg_layers.iter().enumerate() {
            let segment = tape.slice_cols(p, i * seg, seg);
            let mid = sl.forward(tape, bound, segment);
            let mid = tape.tanh(mid);
            let out = self.out_layer.forward(tape, bound, mid);
            let w_flat = tape.slice_cols(out, 0, w * w);
            let bias = tape.slice_cols(out, w * w, w);
            layers.push((w_flat, bias));
        }
        let probe = tape.slice_cols(p, self.cfg.num_hidden_layers * seg, seg);
        DecodedCompat { layers, probe }
    }

    /// Zero-pad states to the generated layers' input width. The first
    /// generated layer effectively maps the `state_dim` real inputs.
    pub fn pad_states(&self, states: ArrayView2<f64>) -> Array2<f64> {
        let w = self.cfg.hidden_width;
        let mut out = Array2::zeros((states.nrows(), w));
        out.slice_mut(s![.., ..states.ncols()]).assign(&states);
        out
    }

    /// Compatibility scores for row-aligned `(decoded params, padded state)`.
    pub fn score(&self, tape: &mut Tape, dec: &DecodedCompat, s_pad: Var) -> CompatForward {
        let w = self.cfg.hidden_width;
        let mut x = s_pad;
        let mut activations = Vec::with_capacity(dec.layers.len());
        for (w_flat, bias) in &dec.layers {
            let pre = tape.rowwise_linear(*w_flat, *bias, x, w, w);
            x = tape.tanh(pre);
            activations.push(x);
        }
        let rd = tape.row_dot(x, dec.probe);
        let f_norm = tape.row_norm(x);
        let probe_norm = tape.row_norm(dec.probe);
        let denom = tape.mul(f_norm, probe_norm);
        let cos_sim = tape.div(rd, denom);
        let scaled = tape.scale(cos_sim, 1.0 / self.tau);
        let score = tape.sigmoid(scaled);
        CompatForward {
            score,
            activations,
            cos_sim,
            f_norm,
            denom,
        }
    }

    /// Exact gradient of the score w.r.t. the (unpadded) state, written as
    /// tape operations so it stays differentiable in everything.
    pub fn input_grad(&self, tape: &mut Tape, dec: &DecodedCompat, fwd: &CompatForward) -> Var {
        let w = self.cfg.hidden_width;
        let n = tape.value(fwd.score).nrows();
        let f = *fwd.activations.last().expect("at least one generated layer");

        // d cos / d f = probe / (|f||q|) - cos * f / |f|^2
        let ones = tape.constant(Array2::ones((n, 1)));
        let inv_denom = tape.div(ones, fwd.denom);
        let t1 = tape.mul_col(dec.probe, inv_denom);
        let nf2 = tape.mul(fwd.f_norm, fwd.f_norm);
        let cs_over = tape.div(fwd.cos_sim, nf2);
        let t2 = tape.mul_col(f, cs_over);
        let mut m = tape.sub(t1, t2);

        // Walk the generated layers backward: m <- W_i^T ((1 - x_i^2) * m).
        for (i, (w_flat, _)) in dec.layers.iter().enumerate().rev() {
            let xi = fwd.activations[i];
            let sq = tape.mul(xi, xi);
            let deriv = tape.one_minus(sq);
            let gated = tape.mul(deriv, m);
            m = tape.rowwise_linear_t(*w_flat, gated, w, w);
        }

        // Chain through sigmoid(cos / tau).
        let om = tape.one_minus(fwd.score);
        let sprime = tape.mul(fwd.score, om);
        let su = tape.scale(sprime, 1.0 / self.tau);
        let g_pad = tape.mul_col(m, su);
        tape.slice_cols(g_pad, 0, self.state_dim)
    }

    /// Score a single `(p, s)` pair without gradient tracking.
    pub fn compat_score(&self, store: &ParamStore, p: ArrayView1<f64>, state: ArrayView1<f64>) -> Result<f64> {
        let (tape, fwd) = self.eval_pair(store, p, state)?;
        Ok(tape.value(fwd.score)[(0, 0)])
    }

    /// Gradient of [`HyperNet::compat_score`] w.r.t. the state.
    pub fn compat_grad(&self, store: &ParamStore, p: ArrayView1<f64>, state: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (mut tape, fwd) = self.eval_pair_tape(store, p, state)?;
        let dec = fwd.0;
        let cf = fwd.1;
        let g = self.input_grad(&mut tape, &dec, &cf);
        Ok(tape.value(g).row(0).to_owned())
    }

    fn eval_pair(
        &self,
        store: &ParamStore,
        p: ArrayView1<f64>,
        state: ArrayView1<f64>,
    ) -> Result<(Tape, CompatForward)> {
        let (tape, (_, fwd)) = self.eval_pair_tape(store, p, state).map(|(t, d)| (t, d))?;
        Ok((tape, fwd))
    }

    fn eval_pair_tape(
        &self,
        store: &ParamStore,
        p: ArrayView1<f64>,
        state: ArrayView1<f64>,
    ) -> Result<(Tape, (DecodedCompat, CompatForward))> {
        if p.len() != self.cfg.param_len() {
            return Err(Error::DimMismatch {
                context: "compat parameter vector".into(),
                expected: self.cfg.param_len().to_string(),
                actual: p.len().to_string(),
            });
        }
        if state.len() != self.state_dim {
            return Err(Error::DimMismatch {
                context: "compat state".into(),
                expected: self.state_dim.to_string(),
                actual: state.len().to_string(),
            });
        }
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let pm = tape.leaf(p.to_owned().insert_axis(ndarray::Axis(0)), false);
        let dec = self.decode(&mut tape, &bound, pm);
        let sm = state.to_owned().insert_axis(ndarray::Axis(0));
        let padded = self.pad_states(sm.view());
        let sv = tape.leaf(padded, false);
        let fwd = self.score(&mut tape, &dec, sv);
        Ok((tape, (dec, fwd)))
    }
}

/// Key-state predictor: causal transformer over `[s_t, a_{t-1}, alpha_t]`.
pub struct GenPredictor {
    pub tf: Transformer,
}

impl GenPredictor {
    pub fn new(ps: &mut ParamStore, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let tf = Transformer::new(
            ps,
            "genhead",
            TransformerSpec {
                in_dim: model.state_dim + model.action_dim + model.encoder.hidden_dim + 1,
                model_dim: model.encoder.hidden_dim,
                out_dim: model.state_dim,
                layers: model.gen_head.num_layers,
                heads: model.gen_head.num_heads,
                mlp_ratio: model.mlp_ratio,
                max_len: model.encoder.window_len,
            },
            rng,
        );
        Self { tf }
    }
}

/// Action policy: causal transformer over `[s_t, a_{t-1}, dC/ds at s_t]`.
pub struct CompatPolicy {
    pub tf: Transformer,
}

impl CompatPolicy {
    pub fn new(ps: &mut ParamStore, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let tf = Transformer::new(
            ps,
            "policy",
            TransformerSpec {
                in_dim: model.state_dim + model.action_dim + model.state_dim,
                model_dim: model.encoder.hidden_dim,
                out_dim: model.action_dim,
                layers: model.policy.num_layers,
                heads: model.policy.num_heads,
                mlp_ratio: model.mlp_ratio,
                max_len: model.encoder.window_len,
            },
            rng,
        );
        Self { tf }
    }
}

/// Run a head transformer over a single sequence without gradients and
/// return the outputs for all steps.
pub fn head_forward_value(
    tf: &Transformer,
    store: &ParamStore,
    tokens: Array2<f64>,
) -> Result<Array2<f64>> {
    let t_len = tokens.nrows();
    if t_len == 0 {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if t_len > tf.spec.max_len {
        return Err(Error::SequenceTooLong {
            len: t_len,
            capacity: tf.spec.max_len,
        });
    }
    if tokens.ncols() != tf.spec.in_dim {
        return Err(Error::DimMismatch {
            context: "head tokens".into(),
            expected: tf.spec.in_dim.to_string(),
            actual: tokens.ncols().to_string(),
        });
    }
    let mut tape = Tape::new();
    let bound = store.bind_all(&mut tape, false);
    let tv = tape.leaf(tokens, false);
    let positions: Vec<usize> = (0..t_len).collect();
    let out = tf.forward(&mut tape, &bound, tv, &positions, &[t_len]);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::nn::randn;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn build() -> (ParamStore, HyperNet) {
        let cfg = TrainConfig::tiny(8, 2);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hn = HyperNet::new(&mut ps, &cfg.model, &mut rng);
        (ps, hn)
    }

    #[test]
    fn score_stays_in_open_unit_interval() {
        let (ps, hn) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = randn(&mut rng, 1, hn.cfg.param_len(), 1.0);
            let s = randn(&mut rng, 1, 8, 1.0);
            let score = hn.compat_score(&ps, p.row(0), s.row(0)).unwrap();
            assert!(score > 0.0 && score < 1.0, "score {score}");
        }
    }

    #[test]
    fn parallel_probe_saturates_and_orthogonal_is_half() {
        // Zero out the hyper-network so the generated layer is W = 0, b = 0
        // except we set the output layer bias to produce a chosen hidden
        // feature via tanh(b).
        let (mut ps, hn) = build();
        let w = hn.cfg.hidden_width;
        for i in 0..ps.len() {
            if ps.name(i).starts_with("hypernet.") {
                ps.array_mut(i).fill(0.0);
            }
        }
        // Bias of the shared output layer: generated W stays zero, generated
        // bias b = atanh(v) so the hidden feature equals v.
        let bias_idx = ps.index_of("hypernet.out.b").unwrap();
        let mut v = Array1::zeros(w);
        v[0] = 0.6;
        v[1] = -0.2;
        {
            let arr = ps.array_mut(bias_idx);
            for j in 0..w {
                arr[(0, w * w + j)] = (v[j] as f64).atanh();
            }
        }
        // Probe parallel to v.
        let mut p = Array1::zeros(hn.cfg.param_len());
        for j in 0..w {
            p[hn.cfg.seg_len() + j] = 2.0 * v[j];
        }
        let s = Array1::from_elem(8, 0.3);
        let score = hn.compat_score(&ps, p.view(), s.view()).unwrap();
        // cos = 1, tau = 0.1: sigmoid(10).
        assert_relative_eq!(score, 0.9999546021312976, epsilon = 1e-9);

        // Orthogonal probe: cos = 0 gives exactly 0.5.
        let mut p_orth = Array1::zeros(hn.cfg.param_len());
        p_orth[hn.cfg.seg_len()] = -v[1];
        p_orth[hn.cfg.seg_len() + 1] = v[0];
        let score = hn.compat_score(&ps, p_orth.view(), s.view()).unwrap();
        assert_relative_eq!(score, 0.5, epsilon = 1e-12);

        // All-zero generated weights make the score constant in s: zero grad.
        let g = hn.compat_grad(&ps, p.view(), s.view()).unwrap();
        for v in g.iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let (ps, hn) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-4;
        for _ in 0..20 {
            let p = randn(&mut rng, 1, hn.cfg.param_len(), 1.0);
            let s = randn(&mut rng, 1, 8, 0.8);
            let g = hn.compat_grad(&ps, p.row(0), s.row(0)).unwrap();
            assert_eq!(g.len(), 8);
            for j in 0..8 {
                let mut sp = s.clone();
                sp[(0, j)] += h;
                let mut sm = s.clone();
                sm[(0, j)] -= h;
                let fd = (hn.compat_score(&ps, p.row(0), sp.row(0)).unwrap()
                    - hn.compat_score(&ps, p.row(0), sm.row(0)).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(g[j].abs()).max(1e-7);
                assert!(
                    (g[j] - fd).abs() / denom < 1e-4,
                    "dim {j}: analytic {} vs fd {fd}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn rejects_mismatched_segments() {
        let (ps, hn) = build();
        let p = Array1::zeros(hn.cfg.param_len() + 1);
        let s = Array1::zeros(8);
        assert!(hn.compat_score(&ps, p.view(), s.view()).is_err());
        let p = Array1::zeros(hn.cfg.param_len());
        let s = Array1::zeros(9);
        assert!(hn.compat_score(&ps, p.view(), s.view()).is_err());
    }

    #[test]
    fn head_shapes_and_causality() {
        let cfg = TrainConfig::tiny(8, 2);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = GenPredictor::new(&mut ps, &cfg.model, &mut rng);
        let pol = CompatPolicy::new(&mut ps, &cfg.model, &mut rng);

        let gen_tokens = randn(&mut rng, 7, gen.tf.spec.in_dim, 1.0);
        let out = head_forward_value(&gen.tf, &ps, gen_tokens.clone()).unwrap();
        assert_eq!(out.shape(), &[7, 8]);
        let mut pert = gen_tokens.clone();
        pert[(5, 0)] += 1.0;
        let out2 = head_forward_value(&gen.tf, &ps, pert).unwrap();
        for t in 0..5 {
            assert_eq!(out.row(t), out2.row(t));
        }

        let pol_tokens = randn(&mut rng, 7, pol.tf.spec.in_dim, 1.0);
        let out = head_forward_value(&pol.tf, &ps, pol_tokens.clone()).unwrap();
        assert_eq!(out.shape(), &[7, 2]);
        let mut pert = pol_tokens.clone();
        pert[(6, 1)] -= 2.0;
        let out2 = head_forward_value(&pol.tf, &ps, pert).unwrap();
        for t in 0..6 {
            assert_eq!(out.row(t), out2.row(t));
        }
    }
}
