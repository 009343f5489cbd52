//! Causal state encoder, spherical time embedding and the state
//! reconstructor.
//!
//! The encoder maps state `s_t` (with the previous action as context) to a
//! unit latent that depends only on the trajectory prefix. Latents are then
//! lifted one dimension by the time embedding: `[sin th, cos th * z]` with
//! `th` spanning `[-pi, pi] / (2 + 2A)` across the trajectory, so absolute
//! progress dominates near both ends while unit norm is preserved exactly.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore, Transformer, TransformerSpec};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

/// Latents for one trajectory: `raw_z` before and `z` after time embedding.
/// Every row of both matrices has unit L2 norm.
#[derive(Clone, Debug)]
pub struct LatentSequence {
    pub raw_z: Array2<f64>,
    pub z: Array2<f64>,
}

/// Embedding angle for 0-based step `t` of a length-`t_full` trajectory.
pub fn time_embed_angle(t: usize, t_full: usize, a: f64) -> f64 {
    let tp = (t + 1) as f64; // 1-based time inside the formula
    ((2.0 * tp / t_full as f64) - 1.0) * std::f64::consts::PI / (2.0 + 2.0 * a)
}

/// Lift a unit latent onto the sphere one dimension up.
pub fn time_embed(z: ArrayView1<f64>, t: usize, t_full: usize, a: f64) -> Result<Array1<f64>> {
    if t_full == 0 {
        return Err(Error::Invalid("time_embed needs a positive trajectory length".into()));
    }
    if t >= t_full {
        return Err(Error::Invalid(format!(
            "timestep {t} outside trajectory of length {t_full}"
        )));
    }
    let theta = time_embed_angle(t, t_full, a);
    let (sin, cos) = theta.sin_cos();
    let mut out = Array1::zeros(z.len() + 1);
    out[0] = sin;
    for (i, v) in z.iter().enumerate() {
        out[i + 1] = cos * v;
    }
    Ok(out)
}

/// Token row `[s_t, a_{t-1}]` for each `t` in `lo..hi`; the action before
/// step 0 is zero.
pub fn encoder_tokens(states: ArrayView2<f64>, actions: ArrayView2<f64>, lo: usize, hi: usize) -> Array2<f64> {
    let ds = states.ncols();
    let da = actions.ncols();
    let mut out = Array2::zeros((hi - lo, ds + da));
    for (r, t) in (lo..hi).enumerate() {
        out.row_mut(r).slice_mut(ndarray::s![..ds]).assign(&states.row(t));
        if t > 0 {
            out.row_mut(r)
                .slice_mut(ndarray::s![ds..])
                .assign(&actions.row(t - 1));
        }
    }
    out
}

pub struct StateEncoder {
    pub tf: Transformer,
    pub time_embed_a: f64,
}

impl StateEncoder {
    pub fn new(ps: &mut ParamStore, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = &model.encoder;
        let tf = Transformer::new(
            ps,
            "encoder",
            TransformerSpec {
                in_dim: model.state_dim + model.action_dim,
                model_dim: e.hidden_dim,
                out_dim: e.hidden_dim,
                layers: e.num_layers,
                heads: e.num_heads,
                mlp_ratio: model.mlp_ratio,
                max_len: e.window_len,
            },
            rng,
        );
        Self {
            tf,
            time_embed_a: e.time_embed_a,
        }
    }

    pub fn capacity(&self) -> usize {
        self.tf.spec.max_len
    }

    /// Tape forward over concatenated windows. `positions` are absolute
    /// timesteps; `angles` the matching embedding angles (computed against
    /// each row's full trajectory length).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: Var,
        positions: &[usize],
        lens: &[usize],
        angles: &[f64],
    ) -> (Var, Var) {
        let out = self.tf.forward(tape, bound, tokens, positions, lens);
        let raw_z = tape.row_l2_normalize(out);
        let n = angles.len();
        let sin_col = Array2::from_shape_fn((n, 1), |(i, _)| angles[i].sin());
        let cos_col = Array2::from_shape_fn((n, 1), |(i, _)| angles[i].cos());
        let sin_c = tape.constant(sin_col);
        let cos_c = tape.constant(cos_col);
        let scaled = tape.mul_col(raw_z, cos_c);
        let z = tape.concat_cols(&[sin_c, scaled]);
        (raw_z, z)
    }

    /// Encode one normalized trajectory without tracking gradients.
    pub fn encode(
        &self,
        store: &ParamStore,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<LatentSequence> {
        let t_len = states.nrows();
        if t_len == 0 {
            return Err(Error::Invalid("cannot encode an empty trajectory".into()));
        }
        if t_len > self.capacity() {
            return Err(Error::SequenceTooLong {
                len: t_len,
                capacity: self.capacity(),
            });
        }
        if actions.nrows() != t_len {
            return Err(Error::DimMismatch {
                context: "encode actions".into(),
                expected: t_len.to_string(),
                actual: actions.nrows().to_string(),
            });
        }
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let tokens = tape.leaf(encoder_tokens(states, actions, 0, t_len), false);
        let positions: Vec<usize> = (0..t_len).collect();
        let angles: Vec<f64> = (0..t_len)
            .map(|t| time_embed_angle(t, t_len, self.time_embed_a))
            .collect();
        let (raw_z, z) = self.forward_tape(&mut tape, &bound, tokens, &positions, &[t_len], &angles);
        Ok(LatentSequence {
            raw_z: tape.value(raw_z).clone(),
            z: tape.value(z).clone(),
        })
    }
}

/// Causal decoder from assigned-concept sequences back to states.
pub struct StateReconstructor {
    pub tf: Transformer,
}

impl StateReconstructor {
    pub fn new(ps: &mut ParamStore, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let tf = Transformer::new(
            ps,
            "decoder",
            TransformerSpec {
                in_dim: model.encoder.hidden_dim + 1,
                model_dim: model.encoder.hidden_dim,
                out_dim: model.state_dim,
                layers: model.decoder.num_layers,
                heads: model.decoder.num_heads,
                mlp_ratio: model.mlp_ratio,
                max_len: model.encoder.window_len,
            },
            rng,
        );
        Self { tf }
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        concept_tokens: Var,
        positions: &[usize],
        lens: &[usize],
    ) -> Var {
        self.tf.forward(tape, bound, concept_tokens, positions, lens)
    }

    /// Predicted state at the last step of a concept-vector prefix.
    pub fn reconstruct(&self, store: &ParamStore, concepts: ArrayView2<f64>) -> Result<Array1<f64>> {
        let t_len = concepts.nrows();
        if t_len == 0 {
            return Err(Error::Invalid("reconstruct needs a nonempty concept sequence".into()));
        }
        if concepts.ncols() != self.tf.spec.in_dim {
            return Err(Error::DimMismatch {
                context: "reconstruct concepts".into(),
                expected: self.tf.spec.in_dim.to_string(),
                actual: concepts.ncols().to_string(),
            });
        }
        if t_len > self.tf.spec.max_len {
            return Err(Error::SequenceTooLong {
                len: t_len,
                capacity: self.tf.spec.max_len,
            });
        }
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let tokens = tape.leaf(concepts.to_owned(), false);
        let positions: Vec<usize> = (0..t_len).collect();
        let out = self.forward_tape(&mut tape, &bound, tokens, &positions, &[t_len]);
        Ok(tape.value(out).row(t_len - 1).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::nn::randn;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn tiny_encoder() -> (ParamStore, StateEncoder) {
        let cfg = TrainConfig::tiny(8, 2);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = StateEncoder::new(&mut ps, &cfg.model, &mut rng);
        (ps, enc)
    }

    #[test]
    fn time_embed_midpoint_and_endpoints() {
        let m = 4;
        let z = Array1::from_elem(m, 0.5); // unit norm
        // t_paper = T/2 means theta = 0: output [0, z].
        let out = time_embed(z.view(), 4, 10, 0.2).unwrap();
        assert_relative_eq!(out[0], 0.0, epsilon = 1e-12);
        for i in 0..m {
            assert_relative_eq!(out[i + 1], 0.5, epsilon = 1e-12);
        }

        // t_paper = T with A = 0.2: theta = pi / 2.4.
        let out = time_embed(z.view(), 9, 10, 0.2).unwrap();
        assert_relative_eq!(out[0], 0.9659258262890683, epsilon = 1e-9);
        assert_relative_eq!(out[1], 0.2588190451025207 * 0.5, epsilon = 1e-9);

        // t_paper = T/4 with T divisible by 4: theta = -pi / 4.8.
        let out = time_embed(z.view(), 2, 12, 0.2).unwrap();
        assert_relative_eq!(out[0], -0.6087614290087207, epsilon = 1e-9);
        assert_relative_eq!(out[1], 0.7933533402912352 * 0.5, epsilon = 1e-9);

        assert!(time_embed(z.view(), 0, 0, 0.2).is_err());
    }

    #[test]
    fn time_embed_preserves_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t_full in [2usize, 7, 33] {
            for t in 0..t_full {
                let mut z = randn(&mut rng, 1, 6, 1.0);
                let n = z.row(0).dot(&z.row(0)).sqrt();
                z.mapv_inplace(|x| x / n);
                let out = time_embed(z.row(0), t, t_full, 0.2).unwrap();
                let norm = out.dot(&out).sqrt();
                assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
            }
        }
    }

    #[test]
    fn cosine_similarity_bound_holds() {
        // <[sin t1, z1 cos t1], [sin t2, z2 cos t2]> <= cos(t1 - t2)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &a in &[0.05, 0.2, 1.0] {
            for _ in 0..500 {
                let t_full = 2 + (rng.random_range(0..60) as usize);
                let t1 = rng.random_range(0..t_full);
                let t2 = rng.random_range(0..t_full);
                let mut u = randn(&mut rng, 1, 5, 1.0);
                let nu = u.row(0).dot(&u.row(0)).sqrt();
                u.mapv_inplace(|x| x / nu);
                let mut v = randn(&mut rng, 1, 5, 1.0);
                let nv = v.row(0).dot(&v.row(0)).sqrt();
                v.mapv_inplace(|x| x / nv);
                let eu = time_embed(u.row(0), t1, t_full, a).unwrap();
                let ev = time_embed(v.row(0), t2, t_full, a).unwrap();
                let th1 = time_embed_angle(t1, t_full, a);
                let th2 = time_embed_angle(t2, t_full, a);
                assert!(eu.dot(&ev) <= (th1 - th2).cos() + 1e-9);
            }
        }
    }

    #[test]
    fn encode_is_causal_unit_norm_and_deterministic() {
        let (ps, enc) = tiny_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = randn(&mut rng, 9, 8, 1.0);
        let actions = randn(&mut rng, 9, 2, 1.0);
        let a = enc.encode(&ps, states.view(), actions.view()).unwrap();
        let b = enc.encode(&ps, states.view(), actions.view()).unwrap();
        assert_eq!(a.z, b.z);

        for row in a.raw_z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        for row in a.z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }

        // Perturb a future state: earlier latents must not move.
        let mut pert = states.clone();
        pert[(6, 3)] += 5.0;
        let c = enc.encode(&ps, pert.view(), actions.view()).unwrap();
        for t in 0..6 {
            assert_eq!(a.raw_z.row(t), c.raw_z.row(t), "latent {t} changed");
        }
        assert_ne!(a.raw_z.row(6), c.raw_z.row(6));

        // The action at step t must not influence z_t either.
        let mut pert_a = actions.clone();
        pert_a[(4, 0)] += 5.0;
        let d = enc.encode(&ps, states.view(), pert_a.view()).unwrap();
        for t in 0..=4 {
            assert_eq!(a.raw_z.row(t), d.raw_z.row(t), "z_{t} saw its own action");
        }
        assert_ne!(a.raw_z.row(5), d.raw_z.row(5));
    }

    #[test]
    fn encode_rejects_over_capacity() {
        let (ps, enc) = tiny_encoder();
        let n = enc.capacity() + 1;
        let states = Array2::zeros((n, 8));
        let actions = Array2::zeros((n, 2));
        let err = enc.encode(&ps, states.view(), actions.view()).unwrap_err();
        assert!(err.to_string().contains("window_len"));
    }

    #[test]
    fn reconstruct_shape_and_causality() {
        let cfg = TrainConfig::tiny(8, 2);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = StateReconstructor::new(&mut ps, &cfg.model, &mut rng);
        let concepts = randn(&mut rng, 6, 9, 1.0);
        let out = dec.reconstruct(&ps, concepts.view()).unwrap();
        assert_eq!(out.len(), 8);

        // Extending the sequence does not change earlier predictions, i.e.
        // the prediction at the old last step stays identical.
        let prefix = dec.reconstruct(&ps, concepts.slice(ndarray::s![..4, ..])).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind_all(&mut tape, false);
        let tokens = tape.leaf(concepts.clone(), false);
        let positions: Vec<usize> = (0..6).collect();
        let all = dec.forward_tape(&mut tape, &bound, tokens, &positions, &[6]);
        for (x, y) in prefix.iter().zip(tape.value(all).row(3).iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }

        let bad = randn(&mut rng, 3, 5, 1.0);
        assert!(dec.reconstruct(&ps, bad.view()).is_err());
    }

    #[test]
    fn encoder_token_layout() {
        let states = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let actions = array![[0.1, 0.2], [0.3, 0.4], [0.0, 0.0]];
        let tok = encoder_tokens(states.view(), actions.view(), 0, 3);
        assert_eq!(tok.row(0).to_vec(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(tok.row(1).to_vec(), vec![3.0, 4.0, 0.1, 0.2]);
        assert_eq!(tok.row(2).to_vec(), vec![5.0, 6.0, 0.3, 0.4]);
        let tok = encoder_tokens(states.view(), actions.view(), 1, 3);
        assert_eq!(tok.row(0).to_vec(), vec![3.0, 4.0, 0.1, 0.2]);
    }
}
