//! Loss construction and the training loop.
//!
//! One iteration follows the reference procedure: encode the batch
//! trajectories end to end without gradients, update prototypes by EMA from
//! those assignments, re-assign with the updated prototypes to place the
//! per-state key targets, then run the gradient pass over sampled windows
//! with straight-through concept selection and step the optimizer.

use crate::autodiff::{Gradients, Tape, Var};
use crate::codebook::{assignment_entropy_loss_tape, Codebook};
use crate::config::{Ablation, TrainConfig};
use crate::encoder::{encoder_tokens, time_embed_angle};
use crate::error::{Error, Result};
use crate::heads::DecodedCompat;
use crate::model::Model;
use crate::nn::Bound;
use crate::optim::{warmup_cosine_lr, AdamW};
use crate::segments::key_state_targets;
use crate::synthdata::Dataset;
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::segments::run_ends;

/// Fraction of trajectories a concept must appear in to count as active.
pub const ACTIVE_RATE_THRESHOLD: f64 = 0.1;

/// How concept vectors reach the heads.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Hard forward with the soft-mixture gradient path.
    Straight,
    /// Pure soft mixture; used by finite-difference verification, which
    /// cannot probe through the hard-selection override.
    Soft,
}

pub struct LossOptions<'a> {
    pub include_gen: bool,
    pub include_dis: bool,
    pub lambda: f64,
    pub lambda_rec: f64,
    pub square_rec: bool,
    pub detach_compat_grad: bool,
    pub entropy_k: Option<usize>,
    pub quant: QuantMode,
    /// Fix the discrete structure (hard labels) instead of recomputing it
    /// from the forward pass; finite differences need this.
    pub frozen_hard: Option<&'a [usize]>,
    /// Snapshot of `codebook.p` for the stop-gradiented mixture. Finite
    /// differences must hold the gradient-stopped copy at the base point,
    /// otherwise they measure a path the objective deliberately cuts.
    pub frozen_p: Option<&'a Array2<f64>>,
}

/// Scalar values of each loss term for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub total: f64,
    pub gen: f64,
    pub dis_a: f64,
    pub dis_c: f64,
    pub ent: f64,
    pub rec: f64,
}

/// One gradient-pass batch: concatenated windows plus everything constant
/// the losses need.
pub struct WindowBatch {
    pub lens: Vec<usize>,
    pub positions: Vec<usize>,
    pub angles: Vec<f64>,
    pub enc_tokens: Array2<f64>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub prev_actions: Array2<f64>,
    pub gen_targets: Array2<f64>,
    /// 1 / (B * len_b) per row: the per-trajectory mean of means.
    pub row_weights: Array1<f64>,
}

impl WindowBatch {
    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Assemble windows `ranges[b]` of the given trajectories into one batch.
/// `key_targets[b]` maps absolute timesteps of trajectory `b` to the
/// absolute index of its key state.
pub fn build_window_batch(
    data: &Dataset,
    traj_idx: &[usize],
    starts: &[usize],
    window_len: usize,
    key_targets: &[Vec<usize>],
    time_embed_a: f64,
) -> WindowBatch {
    let ds = data.state_dim();
    let da = data.action_dim();
    let b = traj_idx.len();
    let mut lens = Vec::with_capacity(b);
    let mut ranges = Vec::with_capacity(b);
    for (i, &ti) in traj_idx.iter().enumerate() {
        let t_len = data.trajectories[ti].len();
        let lo = starts[i].min(t_len.saturating_sub(window_len));
        let hi = (lo + window_len).min(t_len);
        ranges.push(lo..hi);
        lens.push(hi - lo);
    }
    let total: usize = lens.iter().sum();
    let mut positions = Vec::with_capacity(total);
    let mut angles = Vec::with_capacity(total);
    let mut enc_tokens = Array2::zeros((total, ds + da));
    let mut states = Array2::zeros((total, ds));
    let mut actions = Array2::zeros((total, da));
    let mut prev_actions = Array2::zeros((total, da));
    let mut gen_targets = Array2::zeros((total, ds));
    let mut row_weights = Array1::zeros(total);

    let mut at = 0;
    for (i, &ti) in traj_idx.iter().enumerate() {
        let traj = &data.trajectories[ti];
        let t_full = traj.len();
        let range = ranges[i].clone();
        let len = lens[i];
        let toks = encoder_tokens(traj.states.view(), traj.actions.view(), range.start, range.end);
        enc_tokens.slice_mut(s![at..at + len, ..]).assign(&toks);
        for (r, t) in range.clone().enumerate() {
            let row = at + r;
            positions.push(t);
            angles.push(time_embed_angle(t, t_full, time_embed_a));
            states.row_mut(row).assign(&traj.states.row(t));
            actions.row_mut(row).assign(&traj.actions.row(t));
            if t > 0 {
                prev_actions.row_mut(row).assign(&traj.actions.row(t - 1));
            }
            gen_targets.row_mut(row).assign(&traj.states.row(key_targets[i][t]));
            row_weights[row] = 1.0 / (b as f64 * len as f64);
        }
        at += len;
    }
    WindowBatch {
        lens,
        positions,
        angles,
        enc_tokens,
        states,
        actions,
        prev_actions,
        gen_targets,
        row_weights,
    }
}

fn weighted_mean_rows(tape: &mut Tape, per_row: Var, weights: &Array1<f64>) -> Var {
    let summed = tape.weighted_row_sum(per_row, weights.clone());
    tape.mean_all(summed)
}

/// Squared-error loss between a prediction matrix and constant targets,
/// averaged per trajectory then over trajectories.
fn weighted_sq_loss(tape: &mut Tape, pred: Var, targets: &Array2<f64>, weights: &Array1<f64>) -> Var {
    let tgt = tape.constant(targets.clone());
    let err = tape.sub(pred, tgt);
    let sq = tape.row_dot(err, err);
    weighted_mean_rows(tape, sq, weights)
}

pub struct LossVars {
    pub total: Var,
    pub parts: LossParts,
}

/// Build the full objective on the tape. Returns the scalar plus the value
/// of each component for logging.
pub fn build_total_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &WindowBatch,
    opts: &LossOptions,
) -> LossVars {
    let cb = &model.codebook;
    let tokens = tape.leaf(batch.enc_tokens.clone(), false);
    let (_raw_z, z) = model.encoder.forward_tape(
        tape,
        bound,
        tokens,
        &batch.positions,
        &batch.lens,
        &batch.angles,
    );
    let (probs, fresh_hard) = cb.assign_probs_tape(tape, z);
    let hard: Vec<usize> = match opts.frozen_hard {
        Some(h) => h.to_vec(),
        None => fresh_hard,
    };

    // Effective concept vectors per row.
    let p_table = opts.frozen_p.unwrap_or_else(|| model.store.get(cb.p));
    let (alpha_eff, p_eff) = match opts.quant {
        QuantMode::Straight => {
            let a = Codebook::straight_through(tape, probs, &hard, &cb.alpha);
            let p = Codebook::straight_through(tape, probs, &hard, p_table);
            (a, p)
        }
        QuantMode::Soft => {
            let ac = tape.constant(cb.alpha.clone());
            let pc = tape.constant(p_table.clone());
            (tape.matmul(probs, ac), tape.matmul(probs, pc))
        }
    };

    let mut parts = LossParts::default();
    let mut total: Option<Var> = None;
    let add_term = |tape: &mut Tape, term: Var, coeff: f64, total: &mut Option<Var>| -> f64 {
        let value = tape.scalar(term);
        if coeff != 0.0 {
            let scaled = if coeff == 1.0 { term } else { tape.scale(term, coeff) };
            *total = Some(match *total {
                Some(t) => tape.add(t, scaled),
                None => scaled,
            });
        }
        value
    };

    // Assignment confidence.
    let ent = assignment_entropy_loss_tape(tape, probs, &hard, opts.entropy_k);
    parts.ent = add_term(tape, ent, opts.lambda, &mut total);

    // Reconstruction from concept vectors.
    if opts.lambda_rec != 0.0 {
        let pred = model
            .decoder
            .forward_tape(tape, bound, alpha_eff, &batch.positions, &batch.lens);
        let tgt = tape.constant(batch.states.clone());
        let err = tape.sub(pred, tgt);
        let per_row = if opts.square_rec {
            tape.row_dot(err, err)
        } else {
            tape.row_norm(err)
        };
        let rec = weighted_mean_rows(tape, per_row, &batch.row_weights);
        parts.rec = add_term(tape, rec, opts.lambda_rec, &mut total);
    }

    let states_c = tape.leaf(batch.states.clone(), false);
    let prev_a = tape.leaf(batch.prev_actions.clone(), false);

    // Generative key-state prediction.
    if opts.include_gen {
        let gen_tokens = tape.concat_cols(&[states_c, prev_a, alpha_eff]);
        let pred = model
            .gen_head
            .tf
            .forward(tape, bound, gen_tokens, &batch.positions, &batch.lens);
        let gen = weighted_sq_loss(tape, pred, &batch.gen_targets, &batch.row_weights);
        parts.gen = add_term(tape, gen, 1.0, &mut total);
    }

    if opts.include_dis {
        let padded = model.hypernet.pad_states(batch.states.view());
        let s_pad = tape.leaf(padded, false);

        // Per-concept classification of batch states.
        let dis_c = classification_loss(tape, model, bound, s_pad, &hard);
        parts.dis_c = add_term(tape, dis_c, opts.lambda, &mut total);

        // Action prediction from the compatibility gradient.
        let dec = model.hypernet.decode(tape, bound, p_eff);
        let fwd = model.hypernet.score(tape, &dec, s_pad);
        let mut grad = model.hypernet.input_grad(tape, &dec, &fwd);
        if opts.detach_compat_grad {
            grad = tape.detach(grad);
        }
        let pol_tokens = tape.concat_cols(&[states_c, prev_a, grad]);
        let pred = model
            .policy
            .tf
            .forward(tape, bound, pol_tokens, &batch.positions, &batch.lens);
        let dis_a = weighted_sq_loss(tape, pred, &batch.actions, &batch.row_weights);
        parts.dis_a = add_term(tape, dis_a, 1.0, &mut total);
    }

    let total = total.unwrap_or_else(|| tape.constant(Array2::zeros((1, 1))));
    parts.total = tape.scalar(total);
    LossVars { total, parts }
}

/// Balanced positive/negative log loss per batch-active concept.
fn classification_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    s_pad: Var,
    hard: &[usize],
) -> Var {
    let k_total = model.codebook.num_concepts();
    let n = hard.len();
    let mut counts = vec![0usize; k_total];
    for &h in hard {
        counts[h] += 1;
    }
    let active: Vec<usize> = (0..k_total).filter(|&k| counts[k] > 0).collect();

    let p_all = bound.v(model.codebook.p);
    let dec_all = model.hypernet.decode(tape, bound, p_all);

    let mut terms: Option<Var> = None;
    for &k in &active {
        let tile = vec![k; n];
        let layers = dec_all
            .layers
            .iter()
            .map(|(w, b)| (tape.select_rows(*w, &tile), tape.select_rows(*b, &tile)))
            .collect();
        let probe = tape.select_rows(dec_all.probe, &tile);
        let dec_k = DecodedCompat { layers, probe };
        let fwd = model.hypernet.score(tape, &dec_k, s_pad);

        let n_pos = counts[k];
        let n_neg = n - n_pos;
        let mut term: Option<Var> = None;
        if n_pos > 0 {
            let w = Array1::from_iter(hard.iter().map(|&h| {
                if h == k { 1.0 / n_pos as f64 } else { 0.0 }
            }));
            let logp = tape.log_clamped(fwd.score, 1e-7, 1.0 - 1e-7);
            let t = weighted_mean_rows(tape, logp, &w);
            term = Some(t);
        }
        if n_neg > 0 {
            let w = Array1::from_iter(hard.iter().map(|&h| {
                if h == k { 0.0 } else { 1.0 / n_neg as f64 }
            }));
            let inv = tape.one_minus(fwd.score);
            let logn = tape.log_clamped(inv, 1e-7, 1.0 - 1e-7);
            let t = weighted_mean_rows(tape, logn, &w);
            term = Some(match term {
                Some(prev) => tape.add(prev, t),
                None => t,
            });
        }
        if let Some(t) = term {
            terms = Some(match terms {
                Some(prev) => tape.add(prev, t),
                None => t,
            });
        }
    }
    match terms {
        Some(t) => tape.scale(t, -1.0 / active.len().max(1) as f64),
        None => tape.constant(Array2::zeros((1, 1))),
    }
}

// --- the loop ---------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterRecord {
    pub phase: &'static str,
    pub iter: usize,
    pub lr: f64,
    pub parts: LossParts,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainReport {
    pub active_before: usize,
    pub active_after: usize,
}

pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<IterRecord>,
    pub pretrain: Option<PretrainReport>,
}

/// Encode a set of full trajectories in one ragged batch and return the
/// concatenated time-embedded latents plus per-trajectory lengths.
fn encode_full(model: &Model, data: &Dataset, traj_idx: &[usize]) -> Result<(Array2<f64>, Vec<usize>)> {
    let ds = data.state_dim();
    let da = data.action_dim();
    let a_coeff = model.cfg.encoder.time_embed_a;
    let capacity = model.encoder.capacity();
    let lens: Vec<usize> = traj_idx.iter().map(|&ti| data.trajectories[ti].len()).collect();
    if let Some(&too_long) = lens.iter().find(|&&l| l > capacity) {
        return Err(Error::SequenceTooLong {
            len: too_long,
            capacity,
        });
    }
    let total: usize = lens.iter().sum();
    let mut tokens = Array2::zeros((total, ds + da));
    let mut positions = Vec::with_capacity(total);
    let mut angles = Vec::with_capacity(total);
    let mut at = 0;
    for (&ti, &len) in traj_idx.iter().zip(&lens) {
        let traj = &data.trajectories[ti];
        let toks = encoder_tokens(traj.states.view(), traj.actions.view(), 0, len);
        tokens.slice_mut(s![at..at + len, ..]).assign(&toks);
        for t in 0..len {
            positions.push(t);
            angles.push(time_embed_angle(t, len, a_coeff));
        }
        at += len;
    }
    let mut tape = Tape::new();
    let bound = model.store.bind_all(&mut tape, false);
    let tv = tape.leaf(tokens, false);
    let (_, z) = model
        .encoder
        .forward_tape(&mut tape, &bound, tv, &positions, &lens, &angles);
    Ok((tape.value(z).clone(), lens))
}

/// Encode every trajectory and count concepts whose activation rate (the
/// fraction of trajectories they appear in) reaches the threshold.
pub fn count_active_concepts(model: &Model, data: &Dataset) -> Result<usize> {
    let k = model.codebook.num_concepts();
    let n_traj = data.trajectories.len();
    let mut seen = vec![0usize; k];
    for chunk in (0..n_traj).collect::<Vec<_>>().chunks(32) {
        let (z, lens) = encode_full(model, data, chunk)?;
        let (hard, _) = model.codebook.assign_batch(z.view());
        let mut at = 0;
        for &len in &lens {
            let mut here = vec![false; k];
            for &h in &hard[at..at + len] {
                here[h] = true;
            }
            for (s, &flag) in seen.iter_mut().zip(&here) {
                if flag {
                    *s += 1;
                }
            }
            at += len;
        }
    }
    Ok(seen
        .iter()
        .filter(|&&c| c as f64 / n_traj as f64 >= ACTIVE_RATE_THRESHOLD)
        .count())
}

/// Full-trajectory no-gradient pass for a set of trajectories: encode,
/// EMA-update the codebook from current assignments, re-assign with the
/// updated prototypes and return the per-trajectory labels.
fn assignment_pass(
    model: &mut Model,
    data: &Dataset,
    traj_idx: &[usize],
    update_ema: bool,
) -> Result<Vec<Vec<usize>>> {
    let (z, lens) = encode_full(model, data, traj_idx)?;
    if update_ema {
        let (hard, _) = model.codebook.assign_batch(z.view());
        model.codebook.ema_update(z.view(), &hard);
    }
    let (hard, _) = model.codebook.assign_batch(z.view());
    let mut labels = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &len in &lens {
        labels.push(hard[at..at + len].to_vec());
        at += len;
    }
    Ok(labels)
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if !data.normalized {
        return Err(Error::Invalid("training expects a normalized dataset".into()));
    }
    if data.state_dim() != cfg.model.state_dim || data.action_dim() != cfg.model.action_dim {
        return Err(Error::DimMismatch {
            context: "training data vs model config".into(),
            expected: format!("state {} action {}", cfg.model.state_dim, cfg.model.action_dim),
            actual: format!("state {} action {}", data.state_dim(), data.action_dim()),
        });
    }
    let longest = data.trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    if longest > cfg.model.encoder.window_len {
        return Err(Error::SequenceTooLong {
            len: longest,
            capacity: cfg.model.encoder.window_len,
        });
    }

    let mut model = Model::new(&cfg.model, &cfg.model.codebook, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E3779B97F4A7C15));
    let mut history = Vec::with_capacity(cfg.pretrain_iters + cfg.total_iters);

    let pretrain = if cfg.pretrain_iters > 0 {
        let before = count_active_concepts(&model, data)?;
        let mut opt = AdamW::new(&model.store, cfg.weight_decay);
        run_phase(&mut model, data, cfg, Phase::Pretrain, &mut opt, &mut rng, &mut history)?;
        let after = count_active_concepts(&model, data)?;
        Some(PretrainReport {
            active_before: before,
            active_after: after,
        })
    } else {
        None
    };

    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    run_phase(&mut model, data, cfg, Phase::Main, &mut opt, &mut rng, &mut history)?;

    Ok(TrainOutput {
        model,
        history,
        pretrain,
    })
}

fn run_phase(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<IterRecord>,
) -> Result<()> {
    let iters = match phase {
        Phase::Pretrain => cfg.pretrain_iters,
        Phase::Main => cfg.total_iters,
    };
    let n_traj = data.trajectories.len();
    let bsz = cfg.batch_size.min(n_traj);
    let defer_until = (cfg.gen_defer_fraction * cfg.total_iters as f64).ceil() as usize;

    for iter in 0..iters {
        let lr = warmup_cosine_lr(cfg.base_lr, cfg.warmup_iters, iters, iter);

        let traj_idx: Vec<usize> = rand::seq::index::sample(rng, n_traj, bsz).into_vec();
        let labels = assignment_pass(model, data, &traj_idx, true)?;
        let key_targets: Vec<Vec<usize>> = labels.iter().map(|l| key_state_targets(l)).collect();

        let starts: Vec<usize> = traj_idx
            .iter()
            .map(|&ti| {
                let t_len = data.trajectories[ti].len();
                if t_len > cfg.window_len {
                    rng.random_range(0..=t_len - cfg.window_len)
                } else {
                    0
                }
            })
            .collect();
        let batch = build_window_batch(
            data,
            &traj_idx,
            &starts,
            cfg.window_len,
            &key_targets,
            cfg.model.encoder.time_embed_a,
        );

        let include_gen = phase == Phase::Main
            && cfg.ablation != Ablation::DisOnly
            && iter >= defer_until;
        let include_dis = phase == Phase::Main && cfg.ablation != Ablation::GenOnly;
        let opts = LossOptions {
            include_gen,
            include_dis,
            lambda: cfg.lambda,
            lambda_rec: if phase == Phase::Pretrain { 1.0 } else { cfg.lambda_rec },
            square_rec: cfg.square_rec_loss,
            detach_compat_grad: cfg.detach_compat_grad,
            entropy_k: cfg
                .dataset_wide_entropy_k
                .then_some(cfg.model.codebook.num_concepts),
            quant: QuantMode::Straight,
            frozen_hard: None,
            frozen_p: None,
        };

        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape, true);
        let loss = build_total_loss(&mut tape, model, &bound, &batch, &opts);
        if !loss.parts.total.is_finite() {
            return Err(Error::Diverged {
                iteration: history.len(),
                loss: loss.parts.total,
            });
        }
        let grads = tape.backward(loss.total);
        opt.step(&mut model.store, &bound, &grads, lr);

        history.push(IterRecord {
            phase: phase.name(),
            iter,
            lr,
            parts: loss.parts,
        });
    }
    Ok(())
}

// --- gradient verification ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct GroupError {
    pub group: String,
    pub rel_err: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
    pub params_checked: usize,
}

/// Compare tape gradients of the soft-quantization objective against central
/// finite differences, per parameter group. The discrete structure (hard
/// assignments, key targets) is frozen at the base point.
pub fn gradient_check(data: &Dataset, cfg: &TrainConfig, step: f64) -> Result<GradCheckReport> {
    let mut model = Model::new(&cfg.model, &cfg.model.codebook, cfg.seed);
    let n = cfg.batch_size.min(data.trajectories.len());
    let traj_idx: Vec<usize> = (0..n).collect();
    let labels = assignment_pass(&mut model, data, &traj_idx, false)?;
    let key_targets: Vec<Vec<usize>> = labels.iter().map(|l| key_state_targets(l)).collect();
    let starts = vec![0; n];
    let batch = build_window_batch(
        data,
        &traj_idx,
        &starts,
        cfg.window_len,
        &key_targets,
        cfg.model.encoder.time_embed_a,
    );

    // Freeze hard labels from the base-point forward pass.
    let frozen: Vec<usize> = {
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape, false);
        let tokens = tape.leaf(batch.enc_tokens.clone(), false);
        let (_, z) = model.encoder.forward_tape(
            &mut tape,
            &bound,
            tokens,
            &batch.positions,
            &batch.lens,
            &batch.angles,
        );
        model.codebook.assign_probs_tape(&mut tape, z).1
    };

    let p_snapshot = model.store.get(model.codebook.p).clone();
    let opts = LossOptions {
        include_gen: true,
        include_dis: true,
        lambda: cfg.lambda.max(0.05),
        lambda_rec: cfg.lambda_rec.max(0.05),
        square_rec: cfg.square_rec_loss,
        detach_compat_grad: cfg.detach_compat_grad,
        entropy_k: None,
        quant: QuantMode::Soft,
        frozen_hard: Some(&frozen),
        frozen_p: Some(&p_snapshot),
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let bound = model.store.bind_all(&mut tape, true);
    let loss = build_total_loss(&mut tape, &model, &bound, &batch, &opts);
    let grads: Gradients = tape.backward(loss.total);
    let analytic: Vec<Array2<f64>> = (0..model.store.len())
        .map(|i| {
            grads
                .get(bound.var_at(i))
                .cloned()
                .unwrap_or_else(|| Array2::zeros(model.store.array(i).raw_dim()))
        })
        .collect();

    let eval = |model: &Model| -> f64 {
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape, false);
        let loss = build_total_loss(&mut tape, model, &bound, &batch, &opts);
        loss.parts.total
    };

    // Group by the first name component.
    let mut group_names: Vec<String> = Vec::new();
    for i in 0..model.store.len() {
        let g = model.store.name(i).split('.').next().unwrap().to_string();
        if !group_names.contains(&g) {
            group_names.push(g);
        }
    }

    let mut groups = Vec::new();
    let mut params_checked = 0;
    for gname in &group_names {
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        let mut an_sq = 0.0;
        for i in 0..model.store.len() {
            if model.store.name(i).split('.').next().unwrap() != gname {
                continue;
            }
            let shape = model.store.array(i).raw_dim();
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    let orig = model.store.array(i)[(r, c)];
                    model.store.array_mut(i)[(r, c)] = orig + step;
                    let fp = eval(&model);
                    model.store.array_mut(i)[(r, c)] = orig - step;
                    let fm = eval(&model);
                    model.store.array_mut(i)[(r, c)] = orig;
                    let fd = (fp - fm) / (2.0 * step);
                    let an = analytic[i][(r, c)];
                    diff_sq += (fd - an) * (fd - an);
                    fd_sq += fd * fd;
                    an_sq += an * an;
                    params_checked += 1;
                }
            }
        }
        let denom = fd_sq.max(an_sq).sqrt().max(1e-12);
        groups.push(GroupError {
            group: gname.clone(),
            rel_err: diff_sq.sqrt() / denom,
            grad_norm: an_sq.sqrt(),
        });
    }
    let max_rel_err = groups.iter().map(|g| g.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_err,
        params_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, normalize_dataset, standard_fixture_spec};

    fn tiny_data(n: usize) -> Dataset {
        let spec = standard_fixture_spec();
        let raw = generate_dataset(&spec, n, 123).unwrap();
        normalize_dataset(&raw).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::tiny(8, 2);
        cfg.model.encoder.window_len = 192;
        cfg.window_len = 12;
        cfg
    }

    #[test]
    fn loss_terms_select_per_options() {
        let data = tiny_data(3);
        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg.model, &cfg.model.codebook, 1);
        let idx = vec![0, 1];
        let labels = assignment_pass(&mut model, &data, &idx, false).unwrap();
        let keys: Vec<Vec<usize>> = labels.iter().map(|l| key_state_targets(l)).collect();
        let batch = build_window_batch(&data, &idx, &[0, 0], 12, &keys, 0.2);

        // dis-only with all coefficients zero leaves exactly the action term.
        let opts = LossOptions {
            include_gen: false,
            include_dis: true,
            lambda: 0.0,
            lambda_rec: 0.0,
            square_rec: false,
            detach_compat_grad: false,
            entropy_k: None,
            quant: QuantMode::Straight,
            frozen_hard: None,
            frozen_p: None,
        };
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape, false);
        let loss = build_total_loss(&mut tape, &model, &bound, &batch, &opts);
        assert_eq!(loss.parts.total, loss.parts.dis_a);
        assert!(loss.parts.dis_a > 0.0);
        assert!(loss.parts.gen == 0.0 && loss.parts.rec == 0.0);
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let data = tiny_data(6);
        let mut cfg = tiny_cfg();
        cfg.pretrain_iters = 5;
        cfg.total_iters = 20;
        cfg.warmup_iters = 3;
        cfg.batch_size = 3;
        cfg.base_lr = 3e-3;

        let out1 = train(&data, &cfg).unwrap();
        let out2 = train(&data, &cfg).unwrap();
        for i in 0..out1.model.store.len() {
            assert_eq!(out1.model.store.array(i), out2.model.store.array(i));
        }
        assert_eq!(out1.model.codebook.alpha, out2.model.codebook.alpha);
        let first = &out1.history[0];
        let last = out1.history.last().unwrap();
        assert_eq!(first.phase, "pretrain");
        assert_eq!(last.phase, "main");
        assert_eq!(out1.history.len(), 25);
    }

    #[test]
    fn gen_term_contributes_zero_gradient_before_defer() {
        let data = tiny_data(3);
        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg.model, &cfg.model.codebook, 2);
        let idx = vec![0, 1];
        let labels = assignment_pass(&mut model, &data, &idx, false).unwrap();
        let keys: Vec<Vec<usize>> = labels.iter().map(|l| key_state_targets(l)).collect();
        let batch = build_window_batch(&data, &idx, &[0, 0], 12, &keys, 0.2);
        let opts = LossOptions {
            include_gen: false,
            include_dis: false,
            lambda: 0.1,
            lambda_rec: 0.1,
            square_rec: false,
            detach_compat_grad: false,
            entropy_k: None,
            quant: QuantMode::Straight,
            frozen_hard: None,
            frozen_p: None,
        };
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape, true);
        let loss = build_total_loss(&mut tape, &model, &bound, &batch, &opts);
        let grads = tape.backward(loss.total);
        for i in 0..model.store.len() {
            if model.store.name(i).starts_with("genhead.") {
                assert!(
                    grads.get(bound.var_at(i)).is_none(),
                    "gen head received gradient before the defer point"
                );
            }
        }
    }

    #[test]
    fn divergence_guard_trips_on_nonfinite_loss() {
        let data = tiny_data(3);
        let mut cfg = tiny_cfg();
        cfg.pretrain_iters = 0;
        cfg.total_iters = 40;
        cfg.base_lr = 1e6; // guaranteed blow-up
        match train(&data, &cfg) {
            Err(Error::Diverged { .. }) => {}
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(_) => panic!("expected divergence, run completed"),
        }
    }
}
