//! Synthetic multi-phase trajectories with known key states.
//!
//! An agent lives in the plane; each phase sends it toward a waypoint sampled
//! from that phase's box. The waypoint coordinates are embedded in the state
//! vector so a sequence model can infer the goals. The timestep at which the
//! agent first comes within `arrival_eps` of the active waypoint is a
//! ground-truth key state; the trajectory ends when the last phase completes.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Axis-aligned box in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Box2 {
    pub fn point(p: [f64; 2]) -> Self {
        Self { min: p, max: p }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let x = if self.min[0] == self.max[0] {
            self.min[0]
        } else {
            rng.random_range(self.min[0]..self.max[0])
        };
        let y = if self.min[1] == self.max[1] {
            self.min[1]
        } else {
            rng.random_range(self.min[1]..self.max[1])
        };
        [x, y]
    }

    fn validate(&self) -> Result<()> {
        if self.min[0] > self.max[0] || self.min[1] > self.max[1] {
            return Err(Error::Config(format!(
                "box min {:?} exceeds max {:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub waypoint_sampler_box: Box2,
    pub arrival_eps: f64,
    pub action_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_phases: usize,
    pub phase_specs: Vec<PhaseSpec>,
    pub max_steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl SyntheticTaskSpec {
    pub fn new(phase_specs: Vec<PhaseSpec>, max_steps: usize) -> Self {
        let p = phase_specs.len();
        Self {
            num_phases: p,
            phase_specs,
            max_steps,
            state_dim: 2 + 2 * p,
            action_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_phases == 0 {
            return Err(Error::Config("num_phases must be >= 1".into()));
        }
        if self.phase_specs.len() != self.num_phases {
            return Err(Error::Config(format!(
                "expected {} phase specs, found {}",
                self.num_phases,
                self.phase_specs.len()
            )));
        }
        if self.max_steps < 2 * self.num_phases {
            return Err(Error::Config(format!(
                "max_steps {} must be at least 2 * num_phases = {}",
                self.max_steps,
                2 * self.num_phases
            )));
        }
        if self.state_dim != 2 + 2 * self.num_phases {
            return Err(Error::Config(format!(
                "state_dim must be 2 + 2 * num_phases = {}, got {}",
                2 + 2 * self.num_phases,
                self.state_dim
            )));
        }
        if self.action_dim != 2 {
            return Err(Error::Config("action_dim must be 2".into()));
        }
        for (i, ps) in self.phase_specs.iter().enumerate() {
            ps.waypoint_sampler_box.validate()?;
            if ps.arrival_eps <= 0.0 {
                return Err(Error::Config(format!("phase {i}: arrival_eps must be > 0")));
            }
            if ps.action_scale <= 0.0 {
                return Err(Error::Config(format!("phase {i}: action_scale must be > 0")));
            }
            if ps.noise_sigma < 0.0 {
                return Err(Error::Config(format!("phase {i}: noise_sigma must be >= 0")));
            }
        }
        Ok(())
    }

    /// Displacement cap applied by the environment.
    pub fn clip_limit(&self) -> f64 {
        1.5 * self
            .phase_specs
            .iter()
            .map(|p| p.action_scale)
            .fold(0.0, f64::max)
    }

    /// Waypoint of phase `k` as embedded in a state vector.
    pub fn waypoint_of(&self, state: ArrayView1<f64>, k: usize) -> [f64; 2] {
        [state[2 + 2 * k], state[3 + 2 * k]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// T x state_dim.
    pub states: Array2<f64>,
    /// T x action_dim; the final row is a zero no-op.
    pub actions: Array2<f64>,
    /// Phase label per timestep (evaluation only).
    pub gt_phase: Option<Vec<usize>>,
    /// Phase arrival timesteps; the last entry is T - 1.
    pub gt_key_times: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Per-dimension standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub state_mean: Array1<f64>,
    pub state_std: Array1<f64>,
    pub action_mean: Array1<f64>,
    pub action_std: Array1<f64>,
}

impl NormStats {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: Array1::zeros(state_dim),
            state_std: Array1::ones(state_dim),
            action_mean: Array1::zeros(action_dim),
            action_std: Array1::ones(action_dim),
        }
    }

    pub fn normalize_state(&self, raw: ArrayView1<f64>) -> Array1<f64> {
        (&raw - &self.state_mean) / &self.state_std
    }

    pub fn denormalize_state(&self, norm: ArrayView1<f64>) -> Array1<f64> {
        &norm * &self.state_std + &self.state_mean
    }

    pub fn normalize_action(&self, raw: ArrayView1<f64>) -> Array1<f64> {
        (&raw - &self.action_mean) / &self.action_std
    }

    pub fn denormalize_action(&self, norm: ArrayView1<f64>) -> Array1<f64> {
        &norm * &self.action_std + &self.action_mean
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
    pub spec: SyntheticTaskSpec,
    /// Whether `trajectories` currently hold standardized values.
    pub normalized: bool,
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim
    }
}

const STD_FLOOR: f64 = 1e-6;

/// Advance the environment by one action. The displacement is the action
/// clipped to magnitude `1.5 * action_scale` (largest phase scale); waypoint
/// coordinates never move.
pub fn env_step(
    state: ArrayView1<f64>,
    action: ArrayView1<f64>,
    spec: &SyntheticTaskSpec,
) -> Result<Array1<f64>> {
    if state.len() != spec.state_dim {
        return Err(Error::DimMismatch {
            context: "env_step state".into(),
            expected: spec.state_dim.to_string(),
            actual: state.len().to_string(),
        });
    }
    if action.len() != spec.action_dim {
        return Err(Error::DimMismatch {
            context: "env_step action".into(),
            expected: spec.action_dim.to_string(),
            actual: action.len().to_string(),
        });
    }
    let limit = spec.clip_limit();
    let mag = (action[0] * action[0] + action[1] * action[1]).sqrt();
    let f = if mag > limit { limit / mag } else { 1.0 };
    let mut next = state.to_owned();
    next[0] += action[0] * f;
    next[1] += action[1] * f;
    Ok(next)
}

/// True iff the agent sits within the final phase's arrival radius of the
/// final waypoint.
pub fn rollout_success(final_state: ArrayView1<f64>, spec: &SyntheticTaskSpec) -> bool {
    let last = spec.num_phases - 1;
    let wp = spec.waypoint_of(final_state, last);
    let dx = final_state[0] - wp[0];
    let dy = final_state[1] - wp[1];
    (dx * dx + dy * dy).sqrt() < spec.phase_specs[last].arrival_eps
}

/// Waypoints and start position for one task instance. The agent starts
/// where phase 0's waypoints are drawn from.
fn sample_instance(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, [f64; 2]) {
    let waypoints: Vec<[f64; 2]> = spec
        .phase_specs
        .iter()
        .map(|p| p.waypoint_sampler_box.sample(rng))
        .collect();
    let start = spec.phase_specs[0].waypoint_sampler_box.sample(rng);
    (waypoints, start)
}

fn build_state(spec: &SyntheticTaskSpec, waypoints: &[[f64; 2]], pos: [f64; 2]) -> Array1<f64> {
    let mut state = Array1::zeros(spec.state_dim);
    state[0] = pos[0];
    state[1] = pos[1];
    for (k, wp) in waypoints.iter().enumerate() {
        state[2 + 2 * k] = wp[0];
        state[3 + 2 * k] = wp[1];
    }
    state
}

/// Initial state of the task instance a seed defines; matches the first
/// state [`generate_trajectory`] produces for the same seed.
pub fn initial_state(spec: &SyntheticTaskSpec, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (waypoints, start) = sample_instance(spec, &mut rng);
    build_state(spec, &waypoints, start)
}

/// Generate one trajectory. Fails if the phases do not all complete within
/// `max_steps` states; callers resample with a shifted seed.
pub fn generate_trajectory(spec: &SyntheticTaskSpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (waypoints, start) = sample_instance(spec, &mut rng);
    let mut state = build_state(spec, &waypoints, start);

    let mut states = vec![state.clone()];
    let mut actions: Vec<Array1<f64>> = Vec::new();
    let mut gt_phase = vec![0usize];
    let mut gt_key_times = Vec::new();
    let mut phase = 0usize;

    while phase < spec.num_phases {
        if states.len() >= spec.max_steps {
            return Err(Error::Generation(format!(
                "phase {phase} incomplete after max_steps {} (seed {seed})",
                spec.max_steps
            )));
        }
        let ps = &spec.phase_specs[phase];
        let wp = waypoints[phase];
        let pos = [state[0], state[1]];
        let dx = wp[0] - pos[0];
        let dy = wp[1] - pos[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let dir = if dist > 1e-12 {
            [dx / dist, dy / dist]
        } else {
            [0.0, 0.0]
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let raw = Array1::from_vec(vec![
            ps.action_scale * dir[0] + ps.noise_sigma * nx,
            ps.action_scale * dir[1] + ps.noise_sigma * ny,
        ]);
        let next = env_step(state.view(), raw.view(), spec)?;
        // Record the executed displacement so states[t+1] = states[t] + action.
        let executed = Array1::from_vec(vec![next[0] - state[0], next[1] - state[1]]);

        let t_next = states.len();
        let ddx = next[0] - wp[0];
        let ddy = next[1] - wp[1];
        let arrived = (ddx * ddx + ddy * ddy).sqrt() < ps.arrival_eps;

        actions.push(executed);
        states.push(next.clone());
        gt_phase.push(phase);
        state = next;

        if arrived {
            gt_key_times.push(t_next);
            phase += 1;
        }
    }

    // No-op action on the final state keeps rows aligned.
    actions.push(Array1::zeros(spec.action_dim));

    let t = states.len();
    let mut sm = Array2::zeros((t, spec.state_dim));
    let mut am = Array2::zeros((t, spec.action_dim));
    for (i, s) in states.iter().enumerate() {
        sm.row_mut(i).assign(s);
    }
    for (i, a) in actions.iter().enumerate() {
        am.row_mut(i).assign(a);
    }
    Ok(Trajectory {
        states: sm,
        actions: am,
        gt_phase: Some(gt_phase),
        gt_key_times: Some(gt_key_times),
    })
}

/// Seed for trajectory `index`, retry `attempt`.
fn traj_seed(base: u64, index: usize, attempt: usize) -> u64 {
    base.wrapping_add(index as u64)
        .wrapping_add(attempt as u64 * 1_000_003)
}

const MAX_ATTEMPTS: usize = 64;

/// Generate `n` trajectories, resampling failures with shifted seeds.
pub fn generate_dataset(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one trajectory".into()));
    }
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut done = false;
        for attempt in 0..MAX_ATTEMPTS {
            match generate_trajectory(spec, traj_seed(seed, i, attempt)) {
                Ok(t) => {
                    trajectories.push(t);
                    done = true;
                    break;
                }
                Err(Error::Generation(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "trajectory {i}: no complete rollout within {MAX_ATTEMPTS} attempts; \
                 check arrival_eps vs action_scale"
            )));
        }
    }
    let stats = compute_stats(&trajectories, spec);
    Ok(Dataset {
        trajectories,
        stats,
        spec: spec.clone(),
        normalized: false,
    })
}

fn compute_stats(trajectories: &[Trajectory], spec: &SyntheticTaskSpec) -> NormStats {
    let mut stats = NormStats::identity(spec.state_dim, spec.action_dim);
    let mut count = 0.0;
    let mut s_sum = Array1::<f64>::zeros(spec.state_dim);
    let mut s_sq = Array1::<f64>::zeros(spec.state_dim);
    let mut a_sum = Array1::<f64>::zeros(spec.action_dim);
    let mut a_sq = Array1::<f64>::zeros(spec.action_dim);
    for t in trajectories {
        for row in t.states.rows() {
            s_sum += &row;
            s_sq += &row.mapv(|x| x * x);
        }
        for row in t.actions.rows() {
            a_sum += &row;
            a_sq += &row.mapv(|x| x * x);
        }
        count += t.len() as f64;
    }
    stats.state_mean = &s_sum / count;
    stats.action_mean = &a_sum / count;
    stats.state_std = (&s_sq / count - &stats.state_mean.mapv(|x| x * x))
        .mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
    stats.action_std = (&a_sq / count - &stats.action_mean.mapv(|x| x * x))
        .mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
    // Constant dimensions: snap the mean onto the observed value so the
    // floored std maps them to exactly zero instead of amplified rounding
    // noise from the mean accumulation.
    let first = &trajectories[0];
    for j in 0..spec.state_dim {
        if stats.state_std[j] == STD_FLOOR {
            stats.state_mean[j] = first.states[(0, j)];
        }
    }
    for j in 0..spec.action_dim {
        if stats.action_std[j] == STD_FLOOR {
            stats.action_mean[j] = first.actions[(0, j)];
        }
    }
    stats
}

/// Standardize states and actions to zero mean and unit variance per
/// dimension (std floored at `1e-6`).
pub fn normalize_dataset(d: &Dataset) -> Result<Dataset> {
    if d.trajectories.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty dataset".into()));
    }
    let stats = compute_stats(&d.trajectories, &d.spec);
    normalize_dataset_with(d, &stats)
}

/// Standardize with externally supplied statistics (e.g. the stats a model
/// was trained with).
pub fn normalize_dataset_with(d: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if d.trajectories.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty dataset".into()));
    }
    if d.normalized {
        return Err(Error::Invalid("dataset is already normalized".into()));
    }
    if stats.state_mean.len() != d.spec.state_dim || stats.action_mean.len() != d.spec.action_dim {
        return Err(Error::DimMismatch {
            context: "normalization stats".into(),
            expected: format!("state {} action {}", d.spec.state_dim, d.spec.action_dim),
            actual: format!("state {} action {}", stats.state_mean.len(), stats.action_mean.len()),
        });
    }
    let stats = stats.clone();
    let trajectories = d
        .trajectories
        .iter()
        .map(|t| {
            let mut states = t.states.clone();
            for mut row in states.rows_mut() {
                let n = stats.normalize_state(row.view());
                row.assign(&n);
            }
            let mut actions = t.actions.clone();
            for mut row in actions.rows_mut() {
                let n = stats.normalize_action(row.view());
                row.assign(&n);
            }
            Trajectory {
                states,
                actions,
                gt_phase: t.gt_phase.clone(),
                gt_key_times: t.gt_key_times.clone(),
            }
        })
        .collect();
    Ok(Dataset {
        trajectories,
        stats,
        spec: d.spec.clone(),
        normalized: true,
    })
}

// --- persistence -----------------------------------------------------------

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format_version: u32,
    count: usize,
    spec: SyntheticTaskSpec,
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    action_mean: Vec<f64>,
    action_std: Vec<f64>,
    normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct TrajFile {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    gt_phase: Option<Vec<usize>>,
    gt_key_times: Option<Vec<usize>>,
}

/// JSON formatter printing floats with 17 significant digits so every f64
/// round-trips bit-exactly.
struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize to JSON with full-precision floats.
pub fn to_json_precise<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Invalid(format!("json serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn traj_file_name(i: usize) -> String {
    format!("traj_{i:05}.json")
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let meta = MetaFile {
        format_version: DATASET_FORMAT_VERSION,
        count: d.trajectories.len(),
        spec: d.spec.clone(),
        state_mean: d.stats.state_mean.to_vec(),
        state_std: d.stats.state_std.to_vec(),
        action_mean: d.stats.action_mean.to_vec(),
        action_std: d.stats.action_std.to_vec(),
        normalized: d.normalized,
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, to_json_precise(&meta)?).map_err(Error::io(&meta_path))?;
    for (i, t) in d.trajectories.iter().enumerate() {
        let tf = TrajFile {
            states: t.states.rows().into_iter().map(|r| r.to_vec()).collect(),
            actions: t.actions.rows().into_iter().map(|r| r.to_vec()).collect(),
            gt_phase: t.gt_phase.clone(),
            gt_key_times: t.gt_key_times.clone(),
        };
        let path = dir.join(traj_file_name(i));
        std::fs::write(&path, to_json_precise(&tf)?).map_err(Error::io(&path))?;
    }
    Ok(())
}

fn rows_to_array(rows: &[Vec<f64>], dim: usize, path: &Path, field: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::data(
                path,
                format!("field `{field}` row {i}: expected {dim} entries, found {}", row.len()),
            ));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::data(path, format!("field `{field}` row {i} holds {v}")));
            }
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
    let meta: MetaFile = serde_json::from_str(&meta_text)
        .map_err(|e| Error::data(&meta_path, format!("invalid meta.json: {e}")))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::data(
            &meta_path,
            format!(
                "field `format_version`: expected {DATASET_FORMAT_VERSION}, found {}",
                meta.format_version
            ),
        ));
    }
    meta.spec.validate()?;
    let (ds, da) = (meta.spec.state_dim, meta.spec.action_dim);
    for (name, v, want) in [
        ("state_mean", &meta.state_mean, ds),
        ("state_std", &meta.state_std, ds),
        ("action_mean", &meta.action_mean, da),
        ("action_std", &meta.action_std, da),
    ] {
        if v.len() != want {
            return Err(Error::data(
                &meta_path,
                format!("field `{name}`: expected length {want}, found {}", v.len()),
            ));
        }
    }
    if meta.state_std.iter().chain(&meta.action_std).any(|&s| s <= 0.0) {
        return Err(Error::data(&meta_path, "field `state_std`/`action_std`: entries must be > 0"));
    }

    let mut trajectories = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let path = dir.join(traj_file_name(i));
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let tf: TrajFile = serde_json::from_str(&text)
            .map_err(|e| Error::data(&path, format!("invalid trajectory json: {e}")))?;
        let states = rows_to_array(&tf.states, ds, &path, "states")?;
        let actions = rows_to_array(&tf.actions, da, &path, "actions")?;
        if states.nrows() != actions.nrows() {
            return Err(Error::data(
                &path,
                format!(
                    "field `actions`: {} rows but `states` has {}",
                    actions.nrows(),
                    states.nrows()
                ),
            ));
        }
        if states.nrows() < 2 {
            return Err(Error::data(&path, "field `states`: needs at least 2 rows"));
        }
        let t_len = states.nrows();
        if let Some(phases) = &tf.gt_phase {
            if phases.len() != t_len {
                return Err(Error::data(
                    &path,
                    format!("field `gt_phase`: expected length {t_len}, found {}", phases.len()),
                ));
            }
            if phases.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::data(&path, "field `gt_phase`: must be nondecreasing"));
            }
        }
        if let Some(keys) = &tf.gt_key_times {
            if keys.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::data(&path, "field `gt_key_times`: must be strictly increasing"));
            }
            if keys.last() != Some(&(t_len - 1)) {
                return Err(Error::data(&path, "field `gt_key_times`: last entry must be T-1"));
            }
        }
        trajectories.push(Trajectory {
            states,
            actions,
            gt_phase: tf.gt_phase,
            gt_key_times: tf.gt_key_times,
        });
    }
    Ok(Dataset {
        trajectories,
        stats: NormStats {
            state_mean: Array1::from_vec(meta.state_mean),
            state_std: Array1::from_vec(meta.state_std),
            action_mean: Array1::from_vec(meta.action_mean),
            action_std: Array1::from_vec(meta.action_std),
        },
        spec: meta.spec,
        normalized: meta.normalized,
    })
}

/// Three-phase task used throughout the tests and by the acceptance suite.
pub fn standard_fixture_spec() -> SyntheticTaskSpec {
    let phase = |bx: Box2| PhaseSpec {
        waypoint_sampler_box: bx,
        arrival_eps: 0.055,
        action_scale: 0.045,
        noise_sigma: 0.008,
    };
    SyntheticTaskSpec::new(
        vec![
            phase(Box2 {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            }),
            phase(Box2 {
                min: [1.4, 0.0],
                max: [2.0, 0.8],
            }),
            phase(Box2 {
                min: [1.2, 1.4],
                max: [2.0, 2.0],
            }),
        ],
        160,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn point_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec::new(
            vec![PhaseSpec {
                waypoint_sampler_box: Box2::point([0.3, 0.4]),
                arrival_eps: 0.05,
                action_scale: 0.04,
                noise_sigma: 0.0,
            }],
            50,
        )
    }

    #[test]
    fn start_at_waypoint_completes_after_one_step() {
        let t = generate_trajectory(&point_spec(), 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.gt_key_times.as_deref(), Some(&[1][..]));
        assert_eq!(t.gt_phase.as_deref(), Some(&[0, 0][..]));
        assert_eq!(t.actions.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn three_phase_labels_are_monotone() {
        let spec = standard_fixture_spec();
        let t = generate_trajectory(&spec, 7).unwrap();
        let phases = t.gt_phase.as_ref().unwrap();
        assert!(phases.windows(2).all(|w| w[1] >= w[0]));
        let distinct: std::collections::BTreeSet<_> = phases.iter().collect();
        assert_eq!(distinct.len(), 3);
        let keys = t.gt_key_times.as_ref().unwrap();
        assert_eq!(keys.len(), 3);
        assert_eq!(*keys.last().unwrap(), t.len() - 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = standard_fixture_spec();
        let a = generate_trajectory(&spec, 42).unwrap();
        let b = generate_trajectory(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn key_times_match_phase_increments() {
        let spec = standard_fixture_spec();
        for seed in 0..20 {
            let Ok(t) = generate_trajectory(&spec, seed) else {
                continue;
            };
            let phases = t.gt_phase.as_ref().unwrap();
            let mut expect: Vec<usize> = phases
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[1] > w[0])
                .map(|(i, _)| i)
                .collect();
            expect.push(t.len() - 1);
            assert_eq!(t.gt_key_times.as_ref().unwrap(), &expect);
        }
    }

    #[test]
    fn env_step_examples() {
        let spec = point_spec();
        let state = Array1::from_vec(vec![0.0, 0.0, 0.3, 0.4]);

        let zero = Array1::zeros(2);
        let s1 = env_step(state.view(), zero.view(), &spec).unwrap();
        assert_eq!(s1, state);

        let a = Array1::from_vec(vec![0.02, 0.0]);
        let s2 = env_step(state.view(), a.view(), &spec).unwrap();
        assert_relative_eq!(s2[0], 0.02);
        assert_relative_eq!(s2[1], 0.0);

        // Magnitude 10 with scale 0.04 clips to 0.06.
        let big = Array1::from_vec(vec![6.0, 8.0]);
        let s3 = env_step(state.view(), big.view(), &spec).unwrap();
        let mag = (s3[0] * s3[0] + s3[1] * s3[1]).sqrt();
        assert_relative_eq!(mag, 0.06, max_relative = 1e-12);

        let bad = Array1::zeros(3);
        assert!(env_step(state.view(), bad.view(), &spec).is_err());
    }

    #[test]
    fn rollout_success_boundary() {
        let spec = point_spec();
        let eps = spec.phase_specs[0].arrival_eps;
        let at = Array1::from_vec(vec![0.3, 0.4, 0.3, 0.4]);
        assert!(rollout_success(at.view(), &spec));
        let far = Array1::from_vec(vec![0.3 + 2.0 * eps, 0.4, 0.3, 0.4]);
        assert!(!rollout_success(far.view(), &spec));
        let near = Array1::from_vec(vec![0.3 + 0.99 * eps, 0.4, 0.3, 0.4]);
        assert!(rollout_success(near.view(), &spec));
    }

    #[test]
    fn normalize_degenerate_dims_floor_std() {
        let spec = point_spec();
        let d = generate_dataset(&spec, 3, 0).unwrap();
        // Waypoint dims are constant across the dataset (point box).
        let n = normalize_dataset(&d).unwrap();
        assert_eq!(n.stats.state_std[2], STD_FLOOR);
        for t in &n.trajectories {
            for row in t.states.rows() {
                assert_eq!(row[2], 0.0);
                assert_eq!(row[3], 0.0);
            }
        }
    }

    #[test]
    fn normalization_round_trips() {
        let spec = standard_fixture_spec();
        let d = generate_dataset(&spec, 5, 3).unwrap();
        let n = normalize_dataset(&d).unwrap();
        for (raw, norm) in d.trajectories.iter().zip(&n.trajectories) {
            for (r_raw, r_norm) in raw.states.rows().into_iter().zip(norm.states.rows()) {
                let back = n.stats.denormalize_state(r_norm);
                for (a, b) in r_raw.iter().zip(back.iter()) {
                    let scale = a.abs().max(1.0);
                    assert!((a - b).abs() / scale < 1e-6);
                }
            }
        }
        assert!(normalize_dataset(&n).is_err());
    }

    #[test]
    fn hand_computed_mean() {
        // Two single-phase trajectories built by hand through the generator's
        // stats path: mean over all state rows.
        let spec = point_spec();
        let mut d = generate_dataset(&spec, 2, 0).unwrap();
        d.trajectories[0].states = ndarray::array![
            [0.0, 0.0, 0.3, 0.4],
            [2.0, 4.0, 0.3, 0.4],
        ];
        d.trajectories[1].states = ndarray::array![
            [4.0, 8.0, 0.3, 0.4],
            [6.0, 4.0, 0.3, 0.4],
        ];
        let stats = compute_stats(&d.trajectories, &d.spec);
        assert_relative_eq!(stats.state_mean[0], 3.0);
        assert_relative_eq!(stats.state_mean[1], 4.0);
        assert_relative_eq!(stats.state_mean[2], 0.3);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let spec = standard_fixture_spec();
        let d = generate_dataset(&spec, 4, 11).unwrap();
        let dir = std::env::temp_dir().join(format!("infocon_ds_{}", std::process::id()));
        save_dataset(&d, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(d.trajectories.len(), back.trajectories.len());
        for (a, b) in d.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a, b);
        }
        assert_eq!(d.stats, back.stats);
        assert_eq!(d.spec, back.spec);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn load_reports_offending_file_and_field() {
        let spec = point_spec();
        let d = generate_dataset(&spec, 2, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("infocon_bad_{}", std::process::id()));
        save_dataset(&d, &dir).unwrap();
        let victim = dir.join(traj_file_name(1));
        let text = std::fs::read_to_string(&victim).unwrap();
        // Drop one coordinate from the first state row.
        let broken = text.replacen("],", "]x", 1).replace("]x", "],").replacen(",", "", 1);
        std::fs::write(&victim, broken).unwrap();
        let err = load_dataset(&dir).unwrap_err().to_string();
        assert!(err.contains("traj_00001.json"), "error was: {err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fixture_lengths_are_reasonable() {
        let spec = standard_fixture_spec();
        let d = generate_dataset(&spec, 32, 0).unwrap();
        let mean_len: f64 =
            d.trajectories.iter().map(|t| t.len() as f64).sum::<f64>() / d.trajectories.len() as f64;
        assert!(
            (40.0..=90.0).contains(&mean_len),
            "mean trajectory length {mean_len}"
        );
        for t in &d.trajectories {
            assert!(t.gt_key_times.as_ref().unwrap().len() == 3);
        }
    }
}
