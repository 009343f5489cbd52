//! Model and training configuration.
//!
//! Config files are plain JSON with every field explicit; unknown fields are
//! rejected so a stale config fails loudly instead of silently falling back
//! to defaults. The constructors below are the single place defaults live.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Latent width M.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Positional capacity: the longest trajectory the encoder accepts.
    pub window_len: usize,
    /// Coefficient A of the spherical time embedding.
    pub time_embed_a: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// Number of concepts K.
    pub num_concepts: usize,
    /// Assignment softmax temperature, shared with the compatibility score.
    pub tau: f64,
    /// EMA coefficient for prototype updates.
    pub c_ema: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperNetConfig {
    /// Hidden layers H generated inside each compatibility function.
    pub num_hidden_layers: usize,
    /// Width of the generated hidden layers.
    pub hidden_width: usize,
    /// Length of the probe segment; must equal `hidden_width`.
    pub probe_dim: usize,
    /// Width of the intermediate feature between the per-segment layers and
    /// the shared output layer.
    pub mid_dim: usize,
}

impl HyperNetConfig {
    /// Length of a concept's compressed parameter vector: H + 1 equal
    /// segments (one per generated layer, plus the probe).
    pub fn param_len(&self) -> usize {
        (self.num_hidden_layers + 1) * self.seg_len()
    }

    pub fn seg_len(&self) -> usize {
        self.hidden_width
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_layers: usize,
    pub num_heads: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub encoder: EncoderConfig,
    pub codebook: CodebookConfig,
    pub hypernet: HyperNetConfig,
    /// Key-state predictor.
    pub gen_head: HeadConfig,
    /// Action policy trained on compatibility gradients.
    pub policy: HeadConfig,
    /// State reconstructor over assigned concepts.
    pub decoder: HeadConfig,
    /// MLP expansion ratio inside transformer blocks.
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full objective.
    All,
    /// Drop both discriminative terms.
    GenOnly,
    /// Drop the generative key-state term.
    DisOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Ablation::All),
            "gen_only" => Ok(Ablation::GenOnly),
            "dis_only" => Ok(Ablation::DisOnly),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected all, gen_only or dis_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Weight on the classification + entropy terms.
    pub lambda: f64,
    /// Weight on the reconstruction term during the main phase.
    pub lambda_rec: f64,
    pub pretrain_iters: usize,
    pub total_iters: usize,
    /// Fraction of the main phase during which the generative term is held
    /// at zero.
    pub gen_defer_fraction: f64,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    /// Trajectories per optimization step.
    pub batch_size: usize,
    /// Length of the state segment sampled from each trajectory.
    pub window_len: usize,
    pub ablation: Ablation,
    /// Square the reconstruction residual norm instead of using the plain
    /// L2 norm.
    pub square_rec_loss: bool,
    /// Stop gradients flowing through the compatibility gradient into the
    /// hyper-network and encoder (ablation switch).
    pub detach_compat_grad: bool,
    /// Average the assignment-confidence loss over all K concepts instead of
    /// only the concepts active in the batch.
    pub dataset_wide_entropy_k: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Hyperparameters at the scale the reference experiments use.
    pub fn paper(state_dim: usize, action_dim: usize) -> Self {
        Self {
            seed: 0,
            lambda: 0.001,
            lambda_rec: 0.1,
            pretrain_iters: 10_000,
            total_iters: 1_600_000,
            gen_defer_fraction: 0.5,
            base_lr: 1e-4,
            warmup_iters: 1000,
            weight_decay: 1e-3,
            batch_size: 256,
            window_len: 60,
            ablation: Ablation::All,
            square_rec_loss: false,
            detach_compat_grad: false,
            dataset_wide_entropy_k: false,
            model: ModelConfig {
                state_dim,
                action_dim,
                encoder: EncoderConfig {
                    hidden_dim: 128,
                    num_layers: 4,
                    num_heads: 8,
                    window_len: 256,
                    time_embed_a: 0.2,
                },
                codebook: CodebookConfig {
                    num_concepts: 10,
                    tau: 0.1,
                    c_ema: 0.9,
                },
                hypernet: HyperNetConfig {
                    num_hidden_layers: 1,
                    hidden_width: 128,
                    probe_dim: 128,
                    mid_dim: 128,
                },
                gen_head: HeadConfig {
                    num_layers: 2,
                    num_heads: 8,
                },
                policy: HeadConfig {
                    num_layers: 1,
                    num_heads: 8,
                },
                decoder: HeadConfig {
                    num_layers: 4,
                    num_heads: 8,
                },
                mlp_ratio: 4,
            },
        }
    }

    /// Scaled-down configuration for single-core runs on the synthetic task.
    pub fn desk(state_dim: usize, action_dim: usize) -> Self {
        let mut cfg = Self::paper(state_dim, action_dim);
        cfg.pretrain_iters = 250;
        cfg.total_iters = 2000;
        cfg.base_lr = 1e-3;
        cfg.warmup_iters = 100;
        cfg.batch_size = 8;
        cfg.model.encoder.hidden_dim = 32;
        cfg.model.encoder.num_heads = 4;
        cfg.model.encoder.window_len = 192;
        cfg.model.codebook.num_concepts = 6;
        cfg.model.hypernet.hidden_width = 16;
        cfg.model.hypernet.probe_dim = 16;
        cfg.model.hypernet.mid_dim = 16;
        cfg.model.gen_head.num_heads = 4;
        cfg.model.policy.num_heads = 4;
        cfg.model.decoder.num_heads = 4;
        cfg.model.mlp_ratio = 2;
        cfg
    }

    /// Minimal shape used by the finite-difference gradient checks.
    pub fn tiny(state_dim: usize, action_dim: usize) -> Self {
        let mut cfg = Self::paper(state_dim, action_dim);
        cfg.pretrain_iters = 0;
        cfg.total_iters = 100;
        cfg.warmup_iters = 10;
        cfg.batch_size = 2;
        cfg.window_len = 12;
        cfg.model.encoder.hidden_dim = 8;
        cfg.model.encoder.num_heads = 2;
        cfg.model.encoder.window_len = 16;
        cfg.model.codebook.num_concepts = 3;
        cfg.model.hypernet.hidden_width = 8;
        cfg.model.hypernet.probe_dim = 8;
        cfg.model.hypernet.mid_dim = 8;
        cfg.model.gen_head.num_heads = 2;
        cfg.model.policy.num_heads = 2;
        cfg.model.decoder.num_heads = 2;
        cfg.model.mlp_ratio = 2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let err = |msg: String| Err(Error::Config(msg));
        if self.lambda < 0.0 || self.lambda_rec < 0.0 {
            return err("lambda and lambda_rec must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.gen_defer_fraction) {
            return err("gen_defer_fraction must lie in [0, 1]".into());
        }
        if self.total_iters == 0 {
            return err("total_iters must be positive".into());
        }
        if self.batch_size == 0 || self.window_len == 0 {
            return err("batch_size and window_len must be positive".into());
        }
        if self.base_lr <= 0.0 {
            return err("base_lr must be positive".into());
        }
        if m.state_dim < 2 || m.action_dim == 0 {
            return err("state_dim must be >= 2 and action_dim positive".into());
        }
        if m.encoder.hidden_dim == 0 || m.encoder.hidden_dim % m.encoder.num_heads != 0 {
            return err("encoder hidden_dim must be divisible by num_heads".into());
        }
        if m.encoder.time_embed_a <= 0.0 {
            return err("time_embed_a must be positive".into());
        }
        if self.window_len > m.encoder.window_len {
            return err(format!(
                "training window {} exceeds encoder positional capacity {}",
                self.window_len, m.encoder.window_len
            ));
        }
        if m.codebook.num_concepts == 0 {
            return err("num_concepts must be >= 1".into());
        }
        if m.codebook.tau <= 0.0 {
            return err("tau must be positive".into());
        }
        if !(0.0 < m.codebook.c_ema && m.codebook.c_ema < 1.0) {
            return err("c_ema must lie strictly inside (0, 1)".into());
        }
        if m.hypernet.num_hidden_layers == 0 {
            return err("hypernet num_hidden_layers must be >= 1".into());
        }
        if m.hypernet.probe_dim != m.hypernet.hidden_width {
            return err("hypernet probe_dim must equal hidden_width".into());
        }
        if m.state_dim > m.hypernet.hidden_width {
            return err(format!(
                "state_dim {} exceeds hypernet hidden_width {}; the shared output \
                 layer sizes generated weights for hidden_width inputs",
                m.state_dim, m.hypernet.hidden_width
            ));
        }
        for (name, h) in [
            ("gen_head", &m.gen_head),
            ("policy", &m.policy),
            ("decoder", &m.decoder),
        ] {
            if h.num_layers == 0 {
                return err(format!("{name} num_layers must be >= 1"));
            }
        }
        if m.mlp_ratio == 0 {
            return err("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::paper(8, 2).validate().unwrap();
        TrainConfig::desk(8, 2).validate().unwrap();
        TrainConfig::tiny(8, 2).validate().unwrap();
    }

    #[test]
    fn json_round_trip_rejects_unknown_fields() {
        let cfg = TrainConfig::desk(8, 2);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();

        let broken = text.replace("\"seed\"", "\"sneed\"");
        assert!(serde_json::from_str::<TrainConfig>(&broken).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::desk(8, 2);
        cfg.model.codebook.c_ema = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk(8, 2);
        cfg.gen_defer_fraction = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk(8, 2);
        cfg.model.encoder.num_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
