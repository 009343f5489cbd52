//! The full model: encoder, reconstructor, heads, hyper-network and
//! codebook over one parameter store.

use crate::codebook::Codebook;
use crate::config::ModelConfig;
use crate::encoder::{StateEncoder, StateReconstructor};
use crate::error::Result;
use crate::heads::{CompatPolicy, GenPredictor, HyperNet};
use crate::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Model {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub encoder: StateEncoder,
    pub decoder: StateReconstructor,
    pub gen_head: GenPredictor,
    pub policy: CompatPolicy,
    pub hypernet: HyperNet,
    pub codebook: Codebook,
}

impl Model {
    /// Construction order fixes parameter naming and checkpoint layout:
    /// encoder, decoder, genhead, policy, hypernet, codebook.
    pub fn new(cfg: &ModelConfig, tau_cfg: &crate::config::CodebookConfig, seed: u64) -> Model {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = StateEncoder::new(&mut store, cfg, &mut rng);
        let decoder = StateReconstructor::new(&mut store, cfg, &mut rng);
        let gen_head = GenPredictor::new(&mut store, cfg, &mut rng);
        let policy = CompatPolicy::new(&mut store, cfg, &mut rng);
        let hypernet = HyperNet::new(&mut store, cfg, &mut rng);
        let codebook = Codebook::new(
            &mut store,
            tau_cfg,
            &cfg.hypernet,
            cfg.encoder.hidden_dim + 1,
            &mut rng,
        );
        Model {
            store,
            cfg: cfg.clone(),
            encoder,
            decoder,
            gen_head,
            policy,
            hypernet,
            codebook,
        }
    }

    pub fn from_config(cfg: &ModelConfig, codebook: &crate::config::CodebookConfig, seed: u64) -> Result<Model> {
        Ok(Model::new(cfg, codebook, seed))
    }

    /// Latent dimension after time embedding.
    pub fn latent_dim(&self) -> usize {
        self.cfg.encoder.hidden_dim + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn parameter_names_are_namespaced_and_deterministic() {
        let cfg = TrainConfig::tiny(8, 2);
        let m1 = Model::new(&cfg.model, &cfg.model.codebook, 5);
        let m2 = Model::new(&cfg.model, &cfg.model.codebook, 5);
        assert_eq!(m1.store.len(), m2.store.len());
        let mut seen_prefix = std::collections::BTreeSet::new();
        for i in 0..m1.store.len() {
            assert_eq!(m1.store.name(i), m2.store.name(i));
            assert_eq!(m1.store.array(i), m2.store.array(i));
            seen_prefix.insert(m1.store.name(i).split('.').next().unwrap().to_string());
        }
        let prefixes: Vec<_> = seen_prefix.into_iter().collect();
        assert_eq!(
            prefixes,
            ["codebook", "decoder", "encoder", "genhead", "hypernet", "policy"]
        );
        assert_eq!(m1.codebook.alpha, m2.codebook.alpha);
    }
}
