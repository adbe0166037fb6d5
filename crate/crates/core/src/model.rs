//! The full network: encoders, fusion, patch prediction, and pixel decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::Sample;
use crate::decoder::{decode_pixels, mask_features, patch_predict, replicate_patches, DecoderParams};
use crate::encoders::{language_encode, patchify, sinusoidal_table, vision_encode, LanguageParams, VisionParams};
use crate::error::{Error, Result};
use crate::fusion::{attention_probe, fuse, project, AttnStats, FusionParams, FusionTrace};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Coarse and fine outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    /// `[N_v × 1]`, strictly inside `(0, 1)`.
    pub patch_probs: Tensor,
    /// `[H × W × 1]` logits.
    pub pixel_logits: Tensor,
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub patch_logits: Var,
    pub patch_probs: Var,
    pub pixel_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionParams,
    pub language: LanguageParams,
    pub fusion: FusionParams,
    /// Absent when the configuration disables the decoder.
    pub decoder: Option<DecoderParams>,
    sinusoid: Tensor,
}

impl Model {
    /// Randomly initialised model; parameters are drawn in a fixed order from
    /// one seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vision = VisionParams::init(&mut store, &mut rng, &config)?;
        let language = LanguageParams::init(&mut store, &mut rng, &config)?;
        let fusion = FusionParams::init(&mut store, &mut rng, &config)?;
        let decoder = config
            .decoder
            .then(|| DecoderParams::init(&mut store, &mut rng, &config));
        let sinusoid = sinusoidal_table(config.max_tokens, config.language_dim)?;
        Ok(Model {
            config,
            store,
            vision,
            language,
            fusion,
            decoder,
            sinusoid,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.image_h, c.image_w, c.channels] {
            return Err(Error::shape("forward", image.shape(), &[c.image_h, c.image_w, c.channels]));
        }
        Ok(())
    }

    /// Encoder outputs `(z_v, z_l)` before projection.
    pub fn encode(&self, g: &mut Graph, b: &Bindings, image: &Tensor, tokens: &[usize]) -> Result<(Var, Var)> {
        self.check_image(image)?;
        let patches = g.constant(&patchify(image, self.config.patch_size)?);
        let zv = vision_encode(g, patches, &self.vision, b, None)?;
        let zl = language_encode(g, tokens, &self.language, b, &self.sinusoid, None)?;
        Ok((zv, zl))
    }

    /// Builds the whole forward pass on `g` with parameters bound as `b`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        image: &Tensor,
        tokens: &[usize],
        trace: Option<&mut FusionTrace>,
    ) -> Result<ForwardVars> {
        let (zv, zl) = self.encode(g, b, image, tokens)?;
        let (pv, pl) = project(g, zv, zl, &self.fusion, b)?;
        let fused = fuse(g, pv, pl, &self.fusion, b, trace)?;
        let (patch_logits, patch_probs) = patch_predict(g, fused.zv, fused.seed)?;
        let pixel_logits = match &self.decoder {
            Some(dec) => {
                let masked = mask_features(g, fused.zv, patch_probs)?;
                decode_pixels(g, pv, masked, dec, b, &self.config)?
            }
            None => replicate_patches(g, patch_logits, &self.config)?,
        };
        Ok(ForwardVars {
            patch_logits,
            patch_probs,
            pixel_logits,
        })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor, tokens: &[usize]) -> Result<PredictionPair> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, image, tokens, None)?;
        Ok(PredictionPair {
            patch_probs: g.tensor(out.patch_probs),
            pixel_logits: g.tensor(out.pixel_logits),
        })
    }

    /// Seed attention shares averaged over `samples`.
    pub fn attention_probe(&self, samples: &[Sample]) -> Result<AttnStats> {
        let features = samples
            .iter()
            .map(|s| {
                let mut g = Graph::new();
                let b = self.store.bind_frozen(&mut g);
                let (zv, zl) = self.encode(&mut g, &b, &s.image, &s.tokens)?;
                Ok((g.tensor(zv), g.tensor(zl)))
            })
            .collect::<Result<Vec<_>>>()?;
        attention_probe(&self.fusion, &self.store, &features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionVariant;
    use crate::data::generate;

    fn tiny(variant: FusionVariant) -> ModelConfig {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            patch_size: 8,
            vision_dim: 16,
            language_dim: 16,
            fusion_dim: 16,
            heads: 2,
            vision_layers: 1,
            language_layers: 1,
            max_tokens: 8,
            fusion_variant: variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_contract() {
        let ds = generate(0, 2, 32, 32).unwrap();
        for v in FusionVariant::ALL {
            let m = Model::new(tiny(v), 1).unwrap();
            let s = &ds.samples[0];
            let a = m.predict(&s.image, &s.tokens).unwrap();
            assert_eq!(a.patch_probs.shape(), &[16, 1]);
            assert_eq!(a.pixel_logits.shape(), &[32, 32, 1]);
            assert!(a.patch_probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
            assert_eq!(m.predict(&s.image, &s.tokens).unwrap(), a);
        }
    }

    #[test]
    fn parameter_total_is_sum_of_parts() {
        let cfg = tiny(FusionVariant::Cme);
        let m = Model::new(cfg.clone(), 0).unwrap();
        let fusion = m.store.numel_with_prefix("fusion.");
        let expected = VisionParams::count(&cfg) + LanguageParams::count(&cfg) + fusion + DecoderParams::count(&cfg);
        assert_eq!(m.param_count(), expected);
        let p = crate::fusion::profile(&cfg, FusionVariant::Cme);
        assert_eq!(fusion, p.params + p.aux_params);
    }

    #[test]
    fn decoder_toggle_and_errors() {
        let cfg = ModelConfig {
            decoder: false,
            ..tiny(FusionVariant::Cme)
        };
        let m = Model::new(cfg, 0).unwrap();
        assert_eq!(m.store.numel_with_prefix("decoder."), 0);
        let ds = generate(0, 1, 32, 32).unwrap();
        let s = &ds.samples[0];
        let out = m.predict(&s.image, &s.tokens).unwrap();
        assert_eq!(out.pixel_logits.shape(), &[32, 32, 1]);
        assert!(m.predict(&Tensor::zeros(&[16, 16, 3]), &s.tokens).is_err());
    }

    #[test]
    fn probe_on_samples() {
        let m = Model::new(tiny(FusionVariant::Vme), 2).unwrap();
        let ds = generate(3, 3, 32, 32).unwrap();
        let stats = m.attention_probe(&ds.samples).unwrap();
        assert_eq!(stats.samples, 3);
        assert_eq!(stats.layers.len(), 2);
    }
}
