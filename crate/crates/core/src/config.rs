//! Model and training hyperparameters, and the flat `key = value` run-config
//! format that carries both.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::transformer::TransformerConfig;

/// Topology of the multimodal fusion encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// Visual, linguistic, and seed tokens in one joint sequence.
    Vme,
    /// Seed attends only to the raw projected linguistic tokens.
    Ime,
    /// Seed attends to linguistic tokens that have already attended to vision.
    Cme,
    /// `Cme` with one block's weights reused for every layer of each sub-encoder.
    CmeShared,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Vme,
        FusionVariant::Ime,
        FusionVariant::Cme,
        FusionVariant::CmeShared,
    ];

    pub fn shares_weights(self) -> bool {
        self == FusionVariant::CmeShared
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Vme => "VME",
            FusionVariant::Ime => "IME",
            FusionVariant::Cme => "CME",
            FusionVariant::CmeShared => "CME_SHARED",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VME" => Ok(FusionVariant::Vme),
            "IME" => Ok(FusionVariant::Ime),
            "CME" => Ok(FusionVariant::Cme),
            "CME_SHARED" | "CME-SHARED" => Ok(FusionVariant::CmeShared),
            _ => Err(Error::Config(format!("unknown fusion variant {s:?}"))),
        }
    }
}

/// Interpolation used by each decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

impl fmt::Display for Upsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Upsample::Nearest => "nearest",
            Upsample::Bilinear => "bilinear",
        })
    }
}

impl FromStr for Upsample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Upsample::Nearest),
            "bilinear" => Ok(Upsample::Bilinear),
            _ => Err(Error::Config(format!("unknown upsample mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vision_dim: usize,
    pub vision_layers: usize,
    pub language_dim: usize,
    pub language_layers: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub fusion_dim: usize,
    /// Split equally between the two fusion sub-encoders.
    pub fusion_layers: usize,
    pub heads: usize,
    pub fusion_variant: FusionVariant,
    pub upsample: Upsample,
    /// Without the decoder, pixel logits are the patch logits replicated
    /// over each patch.
    pub decoder: bool,
}

impl Default for ModelConfig {
    /// Desk-scale model: 64×64 images, 8-pixel patches, width 64, four
    /// heads, two layers in each encoder.
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch_size: 8,
            vision_dim: 64,
            vision_layers: 2,
            language_dim: 64,
            language_layers: 2,
            max_tokens: 8,
            vocab_size: crate::data::Vocab::synthetic().len(),
            fusion_dim: 64,
            fusion_layers: 2,
            heads: 4,
            fusion_variant: FusionVariant::Cme,
            upsample: Upsample::Bilinear,
            decoder: true,
        }
    }
}

impl ModelConfig {
    /// Reference geometry: 480×480 input, 16-pixel patches, ViT-B widths,
    /// 300-wide language features, four fusion layers.
    pub fn reference() -> Self {
        ModelConfig {
            image_h: 480,
            image_w: 480,
            channels: 3,
            patch_size: 16,
            vision_dim: 768,
            vision_layers: 12,
            language_dim: 300,
            language_layers: 6,
            max_tokens: 20,
            vocab_size: crate::data::Vocab::synthetic().len(),
            fusion_dim: 768,
            fusion_layers: 4,
            heads: 12,
            fusion_variant: FusionVariant::Cme,
            upsample: Upsample::Bilinear,
            decoder: true,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Number of coarse-to-fine blocks, `log2(patch_size)`.
    pub fn decoder_blocks(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Input width of each decoder block, starting at `2·fusion_dim` and
    /// halving per block; the last entry feeds the final projection.
    pub fn decoder_channels(&self) -> Vec<usize> {
        (0..=self.decoder_blocks()).map(|i| (2 * self.fusion_dim) >> i).collect()
    }

    pub fn vision_stack(&self) -> TransformerConfig {
        TransformerConfig::new(self.vision_layers, self.vision_dim, self.heads)
    }

    pub fn language_stack(&self) -> TransformerConfig {
        TransformerConfig::new(self.language_layers, self.language_dim, self.heads)
    }

    /// Configuration of each of the two fusion sub-encoders.
    pub fn fusion_stack(&self) -> TransformerConfig {
        TransformerConfig {
            shared: self.fusion_variant.shares_weights(),
            ..TransformerConfig::new(self.fusion_layers / 2, self.fusion_dim, self.heads)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return err("image dimensions must be positive".into());
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return err(format!("patch_size {} must be a power of two ≥ 2", self.patch_size));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return err(format!(
                "image {}×{} is not divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.fusion_layers == 0 || !self.fusion_layers.is_multiple_of(2) {
            return err(format!("fusion_layers {} must be even and positive", self.fusion_layers));
        }
        if !self.language_dim.is_multiple_of(2) {
            return err(format!("language_dim {} must be even", self.language_dim));
        }
        if self.max_tokens == 0 || self.vocab_size < 3 {
            return err("max_tokens must be positive and vocab_size at least 3".into());
        }
        if !(2 * self.fusion_dim).is_multiple_of(1 << self.decoder_blocks()) {
            return err(format!(
                "2·fusion_dim = {} cannot be halved {} times",
                2 * self.fusion_dim,
                self.decoder_blocks()
            ));
        }
        self.vision_stack().validate()?;
        self.language_stack().validate()?;
        self.fusion_stack().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Patch-label threshold on foreground fraction (strict `>`).
    pub tau: f64,
    /// Weight of the patch-level loss term.
    pub lambda: f64,
    pub seed: u64,
    /// Evaluate on the training set every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Full-scale recipe: lr 1e-5, weight decay 5e-4, 40k warmup of 400k
    /// iterations, batch 8, τ = 0.8, λ = 0.1.
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_iters: 40_000,
            total_iters: 400_000,
            poly_power: 0.9,
            batch_size: 8,
            tau: 0.8,
            lambda: 0.1,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overfitting recipe for the default [`ModelConfig`]:
    /// randomly initialised weights need a far larger step than fine-tuning.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            warmup_iters: 100,
            total_iters: 3000,
            batch_size: 8,
            eval_every: 250,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err("tau must lie in (0, 1)");
        }
        if self.lambda < 0.0 {
            return err("lambda must be non-negative");
        }
        if self.warmup_iters > self.total_iters {
            return err("warmup_iters must not exceed total_iters");
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return err("batch_size and total_iters must be positive");
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 {
            return err("learning rate and weight decay must be non-negative");
        }
        Ok(())
    }
}

/// Everything a run needs, serialised as one `key = value` per line.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub const MODEL_KEYS: [&'static str; 16] = [
        "image_h",
        "image_w",
        "channels",
        "patch_size",
        "vision_dim",
        "vision_layers",
        "language_dim",
        "language_layers",
        "max_tokens",
        "vocab_size",
        "fusion_dim",
        "fusion_layers",
        "heads",
        "fusion_variant",
        "upsample",
        "decoder",
    ];

    pub const TRAIN_KEYS: [&'static str; 13] = [
        "base_lr",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "warmup_iters",
        "total_iters",
        "poly_power",
        "batch_size",
        "tau",
        "lambda",
        "seed",
        "eval_every",
    ];

    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
        }
    }

    pub fn is_key(key: &str) -> bool {
        Self::MODEL_KEYS.contains(&key) || Self::TRAIN_KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_h" => m.image_h = parse(key, value)?,
            "image_w" => m.image_w = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "vision_dim" => m.vision_dim = parse(key, value)?,
            "vision_layers" => m.vision_layers = parse(key, value)?,
            "language_dim" => m.language_dim = parse(key, value)?,
            "language_layers" => m.language_layers = parse(key, value)?,
            "max_tokens" => m.max_tokens = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "fusion_dim" => m.fusion_dim = parse(key, value)?,
            "fusion_layers" => m.fusion_layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "fusion_variant" => m.fusion_variant = value.parse()?,
            "upsample" => m.upsample = value.parse()?,
            "decoder" => m.decoder = parse_bool(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "warmup_iters" => t.warmup_iters = parse(key, value)?,
            "total_iters" => t.total_iters = parse(key, value)?,
            "poly_power" => t.poly_power = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn model_text(&self) -> String {
        let m = &self.model;
        let values: [String; 16] = [
            m.image_h.to_string(),
            m.image_w.to_string(),
            m.channels.to_string(),
            m.patch_size.to_string(),
            m.vision_dim.to_string(),
            m.vision_layers.to_string(),
            m.language_dim.to_string(),
            m.language_layers.to_string(),
            m.max_tokens.to_string(),
            m.vocab_size.to_string(),
            m.fusion_dim.to_string(),
            m.fusion_layers.to_string(),
            m.heads.to_string(),
            m.fusion_variant.to_string(),
            m.upsample.to_string(),
            m.decoder.to_string(),
        ];
        Self::MODEL_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let values: [String; 13] = [
            format!("{:?}", t.base_lr),
            format!("{:?}", t.weight_decay),
            format!("{:?}", t.beta1),
            format!("{:?}", t.beta2),
            format!("{:?}", t.adam_eps),
            t.warmup_iters.to_string(),
            t.total_iters.to_string(),
            format!("{:?}", t.poly_power),
            t.batch_size.to_string(),
            format!("{:?}", t.tau),
            format!("{:?}", t.lambda),
            t.seed.to_string(),
            t.eval_every.to_string(),
        ];
        let train: String = Self::TRAIN_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        format!("# model\n{}# training\n{train}", self.model_text())
    }
}

/// Parses only model keys (as stored in checkpoints).
pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = RunConfig::desk();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed model config line {line:?}")))?;
        let k = k.trim();
        if !RunConfig::MODEL_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
        cfg.set(k, v.trim())?;
    }
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.model.fusion_variant = FusionVariant::CmeShared;
        cfg.model.upsample = Upsample::Nearest;
        cfg.train.lambda = 0.05;
        cfg.train.base_lr = 3.5e-4;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(parse_model_text(&cfg.model_text()).unwrap(), cfg.model);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::parse("# comment\n\ntau = 0.7   # inline\n").unwrap();
        assert_eq!(cfg.train.tau, 0.7);
        assert!(matches!(RunConfig::parse("taux = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("tau 0.7").is_err());
        assert!(RunConfig::parse("heads = four").is_err());
    }

    #[test]
    fn geometry_and_validation() {
        let m = ModelConfig::reference();
        assert_eq!(m.n_patches(), 900);
        assert_eq!(m.decoder_blocks(), 4);
        assert_eq!(m.decoder_channels(), vec![1536, 768, 384, 192, 96]);
        m.validate().unwrap();

        let d = ModelConfig::default();
        assert_eq!(d.decoder_blocks(), 3);
        d.validate().unwrap();

        let bad = ModelConfig { patch_size: 12, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { image_h: 60, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { fusion_layers: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { language_dim: 63, heads: 1, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { fusion_dim: 4, heads: 1, patch_size: 16, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn train_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { tau: 1.0, ..TrainConfig::default() },
            TrainConfig { lambda: -0.1, ..TrainConfig::default() },
            TrainConfig { warmup_iters: 10, total_iters: 5, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn variant_names() {
        for v in FusionVariant::ALL {
            assert_eq!(v.to_string().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("XME".parse::<FusionVariant>().is_err());
    }
}
