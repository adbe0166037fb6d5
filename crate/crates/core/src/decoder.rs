//! Patch-level prediction from the adaptive classifier, feature masking, and
//! the coarse-to-fine pixel decoder.

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Upsample};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Var};
use crate::transformer::linear;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// `(weight, bias)` of each halving projection.
    pub blocks: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl DecoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let ch = cfg.decoder_channels();
        let blocks = ch
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                (
                    store.weight(rng, format!("decoder.blocks.{i}.weight"), c[0], c[1]),
                    store.zeros(format!("decoder.blocks.{i}.bias"), &[c[1]]),
                )
            })
            .collect();
        let last = *ch.last().unwrap();
        DecoderParams {
            blocks,
            out_w: store.weight(rng, "decoder.out.weight", last, 1),
            out_b: store.zeros("decoder.out.bias", &[1]),
        }
    }

    pub fn count(cfg: &ModelConfig) -> usize {
        let ch = cfg.decoder_channels();
        ch.windows(2).map(|c| c[0] * c[1] + c[1]).sum::<usize>() + ch.last().unwrap() + 1
    }
}

/// Patch logits `z_v′ · e_s′ᵀ / √D` and their sigmoid, both `[N_v × 1]`.
pub fn patch_predict(g: &mut Graph, zv: Var, seed: Var) -> Result<(Var, Var)> {
    let d = g.shape(zv)[1];
    if g.shape(seed) != [1, d] {
        return Err(Error::shape("patch_predict", g.shape(zv), g.shape(seed)));
    }
    let st = g.transpose(seed)?;
    let s = g.matmul(zv, st)?;
    let logits = g.scale(s, 1.0 / (d as f64).sqrt());
    let probs = g.sigmoid(logits);
    Ok((logits, probs))
}

/// Scales row `i` of `z_v′` by patch probability `i`.
pub fn mask_features(g: &mut Graph, zv: Var, probs: Var) -> Result<Var> {
    g.hadamard(zv, probs)
}

fn upsample(g: &mut Graph, x: Var, mode: Upsample) -> Result<Var> {
    match mode {
        Upsample::Nearest => g.upsample2x(x),
        Upsample::Bilinear => g.upsample2x_bilinear(x),
    }
}

/// `[z_v ∥ z_masked]` laid out on the patch grid, then `K` blocks of ×2
/// upsampling, halving projection and GELU, and a final projection to one
/// logit per pixel: `[H × W × 1]`.
pub fn decode_pixels(g: &mut Graph, zv: Var, masked: Var, p: &DecoderParams, b: &Bindings, cfg: &ModelConfig) -> Result<Var> {
    let k = cfg.decoder_blocks();
    if p.blocks.len() != k || 1 << k != cfg.patch_size {
        return Err(Error::Config(format!(
            "decoder has {} blocks; patch size {} needs {k}",
            p.blocks.len(),
            cfg.patch_size
        )));
    }
    let x = g.concat(&[zv, masked], 1)?;
    let (mut h, mut w) = (cfg.grid_h(), cfg.grid_w());
    let mut c = g.shape(x)[1];
    let mut x = g.reshape(x, &[h, w, c])?;
    for &(wt, bias) in &p.blocks {
        let up = upsample(g, x, cfg.upsample)?;
        (h, w) = (2 * h, 2 * w);
        let flat = g.reshape(up, &[h * w, c])?;
        let y = linear(g, flat, b[wt], b[bias])?;
        let y = g.gelu(y);
        c = g.shape(y)[1];
        x = g.reshape(y, &[h, w, c])?;
    }
    let flat = g.reshape(x, &[h * w, c])?;
    let out = linear(g, flat, b[p.out_w], b[p.out_b])?;
    g.reshape(out, &[h, w, 1])
}

/// Decoder-free fallback: each patch logit copied over its `P × P` pixels.
pub fn replicate_patches(g: &mut Graph, patch_logits: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = g.reshape(patch_logits, &[cfg.grid_h(), cfg.grid_w(), 1])?;
    for _ in 0..cfg.decoder_blocks() {
        x = g.upsample2x(x)?;
    }
    Ok(x)
}
