//! Vision and language encoders: patch embedding with a learned position
//! table, token embedding with a fixed sinusoidal table, each followed by a
//! transformer stack.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bindings, ParamId, ParamStore, EMBED_STD, INIT_STD};
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{encoder_stack, linear, AttentionTrace, StackParams};

/// Splits `[H × W × C]` into row-major non-overlapping `P × P` blocks, one
/// flattened block per row: `[N_v × P²C]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Invalid(format!("image must be H×W×C, got {:?}", image.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}×{w} image is not divisible into {p}×{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = ((py * p + y) * w + px * p) * c;
                out.extend_from_slice(&src[row..row + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Config(format!("{h}×{w} image is not divisible into {p}×{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let &[n, width] = patches.shape() else {
        return Err(Error::Invalid(format!("patches must be 2-D, got {:?}", patches.shape())));
    };
    if n != gh * gw || width % (p * p) != 0 {
        return Err(Error::shape("unpatchify", patches.shape(), &[gh * gw, p * p]));
    }
    let c = width / (p * p);
    let src = patches.data();
    let mut out = vec![0.0; h * w * c];
    for (i, patch) in src.chunks_exact(width).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..p {
            let row = ((py * p + y) * w + px * p) * c;
            out[row..row + p * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// `(pos, 2i) = sin(pos / 10000^(2i/d))`, `(pos, 2i+1) = cos(…)`.
pub fn sinusoidal_table(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal table needs an even width, got {d}")));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[n, d], data)
}

#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    /// Learned `[N_v × D_v]` position table.
    pub pos: ParamId,
    pub stack: StackParams,
}

impl VisionParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let (p, c, d) = (cfg.patch_size, cfg.channels, cfg.vision_dim);
        let patch_w = store.weight(rng, "vision.patch.weight", p * p * c, d);
        let patch_b = store.zeros("vision.patch.bias", &[d]);
        let pos = store.add("vision.pos", trunc_normal(rng, &[cfg.n_patches(), d], INIT_STD), false);
        let stack = StackParams::init(store, rng, "vision.encoder", cfg.vision_stack())?;
        Ok(VisionParams { patch_w, patch_b, pos, stack })
    }

    /// Closed-form count: embedding, position table, and stack.
    pub fn count(cfg: &ModelConfig) -> usize {
        let (p, c, d) = (cfg.patch_size, cfg.channels, cfg.vision_dim);
        p * p * c * d + d + cfg.n_patches() * d + cfg.vision_stack().stack_params()
    }
}

/// `z_v = stack(patches · W + b + E_pos)` for patches already laid out by
/// [`patchify`].
pub fn vision_encode(
    g: &mut Graph,
    patches: Var,
    p: &VisionParams,
    b: &Bindings,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let e = linear(g, patches, b[p.patch_w], b[p.patch_b])?;
    let z = g.add(e, b[p.pos])?;
    encoder_stack(g, z, &p.stack, b, trace)
}

#[derive(Clone, Debug)]
pub struct LanguageParams {
    /// `[vocab × D_l]`; row [`PAD`] is a learned padding embedding.
    pub embed: ParamId,
    pub stack: StackParams,
}

impl LanguageParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let embed = store.add(
            "language.embed",
            trunc_normal(rng, &[cfg.vocab_size, cfg.language_dim], EMBED_STD),
            true,
        );
        let stack = StackParams::init(store, rng, "language.encoder", cfg.language_stack())?;
        Ok(LanguageParams { embed, stack })
    }

    pub fn count(cfg: &ModelConfig) -> usize {
        cfg.vocab_size * cfg.language_dim + cfg.language_stack().stack_params()
    }
}

/// Token ids padded with [`PAD`] or truncated to exactly `n`. The flag
/// reports truncation.
pub fn pad_tokens(ids: &[usize], n: usize) -> (Vec<usize>, bool) {
    let mut out: Vec<usize> = ids.iter().copied().take(n).collect();
    out.resize(n, PAD);
    (out, ids.len() > n)
}

/// One-hot `[n × vocab]` selector so the embedding lookup is a matrix product.
fn one_hot(ids: &[usize], vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * vocab];
    for (row, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Invalid(format!("token id {id} is outside a vocabulary of {vocab}")));
        }
        data[row * vocab + id] = 1.0;
    }
    Tensor::new(&[ids.len(), vocab], data)
}

/// `z_l = stack(embed(ids) + e_pos)` over `ids` padded to the sinusoid
/// table's length. Over-long sequences are truncated with a warning.
pub fn language_encode(
    g: &mut Graph,
    ids: &[usize],
    p: &LanguageParams,
    b: &Bindings,
    sinusoid: &Tensor,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let n = sinusoid.shape()[0];
    let (ids, truncated) = pad_tokens(ids, n);
    if truncated {
        log::warn!("expression longer than {n} tokens was truncated");
    }
    let vocab = g.shape(b[p.embed])[0];
    let sel = g.constant(&one_hot(&ids, vocab)?);
    let e = g.matmul(sel, b[p.embed])?;
    let pos = g.constant(sinusoid);
    let z = g.add(e, pos)?;
    encoder_stack(g, z, &p.stack, b, trace)
}
