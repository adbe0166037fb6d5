//! Pre-norm transformer encoder: multi-head self-attention, the two residual
//! sub-blocks, and a stack of blocks closed by a terminal layer norm.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// One set of block weights reused for every layer.
    pub shared: bool,
}

impl TransformerConfig {
    pub fn new(layers: usize, dim: usize, heads: usize) -> Self {
        TransformerConfig {
            layers,
            dim,
            heads,
            mlp_hidden: 4 * dim,
            shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Scalars in one block: two layer norms, q/k/v/out projections with
    /// biases, and the two MLP linears.
    pub fn block_params(&self) -> usize {
        let (d, h) = (self.dim, self.mlp_hidden);
        2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    pub fn stored_blocks(&self) -> usize {
        if self.shared {
            1
        } else {
            self.layers
        }
    }

    /// Scalars in the whole stack, including the terminal layer norm.
    pub fn stack_params(&self) -> usize {
        self.stored_blocks() * self.block_params() + 2 * self.dim
    }

    /// Multiply-accumulates of one block over `n` tokens: four `d×d`
    /// projections, score and value products, and the MLP.
    pub fn block_macs(&self, n: usize) -> u64 {
        let (n, d, h) = (n as u64, self.dim as u64, self.mlp_hidden as u64);
        4 * n * d * d + 2 * n * n * d + 2 * n * d * h
    }

    pub fn stack_macs(&self, n: usize) -> u64 {
        self.layers as u64 * self.block_macs(n)
    }
}

/// Projections for a single attention head (`dim → head_dim`).
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, head_dim: usize) -> Self {
        HeadParams {
            wq: store.weight(rng, format!("{prefix}.wq"), dim, head_dim),
            bq: store.zeros(format!("{prefix}.bq"), &[head_dim]),
            wk: store.weight(rng, format!("{prefix}.wk"), dim, head_dim),
            bk: store.zeros(format!("{prefix}.bk"), &[head_dim]),
            wv: store.weight(rng, format!("{prefix}.wv"), dim, head_dim),
            bv: store.zeros(format!("{prefix}.bv"), &[head_dim]),
        }
    }
}

/// One block. The q/k/v matrices hold all heads side by side (`dim × dim`);
/// head `i` owns columns `i·head_dim .. (i+1)·head_dim`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &TransformerConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.mlp_hidden);
        BlockParams {
            ln1_g: store.ones(format!("{prefix}.ln1.gain"), &[d]),
            ln1_b: store.zeros(format!("{prefix}.ln1.bias"), &[d]),
            wq: store.weight(rng, format!("{prefix}.attn.wq"), d, d),
            bq: store.zeros(format!("{prefix}.attn.bq"), &[d]),
            wk: store.weight(rng, format!("{prefix}.attn.wk"), d, d),
            bk: store.zeros(format!("{prefix}.attn.bk"), &[d]),
            wv: store.weight(rng, format!("{prefix}.attn.wv"), d, d),
            bv: store.zeros(format!("{prefix}.attn.bv"), &[d]),
            wo: store.weight(rng, format!("{prefix}.attn.wo"), d, d),
            bo: store.zeros(format!("{prefix}.attn.bo"), &[d]),
            ln2_g: store.ones(format!("{prefix}.ln2.gain"), &[d]),
            ln2_b: store.zeros(format!("{prefix}.ln2.bias"), &[d]),
            w1: store.weight(rng, format!("{prefix}.mlp.w1"), d, h),
            b1: store.zeros(format!("{prefix}.mlp.b1"), &[h]),
            w2: store.weight(rng, format!("{prefix}.mlp.w2"), h, d),
            b2: store.zeros(format!("{prefix}.mlp.b2"), &[d]),
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo,
            self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct StackParams {
    pub config: TransformerConfig,
    pub blocks: Vec<BlockParams>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl StackParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.stored_blocks())
            .map(|i| BlockParams::init(store, rng, &format!("{prefix}.blocks.{i}"), &config))
            .collect();
        Ok(StackParams {
            config,
            blocks,
            ln_g: store.ones(format!("{prefix}.ln.gain"), &[config.dim]),
            ln_b: store.zeros(format!("{prefix}.ln.bias"), &[config.dim]),
        })
    }

    /// Block applied at layer `i`.
    pub fn block(&self, i: usize) -> &BlockParams {
        if self.config.shared {
            &self.blocks[0]
        } else {
            &self.blocks[i]
        }
    }
}

/// Attention matrices captured during a forward pass: `layers[l][h]` is the
/// row-major `n×n` matrix of head `h` at layer `l`, or only row `row` of it
/// when one is requested.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub tokens: usize,
    pub row: Option<usize>,
}

impl AttentionTrace {
    pub fn for_row(row: usize) -> Self {
        AttentionTrace {
            row: Some(row),
            ..Default::default()
        }
    }
}

/// `x · W + b` for `x: [n × in]`, `W: [in × out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Scaled dot-product attention. Returns `A·v` and the attention matrix
/// `A = softmax(q·kᵀ / √d_h)`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let a = g.softmax(scaled, 1)?;
    let out = g.matmul(a, v)?;
    Ok((out, a))
}

/// Single-head self-attention of `z: [n × d]` with independent q/k/v
/// projections. Returns the head output `[n × d_h]` and its attention matrix.
pub fn self_attention(g: &mut Graph, z: Var, head: &HeadParams, b: &Bindings) -> Result<(Var, Var)> {
    let q = linear(g, z, b[head.wq], b[head.bq])?;
    let k = linear(g, z, b[head.wk], b[head.bk])?;
    let v = linear(g, z, b[head.wv], b[head.bv])?;
    attend(g, q, k, v)
}

/// Multi-head self-attention: heads concatenated along channels, then
/// projected by the output matrix.
pub fn msa(
    g: &mut Graph,
    z: Var,
    p: &BlockParams,
    b: &Bindings,
    heads: usize,
    trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let d = *g.shape(z).last().unwrap();
    if heads == 0 || !d.is_multiple_of(heads) || g.shape(b[p.wq]) != [d, d] {
        return Err(Error::Config(format!(
            "msa: dim {d} with {heads} heads does not match q projection {:?}",
            g.shape(b[p.wq])
        )));
    }
    let dh = d / heads;
    let q = linear(g, z, b[p.wq], b[p.bq])?;
    let k = linear(g, z, b[p.wk], b[p.bk])?;
    let v = linear(g, z, b[p.wv], b[p.bv])?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let (out, a) = attend(g, qh, kh, vh)?;
        if trace.is_some() {
            maps.push(g.value(a).to_vec());
        }
        outs.push(out);
    }
    if let Some(t) = trace {
        *t = maps;
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, cat, b[p.wo], b[p.bo])
}

/// `z̄ = MSA(LN(z)) + z`, then `MLP(LN(z̄)) + z̄` with a GELU MLP.
pub fn transformer_block(
    g: &mut Graph,
    z: Var,
    p: &BlockParams,
    b: &Bindings,
    heads: usize,
    trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let n1 = layer_norm(g, z, b[p.ln1_g], b[p.ln1_b])?;
    let attn = msa(g, n1, p, b, heads, trace)?;
    let mid = g.add(attn, z)?;
    let n2 = layer_norm(g, mid, b[p.ln2_g], b[p.ln2_b])?;
    let h = linear(g, n2, b[p.w1], b[p.b1])?;
    let h = g.gelu(h);
    let out = linear(g, h, b[p.w2], b[p.b2])?;
    g.add(out, mid)
}

/// `config.layers` blocks followed by a terminal layer norm.
pub fn encoder_stack(
    g: &mut Graph,
    z: Var,
    p: &StackParams,
    b: &Bindings,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let cfg = &p.config;
    if p.blocks.len() != cfg.stored_blocks() {
        return Err(Error::Config(format!(
            "stack has {} blocks but its config needs {}",
            p.blocks.len(),
            cfg.stored_blocks()
        )));
    }
    if let Some(t) = trace.as_deref_mut() {
        t.tokens = g.shape(z)[0];
    }
    let mut x = z;
    for layer in 0..cfg.layers {
        let mut maps = Vec::new();
        let want = trace.is_some();
        x = transformer_block(g, x, p.block(layer), b, cfg.heads, want.then_some(&mut maps))?;
        if let Some(t) = trace.as_deref_mut() {
            if let Some(r) = t.row {
                let n = t.tokens;
                if r >= n {
                    return Err(Error::Invalid(format!("trace row {r} outside {n} tokens")));
                }
                maps = maps.into_iter().map(|m| m[r * n..(r + 1) * n].to_vec()).collect();
            }
            t.layers.push(maps);
        }
    }
    layer_norm(g, x, b[p.ln_g], b[p.ln_b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, Tensor};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Re-initialises every parameter with O(1) noise so gradient checks
    /// exercise non-trivial attention patterns.
    fn scramble(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for p in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }

    fn zero_output_projections(store: &mut ParamStore, stack: &StackParams) {
        for blk in &stack.blocks {
            for id in [blk.wo, blk.bo, blk.w2, blk.b2] {
                store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, &mut rng(1), "h", 4, 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[1, 4], 2));
        let (out, a) = self_attention(&mut g, z, &head, &b).unwrap();
        assert_eq!(g.value(a), &[1.0]);
        let v = linear(&mut g, z, b[head.wv], b[head.bv]).unwrap();
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, &mut rng(3), "h", 4, 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let row = random(&[1, 4], 4);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| row.data().to_vec()).collect();
        let z = g.leaf(&Tensor::from_rows(&rows).unwrap());
        let (_, a) = self_attention(&mut g, z, &head, &b).unwrap();
        for v in g.value(a) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, &mut rng(5), "h", 6, 4);
        scramble(&mut store, 6);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[5, 6], 7));
        let (out, a) = self_attention(&mut g, z, &head, &b).unwrap();
        assert_eq!(g.shape(out), &[5, 4]);
        for row in g.value(a).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn single_head_msa_with_identity_output_equals_self_attention() {
        let cfg = TransformerConfig::new(1, 4, 1);
        let mut store = ParamStore::new();
        let blk = BlockParams::init(&mut store, &mut rng(8), "b", &cfg);
        scramble(&mut store, 9);
        store.get_mut(blk.wo).tensor.data_mut().copy_from_slice(Tensor::eye(4).data());
        store.get_mut(blk.bo).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let head = HeadParams { wq: blk.wq, bq: blk.bq, wk: blk.wk, bk: blk.bk, wv: blk.wv, bv: blk.bv };

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[3, 4], 10));
        let m = msa(&mut g, z, &blk, &b, 1, None).unwrap();
        let (s, _) = self_attention(&mut g, z, &head, &b).unwrap();
        assert_eq!(g.value(m), g.value(s));
    }

    #[test]
    fn msa_shape_for_every_divisor() {
        for heads in [1, 2, 4, 8] {
            let cfg = TransformerConfig::new(1, 8, heads);
            let mut store = ParamStore::new();
            let blk = BlockParams::init(&mut store, &mut rng(11), "b", &cfg);
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let z = g.leaf(&random(&[5, 8], 12));
            let out = msa(&mut g, z, &blk, &b, heads, None).unwrap();
            assert_eq!(g.shape(out), &[5, 8]);
        }
        assert!(TransformerConfig::new(1, 8, 3).validate().is_err());
    }

    fn block_gradcheck(n: usize, d: usize, heads: usize, full_block: bool) {
        let cfg = TransformerConfig::new(1, d, heads);
        let mut store = ParamStore::new();
        let blk = BlockParams::init(&mut store, &mut rng(13), "b", &cfg);
        scramble(&mut store, 14);
        let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
        inputs.push(random(&[n, d], 15));
        let target = random(&[n, d], 16);
        let r = grad_check(
            |g, v| {
                let (params, z) = v.split_at(v.len() - 1);
                let b = Bindings::from_vars(params.to_vec());
                let out = if full_block {
                    transformer_block(g, z[0], &blk, &b, heads, None)?
                } else {
                    msa(g, z[0], &blk, &b, heads, None)?
                };
                let t = g.constant(&target);
                let w = g.hadamard(out, t)?;
                Ok(g.sum(w))
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn msa_gradient_check() {
        block_gradcheck(3, 8, 2, false);
    }

    #[test]
    fn block_gradient_check() {
        block_gradcheck(4, 8, 2, true);
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let cfg = TransformerConfig::new(2, 8, 2);
        let mut store = ParamStore::new();
        let stack = StackParams::init(&mut store, &mut rng(17), "s", cfg).unwrap();
        scramble(&mut store, 18);
        zero_output_projections(&mut store, &stack);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[4, 8], 19));
        let out = transformer_block(&mut g, z, &stack.blocks[0], &b, 2, None).unwrap();
        assert_eq!(g.value(out), g.value(z));

        let full = encoder_stack(&mut g, z, &stack, &b, None).unwrap();
        let ln = layer_norm(&mut g, z, b[stack.ln_g], b[stack.ln_b]).unwrap();
        assert_eq!(g.value(full), g.value(ln));
    }

    #[test]
    fn stack_composition_matches_manual_blocks() {
        let cfg = TransformerConfig::new(2, 8, 2);
        let mut store = ParamStore::new();
        let stack = StackParams::init(&mut store, &mut rng(20), "s", cfg).unwrap();
        scramble(&mut store, 21);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[4, 8], 22));
        let full = encoder_stack(&mut g, z, &stack, &b, None).unwrap();
        let x1 = transformer_block(&mut g, z, &stack.blocks[0], &b, 2, None).unwrap();
        let x2 = transformer_block(&mut g, x1, &stack.blocks[1], &b, 2, None).unwrap();
        let manual = layer_norm(&mut g, x2, b[stack.ln_g], b[stack.ln_b]).unwrap();
        assert_eq!(g.value(full), g.value(manual));
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        // Hand count for d=8, k=2, one layer, hidden 32:
        // LN 2·16 + qkvo 4·(64+8) + mlp (256+32) + (256+8) = 872 per block,
        // plus 16 for the terminal LN.
        let cfg = TransformerConfig::new(1, 8, 2);
        assert_eq!(cfg.block_params(), 872);
        assert_eq!(cfg.stack_params(), 888);
        for (layers, shared) in [(1, false), (3, false), (3, true)] {
            let cfg = TransformerConfig { shared, ..TransformerConfig::new(layers, 8, 2) };
            let mut store = ParamStore::new();
            StackParams::init(&mut store, &mut rng(23), "s", cfg).unwrap();
            assert_eq!(store.numel(), cfg.stack_params());
        }
    }

    #[test]
    fn block_params_at_reference_width() {
        // 768 wide, 3072 hidden: four blocks hold 28,351,488 scalars.
        let cfg = TransformerConfig::new(4, 768, 12);
        assert_eq!(4 * cfg.block_params(), 28_351_488);
    }

    #[test]
    fn stack_rejects_block_count_mismatch() {
        let cfg = TransformerConfig::new(2, 8, 2);
        let mut store = ParamStore::new();
        let mut stack = StackParams::init(&mut store, &mut rng(24), "s", cfg).unwrap();
        stack.blocks.pop();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[3, 8], 25));
        assert!(encoder_stack(&mut g, z, &stack, &b, None).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = TransformerConfig::new(2, 8, 2);
        let mut store = ParamStore::new();
        let stack = StackParams::init(&mut store, &mut rng(26), "s", cfg).unwrap();
        scramble(&mut store, 27);
        let x = random(&[5, 8], 28);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let (zx, zp) = (g.leaf(&x), g.leaf(&xp));
        let ox = encoder_stack(&mut g, zx, &stack, &b, None).unwrap();
        let op = encoder_stack(&mut g, zp, &stack, &b, None).unwrap();
        let (ox, op) = (g.value(ox).to_vec(), g.value(op));
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((op[r * 8 + c] - ox[src * 8 + c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn trace_records_every_layer_and_head() {
        let cfg = TransformerConfig::new(3, 8, 4);
        let mut store = ParamStore::new();
        let stack = StackParams::init(&mut store, &mut rng(29), "s", cfg).unwrap();
        scramble(&mut store, 30);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.leaf(&random(&[6, 8], 31));
        let mut trace = AttentionTrace::default();
        encoder_stack(&mut g, z, &stack, &b, Some(&mut trace)).unwrap();
        assert_eq!(trace.tokens, 6);
        assert_eq!(trace.layers.len(), 3);
        for layer in &trace.layers {
            assert_eq!(layer.len(), 4);
            for map in layer {
                for row in map.chunks(6) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
