//! Multimodal fusion: per-modality projection to the shared width, the class
//! seed, the four encoder topologies, the seed-attention probe, and the
//! parameter/MAC profiler.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bindings, ParamId, ParamStore, INIT_STD};
use crate::tensor::{macs, Graph, Tensor, Var};
use crate::transformer::{encoder_stack, layer_norm, linear, AttentionTrace, StackParams, TransformerConfig};

/// Layer norm followed by a linear map to the fusion width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl Projector {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, dim: usize) -> Self {
        Projector {
            ln_g: store.ones(format!("{prefix}.ln.gain"), &[input]),
            ln_b: store.zeros(format!("{prefix}.ln.bias"), &[input]),
            w: store.weight(rng, format!("{prefix}.weight"), input, dim),
            b: store.zeros(format!("{prefix}.bias"), &[dim]),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var, b: &Bindings) -> Result<Var> {
        let n = layer_norm(g, x, b[self.ln_g], b[self.ln_b])?;
        linear(g, n, b[self.w], b[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub variant: FusionVariant,
    /// Class seed `[1 × D]`.
    pub seed: ParamId,
    pub proj_v: Projector,
    pub proj_l: Projector,
    /// VME: one joint stack. Otherwise the visual-linguistic stack followed
    /// by the linguistic-seed stack.
    pub stacks: Vec<StackParams>,
}

/// Stack layouts of a variant: `(name, config)` per stack.
pub fn stack_layout(cfg: &ModelConfig, variant: FusionVariant) -> Vec<(&'static str, TransformerConfig)> {
    let half = TransformerConfig {
        shared: variant.shares_weights(),
        ..TransformerConfig::new(cfg.fusion_layers / 2, cfg.fusion_dim, cfg.heads)
    };
    match variant {
        FusionVariant::Vme => vec![("joint", TransformerConfig::new(cfg.fusion_layers, cfg.fusion_dim, cfg.heads))],
        _ => vec![("vl", half), ("ls", half)],
    }
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.fusion_dim;
        let seed = store.add("fusion.seed", trunc_normal(rng, &[1, d], INIT_STD), false);
        let proj_v = Projector::init(store, rng, "fusion.proj_v", cfg.vision_dim, d);
        let proj_l = Projector::init(store, rng, "fusion.proj_l", cfg.language_dim, d);
        let stacks = stack_layout(cfg, cfg.fusion_variant)
            .into_iter()
            .map(|(name, c)| StackParams::init(store, rng, &format!("fusion.{name}"), c))
            .collect::<Result<_>>()?;
        Ok(FusionParams {
            variant: cfg.fusion_variant,
            seed,
            proj_v,
            proj_l,
            stacks,
        })
    }
}

/// Maps encoder outputs `[N_v × D_v]`, `[N_l × D_l]` to `[N × D]` each.
pub fn project(g: &mut Graph, zv: Var, zl: Var, p: &FusionParams, b: &Bindings) -> Result<(Var, Var)> {
    Ok((p.proj_v.apply(g, zv, b)?, p.proj_l.apply(g, zl, b)?))
}

/// Fused outputs; `zl` is present only where a stack refines the
/// linguistic tokens after they have seen the image.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub zv: Var,
    pub seed: Var,
    pub zl: Option<Var>,
}

/// Seed-row attention captured per stack.
#[derive(Clone, Debug, Default)]
pub struct FusionTrace {
    pub stacks: Vec<StackTrace>,
}

#[derive(Clone, Debug)]
pub struct StackTrace {
    pub name: &'static str,
    /// Token ranges `(visual, linguistic, seed)` of the stack's sequence;
    /// `None` when the seed is absent.
    pub segments: Option<[std::ops::Range<usize>; 3]>,
    pub layers: usize,
    pub attention: AttentionTrace,
}

fn run_stack(
    g: &mut Graph,
    z: Var,
    p: &StackParams,
    b: &Bindings,
    name: &'static str,
    segments: Option<[std::ops::Range<usize>; 3]>,
    trace: Option<&mut FusionTrace>,
) -> Result<Var> {
    match trace {
        None => encoder_stack(g, z, p, b, None),
        Some(t) => {
            let mut attention = match &segments {
                Some(s) => AttentionTrace::for_row(s[2].start),
                None => AttentionTrace::default(),
            };
            // Without a seed there is nothing to probe, so skip the capture.
            let out = if segments.is_some() {
                encoder_stack(g, z, p, b, Some(&mut attention))?
            } else {
                encoder_stack(g, z, p, b, None)?
            };
            t.stacks.push(StackTrace {
                name,
                segments,
                layers: p.config.layers,
                attention,
            });
            Ok(out)
        }
    }
}

fn check_stacks(p: &FusionParams, want: usize) -> Result<()> {
    if p.stacks.len() != want {
        return Err(Error::Config(format!(
            "{} fusion needs {want} stacks, parameters hold {}",
            p.variant,
            p.stacks.len()
        )));
    }
    Ok(())
}

/// Visual-linguistic stack over `[z_v ∥ z_l]`, then the linguistic-seed stack
/// over `[z_l′ ∥ e_s]`.
pub fn fuse_cme(g: &mut Graph, zv: Var, zl: Var, p: &FusionParams, b: &Bindings, mut trace: Option<&mut FusionTrace>) -> Result<FusionOutput> {
    check_stacks(p, 2)?;
    let (nv, nl) = (g.shape(zv)[0], g.shape(zl)[0]);
    let joint = g.concat(&[zv, zl], 0)?;
    let vl = run_stack(g, joint, &p.stacks[0], b, "vl", None, trace.as_deref_mut())?;
    let zv_out = g.slice(vl, 0, 0, nv)?;
    let zl_out = g.slice(vl, 0, nv, nl)?;
    let ls_in = g.concat(&[zl_out, b[p.seed]], 0)?;
    let segments = [0..0, 0..nl, nl..nl + 1];
    let ls = run_stack(g, ls_in, &p.stacks[1], b, "ls", Some(segments), trace)?;
    let seed = g.slice(ls, 0, nl, 1)?;
    Ok(FusionOutput {
        zv: zv_out,
        seed,
        zl: Some(zl_out),
    })
}

/// One stack over `[z_v ∥ z_l ∥ e_s]`.
pub fn fuse_vme(g: &mut Graph, zv: Var, zl: Var, p: &FusionParams, b: &Bindings, trace: Option<&mut FusionTrace>) -> Result<FusionOutput> {
    check_stacks(p, 1)?;
    let (nv, nl) = (g.shape(zv)[0], g.shape(zl)[0]);
    let joint = g.concat(&[zv, zl, b[p.seed]], 0)?;
    let segments = [0..nv, nv..nv + nl, nv + nl..nv + nl + 1];
    let out = run_stack(g, joint, &p.stacks[0], b, "joint", Some(segments), trace)?;
    Ok(FusionOutput {
        zv: g.slice(out, 0, 0, nv)?,
        seed: g.slice(out, 0, nv + nl, 1)?,
        zl: None,
    })
}

/// Like [`fuse_cme`], but the seed stack reads the projected linguistic
/// tokens directly, so the seed never depends on the image.
pub fn fuse_ime(g: &mut Graph, zv: Var, zl: Var, p: &FusionParams, b: &Bindings, mut trace: Option<&mut FusionTrace>) -> Result<FusionOutput> {
    check_stacks(p, 2)?;
    let (nv, nl) = (g.shape(zv)[0], g.shape(zl)[0]);
    let joint = g.concat(&[zv, zl], 0)?;
    let vl = run_stack(g, joint, &p.stacks[0], b, "vl", None, trace.as_deref_mut())?;
    let zv_out = g.slice(vl, 0, 0, nv)?;
    let ls_in = g.concat(&[zl, b[p.seed]], 0)?;
    let segments = [0..0, 0..nl, nl..nl + 1];
    let ls = run_stack(g, ls_in, &p.stacks[1], b, "ls", Some(segments), trace)?;
    Ok(FusionOutput {
        zv: zv_out,
        seed: g.slice(ls, 0, nl, 1)?,
        zl: None,
    })
}

/// Dispatches on the parameters' variant. Inputs are already projected.
pub fn fuse(g: &mut Graph, zv: Var, zl: Var, p: &FusionParams, b: &Bindings, trace: Option<&mut FusionTrace>) -> Result<FusionOutput> {
    match p.variant {
        FusionVariant::Vme => fuse_vme(g, zv, zl, p, b, trace),
        FusionVariant::Ime => fuse_ime(g, zv, zl, p, b, trace),
        FusionVariant::Cme | FusionVariant::CmeShared => fuse_cme(g, zv, zl, p, b, trace),
    }
}

/// Seed-row attention split per layer, as fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttn {
    pub stack: &'static str,
    /// 1-based position among all fusion layers.
    pub layer: usize,
    /// `[a_v, a_l, a_self]`, or `None` for stacks without the seed.
    pub shares: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnStats {
    pub layers: Vec<LayerAttn>,
    pub samples: usize,
}

impl AttnStats {
    /// Rows `stack,layer,a_v,a_l,a_self` in percent; `NA` where the stack has
    /// no seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stack,layer,a_v,a_l,a_self\n");
        for l in &self.layers {
            match l.shares {
                Some([v, ln, me]) => {
                    let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4}", l.stack, l.layer, 100.0 * v, 100.0 * ln, 100.0 * me);
                }
                None => {
                    let _ = writeln!(s, "{},{},NA,NA,NA", l.stack, l.layer);
                }
            }
        }
        s
    }
}

fn accumulate_trace(stats: &mut Vec<(&'static str, Option<[f64; 3]>)>, trace: &FusionTrace) {
    let mut layer = 0;
    for st in &trace.stacks {
        for l in 0..st.layers {
            let shares = st.segments.as_ref().map(|seg| {
                let heads = &st.attention.layers[l];
                let mut acc = [0.0; 3];
                for row in heads {
                    for (k, r) in seg.iter().enumerate() {
                        acc[k] += row[r.clone()].iter().sum::<f64>();
                    }
                }
                acc.map(|a| a / heads.len() as f64)
            });
            if stats.len() <= layer {
                stats.push((st.name, shares.map(|_| [0.0; 3])));
            }
            if let (Some(total), Some(s)) = (stats[layer].1.as_mut(), shares) {
                for k in 0..3 {
                    total[k] += s[k];
                }
            }
            layer += 1;
        }
    }
}

/// Average seed attention over heads and over `features`, each a raw encoder
/// output pair `(z_v, z_l)` that is projected and fused here.
pub fn attention_probe(p: &FusionParams, store: &ParamStore, features: &[(Tensor, Tensor)]) -> Result<AttnStats> {
    if features.is_empty() {
        return Err(Error::Invalid("attention probe needs at least one sample".into()));
    }
    let mut totals = Vec::new();
    for (zv, zl) in features {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let (zv, zl) = (g.constant(zv), g.constant(zl));
        let (pv, pl) = project(&mut g, zv, zl, p, &b)?;
        let mut trace = FusionTrace::default();
        fuse(&mut g, pv, pl, p, &b, Some(&mut trace))?;
        accumulate_trace(&mut totals, &trace);
    }
    let n = features.len() as f64;
    Ok(AttnStats {
        layers: totals
            .into_iter()
            .enumerate()
            .map(|(i, (stack, shares))| LayerAttn {
                stack,
                layer: i + 1,
                shares: shares.map(|s| s.map(|v| v / n)),
            })
            .collect(),
        samples: features.len(),
    })
}

/// Fusion-encoder cost. `params` counts transformer-block weights of the
/// fusion stacks; projectors, seed, and terminal norms are `aux_params`.
/// `macs` covers one forward pass through the fusion stacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Profile {
    pub variant: FusionVariant,
    pub params: usize,
    pub aux_params: usize,
    pub macs: u64,
}

/// Closed-form cost of `variant` at the geometry of `cfg`.
pub fn profile(cfg: &ModelConfig, variant: FusionVariant) -> Profile {
    let (nv, nl, d) = (cfg.n_patches(), cfg.max_tokens, cfg.fusion_dim);
    let layout = stack_layout(cfg, variant);
    let params = layout.iter().map(|(_, c)| c.stored_blocks() * c.block_params()).sum();
    let projectors = (2 * cfg.vision_dim + cfg.vision_dim * d + d) + (2 * cfg.language_dim + cfg.language_dim * d + d);
    let aux_params = projectors + d + layout.len() * 2 * d;
    let macs = match variant {
        FusionVariant::Vme => layout[0].1.stack_macs(nv + nl + 1),
        _ => layout[0].1.stack_macs(nv + nl) + layout[1].1.stack_macs(nl + 1),
    };
    Profile {
        variant,
        params,
        aux_params,
        macs,
    }
}

/// Multiplies actually executed by the engine for one fusion pass of
/// `variant` on random projected inputs.
pub fn measured_macs(cfg: &ModelConfig, variant: FusionVariant, seed: u64) -> Result<u64> {
    let cfg = ModelConfig {
        fusion_variant: variant,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = FusionParams::init(&mut store, &mut rng, &cfg)?;
    let d = cfg.fusion_dim;
    let mut random = |n: usize| {
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let (zv_t, zl_t) = (random(cfg.n_patches())?, random(cfg.max_tokens)?);
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let (zv, zl) = (g.constant(&zv_t), g.constant(&zl_t));
    let (result, count) = macs::count(|| fuse(&mut g, zv, zl, &p, &b, None));
    result?;
    Ok(count)
}

pub fn profile_csv(rows: &[Profile]) -> String {
    let mut s = String::from("variant,params,aux_params,macs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.params, r.aux_params, r.macs);
    }
    s
}
