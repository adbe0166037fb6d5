//! Finite-difference gradient suites: every engine operation on random
//! shapes, and the full network's loss with respect to sampled parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionVariant, ModelConfig, TrainConfig};
use crate::data::generate;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::{grad_check, Fault, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::train::{loss, patch_labels};

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One check: input tensors and a scalar function of them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `Σ out ⊙ r` with a fixed random `r`, so each output element gets a
/// distinct upstream gradient.
fn weighted(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r);
    let h = g.hadamard(out, rv)?;
    Ok(g.sum(h))
}

/// The operation cases for one seed. Shapes are drawn from the seed.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
    let (h, w, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let mut cases = Vec::new();
    let mut add = |name, inputs: Vec<Tensor>, f: OpFn| cases.push(OpCase { name, inputs, f });

    let r = random(&mut rng, &[m, n]);
    add("matmul", vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[n, m]);
    add("transpose", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.transpose(v[0])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("add", vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("add_row", vec![random(&mut rng, &[m, n]), random(&mut rng, &[n])], Box::new(move |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("hadamard", vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.hadamard(v[0], v[1])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("hadamard_rows", vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, 1])], Box::new(move |g, v| {
        let y = g.hadamard(v[0], v[1])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    let s = rng.gen_range(-2.0..2.0);
    add("scale", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.scale(v[0], s);
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("gelu", vec![away_from_zero(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.gelu(v[0]);
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("relu", vec![away_from_zero(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.relu(v[0]);
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n]);
    add("sigmoid", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.sigmoid(v[0]);
        weighted(g, y, &r)
    }));
    for axis in 0..3 {
        let r = random(&mut rng, &[h, w, c]);
        add("softmax", vec![random(&mut rng, &[h, w, c])], Box::new(move |g, v| {
            let y = g.softmax(v[0], axis)?;
            weighted(g, y, &r)
        }));
    }
    let d = n + 1;
    let r = random(&mut rng, &[m, d]);
    add("layer_norm", vec![random(&mut rng, &[m, d]), random(&mut rng, &[d]), random(&mut rng, &[d])], Box::new(move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m + k, n]);
    add("concat", vec![random(&mut rng, &[m, n]), random(&mut rng, &[k, n])], Box::new(move |g, v| {
        let y = g.concat(&[v[0], v[1]], 0)?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[m, n + k]);
    add("concat_cols", vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, k])], Box::new(move |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        weighted(g, y, &r)
    }));
    let start = rng.gen_range(0..n);
    let len = rng.gen_range(1..=n - start);
    let r = random(&mut rng, &[m, len]);
    add("slice", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.slice(v[0], 1, start, len)?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[n, m]);
    add("reshape", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.reshape(v[0], &[n, m])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[2 * h, 2 * w, c]);
    add("upsample2x", vec![random(&mut rng, &[h, w, c])], Box::new(move |g, v| {
        let y = g.upsample2x(v[0])?;
        weighted(g, y, &r)
    }));
    let r = random(&mut rng, &[2 * h, 2 * w, c]);
    add("upsample2x_bilinear", vec![random(&mut rng, &[h, w, c])], Box::new(move |g, v| {
        let y = g.upsample2x_bilinear(v[0])?;
        weighted(g, y, &r)
    }));
    let target = Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
    let probs = Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    add("bce", vec![probs], Box::new(move |g, v| g.bce(v[0], &target)));
    add("sum", vec![random(&mut rng, &[m, n])], Box::new(|g, v| Ok(g.sum(v[0]))));
    let r = random(&mut rng, &[1]);
    add("mean", vec![random(&mut rng, &[m, n])], Box::new(move |g, v| {
        let y = g.mean(v[0]);
        weighted(g, y, &r)
    }));
    let dh = k + 1;
    let r = random(&mut rng, &[m, dh]);
    add(
        "attention",
        vec![random(&mut rng, &[m, dh]), random(&mut rng, &[m, dh]), random(&mut rng, &[m, dh])],
        Box::new(move |g, v| {
            let (y, _) = crate::transformer::attend(g, v[0], v[1], v[2])?;
            weighted(g, y, &r)
        }),
    );
    cases
}

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Checks every operation for each of `seeds` at relative tolerance `1e-4`.
pub fn check_ops(seeds: &[u64], fault: Option<Fault>) -> Result<Vec<OpResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in op_cases(seed) {
            let report = grad_check(
                &case.f,
                &case.inputs,
                GradCheckOptions {
                    fault,
                    ..Default::default()
                },
            )?;
            out.push(OpResult {
                name: case.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}

/// Geometry for the whole-network check: 16×16 input, 4-pixel patches,
/// width 16, two heads, one layer per encoder.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_h: 16,
        image_w: 16,
        patch_size: 4,
        vision_dim: 16,
        language_dim: 16,
        fusion_dim: 16,
        heads: 2,
        vision_layers: 1,
        language_layers: 1,
        fusion_layers: 2,
        max_tokens: 6,
        fusion_variant: FusionVariant::Cme,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheck {
    /// `(parameter name, flat index, analytic, numeric, relative error)`.
    pub entries: Vec<(String, usize, f64, f64, f64)>,
    pub max_rel_error: f64,
}

/// Gradient of the training loss against central differences on `count`
/// randomly sampled parameter entries.
pub fn check_model(cfg: &ModelConfig, count: usize, seed: u64, fault: Option<Fault>) -> Result<ModelCheck> {
    const EPS: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut model = Model::new(cfg.clone(), seed)?;
    let data = generate(seed, 1, 32, 32)?;
    let mut sample = data.samples[0].clone();
    // Re-render the target at the model's resolution by nearest sampling.
    let (h, w) = (cfg.image_h, cfg.image_w);
    let pick = |t: &Tensor, c: usize| {
        let (sh, sw) = (t.shape()[0], t.shape()[1]);
        let data = (0..h * w * c)
            .map(|i| {
                let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
                t.at(&[y * sh / h, x * sw / w, ch])
            })
            .collect();
        Tensor::new(&[h, w, c], data).unwrap()
    };
    sample.image = pick(&sample.image, 3);
    sample.mask = pick(&sample.mask, 1);
    let train = TrainConfig {
        tau: 0.5,
        ..TrainConfig::default()
    };
    let y_p = patch_labels(&sample.mask, cfg.patch_size, train.tau)?;

    let loss_of = |model: &Model, fault: Option<Fault>| -> Result<(f64, Graph, crate::params::Bindings, Var)> {
        let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
        let b = model.store.bind(&mut g);
        let out = model.forward(&mut g, &b, &sample.image, &sample.tokens, None)?;
        let l = loss(&mut g, &out, &y_p, &sample.mask, train.lambda)?;
        Ok((g.value(l.total)[0], g, b, l.total))
    };

    let (_, mut g, b, total) = loss_of(&model, fault)?;
    g.backward(total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let sizes: Vec<usize> = model.store.iter().map(|p| p.tensor.len()).collect();
    let all: usize = sizes.iter().sum();
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..all);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let analytic = g.grad(b.vars()[pi]).map_or(0.0, |gr| gr[flat]);
        let id = model.store.iter().nth(pi).map(|p| p.name.clone()).unwrap();
        let param_id = model.store.find(&id).unwrap();
        let orig = model.store.get(param_id).tensor.data()[flat];
        model.store.get_mut(param_id).tensor.data_mut()[flat] = orig + EPS;
        let plus = loss_of(&model, None)?.0;
        model.store.get_mut(param_id).tensor.data_mut()[flat] = orig - EPS;
        let minus = loss_of(&model, None)?.0;
        model.store.get_mut(param_id).tensor.data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        entries.push((id, flat, analytic, numeric, rel));
    }
    let max_rel_error = entries.iter().map(|e| e.4).fold(0.0, f64::max);
    Ok(ModelCheck { entries, max_rel_error })
}
