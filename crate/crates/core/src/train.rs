//! Patch labels, the two-term loss, AdamW with decoupled decay, the warmup +
//! polynomial schedule, and the mini-batch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{ForwardVars, Model};
use crate::params::ParamStore;
use crate::par;
use crate::tensor::{Graph, Tensor, Var};

/// Per-patch labels `[N_v × 1]`: 1 where the mask's mean over the patch is
/// strictly greater than `tau`.
pub fn patch_labels(mask: &Tensor, p: usize, tau: f64) -> Result<Tensor> {
    let &[h, w, 1] = mask.shape() else {
        return Err(Error::Invalid(format!("mask must be H×W×1, got {:?}", mask.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}×{w} mask is not divisible into {p}×{p} patches")));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("mask is not binary".into()));
    }
    let (gh, gw) = (h / p, w / p);
    let m = mask.data();
    let labels = (0..gh * gw)
        .map(|i| {
            let (py, px) = (i / gw, i % gw);
            let on: f64 = (0..p)
                .flat_map(|y| (0..p).map(move |x| (py * p + y) * w + px * p + x))
                .map(|j| m[j])
                .sum();
            if on / (p * p) as f64 > tau {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[gh * gw, 1], labels)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub patch: Var,
    pub pixel: Var,
}

/// `λ·BCE(ŷ_p, y_p) + BCE(σ(Ŷ_m), Y_m)`, each term averaged over its own
/// elements.
pub fn loss(g: &mut Graph, out: &ForwardVars, patch_target: &Tensor, mask: &Tensor, lambda: f64) -> Result<LossVars> {
    let patch = g.bce(out.patch_probs, patch_target)?;
    let probs = g.sigmoid(out.pixel_logits);
    let pixel = g.bce(probs, mask)?;
    let weighted = g.scale(patch, lambda);
    let total = g.add(weighted, pixel)?;
    Ok(LossVars { total, patch, pixel })
}

/// Linear ramp to `base_lr` over the warmup, then polynomial decay to zero
/// at `total_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_iters, cfg.total_iters);
    if iter < w {
        cfg.base_lr * iter as f64 / w as f64
    } else if iter >= t {
        if t == w && iter == t {
            cfg.base_lr
        } else {
            0.0
        }
    } else {
        let frac = (iter - w) as f64 / (t - w) as f64;
        cfg.base_lr * (1.0 - frac).powf(cfg.poly_power)
    }
}

/// First and second moment estimates with the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamW {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`. Weight decay applies
    /// only to parameters flagged for it and precedes the Adam step.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if self.m.len() != store.len()
            || store.iter().zip(&self.m).any(|(p, m)| p.tensor.len() != m.len())
        {
            return Err(Error::Invalid("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let grad = p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; m.len()]);
            for (((x, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x *= decay;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub patch: f64,
    pub pixel: f64,
}

/// Forward and backward pass for one sample: the loss terms and the
/// gradient of every parameter, in store order.
pub fn sample_gradients(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let y_p = patch_labels(&sample.mask, model.config.patch_size, cfg.tau)?;
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let out = model.forward(&mut g, &b, &sample.image, &sample.tokens, None)?;
    let l = loss(&mut g, &out, &y_p, &sample.mask, cfg.lambda)?;
    let terms = LossTerms {
        total: g.value(l.total)[0],
        patch: g.value(l.patch)[0],
        pixel: g.value(l.pixel)[0],
    };
    g.backward(l.total)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.store.iter())
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec))
        .collect();
    Ok((terms, grads))
}

/// Sample indices of the batch at `iter`: a fresh seeded permutation of the
/// data per epoch, consumed `batch_size` at a time across epoch boundaries.
pub fn batch_indices(seed: u64, iter: usize, n: usize, batch: usize) -> Vec<usize> {
    let perm = |epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
        rng.set_stream(epoch as u64);
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    };
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (iter * batch..(iter + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, perm(epoch)));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossTerms,
    pub eval_iou: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,lr,loss_total,loss_patch,loss_pixel,eval_iou\n");
    for r in rows {
        let eval = r.eval_iou.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{},{:.6e},{:.8},{:.8},{:.8},{eval}",
            r.iter, r.lr, r.loss.total, r.loss.patch, r.loss.pixel
        );
    }
    s
}

/// Training state: model, optimizer, and the number of finished steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub iter: usize,
    pub threads: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.store);
        Ok(Trainer {
            model,
            opt,
            cfg,
            iter: 0,
            threads: par::thread_count(),
        })
    }

    /// Continues from saved optimizer state after `opt.step` iterations.
    pub fn resume(model: Model, opt: AdamW, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let iter = opt.step as usize;
        Ok(Trainer {
            model,
            opt,
            cfg,
            iter,
            threads: par::thread_count(),
        })
    }

    /// Runs one optimizer step on the next batch of `data`.
    pub fn step(&mut self, data: &[Sample]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.iter, data.len(), self.cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let model = &self.model;
        let cfg = &self.cfg;
        let results = par::map(&batch, self.threads, |s| sample_gradients(model, s, cfg));

        self.model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut terms = LossTerms::default();
        for r in results {
            let (t, grads) = r?;
            terms.total += t.total * scale;
            terms.patch += t.patch * scale;
            terms.pixel += t.pixel * scale;
            for (p, g) in self.model.store.iter_mut().zip(grads) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.tensor.accumulate_grad(&scaled);
            }
        }
        let lr = lr_at(self.iter + 1, &self.cfg);
        self.opt.step(&mut self.model.store, lr, &self.cfg)?;
        self.iter += 1;
        Ok(LogRow {
            iter: self.iter,
            lr,
            loss: terms,
            eval_iou: None,
        })
    }

    /// Steps until `total_iters`, evaluating on `eval_data` every
    /// `eval_every` steps and after the last one.
    pub fn run(&mut self, data: &[Sample], eval_data: &[Sample], on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        self.run_until(self.cfg.total_iters, data, eval_data, on_row)
    }

    /// Like [`Trainer::run`], but stops once `until` steps are done. The
    /// schedule still spans `total_iters`.
    pub fn run_until(
        &mut self,
        until: usize,
        data: &[Sample],
        eval_data: &[Sample],
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        if until > self.cfg.total_iters {
            return Err(Error::Config(format!(
                "cannot stop at step {until}: the schedule ends at {}",
                self.cfg.total_iters
            )));
        }
        let mut rows = Vec::new();
        while self.iter < until {
            let mut row = self.step(data)?;
            let due = self.cfg.eval_every > 0 && self.iter.is_multiple_of(self.cfg.eval_every);
            if !eval_data.is_empty() && (due || self.iter == self.cfg.total_iters) {
                row.eval_iou = Some(evaluate(&self.model, eval_data, None)?.cumulative_iou);
            }
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Trains `model` on `data` for the configured number of iterations.
pub fn train(model: Model, data: &[Sample], cfg: &TrainConfig) -> Result<(Model, Vec<LogRow>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let rows = t.run(data, data, |_| {})?;
    Ok((t.model, rows))
}
