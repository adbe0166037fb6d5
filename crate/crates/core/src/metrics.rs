//! Cumulative IoU, precision at IoU thresholds, and length-bucketed IoU.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::tensor::Tensor;

pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// 1 where `σ(logit) ≥ 0.5`, i.e. `logit ≥ 0`.
pub fn binarize(logits: &Tensor) -> Tensor {
    let data = logits.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(logits.shape(), data).expect("same shape as input")
}

/// Intersection and union pixel counts of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("iou", pred.shape(), gt.shape()));
        }
        let mut o = Overlap::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p != 0.0, g != 0.0);
            o.intersection += (p && g) as u64;
            o.union += (p || g) as u64;
        }
        Ok(o)
    }

    /// Per-sample IoU; `None` when both masks are empty.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// `Σ I / Σ U`; 0 when every union is empty.
pub fn cumulative(overlaps: &[Overlap]) -> f64 {
    let i: u64 = overlaps.iter().map(|o| o.intersection).sum();
    let u: u64 = overlaps.iter().map(|o| o.union).sum();
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn cumulative_iou(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "need equal, non-empty prediction and ground-truth lists (got {} and {})",
            preds.len(),
            gts.len()
        )));
    }
    let overlaps = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Overlap::of(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(cumulative(&overlaps))
}

/// Fraction of samples with IoU at least `threshold`.
pub fn prec_at(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64
}

/// Inclusive token-length ranges, e.g. `1-2,3,4-5,6-20`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Buckets(pub Vec<(usize, usize)>);

impl Buckets {
    pub fn standard() -> Self {
        Buckets(vec![(1, 2), (3, 3), (4, 5), (6, 20)])
    }

    pub fn find(&self, len: usize) -> Option<usize> {
        self.0.iter().position(|&(lo, hi)| (lo..=hi).contains(&len))
    }

    pub fn label(&self, i: usize) -> String {
        match self.0[i] {
            (lo, hi) if lo == hi => lo.to_string(),
            (lo, hi) => format!("{lo}-{hi}"),
        }
    }
}

impl FromStr for Buckets {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid bucket list {s:?}"));
        let ranges = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                let (lo, hi) = part.split_once('-').unwrap_or((part, part));
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                Ok((lo, hi))
            })
            .collect::<Result<Vec<_>>>()?;
        if ranges.is_empty() {
            return Err(bad());
        }
        Ok(Buckets(ranges))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub label: String,
    pub count: usize,
    pub intersection: u64,
    pub union: u64,
    /// `None` for an empty bucket.
    pub iou: Option<f64>,
}

/// Cumulative IoU within each bucket of expression length.
pub fn bucket_by_length(lengths: &[usize], overlaps: &[Overlap], buckets: &Buckets) -> Result<Vec<BucketRow>> {
    let mut rows: Vec<BucketRow> = (0..buckets.0.len())
        .map(|i| BucketRow {
            label: buckets.label(i),
            count: 0,
            intersection: 0,
            union: 0,
            iou: None,
        })
        .collect();
    for (&len, o) in lengths.iter().zip(overlaps) {
        let i = buckets
            .find(len)
            .ok_or_else(|| Error::Invalid(format!("no bucket covers expression length {len}")))?;
        rows[i].count += 1;
        rows[i].intersection += o.intersection;
        rows[i].union += o.union;
    }
    for r in &mut rows {
        r.iou = (r.count > 0).then(|| cumulative(&[Overlap { intersection: r.intersection, union: r.union }]));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cumulative_iou: f64,
    pub overlaps: Vec<Overlap>,
    /// Per-sample IoU, with empty-vs-empty samples counted as 1.
    pub ious: Vec<f64>,
    pub prec: Vec<(f64, f64)>,
    pub buckets: Vec<BucketRow>,
}

impl EvalReport {
    pub fn new(overlaps: Vec<Overlap>, lengths: &[usize], buckets: Option<&Buckets>) -> Result<Self> {
        if overlaps.is_empty() {
            return Err(Error::Invalid("nothing to evaluate".into()));
        }
        let ious: Vec<f64> = overlaps.iter().map(|o| o.iou().unwrap_or(1.0)).collect();
        let prec = PREC_THRESHOLDS.iter().map(|&t| (t, prec_at(&ious, t))).collect();
        let buckets = match buckets {
            Some(b) => bucket_by_length(lengths, &overlaps, b)?,
            None => Vec::new(),
        };
        Ok(EvalReport {
            cumulative_iou: cumulative(&overlaps),
            overlaps,
            ious,
            prec,
            buckets,
        })
    }

    /// `metric,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,key,value\n");
        let _ = writeln!(s, "cumulative_iou,all,{:.6}", self.cumulative_iou);
        for (t, p) in &self.prec {
            let _ = writeln!(s, "prec,{t:.1},{p:.6}");
        }
        for b in &self.buckets {
            let v = b.iou.map_or("NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "bucket_iou,{},{v}", b.label);
            let _ = writeln!(s, "bucket_count,{},{}", b.label, b.count);
        }
        for (i, v) in self.ious.iter().enumerate() {
            let _ = writeln!(s, "sample_iou,{i},{v:.6}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("samples         {}\ncumulative IoU  {:.2}\n", self.ious.len(), 100.0 * self.cumulative_iou);
        for (t, p) in &self.prec {
            let _ = writeln!(s, "Prec@{t:.1}        {:.2}", 100.0 * p);
        }
        if !self.buckets.is_empty() {
            let _ = writeln!(s, "length  count  IoU");
            for b in &self.buckets {
                let v = b.iou.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
                let _ = writeln!(s, "{:<7} {:<6} {v}", b.label, b.count);
            }
        }
        s
    }
}

/// Binarised pixel predictions for `samples`, computed in parallel.
pub fn predict_masks(model: &Model, samples: &[Sample]) -> Result<Vec<Tensor>> {
    par::map(samples, par::thread_count(), |s| {
        model.predict(&s.image, &s.tokens).map(|p| binarize(&p.pixel_logits))
    })
    .into_iter()
    .collect()
}

/// Runs the model on every sample and scores its pixel predictions.
pub fn evaluate(model: &Model, samples: &[Sample], buckets: Option<&Buckets>) -> Result<EvalReport> {
    let preds = predict_masks(model, samples)?;
    let overlaps = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| Overlap::of(p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = samples.iter().map(|s| s.tokens.len()).collect();
    EvalReport::new(overlaps, &lengths, buckets)
}
