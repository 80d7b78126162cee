//! Overlap rates and boundary distances for label maps.

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, LabelMap};

/// One-vs-rest counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub tn: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn total(&self, class: usize) -> u64 {
        self.tp[class] + self.fp[class] + self.tn[class] + self.fn_[class]
    }

    pub fn present_in_gt(&self, class: usize) -> bool {
        self.tp[class] + self.fn_[class] > 0
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    pred.validate(classes)?;
    gt.validate(classes)?;
    let mut c = ConfusionCounts { tp: vec![0; classes], fp: vec![0; classes], tn: vec![0; classes], fn_: vec![0; classes] };
    let n = gt.data.len() as u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p == g {
            c.tp[p as usize] += 1;
        } else {
            c.fp[p as usize] += 1;
            c.fn_[g as usize] += 1;
        }
    }
    for k in 0..classes {
        c.tn[k] = n - c.tp[k] - c.fp[k] - c.fn_[k];
    }
    Ok(c)
}

/// A percentage; `undefined` marks an empty denominator (value then 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

fn rate(scale: f64, num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate { value: 0.0, undefined: true }
    } else {
        Rate { value: scale * num as f64 / den as f64, undefined: false }
    }
}

pub fn dice(c: &ConfusionCounts, k: usize) -> Rate {
    rate(200.0, c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn_[k])
}

pub fn jaccard(c: &ConfusionCounts, k: usize) -> Rate {
    rate(100.0, c.tp[k], c.tp[k] + c.fp[k] + c.fn_[k])
}

pub fn sensitivity(c: &ConfusionCounts, k: usize) -> Rate {
    rate(100.0, c.tp[k], c.tp[k] + c.fn_[k])
}

pub fn specificity(c: &ConfusionCounts, k: usize) -> Rate {
    rate(100.0, c.tn[k], c.tn[k] + c.fp[k])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub present: bool,
    pub dice: Rate,
    pub jaccard: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
}

pub fn class_metrics(c: &ConfusionCounts) -> Vec<ClassMetrics> {
    (0..c.classes())
        .map(|k| ClassMetrics {
            class: k,
            present: c.present_in_gt(k),
            dice: dice(c, k),
            jaccard: jaccard(c, k),
            sensitivity: sensitivity(c, k),
            specificity: specificity(c, k),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Number of classes averaged.
    pub classes: usize,
}

impl MeanMetrics {
    /// Unweighted mean of several summaries (for example over images).
    pub fn average(items: &[MeanMetrics]) -> MeanMetrics {
        let n = items.len().max(1) as f64;
        MeanMetrics {
            dice: items.iter().map(|m| m.dice).sum::<f64>() / n,
            jaccard: items.iter().map(|m| m.jaccard).sum::<f64>() / n,
            sensitivity: items.iter().map(|m| m.sensitivity).sum::<f64>() / n,
            specificity: items.iter().map(|m| m.specificity).sum::<f64>() / n,
            classes: items.iter().map(|m| m.classes).max().unwrap_or(0),
        }
    }
}

/// Macro-mean over classes present in the ground truth, optionally skipping class 0.
pub fn mean_metrics(per_class: &[ClassMetrics], include_background: bool) -> MeanMetrics {
    let used: Vec<&ClassMetrics> =
        per_class.iter().filter(|m| m.present && (include_background || m.class != 0)).collect();
    if used.is_empty() {
        return MeanMetrics::default();
    }
    let n = used.len() as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| used.iter().map(|m| f(m)).sum::<f64>() / n;
    MeanMetrics {
        dice: avg(|m| m.dice.value),
        jaccard: avg(|m| m.jaccard.value),
        sensitivity: avg(|m| m.sensitivity.value),
        specificity: avg(|m| m.specificity.value),
        classes: used.len(),
    }
}

/// Per-class and mean metrics for one prediction.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, classes: usize, include_background: bool) -> Result<(Vec<ClassMetrics>, MeanMetrics)> {
    let per = class_metrics(&confusion(pred, gt, classes)?);
    let mean = mean_metrics(&per, include_background);
    Ok((per, mean))
}

/// Foreground pixels with a background or out-of-frame 4-neighbour.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::empty(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let (yi, xi) = (y as isize, x as isize);
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !mask.at(yi + dy, xi + dx));
                out.set(y, x, edge);
            }
        }
    }
    out
}

/// Linear interpolation between order statistics, `q` in `[0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of sampled function `f` with sample
/// spacing `s` (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let inter = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
            if inter <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = inter;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel of `sites`.
fn distance_map(sites: &BinaryMask, spacing: (f64, f64)) -> Vec<f64> {
    let (h, w) = (sites.height, sites.width);
    let mut grid: Vec<f64> = sites.data.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, spacing.0, &mut tmp[..h]);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, spacing.1, &mut tmp[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

fn directed_p95(from: &BinaryMask, to: &BinaryMask, spacing: (f64, f64)) -> f64 {
    let dist = distance_map(to, spacing);
    let mut d: Vec<f64> = from.data.iter().zip(&dist).filter(|(&b, _)| b).map(|(_, &v)| v).collect();
    percentile(&mut d, 0.95)
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries,
/// `spacing` = (row, column). `None` when either mask is empty.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: (f64, f64)) -> Result<Option<f64>> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract("hd95 masks differ in extent"));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Ok(None);
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    Ok(Some(directed_p95(&bp, &bg, spacing).max(directed_p95(&bg, &bp, spacing))))
}
