//! Temporal IoU, per-class average precision and mean AP over thresholds.
//!
//! Matching is greedy in descending score: each prediction takes the
//! best-overlapping still-unmatched ground truth of its video and class when
//! that overlap reaches the threshold. AP is the all-point interpolated area
//! under the precision-recall curve.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};

pub const THUMOS_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Intersection over union of two intervals; 0 when disjoint.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Like [`tiou`] but rejects degenerate intervals.
pub fn checked_tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.0 < a.1) || !(b.0 < b.1) {
        return Err(Error::Evaluation(format!("degenerate interval in tiou({a:?}, {b:?})")));
    }
    Ok(tiou(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub video: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub video: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: THUMOS_THRESHOLDS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(config_err(format!(
                "tIoU thresholds must be in (0, 1] and strictly increasing, got {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }
}

/// AP for one class at one threshold, or `None` when the class has no
/// ground truth. Ties in score keep input order; a prediction overlapping
/// two ground truths equally matches the earlier one.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], class: usize, thresh: f64) -> Option<f64> {
    let gt: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gt.is_empty() {
        return None;
    }
    let mut order: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = alloc::vec![false; gt.len()];
    let mut tp = Vec::with_capacity(order.len());
    for p in &order {
        let mut best = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.video != p.video {
                continue;
            }
            let o = tiou((p.t_start, p.t_end), (g.t_start, g.t_end));
            // equal overlaps go to the earlier segment, whatever the input order
            let earlier = |b: usize| (g.t_start, g.t_end) < (gt[b].t_start, gt[b].t_end);
            if o >= thresh && (o > best_iou || (o == best_iou && best.is_some_and(earlier))) {
                best = Some(j);
                best_iou = o;
            }
        }
        match best {
            Some(j) => {
                used[j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Some(ap_from_matches(&tp, gt.len()))
}

/// All-point interpolated AP from a ranked list of match flags.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_rec = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_rec {
            ap += (r - last_rec) * p;
            last_rec = *r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    pub classes: usize,
    /// `[threshold][class]`, `None` for classes without ground truth
    pub per_class: Vec<Vec<Option<f64>>>,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

impl MapResult {
    /// Per-class AP averaged over thresholds.
    pub fn class_average(&self, class: usize) -> Option<f64> {
        let v: Vec<f64> = self.per_class.iter().filter_map(|row| row[class]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// mAP per threshold (mean over classes with ground truth) and its mean over
/// thresholds.
pub fn mean_ap(preds: &[Prediction], gts: &[GroundTruth], classes: usize, cfg: &EvalConfig) -> Result<MapResult> {
    cfg.validate()?;
    if gts.is_empty() {
        return Err(Error::Evaluation("no ground-truth instances to evaluate against".into()));
    }
    let mut per_class = Vec::with_capacity(cfg.thresholds.len());
    let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
    for &th in &cfg.thresholds {
        let row: Vec<Option<f64>> = (0..classes).map(|c| average_precision(preds, gts, c, th)).collect();
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        per_threshold.push(present.iter().sum::<f64>() / present.len() as f64);
        per_class.push(row);
    }
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult {
        thresholds: cfg.thresholds.clone(),
        classes,
        per_class,
        per_threshold,
        average,
    })
}
