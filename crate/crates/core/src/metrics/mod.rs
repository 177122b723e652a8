//! Detection matching, precision/recall/F1, PR curves, average precision,
//! the evaluation report and the throughput benchmark.

mod bench;
mod report;

pub use bench::{fps_bench, BenchReport, StageTimes, REALTIME_FPS};
pub use report::{curve_csv, curve_svg, parse_table_row, EvalReport, TableRow, CURVE_HEADER, TABLE_COLUMNS};

use crate::error::{Error, Result};
use crate::loss::GroundTruthBox;
use crate::postprocess::{iou, rank_order, Detection};

/// True negatives are not defined for detection and stay 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    /// TP flag per detection, in input order.
    pub is_tp: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
}

/// Greedy matching in input order (callers pass detections sorted by
/// descending score). Each detection takes the unmatched same-class ground
/// truth with the highest IoU ≥ `iou_thresh`, lowest index on ties.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &gt.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        is_tp.push(best.is_some());
        matched_gt.push(best.map(|(g, _)| g));
    }
    let tp = is_tp.iter().filter(|&&t| t).count();
    MatchResult {
        counts: ConfusionCounts {
            tp,
            fp: dets.len() - tp,
            fn_: gts.len() - tp,
            tn: 0,
        },
        is_tp,
        matched_gt,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// (precision, recall, F1); each is 0 when its denominator is 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    (p, r, f1_score(p, r))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    /// Detections scoring at least this much are kept.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        f1_score(self.precision, self.recall)
    }
}

/// Points ordered from the highest threshold to the lowest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// One point per distinct score, sweeping thresholds from high to low.
pub fn pr_curve(scored: &[(f64, bool)], total_gt: usize) -> PrCurve {
    if total_gt == 0 {
        log::warn!("precision-recall curve requested with no ground truth");
        return PrCurve::default();
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        let (score, hit) = scored[i];
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = order.get(k + 1).is_none_or(|&n| scored[n].0 != score);
        if last_of_score {
            points.push(PrPoint {
                threshold: score,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, total_gt),
            });
        }
    }
    PrCurve { points }
}

/// All-points interpolated area: precision replaced by its running maximum
/// from the high-recall end, summed over recall increments from 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let pts = &curve.points;
    let mut envelope: Vec<f64> = pts.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (p, e) in pts.iter().zip(&envelope) {
        ap += (p.recall - prev_r) * e;
        prev_r = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    /// Operating point for the reported precision/recall/F1 (strict `>`).
    pub conf_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            class_names: crate::data::PCB_CLASSES.iter().map(|s| s.to_string()).collect(),
            conf_threshold: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub num_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Curve at IoU 0.5.
    pub curve: PrCurve,
}

/// Scored TP flags for one class across images at one IoU threshold.
fn class_flags(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], class: usize, t: f64) -> (Vec<(f64, bool)>, usize) {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let dc: Vec<Detection> = d.iter().filter(|x| x.class_id == class).copied().collect();
        let gc: Vec<GroundTruthBox> = g.iter().filter(|x| x.class_id == class).copied().collect();
        n_gt += gc.len();
        let sorted: Vec<Detection> = rank_order(&dc).into_iter().map(|i| dc[i]).collect();
        let m = match_detections(&sorted, &gc, t);
        scored.extend(sorted.iter().zip(&m.is_tp).map(|(x, &tp)| (x.score, tp)));
    }
    (scored, n_gt)
}

/// Per-class and macro-averaged metrics. Classes without ground truth are
/// left out of the averages.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], cfg: &EvalConfig) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let k = cfg.class_names.len();
    let bad = dets.iter().flatten().map(|d| d.class_id).chain(gts.iter().flatten().map(|g| g.class_id)).find(|&c| c >= k);
    if let Some(c) = bad {
        return Err(Error::UnknownClass(format!("class id {c} (have {k} classes)")));
    }
    let thresholds = coco_iou_thresholds();
    let mut classes = Vec::with_capacity(k);
    let mut total = ConfusionCounts::default();
    let mut pooled = Vec::new();
    let mut pooled_gt = 0;
    for c in 0..k {
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let (s, n) = class_flags(dets, gts, c, t);
                if n == 0 {
                    0.0
                } else {
                    average_precision(&pr_curve(&s, n))
                }
            })
            .collect();
        let (scored, num_gt) = class_flags(dets, gts, c, 0.5);
        let curve = if num_gt > 0 { pr_curve(&scored, num_gt) } else { PrCurve::default() };
        let tp = scored.iter().filter(|(s, t)| *t && *s > cfg.conf_threshold).count();
        let kept = scored.iter().filter(|(s, _)| *s > cfg.conf_threshold).count();
        let counts = ConfusionCounts { tp, fp: kept - tp, fn_: num_gt - tp, tn: 0 };
        total.add(&counts);
        let (precision, recall, f1) = precision_recall_f1(&counts);
        pooled.extend_from_slice(&scored);
        pooled_gt += num_gt;
        classes.push(ClassMetrics {
            name: cfg.class_names[c].clone(),
            num_gt,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
            precision,
            recall,
            f1,
            curve,
        });
    }
    let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.num_gt > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    if present.is_empty() {
        log::warn!("evaluation set holds no ground truth; AP reported as 0");
    }
    let (precision, recall, f1) = precision_recall_f1(&total);
    Ok(EvalReport {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        precision,
        recall,
        f1,
        fps: None,
        counts: total,
        conf_threshold: cfg.conf_threshold,
        num_images: gts.len(),
        curve: if pooled_gt > 0 { pr_curve(&pooled, pooled_gt) } else { PrCurve::default() },
        classes,
    })
}
