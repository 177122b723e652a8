//! Independent reference implementations for the integration tests.
//!
//! Everything here works on plain `f64` slices and loops, never on the tape,
//! so agreement with the library is a real cross-check.
#![allow(dead_code)]

pub mod suites;

use std::collections::BTreeMap;

use pdd_core::loss::GroundTruthBox;
use pdd_core::postprocess::{BBox, Detection};
use pdd_core::res2net::Res2NetBlock;
use pdd_core::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect(), false).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// N×C×H×W array.
#[derive(Clone, Debug, PartialEq)]
pub struct Nd {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self { shape: [s[0], s[1], s[2], s[3]], data: t.data().to_vec() }
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + i) * w + j]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, i: usize, j: usize) -> &mut f64 {
        let [_, cc, h, w] = self.shape;
        &mut self.data[((n * cc + c) * h + i) * w + j]
    }

    pub fn channels(&self, start: usize, len: usize) -> Nd {
        let [n, _, h, w] = self.shape;
        let mut out = Nd::zeros([n, len, h, w]);
        for b in 0..n {
            for c in 0..len {
                for i in 0..h {
                    for j in 0..w {
                        *out.at_mut(b, c, i, j) = self.at(b, start + c, i, j);
                    }
                }
            }
        }
        out
    }

    pub fn concat(parts: &[Nd]) -> Nd {
        let [n, _, h, w] = parts[0].shape;
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Nd::zeros([n, c, h, w]);
        let mut off = 0;
        for p in parts {
            for b in 0..n {
                for k in 0..p.shape[1] {
                    for i in 0..h {
                        for j in 0..w {
                            *out.at_mut(b, off + k, i, j) = p.at(b, k, i, j);
                        }
                    }
                }
            }
            off += p.shape[1];
        }
        out
    }

    pub fn plus(&self, o: &Nd) -> Nd {
        assert_eq!(self.shape, o.shape);
        Nd { shape: self.shape, data: self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Nd {
        Nd { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Direct convolution with zero padding: six nested loops over output
/// position, output channel, input channel and kernel offsets.
pub fn naive_conv(x: &Nd, k: &Nd, stride: usize, pad: usize) -> Nd {
    let [n, c, h, w] = x.shape;
    let [o, kc, kh, kw] = k.shape;
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Nd::zeros([n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let xx = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.at(b, ic, y as usize, xx as usize) * k.at(oc, ic, di, dj);
                            }
                        }
                    }
                    *out.at_mut(b, oc, i, j) = acc;
                }
            }
        }
    }
    out
}

/// Train-mode batchnorm: per-channel mean and biased variance over N, H, W.
pub fn naive_bn_train(x: &Nd, gamma: &[f64], beta: &[f64], eps: f64) -> Nd {
    let [n, c, h, w] = x.shape;
    let count = (n * h * w) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let mut vals = Vec::new();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    vals.push(x.at(b, ch, i, j));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    *out.at_mut(b, ch, i, j) = gamma[ch] * (x.at(b, ch, i, j) - mean) * inv + beta[ch];
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn conv_bn_act(store: &ParamStore, prefix: &str, x: &Nd, k: usize, act: bool) -> Nd {
    let w = Nd::from_tensor(store.get(&format!("{prefix}.conv.weight")).unwrap());
    let y = naive_conv(x, &w, 1, k / 2);
    let g = store.get(&format!("{prefix}.bn.gamma")).unwrap().data().to_vec();
    let b = store.get(&format!("{prefix}.bn.beta")).unwrap().data().to_vec();
    let y = naive_bn_train(&y, &g, &b, 1e-5);
    if act {
        y.map(silu)
    } else {
        y
    }
}

/// Res2Net block written out step by step (train-mode batchnorm).
pub fn res2net_oracle(block: &Res2NetBlock, store: &ParamStore, x: &Nd) -> (Vec<Nd>, Nd) {
    let p = &block.prefix;
    let u = conv_bn_act(store, &format!("{p}.reduce"), x, 1, true);
    let w = u.shape[1] / block.scale;
    let mut ys = vec![u.channels(0, w)];
    for i in 1..block.scale {
        let xi = u.channels(i * w, w);
        let inp = xi.plus(ys.last().unwrap());
        ys.push(conv_bn_act(store, &format!("{p}.group.{i}"), &inp, 3, true));
    }
    let merged = Nd::concat(&ys);
    let body = conv_bn_act(store, &format!("{p}.expand"), &merged, 1, true);
    let shortcut = if block.in_channels == block.out_channels {
        x.clone()
    } else {
        conv_bn_act(store, &format!("{p}.shortcut"), x, 1, false)
    };
    (ys, shortcut.plus(&body))
}

/// Decoded prediction for one slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotPred {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

/// Per-cell scalar decode of one level for image `n`:
/// returns (slot prediction, class probabilities) keyed by (anchor, i, j).
pub fn decode_oracle(
    raw: &Nd,
    n: usize,
    anchors: &[(f64, f64)],
    k: usize,
) -> BTreeMap<(usize, usize, usize), (SlotPred, Vec<f64>)> {
    let s = raw.shape[2];
    let f = 5 + k;
    let mut out = BTreeMap::new();
    for (b, &(aw, ah)) in anchors.iter().enumerate() {
        for i in 0..s {
            for j in 0..s {
                let t = |c: usize| raw.at(n, b * f + c, i, j);
                let pred = SlotPred {
                    cx: (j as f64 + sigmoid(t(0))) / s as f64,
                    cy: (i as f64 + sigmoid(t(1))) / s as f64,
                    w: aw * (2.0 * sigmoid(t(2))).powi(2),
                    h: ah * (2.0 * sigmoid(t(3))).powi(2),
                    conf: sigmoid(t(4)),
                };
                let probs = (0..k).map(|c| sigmoid(t(5 + c))).collect();
                out.insert((b, i, j), (pred, probs));
            }
        }
    }
    out
}

/// IoU from corner coordinates.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ax2) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0);
    let (ay1, ay2) = (a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx1, bx2) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let (by1, by2) = (b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Slot → ground-truth index for each level, plus dropped gts.
pub type OracleAssignment = (Vec<BTreeMap<(usize, usize, usize), usize>>, Vec<usize>);

/// Responsibility re-derived by linear scans: for each gt in order, among all
/// free (level, anchor) slots in the cell containing its center, take the
/// highest shape IoU; ties go to the lower level, then the lower anchor.
pub fn assign_oracle(gts: &[GroundTruthBox], levels: &[(usize, Vec<(f64, f64)>)]) -> OracleAssignment {
    let mut taken: Vec<BTreeMap<(usize, usize, usize), usize>> = vec![BTreeMap::new(); levels.len()];
    let mut dropped = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(f64, usize, (usize, usize, usize))> = None;
        for (l, (s, anchors)) in levels.iter().enumerate() {
            let i = ((gt.bbox.cy * *s as f64).floor() as usize).min(s - 1);
            let j = ((gt.bbox.cx * *s as f64).floor() as usize).min(s - 1);
            for (b, &a) in anchors.iter().enumerate() {
                if taken[l].contains_key(&(b, i, j)) {
                    continue;
                }
                let inter = gt.bbox.w.min(a.0) * gt.bbox.h.min(a.1);
                let q = inter / (gt.bbox.w * gt.bbox.h + a.0 * a.1 - inter);
                if best.is_none_or(|(bq, _, _)| q > bq) {
                    best = Some((q, l, (b, i, j)));
                }
            }
        }
        match best {
            Some((_, l, key)) => {
                taken[l].insert(key, g);
            }
            None => dropped.push(g),
        }
    }
    (taken, dropped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleTerms {
    pub xy: f64,
    pub wh: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub total: f64,
}

/// The composite sum-squared loss for one level and one image, as a flat
/// sum over cells and anchors.
#[allow(clippy::too_many_arguments)]
pub fn loss_oracle(
    raw: &Nd,
    n: usize,
    anchors: &[(f64, f64)],
    k: usize,
    gts: &[GroundTruthBox],
    resp: &BTreeMap<(usize, usize, usize), usize>,
    lambda_coord: f64,
    lambda_noobj: f64,
    iou_target: bool,
    per_cell: bool,
) -> OracleTerms {
    let s = raw.shape[2];
    let dec = decode_oracle(raw, n, anchors, k);
    let (mut xy, mut wh, mut obj, mut noobj, mut cls) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..s {
        for j in 0..s {
            let mut cell_done = false;
            for b in 0..anchors.len() {
                let (p, probs) = &dec[&(b, i, j)];
                match resp.get(&(b, i, j)) {
                    Some(&g) => {
                        let t = gts[g].bbox;
                        xy += (p.cx - t.cx).powi(2) + (p.cy - t.cy).powi(2);
                        wh += (p.w.sqrt() - t.w.sqrt()).powi(2) + (p.h.sqrt() - t.h.sqrt()).powi(2);
                        let c_hat = if iou_target {
                            box_iou(&BBox::new(p.cx, p.cy, p.w, p.h), &t)
                        } else {
                            1.0
                        };
                        obj += (p.conf - c_hat).powi(2);
                        if !per_cell || !cell_done {
                            for (c, pc) in probs.iter().enumerate() {
                                let target = if c == gts[g].class_id { 1.0 } else { 0.0 };
                                cls += (pc - target).powi(2);
                            }
                            cell_done = true;
                        }
                    }
                    None => noobj += p.conf * p.conf,
                }
            }
        }
    }
    OracleTerms {
        xy,
        wh,
        obj,
        noobj,
        cls,
        total: lambda_coord * (xy + wh) + obj + lambda_noobj * noobj + cls,
    }
}

/// Quadratic NMS: repeatedly scan for the best remaining candidate, keep it,
/// then scan again to strike same-class overlaps.
pub fn nms_oracle(c: &[Detection], conf: f64, iou_t: f64, max: usize) -> Vec<Detection> {
    let mut alive: Vec<bool> = c.iter().map(|d| d.score > conf).collect();
    let mut out = Vec::new();
    while out.len() < max {
        let mut best: Option<usize> = None;
        for i in 0..c.len() {
            if alive[i] && best.is_none_or(|b| c[i].score > c[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(c[b]);
        for i in 0..c.len() {
            if alive[i] && c[i].class_id == c[b].class_id && box_iou(&c[i].bbox, &c[b].bbox) > iou_t {
                alive[i] = false;
            }
        }
    }
    out
}

/// Greedy matching recomputed from a precomputed IoU table: each detection
/// in order walks its same-class gts sorted by (IoU desc, index asc) and
/// takes the first free one that clears the threshold.
pub fn match_oracle(dets: &[Detection], gts: &[GroundTruthBox], t: f64) -> Vec<Option<usize>> {
    let mut free = vec![true; gts.len()];
    dets.iter()
        .map(|d| {
            let mut cand: Vec<(f64, usize)> = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == d.class_id)
                .map(|(gi, g)| (box_iou(&d.bbox, &g.bbox), gi))
                .filter(|(o, _)| *o >= t)
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let hit = cand.into_iter().map(|(_, g)| g).find(|&g| free[g]);
            if let Some(g) = hit {
                free[g] = false;
            }
            hit
        })
        .collect()
}

/// Greedy matching as the lexicographically best injective partial map:
/// assignments of detections to distinct same-class gts (or none) are
/// searched exhaustively, and the winner maximizes the IoU sequence in
/// detection order (an unmatched detection counts as −1, so a match always
/// beats none), preferring lower gt indices on equal IoU. Branches whose
/// prefix already compares below the best complete map are cut.
pub fn match_enumerate(dets: &[Detection], gts: &[GroundTruthBox], t: f64) -> Vec<Option<usize>> {
    type Key = (f64, isize);
    fn cmp(a: &Key, b: &Key) -> std::cmp::Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    }
    struct Search<'a> {
        dets: &'a [Detection],
        gts: &'a [GroundTruthBox],
        t: f64,
        used: Vec<bool>,
        cur: Vec<(Key, Option<usize>)>,
        best: Option<Vec<(Key, Option<usize>)>>,
    }
    impl Search<'_> {
        fn below_best(&self) -> bool {
            let Some(best) = &self.best else { return false };
            for (a, b) in self.cur.iter().zip(best) {
                match cmp(&a.0, &b.0) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o == std::cmp::Ordering::Less,
                }
            }
            false
        }
        fn rec(&mut self, k: usize) {
            if self.below_best() {
                return;
            }
            if k == self.dets.len() {
                self.best = Some(self.cur.clone());
                return;
            }
            let d = self.dets[k];
            let mut options: Vec<(Key, Option<usize>)> = (0..self.gts.len())
                .filter(|&g| !self.used[g] && self.gts[g].class_id == d.class_id)
                .map(|g| ((box_iou(&d.bbox, &self.gts[g].bbox), -(g as isize)), Some(g)))
                .filter(|(key, _)| key.0 >= self.t)
                .collect();
            options.push(((-1.0, 0), None));
            options.sort_by(|a, b| cmp(&b.0, &a.0));
            for (key, g) in options {
                if let Some(g) = g {
                    self.used[g] = true;
                }
                self.cur.push((key, g));
                self.rec(k + 1);
                self.cur.pop();
                if let Some(g) = g {
                    self.used[g] = false;
                }
            }
        }
    }
    let mut s = Search {
        dets,
        gts,
        t,
        used: vec![false; gts.len()],
        cur: Vec::new(),
        best: None,
    };
    s.rec(0);
    s.best.unwrap_or_default().into_iter().map(|(_, g)| g).collect()
}

/// Area under the interpolated PR curve by dense midpoint sampling of recall.
///
/// Precision at each threshold is recounted from scratch, the interpolated
/// precision at recall r is the best precision among thresholds reaching r,
/// and the integral is sampled on a grid that refines every 1/total_gt step.
pub fn ap_dense(scored: &[(f64, bool)], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pr: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / kept.len() as f64, tp / total_gt as f64)
        })
        .collect();
    let m = 64 * total_gt;
    let mut area = 0.0;
    for q in 0..m {
        let r = (q as f64 + 0.5) / m as f64;
        let p = pr.iter().filter(|(_, rec)| *rec >= r).map(|(p, _)| *p).fold(0.0, f64::max);
        area += p;
    }
    area / m as f64
}

/// Random detection with a box inside the unit square.
pub fn random_det(rng: &mut ChaCha8Rng, classes: usize) -> Detection {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    Detection {
        bbox: BBox::new(
            rng.random_range(w / 2.0..1.0 - w / 2.0),
            rng.random_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        ),
        class_id: rng.random_range(0..classes),
        score: (rng.random_range(1..20u32) as f64) / 20.0,
    }
}

pub fn random_gt(rng: &mut ChaCha8Rng, classes: usize) -> GroundTruthBox {
    let d = random_det(rng, classes);
    GroundTruthBox { bbox: d.bbox, class_id: d.class_id }
}

/// A detection jittered around a gt, so matches actually happen.
pub fn near(rng: &mut ChaCha8Rng, g: &GroundTruthBox, classes: usize) -> Detection {
    let j = |r: &mut ChaCha8Rng, v: f64| v * (1.0 + r.random_range(-0.3..0.3));
    let class_id = if rng.random_bool(0.8) { g.class_id } else { rng.random_range(0..classes) };
    let w = j(rng, g.bbox.w);
    let h = j(rng, g.bbox.h);
    Detection {
        bbox: BBox::new(
            g.bbox.cx + rng.random_range(-0.05..0.05),
            g.bbox.cy + rng.random_range(-0.05..0.05),
            w,
            h,
        ),
        class_id,
        score: (rng.random_range(1..20u32) as f64) / 20.0,
    }
}
