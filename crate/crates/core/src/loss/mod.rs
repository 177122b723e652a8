//! Target assignment and the five-term sum-squared detection loss.
//!
//! ```text
//! L = λ_coord Σ 𝟙ᵒᵇʲ [(x−x̂)² + (y−ŷ)²]
//!   + λ_coord Σ 𝟙ᵒᵇʲ [(√w−√ŵ)² + (√h−√ĥ)²]
//!   +         Σ 𝟙ᵒᵇʲ (C−Ĉ)²
//!   + λ_noobj Σ 𝟙ⁿᵒᵒᵇʲ (C−Ĉ)²
//!   +         Σᵢ 𝟙ᵢᵒᵇʲ Σ_c (pᵢ(c)−p̂ᵢ(c))²
//! ```
//!
//! Coordinates are normalized image units. The total is summed over pyramid
//! levels and images.

mod assign;

pub use assign::{
    assign_targets, shape_iou, AssignmentMap, GroundTruthBox, LevelAssignment, Slot, SlotTarget,
};

use std::collections::BTreeMap;

use crate::detector::DecodedLevel;
use crate::error::{Error, Result};
use crate::postprocess::{iou, BBox};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetConfidence {
    /// Ĉ = 1 on responsible slots.
    #[default]
    One,
    /// Ĉ = IoU(predicted box, ground truth), treated as a constant.
    Iou,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassTerm {
    /// One class residual per responsible slot.
    #[default]
    PerSlot,
    /// One class residual per cell holding an object, read from its
    /// lowest-index responsible anchor.
    PerCell,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub target_confidence: TargetConfidence,
    pub class_term: ClassTerm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            target_confidence: TargetConfidence::One,
            class_term: ClassTerm::PerSlot,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_coord", self.lambda_coord), ("lambda_noobj", self.lambda_noobj)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term sums and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub coord_xy: f64,
    pub coord_wh: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_coord * (self.coord_xy + self.coord_wh)
            + self.obj
            + cfg.lambda_noobj * self.noobj
            + self.cls
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.coord_xy += other.coord_xy;
        self.coord_wh += other.coord_wh;
        self.obj += other.obj;
        self.noobj += other.noobj;
        self.cls += other.cls;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            coord_xy: self.coord_xy * s,
            coord_wh: self.coord_wh * s,
            obj: self.obj * s,
            noobj: self.noobj * s,
            cls: self.cls * s,
            total: self.total * s,
        }
    }
}

/// Flat slot indices and targets for one level of a batch.
#[derive(Default)]
struct LevelTargets {
    obj: Vec<usize>,
    targets: Vec<SlotTarget>,
    noobj: Vec<usize>,
    cls_slots: Vec<usize>,
    cls_targets: Vec<usize>,
}

fn collect_targets(d: &DecodedLevel<'_>, level: usize, assignments: &[AssignmentMap], class_term: ClassTerm) -> Result<LevelTargets> {
    let s = d.grid;
    let mut t = LevelTargets::default();
    for (n, map) in assignments.iter().enumerate() {
        let la = map.levels.get(level).ok_or_else(|| {
            Error::shape("yolo_loss", format!("assignment has no level {level}"))
        })?;
        if la.grid != s || la.anchors != d.anchors {
            return Err(Error::shape(
                "yolo_loss",
                format!(
                    "level {level}: assignment is {}×{}×{}, predictions {}×{}×{}",
                    la.grid, la.grid, la.anchors, s, s, d.anchors
                ),
            ));
        }
        let mut first_in_cell: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for b in 0..d.anchors {
            for cell in 0..s * s {
                let m = d.slot(n, b, cell / s, cell % s);
                match la.obj.get(&Slot { cell, anchor: b }) {
                    Some(target) => {
                        t.obj.push(m);
                        t.targets.push(*target);
                        match class_term {
                            ClassTerm::PerSlot => {
                                t.cls_slots.push(m);
                                t.cls_targets.push(target.class_id);
                            }
                            ClassTerm::PerCell => {
                                first_in_cell.entry(cell).or_insert((m, target.class_id));
                            }
                        }
                    }
                    None => t.noobj.push(m),
                }
            }
        }
        for (m, c) in first_in_cell.into_values() {
            t.cls_slots.push(m);
            t.cls_targets.push(c);
        }
    }
    Ok(t)
}

/// Σ (x[idx] − target)², or `None` when nothing is selected.
fn sq_residual<'t>(x: Var<'t>, idx: &[usize], target: &[f64]) -> Result<Option<Var<'t>>> {
    if idx.is_empty() {
        return Ok(None);
    }
    x.gather(idx.to_vec(), &[idx.len()])?
        .sub_const(target)?
        .square()?
        .sum()
        .map(Some)
}

fn sum_opt<'t>(terms: impl IntoIterator<Item = Option<Var<'t>>>) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms.into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => a.add(t)?,
            None => t,
        });
    }
    Ok(acc)
}

/// Composite loss over every level of a batch; `assignments[n]` belongs to image n.
pub fn yolo_loss<'t>(
    decoded: &[DecodedLevel<'t>],
    assignments: &[AssignmentMap],
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    cfg.validate()?;
    let first = decoded
        .first()
        .ok_or_else(|| Error::InvalidArgument("yolo_loss needs at least one level".into()))?;
    let tape = first.cx.tape();
    if decoded.iter().any(|d| d.batch != assignments.len()) {
        return Err(Error::shape(
            "yolo_loss",
            format!("{} assignment maps for a batch of {}", assignments.len(), first.batch),
        ));
    }
    let (mut xy, mut wh, mut obj, mut noobj, mut cls) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (l, d) in decoded.iter().enumerate() {
        let (wv, hv) = (d.w.value(), d.h.value());
        if let Some(bad) = wv.data().iter().chain(hv.data()).find(|v| **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decoded width/height {bad} is negative at level {l}"
            )));
        }
        let t = collect_targets(d, l, assignments, cfg.class_term)?;
        let tgt = |f: fn(&BBox) -> f64| t.targets.iter().map(|s| f(&s.bbox)).collect::<Vec<_>>();
        xy.push(sq_residual(d.cx, &t.obj, &tgt(|b| b.cx))?);
        xy.push(sq_residual(d.cy, &t.obj, &tgt(|b| b.cy))?);
        if !t.obj.is_empty() {
            let sqrt_of = |v: Var<'t>, target: Vec<f64>| -> Result<Var<'t>> {
                v.gather(t.obj.clone(), &[t.obj.len()])?
                    .sqrt()?
                    .sub_const(&target.iter().map(|x| x.sqrt()).collect::<Vec<_>>())?
                    .square()?
                    .sum()
            };
            wh.push(Some(sqrt_of(d.w, tgt(|b| b.w))?));
            wh.push(Some(sqrt_of(d.h, tgt(|b| b.h))?));
        }
        let conf_target: Vec<f64> = match cfg.target_confidence {
            TargetConfidence::One => vec![1.0; t.obj.len()],
            TargetConfidence::Iou => {
                let (cx, cy) = (d.cx.value(), d.cy.value());
                t.obj
                    .iter()
                    .zip(&t.targets)
                    .map(|(&m, s)| {
                        let p = BBox::new(cx.data()[m], cy.data()[m], wv.data()[m], hv.data()[m]);
                        iou(&p, &s.bbox)
                    })
                    .collect()
            }
        };
        obj.push(sq_residual(d.conf, &t.obj, &conf_target)?);
        noobj.push(sq_residual(d.conf, &t.noobj, &vec![0.0; t.noobj.len()])?);
        let k = d.num_classes;
        let mut idx = Vec::with_capacity(t.cls_slots.len() * k);
        let mut onehot = Vec::with_capacity(t.cls_slots.len() * k);
        for (&m, &c) in t.cls_slots.iter().zip(&t.cls_targets) {
            for j in 0..k {
                idx.push(m * k + j);
                onehot.push(if j == c { 1.0 } else { 0.0 });
            }
        }
        cls.push(sq_residual(d.cls, &idx, &onehot)?);
    }
    let parts = [sum_opt(xy)?, sum_opt(wh)?, sum_opt(obj)?, sum_opt(noobj)?, sum_opt(cls)?];
    let val = |v: &Option<Var<'t>>| v.map_or(Ok(0.0), |v| v.item());
    let mut breakdown = LossBreakdown {
        coord_xy: val(&parts[0])?,
        coord_wh: val(&parts[1])?,
        obj: val(&parts[2])?,
        noobj: val(&parts[3])?,
        cls: val(&parts[4])?,
        total: 0.0,
    };
    let weighted = [
        parts[0].map(|v| v.mul_scalar(cfg.lambda_coord)).transpose()?,
        parts[1].map(|v| v.mul_scalar(cfg.lambda_coord)).transpose()?,
        parts[2],
        parts[3].map(|v| v.mul_scalar(cfg.lambda_noobj)).transpose()?,
        parts[4],
    ];
    let total = match sum_opt(weighted)? {
        Some(v) => v,
        None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    };
    breakdown.total = total.item()?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{breakdown:?}")));
    }
    Ok((total, breakdown))
}
