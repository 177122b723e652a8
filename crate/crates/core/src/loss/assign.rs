use std::collections::BTreeMap;

use crate::detector::GridSpec;
use crate::error::{Error, Result};
use crate::postprocess::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self {
            bbox: BBox::new(cx, cy, w, h),
            class_id,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let b = &self.bbox;
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate ground-truth box w={} h={}",
                b.w, b.h
            )));
        }
        if !b.is_inside_unit() {
            return Err(Error::InvalidArgument(format!(
                "ground-truth box {b:?} leaves the unit square"
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} >= {num_classes}",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// (cell, anchor) within one level; cell = i·S + j with i the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub cell: usize,
    pub anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotTarget {
    pub gt_index: usize,
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub grid: usize,
    pub anchors: usize,
    /// Slots with 𝟙ᵒᵇʲ = 1; every other slot has 𝟙ⁿᵒᵒᵇʲ = 1.
    pub obj: BTreeMap<Slot, SlotTarget>,
}

impl LevelAssignment {
    pub fn num_slots(&self) -> usize {
        self.grid * self.grid * self.anchors
    }

    pub fn is_obj(&self, slot: Slot) -> bool {
        self.obj.contains_key(&slot)
    }

    pub fn noobj_slots(&self) -> impl Iterator<Item = Slot> + '_ {
        (0..self.grid * self.grid)
            .flat_map(move |cell| (0..self.anchors).map(move |anchor| Slot { cell, anchor }))
            .filter(move |s| !self.obj.contains_key(s))
    }

    /// Per-cell indicator 𝟙ᵢᵒᵇʲ.
    pub fn cell_has_object(&self, cell: usize) -> bool {
        self.obj.keys().any(|s| s.cell == cell)
    }
}

/// Responsibility map for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap {
    pub levels: Vec<LevelAssignment>,
    /// Indices of ground truths that found no free slot.
    pub dropped: Vec<usize>,
}

impl AssignmentMap {
    pub fn num_assigned(&self) -> usize {
        self.levels.iter().map(|l| l.obj.len()).sum()
    }
}

/// IoU of two co-centered (w, h) rectangles.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

pub(crate) fn cell_of(coord: f64, grid: usize) -> usize {
    ((coord * grid as f64).floor().max(0.0) as usize).min(grid - 1)
}

/// Assigns each ground truth to one (level, cell, anchor) slot.
///
/// Anchors across all levels are ranked by shape IoU with the box (ties to
/// the lower level, then lower anchor index). The box goes to the first
/// ranked anchor whose slot in the cell containing its center is free;
/// it is dropped with a warning when every ranked slot is taken.
pub fn assign_targets(gts: &[GroundTruthBox], spec: &GridSpec) -> Result<AssignmentMap> {
    spec.validate()?;
    let mut levels: Vec<LevelAssignment> = spec
        .levels
        .iter()
        .map(|l| LevelAssignment {
            grid: l.grid,
            anchors: l.num_anchors(),
            obj: BTreeMap::new(),
        })
        .collect();
    let mut ranked: Vec<(usize, usize, (f64, f64))> = Vec::new();
    for (l, lv) in spec.levels.iter().enumerate() {
        for (b, &a) in lv.anchors.iter().enumerate() {
            ranked.push((l, b, a));
        }
    }
    let mut dropped = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        gt.validate(spec.num_classes)?;
        let wh = (gt.bbox.w, gt.bbox.h);
        let mut order: Vec<(f64, usize, usize)> = ranked
            .iter()
            .map(|&(l, b, a)| (shape_iou(wh, a), l, b))
            .collect();
        order.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let placed = order.iter().any(|&(_, l, b)| {
            let s = levels[l].grid;
            let slot = Slot {
                cell: cell_of(gt.bbox.cy, s) * s + cell_of(gt.bbox.cx, s),
                anchor: b,
            };
            if levels[l].obj.contains_key(&slot) {
                return false;
            }
            levels[l].obj.insert(
                slot,
                SlotTarget {
                    gt_index: g,
                    bbox: gt.bbox,
                    class_id: gt.class_id,
                },
            );
            true
        });
        if !placed {
            log::warn!("ground truth {g} dropped: every candidate slot is occupied");
            dropped.push(g);
        }
    }
    Ok(AssignmentMap { levels, dropped })
}
