//! Box geometry, IoU, confidence filtering and per-class NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Axis-aligned box in center form, normalized image units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with the unit square, or `None` if nothing with positive area remains.
    pub fn clamp_unit(&self) -> Option<BBox> {
        let (x1, y1, x2, y2) = self.corners();
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (x2, y2) = (x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        (x2 > x1 && y2 > y1).then(|| BBox::from_corners(x1, y1, x2, y2))
    }

    pub fn is_inside_unit(&self) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        const SLACK: f64 = 1e-9;
        x1 >= -SLACK && y1 >= -SLACK && x2 <= 1.0 + SLACK && y2 <= 1.0 + SLACK
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Objectness × class probability.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmsConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            iou_threshold: 0.45,
            max_detections: 300,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!(
                "conf_threshold {} outside [0, 1]",
                self.conf_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside [0, 1]",
                self.iou_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be >= 1".into()));
        }
        Ok(())
    }
}

/// Descending score, ties by ascending input index.
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Keeps candidates scoring strictly above `conf_threshold`, then greedily
/// suppresses same-class boxes overlapping a kept one by more than `iou_threshold`.
pub fn nms(candidates: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank_order(candidates) {
        let d = candidates[i];
        if d.score <= cfg.conf_threshold {
            continue;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > cfg.iou_threshold);
        if !suppressed {
            kept.push(d);
            if kept.len() == cfg.max_detections {
                break;
            }
        }
    }
    kept
}

pub const DUMP_HEADER: &str = "image_id,class,score,cx,cy,w,h";

#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub image_id: String,
    pub class_name: String,
    pub detection: Detection,
}

/// Comma-separated detection dump with a header line.
pub fn write_dump<'a>(
    records: impl IntoIterator<Item = (&'a str, &'a Detection)>,
    class_names: &[&str],
) -> String {
    let mut out = String::from(DUMP_HEADER);
    out.push('\n');
    for (image_id, d) in records {
        let name = class_names.get(d.class_id).copied().unwrap_or("unknown");
        let b = d.bbox;
        let _ = writeln!(
            out,
            "{image_id},{name},{},{},{},{},{}",
            d.score, b.cx, b.cy, b.w, b.h
        );
    }
    out
}

pub fn parse_dump(text: &str, class_names: &[&str]) -> Result<Vec<DumpRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DUMP_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "detection dump must start with `{DUMP_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "dump line {}: expected 7 fields, got {}",
                no + 2,
                f.len()
            )));
        }
        let num = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("dump line {}: bad number `{s}`", no + 2))
            })
        };
        let class_id = class_names
            .iter()
            .position(|n| *n == f[1])
            .ok_or_else(|| Error::UnknownClass(f[1].to_string()))?;
        out.push(DumpRecord {
            image_id: f[0].to_string(),
            class_name: f[1].to_string(),
            detection: Detection {
                bbox: BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?),
                class_id,
                score: num(f[2])?,
            },
        });
    }
    Ok(out)
}
