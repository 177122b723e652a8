//! Raw head output → boxes.
//!
//! For cell (i, j) of an S×S grid and anchor (a_w, a_h):
//!
//! ```text
//! cx = (j + σ(tx)) / S        w = a_w · (2σ(tw))²
//! cy = (i + σ(ty)) / S        h = a_h · (2σ(th))²
//! C  = σ(tobj)                p(c) = σ(tc)
//! ```
//!
//! so w ∈ (0, 4·a_w] and √w is always defined for the loss.

use super::config::{GridSpec, LevelSpec};
use crate::error::{Error, Result};
use crate::postprocess::{BBox, Detection};
use crate::tensor::{Tape, Tensor, Var};

/// Flat index into a level tensor for image `n`, anchor `b`, field `f`, cell (i, j).
pub fn raw_index(n: usize, b: usize, f: usize, i: usize, j: usize, s: usize, fields: usize, anchors: usize) -> usize {
    ((n * anchors * fields + b * fields + f) * s + i) * s + j
}

/// Decoded predictions for one level. Slot m = ((n·B + b)·S + i)·S + j.
#[derive(Clone, Debug)]
pub struct DecodedLevel<'t> {
    pub batch: usize,
    pub grid: usize,
    pub anchors: usize,
    pub num_classes: usize,
    pub cx: Var<'t>,
    pub cy: Var<'t>,
    pub w: Var<'t>,
    pub h: Var<'t>,
    pub conf: Var<'t>,
    /// Shape [slots, K].
    pub cls: Var<'t>,
}

impl DecodedLevel<'_> {
    pub fn num_slots(&self) -> usize {
        self.batch * self.anchors * self.grid * self.grid
    }

    pub fn slot(&self, n: usize, b: usize, i: usize, j: usize) -> usize {
        ((n * self.anchors + b) * self.grid + i) * self.grid + j
    }
}

pub fn decode_level<'t>(raw: Var<'t>, level: &LevelSpec, num_classes: usize) -> Result<DecodedLevel<'t>> {
    let s = level.grid;
    let nb = level.num_anchors();
    let fields = 5 + num_classes;
    let shape = raw.shape();
    let n = match shape[..] {
        [n, c, h, w] if c == nb * fields && h == s && w == s => n,
        _ => {
            return Err(Error::shape(
                "decode",
                format!("expected N×{}×{s}×{s}, got {shape:?}", nb * fields),
            ))
        }
    };
    let slots = n * nb * s * s;
    let field_idx = |f: usize| -> Vec<usize> {
        let mut v = Vec::with_capacity(slots);
        for img in 0..n {
            for b in 0..nb {
                for i in 0..s {
                    for j in 0..s {
                        v.push(raw_index(img, b, f, i, j, s, fields, nb));
                    }
                }
            }
        }
        v
    };
    let per_slot = |f: &dyn Fn(usize, usize, usize) -> f64| -> Result<Tensor> {
        let mut v = Vec::with_capacity(slots);
        for _ in 0..n {
            for b in 0..nb {
                for i in 0..s {
                    for j in 0..s {
                        v.push(f(b, i, j));
                    }
                }
            }
        }
        Tensor::new(&[slots], v, false)
    };

    let sig = raw.sigmoid()?;
    let inv_s = 1.0 / s as f64;
    let cx = sig
        .gather(field_idx(0), &[slots])?
        .add_const(per_slot(&|_, _, j| j as f64)?)?
        .mul_scalar(inv_s)?;
    let cy = sig
        .gather(field_idx(1), &[slots])?
        .add_const(per_slot(&|_, i, _| i as f64)?)?
        .mul_scalar(inv_s)?;
    let w = sig
        .gather(field_idx(2), &[slots])?
        .square()?
        .mul_const(per_slot(&|b, _, _| 4.0 * level.anchors[b].0)?)?;
    let h = sig
        .gather(field_idx(3), &[slots])?
        .square()?
        .mul_const(per_slot(&|b, _, _| 4.0 * level.anchors[b].1)?)?;
    let conf = sig.gather(field_idx(4), &[slots])?;
    let cls = {
        let per_field: Vec<Vec<usize>> = (0..num_classes).map(|c| field_idx(5 + c)).collect();
        let mut idx = Vec::with_capacity(slots * num_classes);
        for m in 0..slots {
            idx.extend(per_field.iter().map(|f| f[m]));
        }
        sig.gather(idx, &[slots, num_classes])?
    };
    Ok(DecodedLevel {
        batch: n,
        grid: s,
        anchors: nb,
        num_classes,
        cx,
        cy,
        w,
        h,
        conf,
        cls,
    })
}

/// One candidate per (level, cell, anchor) for every image, no thresholding.
///
/// Class is the argmax of p(c) (lowest id on ties); score = C · max p(c);
/// boxes are clamped to the unit square and dropped if nothing remains.
pub fn decode(raw: &[Tensor], spec: &GridSpec) -> Result<Vec<Vec<Detection>>> {
    if raw.len() != spec.levels.len() {
        return Err(Error::shape(
            "decode",
            format!("{} level tensors for {} levels", raw.len(), spec.levels.len()),
        ));
    }
    let tape = Tape::new();
    let batch = raw.first().map_or(0, |t| t.shape().first().copied().unwrap_or(0));
    let mut out = vec![Vec::new(); batch];
    for (t, level) in raw.iter().zip(&spec.levels) {
        let d = decode_level(tape.constant(t.clone()), level, spec.num_classes)?;
        if d.batch != batch {
            return Err(Error::shape("decode", "levels disagree on batch size"));
        }
        let (cx, cy, w, h) = (d.cx.value(), d.cy.value(), d.w.value(), d.h.value());
        let (conf, cls) = (d.conf.value(), d.cls.value());
        let k = spec.num_classes;
        let per_image = d.num_slots() / batch.max(1);
        for m in 0..d.num_slots() {
            let probs = &cls.data()[m * k..(m + 1) * k];
            let (class_id, p) = probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, p)| if p > best.1 { (c, p) } else { best });
            let bbox = BBox::new(cx.data()[m], cy.data()[m], w.data()[m], h.data()[m]);
            if let Some(bbox) = bbox.clamp_unit() {
                out[m / per_image].push(Detection {
                    bbox,
                    class_id,
                    score: (conf.data()[m] * p).clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(out)
}
