//! Label-preserving augmentations. Geometric ops move pixels and boxes
//! together; photometric ops touch pixels only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{snap_box, DatasetRecord, Pixels, Source};
use crate::error::{Error, Result};
use crate::loss::GroundTruthBox;
use crate::postprocess::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Quarter turn counterclockwise.
    Rotate90,
    /// Zoom about the center by a factor drawn from [min, max].
    ScaleJitter { min: f64, max: f64 },
    /// Additive offset drawn from [min, max].
    Brightness { min: f64, max: f64 },
    GaussianNoise { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match *op {
                AugmentOp::ScaleJitter { min, max } if !(min > 0.0 && min <= max && max.is_finite()) => {
                    return Err(Error::Config(format!("scale_jitter range [{min}, {max}]")))
                }
                AugmentOp::Brightness { min, max } if !(-1.0 <= min && min <= max && max <= 1.0) => {
                    return Err(Error::Config(format!("brightness range [{min}, {max}]")))
                }
                AugmentOp::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                    return Err(Error::Config(format!("gaussian_noise sigma {sigma}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn remap(p: &Pixels, height: usize, width: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Pixels {
    let mut out = Pixels::filled(height, width, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = f(y, x);
            out.set(y, x, p.get(sy, sx));
        }
    }
    out
}

fn map_boxes(boxes: &[GroundTruthBox], f: impl Fn(&BBox) -> BBox) -> Vec<GroundTruthBox> {
    boxes
        .iter()
        .map(|b| GroundTruthBox {
            bbox: f(&b.bbox),
            class_id: b.class_id,
        })
        .collect()
}

fn sample_bilinear(p: &Pixels, fy: f64, fx: f64) -> [f64; 3] {
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (y0, x0) = (fy.floor(), fx.floor());
    let (ty, tx) = (fy - y0, fx - x0);
    let (ya, yb) = (clampi(y0, p.height), clampi(y0 + 1.0, p.height));
    let (xa, xb) = (clampi(x0, p.width), clampi(x0 + 1.0, p.width));
    let (a, b, c, d) = (p.get(ya, xa), p.get(ya, xb), p.get(yb, xa), p.get(yb, xb));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] + (b[k] - a[k]) * tx;
        let bot = c[k] + (d[k] - c[k]) * tx;
        out[k] = (top + (bot - top) * ty).clamp(0.0, 1.0);
    }
    out
}

/// Applies `spec.ops` in order. Boxes pushed entirely out of frame are
/// dropped with a warning; partially visible ones are clipped.
pub fn augment(record: &DatasetRecord, spec: &AugmentSpec) -> Result<DatasetRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut px = record.pixels.clone();
    let mut boxes = record.boxes.clone();
    for op in &spec.ops {
        let (h, w) = (px.height, px.width);
        match *op {
            AugmentOp::HFlip => {
                px = remap(&px, h, w, |y, x| (y, w - 1 - x));
                boxes = map_boxes(&boxes, |b| BBox::new(1.0 - b.cx, b.cy, b.w, b.h));
            }
            AugmentOp::VFlip => {
                px = remap(&px, h, w, |y, x| (h - 1 - y, x));
                boxes = map_boxes(&boxes, |b| BBox::new(b.cx, 1.0 - b.cy, b.w, b.h));
            }
            AugmentOp::Rotate90 => {
                px = remap(&px, w, h, |y, x| (x, w - 1 - y));
                boxes = map_boxes(&boxes, |b| BBox::new(b.cy, 1.0 - b.cx, b.h, b.w));
            }
            AugmentOp::ScaleJitter { min, max } => {
                let f = if min == max { min } else { rng.random_range(min..=max) };
                let mut out = Pixels::filled(h, w, [0.0; 3]);
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as f64 + 0.5 - h as f64 / 2.0) / f + h as f64 / 2.0 - 0.5;
                        let sx = (x as f64 + 0.5 - w as f64 / 2.0) / f + w as f64 / 2.0 - 0.5;
                        out.set(y, x, sample_bilinear(&px, sy, sx));
                    }
                }
                px = out;
                let mut kept = Vec::with_capacity(boxes.len());
                for b in &boxes {
                    let z = BBox::new(0.5 + (b.bbox.cx - 0.5) * f, 0.5 + (b.bbox.cy - 0.5) * f, b.bbox.w * f, b.bbox.h * f);
                    match z.clamp_unit() {
                        Some(bbox) => kept.push(GroundTruthBox { bbox, class_id: b.class_id }),
                        None => log::warn!(
                            "{}: class {} box left the image after scale {f:.3}; dropped",
                            record.id,
                            b.class_id
                        ),
                    }
                }
                boxes = kept;
            }
            AugmentOp::Brightness { min, max } => {
                let delta = if min == max { min } else { rng.random_range(min..=max) };
                px.data.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
            }
            AugmentOp::GaussianNoise { sigma } => {
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                    px.data
                        .iter_mut()
                        .for_each(|v| *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        boxes = map_boxes(&boxes, snap_box);
    }
    Ok(DatasetRecord {
        id: record.id.clone(),
        pixels: px,
        boxes,
        source: Source::Augmented,
    })
}
