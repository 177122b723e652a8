//! Records, annotations, augmentation, the synthetic board generator and
//! dataset splitting.

mod annotation;
mod augment;
mod io;
mod split;
mod synth;

pub use annotation::{class_id, normalize_class_name, parse_annotation, serialize_annotation, Annotation};
pub use augment::{augment, AugmentOp, AugmentSpec};
pub use io::{export_dataset, load_dataset, load_image, save_png};
pub use split::{split_dataset, split_indices, SplitRatios};
pub use synth::{synth_dataset, synth_pcb, SynthConfig, BOARD_COLOR, COPPER_COLOR};

use crate::error::{Error, Result};
use crate::loss::GroundTruthBox;
use crate::postprocess::BBox;
use crate::tensor::Tensor;

/// Defect classes; the index is the class id.
pub const PCB_CLASSES: [&str; 6] = [
    "missing_hole",
    "mouse_bite",
    "open_circuit",
    "short",
    "spur",
    "spurious_copper",
];

/// RGB image, row-major H×W×3, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Pixels {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Pixels {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// 3×H×W tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for (p, rgb) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + p] = rgb[c];
            }
        }
        Tensor::new(&[3, h, w], out, false).expect("pixel values are finite")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if raw.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {height}×{width} RGB image",
                raw.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }
}

/// 0–255 interleaved RGB bytes → 3×H×W tensor in [0, 1].
pub fn normalize_image(raw: &[u8], height: usize, width: usize) -> Result<Tensor> {
    Ok(Pixels::from_rgb8(height, width, raw)?.to_tensor())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    Synthetic,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub pixels: Pixels,
    pub boxes: Vec<GroundTruthBox>,
    pub source: Source,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pixels;
        if p.data.len() != p.height * p.width * 3 {
            return Err(Error::InvalidArgument(format!("{}: pixel buffer size", self.id)));
        }
        if let Some(v) = p.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("{}: pixel value {v} outside [0, 1]", self.id)));
        }
        for b in &self.boxes {
            b.validate(PCB_CLASSES.len())
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", self.id)))?;
        }
        Ok(())
    }

    /// Class of the first box, used for stratified splitting.
    pub fn primary_class(&self) -> Option<usize> {
        self.boxes.first().map(|b| b.class_id)
    }

    pub fn to_sample(&self) -> crate::train::Sample {
        crate::train::Sample {
            image: self.pixels.to_tensor(),
            boxes: self.boxes.clone(),
        }
    }
}

const GRID: f64 = (1u64 << 40) as f64;

/// Snaps a normalized coordinate onto the 2⁻⁴⁰ grid. On that grid `1 − x`
/// is exact, so reflections and quarter turns invert bit-exactly.
pub fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

pub(crate) fn snap_box(b: &BBox) -> BBox {
    BBox::new(snap(b.cx), snap(b.cy), snap(b.w), snap(b.h))
}
