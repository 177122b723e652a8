use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{normalize_image, Pixels};
use crate::detector::{decode, DetectorModel};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::postprocess::{nms, NmsConfig};
use crate::tensor::{Tape, Tensor};

/// Real-time bar in images per second.
pub const REALTIME_FPS: f64 = 30.0;

/// Mean milliseconds per image for each pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub normalize: f64,
    pub forward: f64,
    pub decode: f64,
    pub nms: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.normalize + self.forward + self.decode + self.nms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub image_size: usize,
    pub images: usize,
    pub warmup: usize,
    /// Images per second, one sample per timed run.
    pub samples: Vec<f64>,
    pub mean_fps: f64,
    pub median_fps: f64,
    pub stages: StageTimes,
}

impl BenchReport {
    pub fn meets_realtime(&self) -> bool {
        self.mean_fps > REALTIME_FPS
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "runs = {}", self.samples.len());
        let _ = writeln!(s, "mean_fps = {:.2}", self.mean_fps);
        let _ = writeln!(s, "median_fps = {:.2}", self.median_fps);
        let _ = writeln!(
            s,
            "realtime = {} (> {REALTIME_FPS} fps)",
            if self.meets_realtime() { "PASS" } else { "FAIL" }
        );
        s.push('\n');
        let _ = writeln!(s, "| stage | ms/image |");
        let st = &self.stages;
        for (name, v) in [
            ("normalize", st.normalize),
            ("forward", st.forward),
            ("decode", st.decode),
            ("nms", st.nms),
            ("total", st.total()),
        ] {
            let _ = writeln!(s, "| {name} | {v:.3} |");
        }
        s
    }
}

/// Times normalize → forward → decode → NMS one image at a time. `warmup`
/// full passes run first and are not recorded.
pub fn fps_bench(
    model: &DetectorModel,
    images: &[Pixels],
    warmup: usize,
    runs: usize,
    nms_cfg: &NmsConfig,
) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one image".into()));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("benchmark needs runs >= 1".into()));
    }
    nms_cfg.validate()?;
    let size = model.config().image_size;
    if let Some(p) = images.iter().find(|p| p.height != size || p.width != size) {
        return Err(Error::shape(
            "fps_bench",
            format!("image is {}×{}, model expects {size}×{size}", p.height, p.width),
        ));
    }
    let raw: Vec<Vec<u8>> = images.iter().map(Pixels::to_rgb8).collect();
    let spec = model.config().grid_spec();
    let pass = || -> Result<StageTimes> {
        let mut t = StageTimes::default();
        for bytes in &raw {
            let t0 = Instant::now();
            let x = normalize_image(bytes, size, size)?;
            let x = Tensor::new(&[1, 3, size, size], x.into_data(), false)?;
            let t1 = Instant::now();
            let levels = {
                let tape = Tape::new();
                let fx = Forward::inference(&tape, &model.params);
                model.forward(&fx, tape.constant(x))?.to_tensors()
            };
            let t2 = Instant::now();
            let cands = decode(&levels, &spec)?;
            let t3 = Instant::now();
            let kept = nms(&cands[0], nms_cfg);
            let t4 = Instant::now();
            std::hint::black_box(kept);
            t.normalize += (t1 - t0).as_secs_f64();
            t.forward += (t2 - t1).as_secs_f64();
            t.decode += (t3 - t2).as_secs_f64();
            t.nms += (t4 - t3).as_secs_f64();
        }
        Ok(t)
    };
    for _ in 0..warmup {
        pass()?;
    }
    let mut samples = Vec::with_capacity(runs);
    let mut acc = StageTimes::default();
    for _ in 0..runs {
        let t = pass()?;
        samples.push(images.len() as f64 / t.total().max(f64::MIN_POSITIVE));
        acc.normalize += t.normalize;
        acc.forward += t.forward;
        acc.decode += t.decode;
        acc.nms += t.nms;
    }
    let per_image_ms = 1000.0 / (runs * images.len()) as f64;
    let stages = StageTimes {
        normalize: acc.normalize * per_image_ms,
        forward: acc.forward * per_image_ms,
        decode: acc.decode * per_image_ms,
        nms: acc.nms * per_image_ms,
    };
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_fps = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Ok(BenchReport {
        image_size: size,
        images: images.len(),
        warmup,
        mean_fps: samples.iter().sum::<f64>() / samples.len() as f64,
        median_fps,
        samples,
        stages,
    })
}
