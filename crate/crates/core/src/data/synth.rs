//! Deterministic synthetic boards: a green substrate with copper traces and
//! drilled pads, plus one small motif per injected defect.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{snap_box, DatasetRecord, Pixels, Source, PCB_CLASSES};
use crate::error::{Error, Result};
use crate::loss::GroundTruthBox;
use crate::postprocess::BBox;

pub const BOARD_COLOR: [f64; 3] = [0.06, 0.36, 0.16];
pub const COPPER_COLOR: [f64; 3] = [0.85, 0.68, 0.32];
const HOLE_COLOR: [f64; 3] = [0.08, 0.08, 0.08];

/// Placement grid: at most `TILES²` defects, one per tile.
const TILES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_defects: usize,
    pub max_defects: usize,
    /// Relative frequency of each class.
    pub class_weights: [f64; 6],
    /// Draw the trace and pad background.
    pub traces: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_defects: 1,
            max_defects: 3,
            class_weights: [1.0; 6],
            traces: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 * TILES {
            return Err(Error::Config(format!("synthetic image_size {} < {}", self.image_size, 4 * TILES)));
        }
        if self.min_defects > self.max_defects {
            return Err(Error::Config(format!(
                "defect range [{}, {}] is empty",
                self.min_defects, self.max_defects
            )));
        }
        if self.max_defects > TILES * TILES {
            return Err(Error::Config(format!(
                "{} defects do not fit: at most {} can be placed",
                self.max_defects,
                TILES * TILES
            )));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!("bad class weights {:?}", self.class_weights)));
        }
        Ok(())
    }
}

struct Canvas {
    px: Pixels,
}

impl Canvas {
    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f64; 3]) {
        let (h, w) = (self.px.height as i64, self.px.width as i64);
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                self.px.set(y as usize, x as usize, c);
            }
        }
    }

    /// Ellipse inscribed in [x0, x1) × [y0, y1), clipped to `clip`.
    fn ellipse(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [f64; 3], clip: (i64, i64, i64, i64)) {
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
        if rx <= 0.0 || ry <= 0.0 {
            return;
        }
        let (h, w) = (self.px.height as i64, self.px.width as i64);
        for y in clip.1.max(0)..clip.3.min(h) {
            for x in clip.0.max(0)..clip.2.min(w) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.px.set(y as usize, x as usize, c);
                }
            }
        }
    }
}

fn draw_background(canvas: &mut Canvas, size: usize, rng: &mut ChaCha8Rng) {
    let t = (size / 32).max(1) as i64;
    let s = size as i64;
    let lines = 2 + size / 32;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for _ in 0..lines {
        let y = rng.random_range(0..s);
        canvas.rect(0, y, s, y + t, COPPER_COLOR);
        rows.push(y);
        let x = rng.random_range(0..s);
        canvas.rect(x, 0, x + t, s, COPPER_COLOR);
        cols.push(x);
    }
    let r = (2 * t + 1) as f64;
    for (&y, &x) in rows.iter().zip(&cols) {
        let (cx, cy) = (x as f64 + t as f64 / 2.0, y as f64 + t as f64 / 2.0);
        let clip = (0, 0, s, s);
        canvas.ellipse(cx - r, cy - r, cx + r, cy + r, COPPER_COLOR, clip);
        canvas.ellipse(cx - r / 2.5, cy - r / 2.5, cx + r / 2.5, cy + r / 2.5, HOLE_COLOR, clip);
    }
}

/// Paints the motif for `class` filling the region [x0, x0+w) × [y0, y0+h).
fn draw_defect(canvas: &mut Canvas, class: usize, x0: i64, y0: i64, w: i64, h: i64, rng: &mut ChaCha8Rng) {
    let clip = (x0, y0, x0 + w, y0 + h);
    let (fx0, fy0, fw, fh) = (x0 as f64, y0 as f64, w as f64, h as f64);
    canvas.rect(x0, y0, x0 + w, y0 + h, BOARD_COLOR);
    match class {
        // copper pad with no drill hole
        0 => canvas.ellipse(fx0, fy0, fx0 + fw, fy0 + fh, COPPER_COLOR, clip),
        // thick trace with notches bitten out of both edges
        1 => {
            let band = (h / 4, h - h / 4);
            canvas.rect(x0, y0 + band.0, x0 + w, y0 + band.1, COPPER_COLOR);
            let r = (fh / 4.0).max(1.0);
            let n = 2 + rng.random_range(0..2);
            for k in 0..n {
                let cx = fx0 + fw * (k as f64 + 0.5) / n as f64;
                let top = fy0 + band.0 as f64;
                let bottom = fy0 + band.1 as f64;
                canvas.ellipse(cx - r, top - r, cx + r, top + r, BOARD_COLOR, clip);
                canvas.ellipse(cx - r, bottom - r, cx + r, bottom + r, BOARD_COLOR, clip);
            }
        }
        // trace broken by a gap
        2 => {
            let t = (h / 3).max(1);
            let ty = y0 + (h - t) / 2;
            canvas.rect(x0, ty, x0 + w, ty + t, COPPER_COLOR);
            let gap = (w / 3).max(1);
            let gx = x0 + (w - gap) / 2;
            canvas.rect(gx, ty, gx + gap, ty + t, BOARD_COLOR);
        }
        // two parallel traces joined by a bridge
        3 => {
            let t = (h / 5).max(1);
            canvas.rect(x0, y0, x0 + w, y0 + t, COPPER_COLOR);
            canvas.rect(x0, y0 + h - t, x0 + w, y0 + h, COPPER_COLOR);
            let bw = (w / 4).max(1);
            let bx = x0 + (w - bw) / 2;
            canvas.rect(bx, y0, bx + bw, y0 + h, COPPER_COLOR);
        }
        // trace with a thin spike rising from it
        4 => {
            let t = (h / 3).max(1);
            canvas.rect(x0, y0 + h - t, x0 + w, y0 + h, COPPER_COLOR);
            let peak = fx0 + fw * rng.random_range(0.3..0.7);
            let base = fw / 3.0;
            for y in y0..y0 + h - t {
                let frac = (y - y0) as f64 / (fh - t as f64).max(1.0);
                let half = (base / 2.0 * frac).max(0.5);
                let (a, b) = ((peak - half).floor() as i64, (peak + half).ceil() as i64);
                canvas.rect(a.max(x0), y, b.min(x0 + w), y + 1, COPPER_COLOR);
            }
        }
        // isolated irregular blob
        _ => {
            canvas.ellipse(fx0, fy0 + fh * 0.2, fx0 + fw * 0.75, fy0 + fh, COPPER_COLOR, clip);
            canvas.ellipse(fx0 + fw * 0.35, fy0, fx0 + fw, fy0 + fh * 0.7, COPPER_COLOR, clip);
        }
    }
}

/// Renders one board. Equal seeds give bit-identical records; the trace
/// background comes from its own stream of the seed, so it does not depend
/// on the defect draws.
pub fn synth_pcb(seed: u64, cfg: &SynthConfig) -> Result<DatasetRecord> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(seed);
    bg_rng.set_stream(1);

    let mut canvas = Canvas {
        px: Pixels::filled(size, size, BOARD_COLOR),
    };
    if cfg.traces {
        draw_background(&mut canvas, size, &mut bg_rng);
    }

    let count = rng.random_range(cfg.min_defects..=cfg.max_defects);
    let weights = WeightedIndex::new(cfg.class_weights).map_err(|e| Error::Config(e.to_string()))?;
    let tile = size / TILES;
    let lo = (tile / 2).max(4);
    let hi = (tile * 7 / 8).max(lo);
    let mut boxes = Vec::with_capacity(count);
    for t in sample(&mut rng, TILES * TILES, count) {
        let class = weights.sample(&mut rng);
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x0 = (t % TILES) * tile + rng.random_range(0..=tile - w);
        let y0 = (t / TILES) * tile + rng.random_range(0..=tile - h);
        draw_defect(&mut canvas, class, x0 as i64, y0 as i64, w as i64, h as i64, &mut rng);
        let s = size as f64;
        let bbox = BBox::from_corners(x0 as f64 / s, y0 as f64 / s, (x0 + w) as f64 / s, (y0 + h) as f64 / s);
        boxes.push(GroundTruthBox {
            bbox: snap_box(&bbox),
            class_id: class,
        });
    }
    debug_assert!(boxes.iter().all(|b| b.class_id < PCB_CLASSES.len()));
    Ok(DatasetRecord {
        id: format!("synth_{seed:016x}"),
        pixels: canvas.px,
        boxes,
        source: Source::Synthetic,
    })
}

/// `n` boards with per-record seeds drawn from `seed`.
pub fn synth_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_pcb(rng.random(), cfg)).collect()
}
