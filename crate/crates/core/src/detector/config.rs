use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const NUM_PCB_CLASSES: usize = 6;
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Normalized (w, h) anchors per pyramid level, stride 8 first.
pub fn default_anchors() -> Vec<Vec<(f64, f64)>> {
    vec![
        vec![(0.05, 0.05), (0.1, 0.1), (0.15, 0.1)],
        vec![(0.2, 0.2), (0.3, 0.2), (0.2, 0.3)],
        vec![(0.4, 0.4), (0.6, 0.4), (0.7, 0.7)],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Square input side in pixels; multiple of 32.
    pub image_size: usize,
    pub num_classes: usize,
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub strides: Vec<usize>,
    /// Channel widths of the stride-8/16/32 backbone stages.
    pub backbone_widths: Vec<usize>,
    pub res2net_scale: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 320,
            num_classes: NUM_PCB_CLASSES,
            anchors: default_anchors(),
            strides: STRIDES.to_vec(),
            backbone_widths: vec![16, 32, 64],
            res2net_scale: crate::res2net::DEFAULT_SCALE,
        }
    }
}

/// One detection grid: S×S cells with B anchors each.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub grid: usize,
    pub anchors: Vec<(f64, f64)>,
}

impl LevelSpec {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_slots(&self) -> usize {
        self.grid * self.grid * self.anchors.len()
    }
}

/// Geometry shared by decoding, target assignment and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub levels: Vec<LevelSpec>,
    pub num_classes: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("grid spec has no levels".into()));
        }
        for (l, lv) in self.levels.iter().enumerate() {
            if lv.grid == 0 || lv.anchors.is_empty() {
                return Err(Error::Config(format!("level {l}: empty grid or anchor set")));
            }
            for &(w, h) in &lv.anchors {
                if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
                    return Err(Error::Config(format!(
                        "level {l}: anchor ({w}, {h}) outside (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channels per level of the raw head output: B·(5+K).
    pub fn channels(&self, level: usize) -> usize {
        self.levels[level].num_anchors() * (5 + self.num_classes)
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.strides != STRIDES {
            return Err(Error::Config(format!(
                "strides must be {STRIDES:?}, got {:?}",
                self.strides
            )));
        }
        if self.anchors.len() != 3 {
            return Err(Error::Config(format!(
                "expected 3 anchor levels, got {}",
                self.anchors.len()
            )));
        }
        let b = self.anchors[0].len();
        if self.anchors.iter().any(|a| a.len() != b) {
            return Err(Error::Config("every level needs the same anchor count".into()));
        }
        if self.backbone_widths.len() != 3 || self.backbone_widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone_widths must be 3 positive widths, got {:?}",
                self.backbone_widths
            )));
        }
        if self.res2net_scale == 0 {
            return Err(Error::Config("res2net_scale must be >= 1".into()));
        }
        self.grid_spec().validate()
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.image_size / s).collect()
    }

    pub fn anchors_per_level(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            levels: self
                .grid_sizes()
                .into_iter()
                .zip(&self.anchors)
                .map(|(grid, anchors)| LevelSpec {
                    grid,
                    anchors: anchors.clone(),
                })
                .collect(),
            num_classes: self.num_classes,
        }
    }

    /// Flat key/value form stored in checkpoint metadata.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let anchors = self
            .anchors
            .iter()
            .map(|lv| {
                lv.iter()
                    .map(|(w, h)| format!("{w}x{h}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        BTreeMap::from([
            ("image_size".to_string(), self.image_size.to_string()),
            ("num_classes".to_string(), self.num_classes.to_string()),
            ("anchors".to_string(), anchors),
            ("strides".to_string(), join(&self.strides)),
            ("backbone_widths".to_string(), join(&self.backbone_widths)),
            ("res2net_scale".to_string(), self.res2net_scale.to_string()),
        ])
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` is not an integer")))
        };
        let cfg = Self {
            image_size: int("image_size")?,
            num_classes: int("num_classes")?,
            anchors: parse_anchors(get("anchors")?)?,
            strides: parse_usize_list(get("strides")?)?,
            backbone_widths: parse_usize_list(get("backbone_widths")?)?,
            res2net_scale: int("res2net_scale")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer `{p}` in list `{s}`")))
        })
        .collect()
}

/// `w x h` pairs separated by `,` within a level and `;` between levels.
pub fn parse_anchors(s: &str) -> Result<Vec<Vec<(f64, f64)>>> {
    s.split(';')
        .map(|level| {
            level
                .split(',')
                .map(|pair| {
                    let (w, h) = pair
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("bad anchor `{pair}`")))?;
                    let parse = |v: &str| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad anchor `{pair}`")))
                    };
                    Ok((parse(w)?, parse(h)?))
                })
                .collect()
        })
        .collect()
}
