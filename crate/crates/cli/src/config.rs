//! Flat `key = value` run configuration. Later sources win: built-in
//! defaults, then the config file, then command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use pdd_core::data::{SplitRatios, SynthConfig};
use pdd_core::detector::{parse_anchors, parse_usize_list, DetectorConfig};
use pdd_core::loss::{ClassTerm, LossConfig, TargetConfidence};
use pdd_core::postprocess::NmsConfig;
use pdd_core::train::TrainHyper;
use pdd_core::{Error, Result};

/// Keys that define the network; they must agree with a loaded checkpoint.
pub const ARCH_KEYS: [&str; 4] = ["image_size", "anchors", "backbone_widths", "res2net_scale"];

const DEFAULTS: &[(&str, &str)] = &[
    ("data_dir", ""),
    ("synthetic", "false"),
    ("synth_images", "8"),
    ("synth_min_defects", "1"),
    ("synth_max_defects", "3"),
    ("split", "1,0,0"),
    ("eval_split", "train"),
    ("image_size", "320"),
    ("anchors", ""),
    ("backbone_widths", "16,32,64"),
    ("res2net_scale", "4"),
    ("lambda_coord", "5"),
    ("lambda_noobj", "0.5"),
    ("target_confidence", "one"),
    ("class_term", "per_slot"),
    ("conf_threshold", "0.25"),
    ("iou_threshold", "0.45"),
    ("max_detections", "300"),
    ("lr", "0.001"),
    ("momentum", "0.9"),
    ("epochs", "300"),
    ("batch_size", "32"),
    ("checkpoint_every", "0"),
    ("seed", "0"),
    ("output_dir", "runs"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub synth: SynthConfig,
    pub synth_images: usize,
    pub split: SplitRatios,
    pub eval_split: EvalSplit,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub nms: NmsConfig,
    pub hyper: TrainHyper,
    /// Save a periodic checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Keys set by the file or flags rather than defaults.
    pub explicit: BTreeSet<String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = &map[key];
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match map[key].as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if given) and then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut map: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut explicit = BTreeSet::new();
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            layers.push(parse_kv(&text)?);
        }
        layers.push(overrides.clone());
        for layer in layers {
            for (k, v) in layer {
                if !map.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
                explicit.insert(k.clone());
                map.insert(k, v);
            }
        }
        Self::from_map(&map, explicit)
    }

    fn from_map(map: &BTreeMap<String, String>, explicit: BTreeSet<String>) -> Result<Self> {
        let detector = DetectorConfig {
            image_size: parse(map, "image_size")?,
            anchors: match map["anchors"].as_str() {
                "" => pdd_core::detector::default_anchors(),
                s => parse_anchors(s)?,
            },
            backbone_widths: parse_usize_list(&map["backbone_widths"])?,
            res2net_scale: parse(map, "res2net_scale")?,
            ..Default::default()
        };
        detector.validate()?;
        let loss = LossConfig {
            lambda_coord: parse(map, "lambda_coord")?,
            lambda_noobj: parse(map, "lambda_noobj")?,
            target_confidence: match map["target_confidence"].as_str() {
                "one" => TargetConfidence::One,
                "iou" => TargetConfidence::Iou,
                v => return Err(Error::Config(format!("target_confidence: expected one|iou, got `{v}`"))),
            },
            class_term: match map["class_term"].as_str() {
                "per_slot" => ClassTerm::PerSlot,
                "per_cell" => ClassTerm::PerCell,
                v => return Err(Error::Config(format!("class_term: expected per_slot|per_cell, got `{v}`"))),
            },
        };
        let nms = NmsConfig {
            conf_threshold: parse(map, "conf_threshold")?,
            iou_threshold: parse(map, "iou_threshold")?,
            max_detections: parse(map, "max_detections")?,
        };
        nms.validate()?;
        let hyper = TrainHyper {
            lr: parse(map, "lr")?,
            momentum: parse(map, "momentum")?,
            epochs: parse(map, "epochs")?,
            batch_size: parse(map, "batch_size")?,
            loss,
        };
        hyper.validate()?;
        let ratios: Vec<f64> = map["split"]
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split: cannot parse `{}`", map["split"])))?;
        let split = match ratios[..] {
            [train, val, test] => SplitRatios { train, val, test },
            _ => return Err(Error::Config("split: expected three ratios train,val,test".into())),
        };
        split.validate()?;
        let synth = SynthConfig {
            image_size: detector.image_size,
            min_defects: parse(map, "synth_min_defects")?,
            max_defects: parse(map, "synth_max_defects")?,
            ..Default::default()
        };
        synth.validate()?;
        let data_dir = match map["data_dir"].as_str() {
            "" => None,
            s => Some(PathBuf::from(s)),
        };
        let synthetic = parse_bool(map, "synthetic")?;
        Ok(Self {
            data_dir,
            synthetic,
            synth,
            synth_images: parse(map, "synth_images")?,
            split,
            eval_split: match map["eval_split"].as_str() {
                "train" => EvalSplit::Train,
                "val" => EvalSplit::Val,
                "test" => EvalSplit::Test,
                v => return Err(Error::Config(format!("eval_split: expected train|val|test, got `{v}`"))),
            },
            detector,
            loss,
            nms,
            hyper,
            checkpoint_every: parse(map, "checkpoint_every")?,
            seed: parse(map, "seed")?,
            output_dir: PathBuf::from(&map["output_dir"]),
            explicit,
        })
    }

    /// Errors when an explicitly configured architecture key disagrees with `ckpt`.
    pub fn check_against(&self, ckpt: &DetectorConfig) -> Result<()> {
        let ours = self.detector.to_meta();
        let theirs = ckpt.to_meta();
        for key in ARCH_KEYS {
            if self.explicit.contains(key) && ours.get(key) != theirs.get(key) {
                return Err(Error::Config(format!(
                    "{key} is {} in the config but {} in the checkpoint",
                    ours.get(key).map_or("?", String::as_str),
                    theirs.get(key).map_or("?", String::as_str)
                )));
            }
        }
        Ok(())
    }
}
