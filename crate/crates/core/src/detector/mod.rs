//! The detector network: strided conv backbone, top-down FPN neck with one
//! Res2Net block per level, and a 1×1 anchor head per level.

mod config;
mod decode;

pub use config::{
    default_anchors, parse_anchors, parse_usize_list, DetectorConfig, GridSpec, LevelSpec,
    NUM_PCB_CLASSES, STRIDES,
};
pub use decode::{decode, decode_level, raw_index, DecodedLevel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Forward, PointwiseConv};
use crate::postprocess::{nms, Detection, NmsConfig};
use crate::res2net::Res2NetBlock;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Initial objectness of every slot; the head bias starts at its logit.
pub const OBJECTNESS_PRIOR: f64 = 0.01;

/// Head weights are Kaiming-uniform scaled by this factor, so every decoded
/// offset starts near σ(0) = 0.5.
pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Head outputs, stride 8 first. Level ℓ has shape N × B·(5+K) × Sℓ × Sℓ.
#[derive(Clone, Debug)]
pub struct RawPredictions<'t> {
    pub levels: Vec<Var<'t>>,
}

impl RawPredictions<'_> {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.levels.iter().map(|v| (*v.value()).clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Vec<ConvBn>,
    pub laterals: Vec<ConvBn>,
    pub blocks: Vec<Res2NetBlock>,
    pub heads: Vec<PointwiseConv>,
}

/// Architecture plus its parameters and batchnorm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub detector: Detector,
    pub params: ParamStore,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let [w3, w4, w5] = [
            config.backbone_widths[0],
            config.backbone_widths[1],
            config.backbone_widths[2],
        ];
        let stage_widths = [(w3 / 4).max(2), (w3 / 2).max(2), w3, w4, w5];
        let mut backbone = Vec::with_capacity(5);
        let mut in_ch = 3;
        for (i, &w) in stage_widths.iter().enumerate() {
            backbone.push(ConvBn::new(format!("backbone.stage{i}"), in_ch, w, 3, 2));
            in_ch = w;
        }
        let s = config.res2net_scale;
        let width = |out: usize| (out / s).max(1);
        let laterals = vec![
            ConvBn::new("neck.lateral.0", w4, w3, 1, 1),
            ConvBn::new("neck.lateral.1", w5, w4, 1, 1),
        ];
        let blocks = vec![
            Res2NetBlock::new("neck.res2net.0", 2 * w3, w3, s, width(w3))?,
            Res2NetBlock::new("neck.res2net.1", 2 * w4, w4, s, width(w4))?,
            Res2NetBlock::new("neck.res2net.2", w5, w5, s, width(w5))?,
        ];
        let spec = config.grid_spec();
        let heads = [w3, w4, w5]
            .iter()
            .enumerate()
            .map(|(l, &c)| PointwiseConv {
                prefix: format!("head.{l}"),
                in_ch: c,
                out_ch: spec.channels(l),
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            laterals,
            blocks,
            heads,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for c in self.backbone.iter().chain(&self.laterals) {
            c.init(&mut rng, &mut store)?;
        }
        for b in &self.blocks {
            b.init(&mut rng, &mut store)?;
        }
        let fields = 5 + self.config.num_classes;
        let obj_bias = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln();
        for h in &self.heads {
            h.init(&mut rng, &mut store);
            let weight = store.get_mut(&format!("{}.weight", h.prefix))?;
            weight.data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
            let bias = store.get_mut(&format!("{}.bias", h.prefix))?;
            for b in 0..h.out_ch / fields {
                bias.data_mut()[b * fields + 4] = obj_bias;
            }
        }
        Ok(store)
    }

    pub fn forward<'t>(&self, fx: &Forward<'t>, batch: Var<'t>) -> Result<RawPredictions<'t>> {
        let shape = batch.shape();
        let size = self.config.image_size;
        match shape[..] {
            [_, 3, h, w] if h == size && w == size => {}
            [_, c, h, w] => {
                return Err(Error::shape(
                    "detector",
                    format!("expected N×3×{size}×{size}, got N×{c}×{h}×{w}"),
                ))
            }
            _ => {
                return Err(Error::shape(
                    "detector",
                    format!("expected N×3×{size}×{size}, got {shape:?}"),
                ))
            }
        }
        let mut feats = Vec::with_capacity(5);
        let mut x = batch;
        for stage in &self.backbone {
            x = stage.forward(fx, x)?;
            feats.push(x);
        }
        let (c3, c4, c5) = (feats[2], feats[3], feats[4]);

        let p5 = self.blocks[2].forward(fx, c5)?;
        let up5 = self.laterals[1].forward(fx, p5)?.upsample_nearest(2)?;
        let p4 = self.blocks[1].forward(fx, Var::concat_channels(&[up5, c4])?)?;
        let up4 = self.laterals[0].forward(fx, p4)?.upsample_nearest(2)?;
        let p3 = self.blocks[0].forward(fx, Var::concat_channels(&[up4, c3])?)?;

        let levels = [p3, p4, p5]
            .into_iter()
            .zip(&self.heads)
            .map(|(p, head)| head.forward(fx, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(RawPredictions { levels })
    }
}

/// Builds the network and initializes its parameters from `seed`.
pub fn build_detector(config: DetectorConfig, seed: u64) -> Result<DetectorModel> {
    let detector = Detector::new(config)?;
    let params = detector.init(seed)?;
    Ok(DetectorModel { detector, params })
}

impl DetectorModel {
    pub fn config(&self) -> &DetectorConfig {
        &self.detector.config
    }

    pub fn forward<'t>(&'t self, fx: &Forward<'t>, batch: Var<'t>) -> Result<RawPredictions<'t>> {
        self.detector.forward(fx, batch)
    }

    /// Eval-mode forward, decode and NMS for an N×3×S×S batch.
    pub fn detect(&self, images: &Tensor, nms_cfg: &NmsConfig) -> Result<Vec<Vec<Detection>>> {
        nms_cfg.validate()?;
        let levels = {
            let tape = Tape::new();
            let fx = Forward::inference(&tape, &self.params);
            self.forward(&fx, tape.constant(images.clone()))?.to_tensors()
        };
        Ok(decode(&levels, &self.config().grid_spec())?
            .iter()
            .map(|c| nms(c, nms_cfg))
            .collect())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.config().to_meta())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, &self.config().to_meta())
    }

    /// Loads a checkpoint, rebuilding the architecture from its stored config.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        Self::from_parts(params, &meta)
    }

    pub fn from_parts(
        params: ParamStore,
        meta: &std::collections::BTreeMap<String, String>,
    ) -> Result<Self> {
        let config = DetectorConfig::from_meta(meta)?;
        let detector = Detector::new(config)?;
        let reference = detector.init(0)?;
        for (path, t) in reference.iter() {
            let got = params.get(path)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{path}: checkpoint shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                reference.len()
            )));
        }
        Ok(Self { detector, params })
    }
}
