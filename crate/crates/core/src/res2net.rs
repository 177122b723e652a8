//! Res2Net block: hierarchical split-transform-aggregate with a residual path.
//!
//! ```text
//! u  = reduce(x)                      1×1, in → w·s
//! x₁..x_s = split(u)                  s groups of w channels
//! y₁ = x₁
//! yᵢ = Kᵢ(xᵢ + yᵢ₋₁)   i = 2..s       3×3, w → w
//! out = shortcut(x) + expand(concat(y₁..y_s))
//! ```
//!
//! Every convolution is conv → batchnorm → SiLU; the shortcut is the identity
//! when `in == out` and a linear 1×1 conv + batchnorm otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{slice_channels, ConvBn, Forward};
use crate::tensor::{ParamStore, Var};

pub const DEFAULT_SCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Res2NetBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub scale: usize,
    pub width: usize,
    pub reduce: ConvBn,
    pub groups: Vec<ConvBn>,
    pub expand: ConvBn,
    pub projection: Option<ConvBn>,
}

impl Res2NetBlock {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        scale: usize,
        width: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{prefix}: zero channels")));
        }
        if scale == 0 {
            return Err(Error::Config(format!("{prefix}: scale must be >= 1")));
        }
        if width == 0 {
            return Err(Error::Config(format!("{prefix}: width must be >= 1")));
        }
        let inner = width * scale;
        Ok(Self {
            reduce: ConvBn::new(format!("{prefix}.reduce"), in_channels, inner, 1, 1),
            groups: (1..scale)
                .map(|i| ConvBn::new(format!("{prefix}.group.{i}"), width, width, 3, 1))
                .collect(),
            expand: ConvBn::new(format!("{prefix}.expand"), inner, out_channels, 1, 1),
            projection: (in_channels != out_channels).then(|| {
                ConvBn::new(format!("{prefix}.shortcut"), in_channels, out_channels, 1, 1).linear()
            }),
            prefix,
            in_channels,
            out_channels,
            scale,
            width,
        })
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
        self.reduce.init(rng, store)?;
        for g in &self.groups {
            g.init(rng, store)?;
        }
        self.expand.init(rng, store)?;
        if let Some(p) = &self.projection {
            p.init(rng, store)?;
        }
        Ok(())
    }

    /// Paths of every convolution weight in the block.
    pub fn conv_weight_paths(&self) -> Vec<String> {
        let mut v = vec![self.reduce.weight_path()];
        v.extend(self.groups.iter().map(ConvBn::weight_path));
        v.push(self.expand.weight_path());
        v.extend(self.projection.iter().map(ConvBn::weight_path));
        v
    }

    pub fn forward<'t>(&self, fx: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_splits(fx, x).map(|(_, out)| out)
    }

    /// Returns the per-split outputs y₁..y_s along with the block output.
    pub fn forward_splits<'t>(&self, fx: &Forward<'t>, x: Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "res2net",
                format!("expected N×{}×H×W input, got {shape:?}", self.in_channels),
            ));
        }
        let u = self.reduce.forward(fx, x)?;
        let inner = u.shape()[1];
        if inner % self.scale != 0 {
            return Err(Error::shape(
                "res2net",
                format!("scale {} does not divide internal width {inner}", self.scale),
            ));
        }
        let w = inner / self.scale;
        let mut ys: Vec<Var<'t>> = Vec::with_capacity(self.scale);
        ys.push(slice_channels(u, 0, w)?);
        for (i, conv) in self.groups.iter().enumerate() {
            let xi = slice_channels(u, (i + 1) * w, w)?;
            let prev = *ys.last().expect("y₁ present");
            ys.push(conv.forward(fx, xi.add(prev)?)?);
        }
        let merged = if ys.len() == 1 {
            ys[0]
        } else {
            Var::concat_channels(&ys)?
        };
        let body = self.expand.forward(fx, merged)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(fx, x)?,
            None => x,
        };
        Ok((ys, shortcut.add(body)?))
    }
}

/// Standalone block under prefix `res2net.0` with deterministic seeded init.
pub fn res2net_init(
    in_channels: usize,
    out_channels: usize,
    scale: usize,
    width: usize,
    seed: u64,
) -> Result<(Res2NetBlock, ParamStore)> {
    let block = Res2NetBlock::new("res2net.0", in_channels, out_channels, scale, width)?;
    let mut store = ParamStore::new();
    block.init(&mut ChaCha8Rng::seed_from_u64(seed), &mut store)?;
    Ok((block, store))
}
