//! Layer building blocks shared by the Res2Net block and the detector.
//!
//! Layers only describe structure and parameter paths; values live in a
//! [`ParamStore`] and are bound onto a fresh [`Tape`] by [`Forward`].

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; running stats are collected for update.
    Train,
    /// Running statistics in batchnorm.
    Eval,
}

/// Batch statistics observed by one batchnorm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnStat {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One forward pass: binds parameters onto a tape and collects batchnorm statistics.
pub struct Forward<'t> {
    tape: &'t Tape,
    params: &'t ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
    stats: RefCell<Vec<BnStat>>,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            params,
            mode,
            track_grads: true,
            bound: RefCell::new(HashMap::new()),
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Eval-mode pass with every parameter bound as a constant.
    pub fn inference(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self {
            track_grads: false,
            ..Self::new(tape, params, Mode::Eval)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'t ParamStore {
        self.params
    }

    /// Binds `path` once per pass; repeated lookups return the same node.
    pub fn param(&self, path: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(path) {
            return Ok(*v);
        }
        let t = self.params.get(path)?;
        let requires = self.track_grads && t.requires_grad();
        let v = self
            .tape
            .named_leaf(path, t.clone().with_requires_grad(requires));
        self.bound.borrow_mut().insert(path.to_string(), v);
        Ok(v)
    }

    /// Substitutes `var` for the stored parameter at `path` (for gradient probes).
    pub fn bind(&self, path: &str, var: Var<'t>) {
        self.bound.borrow_mut().insert(path.to_string(), var);
    }

    pub fn take_stats(&self) -> Vec<BnStat> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    pub fn batch_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let y = x.batch_norm(gamma, beta, BN_EPS, BatchNormMode::Train)?;
                let (mean, var) = y.batch_stats().expect("train-mode batchnorm saves stats");
                let shape = x.shape();
                self.stats.borrow_mut().push(BnStat {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                    count: shape[0] * shape[2] * shape[3],
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.get(&format!("{prefix}.running_mean"))?;
                let var = self.params.get(&format!("{prefix}.running_var"))?;
                x.batch_norm(
                    gamma,
                    beta,
                    BN_EPS,
                    BatchNormMode::Eval {
                        mean: mean.data().to_vec(),
                        var: var.data().to_vec(),
                    },
                )
            }
        }
    }
}

/// Running-average update with unbiased batch variance.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[BnStat], momentum: f64) -> Result<()> {
    for s in stats {
        let correction = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        let rm = store.get_mut(&format!("{}.running_mean", s.prefix))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = store.get_mut(&format!("{}.running_var", s.prefix))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }
    Ok(())
}

/// Uniform(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data, true).expect("finite init")
}

/// conv(k×k, stride, pad k/2, no bias) → batchnorm → optional SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: bool,
}

impl ConvBn {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            activation: true,
        }
    }

    pub fn linear(mut self) -> Self {
        self.activation = false;
        self
    }

    pub fn weight_path(&self) -> String {
        format!("{}.conv.weight", self.prefix)
    }

    fn bn_prefix(&self) -> String {
        format!("{}.bn", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config(format!("{}: zero channels", self.prefix)));
        }
        store.insert(
            self.weight_path(),
            kaiming_uniform(&[self.out_ch, self.in_ch, self.kernel, self.kernel], rng),
        );
        let bn = self.bn_prefix();
        store.insert(format!("{bn}.gamma"), Tensor::full(&[self.out_ch], 1.0).with_requires_grad(true));
        store.insert(format!("{bn}.beta"), Tensor::zeros(&[self.out_ch]).with_requires_grad(true));
        store.insert(format!("{bn}.running_mean"), Tensor::zeros(&[self.out_ch]));
        store.insert(format!("{bn}.running_var"), Tensor::full(&[self.out_ch], 1.0));
        Ok(())
    }

    pub fn forward<'t>(&self, fx: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = fx.param(&self.weight_path())?;
        let y = x.conv2d(w, self.stride, self.kernel / 2)?;
        let y = fx.batch_norm(&self.bn_prefix(), y)?;
        if self.activation {
            y.silu()
        } else {
            Ok(y)
        }
    }
}

/// 1×1 convolution with per-channel bias and no normalization (detection head).
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseConv {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl PointwiseConv {
    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        store.insert(
            format!("{}.weight", self.prefix),
            kaiming_uniform(&[self.out_ch, self.in_ch, 1, 1], rng),
        );
        store.insert(
            format!("{}.bias", self.prefix),
            Tensor::zeros(&[self.out_ch]).with_requires_grad(true),
        );
    }

    pub fn forward<'t>(&self, fx: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = fx.param(&format!("{}.weight", self.prefix))?;
        let b = fx.param(&format!("{}.bias", self.prefix))?;
        x.conv2d(w, 1, 0)?.channel_bias(b)
    }
}

/// Channels `[start, start + len)` of an N×C×H×W value.
pub fn slice_channels<'t>(x: Var<'t>, start: usize, len: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape("slice_channels", format!("expected N×C×H×W, got {shape:?}")));
    };
    if start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {start}..{} of {c}", start + len),
        ));
    }
    let hw = h * w;
    let mut idx = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let base = (b * c + start) * hw;
        idx.extend(base..base + len * hw);
    }
    x.gather(idx, &[n, len, h, w])
}
