//! Criterion routines shared by the core integration tests and the
//! `acceptance` target of the cli crate. Each returns a [`Tally`] so callers
//! can both assert and print a summary line.

use std::collections::BTreeMap;

use pdd_core::detector::{build_detector, decode_level, DetectorConfig, DetectorModel, GridSpec, LevelSpec};
use pdd_core::loss::{assign_targets, yolo_loss, AssignmentMap, ClassTerm, GroundTruthBox, LossConfig, Slot, TargetConfidence};
use pdd_core::metrics::{average_precision, evaluate, f1_score, match_detections, pr_curve, precision_recall_f1, ConfusionCounts, EvalConfig};
use pdd_core::nn::{Forward, Mode};
use pdd_core::postprocess::{nms, rank_order, BBox, Detection, NmsConfig};
use pdd_core::res2net::{res2net_init, Res2NetBlock};
use pdd_core::tensor::{finite_diff_check, BatchNormMode, ParamStore, Tape, Tensor, Var};
use pdd_core::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: u64 = 50;
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Tally {
    pub cases: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }

    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    /// Records an error measurement against `tol`.
    pub fn err(&mut self, e: f64, tol: f64, what: impl FnOnce() -> String) {
        self.worst = self.worst.max(e);
        if !(e < tol) {
            self.failures.push(format!("{} (error {e:e})", what()));
        }
    }

    pub fn summary(&self) -> String {
        let head = format!("{} cases, worst {:.3e}", self.cases, self.worst);
        match self.failures.first() {
            None => head,
            Some(f) => format!("{head}, {} failures, first: {f}", self.failures.len()),
        }
    }
}

// ---------------------------------------------------------------- gradients

/// Σ R ⊙ y with a fixed random R derived from `seed`, so every output element matters.
pub fn wsum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = uniform(&y.shape(), -1.0, 1.0, &mut rng(seed ^ 0x5e_ed0f_5eed));
    y.mul_const(r)?.sum()
}

fn fd<F>(f: F, point: &Tensor) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check(f, point, FD_STEP).expect("finite difference check runs")
}

/// |a − n| / max(1, |a|), maximized.
pub fn fd_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `point`, only at coordinates `coords`.
pub fn numeric_grad(point: &[f64], coords: &[usize], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            let o = p[i];
            p[i] = o + FD_STEP;
            let a = f(&p);
            p[i] = o - FD_STEP;
            let b = f(&p);
            p[i] = o;
            (a - b) / (2.0 * FD_STEP)
        })
        .collect()
}

fn shape4(r: &mut ChaCha8Rng, max_hw: usize) -> [usize; 4] {
    [
        r.random_range(1..=2),
        r.random_range(1..=3),
        r.random_range(1..=max_hw),
        r.random_range(1..=max_hw),
    ]
}

pub const PRIMITIVES: [&str; 21] = [
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "silu",
    "sigmoid",
    "max_pool2d",
    "upsample_nearest",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "sum",
    "sqrt",
    "square",
    "channel_bias",
    "gather",
    "add_const",
    "mul_const",
    "sub_const",
];

/// Worst finite-difference error of one seeded instance of a primitive,
/// checked with respect to every differentiable input.
pub fn primitive_case(name: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = seed;
    match name {
        "conv2d" => {
            let [n, c, _, _] = shape4(&mut r, 1);
            let o = r.random_range(1..=3);
            let k = [1, 3][r.random_range(0..2)];
            let (h, w) = (r.random_range(k..=6), r.random_range(k..=6));
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=k / 2);
            let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
            let kk = uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
            let (kc, xc) = (kk.clone(), x.clone());
            let a = fd(move |t, x| wsum(x.conv2d(t.constant(kc.clone()), stride, pad)?, s), &x);
            let b = fd(move |t, k| wsum(t.constant(xc.clone()).conv2d(k, stride, pad)?, s), &kk);
            a.max(b)
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let [n, c, _, _] = shape4(&mut r, 1);
            let (h, w) = (r.random_range(2..=3), r.random_range(2..=3));
            let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
            let g = uniform(&[c], 0.5, 1.5, &mut r);
            let b = uniform(&[c], -0.5, 0.5, &mut r);
            let mode = if name == "batch_norm_train" {
                BatchNormMode::Train
            } else {
                BatchNormMode::Eval {
                    mean: uniform(&[c], -0.5, 0.5, &mut r).into_data(),
                    var: uniform(&[c], 0.5, 2.0, &mut r).into_data(),
                }
            };
            fn bn<'t>(x: Var<'t>, g: Var<'t>, b: Var<'t>, mode: &BatchNormMode) -> Result<Var<'t>> {
                x.batch_norm(g, b, 1e-5, mode.clone())
            }
            let (g1, b1, m1) = (g.clone(), b.clone(), mode.clone());
            let ex = fd(move |t, x| wsum(bn(x, t.constant(g1.clone()), t.constant(b1.clone()), &m1)?, s), &x);
            let (x1, b1, m1) = (x.clone(), b.clone(), mode.clone());
            let eg = fd(move |t, g| wsum(bn(t.constant(x1.clone()), g, t.constant(b1.clone()), &m1)?, s), &g);
            let (x1, g1) = (x.clone(), g.clone());
            let eb = fd(move |t, b| wsum(bn(t.constant(x1.clone()), t.constant(g1.clone()), b, &mode)?, s), &b);
            ex.max(eg).max(eb)
        }
        "silu" | "sigmoid" => {
            let x = uniform(&shape4(&mut r, 4), -4.0, 4.0, &mut r);
            if name == "silu" {
                fd(move |_, x| wsum(x.silu()?, s), &x)
            } else {
                fd(move |_, x| wsum(x.sigmoid()?, s), &x)
            }
        }
        "max_pool2d" => {
            let [n, c, h, w] = shape4(&mut r, 6);
            let (h, w) = (h.max(2), w.max(2));
            let k = r.random_range(1..=h.min(w).min(3));
            let stride = r.random_range(1..=2);
            // Distinct values 0.01 apart keep every window's argmax stable under ±h.
            let mut vals: Vec<f64> = (0..n * c * h * w).map(|i| i as f64 * 0.01 - 0.5).collect();
            vals.shuffle(&mut r);
            let x = Tensor::new(&[n, c, h, w], vals, false).unwrap();
            fd(move |_, x| wsum(x.max_pool2d(k, stride)?, s), &x)
        }
        "upsample_nearest" => {
            let f = r.random_range(1..=3);
            let x = uniform(&shape4(&mut r, 4), -1.0, 1.0, &mut r);
            fd(move |_, x| wsum(x.upsample_nearest(f)?, s), &x)
        }
        "concat_channels" => {
            let [n, _, h, w] = shape4(&mut r, 4);
            let parts: Vec<Tensor> = (0..r.random_range(2..=3))
                .map(|_| {
                    let c = r.random_range(1..=3);
                    uniform(&[n, c, h, w], -1.0, 1.0, &mut r)
                })
                .collect();
            let mut worst: f64 = 0.0;
            for probe in 0..parts.len() {
                let others = parts.clone();
                worst = worst.max(fd(
                    move |t, x| {
                        let vs: Vec<Var<'_>> = others
                            .iter()
                            .enumerate()
                            .map(|(i, p)| if i == probe { x } else { t.constant(p.clone()) })
                            .collect();
                        wsum(Var::concat_channels(&vs)?, s)
                    },
                    &parts[probe],
                ));
            }
            worst
        }
        "add" | "sub" | "mul" => {
            let shape = if r.random_bool(0.5) {
                shape4(&mut r, 4).to_vec()
            } else {
                vec![r.random_range(1..=12)]
            };
            let a = uniform(&shape, -2.0, 2.0, &mut r);
            let b = uniform(&shape, -2.0, 2.0, &mut r);
            let op = match name {
                "add" => 0,
                "sub" => 1,
                _ => 2,
            };
            fn apply<'t>(op: u8, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
                match op {
                    0 => a.add(b),
                    1 => a.sub(b),
                    _ => a.mul(b),
                }
            }
            let (a1, b1) = (a.clone(), b.clone());
            let ea = fd(move |t, a| wsum(apply(op, a, t.constant(b1.clone()))?, s), &a);
            let eb = fd(move |t, b| wsum(apply(op, t.constant(a1.clone()), b)?, s), &b);
            let ec = fd(move |_, a| wsum(apply(op, a, a)?, s), &a);
            ea.max(eb).max(ec)
        }
        "mul_scalar" | "add_scalar" => {
            let c = r.random_range(-2.0..2.0);
            let x = uniform(&shape4(&mut r, 4), -2.0, 2.0, &mut r);
            if name == "mul_scalar" {
                fd(move |_, x| wsum(x.mul_scalar(c)?, s), &x)
            } else {
                fd(move |_, x| wsum(x.add_scalar(c)?.square()?, s), &x)
            }
        }
        "sum" => {
            let x = uniform(&shape4(&mut r, 4), -2.0, 2.0, &mut r);
            let plain = fd(|_, x| x.sum(), &x);
            plain.max(fd(move |_, x| x.square()?.sum()?.square(), &x))
        }
        "sqrt" => {
            let x = uniform(&shape4(&mut r, 4), 0.5, 2.0, &mut r);
            fd(move |_, x| wsum(x.sqrt()?, s), &x)
        }
        "square" => {
            let x = uniform(&shape4(&mut r, 4), -2.0, 2.0, &mut r);
            fd(move |_, x| wsum(x.square()?, s), &x)
        }
        "channel_bias" => {
            let shape = shape4(&mut r, 4);
            let x = uniform(&shape, -1.0, 1.0, &mut r);
            let b = uniform(&[shape[1]], -1.0, 1.0, &mut r);
            let (x1, b1) = (x.clone(), b.clone());
            let ex = fd(move |t, x| wsum(x.channel_bias(t.constant(b1.clone()))?.square()?, s), &x);
            let eb = fd(move |t, b| wsum(t.constant(x1.clone()).channel_bias(b)?.square()?, s), &b);
            ex.max(eb)
        }
        "gather" => {
            let m = r.random_range(1..=8);
            let q = r.random_range(1..=12);
            let idx: Vec<usize> = (0..q).map(|_| r.random_range(0..m)).collect();
            let x = uniform(&[m], -2.0, 2.0, &mut r);
            fd(move |_, x| wsum(x.gather(idx.clone(), &[q])?.square()?, s), &x)
        }
        "add_const" | "mul_const" | "sub_const" => {
            let shape = shape4(&mut r, 4);
            let x = uniform(&shape, -2.0, 2.0, &mut r);
            let c = uniform(&shape, -2.0, 2.0, &mut r);
            match name {
                "add_const" => fd(move |_, x| wsum(x.add_const(c.clone())?.square()?, s), &x),
                "mul_const" => fd(move |_, x| wsum(x.mul_const(c.clone())?.square()?, s), &x),
                _ => fd(move |_, x| wsum(x.sub_const(c.data())?.square()?, s), &x),
            }
        }
        other => panic!("unknown primitive {other}"),
    }
}

fn res2net_objective(block: &Res2NetBlock, store: &ParamStore, x: &Tensor, seed: u64) -> f64 {
    let tape = Tape::new();
    let fx = Forward::new(&tape, store, Mode::Train);
    let y = block.forward(&fx, tape.constant(x.clone())).unwrap();
    wsum(y, seed).unwrap().item().unwrap()
}

fn with_values(store: &ParamStore, path: &str, vals: &[f64]) -> ParamStore {
    let mut st = store.clone();
    st.get_mut(path).unwrap().data_mut().copy_from_slice(vals);
    st
}

/// Res2Net block: gradients w.r.t. the input and one random trainable tensor.
pub fn res2net_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cin = r.random_range(1..=4);
    let cout = if r.random_bool(0.5) { cin } else { r.random_range(1..=4) };
    let scale = r.random_range(1..=3);
    let width = r.random_range(1..=2);
    let (block, store) = res2net_init(cin, cout, scale, width, seed).unwrap();
    let x = uniform(&[r.random_range(1..=2), cin, r.random_range(3..=4), r.random_range(3..=4)], -1.0, 1.0, &mut r);
    let paths: Vec<String> = store.trainable().map(|(p, _)| p.to_string()).collect();
    let path = paths[r.random_range(0..paths.len())].clone();

    let tape = Tape::new();
    let fx = Forward::new(&tape, &store, Mode::Train);
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = block.forward(&fx, xv).unwrap();
    let g = tape.backward(wsum(y, seed).unwrap()).unwrap();
    let gx = g.get(xv).unwrap().data().to_vec();
    let gp = g.by_name(&path).unwrap().data().to_vec();

    let all_x: Vec<usize> = (0..x.numel()).collect();
    let nx = numeric_grad(x.data(), &all_x, |v| {
        let xt = Tensor::new(x.shape(), v.to_vec(), false).unwrap();
        res2net_objective(&block, &store, &xt, seed)
    });
    let p0 = store.get(&path).unwrap().data().to_vec();
    let all_p: Vec<usize> = (0..p0.len()).collect();
    let np = numeric_grad(&p0, &all_p, |v| res2net_objective(&block, &with_values(&store, &path, v), &x, seed));
    fd_error(&gx, &nx).max(fd_error(&gp, &np))
}

/// Small detector for gradient probes. Head weights are re-drawn at O(1)
/// scale so upstream gradients are not trivially tiny.
pub fn probe_detector(seed: u64) -> DetectorModel {
    let mut r = rng(seed);
    let cfg = DetectorConfig {
        image_size: 64,
        backbone_widths: vec![4, 8, 8],
        res2net_scale: r.random_range(1..=2) * 2,
        ..DetectorConfig::default()
    };
    let mut model = build_detector(cfg, seed).unwrap();
    for l in 0..3 {
        let w = model.params.get_mut(&format!("head.{l}.weight")).unwrap();
        let fresh = uniform(w.shape(), -0.5, 0.5, &mut r);
        w.data_mut().copy_from_slice(fresh.data());
    }
    model
}

pub fn random_gts(r: &mut ChaCha8Rng, count: usize, classes: usize) -> Vec<GroundTruthBox> {
    (0..count).map(|_| random_gt(r, classes)).collect()
}

fn detector_objective(model: &DetectorModel, params: &ParamStore, x: &Tensor, kind: u8, maps: &[AssignmentMap], seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let fx = Forward::new(&tape, params, Mode::Train);
    detector_objective_on(&fx, model, x, kind, maps, seed)?.item()
}

fn detector_objective_on<'t>(
    fx: &Forward<'t>,
    model: &DetectorModel,
    x: &Tensor,
    kind: u8,
    maps: &[AssignmentMap],
    seed: u64,
) -> Result<Var<'t>> {
    let tape = fx.tape();
    let spec = model.config().grid_spec();
    let raw = model.detector.forward(fx, tape.constant(x.clone()))?;
    let mut acc: Option<Var<'t>> = None;
    let mut push = |v: Var<'t>| -> Result<()> {
        acc = Some(match acc {
            Some(a) => a.add(v)?,
            None => v,
        });
        Ok(())
    };
    match kind {
        0 => {
            for (l, v) in raw.levels.iter().enumerate() {
                push(wsum(*v, seed + l as u64)?)?;
            }
        }
        1 => {
            for (v, lv) in raw.levels.iter().zip(&spec.levels) {
                push(decode_level(*v, lv, spec.num_classes)?.w.sum()?)?;
            }
        }
        _ => {
            let decoded = raw
                .levels
                .iter()
                .zip(&spec.levels)
                .map(|(v, lv)| decode_level(*v, lv, spec.num_classes))
                .collect::<Result<Vec<_>>>()?;
            push(yolo_loss(&decoded, maps, &LossConfig::default())?.0)?;
        }
    }
    Ok(acc.expect("three levels"))
}

/// Upper bound on coordinates probed per detector instance.
pub const DETECTOR_PROBES: usize = 300;

/// Full detector (train mode) w.r.t. a random trainable tensor. The
/// objective is a weighted raw sum, the sum of decoded widths, or the loss.
pub fn detector_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = probe_detector(seed);
    let n = r.random_range(1..=2);
    let x = uniform(&[n, 3, 64, 64], 0.0, 1.0, &mut r);
    let kind = (seed % 3) as u8;
    let spec = model.config().grid_spec();
    let maps: Vec<AssignmentMap> = (0..n)
        .map(|_| {
            let c = r.random_range(1..=4);
            assign_targets(&random_gts(&mut r, c, spec.num_classes), &spec).unwrap()
        })
        .collect();
    let paths: Vec<String> = model.params.trainable().filter(|(_, t)| t.numel() <= 300).map(|(p, _)| p.to_string()).collect();
    let path = paths[r.random_range(0..paths.len())].clone();

    let mut coords: Vec<usize> = (0..model.params.get(&path).unwrap().numel()).collect();
    coords.shuffle(&mut r);
    coords.truncate(DETECTOR_PROBES);
    detector_param_error(&model, &path, &x, kind, &maps, seed, &coords)
}

/// Tape gradient vs central differences for the parameter at `path`, at the
/// given coordinates. `kind`: 0 weighted raw sum, 1 sum of decoded widths,
/// 2 loss under `maps`.
pub fn detector_param_error(
    model: &DetectorModel,
    path: &str,
    x: &Tensor,
    kind: u8,
    maps: &[AssignmentMap],
    seed: u64,
    coords: &[usize],
) -> f64 {
    let tape = Tape::new();
    let fx = Forward::new(&tape, &model.params, Mode::Train);
    let p0 = model.params.get(path).unwrap().clone();
    let probe = tape.leaf(p0.clone().with_requires_grad(true));
    fx.bind(path, probe);
    let obj = detector_objective_on(&fx, model, x, kind, maps, seed).unwrap();
    let g = tape.backward(obj).unwrap().get(probe).unwrap().data().to_vec();
    let num = numeric_grad(p0.data(), coords, |v| {
        detector_objective(model, &with_values(&model.params, path, v), x, kind, maps, seed).unwrap()
    });
    let ana: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
    fd_error(&ana, &num)
}

/// Random geometry for loss checks: 1–3 levels, S ≤ 4, B ≤ 3, K ≤ 6.
pub fn random_grid(r: &mut ChaCha8Rng) -> GridSpec {
    let b = r.random_range(1..=3);
    let levels = (0..r.random_range(1..=3))
        .map(|_| LevelSpec {
            grid: r.random_range(1..=4),
            anchors: (0..b).map(|_| (r.random_range(0.05..0.6), r.random_range(0.05..0.6))).collect(),
        })
        .collect();
    GridSpec {
        levels,
        num_classes: r.random_range(1..=6),
    }
}

pub fn random_loss_config(r: &mut ChaCha8Rng, iou_allowed: bool) -> LossConfig {
    LossConfig {
        lambda_coord: r.random_range(0.5..6.0),
        lambda_noobj: r.random_range(0.1..1.0),
        target_confidence: if iou_allowed && r.random_bool(0.5) { TargetConfidence::Iou } else { TargetConfidence::One },
        class_term: if r.random_bool(0.5) { ClassTerm::PerCell } else { ClassTerm::PerSlot },
    }
}

/// Loss w.r.t. the raw predictions of one level (Ĉ = 1, since the IoU
/// target is a constant by design and finite differences would see it move).
pub fn loss_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = random_grid(&mut r);
    let n = r.random_range(1..=2);
    let cfg = random_loss_config(&mut r, false);
    let maps: Vec<AssignmentMap> = (0..n)
        .map(|_| {
            let c = r.random_range(0..=5);
            assign_targets(&random_gts(&mut r, c, spec.num_classes), &spec).unwrap()
        })
        .collect();
    let raws: Vec<Tensor> = spec
        .levels
        .iter()
        .enumerate()
        .map(|(l, lv)| uniform(&[n, spec.channels(l), lv.grid, lv.grid], -2.0, 2.0, &mut r))
        .collect();
    let probe = r.random_range(0..raws.len());
    let point = raws[probe].clone();
    fd(
        move |t, x| {
            let decoded = spec
                .levels
                .iter()
                .enumerate()
                .map(|(l, lv)| {
                    let v = if l == probe { x } else { t.constant(raws[l].clone()) };
                    decode_level(v, lv, spec.num_classes)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(yolo_loss(&decoded, &maps, &cfg)?.0)
        },
        &point,
    )
}

/// Criterion 1: one tally per family.
pub fn gradient_suite(instances: u64) -> Vec<(String, Tally)> {
    let mut out = Vec::new();
    for name in PRIMITIVES {
        let mut t = Tally::default();
        for i in 0..instances {
            let seed = 1000 + i;
            t.cases += 1;
            t.err(primitive_case(name, seed), FD_TOL, || format!("{name} seed {seed}"));
        }
        out.push((name.to_string(), t));
    }
    type Case = fn(u64) -> f64;
    let families: [(&str, Case); 3] = [
        ("res2net_block", res2net_grad_case),
        ("detector", detector_grad_case),
        ("loss", loss_grad_case),
    ];
    for (name, f) in families {
        let mut t = Tally::default();
        for i in 0..instances {
            let seed = 2000 + i;
            t.cases += 1;
            t.err(f(seed), FD_TOL, || format!("{name} seed {seed}"));
        }
        out.push((name.to_string(), t));
    }
    out
}

// ------------------------------------------------------------- loss oracle

/// The oracle's responsibility map in the implementation's slot layout.
fn slots_of(map: &BTreeMap<(usize, usize, usize), usize>, s: usize) -> BTreeMap<Slot, usize> {
    map.iter()
        .map(|(&(b, i, j), &g)| (Slot { cell: i * s + j, anchor: b }, g))
        .collect()
}

/// Criterion 2: structured loss vs the flat per-cell summation.
pub fn loss_oracle_suite(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut r = rng(3000 + seed);
        let spec = random_grid(&mut r);
        let n = r.random_range(1..=2);
        let cfg = random_loss_config(&mut r, true);
        let gts: Vec<Vec<GroundTruthBox>> = (0..n)
            .map(|_| {
                let c = r.random_range(0..=6);
                random_gts(&mut r, c, spec.num_classes)
            })
            .collect();
        let oracle_levels: Vec<(usize, Vec<(f64, f64)>)> = spec.levels.iter().map(|l| (l.grid, l.anchors.clone())).collect();
        let maps: Vec<AssignmentMap> = gts.iter().map(|g| assign_targets(g, &spec).unwrap()).collect();
        let resp: Vec<_> = gts.iter().map(|g| assign_oracle(g, &oracle_levels)).collect();
        for (m, (o, dropped)) in maps.iter().zip(&resp) {
            for (l, lv) in m.levels.iter().enumerate() {
                let got: BTreeMap<Slot, usize> = lv.obj.iter().map(|(s, tg)| (*s, tg.gt_index)).collect();
                t.check(got == slots_of(&o[l], lv.grid), || format!("seed {seed}: assignment differs at level {l}"));
            }
            t.check(&m.dropped == dropped, || format!("seed {seed}: dropped set differs"));
        }
        let raws: Vec<Tensor> = spec
            .levels
            .iter()
            .enumerate()
            .map(|(l, lv)| uniform(&[n, spec.channels(l), lv.grid, lv.grid], -3.0, 3.0, &mut r))
            .collect();
        let tape = Tape::new();
        let decoded = spec
            .levels
            .iter()
            .zip(&raws)
            .map(|(lv, x)| decode_level(tape.constant(x.clone()), lv, spec.num_classes).unwrap())
            .collect::<Vec<_>>();
        let (total, parts) = yolo_loss(&decoded, &maps, &cfg).unwrap();
        let mut want = [0.0; 6];
        for (l, lv) in spec.levels.iter().enumerate() {
            let nd = Nd::from_tensor(&raws[l]);
            for img in 0..n {
                let o = loss_oracle(
                    &nd,
                    img,
                    &lv.anchors,
                    spec.num_classes,
                    &gts[img],
                    &resp[img].0[l],
                    cfg.lambda_coord,
                    cfg.lambda_noobj,
                    cfg.target_confidence == TargetConfidence::Iou,
                    cfg.class_term == ClassTerm::PerCell,
                );
                for (w, v) in want.iter_mut().zip([o.xy, o.wh, o.obj, o.noobj, o.cls, o.total]) {
                    *w += v;
                }
            }
        }
        let got = [parts.coord_xy, parts.coord_wh, parts.obj, parts.noobj, parts.cls, total.item().unwrap()];
        t.cases += 1;
        t.err(max_rel_err(&got, &want), ORACLE_TOL, || format!("seed {seed}: {got:?} vs {want:?}"));
    }
    t
}

// ----------------------------------------------------------------- res2net

fn run_block(block: &Res2NetBlock, store: &ParamStore, x: &Tensor) -> (Vec<Tensor>, Tensor) {
    let tape = Tape::new();
    let fx = Forward::new(&tape, store, Mode::Train);
    let (ys, out) = block.forward_splits(&fx, tape.constant(x.clone())).unwrap();
    (ys.iter().map(|v| (*v.value()).clone()).collect(), (*out.value()).clone())
}

/// Criterion 3: zero-weight identity, s = 1 degeneration, cascade locality,
/// and agreement with the step-by-step oracle.
pub fn res2net_suite(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut r = rng(4000 + seed);
        let c = r.random_range(1..=6);
        let scale = r.random_range(2..=4);
        let width = r.random_range(1..=3);
        let x = uniform(&[r.random_range(1..=2), c, r.random_range(2..=5), r.random_range(2..=5)], -1.0, 1.0, &mut r);
        t.cases += 1;

        let (block, mut store) = res2net_init(c, c, scale, width, seed).unwrap();
        for p in block.conv_weight_paths() {
            store.get_mut(&p).unwrap().data_mut().fill(0.0);
        }
        let (_, out) = run_block(&block, &store, &x);
        t.check(out.data() == x.data(), || format!("seed {seed}: zero-weight block is not the identity"));

        let cout = r.random_range(1..=6);
        let (one, store1) = res2net_init(c, cout, 1, width, seed).unwrap();
        let (ys, out) = run_block(&one, &store1, &x);
        let tape = Tape::new();
        let fx = Forward::new(&tape, &store1, Mode::Train);
        let xv = tape.constant(x.clone());
        let u = one.reduce.forward(&fx, xv).unwrap();
        let body = one.expand.forward(&fx, u).unwrap();
        let short = match &one.projection {
            Some(p) => p.forward(&fx, xv).unwrap(),
            None => xv,
        };
        let plain = short.add(body).unwrap();
        t.check(ys.len() == 1 && ys[0].data() == u.value().data(), || format!("seed {seed}: s=1 split is not the reduced input"));
        t.check(out.data() == plain.value().data(), || format!("seed {seed}: s=1 block is not reduce→expand + shortcut"));

        let (block, store) = res2net_init(c, cout, scale, width, seed + 77).unwrap();
        let (ys, out) = run_block(&block, &store, &x);
        let (oys, oout) = res2net_oracle(&block, &store, &Nd::from_tensor(&x));
        let mut e = max_rel_err(out.data(), &oout.data);
        for (a, b) in ys.iter().zip(&oys) {
            e = e.max(max_rel_err(a.data(), &b.data));
        }
        t.err(e, ORACLE_TOL, || format!("seed {seed}: oracle mismatch"));

        let i = r.random_range(1..scale);
        let path = format!("{}.group.{i}.conv.weight", block.prefix);
        let zeroed = with_values(&store, &path, &vec![0.0; store.get(&path).unwrap().numel()]);
        let (zys, _) = run_block(&block, &zeroed, &x);
        for j in 0..scale {
            let same = zys[j].data() == ys[j].data();
            t.check(same == (j < i), || format!("seed {seed}: zeroing K{i} {} split {j}", if same { "left unchanged" } else { "changed" }));
        }
    }
    t
}

// ---------------------------------------------------------- nms + matching

/// Criterion 4: NMS and greedy matching vs quadratic and enumerative oracles.
pub fn nms_matching_suite(instances: u64) -> Tally {
    let mut t = Tally::default();
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let k = r.random_range(1..=3);
        let total = r.random_range(0..=50);
        let mut cands: Vec<Detection> = Vec::with_capacity(total);
        while cands.len() < total {
            if !cands.is_empty() && r.random_bool(0.5) {
                let base = cands[r.random_range(0..cands.len())];
                let g = GroundTruthBox { bbox: base.bbox, class_id: base.class_id };
                let mut d = near(&mut r, &g, k);
                d.score = (r.random_range(1..20u32) as f64) / 20.0;
                cands.push(d);
            } else {
                cands.push(random_det(&mut r, k));
            }
        }
        let cfg = NmsConfig {
            conf_threshold: [0.0, 0.1, 0.3][r.random_range(0..3)],
            iou_threshold: r.random_range(0.2..0.8),
            max_detections: r.random_range(1..=60),
        };
        t.cases += 1;
        let got = nms(&cands, &cfg);
        let want = nms_oracle(&cands, cfg.conf_threshold, cfg.iou_threshold, cfg.max_detections);
        t.check(got == want, || format!("seed {seed}: nms kept {} vs oracle {}", got.len(), want.len()));

        let ng = r.random_range(0..=total.min(25));
        let gts: Vec<GroundTruthBox> = (0..ng).map(|_| random_gt(&mut r, k)).collect();
        let nd = total - ng;
        let dets: Vec<Detection> = (0..nd)
            .map(|_| {
                if !gts.is_empty() && r.random_bool(0.7) {
                    let g = gts[r.random_range(0..gts.len())];
                    near(&mut r, &g, k)
                } else {
                    random_det(&mut r, k)
                }
            })
            .collect();
        let sorted: Vec<Detection> = rank_order(&dets).into_iter().map(|i| dets[i]).collect();
        let thr = [0.5, 0.75, r.random_range(0.1..0.9)][r.random_range(0..3)];
        let m = match_detections(&sorted, &gts, thr);
        let scan = match_oracle(&sorted, &gts, thr);
        let brute = match_enumerate(&sorted, &gts, thr);
        t.check(m.matched_gt == scan, || format!("seed {seed}: matching differs from the scan oracle"));
        t.check(m.matched_gt == brute, || format!("seed {seed}: matching differs from enumeration"));
        let tp = brute.iter().flatten().count();
        t.check(
            m.counts == ConfusionCounts { tp, fp: nd - tp, fn_: ng - tp, tn: 0 },
            || format!("seed {seed}: confusion counts {:?}", m.counts),
        );
    }
    t
}

// ----------------------------------------------------------------- metrics

/// Criterion 5: exhaustive P/R/F1 over counts ≤ `max_count`, AP vs dense
/// integration, and F1 consistency of evaluation reports.
pub fn metrics_suite(max_count: usize, ap_instances: u64) -> Tally {
    let mut t = Tally::default();
    for tp in 0..=max_count {
        for fp in 0..=max_count {
            for fn_ in 0..=max_count {
                let (p, rc, f) = precision_recall_f1(&ConfusionCounts { tp, fp, fn_, tn: 0 });
                let wp = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let wr = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                let wf = if wp + wr == 0.0 { 0.0 } else { 2.0 * wp * wr / (wp + wr) };
                let direct = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
                t.cases += 1;
                t.check(p == wp && rc == wr && f == wf, || format!("counts ({tp},{fp},{fn_}): {p},{rc},{f}"));
                t.err(rel_err(f, direct), ORACLE_TOL, || format!("counts ({tp},{fp},{fn_}): F1 vs 2TP/(2TP+FP+FN)"));
            }
        }
    }
    for seed in 0..ap_instances {
        let mut r = rng(6000 + seed);
        let n = r.random_range(0..=40);
        let levels = r.random_range(1..=20u32);
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| ((r.random_range(0..=levels) as f64) / levels as f64, r.random_bool(0.6)))
            .collect();
        let hits = scored.iter().filter(|s| s.1).count();
        let total_gt = (hits + r.random_range(0..=5)).max(1);
        t.cases += 1;
        let ap = average_precision(&pr_curve(&scored, total_gt));
        let want = ap_dense(&scored, total_gt);
        t.err((ap - want).abs(), 1e-9, || format!("ap seed {seed}: {ap} vs {want}"));
    }
    for seed in 0..ap_instances {
        let mut r = rng(7000 + seed);
        let images = r.random_range(1..=4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let g: Vec<GroundTruthBox> = (0..r.random_range(0..=6)).map(|_| random_gt(&mut r, 6)).collect();
            let mut d = Vec::new();
            for x in &g {
                if r.random_bool(0.8) {
                    d.push(near(&mut r, x, 6));
                }
            }
            d.extend((0..r.random_range(0..=4)).map(|_| random_det(&mut r, 6)));
            dets.push(d);
            gts.push(g);
        }
        let cfg = EvalConfig {
            conf_threshold: r.random_range(0.0..0.9),
            ..EvalConfig::default()
        };
        let rep = evaluate(&dets, &gts, &cfg).unwrap();
        t.cases += 1;
        t.check(rep.f1 == f1_score(rep.precision, rep.recall), || format!("eval seed {seed}: F1 {} from P {} R {}", rep.f1, rep.precision, rep.recall));
        for c in &rep.classes {
            t.check(c.f1 == f1_score(c.precision, c.recall), || format!("eval seed {seed}: class {} F1", c.name));
        }
    }
    t
}

/// Detection whose box is the given one, for hand-built cases.
pub fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(cx, cy, w, h),
        class_id,
        score,
    }
}
