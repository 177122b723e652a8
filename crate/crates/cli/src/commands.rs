use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdd_core::data::{export_dataset, load_dataset, load_image, save_png, split_dataset, synth_dataset, DatasetRecord, PCB_CLASSES};
use pdd_core::detector::{build_detector, DetectorModel};
use pdd_core::metrics::{curve_csv, curve_svg, evaluate, fps_bench, BenchReport, EvalConfig, EvalReport};
use pdd_core::postprocess::{write_dump, Detection, NmsConfig};
use pdd_core::train::{collate, fit, Sample, Sgd, StepRecord};
use pdd_core::{Error, Result};

use crate::config::{EvalSplit, RunConfig};
use crate::render::annotate;

/// Candidate threshold used while collecting detections for AP.
pub const EVAL_CANDIDATE_CONF: f64 = 0.001;
const EVAL_BATCH: usize = 8;

/// Independent seeds for model init, data generation and shuffling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn from_root(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng.next_u64()
        };
        Self {
            model: stream(1),
            data: stream(2),
            shuffle: stream(3),
        }
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.logs().join("train_log.csv")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Records of the dataset (synthetic or on disk), split by the configured ratios.
pub fn load_records(cfg: &RunConfig, image_size: usize) -> Result<[Vec<DatasetRecord>; 3]> {
    let seeds = Seeds::from_root(cfg.seed);
    let records = if cfg.synthetic {
        let synth = pdd_core::data::SynthConfig {
            image_size,
            ..cfg.synth.clone()
        };
        synth_dataset(cfg.synth_images, seeds.data, &synth)?
    } else if let Some(dir) = &cfg.data_dir {
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
        }
        load_dataset(dir, image_size)?
    } else {
        return Err(Error::Config("no dataset: pass --synthetic or --data <dir>".into()));
    };
    if records.is_empty() {
        return Err(Error::Config("the dataset is empty".into()));
    }
    let (a, b, c) = split_dataset(&records, cfg.split, seeds.data)?;
    Ok([a, b, c])
}

pub struct TrainOutcome {
    pub model: DetectorModel,
    pub log: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

/// Trains from scratch (or from `checkpoints/last.ckpt` with `resume`) and
/// writes the log and checkpoints under the output directory.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let layout = Layout::new(&cfg.output_dir);
    let seeds = Seeds::from_root(cfg.seed);
    let mut model = if resume {
        let m = DetectorModel::load(&layout.last_checkpoint())?;
        cfg.check_against(m.config())?;
        m
    } else {
        build_detector(cfg.detector.clone(), seeds.model)?
    };
    let [train, _, _] = load_records(cfg, model.config().image_size)?;
    if train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let samples: Vec<Sample> = train.iter().map(DatasetRecord::to_sample).collect();
    for d in [layout.checkpoints(), layout.logs()] {
        mkdir(&d)?;
    }
    let hyper = pdd_core::train::TrainHyper { loss: cfg.loss, ..cfg.hyper };
    let every = cfg.checkpoint_every;
    let mut opt = Sgd::new();
    let mut log_text = String::new();
    let result = fit(&mut model, &samples, &hyper, seeds.shuffle, &mut opt, |rec, m| {
        let _ = writeln!(log_text, "{}", rec.csv_line());
        if every > 0 && rec.step % every == 0 {
            m.save(&layout.checkpoints().join(format!("step_{:06}.ckpt", rec.step)))?;
            m.save(&layout.last_checkpoint())?;
        }
        Ok(())
    });
    write(&layout.train_log(), &format!("{}\n{log_text}", pdd_core::train::TRAIN_LOG_HEADER))?;
    let log = match result {
        Ok(log) => log,
        Err(e @ Error::NonFiniteLoss(_)) => {
            let keep = layout.checkpoints().join("last_good.ckpt");
            model.save(&keep)?;
            return Err(Error::NonFiniteLoss(format!(
                "training aborted ({e}); last good parameters saved to {}",
                keep.display()
            )));
        }
        Err(e) => return Err(e),
    };
    model.save(&layout.final_checkpoint())?;
    model.save(&layout.last_checkpoint())?;
    Ok(TrainOutcome {
        model,
        log,
        final_checkpoint: layout.final_checkpoint(),
    })
}

/// Batched eval-mode detection.
pub fn run_detection(model: &DetectorModel, records: &[DatasetRecord], nms: &NmsConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let samples: Vec<Sample> = chunk.iter().map(DatasetRecord::to_sample).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (x, _) = collate(&refs)?;
        out.extend(model.detect(&x, nms)?);
    }
    Ok(out)
}

pub fn load_checked(cfg: &RunConfig, checkpoint: &Path) -> Result<DetectorModel> {
    let model = DetectorModel::load(checkpoint)?;
    cfg.check_against(model.config())?;
    Ok(model)
}

/// Evaluates a checkpoint on the configured split and writes the report and curves.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let model = load_checked(cfg, checkpoint)?;
    let [train, val, test] = load_records(cfg, model.config().image_size)?;
    let records = match cfg.eval_split {
        EvalSplit::Train => train,
        EvalSplit::Val => val,
        EvalSplit::Test => test,
    };
    if records.is_empty() {
        return Err(Error::Config(format!("the {:?} split is empty", cfg.eval_split).to_lowercase()));
    }
    let candidates = NmsConfig {
        conf_threshold: EVAL_CANDIDATE_CONF,
        ..cfg.nms
    };
    let dets = run_detection(&model, &records, &candidates)?;
    let gts: Vec<_> = records.iter().map(|r| r.boxes.clone()).collect();
    let report = evaluate(
        &dets,
        &gts,
        &EvalConfig {
            conf_threshold: cfg.nms.conf_threshold,
            ..Default::default()
        },
    )?;
    let layout = Layout::new(&cfg.output_dir);
    mkdir(&layout.reports())?;
    mkdir(&layout.curves())?;
    write(&layout.reports().join("eval_report.txt"), &report.render())?;
    let mut curves = vec![("all".to_string(), &report.curve)];
    curves.extend(report.classes.iter().filter(|c| c.num_gt > 0).map(|c| (c.name.clone(), &c.curve)));
    for (name, curve) in curves {
        write(&layout.curves().join(format!("{name}.csv")), &curve_csv(curve))?;
        write(&layout.curves().join(format!("{name}.svg")), &curve_svg(curve, &name))?;
    }
    Ok(report)
}

/// Runs detection on image files and returns the dump text, also written to
/// `reports/detections.csv`. With `render`, annotated copies go to `reports/annotated/`.
pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], render: bool) -> Result<String> {
    if images.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    if let Some(p) = images.iter().find(|p| !p.is_file()) {
        return Err(Error::Config(format!("image not found: {}", p.display())));
    }
    let model = load_checked(cfg, checkpoint)?;
    let size = model.config().image_size;
    let layout = Layout::new(&cfg.output_dir);
    mkdir(&layout.reports())?;
    let mut records = Vec::with_capacity(images.len());
    for path in images {
        records.push((
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
            load_image(path, size)?,
        ));
    }
    let mut all: Vec<(String, Detection)> = Vec::new();
    for (id, px) in &records {
        let x = pdd_core::tensor::Tensor::new(&[1, 3, size, size], px.to_tensor().into_data(), false)?;
        let dets = model.detect(&x, &cfg.nms)?.remove(0);
        if render {
            let dir = layout.reports().join("annotated");
            mkdir(&dir)?;
            save_png(&annotate(px, &dets, &PCB_CLASSES), &dir.join(format!("{id}.png")))?;
        }
        all.extend(dets.into_iter().map(|d| (id.clone(), d)));
    }
    let dump = write_dump(all.iter().map(|(id, d)| (id.as_str(), d)), &PCB_CLASSES);
    write(&layout.reports().join("detections.csv"), &dump)?;
    Ok(dump)
}

/// Benchmarks a checkpoint, or a freshly initialized model when none is given,
/// on `synth_images` synthetic boards.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>, warmup: usize, runs: usize) -> Result<BenchReport> {
    let seeds = Seeds::from_root(cfg.seed);
    let model = match checkpoint {
        Some(p) => load_checked(cfg, p)?,
        None => build_detector(cfg.detector.clone(), seeds.model)?,
    };
    if cfg.synth_images == 0 {
        return Err(Error::Config("benchmark needs at least one image".into()));
    }
    let synth = pdd_core::data::SynthConfig {
        image_size: model.config().image_size,
        ..cfg.synth.clone()
    };
    let images: Vec<_> = synth_dataset(cfg.synth_images, seeds.data, &synth)?
        .into_iter()
        .map(|r| r.pixels)
        .collect();
    let report = fps_bench(&model, &images, warmup, runs, &cfg.nms)?;
    let layout = Layout::new(&cfg.output_dir);
    mkdir(&layout.reports())?;
    write(
        &layout.reports().join(format!("bench_{}.txt", model.config().image_size)),
        &report.render(),
    )?;
    Ok(report)
}

/// Writes `synth_images` synthetic boards as an images/ + annotations/ dataset.
pub fn cmd_synth(cfg: &RunConfig) -> Result<usize> {
    let seeds = Seeds::from_root(cfg.seed);
    let records = synth_dataset(cfg.synth_images, seeds.data, &cfg.synth)?;
    export_dataset(&records, &cfg.output_dir)?;
    Ok(records.len())
}
