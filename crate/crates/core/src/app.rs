//! Train, evaluate, check, benchmark and generate workflows.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::check::{self, CheckOptions, SuiteResult};
use crate::config::Config;
use crate::dataset::{list_samples, prepare, read_dataset, write_dataset, Prepared, SampleRecord};
use crate::model::{HandModel, Stage};
use crate::points::denormalize;
use crate::synth::{generate_synthetic, SyntheticHandConfig};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{
    log_line, mean_keypoint_error, train_step, AdamConfig, AugmentationConfig, EvalReport, OptimizerState,
};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";

/// Point-sampling seed for a sample; `epoch` is set when points are redrawn
/// every epoch.
pub fn point_seed(seed: u64, index: usize, epoch: Option<usize>) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [index as u64, epoch.map_or(u64::MAX, |e| e as u64)] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    h
}

/// A freshly initialized model; parameters depend only on `cfg.seed`.
pub fn build_model(cfg: &Config) -> Result<(HandModel, ParamStore)> {
    let mut store = ParamStore::new(cfg.seed);
    let model = HandModel::new(&mut store, cfg)?;
    Ok((model, store))
}

/// Final-stage predictions in camera-frame millimeters, using the fixed
/// per-sample point draw and no augmentation.
pub fn predict_mm(model: &HandModel, store: &ParamStore, cfg: &Config, samples: &[SampleRecord]) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = prepare(s, cfg, point_seed(cfg.seed, i, None), None)?;
            let mut g = model.graph();
            let pred = model.forward(&mut g, store, &p.item.input)?;
            Ok(denormalize(g.value(pred.last()), p.center).map(|v| v * 1000.0))
        })
        .collect()
}

pub fn evaluate(model: &HandModel, store: &ParamStore, cfg: &Config, samples: &[SampleRecord]) -> Result<EvalReport> {
    let pred = predict_mm(model, store, cfg, samples)?;
    let gt: Vec<Tensor> = samples.iter().map(|s| s.joints.map(|v| v * 1000.0)).collect();
    mean_keypoint_error(&pred, &gt)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: f64,
    /// MKE on the training samples after the last step.
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Trains on in-memory samples and writes the checkpoint, config, log and
/// training report under `out_dir`.
pub fn train_on(cfg: &Config, samples: &[SampleRecord], out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (model, mut store) = build_model(cfg)?;
    let mut opt = OptimizerState::new(&store, AdamConfig::from_config(cfg));
    let aug = if cfg.augment {
        let a = AugmentationConfig::from_config(cfg);
        a.validate()?;
        Some(a)
    } else {
        None
    };
    let fixed: Option<Vec<Prepared>> = if aug.is_none() && !cfg.resample_points {
        Some(
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| prepare(s, cfg, point_seed(cfg.seed, i, None), None))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let log_path = out_dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let start = Instant::now();
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x51_7cc1_b727_220a)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| match &fixed {
                    Some(f) => Ok(f[i].item.clone()),
                    None => {
                        let ps = point_seed(cfg.seed, i, cfg.resample_points.then_some(epoch));
                        let t = aug.as_ref().map(|a| a.draw_for(epoch, i));
                        Ok(prepare(&samples[i], cfg, ps, t.as_ref())?.item)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = train_step(&model, &mut store, &mut opt, &batch, cfg.loss_mode)?;
            step += 1;
            final_loss = stats.loss;
            writeln!(log, "{}", log_line(epoch, step, stats.loss, opt.lr, start.elapsed().as_millis()))
                .map_err(io_err(&log_path))?;
            if cfg.max_steps > 0 && step as usize >= cfg.max_steps {
                break 'epochs;
            }
        }
    }

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    store.save(&checkpoint)?;
    let cfg_path = out_dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;
    let report = evaluate(&model, &store, cfg, samples)?;
    let report_path = out_dir.join(TRAIN_REPORT_FILE);
    let text = format!("steps: {step}\nfinal_loss: {final_loss:?}\n{}", report.to_text());
    std::fs::write(&report_path, text).map_err(io_err(&report_path))?;
    Ok(TrainOutcome {
        steps: step,
        final_loss,
        report,
        checkpoint,
    })
}

fn synth_config(cfg: &Config, seed: u64) -> SyntheticHandConfig {
    SyntheticHandConfig {
        seed,
        ..SyntheticHandConfig::from_config(cfg)
    }
}

fn has_samples(dir: &Path) -> bool {
    list_samples(dir).is_ok()
}

/// Reads a dataset directory, first filling it with `n` synthetic samples
/// if it holds none.
pub fn load_or_generate(cfg: &Config, dir: &Path, n: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if !has_samples(dir) {
        write_dataset(dir, &generate_synthetic(&synth_config(cfg, seed), n)?)?;
    }
    read_dataset(dir)
}

pub fn cmd_train(cfg: &Config) -> Result<TrainOutcome> {
    let samples = load_or_generate(cfg, Path::new(&cfg.train_dir), cfg.train_samples, cfg.seed)?;
    train_on(cfg, &samples, Path::new(&cfg.out_dir))
}

/// Evaluates a checkpoint on a dataset directory; writes `eval_report.txt`,
/// `eval_errors.csv` and, when asked, `joints/<id>.txt` under `out_dir`.
pub fn cmd_eval(cfg: &Config, checkpoint: &Path, data_dir: &Path, out_dir: &Path, dump_joints: bool) -> Result<EvalReport> {
    let samples = read_dataset(data_dir)?;
    let (model, mut store) = build_model(cfg)?;
    store.load(checkpoint)?;
    let pred = predict_mm(&model, &store, cfg, &samples)?;
    let gt: Vec<Tensor> = samples.iter().map(|s| s.joints.map(|v| v * 1000.0)).collect();
    let report = mean_keypoint_error(&pred, &gt)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let p = out_dir.join("eval_report.txt");
    std::fs::write(&p, report.to_text()).map_err(io_err(&p))?;
    let p = out_dir.join("eval_errors.csv");
    std::fs::write(&p, report.to_csv(&ids)).map_err(io_err(&p))?;
    if dump_joints {
        let dir = out_dir.join("joints");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (id, t) in ids.iter().zip(&pred) {
            let mut text = String::new();
            for r in 0..t.rows() {
                let v = t.row(r);
                let _ = writeln!(text, "{:?} {:?} {:?}", v[0] / 1000.0, v[1] / 1000.0, v[2] / 1000.0);
            }
            let p = dir.join(format!("{id}.txt"));
            std::fs::write(&p, text).map_err(io_err(&p))?;
        }
    }
    Ok(report)
}

pub fn cmd_check(opts: &CheckOptions) -> Result<Vec<SuiteResult>> {
    check::run_all(opts)
}

#[derive(Clone, Debug)]
pub struct StageTiming {
    pub stage: String,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub frames: usize,
    pub rows: Vec<StageTiming>,
    /// Sum of the final-stage coordinates of the first frame.
    pub checksum: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("frames: {}\nchecksum: {:?}\n", self.frames, self.checksum);
        for r in &self.rows {
            let _ = writeln!(s, "{}: median_ms {:.3} p95_ms {:.3}", r.stage, r.median_ms, r.p95_ms);
        }
        s
    }

    pub fn row(&self, stage: &str) -> Option<&StageTiming> {
        self.rows.iter().find(|r| r.stage == stage)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Per-stage forward timing on one synthetic frame; weights are random
/// unless a checkpoint is given.
pub fn cmd_bench(cfg: &Config, checkpoint: Option<&Path>) -> Result<BenchReport> {
    let (model, mut store) = build_model(cfg)?;
    if let Some(p) = checkpoint {
        store.load(p)?;
    }
    let sample = generate_synthetic(&synth_config(cfg, cfg.seed), 1)?.remove(0);
    let input = prepare(&sample, cfg, point_seed(cfg.seed, 0, None), None)?.item.input;
    let frames = cfg.bench_frames.max(1);
    let mut names: Vec<String> = Vec::new();
    let mut times: Vec<Vec<f64>> = Vec::new();
    let mut checksum = 0.0;
    for f in 0..frames {
        let mut g = model.graph();
        let mut last = Instant::now();
        let mut k = 0;
        let pred = model.forward_with(&mut g, &store, &input, |stage: Stage| {
            let ms = last.elapsed().as_secs_f64() * 1000.0;
            last = Instant::now();
            if f == 0 {
                names.push(stage.to_string());
                times.push(Vec::with_capacity(frames));
            }
            times[k].push(ms);
            k += 1;
        })?;
        if f == 0 {
            checksum = g.value(pred.last()).sum();
        }
    }
    let rows = names
        .into_iter()
        .zip(times)
        .map(|(stage, mut t)| {
            t.sort_by(f64::total_cmp);
            StageTiming {
                stage,
                median_ms: percentile(&t, 0.5),
                p95_ms: percentile(&t, 0.95),
            }
        })
        .collect();
    Ok(BenchReport { frames, rows, checksum })
}

/// Writes `train_samples` to `train_dir` (seed `cfg.seed`) and
/// `val_samples` to `val_dir` (seed `cfg.seed + 1`).
pub fn cmd_gen(cfg: &Config) -> Result<(usize, usize)> {
    let train = generate_synthetic(&synth_config(cfg, cfg.seed), cfg.train_samples)?;
    write_dataset(Path::new(&cfg.train_dir), &train)?;
    let val = generate_synthetic(&synth_config(cfg, cfg.seed.wrapping_add(1)), cfg.val_samples)?;
    write_dataset(Path::new(&cfg.val_dir), &val)?;
    Ok((train.len(), val.len()))
}
