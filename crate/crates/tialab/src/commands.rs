//! Experiment commands. Each writes its tables under an output directory
//! and also returns them so tests can inspect results without re-parsing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use tialab_core::adapters::count_params;
use tialab_core::backbone::{EncodeMode, Representation};
use tialab_core::data::{generate_range, VideoSample};
use tialab_core::eval::{mean_ap, MapResult};
use tialab_core::memory::{compare_strategies, estimate, MemoryEstimate, MemoryShape, Precision, Strategy};
use tialab_core::pipeline::{ground_truth, measure_retained, predict_video, Detector, EpochStats, Trainer};

use crate::config::{RunConfig, Split};
use crate::dataset;
use crate::error::{io_err, Error, Result};
use crate::tables::{fmt6, membench_table, proposals_table, results_table, ProposalRow, Table};
use crate::weights;

pub const CONFIG_ECHO: &str = "config.resolved";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESULTS: &str = "results.csv";
pub const TRAIN_RESULTS: &str = "results_train.csv";
pub const PROPOSALS: &str = "proposals.csv";
pub const MEMBENCH: &str = "membench.csv";
pub const MEMBENCH_MEASURED: &str = "membench_measured.csv";
pub const ABLATION: &str = "ablation.csv";

pub fn write_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join(CONFIG_ECHO);
    fs::write(&p, cfg.echo()).map_err(io_err(&p))
}

/// Train and test videos: loaded from `data.path` (`train/`, `test/`) or
/// generated, test videos continuing the training indices.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    let classes = cfg.data.spec.classes;
    match &cfg.data.path {
        Some(p) => Ok((dataset::load(&p.join("train"), classes)?, dataset::load(&p.join("test"), classes)?)),
        None => {
            let spec = cfg.data_spec();
            let n = cfg.data.train_videos;
            Ok((generate_range(&spec, 0, n)?, generate_range(&spec, n, cfg.data.test_videos)?))
        }
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.data_spec();
    let n = cfg.data.train_videos;
    dataset::save(&out.join("train"), &generate_range(&spec, 0, n)?)?;
    dataset::save(&out.join("test"), &generate_range(&spec, n, cfg.data.test_videos)?)?;
    info!("wrote {} train and {} test videos to {}", n, cfg.data.test_videos, out.display());
    Ok(())
}

/// Proposals of `model` on `videos` in video seconds, plus their mAP.
pub fn evaluate_split(model: &Detector, videos: &[VideoSample], cfg: &RunConfig) -> Result<(MapResult, Vec<ProposalRow>)> {
    if videos.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let infer = cfg.inference();
    let mut preds = Vec::new();
    let mut rows = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        for p in predict_video(model, v, &infer)? {
            preds.push(tialab_core::eval::Prediction {
                video: i,
                t_start: p.t_start,
                t_end: p.t_end,
                class: p.class,
                score: p.score,
            });
            rows.push(ProposalRow {
                video_id: v.id.clone(),
                t_start: p.t_start,
                t_end: p.t_end,
                class: p.class,
                score: p.score,
            });
        }
    }
    let r = mean_ap(&preds, &ground_truth(videos), model.config.head.classes, &cfg.eval.metric)?;
    Ok((r, rows))
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub stats: EpochStats,
    pub seconds: f64,
    pub train_map: Option<f64>,
    pub test_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochRow>,
    pub train: MapResult,
    pub test: Option<MapResult>,
    pub trainable_params: usize,
    pub seconds: f64,
    pub model: Detector,
}

impl TrainReport {
    /// First epoch whose logged train mAP reaches `target`.
    pub fn epoch_reaching(&self, target: f64) -> Option<usize> {
        self.log
            .iter()
            .find(|r| r.train_map.is_some_and(|m| m >= target))
            .map(|r| r.stats.epoch)
    }
}

fn log_table(rows: &[EpochRow]) -> Table {
    let mut t = Table::new(["epoch", "loss", "lr", "seconds", "train_mAP", "test_mAP"]);
    let opt = |x: Option<f64>| x.map_or_else(String::new, fmt6);
    for r in rows {
        t.push([
            r.stats.epoch.to_string(),
            format!("{:.8}", r.stats.loss),
            format!("{:e}", r.stats.lr),
            format!("{:.3}", r.seconds),
            opt(r.train_map),
            opt(r.test_map),
        ]);
    }
    t
}

/// Trains on the configured data, evaluating every `eval_every` epochs and
/// after the last one, then saves the checkpoint and tables under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let (train_set, test_set) = load_splits(cfg)?;
    let report = train_on(cfg, &train_set, &test_set)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    log_table(&report.log).write(&out.join(TRAIN_LOG))?;
    save_model(&report.model, out)?;
    results_table(&report.train).write(&out.join(TRAIN_RESULTS))?;
    if let Some(t) = &report.test {
        results_table(t).write(&out.join(RESULTS))?;
        let (_, rows) = evaluate_split(&report.model, &test_set, cfg)?;
        proposals_table(&rows).write(&out.join(PROPOSALS))?;
    }
    Ok(report)
}

/// The training loop without any file output.
pub fn train_on(cfg: &RunConfig, train_set: &[VideoSample], test_set: &[VideoSample]) -> Result<TrainReport> {
    let t0 = Instant::now();
    let mut model = Detector::new(&cfg.model(), cfg.seed)?;
    let tc = cfg.train_config();
    let mut trainer = Trainer::new(&model, train_set, &tc)?;
    info!(
        "training {} on {} videos, {} trainable parameters",
        cfg.mode.name(),
        train_set.len(),
        model.trainable_params()
    );
    let mut log = Vec::new();
    let mut last = None;
    for e in 1..=tc.epochs {
        let stats = trainer.run_epoch(&mut model)?;
        let due = e == tc.epochs || (cfg.eval_every > 0 && e % cfg.eval_every == 0);
        let mut row = EpochRow {
            stats,
            seconds: t0.elapsed().as_secs_f64(),
            train_map: None,
            test_map: None,
        };
        if due {
            let tr = evaluate_split(&model, train_set, cfg)?.0;
            let te = if test_set.is_empty() {
                None
            } else {
                Some(evaluate_split(&model, test_set, cfg)?.0)
            };
            row.train_map = Some(tr.average);
            row.test_map = te.as_ref().map(|r| r.average);
            last = Some((tr, te));
        }
        info!(
            "epoch {} loss {:.4} lr {:.2e}{}",
            e,
            stats.loss,
            stats.lr,
            row.train_map.map_or(String::new(), |m| format!(" train mAP {m:.4}"))
        );
        row.seconds = t0.elapsed().as_secs_f64();
        log.push(row);
    }
    let (train, test) = last.expect("the last epoch is always evaluated");
    Ok(TrainReport {
        log,
        train,
        test,
        trainable_params: model.trainable_params(),
        seconds: t0.elapsed().as_secs_f64(),
        model,
    })
}

/// Checkpoint manifest and blobs, plus one adapter file per adapted block
/// under `adapters/`.
pub fn save_model(model: &Detector, dir: &Path) -> Result<()> {
    weights::save_store(&model.store, dir)?;
    if !model.encoder.adapters.is_empty() {
        let adir = dir.join("adapters");
        fs::create_dir_all(&adir).map_err(io_err(&adir))?;
        for (layer, a) in &model.encoder.adapters {
            weights::save_adapter(&adir.join(format!("layer_{layer:02}.tia")), a, &model.store)?;
        }
    }
    Ok(())
}

/// Rebuilds the configured model and overwrites its parameters from `dir`.
pub fn load_model(cfg: &RunConfig, dir: &Path) -> Result<Detector> {
    let mut model = Detector::new(&cfg.model(), cfg.seed)?;
    weights::load_store(&mut model.store, dir)?;
    Ok(model)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<MapResult> {
    let ckpt: PathBuf = cfg.eval.checkpoint.clone().unwrap_or_else(|| out.to_path_buf());
    let model = load_model(cfg, &ckpt)?;
    let (train_set, test_set) = load_splits(cfg)?;
    let videos = match cfg.eval.split {
        Split::Train => &train_set,
        Split::Test => &test_set,
    };
    let (r, rows) = evaluate_split(&model, videos, cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut t = results_table(&r);
    t.note(format!("split: {}", cfg.eval.split.name()));
    t.write(&out.join(RESULTS))?;
    proposals_table(&rows).write(&out.join(PROPOSALS))?;
    info!("{} mAP {:.4}", cfg.eval.split.name(), r.average);
    Ok(r)
}

pub const MEMBENCH_MODES: [EncodeMode; 6] = [
    EncodeMode::Frozen,
    EncodeMode::FullFT,
    EncodeMode::AdapterInside,
    EncodeMode::AdapterOutside { adapt_last_half: false },
    EncodeMode::AdapterOutside { adapt_last_half: true },
    EncodeMode::FullFTPlusTIA,
];

/// Strategies of the memory table: every mode on frames and snippets, plus
/// checkpointed and mixed-precision variants of the trainable ones.
pub fn membench_strategies(precision: Precision) -> Vec<Strategy> {
    let mut out = Vec::new();
    for repr in [Representation::Frame, Representation::Snippet] {
        for mode in MEMBENCH_MODES {
            out.push(Strategy { repr, precision, ..Strategy::new(mode) });
        }
    }
    for mode in [EncodeMode::FullFT, EncodeMode::AdapterInside, EncodeMode::FullFTPlusTIA] {
        out.push(Strategy { checkpoint: true, precision, ..Strategy::new(mode) });
        out.push(Strategy {
            checkpoint: true,
            precision: Precision::Mixed,
            ..Strategy::new(mode)
        });
    }
    out
}

/// Peak retained tensors and elements of one training pass of a toy model.
#[derive(Clone, Debug, PartialEq)]
pub struct Measured {
    pub mode: EncodeMode,
    pub repr: Representation,
    pub checkpoint: bool,
    pub frames: usize,
    pub peak_tensors: usize,
    pub peak_elements: usize,
}

pub fn measure(cfg: &RunConfig) -> Result<Vec<Measured>> {
    let spec = tialab_core::data::SyntheticSpec {
        frames: (cfg.membench.measure_frames, cfg.membench.measure_frames),
        action_frames: (1, 1),
        actions: (0, 0),
        ..cfg.data_spec()
    };
    let clip = generate_range(&spec, 0, 1)?.remove(0).frames;
    let mut out = Vec::new();
    for repr in [Representation::Frame, Representation::Snippet] {
        for mode in MEMBENCH_MODES {
            for checkpoint in [false, true] {
                let mut c = cfg.clone();
                c.mode = mode;
                c.last_half = matches!(mode, EncodeMode::AdapterOutside { adapt_last_half: true });
                c.representation = repr;
                let model = Detector::new(&c.model(), c.seed)?;
                let (peak_tensors, peak_elements) = measure_retained(&model, &clip, checkpoint)?;
                out.push(Measured {
                    mode,
                    repr,
                    checkpoint,
                    frames: cfg.membench.measure_frames,
                    peak_tensors,
                    peak_elements,
                });
            }
        }
    }
    Ok(out)
}

pub fn measured_table(rows: &[Measured]) -> Table {
    let mut t = Table::new(["mode", "representation", "checkpoint", "T", "peak_tensors", "peak_elements"]);
    for m in rows {
        t.push([
            m.mode.name().to_string(),
            m.repr.name().to_string(),
            m.checkpoint.to_string(),
            m.frames.to_string(),
            m.peak_tensors.to_string(),
            m.peak_elements.to_string(),
        ]);
    }
    t
}

pub fn membench(cfg: &RunConfig, out: &Path) -> Result<(Vec<MemoryEstimate>, Vec<Measured>)> {
    let model = cfg.model();
    let shapes: Vec<MemoryShape> = cfg
        .membench
        .frames
        .iter()
        .map(|&frames| MemoryShape {
            backbone: model.backbone,
            adapter: model.adapter,
            frames,
        })
        .collect();
    let est = compare_strategies(&shapes, &membench_strategies(cfg.membench.precision))?;
    let measured = measure(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut t = membench_table(&est);
    t.note("model bytes: activations kept for backward, parameters, gradients and optimizer moments of the video encoder");
    t.note("the detection head and framework overheads are excluded");
    t.write(&out.join(MEMBENCH))?;
    let mut m = measured_table(&measured);
    m.note("measured peak of retained graph values for one training pass of the configured toy model, head included");
    m.write(&out.join(MEMBENCH_MEASURED))?;
    Ok((est, measured))
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "axis",
    "value",
    "mode",
    "trainable_params",
    "adapter_params",
    "model_total_bytes",
    "train_mAP",
    "test_mAP",
];

/// Settings of an ablation axis: the key/value overrides of every row.
pub fn axis_settings(axis: &str, values: &[String]) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let defaults: &[&str] = match axis {
        "kernel_k" => &["1", "3", "7", "13", "21"],
        "adapter_kind" => &["standard", "tia", "tia_no_residual"],
        "mode" => &["frozen", "full_ft", "adapter_inside", "adapter_outside", "full_ft_plus_tia"],
        "representation" => &["frame", "snippet"],
        "input" => &["64x8", "128x8", "128x16"],
        _ => {
            return Err(Error::Config(format!(
                "ablate.axis: unknown axis {axis:?} (expected kernel_k, adapter_kind, mode, representation or input)"
            )))
        }
    };
    let values: Vec<String> = if values.is_empty() {
        defaults.iter().map(|s| s.to_string()).collect()
    } else {
        values.to_vec()
    };
    values
        .into_iter()
        .map(|v| {
            let sets = match axis {
                "kernel_k" => vec![("adapter.kernel".into(), v.clone())],
                "adapter_kind" => vec![("adapter.kind".into(), v.clone())],
                "mode" => vec![("model.mode".into(), v.clone())],
                "representation" => vec![("model.representation".into(), v.clone())],
                _ => {
                    let (w, s) = v
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("ablate input value {v:?} is not <window>x<frame_size>")))?;
                    vec![("train.window".into(), w.to_string()), ("backbone.frame_size".into(), s.to_string())]
                }
            };
            Ok((v, sets))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub mode: EncodeMode,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub model_total_bytes: u64,
    pub train_map: f64,
    pub test_map: Option<f64>,
}

/// One training run per axis value on a shared dataset; every run also
/// writes its own outputs under `out/<axis>_<value>/`.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let axis = cfg.ablate.axis.as_str();
    let settings = axis_settings(axis, &cfg.ablate.values)?;
    let (train_set, test_set) = load_splits(cfg)?;
    let mut rows = Vec::new();
    for (value, sets) in settings {
        let mut c = cfg.clone();
        for (k, v) in &sets {
            c.set(k, v)?;
        }
        c.validate()?;
        info!("ablate {axis}={value}");
        let report = train_on(&c, &train_set, &test_set)?;
        let dir = out.join(format!("{axis}_{value}"));
        write_echo(&c, &dir)?;
        log_table(&report.log).write(&dir.join(TRAIN_LOG))?;
        let m = c.model();
        let adapter_params = match c.mode {
            EncodeMode::Frozen | EncodeMode::FullFT => 0,
            _ => count_params(&m.adapter) * report.model.encoder.adapters.len(),
        };
        let est = estimate(
            Strategy {
                repr: c.representation,
                checkpoint: c.train.checkpoint,
                ..Strategy::new(c.mode)
            },
            &MemoryShape {
                backbone: m.backbone,
                adapter: m.adapter,
                frames: c.train.window,
            },
        )?;
        rows.push(AblationRow {
            value,
            mode: c.mode,
            trainable_params: report.trainable_params,
            adapter_params,
            model_total_bytes: est.total_bytes,
            train_map: report.train.average,
            test_map: report.test.as_ref().map(|r| r.average),
        });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    ablation_table(axis, &rows).write(&out.join(ABLATION))?;
    Ok(rows)
}

pub fn ablation_table(axis: &str, rows: &[AblationRow]) -> Table {
    let mut t = Table::new(ABLATION_COLUMNS);
    for r in rows {
        t.push([
            axis.to_string(),
            r.value.clone(),
            r.mode.name().to_string(),
            r.trainable_params.to_string(),
            r.adapter_params.to_string(),
            r.model_total_bytes.to_string(),
            fmt6(r.train_map),
            r.test_map.map_or_else(String::new, fmt6),
        ]);
    }
    t
}
