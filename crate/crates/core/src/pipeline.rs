//! Training and inference over synthetic videos.
//!
//! A [`Detector`] owns the parameter store, the encoder and the head. Training
//! draws one random window per video per epoch, accumulates gradients over a
//! batch of windows and applies AdamW under a linear-warmup cosine schedule.
//! Inference runs sliding windows, maps proposals back to video seconds and
//! suppresses duplicates across windows.
//!
//! In [`EncodeMode::Frozen`] the encoder never changes, so features are
//! computed once per whole video and windows are cut from them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterConfig;
use crate::backbone::{BackboneConfig, EncodeMode, EncodeOptions, Encoder, Representation};
use crate::data::{augment, downsample_spatial, extract_window, sliding_windows, truncate_window, VideoSample, Window, KEEP_RATIO};
use crate::error::{config_err, Error, Result};
use crate::eval::{mean_ap, EvalConfig, GroundTruth, MapResult, Prediction};
use crate::graph::{Graph, MemoryMeter, Var};
use crate::head::{assign_targets, compute_loss, decode_candidates, nms, DetectorHead, Head, HeadConfig, HeadOutput, Proposal, Segment};
use crate::param::{AdamW, Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mode: EncodeMode,
    pub adapter: AdapterConfig,
    pub head: HeadConfig,
    pub repr: Representation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            adapter: AdapterConfig::tia(backbone.dim, 4, 3),
            backbone,
            mode: EncodeMode::AdapterInside,
            head: HeadConfig::default(),
            repr: Representation::Frame,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Peak learning rate of backbone and adapter parameters; the head
    /// uses `lr`.
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Feature steps per training and inference window.
    pub window: usize,
    /// Frames between consecutive window steps.
    pub frame_stride: usize,
    pub overlap: f64,
    pub keep_ratio: f64,
    pub augment: bool,
    pub checkpoint: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 2,
            lr: 1e-3,
            encoder_lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 2,
            window: 128,
            frame_stride: 1,
            overlap: 0.5,
            keep_ratio: KEEP_RATIO,
            augment: false,
            checkpoint: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.encoder_lr >= 0.0) || !self.encoder_lr.is_finite() {
            return Err(config_err(format!("train.encoder_lr must be finite and >= 0, got {}", self.encoder_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.window == 0 || self.frame_stride == 0 {
            return Err(config_err("train: epochs, batch_size, window and frame_stride must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(config_err("train.warmup_epochs exceeds train.epochs"));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to zero.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let p = ((step - warm) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * p))
    }
}

/// Encoder, head and their parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub head: Head,
}

impl Detector {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.backbone, config.mode, config.adapter, &mut rng)?;
        let head = Head::new(&mut store, config.backbone.dim, &config.head, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            head,
        })
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        DetectorHead::<f32>::param_ids(&self.head)
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }

    /// Frames at the backbone's resolution.
    pub fn prepare(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let size = frames.shape()[1];
        let fs = self.config.backbone.frame_size;
        if size % fs != 0 {
            return Err(config_err(format!("frame size {size} is not a multiple of the backbone input {fs}")));
        }
        downsample_spatial(frames, size / fs)
    }

    fn encode_opts(&self, checkpoint: bool) -> EncodeOptions {
        EncodeOptions {
            repr: self.config.repr,
            checkpoint,
            segment_len: None,
        }
    }

    /// Gradient-free features of a whole clip.
    pub fn features(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = self.prepare(frames)?;
        Ok(self.encoder.features(&self.store, &x, self.config.repr)?.values)
    }

    pub fn head_outputs(&self, features: &Tensor<f32>) -> Result<HeadOutput<f32>> {
        self.head.outputs(&self.store, features)
    }
}

/// Window annotations in feature steps.
pub fn window_segments(w: &Window) -> Vec<Segment> {
    let fps = w.sample.fps;
    w.sample
        .annotations
        .iter()
        .map(|a| Segment {
            start: a.t_start * fps,
            end: a.t_end * fps,
            class: a.class,
        })
        .collect()
}

/// Rows `start/stride ..` of cached full-video features, zero padded.
fn feature_window(features: &Tensor<f32>, w: &Window) -> Result<Tensor<f32>> {
    let t = features.shape()[0];
    let d = features.shape()[1];
    let n = w.sample.num_frames();
    let mut out = alloc::vec![0.0f32; n * d];
    for i in 0..n {
        let f = w.start_frame + i * w.stride;
        if f < t {
            out[i * d..(i + 1) * d].copy_from_slice(&features.data()[f * d..(f + 1) * d]);
        }
    }
    Tensor::new(alloc::vec![n, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub windows: usize,
}

/// Stateful trainer over a fixed training set.
pub struct Trainer<'v> {
    pub config: TrainConfig,
    pub videos: &'v [VideoSample],
    pub optimizer: AdamW<f32>,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    cache: Option<Vec<Tensor<f32>>>,
}

impl<'v> Trainer<'v> {
    pub fn new(model: &Detector, videos: &'v [VideoSample], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if videos.is_empty() {
            return Err(config_err("training set is empty"));
        }
        let cache = if model.config.mode == EncodeMode::Frozen {
            Some(videos.iter().map(|v| model.features(&v.frames)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let mut t = Self::build(videos, config, cache)?;
        let scale = if config.lr > 0.0 { config.encoder_lr / config.lr } else { 0.0 };
        for id in model.encoder.param_ids() {
            t.optimizer.set_lr_scale(id, scale as f32);
        }
        Ok(t)
    }

    /// Trains the head alone on precomputed per-frame features, one tensor
    /// `[frames, d]` per video.
    pub fn with_features(videos: &'v [VideoSample], features: Vec<Tensor<f32>>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if videos.is_empty() || features.len() != videos.len() {
            return Err(config_err("training set is empty or features do not match the videos"));
        }
        Self::build(videos, config, Some(features))
    }

    fn build(videos: &'v [VideoSample], config: &TrainConfig, cache: Option<Vec<Tensor<f32>>>) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            videos,
            optimizer: AdamW::new(config.weight_decay as f32),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00),
            step: 0,
            epoch: 0,
            cache,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.videos.len().div_ceil(self.config.batch_size)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss of one window and the gradients of the trainable parameters.
    fn window_grads(&mut self, model: &Detector, index: usize) -> Result<(f64, Gradients<f32>)> {
        let cfg = &self.config;
        let v = &self.videos[index];
        let w = truncate_window(v, cfg.window, cfg.frame_stride, cfg.keep_ratio, &mut self.rng)?;
        let segs = window_segments(&w);
        let targets = assign_targets(&segs, &model.config.head, cfg.window);
        let mut g = Graph::new();
        let feats: Var = match &self.cache {
            Some(c) => g.input(feature_window(&c[index], &w)?),
            None => {
                let frames = if cfg.augment {
                    augment(&w.sample, &mut self.rng)?.frames
                } else {
                    w.sample.frames.clone()
                };
                let x = model.prepare(&frames)?;
                model
                    .encoder
                    .encode(&mut g, &model.store, &x, model.encode_opts(cfg.checkpoint))?
            }
        };
        let out = model.head.forward(&mut g, &model.store, feats)?;
        let loss = compute_loss(&mut g, &out, &targets, model.config.head.focal_norm)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::State(format!(
                "non-finite training loss {value} on {} in epoch {}",
                v.id,
                self.epoch + 1
            )));
        }
        Ok((value, g.backward(loss)?))
    }

    /// One pass over the training set in a seeded random order.
    pub fn run_epoch(&mut self, model: &mut Detector) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        order.shuffle(&mut self.rng);
        let spe = self.steps_per_epoch();
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                let (l, g) = self.window_grads(model, i)?;
                total += l;
                grads.merge(g);
            }
            grads.scale(1.0 / batch.len() as f32);
            lr = self.config.lr_at(self.step, spe);
            self.optimizer.step(&mut model.store, &grads, lr as f32);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total / self.videos.len() as f64,
            lr,
            windows: self.videos.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub window: usize,
    pub frame_stride: usize,
    pub overlap: f64,
}

impl From<&TrainConfig> for InferenceConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            window: c.window,
            frame_stride: c.frame_stride,
            overlap: c.overlap,
        }
    }
}

/// Proposals for one video in seconds, merged over sliding windows.
pub fn predict_video(model: &Detector, v: &VideoSample, cfg: &InferenceConfig) -> Result<Vec<Proposal>> {
    let cached = if model.config.mode == EncodeMode::Frozen {
        Some(model.features(&v.frames)?)
    } else {
        None
    };
    predict_with(model, v, cached.as_ref(), cfg)
}

/// Like [`predict_video`], cutting windows from `features` when given.
pub fn predict_with(model: &Detector, v: &VideoSample, cached: Option<&Tensor<f32>>, cfg: &InferenceConfig) -> Result<Vec<Proposal>> {
    let starts = sliding_windows(v.num_frames(), cfg.window, cfg.frame_stride, cfg.overlap)?;
    let mut all = Vec::new();
    for s in starts {
        let w = extract_window(v, s, cfg.window, cfg.frame_stride, 0.0)?;
        let feats = match cached {
            Some(f) => feature_window(f, &w)?,
            None => model.features(&w.sample.frames)?,
        };
        let out = model.head_outputs(&feats)?;
        let fps = w.sample.fps;
        for p in decode_candidates(&out, &model.config.head, cfg.window) {
            let (a, b) = (w.to_video_time(p.t_start / fps), w.to_video_time(p.t_end / fps));
            if b > a {
                all.push(Proposal {
                    t_start: a,
                    t_end: b,
                    ..p
                });
            }
        }
    }
    let h = &model.config.head;
    Ok(nms(all, h.nms_threshold, h.max_proposals))
}

pub fn ground_truth(videos: &[VideoSample]) -> Vec<GroundTruth> {
    videos
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            v.annotations.iter().map(move |a| GroundTruth {
                video: i,
                t_start: a.t_start,
                t_end: a.t_end,
                class: a.class,
            })
        })
        .collect()
}

/// Proposals for every video, indexed like `videos`.
pub fn predict_all(model: &Detector, videos: &[VideoSample], cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        for p in predict_video(model, v, cfg)? {
            out.push(Prediction {
                video: i,
                t_start: p.t_start,
                t_end: p.t_end,
                class: p.class,
                score: p.score,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Detector, videos: &[VideoSample], infer: &InferenceConfig, eval: &EvalConfig) -> Result<MapResult> {
    let preds = predict_all(model, videos, infer)?;
    mean_ap(&preds, &ground_truth(videos), model.config.head.classes, eval)
}

/// Peak retained intermediate elements for one forward and backward pass of
/// the detector on `frames`.
pub fn measure_retained(model: &Detector, frames: &Tensor<f32>, checkpoint: bool) -> Result<(usize, usize)> {
    let meter = MemoryMeter::new();
    let mut g = Graph::with_meter(meter.clone(), true);
    let x = model.prepare(frames)?;
    let f = model.encoder.encode(&mut g, &model.store, &x, model.encode_opts(checkpoint))?;
    let out = model.head.forward(&mut g, &model.store, f)?;
    let targets = assign_targets(&[], &model.config.head, g.shape(f)[0]);
    let loss = compute_loss(&mut g, &out, &targets, model.config.head.focal_norm)?;
    if g.requires_grad(loss) {
        g.backward(loss)?;
    }
    Ok((meter.peak_tensors(), meter.peak_elements()))
}

/// Backward-rule invocations per region for one training window.
pub fn backward_profile(model: &Detector, frames: &Tensor<f32>, segs: &[Segment]) -> Result<(BTreeMap<&'static str, usize>, Gradients<f32>)> {
    let mut g = Graph::new();
    let x = model.prepare(frames)?;
    let f = model.encoder.encode(&mut g, &model.store, &x, model.encode_opts(false))?;
    let out = model.head.forward(&mut g, &model.store, f)?;
    let targets = assign_targets(segs, &model.config.head, g.shape(f)[0]);
    let loss = compute_loss(&mut g, &out, &targets, model.config.head.focal_norm)?;
    let grads = g.backward(loss)?;
    Ok((g.backward_counts().clone(), grads))
}

/// Random subset helper for quick evaluation of large splits.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k.min(n));
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};

    fn tiny_model(mode: EncodeMode) -> ModelConfig {
        let backbone = BackboneConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            chunk_len: 8,
            patch: 4,
            frame_size: 8,
            channels: 3,
            mlp_ratio: 2,
        };
        ModelConfig {
            adapter: AdapterConfig::tia(16, 4, 3),
            backbone,
            mode,
            head: HeadConfig {
                width: 8,
                ..HeadConfig::default()
            },
            repr: Representation::Frame,
        }
    }

    fn tiny_data() -> Vec<VideoSample> {
        let spec = SyntheticSpec {
            frames: (48, 64),
            action_frames: (8, 16),
            ..Default::default()
        };
        generate_dataset(&spec, 4).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            window: 32,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            lr: 1.0,
            ..Default::default()
        };
        assert!((c.lr_at(0, 5) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 5) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 5) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(49, 5) < 0.01);
        for s in 10..49 {
            assert!(c.lr_at(s + 1, 5) <= c.lr_at(s, 5));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let data = tiny_data();
        let mut m = Detector::new(&tiny_model(EncodeMode::AdapterInside), 0).unwrap();
        let before = m.store.clone();
        let cfg = TrainConfig { lr: 0.0, ..tiny_train() };
        let mut tr = Trainer::new(&m, &data, &cfg).unwrap();
        let a = tr.run_epoch(&mut m).unwrap();
        for (id, p) in before.iter() {
            assert_eq!(*p.tensor, *m.store.tensor(id));
        }
        assert!(a.loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let run = || {
            let mut m = Detector::new(&tiny_model(EncodeMode::AdapterInside), 3).unwrap();
            let mut tr = Trainer::new(&m, &data, &tiny_train()).unwrap();
            let l: Vec<f64> = (0..2).map(|_| tr.run_epoch(&mut m).unwrap().loss).collect();
            (l, m.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for (id, p) in sa.iter() {
            assert_eq!(*p.tensor, *sb.tensor(id));
        }
    }

    #[test]
    fn frozen_backbone_stays_put() {
        let data = tiny_data();
        for mode in [EncodeMode::Frozen, EncodeMode::AdapterInside, EncodeMode::AdapterOutside { adapt_last_half: false }] {
            let mut m = Detector::new(&tiny_model(mode), 1).unwrap();
            let before = m.store.clone();
            let mut tr = Trainer::new(&m, &data, &tiny_train()).unwrap();
            tr.run_epoch(&mut m).unwrap();
            for id in m.encoder.backbone.param_ids() {
                assert_eq!(before.tensor(id), m.store.tensor(id));
            }
            assert!(m.head_ids().iter().any(|&id| before.tensor(id) != m.store.tensor(id)));
        }
    }

    #[test]
    fn evaluation_runs_and_is_idempotent() {
        let data = tiny_data();
        let m = Detector::new(&tiny_model(EncodeMode::AdapterInside), 0).unwrap();
        let infer = InferenceConfig::from(&tiny_train());
        let a = evaluate(&m, &data, &infer, &EvalConfig::default()).unwrap();
        let b = evaluate(&m, &data, &infer, &EvalConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.average));
        for p in predict_all(&m, &data, &infer).unwrap() {
            assert!(p.t_start >= 0.0 && p.t_end <= data[p.video].duration() && p.t_start < p.t_end);
        }
        assert!(evaluate(&m, &[], &infer, &EvalConfig::default()).is_err());
    }
}
