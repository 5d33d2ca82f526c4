//! Synthetic untrimmed videos and the preprocessing used around them.
//!
//! Frames are `[t, h, w, c]`. Each action adds a class-specific pattern over
//! its interval: a sinusoid in time whose frequency grows with the class id,
//! modulated by a Gaussian blob at a random position. A single frame does not
//! reveal the class; its temporal neighbourhood does.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Ground-truth action in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionAnnotation {
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
}

impl ActionAnnotation {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `[t, h, w, c]`
    pub frames: Tensor<f32>,
    pub fps: f64,
    pub annotations: Vec<ActionAnnotation>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    /// Checks `0 <= t_start < t_end <= duration` for every annotation.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let dur = self.duration();
        for a in &self.annotations {
            let ok = a.t_start >= 0.0 && a.t_start < a.t_end && a.t_end <= dur + 1e-9 && a.class < classes;
            if !ok {
                return Err(Error::Generation(format!("{}: invalid annotation {a:?}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub frames: (usize, usize),
    pub actions: (usize, usize),
    /// Action length in frames.
    pub action_frames: (usize, usize),
    pub amplitude: f64,
    pub noise: f64,
    pub size: usize,
    pub channels: usize,
    pub fps: f64,
    /// Cycles per frame of class 0; class `c` uses `(c + 1)` times this.
    pub base_frequency: f64,
    pub blob_sigma: f64,
    /// Also reject overlaps between different classes.
    pub exclusive: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            frames: (128, 512),
            actions: (1, 3),
            action_frames: (24, 48),
            amplitude: 1.0,
            noise: 0.35,
            size: 16,
            channels: 3,
            fps: 8.0,
            base_frequency: 1.0 / 16.0,
            blob_sigma: 3.0,
            exclusive: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (a, b): (usize, usize)| {
            if a > b {
                Err(config_err(format!("data.{name}: empty range {a}..={b}")))
            } else {
                Ok(())
            }
        };
        range("frames", self.frames)?;
        range("actions", self.actions)?;
        range("action_frames", self.action_frames)?;
        if self.classes == 0 || self.size == 0 || self.channels == 0 || self.fps <= 0.0 {
            return Err(config_err("data: classes, size, channels and fps must be positive"));
        }
        if self.action_frames.0 == 0 || self.action_frames.1 > self.frames.0 {
            return Err(config_err(format!(
                "data: action length {:?} must fit in the shortest video ({})",
                self.action_frames, self.frames.0
            )));
        }
        Ok(())
    }
}

fn video_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One video, a pure function of `(spec, index)`.
pub fn generate_video(spec: &SyntheticSpec, index: usize) -> Result<VideoSample> {
    spec.validate()?;
    let mut rng = video_rng(spec.seed, index as u64);
    let t = rng.gen_range(spec.frames.0..=spec.frames.1);
    // at most half the video is action, so rejection sampling has room
    let cap = (t / (2 * spec.action_frames.1)).max(spec.actions.0);
    let n_actions = rng.gen_range(spec.actions.0..=spec.actions.1).min(cap);
    let (h, w, ch) = (spec.size, spec.size, spec.channels);

    // (start, end) in frames, class
    let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let mut placed = false;
        for _ in 0..100 {
            let len = rng.gen_range(spec.action_frames.0..=spec.action_frames.1);
            let start = rng.gen_range(0..=t - len);
            let class = rng.gen_range(0..spec.classes);
            let clash = spans
                .iter()
                .any(|&(s, e, c)| (spec.exclusive || c == class) && start < e && s < start + len);
            if !clash {
                spans.push((start, start + len, class));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "video {index}: could not place {n_actions} non-overlapping actions in {t} frames"
            )));
        }
    }
    spans.sort_unstable();

    let mut data: Vec<f32> = (0..t * h * w * ch)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * spec.noise) as f32
        })
        .collect();
    for &(s, e, c) in &spans {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let freq = spec.base_frequency * (c + 1) as f64;
        let blob: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
                libm::exp(-(y * y + x * x) / (2.0 * spec.blob_sigma * spec.blob_sigma))
            })
            .collect();
        for f in s..e {
            let wave = spec.amplitude * libm::sin(2.0 * PI * freq * (f - s) as f64 + phase);
            for (p, b) in blob.iter().enumerate() {
                let base = (f * h * w + p) * ch;
                for v in &mut data[base..base + ch] {
                    *v += (wave * b) as f32;
                }
            }
        }
    }
    let frames = Tensor::new(alloc::vec![t, h, w, ch], data)?;
    let annotations = spans
        .iter()
        .map(|&(s, e, c)| ActionAnnotation {
            t_start: s as f64 / spec.fps,
            t_end: e as f64 / spec.fps,
            class: c,
        })
        .collect();
    let sample = VideoSample {
        id: format!("video_{index:05}"),
        frames,
        fps: spec.fps,
        annotations,
    };
    sample.validate(spec.classes)?;
    Ok(sample)
}

pub fn generate_dataset(spec: &SyntheticSpec, n_videos: usize) -> Result<Vec<VideoSample>> {
    generate_range(spec, 0, n_videos)
}

/// Videos `first .. first + n`; used to draw disjoint splits from one seed.
pub fn generate_range(spec: &SyntheticSpec, first: usize, n: usize) -> Result<Vec<VideoSample>> {
    (first..first + n).map(|i| generate_video(spec, i)).collect()
}

/// Uniform temporal resampling to `target` frames. Annotation times in
/// seconds are unchanged; the frame rate absorbs the scale.
pub fn resize_video(v: &VideoSample, target: usize) -> Result<VideoSample> {
    if target < 2 {
        return Err(config_err(format!("resize target must be >= 2, got {target}")));
    }
    let t = v.num_frames();
    let idx: Vec<usize> = resize_indices(t, target);
    let frames = gather_frames(&v.frames, &idx)?;
    Ok(VideoSample {
        id: v.id.clone(),
        frames,
        fps: v.fps * target as f64 / t as f64,
        annotations: v.annotations.clone(),
    })
}

/// `round(i * (t - 1) / (target - 1))` for `i in 0..target`.
pub fn resize_indices(t: usize, target: usize) -> Vec<usize> {
    (0..target)
        .map(|i| {
            let x = i as f64 * (t - 1) as f64 / (target - 1) as f64;
            libm::round(x) as usize
        })
        .collect()
}

/// Rows of `[t, ...]` at `idx`; indices past the end give zero rows.
pub fn gather_frames(frames: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let t = frames.shape()[0];
    let row: usize = frames.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i < t {
            data.extend_from_slice(&frames.data()[i * row..(i + 1) * row]);
        } else {
            data.extend(core::iter::repeat(0.0).take(row));
        }
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// A temporal window cut from a video. `sample` carries window-local
/// seconds (time zero at `start_frame`) and frame rate `fps / stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub sample: VideoSample,
    pub start_frame: usize,
    pub stride: usize,
    pub source_fps: f64,
    pub source_duration: f64,
}

impl Window {
    /// Window-local seconds to video seconds, clipped to the video.
    pub fn to_video_time(&self, t: f64) -> f64 {
        (self.start_frame as f64 / self.source_fps + t).clamp(0.0, self.source_duration)
    }
}

/// Cuts `win_len` frames taken every `stride` frames from `start`, zero
/// padding past the end. Annotations are clipped to the window and kept when
/// at least `keep_ratio` of their length survives.
pub fn extract_window(v: &VideoSample, start: usize, win_len: usize, stride: usize, keep_ratio: f64) -> Result<Window> {
    if win_len == 0 || stride == 0 {
        return Err(config_err("window length and stride must be positive"));
    }
    let idx: Vec<usize> = (0..win_len).map(|i| start + i * stride).collect();
    let frames = gather_frames(&v.frames, &idx)?;
    let w0 = start as f64 / v.fps;
    let w1 = (start + win_len * stride) as f64 / v.fps;
    let annotations = v
        .annotations
        .iter()
        .filter_map(|a| {
            let s = a.t_start.max(w0);
            let e = a.t_end.min(w1);
            (e > s && (e - s) / a.duration() >= keep_ratio - 1e-12).then(|| ActionAnnotation {
                t_start: s - w0,
                t_end: e - w0,
                class: a.class,
            })
        })
        .collect();
    Ok(Window {
        sample: VideoSample {
            id: v.id.clone(),
            frames,
            fps: v.fps / stride as f64,
            annotations,
        },
        start_frame: start,
        stride,
        source_fps: v.fps,
        source_duration: v.duration(),
    })
}

pub const KEEP_RATIO: f64 = 0.25;
pub const WINDOW_RETRIES: usize = 20;

/// Random training window. Windows that keep no annotation are redrawn up to
/// [`WINDOW_RETRIES`] times, then accepted empty.
pub fn truncate_window<R: Rng + ?Sized>(
    v: &VideoSample,
    win_len: usize,
    stride: usize,
    keep_ratio: f64,
    rng: &mut R,
) -> Result<Window> {
    let span = win_len * stride;
    let last = v.num_frames().saturating_sub(span);
    let mut w = extract_window(v, rng.gen_range(0..=last), win_len, stride, keep_ratio)?;
    if v.annotations.is_empty() {
        return Ok(w);
    }
    for _ in 0..WINDOW_RETRIES {
        if !w.sample.annotations.is_empty() {
            break;
        }
        w = extract_window(v, rng.gen_range(0..=last), win_len, stride, keep_ratio)?;
    }
    Ok(w)
}

/// Start frames of inference windows over `t` frames. Windows advance by
/// `win_len * stride * (1 - overlap)` frames and the last one is aligned to
/// the end of the video.
pub fn sliding_windows(t: usize, win_len: usize, stride: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(config_err(format!("window overlap must be in [0, 1), got {overlap}")));
    }
    let span = win_len * stride;
    if span == 0 {
        return Err(config_err("window length and stride must be positive"));
    }
    let adv = ((span as f64 * (1.0 - overlap)) as usize).max(1);
    let mut starts = alloc::vec![0];
    let mut s = 0;
    while s + span < t {
        s += adv;
        if s + span > t {
            s = t - span;
        }
        starts.push(s);
    }
    Ok(starts)
}

/// Average pooling over `factor × factor` spatial cells.
pub fn downsample_spatial(frames: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 4 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(crate::error::shape_err("downsample", s, &[factor]));
    }
    if factor == 1 {
        return Ok(frames.clone());
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = alloc::vec![0.0f32; t * oh * ow * c];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let src = ((f * h + y) * w + x) * c;
                let dst = ((f * oh + y / factor) * ow + x / factor) * c;
                for k in 0..c {
                    out[dst + k] += frames.data()[src + k] * norm;
                }
            }
        }
    }
    Tensor::new(alloc::vec![t, oh, ow, c], out)
}

pub fn flip_horizontal(frames: &Tensor<f32>) -> Tensor<f32> {
    let s = frames.shape();
    let (w, c) = (s[2], s[3]);
    let mut out = frames.clone();
    let src = frames.data();
    for (r, row) in out.data_mut().chunks_mut(w * c).enumerate() {
        let base = r * w * c;
        for x in 0..w {
            let from = base + (w - 1 - x) * c;
            row[x * c..x * c + c].copy_from_slice(&src[from..from + c]);
        }
    }
    out
}

/// Crops `ch × cw` at `(y0, x0)` from every frame and resizes back to the
/// full frame bilinearly (sample centres aligned).
pub fn crop_resize(frames: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w {
        return Err(crate::error::shape_err("crop", s, &[y0, x0, ch, cw]));
    }
    if (y0, x0, ch, cw) == (0, 0, h, w) {
        return Ok(frames.clone());
    }
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = p as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (p - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..h).map(|o| coord(o, h, ch)).collect();
    let xs: Vec<_> = (0..w).map(|o| coord(o, w, cw)).collect();
    let src = frames.data();
    let at = |f: usize, y: usize, x: usize, k: usize| src[((f * h + y0 + y) * w + x0 + x) * c + k];
    let mut out = Vec::with_capacity(frames.numel());
    for f in 0..t {
        for &(y_lo, y_hi, fy) in &ys {
            for &(x_lo, x_hi, fx) in &xs {
                for k in 0..c {
                    let top = at(f, y_lo, x_lo, k) * (1.0 - fx) + at(f, y_lo, x_hi, k) * fx;
                    let bot = at(f, y_hi, x_lo, k) * (1.0 - fx) + at(f, y_hi, x_hi, k) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub const MIN_CROP_AREA: f64 = 0.7;

/// Random square-ish crop covering at least 70% of the frame area, resized
/// back, then a horizontal flip with probability one half. Annotations are
/// untouched.
pub fn augment<R: Rng + ?Sized>(v: &VideoSample, rng: &mut R) -> Result<VideoSample> {
    let s = v.frames.shape();
    let (h, w) = (s[1], s[2]);
    let area = rng.gen_range(MIN_CROP_AREA..=1.0);
    let side = libm::sqrt(area);
    let ch = (libm::ceil(h as f64 * side) as usize).clamp(1, h);
    let cw = (libm::ceil(w as f64 * side) as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let mut frames = crop_resize(&v.frames, y0, x0, ch, cw)?;
    if rng.gen_bool(0.5) {
        frames = flip_horizontal(&frames);
    }
    Ok(VideoSample {
        frames,
        ..v.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            frames: (128, 256),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let spec = small();
        let a = generate_dataset(&spec, 3).unwrap();
        let b = generate_dataset(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_video(&spec, 2).unwrap(), a[2]);
        let other = generate_video(&SyntheticSpec { seed: 1, ..spec }, 2).unwrap();
        assert_ne!(other.frames, a[2].frames);
    }

    #[test]
    fn annotations_valid_for_default_scale() {
        let spec = SyntheticSpec {
            size: 4,
            ..small()
        };
        for v in generate_dataset(&spec, 200).unwrap() {
            v.validate(3).unwrap();
            let t = v.num_frames();
            assert!((128..=256).contains(&t));
            assert!(!v.annotations.is_empty());
            for (i, a) in v.annotations.iter().enumerate() {
                for b in &v.annotations[i + 1..] {
                    assert!(a.t_end <= b.t_start || b.t_end <= a.t_start);
                }
            }
        }
    }

    #[test]
    fn zero_amplitude_is_pure_noise() {
        let spec = SyntheticSpec {
            amplitude: 0.0,
            noise: 0.0,
            size: 4,
            ..small()
        };
        let v = generate_video(&spec, 0).unwrap();
        assert!(v.frames.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn impossible_placement_is_a_generation_error() {
        let spec = SyntheticSpec {
            frames: (32, 32),
            actions: (3, 3),
            action_frames: (30, 30),
            size: 2,
            ..Default::default()
        };
        assert!(matches!(generate_video(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn resize_examples() {
        assert_eq!(resize_indices(10, 4), [0, 3, 6, 9]);
        let spec = SyntheticSpec {
            size: 2,
            ..small()
        };
        let v = generate_video(&spec, 0).unwrap();
        assert_eq!(resize_video(&v, v.num_frames()).unwrap(), v);
        let r = resize_video(&v, 64).unwrap();
        assert_eq!(r.num_frames(), 64);
        assert!((r.duration() - v.duration()).abs() < 1e-9);
        assert!(resize_video(&v, 1).is_err());
    }

    fn one_action(t: usize, s: f64, e: f64) -> VideoSample {
        VideoSample {
            id: "v".into(),
            frames: Tensor::zeros(&[t, 1, 1, 1]),
            fps: 1.0,
            annotations: alloc::vec![ActionAnnotation { t_start: s, t_end: e, class: 0 }],
        }
    }

    #[test]
    fn window_keep_rule() {
        let v = one_action(100, 40.0, 60.0);
        let full = extract_window(&v, 0, 100, 1, KEEP_RATIO).unwrap();
        assert_eq!(full.sample.annotations, v.annotations);
        // half inside
        let w = extract_window(&v, 50, 50, 1, KEEP_RATIO).unwrap();
        assert_eq!(w.sample.annotations, [ActionAnnotation { t_start: 0.0, t_end: 10.0, class: 0 }]);
        assert_eq!(w.to_video_time(0.0), 50.0);
        // 10% inside
        let w = extract_window(&v, 58, 40, 1, KEEP_RATIO).unwrap();
        assert!(w.sample.annotations.is_empty());
    }

    #[test]
    fn window_round_trip() {
        let spec = SyntheticSpec {
            size: 2,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..30 {
            let v = generate_video(&spec, i).unwrap();
            let w = truncate_window(&v, 32, 2, KEEP_RATIO, &mut rng).unwrap();
            assert_eq!(w.sample.num_frames(), 32);
            for a in &w.sample.annotations {
                let (s, e) = (w.to_video_time(a.t_start), w.to_video_time(a.t_end));
                let orig = v
                    .annotations
                    .iter()
                    .find(|o| o.class == a.class && o.t_start <= s + 1e-9 && e <= o.t_end + 1e-9)
                    .expect("kept annotation maps inside its source");
                let one = 1.0 / v.fps;
                assert!(s - orig.t_start < one || (s - w.to_video_time(0.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sliding_examples() {
        assert_eq!(sliding_windows(100, 50, 1, 0.5).unwrap(), [0, 25, 50]);
        assert_eq!(sliding_windows(40, 50, 1, 0.5).unwrap(), [0]);
        assert_eq!(sliding_windows(50, 50, 1, 0.0).unwrap(), [0]);
        assert_eq!(sliding_windows(110, 50, 1, 0.0).unwrap(), [0, 50, 60]);
        assert!(sliding_windows(100, 50, 1, 1.0).is_err());
    }

    #[test]
    fn flip_is_an_involution_and_full_crop_is_identity() {
        let spec = SyntheticSpec {
            frames: (16, 16),
            action_frames: (4, 8),
            ..Default::default()
        };
        let v = generate_video(&spec, 0).unwrap();
        let f = flip_horizontal(&v.frames);
        assert_ne!(f, v.frames);
        assert_eq!(flip_horizontal(&f), v.frames);
        assert_eq!(crop_resize(&v.frames, 0, 0, 16, 16).unwrap(), v.frames);
    }

    #[test]
    fn augment_keeps_annotations() {
        let spec = SyntheticSpec {
            frames: (16, 24),
            action_frames: (4, 8),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..100 {
            let v = generate_video(&spec, i).unwrap();
            let a = augment(&v, &mut rng).unwrap();
            assert_eq!(a.annotations, v.annotations);
            assert_eq!(a.frames.shape(), v.frames.shape());
            assert_eq!((a.id.as_str(), a.fps), (v.id.as_str(), v.fps));
        }
    }

    #[test]
    fn downsample_averages_cells() {
        let x = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f32);
        assert_eq!(downsample_spatial(&x, 2).unwrap().data(), &[1.5]);
    }
}
