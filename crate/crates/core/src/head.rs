//! One-stage anchor-free temporal detection head.
//!
//! Level 0 is a projected, normalised copy of the feature map; every further
//! level halves the time axis with a stride-2 depth-wise convolution followed
//! by layer normalisation. A classifier and a boundary regressor are shared by
//! all levels. Each location predicts class logits and non-negative distances
//! (in units of its level stride) to the action start and end.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::eval::tiou;
use crate::graph::{Graph, Region, Var};
use crate::layers::{uniform, Linear, Norm};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{ConvGeometry, Tensor};

pub const REGION_HEAD: Region = "head";
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// What the summed focal loss is divided by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FocalNorm {
    /// Every location of every level.
    Locations,
    /// Positive locations only.
    #[default]
    Positives,
}

impl FocalNorm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Locations => "locations",
            Self::Positives => "positives",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "locations" => Some(Self::Locations),
            "positives" => Some(Self::Positives),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub classes: usize,
    pub levels: usize,
    pub width: usize,
    pub kernel: usize,
    /// Shared temporal conv layers applied to every level before the
    /// classifier and regressor.
    pub tower_layers: usize,
    /// Layers of the same kind run once at full resolution before the
    /// pyramid is built.
    pub stem_layers: usize,
    pub focal_norm: FocalNorm,
    /// Upper bounds of the regression ranges, in feature steps; the last
    /// level is open-ended. Level `l` covers `[bounds[l-1], bounds[l])`.
    pub range_bounds: Vec<f64>,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_proposals: usize,
    /// Initial foreground probability for the classifier bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            levels: 4,
            width: 32,
            kernel: 3,
            tower_layers: 4,
            stem_layers: 2,
            focal_norm: FocalNorm::Positives,
            range_bounds: alloc::vec![4.0, 8.0, 16.0],
            score_threshold: 0.05,
            nms_threshold: 0.6,
            max_proposals: 200,
            prior: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.classes == 0 || self.width == 0 {
            return Err(config_err("head: levels, classes and width must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err(format!("head: kernel must be odd, got {}", self.kernel)));
        }
        if self.range_bounds.len() + 1 != self.levels {
            return Err(config_err(format!(
                "head: {} levels need {} range bounds, got {}",
                self.levels,
                self.levels - 1,
                self.range_bounds.len()
            )));
        }
        if self.range_bounds.iter().any(|b| !(*b > 0.0))
            || self.range_bounds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(config_err("head: range bounds must be positive and increasing"));
        }
        Ok(())
    }

    /// `[lo, hi)` for a level.
    pub fn range(&self, level: usize) -> (f64, f64) {
        let lo = if level == 0 { 0.0 } else { self.range_bounds[level - 1] };
        let hi = self.range_bounds.get(level).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    pub fn stride(&self, level: usize) -> usize {
        1 << level
    }

    /// Number of locations per level for `t` input steps.
    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.levels);
        let mut len = t;
        for _ in 0..self.levels {
            v.push(len);
            len = len.div_ceil(2);
        }
        v
    }

    pub fn min_length(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Downsample {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
}

/// Depth-wise temporal conv, point-wise mix, layer norm, GELU.
#[derive(Clone, Copy, Debug)]
pub struct TowerLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub mix: Linear,
    pub norm: Norm,
}

impl TowerLayer {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let c = g.dwconv_temporal(x, k, b, ConvGeometry { stride: 1, block: None })?;
        let m = self.mix.forward(g, store, c)?;
        let n = self.norm.forward(g, store, m)?;
        g.gelu(n)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    pub proj: Linear,
    pub proj_norm: Norm,
    pub downs: Vec<Downsample>,
    pub stem: Vec<TowerLayer>,
    pub tower: Vec<TowerLayer>,
    pub cls: Linear,
    pub reg: Linear,
}

/// Head outputs with all levels stacked along the first axis.
#[derive(Clone, Debug)]
pub struct HeadVars {
    /// `[n, classes]`
    pub logits: Var,
    /// `[n, 2]`, non-negative, in level-stride units
    pub dists: Var,
    pub lengths: Vec<usize>,
}

/// Stacked head outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub logits: Tensor<T>,
    pub dists: Tensor<T>,
    pub lengths: Vec<usize>,
}

/// Anything that maps a `[t, d]` feature variable to stacked level outputs.
pub trait DetectorHead<T: Real> {
    fn forward(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, features: Var) -> Result<HeadVars>;
    fn param_ids(&self) -> Vec<ParamId>;
}

impl Head {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, config: &HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let proj = Linear::new(store, "head.proj", dim, w, true, rng);
        let proj_norm = Norm::new(store, "head.proj_norm", w, true);
        let k = config.kernel;
        let downs = (1..config.levels)
            .map(|l| Downsample {
                kernel: store.add(format!("head.down.{l}.kernel"), Tensor::full(&[w, k], T::lit(1.0 / k as f64)), true),
                bias: store.add(format!("head.down.{l}.bias"), Tensor::zeros(&[w]), true),
                norm: Norm::new(store, &format!("head.down.{l}.norm"), w, true),
            })
            .collect();
        let mut layers = |name: &str, n: usize| -> Vec<TowerLayer> {
            (0..n)
                .map(|i| TowerLayer {
                    kernel: store.add(format!("head.{name}.{i}.kernel"), uniform(rng, &[w, k], 1.0 / libm::sqrt(k as f64)), true),
                    bias: store.add(format!("head.{name}.{i}.bias"), Tensor::zeros(&[w]), true),
                    mix: Linear::new(store, &format!("head.{name}.{i}.mix"), w, w, true, rng),
                    norm: Norm::new(store, &format!("head.{name}.{i}.norm"), w, true),
                })
                .collect()
        };
        let stem = layers("stem", config.stem_layers);
        let tower = layers("tower", config.tower_layers);
        let cls = Linear::new(store, "head.cls", w, config.classes, true, rng);
        let bias = -libm::log((1.0 - config.prior) / config.prior);
        store.set(cls.bias, Tensor::full(&[config.classes], T::lit(bias)))?;
        let reg = Linear::new(store, "head.reg", w, 2, true, rng);
        Ok(Self {
            config: config.clone(),
            proj,
            proj_norm,
            downs,
            stem,
            tower,
            cls,
            reg,
        })
    }

    /// Gradient-free evaluation.
    pub fn outputs<T: Real>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<HeadOutput<T>> {
        let mut g = Graph::no_grad();
        let f = g.input(features.clone());
        let o = self.forward(&mut g, store, f)?;
        Ok(HeadOutput {
            logits: g.value(o.logits).clone(),
            dists: g.value(o.dists).clone(),
            lengths: o.lengths,
        })
    }
}

impl<T: Real> DetectorHead<T> for Head {
    fn forward(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, features: Var) -> Result<HeadVars> {
        let cfg = &self.config;
        let t = g.shape(features)[0];
        if g.shape(features).len() != 2 || t < cfg.min_length() {
            return Err(config_err(format!(
                "head: feature map of shape {:?} is shorter than {} steps",
                g.shape(features),
                cfg.min_length()
            )));
        }
        let prev = g.set_region(REGION_HEAD);
        let p = self.proj.forward(g, store, features)?;
        let mut level = self.proj_norm.forward(g, store, p)?;
        for layer in &self.stem {
            level = layer.forward(g, store, level)?;
        }
        let mut levels = alloc::vec![level];
        for d in &self.downs {
            let k = g.param(store, d.kernel);
            let b = g.param(store, d.bias);
            let c = g.dwconv_temporal(level, k, b, ConvGeometry { stride: 2, block: None })?;
            level = d.norm.forward(g, store, c)?;
            levels.push(level);
        }
        let lengths = levels.iter().map(|&v| g.shape(v)[0]).collect();
        for x in levels.iter_mut() {
            for layer in &self.tower {
                *x = layer.forward(g, store, *x)?;
            }
        }
        let stacked = if levels.len() == 1 { levels[0] } else { g.concat(&levels, 0)? };
        let logits = self.cls.forward(g, store, stacked)?;
        let r = self.reg.forward(g, store, stacked)?;
        let dists = g.softplus(r)?;
        g.set_region(prev);
        Ok(HeadVars { logits, dists, lengths })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::from(self.proj.ids());
        v.extend(self.proj_norm.ids());
        for d in &self.downs {
            v.extend([d.kernel, d.bias]);
            v.extend(d.norm.ids());
        }
        for t in self.stem.iter().chain(&self.tower) {
            v.extend([t.kernel, t.bias]);
            v.extend(t.mix.ids());
            v.extend(t.norm.ids());
        }
        v.extend(self.cls.ids());
        v.extend(self.reg.ids());
        v
    }
}

/// An interval in feature steps with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

/// Per-location training targets, levels stacked like [`HeadVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<Option<usize>>,
    /// `[n, 2]` distances in level-stride units (zero for negatives)
    pub offsets: Tensor<f64>,
    pub positive: Vec<bool>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Location `i` of level `l` sits at time `i * 2^l`. It is positive for the
/// shortest segment that contains it and whose larger boundary distance
/// falls in the level's regression range.
pub fn assign_targets(segments: &[Segment], cfg: &HeadConfig, t: usize) -> Targets {
    let lengths = cfg.level_lengths(t);
    let n: usize = lengths.iter().sum();
    let mut labels = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(2 * n);
    let mut positive = Vec::with_capacity(n);
    for (l, &len) in lengths.iter().enumerate() {
        let stride = cfg.stride(l) as f64;
        let (lo, hi) = cfg.range(l);
        for i in 0..len {
            let at = i as f64 * stride;
            let best = segments
                .iter()
                .filter(|s| {
                    let m = (at - s.start).max(s.end - at);
                    s.start <= at && at <= s.end && m >= lo && m < hi
                })
                .min_by(|a, b| (a.end - a.start).total_cmp(&(b.end - b.start)));
            match best {
                Some(s) => {
                    labels.push(Some(s.class));
                    offsets.extend([(at - s.start) / stride, (s.end - at) / stride]);
                    positive.push(true);
                }
                None => {
                    labels.push(None);
                    offsets.extend([0.0, 0.0]);
                    positive.push(false);
                }
            }
        }
    }
    Targets {
        labels,
        offsets: Tensor::new(alloc::vec![n, 2], offsets).expect("consistent target shape"),
        positive,
    }
}

/// Summed focal loss divided per `cfg_norm`, plus `1 - tIoU` averaged over
/// positives (zero without positives). Both divisors are clamped to 1.
pub fn compute_loss<T: Real>(g: &mut Graph<'_, T>, out: &HeadVars, targets: &Targets, cfg_norm: FocalNorm) -> Result<Var> {
    let prev = g.set_region(REGION_HEAD);
    let n = targets.labels.len();
    let focal = g.focal_loss(
        out.logits,
        Rc::new(targets.labels.clone()),
        T::lit(FOCAL_ALPHA),
        T::lit(FOCAL_GAMMA),
    )?;
    let pos = targets.num_positive();
    let denom = match cfg_norm {
        FocalNorm::Locations => n,
        FocalNorm::Positives => pos,
    };
    let cls = g.scale(focal, T::lit(1.0 / denom.max(1) as f64))?;
    let loss = if pos == 0 {
        cls
    } else {
        let iou = g.iou_loss(out.dists, Rc::new(targets.offsets.cast()), Rc::new(targets.positive.clone()))?;
        let reg = g.scale(iou, T::lit(1.0 / pos as f64))?;
        g.add(cls, reg)?
    };
    g.set_region(prev);
    Ok(loss)
}

/// A scored candidate, times in the caller's units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
    pub score: f64,
}

/// Candidates above the score threshold, in feature steps, clipped to
/// `[0, t]`, before suppression.
pub fn decode_candidates<T: Real>(out: &HeadOutput<T>, cfg: &HeadConfig, t: usize) -> Vec<Proposal> {
    let k = cfg.classes;
    let mut props = Vec::new();
    let mut row = 0;
    for (l, &len) in out.lengths.iter().enumerate() {
        let stride = cfg.stride(l) as f64;
        for i in 0..len {
            let logits = &out.logits.data()[(row + i) * k..(row + i + 1) * k];
            let (class, best) = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &x)| if x.as_f64() > acc.1 { (c, x.as_f64()) } else { acc });
            let score = crate::tensor::sigmoid(best);
            if score < cfg.score_threshold {
                continue;
            }
            let at = i as f64 * stride;
            let d = &out.dists.data()[2 * (row + i)..2 * (row + i) + 2];
            let s = (at - d[0].as_f64() * stride).max(0.0);
            let e = (at + d[1].as_f64() * stride).min(t as f64);
            if e > s {
                props.push(Proposal {
                    t_start: s,
                    t_end: e,
                    class,
                    score,
                });
            }
        }
        row += len;
    }
    props
}

pub fn decode_proposals<T: Real>(out: &HeadOutput<T>, cfg: &HeadConfig, t: usize) -> Vec<Proposal> {
    nms(decode_candidates(out, cfg, t), cfg.nms_threshold, cfg.max_proposals)
}

/// Greedy class-wise hard suppression: a proposal is dropped when it
/// overlaps an already kept one of its class by more than `thresh`.
pub fn nms(mut props: Vec<Proposal>, thresh: f64, max: usize) -> Vec<Proposal> {
    props.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Proposal> = Vec::new();
    for p in props {
        if kept.len() >= max {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class == p.class && tiou((k.t_start, k.t_end), (p.t_start, p.t_end)) > thresh);
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}
