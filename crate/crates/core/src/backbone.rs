//! Chunked transformer video encoder with adapter placements.
//!
//! Frames `[t, h, w, c]` are cut into `patch × patch` tokens, embedded, and
//! passed through pre-norm transformer blocks whose self-attention runs
//! inside clips of `chunk_len` frames. Between blocks the full sequence is
//! reassembled, so adapters placed inside the backbone see the whole time
//! axis. Spatial pooling of the final tokens gives one feature per frame.
//!
//! The snippet representation instead encodes, for every frame, a centred
//! window of `chunk_len` neighbouring frames on its own and pools over space
//! and time.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::adapters::{init_adapter, AdapterConfig, AdapterWeights};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{BlockRef, Graph, Region, Var};
use crate::layers::{uniform, Linear, Norm};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{ConvGeometry, Tensor};

pub const REGION_BACKBONE: Region = "backbone";
pub const REGION_ADAPTER: Region = "adapter";
/// Parameter-free pooling of the final tokens.
pub const REGION_READOUT: Region = "readout";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Frames per attention clip; also the snippet length.
    pub chunk_len: usize,
    pub patch: usize,
    /// Input frames are `frame_size × frame_size`.
    pub frame_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            chunk_len: 16,
            patch: 4,
            frame_size: 8,
            channels: 3,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn tokens_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(config_err(format!("backbone: {m}")));
        if self.layers == 0 {
            return bad("needs at least one layer");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(&format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch == 0 || self.frame_size == 0 || self.frame_size % self.patch != 0 {
            return bad(&format!(
                "frame size {} not divisible by patch {}",
                self.frame_size, self.patch
            ));
        }
        if self.chunk_len == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("chunk_len, channels and mlp_ratio must be positive");
        }
        Ok(())
    }

    /// Element count of all backbone parameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hid = d * self.mlp_ratio;
        let per_block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d);
        self.patch_dim() * d + d + self.chunk_len * self.tokens_per_frame() * d + self.layers * per_block
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Frozen,
    FullFT,
    AdapterInside,
    AdapterOutside { adapt_last_half: bool },
    FullFTPlusTIA,
}

impl EncodeMode {
    pub fn name(self) -> &'static str {
        match self {
            EncodeMode::Frozen => "frozen",
            EncodeMode::FullFT => "full_ft",
            EncodeMode::AdapterInside => "adapter_inside",
            EncodeMode::AdapterOutside { adapt_last_half: false } => "adapter_outside",
            EncodeMode::AdapterOutside { adapt_last_half: true } => "adapter_outside_half",
            EncodeMode::FullFTPlusTIA => "full_ft_plus_tia",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "frozen" => EncodeMode::Frozen,
            "full_ft" => EncodeMode::FullFT,
            "adapter_inside" => EncodeMode::AdapterInside,
            "adapter_outside" => EncodeMode::AdapterOutside { adapt_last_half: false },
            "adapter_outside_half" => EncodeMode::AdapterOutside { adapt_last_half: true },
            "full_ft_plus_tia" => EncodeMode::FullFTPlusTIA,
            _ => return None,
        })
    }

    pub fn backbone_trainable(self) -> bool {
        matches!(self, EncodeMode::FullFT | EncodeMode::FullFTPlusTIA)
    }

    pub fn adapters_inside(self) -> bool {
        matches!(self, EncodeMode::AdapterInside | EncodeMode::FullFTPlusTIA)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Representation {
    #[default]
    Frame,
    Snippet,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Frame => "frame",
            Representation::Snippet => "snippet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frame" => Some(Representation::Frame),
            "snippet" => Some(Representation::Snippet),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    pub repr: Representation,
    /// Recompute blocks during backward, `segment_len` blocks at a time.
    pub checkpoint: bool,
    pub segment_len: Option<usize>,
}

/// Pooled features, one row per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    /// Frames per feature step.
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockWeights {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.norm1.ids());
        v.extend(self.qkv.ids());
        v.extend(self.proj.ids());
        v.extend(self.norm2.ids());
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    /// `[chunk_len * tokens_per_frame, d]`, shared by every clip.
    pub pos: ParamId,
    pub blocks: Vec<BlockWeights>,
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new(store, "backbone.patch_embed", config.patch_dim(), d, true, rng);
        // the same spatial embedding for every frame of a clip
        let p = config.tokens_per_frame();
        let spatial: Tensor<T> = uniform(rng, &[p, d], 0.02);
        let pos = Tensor::from_fn(&[config.chunk_len * p, d], |i| spatial.data()[i % (p * d)]);
        let pos = store.add("backbone.pos", pos, true);
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let n = |s: &str| format!("backbone.blocks.{i}.{s}");
            blocks.push(BlockWeights {
                norm1: Norm::new(store, &n("norm1"), d, true),
                qkv: Linear::new(store, &n("qkv"), d, 3 * d, true, rng),
                proj: Linear::new(store, &n("proj"), d, d, true, rng),
                norm2: Norm::new(store, &n("norm2"), d, true),
                fc1: Linear::new(store, &n("fc1"), d, d * config.mlp_ratio, true, rng),
                fc2: Linear::new(store, &n("fc2"), d * config.mlp_ratio, d, true, rng),
            });
        }
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos,
            blocks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::from(self.patch_embed.ids());
        v.push(self.pos);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v
    }

    pub fn set_trainable<T: Real>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for id in self.param_ids() {
            store.set_trainable(id, trainable);
        }
    }

    /// `[t, h, w, c]` frames to `[t, p, patch*patch*c]` token rows.
    pub fn patchify<T: Real>(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let s = video.shape();
        if s.len() != 4 || s[1] != cfg.frame_size || s[2] != cfg.frame_size || s[3] != cfg.channels || s[0] == 0 {
            return Err(shape_err(
                "patchify",
                s,
                &[0, cfg.frame_size, cfg.frame_size, cfg.channels],
            ));
        }
        let (t, side, c, pp) = (s[0], cfg.frame_size / cfg.patch, cfg.channels, cfg.patch);
        let fs = cfg.frame_size;
        let pd = cfg.patch_dim();
        let src = video.data();
        let mut out = Vec::with_capacity(video.numel());
        for f in 0..t {
            for py in 0..side {
                for px in 0..side {
                    for y in 0..pp {
                        for x in 0..pp {
                            let base = ((f * fs + py * pp + y) * fs + px * pp + x) * c;
                            out.extend_from_slice(&src[base..base + c]);
                        }
                    }
                }
            }
        }
        Tensor::new(alloc::vec![t, side * side, pd], out)
    }

    /// Patch embedding plus positions; `t` must be a multiple of `chunk_len`.
    fn embed<T: Real>(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, tokens: Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let (t, p, pd) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let x = g.input(tokens.reshape(&[t * p, pd])?);
        let e = self.patch_embed.forward(g, store, x)?;
        let e = g.reshape(e, &[t / cfg.chunk_len, cfg.chunk_len * p, cfg.dim])?;
        let pos = g.param(store, self.pos);
        let e = g.add(e, pos)?;
        g.reshape(e, &[t, p, cfg.dim])
    }

    /// One pre-norm block over `[t, p, d]` with attention inside clips.
    pub fn block_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = &self.blocks[layer];
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.dim || shape[0] % cfg.chunk_len != 0 {
            return Err(shape_err("block", &shape, &[cfg.chunk_len, 0, cfg.dim]));
        }
        let (t, p, d) = (shape[0], shape[1], shape[2]);
        let (c, l, h) = (t / cfg.chunk_len, cfg.chunk_len * p, cfg.heads);
        let dh = d / h;
        let flat = g.reshape(x, &[t * p, d])?;
        let n1 = b.norm1.forward(g, store, flat)?;
        let qkv = b.qkv.forward(g, store, n1)?;
        let qkv = g.reshape(qkv, &[c, l, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [Var::default(); 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = g.slice(qkv, 0, i, i + 1)?;
            *part = g.reshape(s, &[c * h, l, dh])?;
        }
        let [q, k, v] = parts;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / libm::sqrt(dh as f64)))?;
        let att = g.softmax(scores)?;
        let o = g.matmul(att, v)?;
        let o = g.reshape(o, &[c, h, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[t * p, d])?;
        let o = b.proj.forward(g, store, o)?;
        let x1 = g.add(flat, o)?;
        let n2 = b.norm2.forward(g, store, x1)?;
        let f = b.fc1.forward(g, store, n2)?;
        let f = g.gelu(f)?;
        let f = b.fc2.forward(g, store, f)?;
        let x2 = g.add(x1, f)?;
        g.reshape(x2, &[t, p, d])
    }
}

/// Backbone plus the adapters required by an [`EncodeMode`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    pub mode: EncodeMode,
    /// `(layer, adapter)`; inside adapters follow that block, side adapters
    /// tap its output.
    pub adapters: Vec<(usize, AdapterWeights)>,
}

impl Encoder {
    /// Builds the backbone and adapters and applies the mode's freezing rule.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        mode: EncodeMode,
        adapter: AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, config, rng)?;
        let n = config.layers;
        let layers: Vec<usize> = match mode {
            EncodeMode::Frozen | EncodeMode::FullFT => Vec::new(),
            EncodeMode::AdapterInside | EncodeMode::FullFTPlusTIA => (0..n).collect(),
            EncodeMode::AdapterOutside { adapt_last_half: false } => (0..n).collect(),
            EncodeMode::AdapterOutside { adapt_last_half: true } => (n / 2..n).collect(),
        };
        if !layers.is_empty() && adapter.dim != config.dim {
            return Err(shape_err("adapter", &[adapter.dim], &[config.dim]));
        }
        let mut adapters = Vec::with_capacity(layers.len());
        for i in layers {
            adapters.push((i, init_adapter(store, &format!("adapter.{i}"), adapter, rng)?));
        }
        let enc = Self { backbone, mode, adapters };
        enc.freeze_backbone(store);
        Ok(enc)
    }

    /// Sets backbone trainability according to the mode; adapters always
    /// train.
    pub fn freeze_backbone<T: Real>(&self, store: &mut ParamStore<T>) {
        self.backbone.set_trainable(store, self.mode.backbone_trainable());
        for (_, a) in &self.adapters {
            a.set_trainable(store, true);
        }
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|(_, a)| a.param_ids()).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.param_ids();
        v.extend(self.adapter_ids());
        v
    }

    fn inside_adapter(&self, layer: usize) -> Option<&AdapterWeights> {
        if !self.mode.adapters_inside() {
            return None;
        }
        self.adapters.iter().find(|(i, _)| *i == layer).map(|(_, a)| a)
    }

    /// Encodes `[t, h, w, c]` frames to a `[t, d]` feature variable.
    pub fn encode<'a, T: Real>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        video: &Tensor<T>,
        opts: EncodeOptions,
    ) -> Result<Var> {
        let cfg = &self.backbone.config;
        let tokens = self.backbone.patchify(video)?;
        let t = tokens.shape()[0];
        let cl = cfg.chunk_len;
        let (tokens, geo) = match opts.repr {
            Representation::Frame => (pad_frames(&tokens, t.div_ceil(cl) * cl)?, ConvGeometry::default()),
            Representation::Snippet => (
                snippet_frames(&tokens, cl)?,
                ConvGeometry {
                    stride: 1,
                    block: Some(cl),
                },
            ),
        };
        let prev = g.set_region(REGION_BACKBONE);
        let x = self.backbone.embed(g, store, tokens)?;

        let units: Vec<BlockRef<'a, T>> = (0..cfg.layers)
            .map(|i| {
                let inside = self.inside_adapter(i);
                let bb = &self.backbone;
                Rc::new(move |g: &mut Graph<'_, T>, x: Var| -> Result<Var> {
                    let r = g.set_region(REGION_BACKBONE);
                    let mut y = bb.block_forward(g, store, i, x)?;
                    if let Some(a) = inside {
                        g.set_region(REGION_ADAPTER);
                        y = a.forward(g, store, y, geo)?;
                    }
                    g.set_region(r);
                    Ok(y)
                }) as BlockRef<'a, T>
            })
            .collect();

        let side = matches!(self.mode, EncodeMode::AdapterOutside { .. });
        let y = if side {
            // side branches need every tapped output, so run plainly
            let mut cur = x;
            let mut branches = Vec::new();
            for (i, unit) in units.iter().enumerate() {
                cur = unit.forward(g, cur)?;
                for (_, a) in self.adapters.iter().filter(|(l, _)| *l == i) {
                    g.set_region(REGION_ADAPTER);
                    branches.push(a.side_forward(g, store, cur, geo)?);
                    g.set_region(REGION_BACKBONE);
                }
            }
            g.set_region(REGION_ADAPTER);
            for b in branches {
                cur = g.add(cur, b)?;
            }
            cur
        } else if opts.checkpoint {
            g.checkpointed_sequence(&units, x, opts.segment_len)?
        } else {
            g.sequence(&units, x)?
        };

        g.set_region(REGION_READOUT);
        let pooled = g.spatial_avg_pool(y)?;
        let out = match opts.repr {
            Representation::Frame => {
                if pooled_len(g, pooled) == t {
                    pooled
                } else {
                    g.slice(pooled, 0, 0, t)?
                }
            }
            Representation::Snippet => {
                let r = g.reshape(pooled, &[t, cl, cfg.dim])?;
                g.spatial_avg_pool(r)?
            }
        };
        g.set_region(prev);
        Ok(out)
    }

    /// Gradient-free encoding.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, video: &Tensor<T>, repr: Representation) -> Result<FeatureMap<T>> {
        let mut g = Graph::no_grad();
        let v = self.encode(
            &mut g,
            store,
            video,
            EncodeOptions {
                repr,
                ..Default::default()
            },
        )?;
        Ok(FeatureMap {
            values: g.value(v).clone(),
            stride: 1,
        })
    }
}

fn pooled_len<T: Real>(g: &Graph<'_, T>, v: Var) -> usize {
    g.shape(v)[0]
}

/// Pads `[t, ...]` to `target` steps by repeating the last step.
fn pad_frames<T: Real>(x: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let t = x.shape()[0];
    if target == t {
        return Ok(x.clone());
    }
    let row: usize = x.shape()[1..].iter().product();
    let mut data = x.data().to_vec();
    let last = x.data()[(t - 1) * row..].to_vec();
    for _ in t..target {
        data.extend_from_slice(&last);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = target;
    Tensor::new(shape, data)
}

/// For every step `τ`, the `len` steps `τ - len/2 .. τ + len - len/2`,
/// clamped to the sequence, stacked into `[t * len, ...]`.
pub fn snippet_frames<T: Real>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let t = x.shape()[0];
    if len > t {
        return Err(config_err(format!("snippet length {len} exceeds {t} frames")));
    }
    let row: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(t * len * row);
    for tau in 0..t {
        for j in 0..len {
            let src = (tau + j).saturating_sub(len / 2).min(t - 1);
            data.extend_from_slice(&x.data()[src * row..(src + 1) * row]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = t * len;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MemoryMeter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            chunk_len: 4,
            patch: 2,
            frame_size: 4,
            channels: 3,
            mlp_ratio: 2,
        }
    }

    fn video(rng: &mut ChaCha8Rng, t: usize, cfg: &BackboneConfig) -> Tensor<f32> {
        uniform(rng, &[t, cfg.frame_size, cfg.frame_size, cfg.channels], 1.0)
    }

    fn encoder(mode: EncodeMode, seed: u64) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let cfg = toy();
        let enc = Encoder::new(&mut store, &cfg, mode, AdapterConfig::tia(16, 4, 3), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, enc)
    }

    #[test]
    fn param_count_matches_store() {
        let (store, enc) = encoder(EncodeMode::Frozen, 0);
        assert_eq!(store.numel(&enc.backbone.param_ids()), toy().param_count());
        assert_eq!(store.trainable_count(), 0);
    }

    #[test]
    fn chunk_count_example() {
        let cfg = BackboneConfig::default();
        assert_eq!(768 / cfg.chunk_len, 48);
    }

    #[test]
    fn mode_trainability() {
        let (store, enc) = encoder(EncodeMode::FullFT, 0);
        assert_eq!(store.trainable_count(), store.total_count());
        assert!(enc.adapters.is_empty());
        let (store, enc) = encoder(EncodeMode::FullFTPlusTIA, 0);
        assert_eq!(store.trainable_count(), store.total_count());
        assert_eq!(enc.adapters.len(), 2);
        let (store, enc) = encoder(EncodeMode::AdapterInside, 0);
        assert_eq!(store.trainable_count(), store.numel(&enc.adapter_ids()));
    }

    #[test]
    fn last_half_taps() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig {
            layers: 12,
            ..toy()
        };
        let enc = Encoder::new(
            &mut store,
            &cfg,
            EncodeMode::AdapterOutside { adapt_last_half: true },
            AdapterConfig::tia(16, 4, 3),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let layers: Vec<usize> = enc.adapters.iter().map(|(l, _)| *l).collect();
        assert_eq!(layers, (6..12).collect::<Vec<_>>());
    }

    #[test]
    fn placements_agree_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s0, frozen) = encoder(EncodeMode::Frozen, 7);
        let (s1, inside) = encoder(EncodeMode::AdapterInside, 7);
        let (s2, outside) = encoder(EncodeMode::AdapterOutside { adapt_last_half: false }, 7);
        for _ in 0..5 {
            let t = rng.gen_range(1..14);
            let v = video(&mut rng, t, &toy());
            let a = frozen.features(&s0, &v, Representation::Frame).unwrap();
            assert_eq!(a.values.shape(), &[t, 16]);
            assert_eq!(a, inside.features(&s1, &v, Representation::Frame).unwrap());
            assert_eq!(a, outside.features(&s2, &v, Representation::Frame).unwrap());
        }
    }

    #[test]
    fn constant_video_gives_constant_rows() {
        let (store, enc) = encoder(EncodeMode::Frozen, 3);
        let frame: Tensor<f32> = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[4, 4, 3], 1.0);
        let v = Tensor::from_fn(&[10, 4, 4, 3], |i| frame.data()[i % 48]);
        let f = enc.features(&store, &v, Representation::Frame).unwrap().values;
        for r in 1..10 {
            assert_eq!(f.data()[r * 16..(r + 1) * 16], f.data()[..16]);
        }
        // a single snippet of the constant equals the frame-mode encoding of one clip
        let one = Tensor::from_fn(&[1, 4, 4, 3], |i| frame.data()[i]);
        assert!(enc.features(&store, &one, Representation::Snippet).is_err());
        let four = Tensor::from_fn(&[4, 4, 4, 3], |i| frame.data()[i % 48]);
        let s = enc.features(&store, &four, Representation::Snippet).unwrap().values;
        for r in 0..4 {
            let d = s.data()[r * 16..(r + 1) * 16].iter().zip(&f.data()[..16]);
            for (a, b) in d {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn snippet_gather_is_centred_and_clamped() {
        let x = Tensor::<f32>::from_fn(&[5, 1], |i| i as f32);
        let s = snippet_frames(&x, 4).unwrap();
        assert_eq!(s.shape(), &[20, 1]);
        assert_eq!(&s.data()[..4], &[0., 0., 0., 1.]);
        assert_eq!(&s.data()[8..12], &[0., 1., 2., 3.]);
        assert_eq!(&s.data()[16..], &[2., 3., 4., 4.]);
    }

    #[test]
    fn outside_mode_never_touches_backbone_backward() {
        let (store, enc) = encoder(EncodeMode::AdapterOutside { adapt_last_half: false }, 5);
        let v = video(&mut ChaCha8Rng::seed_from_u64(4), 8, &toy());
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &v, EncodeOptions::default()).unwrap();
        let sq = g.mul(f, f).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(g.backward_count(REGION_BACKBONE), 0);
        assert!(g.backward_count(REGION_ADAPTER) > 0);
        let ids = enc.adapter_ids();
        assert!(grads.iter().all(|(id, _)| ids.contains(&id)));
    }

    #[test]
    fn cross_clip_mixing_after_reassembly() {
        let (mut store, enc) = encoder(EncodeMode::AdapterInside, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (_, a) in &enc.adapters {
            let tp = a.temporal.unwrap();
            let h = a.config.hidden();
            store.set(tp.dw_kernel, Tensor::from_fn(&[h, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 })).unwrap();
            store.set(a.up.weight, uniform(&mut rng, &[h, 16], 0.5)).unwrap();
        }
        let v = video(&mut rng, 8, &toy());
        let base = enc.features(&store, &v, Representation::Frame).unwrap().values;
        let j = 3; // last frame of the first clip
        let mut w = v.clone();
        let row = 4 * 4 * 3;
        for e in &mut w.data_mut()[j * row..(j + 1) * row] {
            *e += 1.0;
        }
        let moved = enc.features(&store, &w, Representation::Frame).unwrap().values;
        let diff = |r: usize| {
            base.data()[r * 16..(r + 1) * 16]
                .iter()
                .zip(&moved.data()[r * 16..(r + 1) * 16])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max)
        };
        assert!(diff(j + 1) > 0.0);

        // without adapters the next clip is untouched
        let (s0, plain) = encoder(EncodeMode::Frozen, 6);
        let a = plain.features(&s0, &v, Representation::Frame).unwrap().values;
        let b = plain.features(&s0, &w, Representation::Frame).unwrap().values;
        assert_eq!(a.data()[4 * 16..], b.data()[4 * 16..]);
    }

    #[test]
    fn snippet_encoding_retains_more() {
        let (store, enc) = encoder(EncodeMode::FullFT, 9);
        let v = video(&mut ChaCha8Rng::seed_from_u64(1), 16, &toy());
        let peak = |repr| {
            let meter = MemoryMeter::new();
            let mut g = Graph::with_meter(meter.clone(), true);
            enc.encode(&mut g, &store, &v, EncodeOptions { repr, ..Default::default() }).unwrap();
            meter.peak_elements()
        };
        let ratio = peak(Representation::Snippet) as f64 / peak(Representation::Frame) as f64;
        assert!((3.0..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn checkpointed_encode_matches() {
        let (store, enc) = encoder(EncodeMode::AdapterInside, 2);
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, a) in &enc.adapters {
            store.set(a.up.weight, uniform(&mut rng, &[4, 16], 0.5)).unwrap();
        }
        let v = video(&mut rng, 8, &toy());
        let run = |checkpoint| {
            let mut g = Graph::new();
            let f = enc
                .encode(&mut g, &store, &v, EncodeOptions { checkpoint, segment_len: Some(1), ..Default::default() })
                .unwrap();
            let sq = g.mul(f, f).unwrap();
            let l = g.sum(sq).unwrap();
            let val = g.value(l).item();
            (val, g.backward(l).unwrap())
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        assert_eq!(a, b);
        for (id, t) in ga.iter() {
            let u = gb.get(id).unwrap();
            for (x, y) in t.data().iter().zip(u.data()) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3));
            }
        }
    }
}
