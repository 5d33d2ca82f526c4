//! Analytic training-memory model.
//!
//! Activations: `a · d · T_eff · N_backprop · bpe` for the backbone, where
//! `T_eff` is `T` for frames and `chunk_len · T` for snippets and
//! `N_backprop` is the number of blocks whose outputs are kept for backward.
//! Checkpointing keeps only segment boundaries. Outside adapters keep no
//! backbone activations, just their own tap and hidden tensors.
//!
//! Parameters, gradients and optimizer moments count 4 bytes per element;
//! gradients and moments cover trainable parameters only. Framework
//! overheads and the detection head are not modelled.

use alloc::format;
use alloc::vec::Vec;

use crate::adapters::{count_params, AdapterConfig};
use crate::backbone::{BackboneConfig, EncodeMode, Representation};
use crate::error::{config_err, Result};

/// Retained activations per transformer block.
pub const ACTIVATIONS_PER_BLOCK: u64 = 4;
/// Adam keeps two moments per trainable parameter.
pub const OPTIMIZER_FACTOR: u64 = 2;
pub const MASTER_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Fp32,
    /// Half-precision activations, fp32 master weights and moments.
    Mixed,
}

impl Precision {
    pub fn activation_bytes(self) -> u64 {
        match self {
            Precision::Fp32 => 4,
            Precision::Mixed => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fp32" => Some(Precision::Fp32),
            "mixed" => Some(Precision::Mixed),
            _ => None,
        }
    }
}

/// How a model is fine-tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strategy {
    pub mode: EncodeMode,
    pub repr: Representation,
    pub checkpoint: bool,
    pub precision: Precision,
}

impl Strategy {
    pub fn new(mode: EncodeMode) -> Self {
        Self {
            mode,
            repr: Representation::Frame,
            checkpoint: false,
            precision: Precision::Fp32,
        }
    }

    pub fn label(&self) -> alloc::string::String {
        let mut s = alloc::string::String::from(self.mode.name());
        if self.checkpoint {
            s.push_str("+ckpt");
        }
        if self.precision == Precision::Mixed {
            s.push_str("+amp");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryShape {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Frames (or snippet centres) per clip.
    pub frames: usize,
}

impl MemoryShape {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate()?;
        if self.adapter.dim != self.backbone.dim {
            return Err(config_err(format!(
                "adapter dim {} does not match backbone dim {}",
                self.adapter.dim, self.backbone.dim
            )));
        }
        if self.frames == 0 {
            return Err(config_err("memory model needs at least one frame"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryEstimate {
    pub strategy: Strategy,
    pub shape: MemoryShape,
    pub activation_bytes: u64,
    pub parameter_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    pub total_bytes: u64,
}

/// Number of checkpoint segments for `layers` blocks, `ceil(sqrt(layers))`
/// blocks per segment.
pub fn checkpoint_segments(layers: usize) -> usize {
    let len = libm::ceil(libm::sqrt(layers as f64)) as usize;
    layers.div_ceil(len.max(1))
}

fn adapted_layers(mode: EncodeMode, layers: usize) -> usize {
    match mode {
        EncodeMode::Frozen | EncodeMode::FullFT => 0,
        EncodeMode::AdapterInside | EncodeMode::FullFTPlusTIA => layers,
        EncodeMode::AdapterOutside { adapt_last_half: false } => layers,
        EncodeMode::AdapterOutside { adapt_last_half: true } => layers - layers / 2,
    }
}

pub fn estimate(strategy: Strategy, shape: &MemoryShape) -> Result<MemoryEstimate> {
    shape.validate()?;
    let b = &shape.backbone;
    let (n, d) = (b.layers as u64, b.dim as u64);
    let t_eff = match strategy.repr {
        Representation::Frame => shape.frames as u64,
        Representation::Snippet => (shape.frames * b.chunk_len) as u64,
    };
    let bpe = strategy.precision.activation_bytes();
    let adapted = adapted_layers(strategy.mode, b.layers) as u64;
    let blocks_kept = match strategy.mode {
        EncodeMode::Frozen | EncodeMode::AdapterOutside { .. } => 0,
        _ if strategy.checkpoint => checkpoint_segments(b.layers) as u64,
        _ => n,
    };
    let mut activations = ACTIVATIONS_PER_BLOCK * d * t_eff * blocks_kept;
    if let EncodeMode::AdapterOutside { .. } = strategy.mode {
        let h = shape.adapter.hidden() as u64;
        activations += (d + ACTIVATIONS_PER_BLOCK * h) * t_eff * adapted;
    }
    let backbone_params = b.param_count() as u64;
    let adapter_params = count_params(&shape.adapter) as u64 * adapted;
    let trainable = adapter_params + if strategy.mode.backbone_trainable() { backbone_params } else { 0 };
    let activation_bytes = activations * bpe;
    let parameter_bytes = (backbone_params + adapter_params) * MASTER_BYTES;
    let gradient_bytes = trainable * MASTER_BYTES;
    let optimizer_bytes = OPTIMIZER_FACTOR * trainable * MASTER_BYTES;
    Ok(MemoryEstimate {
        strategy,
        shape: *shape,
        activation_bytes,
        parameter_bytes,
        gradient_bytes,
        optimizer_bytes,
        total_bytes: activation_bytes + parameter_bytes + gradient_bytes + optimizer_bytes,
    })
}

/// Every strategy on every shape, shape-major.
pub fn compare_strategies(shapes: &[MemoryShape], strategies: &[Strategy]) -> Result<Vec<MemoryEstimate>> {
    let mut out = Vec::with_capacity(shapes.len() * strategies.len());
    for s in shapes {
        for &st in strategies {
            out.push(estimate(st, s)?);
        }
    }
    Ok(out)
}

/// `total(FullFT) > total(AdapterInside) > total(AdapterOutside)` for a
/// shape under otherwise identical settings.
pub fn placement_ordering_holds(shape: &MemoryShape, base: Strategy) -> Result<bool> {
    let total = |mode| estimate(Strategy { mode, ..base }, shape).map(|e| e.total_bytes);
    let full = total(EncodeMode::FullFT)?;
    let inside = total(EncodeMode::AdapterInside)?;
    let outside = total(EncodeMode::AdapterOutside { adapt_last_half: false })?;
    Ok(full > inside && inside > outside)
}
