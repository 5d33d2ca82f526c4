//! Bottleneck adapters.
//!
//! Three bodies share one weight layout:
//!
//! * [`AdapterKind::Standard`]: `x' = W_up·σ(W_down·x) + x`.
//! * [`AdapterKind::Tia`], the temporal-informative adapter:
//!   `x̄ = σ(W_down·x)`, `x̂ = W_mid·DWConv_k(x̄) + x̄`, `x' = α·W_up·x̂ + x`.
//! * [`AdapterKind::TiaNoResidual`]: as `Tia` without the inner `+ x̄`.
//!
//! `W_up` and its bias start at zero and `α` at one, so a fresh adapter is
//! the identity when placed inside a backbone and exactly zero when used as
//! a side branch ([`AdapterWeights::side_forward`]).
//!
//! Activations are `[t, s, d]` (or `[t, d]`); projections act on the channel
//! axis and the depth-wise convolution runs along `t` only.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{uniform, Linear};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{ConvGeometry, Tensor};

pub const DEFAULT_GAMMA: usize = 4;
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdapterKind {
    Standard,
    #[default]
    Tia,
    TiaNoResidual,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Standard => "standard",
            AdapterKind::Tia => "tia",
            AdapterKind::TiaNoResidual => "tia_no_residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(AdapterKind::Standard),
            "tia" => Some(AdapterKind::Tia),
            "tia_no_residual" => Some(AdapterKind::TiaNoResidual),
            _ => None,
        }
    }

    fn has_temporal(self) -> bool {
        !matches!(self, AdapterKind::Standard)
    }
}

/// Where adapters sit relative to the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlacementMode {
    /// Inserted after every block, output feeds the next block.
    Inside,
    /// Side branches on tapped block outputs, summed into the final output.
    Outside { adapt_last_half: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterConfig {
    pub dim: usize,
    pub gamma: usize,
    pub kernel: usize,
    pub kind: AdapterKind,
}

impl AdapterConfig {
    pub fn tia(dim: usize, gamma: usize, kernel: usize) -> Self {
        Self {
            dim,
            gamma,
            kernel,
            kind: AdapterKind::Tia,
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 2 {
            return Err(config_err(format!("adapter gamma must be >= 2, got {}", self.gamma)));
        }
        if self.dim == 0 || self.dim % self.gamma != 0 {
            return Err(config_err(format!(
                "adapter width {} is not divisible by gamma {}",
                self.dim, self.gamma
            )));
        }
        if self.kind.has_temporal() && self.kernel % 2 == 0 {
            return Err(config_err(format!(
                "temporal kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Closed-form trainable element count, biases and `α` included.
pub fn count_params(cfg: &AdapterConfig) -> usize {
    let (d, h, k) = (cfg.dim, cfg.hidden(), cfg.kernel);
    let base = d * h + h + h * d + d;
    match cfg.kind {
        AdapterKind::Standard => base,
        AdapterKind::Tia | AdapterKind::TiaNoResidual => base + h * h + h + h * k + h + 1,
    }
}

/// Element count excluding every bias (and `α`).
pub fn count_params_without_bias(cfg: &AdapterConfig) -> usize {
    let (d, h, k) = (cfg.dim, cfg.hidden(), cfg.kernel);
    match cfg.kind {
        AdapterKind::Standard => 2 * d * h,
        AdapterKind::Tia | AdapterKind::TiaNoResidual => 2 * d * h + h * h + h * k,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalParts {
    pub mid: Linear,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub alpha: ParamId,
}

/// Weights of one adapter instance, stored in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdapterWeights {
    pub config: AdapterConfig,
    pub down: Linear,
    pub up: Linear,
    pub temporal: Option<TemporalParts>,
}

/// Temporal-informative adapter with the default layout.
pub fn init_tia<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
    gamma: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<AdapterWeights> {
    init_adapter(store, name, AdapterConfig::tia(dim, gamma, kernel), rng)
}

/// `W_down`/`W_mid` uniform in `±1/sqrt(fan_in)` with zero biases,
/// depth-wise kernel the identity (centre tap 1), `W_up` and its bias zero,
/// `α = 1`. All parameters are trainable.
pub fn init_adapter<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    config: AdapterConfig,
    rng: &mut R,
) -> Result<AdapterWeights> {
    config.validate()?;
    let (d, h, k) = (config.dim, config.hidden(), config.kernel);
    let down = Linear::new(store, &format!("{name}.down"), d, h, true, rng);
    let temporal = if config.kind.has_temporal() {
        let bound = 1.0 / libm::sqrt(h as f64);
        let mid_w = store.add(format!("{name}.mid.weight"), uniform(rng, &[h, h], bound), true);
        let mid_b = store.add(format!("{name}.mid.bias"), Tensor::zeros(&[h]), true);
        let centre = k / 2;
        let kern = Tensor::from_fn(&[h, k], |i| if i % k == centre { T::one() } else { T::zero() });
        let dw_kernel = store.add(format!("{name}.dw.kernel"), kern, true);
        let dw_bias = store.add(format!("{name}.dw.bias"), Tensor::zeros(&[h]), true);
        let alpha = store.add(format!("{name}.alpha"), Tensor::scalar(T::one()), true);
        Some(TemporalParts {
            mid: Linear {
                weight: mid_w,
                bias: mid_b,
                d_in: h,
                d_out: h,
            },
            dw_kernel,
            dw_bias,
            alpha,
        })
    } else {
        None
    };
    let up = Linear::zeros(store, &format!("{name}.up"), h, d, true);
    Ok(AdapterWeights {
        config,
        down,
        up,
        temporal,
    })
}

impl AdapterWeights {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::from(self.down.ids());
        if let Some(t) = &self.temporal {
            v.extend(t.mid.ids());
            v.extend([t.dw_kernel, t.dw_bias, t.alpha]);
        }
        v.extend(self.up.ids());
        v
    }

    pub fn set_trainable<T: Real>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for id in self.param_ids() {
            store.set_trainable(id, trainable);
        }
    }

    /// Inside placement: `branch(x) + x`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        x: Var,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let b = self.branch(g, store, x, geo)?;
        g.add(b, x)
    }

    /// Side placement: the branch alone, without the outer residual.
    pub fn side_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        x: Var,
        geo: ConvGeometry,
    ) -> Result<Var> {
        self.branch(g, store, x, geo)
    }

    fn branch<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        store: &ParamStore<T>,
        x: Var,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d = self.config.dim;
        if shape.len() < 2 || shape.len() > 3 || *shape.last().unwrap() != d {
            return Err(shape_err("adapter", &shape, &[d]));
        }
        let (t, s) = if shape.len() == 3 { (shape[0], shape[1]) } else { (shape[0], 1) };
        let h = self.config.hidden();
        let flat = g.reshape(x, &[t * s, d])?;
        let down = self.down.forward(g, store, flat)?;
        let bar = g.gelu(down)?;
        let hat = match &self.temporal {
            None => bar,
            Some(tp) => {
                let seq = g.reshape(bar, &[t, s, h])?;
                let kern = g.param(store, tp.dw_kernel);
                let kb = g.param(store, tp.dw_bias);
                let conv = g.dwconv_temporal(seq, kern, kb, geo)?;
                let conv = g.reshape(conv, &[t * s, h])?;
                let mixed = tp.mid.forward(g, store, conv)?;
                match self.config.kind {
                    AdapterKind::TiaNoResidual => mixed,
                    _ => g.add(mixed, bar)?,
                }
            }
        };
        let up = self.up.forward(g, store, hat)?;
        let out = match &self.temporal {
            Some(tp) => {
                let alpha = g.param(store, tp.alpha);
                g.mul_scalar(up, alpha)?
            }
            None => up,
        };
        g.reshape(out, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn run<T: Real>(w: &AdapterWeights, store: &ParamStore<T>, x: &Tensor<T>, side: bool) -> Tensor<T> {
        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let y = if side {
            w.side_forward(&mut g, store, xv, ConvGeometry::default()).unwrap()
        } else {
            w.forward(&mut g, store, xv, ConvGeometry::default()).unwrap()
        };
        g.value(y).clone()
    }

    #[test]
    fn init_rules() {
        let mut store = ParamStore::<f32>::new();
        let w = init_tia(&mut store, "a", 8, 4, 3, &mut rng(0)).unwrap();
        assert_eq!(w.config.hidden(), 2);
        let up = store.tensor(w.up.weight);
        assert_eq!(up.shape(), &[2, 8]);
        assert!(up.data().iter().all(|&v| v == 0.0));
        assert!(store.tensor(w.up.bias).data().iter().all(|&v| v == 0.0));
        let tp = w.temporal.unwrap();
        assert_eq!(store.tensor(tp.alpha).item(), 1.0);
        assert_eq!(store.tensor(tp.dw_kernel).data(), &[0., 1., 0., 0., 1., 0.]);
    }

    #[test]
    fn invalid_configs() {
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            init_tia(&mut store, "a", 7, 4, 3, &mut rng(0)),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            init_tia(&mut store, "a", 8, 4, 2, &mut rng(0)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn count_closed_form() {
        assert_eq!(count_params(&AdapterConfig::tia(384, 4, 3)), 83_905);
        // 18 + 6 + 8 + 24 + 1
        assert_eq!(count_params(&AdapterConfig::tia(8, 4, 3)), 57);
        let std_cfg = AdapterConfig {
            kind: AdapterKind::Standard,
            ..AdapterConfig::tia(8, 4, 3)
        };
        assert_eq!(count_params(&std_cfg), 2 * 8 + 2 + 2 * 8 + 8);
        assert_eq!(count_params_without_bias(&AdapterConfig::tia(8, 4, 3)), 16 + 16 + 4 + 6);
    }

    #[test]
    fn count_matches_stored_elements() {
        let mut r = rng(11);
        for _ in 0..20 {
            let gamma = r.gen_range(2..6);
            let dim = gamma * r.gen_range(1..12);
            let kernel = 2 * r.gen_range(0..5) + 1;
            for kind in [AdapterKind::Standard, AdapterKind::Tia, AdapterKind::TiaNoResidual] {
                let cfg = AdapterConfig { dim, gamma, kernel, kind };
                let mut store = ParamStore::<f32>::new();
                let w = init_adapter(&mut store, "x", cfg, &mut r).unwrap();
                assert_eq!(store.numel(&w.param_ids()), count_params(&cfg));
                assert_eq!(store.total_count(), count_params(&cfg));
            }
        }
    }

    #[test]
    fn identity_and_zero_at_init() {
        let mut r = rng(3);
        for kind in [AdapterKind::Standard, AdapterKind::Tia, AdapterKind::TiaNoResidual] {
            let mut store = ParamStore::<f32>::new();
            let w = init_adapter(&mut store, "a", AdapterConfig { dim: 8, gamma: 4, kernel: 3, kind }, &mut r).unwrap();
            for _ in 0..100 {
                let x: Tensor<f32> = uniform(&mut r, &[5, 3, 8], 3.0);
                assert_eq!(run(&w, &store, &x, false), x);
                let z = run(&w, &store, &x, true);
                assert!(z.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn alpha_zero_disables_branch() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let w = init_tia(&mut store, "a", 8, 4, 3, &mut r).unwrap();
        let up: Tensor<f64> = uniform(&mut r, &[2, 8], 1.0);
        store.set(w.up.weight, up).unwrap();
        store.set(w.temporal.unwrap().alpha, Tensor::scalar(0.0)).unwrap();
        let x: Tensor<f64> = uniform(&mut r, &[4, 2, 8], 1.0);
        assert_eq!(run(&w, &store, &x, false), x);
        assert!(run(&w, &store, &x, true).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_line_scalar_oracle() {
        // d=2, gamma=2, t=1, x=[1,0], W_down=[[1],[0]], W_mid=[1], W_up=[[1,0]]
        let bar = 0.5 * 1.0 * (1.0 + libm::erf(1.0 / libm::sqrt(2.0)));
        let hat = bar + bar;
        let expect = [1.0 + hat, 0.0];
        assert!((expect[0] - 2.682_689_492_137_086).abs() < 1e-14);

        let mut store = ParamStore::<f64>::new();
        let w = init_tia(&mut store, "a", 2, 2, 3, &mut rng(0)).unwrap();
        let tp = w.temporal.unwrap();
        store.set(w.down.weight, Tensor::new(alloc::vec![2, 1], alloc::vec![1.0, 0.0]).unwrap()).unwrap();
        store.set(tp.mid.weight, Tensor::new(alloc::vec![1, 1], alloc::vec![1.0]).unwrap()).unwrap();
        store.set(w.up.weight, Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, 0.0]).unwrap()).unwrap();
        let x = Tensor::new(alloc::vec![1, 1, 2], alloc::vec![1.0, 0.0]).unwrap();
        let y = run(&w, &store, &x, false);
        assert!((y.data()[0] - expect[0]).abs() < 1e-14);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn structural_reduction_to_standard_adapter() {
        let mut r = rng(9);
        let (d, gamma) = (8, 2);
        let mut store = ParamStore::<f64>::new();
        let tia = init_tia(&mut store, "t", d, gamma, 1, &mut r).unwrap();
        let std = init_adapter(
            &mut store,
            "s",
            AdapterConfig { dim: d, gamma, kernel: 1, kind: AdapterKind::Standard },
            &mut r,
        )
        .unwrap();
        let h = d / gamma;
        let down: Tensor<f64> = uniform(&mut r, &[d, h], 0.5);
        let down_b: Tensor<f64> = uniform(&mut r, &[h], 0.5);
        let up: Tensor<f64> = uniform(&mut r, &[h, d], 0.5);
        let up_b: Tensor<f64> = uniform(&mut r, &[d], 0.5);
        for (a, b) in [(&tia, &std)] {
            store.set(a.down.weight, down.clone()).unwrap();
            store.set(b.down.weight, down.clone()).unwrap();
            store.set(a.down.bias, down_b.clone()).unwrap();
            store.set(b.down.bias, down_b.clone()).unwrap();
            store.set(b.up.weight, up.clone()).unwrap();
            store.set(b.up.bias, up_b.clone()).unwrap();
            // identity conv and W_mid = I give x̂ = 2x̄, so W_up is halved
            store.set(a.up.weight, up.scale(0.5)).unwrap();
            store.set(a.up.bias, up_b.clone()).unwrap();
        }
        let tp = tia.temporal.unwrap();
        let eye = Tensor::from_fn(&[h, h], |i| if i / h == i % h { 1.0 } else { 0.0 });
        store.set(tp.mid.weight, eye).unwrap();
        store.set(tp.mid.bias, Tensor::zeros(&[h])).unwrap();
        store.set(tp.dw_kernel, Tensor::full(&[h, 1], 1.0)).unwrap();
        for _ in 0..50 {
            let x: Tensor<f64> = uniform(&mut r, &[6, 2, d], 2.0);
            let a = run(&tia, &store, &x, false);
            let b = run(&std, &store, &x, false);
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-6 * q.abs().max(1.0));
            }
        }
    }

    #[test]
    fn side_equals_inside_minus_input() {
        let mut r = rng(21);
        let mut store = ParamStore::<f64>::new();
        let w = init_tia(&mut store, "a", 8, 4, 3, &mut r).unwrap();
        let up: Tensor<f64> = uniform(&mut r, &[2, 8], 1.0);
        store.set(w.up.weight, up).unwrap();
        for _ in 0..20 {
            let x: Tensor<f64> = uniform(&mut r, &[7, 2, 8], 1.5);
            let inside = run(&w, &store, &x, false);
            let side = run(&w, &store, &x, true);
            for ((a, b), xi) in inside.data().iter().zip(side.data()).zip(x.data()) {
                assert!((a - xi - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_up_projection_still_receives_gradient() {
        let mut r = rng(4);
        let mut store = ParamStore::<f64>::new();
        let w = init_tia(&mut store, "a", 8, 4, 3, &mut r).unwrap();
        let x: Tensor<f64> = uniform(&mut r, &[5, 2, 8], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = w.forward(&mut g, &store, xv, ConvGeometry::default()).unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w.up.weight).unwrap().max_abs() > 0.0);
        // everything upstream of the zero projection sees no signal yet
        assert_eq!(grads.get(w.down.weight).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn gradcheck_nonzero_adapter() {
        let mut r = rng(8);
        for kind in [AdapterKind::Standard, AdapterKind::Tia, AdapterKind::TiaNoResidual] {
            let mut store = ParamStore::<f64>::new();
            let w = init_adapter(&mut store, "a", AdapterConfig { dim: 4, gamma: 2, kernel: 3, kind }, &mut r).unwrap();
            for id in w.param_ids() {
                let shape = store.tensor(id).shape().to_vec();
                store.set(id, uniform(&mut r, &shape, 0.8)).unwrap();
            }
            let x: Tensor<f64> = uniform(&mut r, &[5, 2, 4], 1.0);
            let c = gradcheck::check_params(
                &store,
                |g, s| {
                    let xv = g.input(x.clone());
                    let y = w.forward(g, s, xv, ConvGeometry::default())?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                gradcheck::FD_STEP,
            )
            .unwrap();
            let worst = gradcheck::worst(c.iter().map(|(_, c)| c));
            assert!(worst < 1e-4, "{kind:?}: {worst}");
        }
    }
}
