//! Double-precision finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forwards, so it is independent of
//! every backward rule it checks.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step used by default.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let denom = libm::sqrt(na).max(libm::sqrt(nn));
        if denom < 1e-12 {
            libm::sqrt(diff)
        } else {
            libm::sqrt(diff) / denom
        }
    }
}

/// Compares the analytic gradient of a scalar function of leaf tensors with
/// central differences, one comparison per input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().to_vec(),
            None => alloc::vec![0.0; t.numel()],
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        out.push(GradComparison {
            analytic: a,
            numeric,
        });
    }
    Ok(out)
}

/// Same as [`check_inputs`] but over the trainable parameters of a store.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, step: f64) -> Result<Vec<(ParamId, GradComparison)>>
where
    F: Fn(&mut Graph<'_, f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let analytic = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => alloc::vec![0.0; p.tensor.numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..p.tensor.numel() {
            let orig = p.tensor.data()[j];
            work.tensor_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        out.push((id, GradComparison { analytic, numeric }));
    }
    Ok(out)
}

/// Largest relative error over a set of comparisons.
pub fn worst<'c>(cmps: impl IntoIterator<Item = &'c GradComparison>) -> f64 {
    cmps.into_iter()
        .map(GradComparison::relative_error)
        .fold(0.0, f64::max)
}
