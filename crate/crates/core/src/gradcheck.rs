//! Central finite differences, used as an independent gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Tolerance applied by every gradient check in this crate.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_difference_at(&mut f, x, h, &coords)?;
    Tensor::new(x.shape(), g)
}

/// Central differences for the listed flat coordinates only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid("finite-difference", format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.values_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference"));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Max-norm relative error `max|a - n| / max(max|a|, max|n|)`, with the
/// denominator floored at 1e-8 so all-zero gradients compare absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// Reduces `out` to a scalar through a fixed random projection, so that the
/// gradient reaching `out` is generic (a plain sum would vanish through
/// batch norm, for instance).
pub fn projection_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

/// Result of comparing analytic and numeric gradients of one tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
}

/// Gradient check of a scalar function of an input tensor and the
/// parameters in `store`. `loss` must rebuild the same computation on every
/// call. At most `max_coords` coordinates per tensor are probed (evenly
/// spaced); pass `usize::MAX` for all of them.
pub fn check_module<F>(
    store: &ParamStore,
    x: &Tensor,
    max_coords: usize,
    mut loss: F,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let l = loss(&mut g, store, xv)?;
    g.backward(l)?;

    let pick = |n: usize| -> Vec<usize> {
        if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|i| i * n / max_coords).collect()
        }
    };
    let mut eval = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let l = loss(&mut g, store, xv)?;
        Ok(g.value(l).values()[0])
    };

    let mut checks = Vec::new();
    let coords = pick(x.numel());
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = finite_difference_at(|t| eval(store, t), x, FD_STEP, &coords)?;
    let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    checks.push(TensorCheck { name: "input".into(), rel_error: relative_error(&a, &numeric), coords: coords.len() });

    for id in store.ids() {
        let p = store.get(id);
        let coords = pick(p.value.numel());
        let analytic = g
            .bound_param(id)
            .and_then(|v| g.grad(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let mut probe_store = store.clone();
        let numeric = finite_difference_at(
            |t| {
                probe_store.get_mut(id).value = t.clone();
                eval(&probe_store, x)
            },
            &p.value,
            FD_STEP,
            &coords,
        )?;
        let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        checks.push(TensorCheck { name: p.name.clone(), rel_error: relative_error(&a, &numeric), coords: coords.len() });
    }
    Ok(checks)
}

/// Largest relative error over a set of checks.
pub fn worst(checks: &[TensorCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
