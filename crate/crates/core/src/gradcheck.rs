//! Central finite-difference verification of analytic gradients.
//!
//! Used by the test suites; requires a double-precision parameter store.

use candle_core::{Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::nn::{to_vec_f64, ParamStore};

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, zero when both are below `floor`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < floor {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn set_entry(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut data = to_vec_f64(var.as_tensor())?;
    data[index] = value;
    let t = Tensor::from_vec(data, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares `d loss / d var[i]` against `(f(x+eps) - f(x-eps)) / 2eps` for
/// `probes` random entries of each named variable.
pub fn check_vars(
    vars: &[(String, Var)],
    probes: usize,
    eps: f64,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<Vec<Probe>> {
    let l = loss()?;
    if l.elem_count() != 1 {
        bail!(Shape, "gradient check needs a scalar loss, got {:?}", l.dims());
    }
    let grads = l.backward()?;
    let eval = || -> Result<f64> { Ok(to_vec_f64(&loss()?)?[0]) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, var) in vars {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; n],
        };
        let base = to_vec_f64(var.as_tensor())?;
        for _ in 0..probes.min(n) {
            let i = rng.random_range(0..n);
            set_entry(var, i, base[i] + eps)?;
            let fp = eval()?;
            set_entry(var, i, base[i] - eps)?;
            let fm = eval()?;
            set_entry(var, i, base[i])?;
            out.push(Probe {
                name: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric: (fp - fm) / (2.0 * eps),
            });
        }
    }
    Ok(out)
}

/// [`check_vars`] over parameters of `store` whose name starts with any of
/// `prefixes`.
pub fn check_params(
    store: &ParamStore,
    prefixes: &[&str],
    probes: usize,
    eps: f64,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<Vec<Probe>> {
    let vars: Vec<(String, Var)> = store
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    if vars.is_empty() {
        bail!(InvalidInput, "no parameters match {prefixes:?}");
    }
    check_vars(&vars, probes, eps, seed, loss)
}

/// Largest relative error over all probes.
pub fn max_rel_err(probes: &[Probe], floor: f64) -> f64 {
    probes.iter().map(|p| p.rel_err(floor)).fold(0.0, f64::max)
}
