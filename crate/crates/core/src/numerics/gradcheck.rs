//! Central-difference verification of analytic gradients (64-bit only).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

#[inline]
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over components of `|analytic - central difference| / max(1, |analytic|)`
/// for the gradient of `f` with respect to its input.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    check_eps(eps)?;
    let eval = |point: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let v = g.input(point.clone(), false);
        let out = f(&mut g, v);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let out = f(&mut g, xv);
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let (a, b) = (eval(x), eval(x));
    if a.to_bits() != b.to_bits() {
        return Err(Error::NonDeterministic(a, b));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub components_checked: usize,
}

/// Gradient check over the parameters of `store`.
///
/// `per_param` bounds how many evenly spaced components of each parameter
/// are probed; `None` probes every component.
pub fn gradcheck_params<F>(store: &ParamStore<f64>, f: F, eps: f64, per_param: Option<usize>) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::with_params(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::with_params(store);
        let out = f(&mut g);
        let grads = g.backward(out)?;
        analytic.accumulate(&grads);
    }
    let (a, b) = (eval(store), eval(store));
    if a.to_bits() != b.to_bits() {
        return Err(Error::NonDeterministic(a, b));
    }

    let mut probe = store.clone();
    let mut report = ParamCheckReport { max_rel_error: 0.0, worst_param: String::new(), components_checked: 0 };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let fp = eval(&probe);
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let fm = eval(&probe);
            probe.get_mut(id).value.data_mut()[i] = orig;
            let e = rel_err(analytic.get(id).grad.data()[i], (fp - fm) / (2.0 * eps));
            report.components_checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = store.get(id).name.clone();
            }
        }
    }
    Ok(report)
}
