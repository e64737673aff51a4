//! Central finite-difference checks of tape gradients, evaluated in `f64`.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient norms below this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-8;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between an analytic and
/// a numerical gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale.max(ABS_FLOOR)
    }
}

/// Largest relative error over the given input tensors. `f` must build a
/// scalar from leaves bound to the inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .of(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for j in 0..inputs[k].len() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Largest relative error over all parameters of `store` (every entry of
/// parameters with at most `max_entries` values, a strided subset otherwise).
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, max_entries: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |ps: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, ps)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?.for_params(store);

    let mut ps = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let len = store.value(id).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for j in (0..len).step_by(stride) {
            let orig = ps.value(id).data()[j];
            ps.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(&ps)?;
            ps.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(&ps)?;
            ps.value_mut(id).data_mut()[j] = orig;
            a.push(grads[id.index()].data()[j]);
            n.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}
