//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Default step for central differences at f64.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative error budget used across the crate's checks.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Comparison of analytic and numeric gradients for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, or the plain
    /// difference norm when both norms are below `1e-8` (gradients that vanish
    /// identically, such as a key bias under softmax shift invariance).
    pub relative_error: f64,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`, one input tensor at a time.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<Vec<InputCheck>>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut results = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = Tensor::zeros(input.shape());
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        results.push(InputCheck::new(analytic, numeric));
    }
    Ok(results)
}

impl InputCheck {
    fn new(analytic: Tensor<f64>, numeric: Tensor<f64>) -> Self {
        let diff = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt());
        let relative_error = if scale < 1e-8 { diff } else { diff / scale };
        InputCheck {
            analytic,
            numeric,
            relative_error,
        }
    }
}

/// Like [`check_gradients`], but differentiates with respect to the
/// parameters of `store` listed in `ids`. Values are restored afterwards.
pub fn check_param_gradients<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    h: f64,
) -> Result<Vec<(String, InputCheck)>>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .params()
                .find(|(p, _)| *p == id)
                .map(|(_, t)| t.clone())
                .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()))
        })
        .collect();
    drop(grads);
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let out = f(&g, store)?;
        let v = g.value(out).item();
        Ok(v)
    };
    let mut results = Vec::with_capacity(ids.len());
    for (&id, analytic) in ids.iter().zip(analytic) {
        let mut numeric = Tensor::zeros(analytic.shape());
        for j in 0..numeric.numel() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        results.push((store.get(id).name.clone(), InputCheck::new(analytic, numeric)));
    }
    Ok(results)
}

/// Largest relative error over all inputs.
pub fn max_relative_error(checks: &[InputCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}
