use af_tensor::{init, Element, Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::Rng;

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), init::uniform(&[d_in, d_out], bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false),
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(store, self.weight))?;
        g.add(y, g.param(store, self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.layer_norm(
            x,
            g.param(store, self.gain),
            g.param(store, self.bias),
            T::from_f64_lossy(LAYER_NORM_EPS),
        )
    }
}

/// Masked 1D convolution with bias; weights `[k, C_in, C_out]` (or `[k, 1, C]` depthwise).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub depthwise: bool,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        depthwise: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (shape, fan_in) = if depthwise {
            (vec![kernel, 1, c_in], kernel)
        } else {
            (vec![kernel, c_in, c_out], kernel * c_in)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let c_out = if depthwise { c_in } else { c_out };
        Conv1d {
            weight: store.add(format!("{name}.weight"), init::uniform(&shape, bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false),
            stride,
            depthwise,
        }
    }

    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
    ) -> Result<Var> {
        g.conv1d(
            x,
            g.param(store, self.weight),
            Some(g.param(store, self.bias)),
            self.stride,
            self.depthwise,
            mask,
        )
    }
}
