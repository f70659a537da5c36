use af_tensor::{Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::layers::{Conv1d, LayerNorm};
use super::ModelError;

/// Convolutional prediction head shared across pyramid levels:
/// `(conv -> LN -> ReLU) x (layers - 1)` followed by an output conv.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Vec<(Conv1d, LayerNorm)>,
    pub output: Conv1d,
    pub terminal_relu: bool,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        out_dim: usize,
        kernel: usize,
        layers: usize,
        output_bias: f64,
        terminal_relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        if layers == 0 {
            return Err(ModelError::Config("a head needs at least one layer".into()));
        }
        let hidden = (0..layers - 1)
            .map(|i| {
                (
                    Conv1d::new(store, &format!("{name}.conv{i}"), kernel, dim, dim, 1, false, rng),
                    LayerNorm::new(store, &format!("{name}.norm{i}"), dim),
                )
            })
            .collect();
        let output = Conv1d::new(store, &format!("{name}.output"), kernel, dim, out_dim, 1, false, rng);
        store.get_mut(output.bias).value = Tensor::full(&[out_dim], T::from_f64_lossy(output_bias));
        Ok(Head {
            hidden,
            output,
            terminal_relu,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        let mut h = x;
        for (conv, norm) in &self.hidden {
            h = conv.forward(g, store, h, mask)?;
            h = norm.forward(g, store, h)?;
            h = g.mask_rows(g.relu(h), mask)?;
        }
        let mut out = self.output.forward(g, store, h, mask)?;
        if self.terminal_relu {
            out = g.relu(out);
        }
        Ok(out)
    }
}
