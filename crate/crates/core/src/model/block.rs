use af_tensor::{downsample_mask, Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::attention::LocalSelfAttention;
use super::layers::{Conv1d, LayerNorm, Linear};
use super::ModelError;

/// Pre-norm transformer unit with per-channel residual scales and optional
/// 2x downsampling:
///
/// ```text
/// z_bar = alpha     * MSA(LN(z))     + z
/// z_hat = alpha_mlp * MLP(LN(z_bar)) + z_bar
/// z'    = down(z_hat)
/// ```
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: LocalSelfAttention,
    pub attn_scale: ParamId,
    pub norm_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub mlp_scale: ParamId,
    /// Strided depthwise convolution, present when the block downsamples.
    pub downsample: Option<Conv1d>,
}

pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub scale_init: f64,
    pub downsample: usize,
}

impl TransformerBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &BlockSpec,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let dim = spec.dim;
        let hidden = dim * spec.mlp_ratio;
        let scale = || Tensor::full(&[dim], T::from_f64_lossy(spec.scale_init));
        let downsample = match spec.downsample {
            1 => None,
            2 => Some(Conv1d::new(store, &format!("{name}.downsample"), 3, dim, dim, 2, true, rng)),
            other => {
                return Err(ModelError::Config(format!(
                    "downsampling ratio must be 1 or 2, got {other}"
                )))
            }
        };
        Ok(TransformerBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: LocalSelfAttention::new(store, &format!("{name}.attn"), dim, spec.heads, spec.window, rng)?,
            attn_scale: store.add(format!("{name}.attn_scale"), scale(), false),
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
            mlp_scale: store.add(format!("{name}.mlp_scale"), scale(), false),
            downsample,
        })
    }

    pub fn downsample_ratio(&self) -> usize {
        if self.downsample.is_some() {
            2
        } else {
            1
        }
    }

    /// Returns the block output and its (possibly downsampled) mask.
    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<bool>), ModelError> {
        let h = self.norm_attn.forward(g, store, z)?;
        let a = self.attn.forward(g, store, h, mask)?;
        let a = g.mul(a, g.param(store, self.attn_scale))?;
        let z_bar = g.add(a, z)?;

        let h = self.norm_mlp.forward(g, store, z_bar)?;
        let h = g.gelu(self.fc1.forward(g, store, h)?);
        let m = self.fc2.forward(g, store, h)?;
        let m = g.mul(m, g.param(store, self.mlp_scale))?;
        let z_hat = g.mask_rows(g.add(m, z_bar)?, mask)?;

        match &self.downsample {
            None => Ok((z_hat, mask.to_vec())),
            Some(conv) => {
                let out = conv.forward(g, store, z_hat, mask)?;
                Ok((out, downsample_mask(mask, conv.stride)))
            }
        }
    }
}
