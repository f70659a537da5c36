//! The localization network: convolutional projection, a stack of local
//! attention transformer blocks that forms a temporal feature pyramid, and
//! classification / regression heads shared across pyramid levels.

pub mod attention;
pub mod block;
pub mod heads;
pub mod layers;

use af_tensor::{init, Element, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::{default_regression_ranges, RegressionRange};
use block::{BlockSpec, TransformerBlock};
use heads::Head;
use layers::Conv1d;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}; window the input first")]
    SequenceTooLong { len: usize, max: usize },
}

fn default_embed_dim() -> usize {
    512
}
fn default_num_heads() -> usize {
    4
}
fn default_window_size() -> usize {
    19
}
fn default_num_stem_blocks() -> usize {
    2
}
fn default_num_pyramid_blocks() -> usize {
    5
}
fn default_head_kernel() -> usize {
    3
}
fn default_head_layers() -> usize {
    3
}
fn default_max_seq_len() -> usize {
    2304
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_scale_init() -> f64 {
    1e-4
}
fn default_cls_prior() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_num_stem_blocks")]
    pub num_stem_blocks: usize,
    #[serde(default = "default_num_pyramid_blocks")]
    pub num_pyramid_blocks: usize,
    #[serde(default = "default_head_kernel")]
    pub head_kernel: usize,
    #[serde(default = "default_head_layers")]
    pub head_layers: usize,
    pub num_classes: usize,
    /// One range per pyramid level; empty means doubling ranges from 4.
    #[serde(default)]
    pub regression_ranges: Vec<RegressionRange>,
    #[serde(default)]
    pub use_position_embedding: bool,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Initial value of the per-channel residual scales.
    #[serde(default = "default_scale_init")]
    pub scale_init: f64,
    /// Prior foreground probability used to initialize the classifier bias.
    #[serde(default = "default_cls_prior")]
    pub cls_prior: f64,
}

impl ModelConfig {
    /// The default architecture: 512-d embedding, 2 stem blocks, 5
    /// downsampling blocks, six pyramid levels.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        let mut cfg = ModelConfig {
            input_dim,
            embed_dim: default_embed_dim(),
            num_heads: default_num_heads(),
            window_size: default_window_size(),
            num_stem_blocks: default_num_stem_blocks(),
            num_pyramid_blocks: default_num_pyramid_blocks(),
            head_kernel: default_head_kernel(),
            head_layers: default_head_layers(),
            num_classes,
            regression_ranges: Vec::new(),
            use_position_embedding: false,
            max_seq_len: default_max_seq_len(),
            mlp_ratio: default_mlp_ratio(),
            scale_init: default_scale_init(),
            cls_prior: default_cls_prior(),
        };
        cfg.regression_ranges = default_regression_ranges(cfg.num_levels(), 4.0);
        cfg
    }

    /// Sets the level count and regenerates doubling ranges starting at `init_range`.
    pub fn with_levels(mut self, levels: usize, init_range: f64) -> Self {
        self.num_pyramid_blocks = levels.saturating_sub(1);
        self.regression_ranges = default_regression_ranges(levels, init_range);
        self
    }

    pub fn num_levels(&self) -> usize {
        1 + self.num_pyramid_blocks
    }

    /// Ranges in effect, filling in the default when none are configured.
    pub fn ranges(&self) -> Vec<RegressionRange> {
        if self.regression_ranges.is_empty() {
            default_regression_ranges(self.num_levels(), 4.0)
        } else {
            self.regression_ranges.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return fail("input_dim, embed_dim and num_classes must be positive".into());
        }
        if self.window_size.is_multiple_of(2) {
            return fail(format!("window_size must be odd, got {}", self.window_size));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if self.num_stem_blocks == 0 {
            return fail("at least one stem block is required".into());
        }
        if self.head_kernel.is_multiple_of(2) || self.head_layers == 0 {
            return fail("head_kernel must be odd and head_layers positive".into());
        }
        let ranges = self.ranges();
        if ranges.len() != self.num_levels() {
            return fail(format!(
                "{} regression ranges for {} pyramid levels",
                ranges.len(),
                self.num_levels()
            ));
        }
        for (l, r) in ranges.iter().enumerate() {
            if !(r.min < r.max) {
                return fail(format!("level {l} has empty range [{}, {})", r.min, r.max));
            }
            if l + 1 < ranges.len() && ranges[l + 1].min != r.max {
                return fail(format!("ranges of levels {l} and {} are not contiguous", l + 1));
            }
        }
        if ranges[0].min != 0.0 || ranges.last().unwrap().max != f64::INFINITY {
            return fail("ranges must start at 0 and end at +inf".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }

    /// Level strides, lengths and ranges for an input of `len` steps.
    pub fn geometry(&self, len: usize) -> PyramidGeometry {
        let levels = self
            .ranges()
            .into_iter()
            .enumerate()
            .map(|(l, range)| {
                let stride = 1usize << l;
                LevelGeometry {
                    stride,
                    len: len.div_ceil(stride),
                    range,
                }
            })
            .collect();
        PyramidGeometry { input_len: len, levels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeometry {
    /// Step size of this level in input grid units.
    pub stride: usize,
    pub len: usize,
    pub range: RegressionRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGeometry {
    pub input_len: usize,
    pub levels: Vec<LevelGeometry>,
}

/// Encoder output at one pyramid level.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub features: Var,
    pub mask: Vec<bool>,
    pub stride: usize,
    pub range: RegressionRange,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Head outputs at one level, still attached to the graph.
#[derive(Debug, Clone, Copy)]
pub struct LevelHeads {
    /// `[T_l, C]` unnormalized class scores.
    pub cls_logits: Var,
    /// `[T_l, 2]` onset / offset distances in units of the level stride.
    pub reg: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub heads: Vec<LevelHeads>,
}

/// Detached per-moment predictions for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput<T: Element> {
    pub cls_logits: Tensor<T>,
    pub reg: Tensor<T>,
    pub mask: Vec<bool>,
    pub stride: usize,
}

/// Per-moment predictions over the whole pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentOutput<T: Element> {
    pub levels: Vec<LevelOutput<T>>,
}

impl ForwardOutput {
    pub fn moments<T: Element>(&self, g: &Graph<T>) -> MomentOutput<T> {
        MomentOutput {
            levels: self
                .pyramid
                .levels
                .iter()
                .zip(&self.heads)
                .map(|(lvl, h)| LevelOutput {
                    cls_logits: g.value(h.cls_logits).clone(),
                    reg: g.value(h.reg).clone(),
                    mask: lvl.mask.clone(),
                    stride: lvl.stride,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub projection: [Conv1d; 2],
    pub position_embedding: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub cls_head: Head,
    pub reg_head: Head,
}

impl Model {
    /// Builds the network, registering its parameters in `store`.
    pub fn new<T: Element>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let projection = [
            Conv1d::new(store, "projection.0", 3, config.input_dim, d, 1, false, rng),
            Conv1d::new(store, "projection.1", 3, d, d, 1, false, rng),
        ];
        let position_embedding = config.use_position_embedding.then(|| {
            store.add(
                "position_embedding",
                init::normal(&[config.max_seq_len, d], 0.02, rng),
                false,
            )
        });
        let n_blocks = config.num_stem_blocks + config.num_pyramid_blocks;
        let blocks = (0..n_blocks)
            .map(|i| {
                let spec = BlockSpec {
                    dim: d,
                    heads: config.num_heads,
                    window: config.window_size,
                    mlp_ratio: config.mlp_ratio,
                    scale_init: config.scale_init,
                    downsample: if i < config.num_stem_blocks { 1 } else { 2 },
                };
                TransformerBlock::new(store, &format!("blocks.{i}"), &spec, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prior = config.cls_prior;
        let cls_head = Head::new(
            store,
            "cls_head",
            d,
            config.num_classes,
            config.head_kernel,
            config.head_layers,
            -((1.0 - prior) / prior).ln(),
            false,
            rng,
        )?;
        let reg_head = Head::new(
            store,
            "reg_head",
            d,
            2,
            config.head_kernel,
            config.head_layers,
            0.0,
            true,
            rng,
        )?;
        Ok(Model {
            config,
            projection,
            position_embedding,
            blocks,
            cls_head,
            reg_head,
        })
    }

    /// Embeds `[T, D_in]` features into `[T, D]`.
    pub fn project<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        let shape = g.shape(features);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(ModelError::ChannelMismatch {
                expected: self.config.input_dim,
                found: shape.get(1).copied().unwrap_or(0),
            });
        }
        let h = self.projection[0].forward(g, store, features, mask)?;
        let h = g.relu(h);
        let mut z = self.projection[1].forward(g, store, h, mask)?;
        if let Some(pe) = self.position_embedding {
            let pe = interpolate_position_embedding(g, g.param(store, pe), shape[0])?;
            z = g.mask_rows(g.add(z, pe)?, mask)?;
        }
        Ok(z)
    }

    /// Runs a training window; rejects inputs longer than `max_seq_len`.
    pub fn forward_window<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        mask: &[bool],
    ) -> Result<ForwardOutput, ModelError> {
        let len = features.shape().first().copied().unwrap_or(0);
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        self.forward(g, store, features, mask)
    }

    /// Full forward pass over a `[T, D_in]` sequence of any length.
    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        mask: &[bool],
    ) -> Result<ForwardOutput, ModelError> {
        let len = features.shape().first().copied().unwrap_or(0);
        if len == 0 || mask.len() != len {
            return Err(ModelError::Config(format!(
                "need a non-empty sequence with a matching mask, got T = {len}, mask {}",
                mask.len()
            )));
        }
        let x = g.constant(features.clone());
        let x = g.mask_rows(x, mask)?;
        let mut z = self.project(g, store, x, mask)?;
        let mut mask = mask.to_vec();
        let ranges = self.config.ranges();
        let mut levels = Vec::with_capacity(ranges.len());
        let mut stride = 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, out_mask) = block.forward(g, store, z, &mask)?;
            z = out;
            mask = out_mask;
            stride *= block.downsample_ratio();
            if i + 1 >= self.config.num_stem_blocks {
                levels.push(PyramidLevel {
                    features: z,
                    mask: mask.clone(),
                    stride,
                    range: ranges[levels.len()],
                });
            }
        }
        let heads = levels
            .iter()
            .map(|lvl| {
                Ok(LevelHeads {
                    cls_logits: self.cls_head.forward(g, store, lvl.features, &lvl.mask)?,
                    reg: self.reg_head.forward(g, store, lvl.features, &lvl.mask)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(ForwardOutput {
            pyramid: FeaturePyramid { levels },
            heads,
        })
    }

    /// Convenience inference: full sequence, all steps valid.
    pub fn predict<T: Element>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
    ) -> Result<MomentOutput<T>, ModelError> {
        let g = Graph::inference();
        let mask = vec![true; features.shape().first().copied().unwrap_or(0)];
        let out = self.forward(&g, store, features, &mask)?;
        Ok(out.moments(&g))
    }
}

/// `[len, src_len]` matrix that crops (`len <= src_len`) or linearly
/// upsamples (`len > src_len`, half-pixel centers, edge clamped).
pub fn position_interpolation_matrix<T: Element>(src_len: usize, len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, src_len]);
    if len <= src_len {
        for i in 0..len {
            m.data_mut()[i * src_len + i] = T::one();
        }
        return m;
    }
    let ratio = src_len as f64 / len as f64;
    for i in 0..len {
        let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        let w = x - lo as f64;
        m.data_mut()[i * src_len + lo] += T::from_f64_lossy(1.0 - w);
        m.data_mut()[i * src_len + hi] += T::from_f64_lossy(w);
    }
    m
}

/// Position embedding for a sequence of `len` steps from a `[T_max, D]` table.
pub fn interpolate_position_embedding<T: Element>(
    g: &Graph<T>,
    table: Var,
    len: usize,
) -> Result<Var, ModelError> {
    let src_len = g.shape(table)[0];
    if len == src_len {
        return Ok(table);
    }
    let m = g.constant(position_interpolation_matrix(src_len, len));
    Ok(g.matmul(m, table)?)
}
