#![allow(dead_code)]

use actionformer::model::{Model, ModelConfig};
use af_tensor::{init, Element, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small model: 2 stem blocks plus `levels - 1` downsampling blocks.
pub fn tiny_config(input_dim: usize, dim: usize, classes: usize, levels: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(input_dim, classes).with_levels(levels, 4.0);
    cfg.embed_dim = dim;
    cfg.num_heads = 2;
    cfg.window_size = 5;
    cfg.max_seq_len = 256;
    cfg
}

pub fn build<T: Element>(cfg: ModelConfig, seed: u64) -> (Model, ParamStore<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store, &mut rng).unwrap();
    (model, store)
}

pub fn features<T: Element>(len: usize, dim: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init::uniform(&[len, dim], 1.0, &mut rng)
}
pub mod oracles;
