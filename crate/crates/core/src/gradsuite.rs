//! Finite-difference gradient checks over every differentiable op, the fused
//! losses, local attention and a tiny end-to-end model, all at f64.

use af_tensor::gradcheck::{check_gradients, check_param_gradients, max_relative_error, DEFAULT_STEP};

/// Smaller step for the end-to-end model, whose many ReLUs make a kink inside
/// `[x - h, x + h]` likely at the default step.
const MODEL_STEP: f64 = 1e-6;
use af_tensor::{init, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss::{diou_loss, focal_loss, loss_for_output};
use crate::model::attention::local_attention;
use crate::model::{Model, ModelConfig};
use crate::targets::{assign_targets, LossConfig};
use crate::ActionInstance;

/// Relative error budget of the suite.
pub const TOLERANCE: f64 = 1e-4;

/// Result of checking one op.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

/// Weighted sum so the upstream gradient is not all ones.
fn project(g: &Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let w = g.constant(Tensor::from_vec(&shape, w)?);
    Ok(g.sum(g.mul(y, w)?))
}

struct Suite {
    cases: Vec<GradCase>,
}

impl Suite {
    fn record(&mut self, name: &str, err: f64) {
        self.cases.push(GradCase {
            name: name.to_string(),
            max_relative_error: err,
            passed: err <= TOLERANCE,
        });
    }

    fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    {
        let checks = check_gradients(inputs, f, DEFAULT_STEP)?;
        self.record(name, max_relative_error(&checks));
        Ok(())
    }
}

/// Runs the suite; the outcome is deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| -> Tensor<f64> { init::uniform(shape, 2.0, &mut rng) };
    let mut s = Suite { cases: Vec::new() };

    let a = r(&[3, 4]);
    let b = r(&[3, 4]);
    let row = r(&[4]);
    let m = r(&[4, 2]);
    s.check("add", &[a.clone(), b.clone()], |g, v| project(g, g.add(v[0], v[1])?))?;
    s.check("sub", &[a.clone(), b.clone()], |g, v| project(g, g.sub(v[0], v[1])?))?;
    s.check("mul_broadcast", &[a.clone(), row.clone()], |g, v| project(g, g.mul(v[0], v[1])?))?;
    s.check("neg", std::slice::from_ref(&a), |g, v| project(g, g.neg(v[0])))?;
    s.check("scale_add_scalar", std::slice::from_ref(&a), |g, v| project(g, g.scale(g.add_scalar(v[0], 0.5), -1.5)))?;
    s.check("square", std::slice::from_ref(&a), |g, v| project(g, g.square(v[0])))?;
    s.check("exp", std::slice::from_ref(&a), |g, v| project(g, g.exp(v[0])))?;
    s.check("ln", &[a.map(|x| x.abs() + 0.5)], |g, v| project(g, g.ln(v[0])))?;
    let away = a.map(|x| if x.abs() < 0.05 { 0.5 } else { x });
    s.check("relu", &[away], |g, v| project(g, g.relu(v[0])))?;
    s.check("gelu", std::slice::from_ref(&a), |g, v| project(g, g.gelu(v[0])))?;
    s.check("sigmoid", std::slice::from_ref(&a), |g, v| project(g, g.sigmoid(v[0])))?;
    s.check("sum", std::slice::from_ref(&a), |g, v| Ok(g.sum(g.square(v[0]))))?;
    s.check("mean", std::slice::from_ref(&a), |g, v| Ok(g.mean(g.square(v[0]))))?;
    s.check("matmul", &[a.clone(), m.clone()], |g, v| project(g, g.matmul(v[0], v[1])?))?;
    s.check("batched_matmul", &[r(&[2, 3, 4]), r(&[2, 4, 5])], |g, v| project(g, g.matmul(v[0], v[1])?))?;
    s.check("transpose_reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.transpose(v[0])?;
        project(g, g.reshape(y, &[2, 6])?)
    })?;
    s.check("slice_concat_cols", &[a.clone(), b.clone()], |g, v| {
        let x = g.slice_cols(v[0], 1, 2)?;
        let y = g.slice_cols(v[1], 0, 3)?;
        project(g, g.concat_cols(&[x, y])?)
    })?;
    s.check("mask_rows", std::slice::from_ref(&a), |g, v| project(g, g.mask_rows(v[0], &[true, false, true])?))?;
    s.check("softmax_rows", &[r(&[4, 5])], |g, v| project(g, g.softmax_rows(v[0])))?;
    s.check("layer_norm", &[r(&[4, 5]), r(&[5]), r(&[5])], |g, v| {
        project(g, g.layer_norm(v[0], v[1], v[2], 1e-5)?)
    })?;
    let mask = [true, true, true, true, true, false, false];
    let x = r(&[7, 3]);
    for stride in [1, 2] {
        s.check(&format!("conv1d_dense_stride{stride}"), &[x.clone(), r(&[3, 3, 2]), r(&[2])], |g, v| {
            project(g, g.conv1d(v[0], v[1], Some(v[2]), stride, false, &mask)?)
        })?;
        s.check(&format!("conv1d_depthwise_stride{stride}"), &[x.clone(), r(&[3, 1, 3]), r(&[3])], |g, v| {
            project(g, g.conv1d(v[0], v[1], Some(v[2]), stride, true, &mask)?)
        })?;
    }

    let amask: Vec<bool> = (0..11).map(|i| i < 9).collect();
    s.check("local_attention", &[r(&[11, 4]), r(&[11, 4]), r(&[11, 4])], |g, v| {
        project(g, local_attention(g, v[0], v[1], v[2], &amask, 2, 5).map_err(err)?)
    })?;

    let targets: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let valid = [true, true, true, true, false, true];
    s.check("focal_loss", &[r(&[6, 2])], |g, v| focal_loss(g, v[0], &targets, &valid, 2.0, 0.25))?;
    let reg_targets: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.7).collect();
    let positive = [true, false, true, true];
    let reg = r(&[4, 2]).map(|x| x.abs() + 0.2);
    s.check("diou_loss", &[reg], |g, v| diou_loss(g, v[0], &reg_targets, &positive))?;

    tiny_model(&mut s, seed)?;
    Ok(s.cases)
}

/// End-to-end checks on a 2-level model with T=32, D=16, C=2: once through
/// the heads with a random projection, once through the training loss.
fn tiny_model(s: &mut Suite, seed: u64) -> Result<()> {
    let (len, input_dim, classes) = (32, 4, 2);
    let mut cfg = ModelConfig::new(input_dim, classes).with_levels(2, 4.0);
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.window_size = 5;
    cfg.max_seq_len = 64;
    // LayerScale starts at 1 so every parameter has a gradient of useful size.
    cfg.scale_init = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(cfg, &mut store, &mut rng).map_err(err)?;
    let x: Tensor<f64> = init::uniform(&[len, input_dim], 1.0, &mut rng);
    let mask: Vec<bool> = (0..len).map(|i| i < 27).collect();
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let geometry = model.config.geometry(len);
    // Regression outputs end in a ReLU; outputs near its kink get zero weight
    // so the finite differences never straddle it.
    let base = {
        let g = Graph::inference();
        model.forward(&g, &store, &x, &mask).map_err(err)?.moments(&g)
    };
    let weights: Vec<Tensor<f64>> = geometry
        .levels
        .iter()
        .zip(&base.levels)
        .flat_map(|(l, out)| {
            let cls = init::uniform(&[l.len, classes], 1.0, &mut rng);
            let mut reg = init::uniform(&[l.len, 2], 1.0, &mut rng);
            for (w, &y) in reg.data_mut().iter_mut().zip(out.reg.data()) {
                if y < 1e-3 {
                    *w = 0.0;
                }
            }
            [cls, reg]
        })
        .collect();

    let checks = check_param_gradients(
        &mut store,
        &ids,
        |g, store| {
            let out = model.forward(g, store, &x, &mask).map_err(err)?;
            let mut acc = g.constant(Tensor::scalar(0.0));
            for (h, w) in out.heads.iter().zip(weights.chunks(2)) {
                acc = g.add(acc, g.sum(g.mul(h.cls_logits, g.constant(w[0].clone()))?))?;
                acc = g.add(acc, g.sum(g.mul(h.reg, g.constant(w[1].clone()))?))?;
            }
            Ok(acc)
        },
        MODEL_STEP,
    )?;
    s.record("tiny_model_heads", checks.iter().map(|(_, c)| c.relative_error).fold(0.0, f64::max));

    let actions = [ActionInstance::new(2.0, 6.0, 0), ActionInstance::new(9.0, 22.0, 1)];
    let loss_cfg = LossConfig::default();
    let targets = assign_targets(&actions, &geometry, classes, &loss_cfg).map_err(err)?;
    let checks = check_param_gradients(
        &mut store,
        &ids,
        |g, store| {
            let out = model.forward(g, store, &x, &mask).map_err(err)?;
            Ok(loss_for_output(g, &out, &targets, &loss_cfg)?.0)
        },
        MODEL_STEP,
    )?;
    s.record("tiny_model_loss", checks.iter().map(|(_, c)| c.relative_error).fold(0.0, f64::max));
    Ok(())
}
