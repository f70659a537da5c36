//! Sigmoid focal loss, 1D DIoU loss, and their combination normalized by
//! the number of positive moments.

use af_tensor::{Element, Graph, Tensor, TensorError, Var};

use crate::model::{ForwardOutput, LevelHeads};
use crate::targets::{LossConfig, MomentTargets};

const DIOU_EPS: f64 = 1e-8;

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss of one logit against target `y` and its derivative in `x`.
pub fn focal_term(x: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let p = log_p.exp();
    let q = log_q.exp();
    let mut loss = 0.0;
    let mut grad = 0.0;
    if y != 0.0 {
        let w = q.powf(gamma);
        loss += y * -alpha * w * log_p;
        grad += y * alpha * (gamma * p * w * log_p - w * q);
    }
    if y != 1.0 {
        let w = p.powf(gamma);
        loss += (1.0 - y) * -(1.0 - alpha) * w * log_q;
        grad += (1.0 - y) * (1.0 - alpha) * (w * p - gamma * w * q * log_q);
    }
    (loss, grad)
}

/// DIoU loss between segments `[t - pred.0, t + pred.1]` and
/// `[t - target.0, t + target.1]`, with its gradient in `pred`.
pub fn diou_term(pred: (f64, f64), target: (f64, f64)) -> (f64, (f64, f64)) {
    let (a, b) = pred;
    let (ta, tb) = target;
    let inter = a.min(ta) + b.min(tb);
    let union = (a + b + ta + tb - inter).max(DIOU_EPS);
    let enclose = (a.max(ta) + b.max(tb)).max(DIOU_EPS);
    let rho = 0.5 * ((b - a) - (tb - ta));
    let loss = 1.0 - inter / union + rho * rho / (enclose * enclose);

    let partial = |mine_smaller: bool, drho: f64| {
        let di = if mine_smaller { 1.0 } else { 0.0 };
        let du = 1.0 - di;
        let dc = 1.0 - di;
        -(di * union - inter * du) / (union * union) + 2.0 * rho * drho / (enclose * enclose)
            - 2.0 * rho * rho * dc / (enclose * enclose * enclose)
    };
    (loss, (partial(a <= ta, -0.5), partial(b <= tb, 0.5)))
}

/// Focal loss summed over valid moments and all classes of one level.
pub fn focal_loss<T: Element>(
    g: &Graph<T>,
    logits: Var,
    targets: &[f64],
    valid: &[bool],
    gamma: f64,
    alpha: f64,
) -> Result<Var, TensorError> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] * shape[1] != targets.len() || shape[0] != valid.len() {
        return Err(TensorError::InvalidArgument(format!(
            "focal loss: logits {shape:?} with {} targets and {} mask entries",
            targets.len(),
            valid.len()
        )));
    }
    let c = shape[1];
    let mut total = 0.0;
    let mut grad = vec![T::zero(); targets.len()];
    {
        let x = g.value(logits);
        for (i, &ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            for j in i * c..(i + 1) * c {
                let (l, d) = focal_term(x.data()[j].to_f64_lossy(), targets[j], gamma, alpha);
                total += l;
                grad[j] = T::from_f64_lossy(d);
            }
        }
    }
    let grad = Tensor::from_vec(&shape, grad)?;
    Ok(g.custom(
        &[logits],
        Tensor::scalar(T::from_f64_lossy(total)),
        Box::new(move |ctx| {
            let mut gx = grad.clone();
            gx.scale_in_place(ctx.grad.item());
            vec![Some(gx)]
        }),
    ))
}

/// DIoU loss summed over the positive moments of one level.
pub fn diou_loss<T: Element>(
    g: &Graph<T>,
    reg: Var,
    targets: &[f64],
    positive: &[bool],
) -> Result<Var, TensorError> {
    let shape = g.shape(reg);
    if shape.len() != 2 || shape[1] != 2 || shape[0] != positive.len() || targets.len() != 2 * shape[0] {
        return Err(TensorError::InvalidArgument(format!(
            "diou loss: predictions {shape:?} with {} targets and {} mask entries",
            targets.len(),
            positive.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = vec![T::zero(); targets.len()];
    {
        let p = g.value(reg);
        for (i, &pos) in positive.iter().enumerate() {
            if !pos {
                continue;
            }
            let pred = (p.data()[2 * i].to_f64_lossy(), p.data()[2 * i + 1].to_f64_lossy());
            let (l, (da, db)) = diou_term(pred, (targets[2 * i], targets[2 * i + 1]));
            total += l;
            grad[2 * i] = T::from_f64_lossy(da);
            grad[2 * i + 1] = T::from_f64_lossy(db);
        }
    }
    let grad = Tensor::from_vec(&shape, grad)?;
    Ok(g.custom(
        &[reg],
        Tensor::scalar(T::from_f64_lossy(total)),
        Box::new(move |ctx| {
            let mut gx = grad.clone();
            gx.scale_in_place(ctx.grad.item());
            vec![Some(gx)]
        }),
    ))
}

/// Loss components, already divided by `max(T+, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_positives: usize,
}

/// `(sum focal + lambda_reg * sum DIoU) / max(T+, 1)` over all levels, where
/// `T+` counts positives jointly across levels.
pub fn total_loss<T: Element>(
    g: &Graph<T>,
    heads: &[LevelHeads],
    masks: &[&[bool]],
    targets: &MomentTargets,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), TensorError> {
    if heads.is_empty() || heads.len() != targets.levels.len() || masks.len() != heads.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{} head levels, {} masks, {} target levels",
            heads.len(),
            masks.len(),
            targets.levels.len()
        )));
    }
    let num_positives = targets.num_positives();
    let norm = num_positives.max(1) as f64;
    let mut cls_terms = Vec::with_capacity(heads.len());
    let mut reg_terms = Vec::with_capacity(heads.len());
    for ((h, mask), t) in heads.iter().zip(masks).zip(&targets.levels) {
        cls_terms.push(focal_loss(g, h.cls_logits, &t.cls, mask, cfg.focal_gamma, cfg.focal_alpha)?);
        reg_terms.push(diou_loss(g, h.reg, &t.reg, &t.positive)?);
    }
    let sum = |terms: Vec<Var>| -> Result<Var, TensorError> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let cls = sum(cls_terms)?;
    let reg = sum(reg_terms)?;
    let cls_value = g.value(cls).item().to_f64_lossy() / norm;
    let reg_value = g.value(reg).item().to_f64_lossy() / norm;
    let weighted = g.add(cls, g.scale(reg, T::from_f64_lossy(cfg.lambda_reg)))?;
    let loss = g.scale(weighted, T::from_f64_lossy(1.0 / norm));
    let total = g.value(loss).item().to_f64_lossy();
    Ok((
        loss,
        LossBreakdown {
            total,
            cls: cls_value,
            reg: reg_value,
            num_positives,
        },
    ))
}

/// [`total_loss`] for a full forward pass, using the pyramid masks.
pub fn loss_for_output<T: Element>(
    g: &Graph<T>,
    out: &ForwardOutput,
    targets: &MomentTargets,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), TensorError> {
    let masks: Vec<&[bool]> = out.pyramid.levels.iter().map(|l| l.mask.as_slice()).collect();
    total_loss(g, &out.heads, &masks, targets, cfg)
}
