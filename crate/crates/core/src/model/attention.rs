//! Windowed multi-head self-attention.
//!
//! Query `t` attends to keys `j` with `|t - j| <= (W - 1) / 2` that are valid
//! under the sequence mask; windows are truncated at the sequence edges.
//! Scores are scaled by `1 / sqrt(D / heads)`.

use af_tensor::{Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::layers::Linear;
use super::ModelError;

fn check_geometry(d: usize, heads: usize, window: usize) -> Result<usize, ModelError> {
    if window.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "attention window must be odd, got {window}"
        )));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "{heads} heads do not divide embedding dimension {d}"
        )));
    }
    Ok(d / heads)
}

/// Fused local attention over `[T, D]` queries, keys and values. Returns the
/// concatenated per-head outputs `[T, D]`; rows of masked queries are zero.
pub fn local_attention<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    heads: usize,
    window: usize,
) -> Result<Var, ModelError> {
    let shape = g.shape(q);
    if shape.len() != 2 || g.shape(k) != shape || g.shape(v) != shape || mask.len() != shape[0] {
        return Err(ModelError::Config(format!(
            "attention inputs must share shape [T, D] with a length-T mask, got q {shape:?}, k {:?}, v {:?}, mask {}",
            g.shape(k),
            g.shape(v),
            mask.len()
        )));
    }
    let (len, d) = (shape[0], shape[1]);
    let dh = check_geometry(d, heads, window)?;
    let radius = (window - 1) / 2;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let geom = Geometry {
        len,
        d,
        dh,
        heads,
        radius,
        window,
        scale,
    };
    let mask = mask.to_vec();

    let (out, probs) = {
        let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
        geom.forward(qv.data(), kv.data(), vv.data(), &mask)
    };
    let value = Tensor::from_vec(&[len, d], out)?;
    Ok(g.custom(
        &[q, k, v],
        value,
        Box::new(move |ctx| {
            let (dq, dk, dv) = geom.backward(
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.inputs[2].data(),
                &probs,
                ctx.grad.data(),
                &mask,
            );
            [dq, dk, dv]
                .into_iter()
                .map(|d| Some(Tensor::from_vec(&[len, geom.d], d).unwrap()))
                .collect()
        }),
    ))
}

#[derive(Debug, Clone, Copy)]
struct Geometry<T> {
    len: usize,
    d: usize,
    dh: usize,
    heads: usize,
    radius: usize,
    window: usize,
    scale: T,
}

impl<T: Element> Geometry<T> {
    fn keys(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        t.saturating_sub(self.radius)..=(t + self.radius).min(self.len - 1)
    }

    /// Slot of key `j` in query `t`'s probability row.
    fn slot(&self, t: usize, j: usize) -> usize {
        j + self.radius - t
    }

    fn forward(&self, q: &[T], k: &[T], v: &[T], mask: &[bool]) -> (Vec<T>, Vec<T>) {
        let (d, dh, w) = (self.d, self.dh, self.window);
        let mut out = vec![T::zero(); self.len * d];
        let mut probs = vec![T::zero(); self.len * self.heads * w];
        let mut scores = vec![T::zero(); w];
        for t in 0..self.len {
            if !mask[t] {
                continue;
            }
            for h in 0..self.heads {
                let off = h * dh;
                let qt = &q[t * d + off..t * d + off + dh];
                let mut max = T::neg_infinity();
                for j in self.keys(t) {
                    if !mask[j] {
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = dot(qt, kj) * self.scale;
                    scores[self.slot(t, j)] = s;
                    max = max.max(s);
                }
                let p = &mut probs[(t * self.heads + h) * w..(t * self.heads + h + 1) * w];
                let mut sum = T::zero();
                for j in self.keys(t) {
                    if mask[j] {
                        let e = (scores[self.slot(t, j)] - max).exp();
                        p[self.slot(t, j)] = e;
                        sum += e;
                    }
                }
                let ot = &mut out[t * d + off..t * d + off + dh];
                for j in self.keys(t) {
                    let slot = self.slot(t, j);
                    if !mask[j] {
                        continue;
                    }
                    p[slot] /= sum;
                    let pj = p[slot];
                    for (o, &vv) in ot.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        (out, probs)
    }

    fn backward(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        probs: &[T],
        grad: &[T],
        mask: &[bool],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (d, dh, w) = (self.d, self.dh, self.window);
        let mut dq = vec![T::zero(); self.len * d];
        let mut dk = vec![T::zero(); self.len * d];
        let mut dv = vec![T::zero(); self.len * d];
        let mut dp = vec![T::zero(); w];
        for t in 0..self.len {
            if !mask[t] {
                continue;
            }
            for h in 0..self.heads {
                let off = h * dh;
                let p = &probs[(t * self.heads + h) * w..(t * self.heads + h + 1) * w];
                let gt = &grad[t * d + off..t * d + off + dh];
                let mut weighted = T::zero();
                for j in self.keys(t) {
                    if !mask[j] {
                        continue;
                    }
                    let slot = self.slot(t, j);
                    dp[slot] = dot(gt, &v[j * d + off..j * d + off + dh]);
                    weighted += p[slot] * dp[slot];
                    for (o, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gt) {
                        *o += p[slot] * gv;
                    }
                }
                let qt = &q[t * d + off..t * d + off + dh];
                for j in self.keys(t) {
                    if !mask[j] {
                        continue;
                    }
                    let slot = self.slot(t, j);
                    let ds = p[slot] * (dp[slot] - weighted) * self.scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + dh];
                    for (o, &kv) in dq[t * d + off..t * d + off + dh].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qt) {
                        *o += ds * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Attention composed from primitive graph ops (`matmul`, `softmax_rows`).
/// With `window = None` every valid key is visible (full attention);
/// otherwise the same band as [`local_attention`] is applied through `-inf`
/// score biases.
pub fn reference_attention<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    heads: usize,
    window: Option<usize>,
) -> Result<Var, ModelError> {
    let shape = g.shape(q);
    let (len, d) = (shape[0], shape[1]);
    let dh = check_geometry(d, heads, window.unwrap_or(1))?;
    let radius = window.map(|w| (w - 1) / 2).unwrap_or(len);
    let mut bias = Tensor::<T>::zeros(&[len, len]);
    for t in 0..len {
        for j in 0..len {
            if !mask[j] || t.abs_diff(j) > radius {
                bias.data_mut()[t * len + j] = T::neg_infinity();
            }
        }
    }
    let bias = g.constant(bias);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul(qh, g.transpose(kh)?)?;
        let s = g.add(g.scale(s, scale), bias)?;
        let p = g.softmax_rows(s);
        outs.push(g.matmul(p, vh)?);
    }
    let out = g.concat_cols(&outs)?;
    Ok(g.mask_rows(out, mask)?)
}

/// Multi-head local self-attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct LocalSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub window: usize,
}

impl LocalSelfAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        check_geometry(dim, heads, window)?;
        Ok(LocalSelfAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
            window,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = local_attention(g, q, k, v, mask, self.heads, self.window)?;
        let o = self.output.forward(g, store, a)?;
        Ok(g.mask_rows(o, mask)?)
    }
}
