//! Differentiable operations recorded on a [`Graph`].
//!
//! Sequence tensors are `[T, C]` matrices (time-major). Operations that take a
//! validity mask zero the rows of invalid time steps in their output.

use crate::element::Element;
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// `sqrt(2 / pi)`, the tanh-approximation constant for GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

fn broadcast_reps(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(1);
    }
    if nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) {
        return Ok(if nb == 0 { 0 } else { na / nb });
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sums `g` over broadcast repetitions down to `shape`.
fn reduce_to<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let n = out.numel();
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mask after strided subsampling: output step `o` is valid iff input step `o * stride` is.
pub fn downsample_mask(mask: &[bool], stride: usize) -> Vec<bool> {
    mask.iter().step_by(stride.max(1)).copied().collect()
}

/// Convolution geometry shared by the dense and depthwise paths.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    t_in: usize,
    t_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Input index read by output `o` at kernel tap `j`, if inside the sequence.
    #[inline]
    fn source(&self, o: usize, j: usize) -> Option<usize> {
        let s = (o * self.stride + j) as isize - self.pad as isize;
        if s >= 0 && (s as usize) < self.t_in {
            Some(s as usize)
        } else {
            None
        }
    }
}

impl<T: Element> Graph<T> {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        // `df(input, output)` is the local derivative.
        let value = self.value(x).map(f);
        self.custom(
            &[x],
            value,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0];
                let mut g = ctx.grad.clone();
                for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(ctx.output.data()) {
                    *gv *= df(xv, yv);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        broadcast_reps("add", &sa, &sb)?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let nb = vb.numel();
            let mut out = va.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += vb.data()[i % nb];
            }
            out
        };
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.clone());
                let gb = ctx.needs[1].then(|| reduce_to(ctx.grad, &sb));
                vec![ga, gb]
            }),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        broadcast_reps("mul", &sa, &sb)?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let nb = vb.numel();
            let mut out = va.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o *= vb.data()[i % nb];
            }
            out
        };
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (va, vb) = (ctx.inputs[0], ctx.inputs[1]);
                let nb = vb.numel();
                let ga = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    for (i, o) in g.data_mut().iter_mut().enumerate() {
                        *o *= vb.data()[i % nb];
                    }
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = Tensor::zeros(&sb);
                    for (i, (&g, &x)) in ctx.grad.data().iter().zip(va.data()).enumerate() {
                        out.data_mut()[i % nb] += g * x;
                    }
                    out
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v < T::zero() { T::zero() } else { v },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(
            &[x],
            value,
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let orig = self.shape(x);
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(&orig).unwrap())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose needs rank >= 2, got {shape:?}"
            )));
        }
        let value = transpose_last2(&self.value(x));
        Ok(self.custom(
            &[x],
            value,
            Box::new(|ctx| vec![Some(transpose_last2(ctx.grad))]),
        ))
    }

    /// Batched matrix product. `b` is either batched like `a` or a plain matrix
    /// shared across the batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let dims = MatmulDims::new(&sa, &sb)?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let mut out = Tensor::zeros(&dims.out_shape);
            dims.forward(va.data(), vb.data(), out.data_mut());
            out
        };
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (va, vb) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let mut out = Tensor::zeros(&sa);
                    dims.grad_a(g, vb.data(), out.data_mut());
                    out
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = Tensor::zeros(&sb);
                    dims.grad_b(va.data(), g, out.data_mut());
                    out
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Row-wise softmax over the last axis. Rows that are entirely `-inf`
    /// (fully masked) produce zeros.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let value = softmax_rows_value(&self.value(x));
        self.custom(
            &[x],
            value,
            Box::new(|ctx| {
                let p = ctx.output;
                let mut g = ctx.grad.clone();
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row_mut(r);
                    let dot: T = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for (gv, &pv) in gr.iter_mut().zip(pr) {
                        *gv = pv * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&1);
        for (v, name) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            let s = self.shape(v);
            if s != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: sx.clone(),
                    rhs: s,
                });
            }
        }
        if d == 0 {
            return Err(TensorError::InvalidArgument("layer_norm over empty axis".into()));
        }
        let (value, xhat, rstd) = {
            let vx = self.value(x);
            let (vg, vb) = (self.value(gain), self.value(bias));
            let rows = vx.rows();
            let mut xhat = Tensor::zeros(&sx);
            let mut rstd = vec![T::zero(); rows];
            let mut out = Tensor::zeros(&sx);
            let inv_d = T::one() / T::from_usize(d).unwrap();
            for r in 0..rows {
                let xr = vx.row(r);
                let mean = xr.iter().copied().sum::<T>() * inv_d;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                let xh = xhat.row_mut(r);
                for (h, &v) in xh.iter_mut().zip(xr) {
                    *h = (v - mean) * rs;
                }
                let orow = out.row_mut(r);
                for i in 0..d {
                    orow[i] = xhat.row(r)[i] * vg.data()[i] + vb.data()[i];
                }
            }
            (out, xhat, rstd)
        };
        Ok(self.custom(
            &[x, gain, bias],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gain = ctx.inputs[1];
                let rows = g.rows();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let gx = ctx.needs[0].then(|| {
                    let mut dx = Tensor::zeros(&sx);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            dxh[i] = gr[i] * gain.data()[i];
                            m1 += dxh[i];
                            m2 += dxh[i] * xh[i];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let out = dx.row_mut(r);
                        for i in 0..d {
                            out[i] = rstd[r] * (dxh[i] - m1 - xh[i] * m2);
                        }
                    }
                    dx
                });
                let ggain = ctx.needs[1].then(|| {
                    let mut out = Tensor::zeros(&[d]);
                    for r in 0..rows {
                        for ((o, &gv), &h) in out.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * h;
                        }
                    }
                    out
                });
                let gbias = ctx.needs[2].then(|| reduce_to(g, &[d]));
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Zeroes the rows (time steps) of a `[T, C]` tensor where `mask` is false.
    pub fn mask_rows(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != mask.len() {
            return Err(TensorError::InvalidArgument(format!(
                "mask of length {} for tensor {sx:?}",
                mask.len()
            )));
        }
        let mask = mask.to_vec();
        let apply = move |t: &mut Tensor<T>| {
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    t.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                }
            }
        };
        let mut value = self.value(x).clone();
        apply(&mut value);
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                apply(&mut g);
                vec![Some(g)]
            }),
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + len > sx[1] {
            return Err(TensorError::InvalidArgument(format!(
                "slice_cols [{start}, {}) of {sx:?}",
                start + len
            )));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let value = {
            let vx = self.value(x);
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&vx.row(r)[start..start + len]);
            }
            Tensor::from_vec(&[rows, len], out)?
        };
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    g.row_mut(r)[start..start + len].copy_from_slice(ctx.grad.row(r));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.shape(v)).collect();
        let rows = shapes.first().map(|s| s[0]).unwrap_or(0);
        for s in &shapes {
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: shapes[0].clone(),
                    rhs: s.clone(),
                });
            }
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let total: usize = widths.iter().sum();
        let value = {
            let mut out = Tensor::zeros(&[rows, total]);
            let mut off = 0;
            for (&v, &w) in xs.iter().zip(&widths) {
                let vx = self.value(v);
                for r in 0..rows {
                    out.row_mut(r)[off..off + w].copy_from_slice(vx.row(r));
                }
                off += w;
            }
            out
        };
        Ok(self.custom(
            xs,
            value,
            Box::new(move |ctx| {
                let mut off = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut g = Tensor::zeros(&[rows, w]);
                        for r in 0..rows {
                            g.row_mut(r).copy_from_slice(&ctx.grad.row(r)[off..off + w]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    off += w;
                }
                grads
            }),
        ))
    }

    /// 1D convolution over time with symmetric zero padding `kernel / 2`.
    ///
    /// `x` is `[T, C_in]`. Dense weights are `[k, C_in, C_out]`; depthwise
    /// weights are `[k, 1, C]` with `C == C_in`. Masked input steps read as
    /// zero and masked output steps (by strided subsampling of `mask`) are zeroed.
    /// Output length is `ceil(T / stride)`.
    pub fn conv1d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        depthwise: bool,
        mask: &[bool],
    ) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        if sx.len() != 2 || sw.len() != 3 {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d expects x [T, C] and weight [k, C_in, C_out], got {sx:?} and {sw:?}"
            )));
        }
        let (t_in, c_in) = (sx[0], sx[1]);
        let kernel = sw[0];
        if kernel.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d kernel size must be odd, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv1d stride must be >= 1".into()));
        }
        if mask.len() != t_in {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d mask length {} for T = {t_in}",
                mask.len()
            )));
        }
        let c_out = if depthwise {
            if sw[1] != 1 || sw[2] != c_in {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d depthwise weight",
                    lhs: vec![kernel, 1, c_in],
                    rhs: sw,
                });
            }
            c_in
        } else {
            if sw[1] != c_in {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d weight",
                    lhs: sx,
                    rhs: sw,
                });
            }
            sw[2]
        };
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: vec![c_out],
                    rhs: sb,
                });
            }
        }
        let geom = ConvGeom {
            t_in,
            t_out: t_in.div_ceil(stride),
            kernel,
            stride,
            pad: kernel / 2,
        };
        let in_mask = mask.to_vec();
        let out_mask = downsample_mask(mask, stride);

        let (value, cols) = {
            let vx = self.value(x);
            let vw = self.value(weight);
            let vb = bias.map(|b| self.value(b));
            let mut out = Tensor::zeros(&[geom.t_out, c_out]);
            let cols = if depthwise {
                depthwise_forward(&geom, vx.data(), &in_mask, vw.data(), c_in, out.data_mut());
                None
            } else {
                let cols = im2col(&geom, vx.data(), &in_mask, c_in);
                T::gemm(
                    geom.t_out,
                    kernel * c_in,
                    c_out,
                    T::one(),
                    &cols,
                    false,
                    vw.data(),
                    false,
                    T::zero(),
                    out.data_mut(),
                );
                Some(cols)
            };
            if let Some(vb) = vb {
                for r in 0..geom.t_out {
                    for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                        *o += b;
                    }
                }
            }
            zero_rows(&mut out, &out_mask);
            (out, cols)
        };

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.custom(
            &inputs,
            value,
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                zero_rows(&mut g, &out_mask);
                let (vx, vw) = (ctx.inputs[0], ctx.inputs[1]);
                let mut grads = Vec::with_capacity(3);
                if depthwise {
                    let (gx, gw) = depthwise_backward(
                        &geom,
                        vx.data(),
                        &in_mask,
                        vw.data(),
                        c_in,
                        g.data(),
                        ctx.needs[0],
                        ctx.needs[1],
                    );
                    grads.push(gx.map(|d| Tensor::from_vec(&[geom.t_in, c_in], d).unwrap()));
                    grads.push(gw.map(|d| Tensor::from_vec(&[kernel, 1, c_in], d).unwrap()));
                } else {
                    let cols = cols.as_ref().expect("dense conv keeps im2col buffer");
                    let kc = kernel * c_in;
                    grads.push(ctx.needs[0].then(|| {
                        let mut dcols = vec![T::zero(); geom.t_out * kc];
                        T::gemm(
                            geom.t_out,
                            c_out,
                            kc,
                            T::one(),
                            g.data(),
                            false,
                            vw.data(),
                            true,
                            T::zero(),
                            &mut dcols,
                        );
                        let dx = col2im(&geom, &dcols, &in_mask, c_in);
                        Tensor::from_vec(&[geom.t_in, c_in], dx).unwrap()
                    }));
                    grads.push(ctx.needs[1].then(|| {
                        let mut dw = Tensor::zeros(&[kernel, c_in, c_out]);
                        T::gemm(
                            kc,
                            geom.t_out,
                            c_out,
                            T::one(),
                            cols,
                            true,
                            g.data(),
                            false,
                            T::zero(),
                            dw.data_mut(),
                        );
                        dw
                    }));
                }
                if has_bias {
                    grads.push(ctx.needs[2].then(|| reduce_to(&g, &[c_out])));
                }
                grads
            }),
        ))
    }
}

fn zero_rows<T: Element>(t: &mut Tensor<T>, mask: &[bool]) {
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            t.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn im2col<T: Element>(geom: &ConvGeom, x: &[T], mask: &[bool], c_in: usize) -> Vec<T> {
    let kc = geom.kernel * c_in;
    let mut cols = vec![T::zero(); geom.t_out * kc];
    for o in 0..geom.t_out {
        for j in 0..geom.kernel {
            if let Some(s) = geom.source(o, j) {
                if mask[s] {
                    let dst = o * kc + j * c_in;
                    cols[dst..dst + c_in].copy_from_slice(&x[s * c_in..(s + 1) * c_in]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(geom: &ConvGeom, dcols: &[T], mask: &[bool], c_in: usize) -> Vec<T> {
    let kc = geom.kernel * c_in;
    let mut dx = vec![T::zero(); geom.t_in * c_in];
    for o in 0..geom.t_out {
        for j in 0..geom.kernel {
            if let Some(s) = geom.source(o, j) {
                if mask[s] {
                    let src = o * kc + j * c_in;
                    for (d, &v) in dx[s * c_in..(s + 1) * c_in].iter_mut().zip(&dcols[src..src + c_in]) {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

fn depthwise_forward<T: Element>(
    geom: &ConvGeom,
    x: &[T],
    mask: &[bool],
    w: &[T],
    c: usize,
    out: &mut [T],
) {
    for o in 0..geom.t_out {
        let orow = &mut out[o * c..(o + 1) * c];
        for j in 0..geom.kernel {
            if let Some(s) = geom.source(o, j) {
                if mask[s] {
                    let xr = &x[s * c..(s + 1) * c];
                    let wr = &w[j * c..(j + 1) * c];
                    for ((ov, &xv), &wv) in orow.iter_mut().zip(xr).zip(wr) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Element>(
    geom: &ConvGeom,
    x: &[T],
    mask: &[bool],
    w: &[T],
    c: usize,
    g: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_x.then(|| vec![T::zero(); geom.t_in * c]);
    let mut dw = need_w.then(|| vec![T::zero(); geom.kernel * c]);
    for o in 0..geom.t_out {
        let gr = &g[o * c..(o + 1) * c];
        for j in 0..geom.kernel {
            let Some(s) = geom.source(o, j) else { continue };
            if !mask[s] {
                continue;
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &w[j * c..(j + 1) * c];
                for ((d, &gv), &wv) in dx[s * c..(s + 1) * c].iter_mut().zip(gr).zip(wr) {
                    *d += gv * wv;
                }
            }
            if let Some(dw) = dw.as_mut() {
                let xr = &x[s * c..(s + 1) * c];
                for ((d, &gv), &xv) in dw[j * c..(j + 1) * c].iter_mut().zip(gr).zip(xr) {
                    *d += gv * xv;
                }
            }
        }
    }
    (dx, dw)
}

fn transpose_last2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (m * n).max(1);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_value<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatmulDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(mismatch());
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulDims {
            batch: batch_a.iter().product(),
            m,
            k,
            n,
            shared_b,
            out_shape,
        })
    }

    fn forward<T: Element>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_b {
            T::gemm(self.batch * m, k, n, T::one(), a, false, b, false, T::zero(), c);
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
    }

    fn grad_a<T: Element>(&self, g: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_b {
            T::gemm(self.batch * m, n, k, T::one(), g, false, b, true, T::zero(), da);
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &g[i * m * n..(i + 1) * m * n],
                false,
                &b[i * k * n..(i + 1) * k * n],
                true,
                T::zero(),
                &mut da[i * m * k..(i + 1) * m * k],
            );
        }
    }

    fn grad_b<T: Element>(&self, a: &[T], g: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_b {
            T::gemm(k, self.batch * m, n, T::one(), a, true, g, false, T::zero(), db);
            return;
        }
        for i in 0..self.batch {
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &a[i * m * k..(i + 1) * m * k],
                true,
                &g[i * m * n..(i + 1) * m * n],
                false,
                T::zero(),
                &mut db[i * k * n..(i + 1) * k * n],
            );
        }
    }
}
