//! Reverse-mode differentiation over a linear record of tensor operations.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Relu(Var),
    Dropout(Var, Vec<T>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        c_out: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        c_in: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Pick(Var, usize),
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        channel_mask: Vec<bool>,
        denom: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Backward replays it in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Stop-gradient: a constant leaf holding the current value of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        value.set_grad(None);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x[c×h×w] + bias[c]` broadcast over each plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(bias).len() != c {
            return Err(dim_err("add_channel_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(h * w)
            .zip(b)
            .flat_map(|(plane, &bv)| plane.iter().map(move |&v| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Per-channel `x·scale[c] + shift[c]`; frozen batch norm.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(dim_err("channel_affine", self.shape(x), self.shape(scale)));
        }
        let (s, t) = (self.data(scale), self.data(shift));
        let data = self
            .data(x)
            .chunks(h * w)
            .enumerate()
            .flat_map(|(ch, plane)| plane.iter().map(move |&v| v * s[ch] + t[ch]))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(
            value,
            Op::ChannelAffine { x, scale, shift },
            &[x, scale, shift],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Multiplies by a stored mask (entries 0 or `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err("dropout", self.shape(x), &[mask.len()]));
        }
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SplitMix64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row normalization followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::cast(eps);
        let nf = T::count(n);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for (i, row) in self.data(x).chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Cross-correlation of `x[c_in×h×w]` with `w[c_out×c_in×k×k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(dim_err("conv2d weight", self.shape(x), &ws));
        };
        if wc_in != c_in || k != k2 {
            return Err(dim_err("conv2d", self.shape(x), &ws));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(dim_err("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeometry::new(c_in, h, wd, k, stride, pad)
            .ok_or_else(|| dim_err("conv2d kernel does not fit", self.shape(x), &ws))?;
        let col = kernels::im2col(self.data(x), &geom);
        let p = geom.col_cols();
        let mut out = vec![T::zero(); c_out * p];
        kernels::matmul(
            self.data(w),
            &col,
            c_out,
            geom.col_rows(),
            p,
            &mut out,
            false,
        );
        if let Some(b) = b {
            for (plane, &bv) in out.chunks_mut(p).zip(self.data(b)) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[c_out, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
            },
            &inputs,
        ))
    }

    /// Adjoint of [`Tape::conv2d`] with weight `w[c_in×c_out×k×k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [wc_in, c_out, k, k2] = ws[..] else {
            return Err(dim_err("conv_transpose2d weight", self.shape(x), &ws));
        };
        if wc_in != c_in || k != k2 || stride == 0 || (h - 1) * stride + k < 2 * pad {
            return Err(dim_err("conv_transpose2d", self.shape(x), &ws));
        }
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeometry::new(c_out, out_h, out_w, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| dim_err("conv_transpose2d geometry", self.shape(x), &ws))?;
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(dim_err("conv_transpose2d bias", &ws, self.shape(b)));
            }
        }
        let p = h * wd;
        let mut col = vec![T::zero(); geom.col_rows() * p];
        kernels::matmul_at_b(
            self.data(w),
            self.data(x),
            c_in,
            geom.col_rows(),
            p,
            &mut col,
            false,
        );
        let mut out = vec![T::zero(); c_out * out_h * out_w];
        kernels::col2im(&col, &geom, &mut out);
        if let Some(b) = b {
            for (plane, &bv) in out.chunks_mut(out_h * out_w).zip(self.data(b)) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[c_out, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                c_in,
            },
            &inputs,
        ))
    }

    /// Max pooling; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let geom = ConvGeometry::new(c, h, w, kernel, stride, pad)
            .ok_or_else(|| dim_err("max_pool2d", self.shape(x), &[kernel]))?;
        let data = self.data(x);
        let mut out = Vec::with_capacity(c * geom.out_h * geom.out_w);
        let mut argmax = Vec::with_capacity(out.capacity());
        for ch in 0..c {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let mut best: Option<(usize, T)> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if best.is_none_or(|(_, v)| data[idx] > v) {
                                best = Some((idx, data[idx]));
                            }
                        }
                    }
                    let (idx, v) = best.expect("window overlaps input");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let value = Tensor::new(&[c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Bilinear resize (align-corners false) of `x[c×h×w]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(dim_err("resize_bilinear", self.shape(x), &[out_h, out_w]));
        }
        let out = kernels::bilinear_resize(self.data(x), c, h, w, out_h, out_w);
        let value = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize { x, c, h, w }, &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if factor == 0 {
            return Err(Error::Usage("upsample factor must be >= 1".into()));
        }
        self.resize_bilinear(x, h * factor, w * factor)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (m, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &pn) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * pn..(i + 1) * pn]);
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Scalar holding `x.data[index]`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .data(x)
            .get(index)
            .ok_or_else(|| dim_err("pick", self.shape(x), &[index]))?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, index), &[x]))
    }

    /// Mean squared error over the cells of channels whose mask entry is true.
    /// `pred` is `[k×…]`; zero when no channel is selected.
    pub fn masked_mse(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        channel_mask: &[bool],
    ) -> Result<Var> {
        if self.shape(pred) != target.shape() || channel_mask.len() != self.shape(pred)[0] {
            return Err(dim_err("mse_loss", self.shape(pred), target.shape()));
        }
        let k = channel_mask.len();
        let per = target.len() / k;
        let active = channel_mask.iter().filter(|&&m| m).count();
        let denom = T::count((active * per).max(1));
        let mut total = T::zero();
        for (ch, &on) in channel_mask.iter().enumerate() {
            if on {
                let range = ch * per..(ch + 1) * per;
                for (&p, &t) in self.data(pred)[range.clone()]
                    .iter()
                    .zip(&target.data()[range])
                {
                    total += (p - t) * (p - t);
                }
            }
        }
        let op = Op::MaskedMse {
            pred,
            target: target.data().to_vec(),
            channel_mask: channel_mask.to_vec(),
            denom,
        };
        Ok(self.push(Tensor::scalar(total / denom), op, &[pred]))
    }

    // ----------------------------------------------------------- backward

    /// Fills gradients of `loss` w.r.t. every node it depends on. Leaves that
    /// require a gradient get it written into their tensor (zeros when
    /// unreachable). Each call starts from fresh buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&self.nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let filled = g
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.set_grad(Some(filled));
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn propagate<T: Scalar>(nodes: &[Node<T>], idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::matmul_a_bt(g, val(*b), m, n, k, da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::matmul_at_b(val(*a), g, m, k, n, db, true);
            }
        }
        Op::Transpose(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (m, n) = (shp(*x)[0], shp(*x)[1]);
                let mut t = vec![T::zero(); m * n];
                kernels::transpose(g, n, m, &mut t);
                add_into(dx, &t);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut()
                    .zip(g.iter().zip(val(*b)))
                    .for_each(|(d, (&gv, &bv))| *d += gv * bv);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut()
                    .zip(g.iter().zip(val(*a)))
                    .for_each(|(d, (&gv, &av))| *d += gv * av);
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
            }
        }
        Op::AddRowBias(x, b) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            let n = shp(*b).iter().product::<usize>();
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
        }
        Op::AddChannelBias(x, b) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            let c = shp(*x)[0];
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, plane) in db.iter_mut().zip(g.chunks(g.len() / c)) {
                    *d += plane.iter().copied().sum();
                }
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let c = shp(*x)[0];
            let hw = g.len() / c;
            if let Some(dx) = slot(nodes, grads, *x) {
                for (ch, (dplane, gplane)) in dx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                    let s = val(*scale)[ch];
                    dplane
                        .iter_mut()
                        .zip(gplane)
                        .for_each(|(d, &gv)| *d += gv * s);
                }
            }
            if let Some(ds) = slot(nodes, grads, *scale) {
                for (ch, (gplane, xplane)) in g.chunks(hw).zip(val(*x).chunks(hw)).enumerate() {
                    ds[ch] += gplane.iter().zip(xplane).map(|(&a, &b)| a * b).sum();
                }
            }
            if let Some(dt) = slot(nodes, grads, *shift) {
                for (d, plane) in dt.iter_mut().zip(g.chunks(hw)) {
                    *d += plane.iter().copied().sum();
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let y = node.value.data();
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Dropout(x, mask) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(d, (&gv, &m))| *d += gv * m);
            }
        }
        Op::SoftmaxRows(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let n = shp(*x)[1];
                let y = node.value.data();
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = shp(*x)[1];
            let gam = val(*gamma);
            if let Some(dx) = slot(nodes, grads, *x) {
                let nf = T::count(n);
                for (i, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let d = grow[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..n {
                        let d = grow[j] * gam[j];
                        drow[j] += inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    dg.iter_mut()
                        .zip(grow.iter().zip(xrow))
                        .for_each(|(d, (&a, &b))| *d += a * b);
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in g.chunks(n) {
                    add_into(db, grow);
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            c_out,
        } => {
            let (r, p) = (geom.col_rows(), geom.col_cols());
            if let Some(dw) = slot(nodes, grads, *w) {
                let col = kernels::im2col(val(*x), geom);
                kernels::matmul_a_bt(g, &col, *c_out, p, r, dw, true);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dcol = vec![T::zero(); r * p];
                kernels::matmul_at_b(val(*w), g, *c_out, r, p, &mut dcol, false);
                kernels::col2im(&dcol, geom, dx);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for (d, plane) in db.iter_mut().zip(g.chunks(p)) {
                        *d += plane.iter().copied().sum();
                    }
                }
            }
        }
        Op::ConvTranspose2d {
            x,
            w,
            b,
            geom,
            c_in,
        } => {
            let (r, p) = (geom.col_rows(), geom.col_cols());
            let gcol = kernels::im2col(g, geom);
            if let Some(dx) = slot(nodes, grads, *x) {
                kernels::matmul(val(*w), &gcol, *c_in, r, p, dx, true);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                kernels::matmul_a_bt(val(*x), &gcol, *c_in, p, r, dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for (d, plane) in db.iter_mut().zip(g.chunks(geom.h * geom.w)) {
                        *d += plane.iter().copied().sum();
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
            }
        }
        Op::Resize { x, c, h, w } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let s = node.value.shape();
                kernels::bilinear_resize_adjoint(g, *c, *h, *w, s[1], s[2], dx);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::SliceCols { x, start } => {
            let n = shp(*x)[1];
            let len = node.value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                    add_into(&mut drow[*start..*start + len], grow);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let pn = shp(p)[1];
                if let Some(dp) = slot(nodes, grads, p) {
                    for (drow, grow) in dp.chunks_mut(pn).zip(g.chunks(n)) {
                        add_into(drow, &grow[offset..offset + pn]);
                    }
                }
                offset += pn;
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Pick(x, i) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx[*i] += g[0];
            }
        }
        Op::MaskedMse {
            pred,
            target,
            channel_mask,
            denom,
        } => {
            if let Some(dp) = slot(nodes, grads, *pred) {
                let per = target.len() / channel_mask.len();
                let p = val(*pred);
                let two = T::cast(2.0);
                for (ch, &on) in channel_mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in ch * per..(ch + 1) * per {
                        dp[j] += g[0] * two * (p[j] - target[j]) / *denom;
                    }
                }
            }
        }
    }
}
