//! 3D cross-correlation on channel-first volumes `[C, D, W, H]`.
//!
//! Lowered to a single matrix product over an unfolded (im2col) buffer.
//! The buffer is rebuilt during backward instead of being kept on the tape.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, matmul_into, MatRef};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Kernel `k`, stride 1, padding `k / 2`.
    pub fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2)
    }

    pub fn output_len(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return Err(TensorError::dim(
                "conv3d",
                format!("input {input} with {self:?} yields no output"),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn spatial(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [_, d, w, h] => Ok([*d, *w, *h]),
        _ => Err(TensorError::dim("conv3d", format!("expected [C,D,W,H], got {shape:?}"))),
    }
}

/// Unfolded elements per chunk; small enough to stay cache resident.
const CHUNK_ELEMS: usize = 1 << 16;

/// Output lines `(od, ow)` per chunk.
fn lines_per_chunk(kk: usize, out: [usize; 3]) -> usize {
    (CHUNK_ELEMS / (kk * out[2]).max(1)).max(1)
}

fn chunk_starts(kk: usize, out: [usize; 3]) -> (usize, Vec<usize>) {
    let per = lines_per_chunk(kk, out);
    (per, (0..out[0] * out[1]).step_by(per).collect())
}

/// Unfolds output lines `[l0, l1)` of `x` into `[C*k^3, (l1-l0)*Ho]`.
fn im2col_lines<T: Scalar>(
    x: &[T],
    c: usize,
    dims: [usize; 3],
    geo: ConvGeometry,
    out: [usize; 3],
    lines: std::ops::Range<usize>,
) -> Vec<T> {
    let k = geo.kernel;
    let k3 = k * k * k;
    let vin = dims[0] * dims[1] * dims[2];
    let len = lines.len() * out[2];
    let mut col = vec![T::zero(); c * k3 * len];
    if len == 0 {
        return col;
    }
    for (row, dst) in col.chunks_mut(len).enumerate() {
        let ci = row / k3;
        let (kd, kw, kh) = ((row % k3) / (k * k), (row % (k * k)) / k, row % k);
        let src = &x[ci * vin..(ci + 1) * vin];
        for (j, line) in lines.clone().enumerate() {
            let (od, ow) = (line / out[1], line % out[1]);
            let id = (od * geo.stride + kd) as isize - geo.padding as isize;
            let iw = (ow * geo.stride + kw) as isize - geo.padding as isize;
            if id < 0 || id >= dims[0] as isize || iw < 0 || iw >= dims[1] as isize {
                continue;
            }
            let base_in = (id as usize * dims[1] + iw as usize) * dims[2];
            let dst = &mut dst[j * out[2]..(j + 1) * out[2]];
            // Valid outputs satisfy 0 <= oh*stride + kh - padding < H.
            let lo = geo.padding.saturating_sub(kh).div_ceil(geo.stride);
            let hi = (dims[2] + geo.padding)
                .saturating_sub(kh)
                .div_ceil(geo.stride)
                .min(out[2]);
            if lo >= hi {
                continue;
            }
            let first = base_in + lo * geo.stride + kh - geo.padding;
            if geo.stride == 1 {
                dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
            } else {
                for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(geo.stride)) {
                    *d = v;
                }
            }
        }
    }
    col
}

/// `W [Cout, C*k^3] * unfold(x)`, evaluated chunk by chunk.
fn conv_unfolded<T: Scalar>(
    x: &[T],
    c_in: usize,
    dims: [usize; 3],
    w: &[T],
    c_out: usize,
    geo: ConvGeometry,
    out: [usize; 3],
) -> Vec<T> {
    let kk = c_in * geo.kernel.pow(3);
    let (vout, lines) = (out[0] * out[1] * out[2], out[0] * out[1]);
    let (per, starts) = chunk_starts(kk, out);
    let wm = MatRef::row_major(w, c_out, kk);
    let parts: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&l0| {
            let l1 = (l0 + per).min(lines);
            let col = im2col_lines(x, c_in, dims, geo, out, l0..l1);
            matmul_into(wm, MatRef::row_major(&col, kk, (l1 - l0) * out[2]))
        })
        .collect();
    let mut y = vec![T::zero(); c_out * vout];
    for (&l0, part) in starts.iter().zip(&parts) {
        let len = part.len() / c_out;
        for co in 0..c_out {
            y[co * vout + l0 * out[2]..][..len].copy_from_slice(&part[co * len..(co + 1) * len]);
        }
    }
    y
}

/// Eight-lane dot product; the fixed lane split keeps it vectorizable.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `dW = dy * unfold(x)^T`, chunk partials summed in chunk order.
fn conv_weight_grad<T: Scalar>(
    x: &[T],
    c_in: usize,
    dims: [usize; 3],
    dy: &[T],
    c_out: usize,
    geo: ConvGeometry,
    out: [usize; 3],
) -> Vec<T> {
    let kk = c_in * geo.kernel.pow(3);
    let (vout, lines) = (out[0] * out[1] * out[2], out[0] * out[1]);
    let (per, starts) = chunk_starts(kk, out);
    let parts: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&l0| {
            let l1 = (l0 + per).min(lines);
            let len = (l1 - l0) * out[2];
            let col = im2col_lines(x, c_in, dims, geo, out, l0..l1);
            let mut part = vec![T::zero(); c_out * kk];
            for (r, row) in col.chunks_exact(len).enumerate() {
                for co in 0..c_out {
                    part[co * kk + r] = dot(row, &dy[co * vout + l0 * out[2]..][..len]);
                }
            }
            part
        })
        .collect();
    let mut dw = vec![T::zero(); c_out * kk];
    for part in &parts {
        dw.iter_mut().zip(part).for_each(|(a, b)| *a += *b);
    }
    dw
}

/// `[Cin, Cout, k, k, k]` with every kernel reversed: the adjoint of a
/// stride-1 correlation is a correlation with these weights.
fn flip_weights<T: Scalar>(w: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let k3 = k * k * k;
    let mut f = vec![T::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for r in 0..k3 {
                f[(ci * c_out + co) * k3 + (k3 - 1 - r)] = w[(co * c_in + ci) * k3 + r];
            }
        }
    }
    f
}

/// Folds `[C*k^3, Vout]` back onto `[C, D, W, H]`, summing overlaps.
fn col2im<T: Scalar>(col: &[T], c: usize, dims: [usize; 3], geo: ConvGeometry, out: [usize; 3]) -> Vec<T> {
    let k = geo.kernel;
    let k3 = k * k * k;
    let vin = dims[0] * dims[1] * dims[2];
    let vout = out[0] * out[1] * out[2];
    let mut dx = vec![T::zero(); c * vin];
    dx.par_chunks_mut(vin).enumerate().for_each(|(ci, dst)| {
        for r in 0..k3 {
            let (kd, kw, kh) = (r / (k * k), (r % (k * k)) / k, r % k);
            let src = &col[(ci * k3 + r) * vout..(ci * k3 + r + 1) * vout];
            for od in 0..out[0] {
                let id = (od * geo.stride + kd) as isize - geo.padding as isize;
                if id < 0 || id >= dims[0] as isize {
                    continue;
                }
                for ow in 0..out[1] {
                    let iw = (ow * geo.stride + kw) as isize - geo.padding as isize;
                    if iw < 0 || iw >= dims[1] as isize {
                        continue;
                    }
                    let base_in = (id as usize * dims[1] + iw as usize) * dims[2];
                    let base_out = (od * out[1] + ow) * out[2];
                    for oh in 0..out[2] {
                        let ih = (oh * geo.stride + kh) as isize - geo.padding as isize;
                        if ih >= 0 && ih < dims[2] as isize {
                            dst[base_in + ih as usize] += src[base_out + oh];
                        }
                    }
                }
            }
        }
    });
    dx
}

fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T], width: usize) {
    for (row, &b) in out.chunks_mut(width).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Checks shapes and returns `(c_in, c_out, in_dims, out_dims)`.
fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<(usize, usize, [usize; 3], [usize; 3])> {
    let dims = spatial(x.shape())?;
    let c_in = x.shape()[0];
    let k = geo.kernel;
    let ws = w.shape();
    if ws.len() != 5 || ws[1] != c_in || ws[2] != k || ws[3] != k || ws[4] != k {
        return Err(TensorError::dim(
            "conv3d",
            format!("weight {ws:?} for input {:?} and kernel {k}", x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [ws[0]] {
            return Err(TensorError::dim("conv3d", format!("bias {:?}", b.shape())));
        }
    }
    let out = [
        geo.output_len(dims[0])?,
        geo.output_len(dims[1])?,
        geo.output_len(dims[2])?,
    ];
    Ok((c_in, ws[0], dims, out))
}

/// Plain cross-correlation; `w: [Cout, Cin, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (c_in, c_out, dims, out) = conv_dims(x, w, b, geo)?;
    let vout = out[0] * out[1] * out[2];
    let kk = c_in * geo.kernel.pow(3);
    let wm = MatRef::row_major(w.data(), c_out, kk);
    let mut y = if geo.is_pointwise() {
        matmul_into(wm, MatRef::row_major(x.data(), kk, vout))
    } else {
        conv_unfolded(x.data(), c_in, dims, w.data(), c_out, geo, out)
    };
    if let Some(b) = b {
        add_row_bias(&mut y, b.data(), vout);
    }
    Tensor::new([c_out, out[0], out[1], out[2]], y)
}

struct Conv3dOp {
    geo: ConvGeometry,
}

impl<T: Scalar> Backward<T> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let b = ctx.inputs.get(2).copied();
        let (c_in, c_out, dims, out) = conv_dims(x, w, b, self.geo).expect("validated in forward");
        let vout = out[0] * out[1] * out[2];
        let kk = c_in * self.geo.kernel.pow(3);
        let dy = MatRef::row_major(ctx.grad, c_out, vout);
        let k = self.geo.kernel;
        let dw = ctx.needs_grad[1].then(|| {
            if self.geo.is_pointwise() {
                matmul_into(dy, MatRef::row_major(x.data(), kk, vout).t())
            } else {
                conv_weight_grad(x.data(), c_in, dims, ctx.grad, c_out, self.geo, out)
            }
        });
        let dx = ctx.needs_grad[0].then(|| {
            if self.geo.stride == 1 && self.geo.padding < k {
                let flipped = flip_weights(w.data(), c_out, c_in, k);
                let adj = ConvGeometry::new(k, 1, k - 1 - self.geo.padding);
                return conv_unfolded(ctx.grad, c_out, out, &flipped, c_in, adj, dims);
            }
            let wm = MatRef::row_major(w.data(), c_out, kk);
            let mut dcol = vec![T::zero(); kk * vout];
            gemm(wm.t(), dy, &mut dcol, T::zero());
            col2im(&dcol, c_in, dims, self.geo, out)
        });
        let mut grads = vec![dx, dw];
        if b.is_some() {
            grads.push(ctx.needs_grad[2].then(|| ctx.grad.chunks(vout).map(|r| r.iter().copied().sum()).collect()));
        }
        grads
    }
}

/// Pointwise channel mix `w: [Cout, Cin]` on `[Cin, D, W, H]`.
pub fn conv3d_1x1_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let dims = spatial(x.shape())?;
    let (c_in, v) = (x.shape()[0], x.inner_len());
    if w.ndim() != 2 || w.shape()[1] != c_in {
        return Err(TensorError::dim(
            "conv3d_1x1",
            format!("weight {:?} for {c_in} input channels", w.shape()),
        ));
    }
    let c_out = w.shape()[0];
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(TensorError::dim("conv3d_1x1", format!("bias {:?}", b.shape())));
        }
    }
    let mut y = matmul_into(
        MatRef::row_major(w.data(), c_out, c_in),
        MatRef::row_major(x.data(), c_in, v),
    );
    if let Some(b) = b {
        add_row_bias(&mut y, b.data(), v);
    }
    Tensor::new([c_out, dims[0], dims[1], dims[2]], y)
}

struct Conv1x1Op;

impl<T: Scalar> Backward<T> for Conv1x1Op {
    fn name(&self) -> &'static str {
        "conv3d_1x1"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (c_in, v) = (x.shape()[0], x.inner_len());
        let c_out = w.shape()[0];
        let dy = MatRef::row_major(ctx.grad, c_out, v);
        let dx = ctx.needs_grad[0].then(|| matmul_into(MatRef::row_major(w.data(), c_out, c_in).t(), dy));
        let dw = ctx.needs_grad[1].then(|| matmul_into(dy, MatRef::row_major(x.data(), c_in, v).t()));
        let mut grads = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs_grad[2].then(|| ctx.grad.chunks(v).map(|r| r.iter().copied().sum()).collect()));
        }
        grads
    }
}

impl<T: Scalar> Graph<T> {
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push_op(out, &inputs, Conv3dOp { geo })
    }

    pub fn conv3d_1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv3d_1x1_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push_op(out, &inputs, Conv1x1Op)
    }
}
