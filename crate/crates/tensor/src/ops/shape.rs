//! Elementwise arithmetic, reductions, and layout ops.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
    }
}

struct AddScaledOp<T>(T);
impl<T: Scalar> Backward<T> for AddScaledOp<T> {
    fn name(&self) -> &'static str {
        "add_scaled"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let alpha = self.0;
        vec![
            Some(ctx.grad.to_vec()),
            ctx.needs_grad[1].then(|| ctx.grad.iter().map(|&g| g * alpha).collect()),
        ]
    }
}

struct SubOp;
impl<T: Scalar> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]
    }
}

struct MulOp;
impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs_grad[0].then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
            ctx.needs_grad[1].then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct SumOp {
    scale: f64,
}
impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad[0] * T::of(self.scale);
        vec![Some(vec![g; ctx.inputs[0].numel()])]
    }
}

struct ReshapeOp;
impl<T: Scalar> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

/// Row block `[start, start+len)` along the first axis.
struct SliceRowsOp {
    start: usize,
    row_len: usize,
}
impl<T: Scalar> Backward<T> for SliceRowsOp {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); ctx.inputs[0].numel()];
        let at = self.start * self.row_len;
        g[at..at + ctx.grad.len()].copy_from_slice(ctx.grad);
        vec![Some(g)]
    }
}

struct ConcatRowsOp;
impl<T: Scalar> Backward<T> for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut at = 0;
        ctx.inputs
            .iter()
            .zip(&ctx.needs_grad)
            .map(|(x, &need)| {
                let n = x.numel();
                let g = need.then(|| ctx.grad[at..at + n].to_vec());
                at += n;
                g
            })
            .collect()
    }
}

struct SliceColsOp {
    start: usize,
    cols: usize,
}
impl<T: Scalar> Backward<T> for SliceColsOp {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let width = ctx.output.shape()[1];
        let mut g = vec![T::zero(); ctx.inputs[0].numel()];
        for (dst, src) in g.chunks_mut(self.cols).zip(ctx.grad.chunks(width)) {
            dst[self.start..self.start + width].copy_from_slice(src);
        }
        vec![Some(g)]
    }
}

struct ConcatColsOp;
impl<T: Scalar> Backward<T> for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total = ctx.output.shape()[1];
        let mut start = 0;
        ctx.inputs
            .iter()
            .zip(&ctx.needs_grad)
            .map(|(x, &need)| {
                let w = x.shape()[1];
                let g = need.then(|| {
                    ctx.grad
                        .chunks(total)
                        .flat_map(|row| row[start..start + w].iter().copied())
                        .collect()
                });
                start += w;
                g
            })
            .collect()
    }
}

/// Adds a vector along one axis: `x` viewed as `[outer, n, inner]`.
struct AddBiasOp {
    outer: usize,
    n: usize,
    inner: usize,
}
impl<T: Scalar> Backward<T> for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let db = ctx.needs_grad[1].then(|| {
            let mut db = vec![T::zero(); self.n];
            for o in 0..self.outer {
                for (j, acc) in db.iter_mut().enumerate() {
                    let at = (o * self.n + j) * self.inner;
                    *acc += ctx.grad[at..at + self.inner].iter().copied().sum::<T>();
                }
            }
            db
        });
        vec![Some(ctx.grad.to_vec()), db]
    }
}

pub fn add_bias_forward<T: Scalar>(x: &Tensor<T>, b: &[T], axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] != b.len() {
        return Err(TensorError::dim(
            "add_bias",
            format!("bias of length {} on axis {axis} of {shape:?}", b.len()),
        ));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let bias = b[i % n];
        chunk.iter_mut().for_each(|v| *v += bias);
    }
    Ok(out)
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(out, &[a, b], AddOp)
    }

    /// `a + alpha * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add_scaled", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q * alpha).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(out, &[a, b], AddScaledOp(alpha))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(out, &[a, b], SubOp)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push_op(out, &[a, b], MulOp)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())?;
        self.push_op(out, &[a], ScaleOp(c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, &[a], SumOp { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.numel() as f64;
        let out = Tensor::scalar(x.sum() / T::of(n));
        self.push_op(out, &[a], SumOp { scale: 1.0 / n })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push_op(out, &[a], ReshapeOp)
    }

    /// Rows `[start, start+len)` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape()[0];
        if start + len > rows {
            return Err(TensorError::dim(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let row_len = x.inner_len();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let data = x.data()[start * row_len..(start + len) * row_len].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push_op(out, &[a], SliceRowsOp { start, row_len })
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.shape()[1..] != tail[..] {
                return Err(TensorError::dim(
                    "concat_rows",
                    format!("{:?} vs trailing {tail:?}", x.shape()),
                ));
            }
            rows += x.shape()[0];
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.push_op(out, parts, ConcatRowsOp)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || start + len > x.shape()[1] {
            return Err(TensorError::dim(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let cols = x.shape()[1];
        let data = x
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new([x.shape()[0], len], data)?;
        self.push_op(out, &[a], SliceColsOp { start, cols })
    }

    /// Concatenates matrices along the second axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::dim("concat_cols", format!("{s:?} with {rows} rows")));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let x = self.value(p);
                let w = x.shape()[1];
                data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        self.push_op(out, parts, ConcatColsOp)
    }

    /// Broadcast-adds `b` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x);
        let out = add_bias_forward(xs, self.value(b).data(), axis)?;
        let shape = xs.shape();
        let op = AddBiasOp {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        };
        self.push_op(out, &[x, b], op)
    }
}
