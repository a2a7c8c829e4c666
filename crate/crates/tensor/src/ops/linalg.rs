use crate::error::{Result, TensorError};
use crate::gemm::{matmul_into, MatRef};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense `[m, k] x [k, n]` product.
pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::dim("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let c = matmul_into(MatRef::row_major(a.data(), m, k), MatRef::row_major(b.data(), k, n));
    Tensor::new([m, n], c)
}

pub fn transpose_forward<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 {
        return Err(TensorError::dim("transpose", format!("{:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    Tensor::new([c, r], out)
}

struct MatmulOp;
impl<T: Scalar> Backward<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let dc = MatRef::row_major(ctx.grad, m, n);
        let da = ctx.needs_grad[0].then(|| matmul_into(dc, MatRef::row_major(b.data(), k, n).t()));
        let db = ctx.needs_grad[1].then(|| matmul_into(MatRef::row_major(a.data(), m, k).t(), dc));
        vec![da, db]
    }
}

struct TransposeOp;
impl<T: Scalar> Backward<T> for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = Tensor::new(ctx.output.shape().to_vec(), ctx.grad.to_vec())
            .and_then(|g| transpose_forward(&g))
            .expect("transpose gradient");
        vec![Some(g.into_data())]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        self.push_op(out, &[a, b], MatmulOp)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose_forward(self.value(a))?;
        self.push_op(out, &[a], TransposeOp)
    }

    /// Row-wise affine map `x w + b` with `x: [n, in]`, `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }
}
