use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::dim("softmax", "scalar input"))?;
    let mut out = x.clone();
    if width == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

struct ReluOp;
impl<T: Scalar> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx
            .grad
            .iter()
            .zip(ctx.inputs[0].data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    }
}

struct SigmoidOp;
impl<T: Scalar> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx
            .grad
            .iter()
            .zip(ctx.output.data())
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect();
        vec![Some(g)]
    }
}

struct SoftmaxOp;
impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let width = *ctx.output.shape().last().unwrap_or(&1);
        let mut dx = Vec::with_capacity(ctx.grad.len());
        for (g, y) in ctx
            .grad
            .chunks(width.max(1))
            .zip(ctx.output.data().chunks(width.max(1)))
        {
            let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
            dx.extend(g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)));
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu_forward(self.value(x));
        self.push_op(out, &[x], ReluOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect())?;
        self.push_op(out, &[x], SigmoidOp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_forward(self.value(x))?;
        self.push_op(out, &[x], SoftmaxOp)
    }
}
