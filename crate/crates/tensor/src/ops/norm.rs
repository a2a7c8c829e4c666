//! Instance and layer normalization.
//!
//! Both normalize contiguous groups (a channel's voxels, or a token's
//! features) to zero mean and unit biased variance, then apply a learned
//! affine map. They differ only in which axis the affine parameters index.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default epsilon for both normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each contiguous group of `width` values. Returns `(xhat, inv_std)`.
fn normalize_groups<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let inv: Vec<T> = xhat
        .par_chunks_mut(width)
        .zip(x.par_chunks(width))
        .map(|(out, group)| {
            let n = T::of(width as f64);
            let mean = group.iter().copied().sum::<T>() / n;
            let var = group.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(group) {
                *o = (v - mean) * inv;
            }
            inv
        })
        .collect();
    (xhat, inv)
}

/// `dx` for one group given `dxhat = dy * gamma`.
fn group_input_grad<T: Scalar>(dxhat: &[T], xhat: &[T], inv: T, out: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
    for ((o, &d), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv * (d - mean_d - xh * mean_dx);
    }
}

pub struct InstanceNormOutput<T> {
    pub y: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` per channel of `[C, ...]`.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<InstanceNormOutput<T>> {
    let c = *x.shape().first().unwrap_or(&0);
    let width = x.inner_len();
    if x.ndim() < 2 || gamma.len() != c || beta.len() != c {
        return Err(TensorError::dim(
            "instance_norm",
            format!("{:?} with {} gammas and {} betas", x.shape(), gamma.len(), beta.len()),
        ));
    }
    if width < 2 {
        return Err(TensorError::dim("instance_norm", "needs at least 2 voxels per channel"));
    }
    let (xhat, inv_std) = normalize_groups(x.data(), width, eps);
    let mut y = vec![T::zero(); x.numel()];
    y.par_chunks_mut(width)
        .zip(xhat.par_chunks(width))
        .enumerate()
        .for_each(|(ch, (out, xh))| {
            for (o, &v) in out.iter_mut().zip(xh) {
                *o = gamma[ch] * v + beta[ch];
            }
        });
    Ok(InstanceNormOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
    })
}

struct InstanceNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for InstanceNormOp<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let gamma = ctx.inputs[1].data();
        let width = self.xhat.len() / gamma.len();
        let dgamma = ctx.needs_grad[1].then(|| {
            ctx.grad
                .chunks(width)
                .zip(self.xhat.chunks(width))
                .map(|(g, xh)| g.iter().zip(xh).map(|(&a, &b)| a * b).sum())
                .collect()
        });
        let dbeta = ctx.needs_grad[2].then(|| ctx.grad.chunks(width).map(|g| g.iter().copied().sum()).collect());
        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = vec![T::zero(); ctx.grad.len()];
            dx.par_chunks_mut(width)
                .zip(ctx.grad.par_chunks(width))
                .zip(self.xhat.par_chunks(width))
                .enumerate()
                .for_each(|(ch, ((out, g), xh))| {
                    let dxhat: Vec<T> = g.iter().map(|&v| v * gamma[ch]).collect();
                    group_input_grad(&dxhat, xh, self.inv_std[ch], out);
                });
            dx
        });
        vec![dx, dgamma, dbeta]
    }
}

pub struct LayerNormOutput<T> {
    pub y: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Normalizes each row of `[n, d]` over its `d` features.
pub fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<LayerNormOutput<T>> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(TensorError::dim(
            "layer_norm",
            format!("{:?} with {} gammas and {} betas", x.shape(), gamma.len(), beta.len()),
        ));
    }
    let (xhat, inv_std) = normalize_groups(x.data(), d, eps);
    let y = xhat
        .chunks(d)
        .flat_map(|row| row.iter().zip(gamma.iter().zip(beta)).map(|(&v, (&g, &b))| g * v + b))
        .collect();
    Ok(LayerNormOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
    })
}

struct LayerNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let gamma = ctx.inputs[1].data();
        let d = gamma.len();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (g, xh) in ctx.grad.chunks(d).zip(self.xhat.chunks(d)) {
            for j in 0..d {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
            }
        }
        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = vec![T::zero(); ctx.grad.len()];
            dx.par_chunks_mut(d)
                .zip(ctx.grad.par_chunks(d))
                .zip(self.xhat.par_chunks(d))
                .zip(self.inv_std.par_iter())
                .for_each(|(((out, g), xh), &inv)| {
                    let dxhat: Vec<T> = g.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                    group_input_grad(&dxhat, xh, inv, out);
                });
            dx
        });
        vec![
            dx,
            ctx.needs_grad[1].then_some(dgamma),
            ctx.needs_grad[2].then_some(dbeta),
        ]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = instance_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let op = InstanceNormOp {
            xhat: if self.is_recording() { out.xhat } else { Vec::new() },
            inv_std: out.inv_std,
        };
        self.push_op(out.y, &[x, gamma, beta], op)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = layer_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let op = LayerNormOp {
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        self.push_op(out.y, &[x, gamma, beta], op)
    }
}
