//! Trilinear x2 upsampling (half-pixel centers, edge clamped), applied as
//! three separable linear passes.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, lambda)` for each of the `2n` outputs.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// `[outer, n, inner] -> [outer, 2n, inner]`.
fn upsample_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = taps(n);
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let (wa, wb) = (T::of(1.0 - lam), T::of(lam));
            let row = &mut dst[j * inner..(j + 1) * inner];
            let (a, b) = (&src[i0 * inner..(i0 + 1) * inner], &src[i1 * inner..(i1 + 1) * inner]);
            for ((r, &p), &q) in row.iter_mut().zip(a).zip(b) {
                *r = wa * p + wb * q;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`].
fn upsample_axis_adjoint<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = taps(n);
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let (wa, wb) = (T::of(1.0 - lam), T::of(lam));
            let row = &src[j * inner..(j + 1) * inner];
            for (t, &v) in row.iter().enumerate() {
                dst[i0 * inner + t] += wa * v;
            }
            for (t, &v) in row.iter().enumerate() {
                dst[i1 * inner + t] += wb * v;
            }
        }
    }
    out
}

pub fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, d, w, h] = match x.shape() {
        [c, d, w, h] => [*c, *d, *w, *h],
        s => return Err(TensorError::dim("upsample2x", format!("expected [C,D,W,H], got {s:?}"))),
    };
    let a = upsample_axis(x.data(), c, d, w * h);
    let b = upsample_axis(&a, c * 2 * d, w, h);
    let y = upsample_axis(&b, c * 2 * d * 2 * w, h, 1);
    Tensor::new([c, 2 * d, 2 * w, 2 * h], y)
}

struct Upsample2xOp;

impl<T: Scalar> Backward<T> for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample2x"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let s = ctx.inputs[0].shape();
        let (c, d, w, h) = (s[0], s[1], s[2], s[3]);
        let gb = upsample_axis_adjoint(ctx.grad, c * 2 * d * 2 * w, h, 1);
        let ga = upsample_axis_adjoint(&gb, c * 2 * d, w, h);
        vec![Some(upsample_axis_adjoint(&ga, c, d, w * h))]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = upsample2x_forward(self.value(x))?;
        self.push_op(out, &[x], Upsample2xOp)
    }
}
