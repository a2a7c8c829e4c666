//! Strided matrix products.
//!
//! Output tiles are fixed by the problem size, never by the thread count, so
//! every element is accumulated in the same order however many workers run.

use rayon::prelude::*;

use crate::scalar::Scalar;

const TILE_ROWS: usize = 64;
const TILE_COLS: usize = 512;
const PARALLEL_WORK: usize = 1 << 18;

/// Borrowed strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// View with explicit row and column strides.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                data.len() > (rows - 1) * rs + (cols - 1) * cs,
                "matrix view out of bounds"
            );
        }
        MatRef {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Transposed view; no data moves.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }

    let tile_rows = if m >= 2 * TILE_ROWS { TILE_ROWS } else { m };
    let tile_cols = if m < 2 * TILE_ROWS && n >= 2 * TILE_COLS {
        TILE_COLS
    } else {
        n
    };
    let mut tiles = Vec::new();
    for r0 in (0..m).step_by(tile_rows) {
        for c0 in (0..n).step_by(tile_cols) {
            tiles.push((r0, (r0 + tile_rows).min(m), c0, (c0 + tile_cols).min(n)));
        }
    }

    let out = SendPtr(c.as_mut_ptr());
    let run = |&(r0, r1, c0, c1): &(usize, usize, usize, usize)| {
        let out = &out;
        // SAFETY: tiles partition the output; each is written by exactly one
        // task. Input views were bounds-checked on construction.
        unsafe {
            T::gemm_raw(
                r1 - r0,
                k,
                c1 - c0,
                T::one(),
                a.data.as_ptr().add(r0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr().add(c0 * b.cs),
                b.rs as isize,
                b.cs as isize,
                beta,
                out.0.add(r0 * n + c0),
                n as isize,
                1,
            );
        }
    };
    if m * n * k >= PARALLEL_WORK && tiles.len() > 1 {
        tiles.par_iter().for_each(run);
    } else {
        tiles.iter().for_each(run);
    }
}

/// Convenience: fresh `a * b`.
pub fn matmul_into<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let mut c = vec![T::zero(); a.rows * b.cols];
    gemm(a, b, &mut c, T::zero());
    c
}
