//! Fixed 3D sinusoidal positional encoding.

use transdod_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Encodes every voxel of a `D x W x H` grid as a `d`-wide row.
///
/// Each axis gets a `d/3` block of interleaved `sin`/`cos` features with
/// frequencies `10000^(-2k/(d/3))`; blocks are ordered depth, width, height
/// and rows follow row-major voxel order.
pub fn encode_positions<T: Scalar>(depth: usize, width: usize, height: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::config(format!(
            "positional width {d} must be a positive multiple of 6"
        )));
    }
    let block = d / 3;
    let freqs: Vec<f64> = (0..block / 2)
        .map(|k| 1.0 / 10000f64.powf((2 * k) as f64 / block as f64))
        .collect();
    let axis_table = |n: usize| -> Vec<f64> {
        let mut t = vec![0.0; n * block];
        for pos in 0..n {
            for (k, f) in freqs.iter().enumerate() {
                let a = pos as f64 * f;
                t[pos * block + 2 * k] = a.sin();
                t[pos * block + 2 * k + 1] = a.cos();
            }
        }
        t
    };
    let tables = [axis_table(depth), axis_table(width), axis_table(height)];
    let rows = depth * width * height;
    let mut out = Vec::with_capacity(rows * d);
    for z in 0..depth {
        for y in 0..width {
            for x in 0..height {
                for (table, pos) in tables.iter().zip([z, y, x]) {
                    out.extend(table[pos * block..(pos + 1) * block].iter().map(|&v| T::of(v)));
                }
            }
        }
    }
    Ok(Tensor::new([rows, d], out)?)
}

/// Normalized grid coordinate of every voxel, `[D*W*H, 3]`, each axis
/// mapped to `i / (n - 1)` (zero for singleton axes).
pub fn grid_coordinates<T: Scalar>(depth: usize, width: usize, height: usize) -> Tensor<T> {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(depth * width * height * 3);
    for z in 0..depth {
        for y in 0..width {
            for x in 0..height {
                out.extend([norm(z, depth), norm(y, width), norm(x, height)].map(T::of));
            }
        }
    }
    Tensor::new([depth * width * height, 3], out).expect("grid shape")
}
