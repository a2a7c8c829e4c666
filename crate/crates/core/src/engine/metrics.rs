//! Overlap and surface-distance metrics on binary masks.

use transdod_tensor::TensorError;

use crate::error::{Error, Result};

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::dim("metric", format!("mask sizes {} vs {}", a.len(), b.len())).into());
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_metric(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground voxels with at least one 6-neighbor outside the mask or grid.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, w, h] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * w + y) * h + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == w || x + 1 == h;
                out[(z * w + y) * h + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `seeds`, by separable 1D passes.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = dims.iter().copied().max().unwrap_or(0);
    let (mut f, mut o) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for q in 0..n {
                    f[q] = dist[base + q * stride];
                }
                edt_line(&f[..n], &mut o[..n], &mut v, &mut z);
                for q in 0..n {
                    dist[base + q * stride] = o[q];
                }
            }
        }
    }
    dist
}

/// Largest distance from a boundary voxel of `from` to the boundary of `to`.
fn directed(from: &[bool], to_dist: &[f64]) -> f64 {
    from.iter()
        .zip(to_dist)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance, in voxels, between the 6-connectivity
/// boundaries of two non-empty masks.
pub fn hausdorff(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> Result<f64> {
    same_len(pred, gt)?;
    if pred.len() != dims.iter().product::<usize>() {
        return Err(TensorError::dim("hausdorff", format!("{} voxels for grid {dims:?}", pred.len())).into());
    }
    if !pred.iter().any(|&b| b) || !gt.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric("Hausdorff distance of an empty mask".into()));
    }
    let (bp, bg) = (boundary(pred, dims), boundary(gt, dims));
    let (dp, dg) = (
        squared_distance_transform(&bp, dims),
        squared_distance_transform(&bg, dims),
    );
    Ok(directed(&bp, &dg).max(directed(&bg, &dp)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_counts() {
        assert_eq!(dice_metric(&[true, true, false], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(dice_metric(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice_metric(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(dice_metric(&[true], &[true, false]).is_err());
    }

    #[test]
    fn pythagorean_pair() {
        let dims = [1, 5, 5];
        let mut a = vec![false; 25];
        let mut b = vec![false; 25];
        a[0] = true;
        b[3 * 5 + 4] = true;
        assert_eq!(hausdorff(&a, &b, dims).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, dims).unwrap(), 0.0);
        assert!(matches!(
            hausdorff(&a, &[false; 25], dims),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let mask = vec![true; 27];
        let b = boundary(&mask, [3, 3, 3]);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[13]);
    }
}
