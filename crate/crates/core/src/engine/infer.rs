//! Sliding-window inference over volumes larger than the network input.

use rayon::prelude::*;
use transdod_tensor::ops::sigmoid;
use transdod_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::model::Model;

/// Padding value: the low end of the normalized intensity range.
pub const PAD_VALUE: f32 = -1.0;

/// Window starts along one axis: `0, stride, 2*stride, ...`, with the final
/// window shifted back so it ends exactly at `size`.
pub fn window_starts(size: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::config(format!("window {window} with stride {stride}")));
    }
    if window > size {
        return Err(Error::config(format!("window {window} exceeds padded extent {size}")));
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < size {
        starts.push(s);
        s += stride;
    }
    starts.push(size - window);
    Ok(starts)
}

/// Every window corner on a grid of the given extent.
pub fn window_placements(dims: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let axes = [
        window_starts(dims[0], window[0], stride[0])?,
        window_starts(dims[1], window[1], stride[1])?,
        window_starts(dims[2], window[2], stride[2])?,
    ];
    let mut out = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

pub fn pad_to_multiple(n: usize, div: usize) -> usize {
    n.div_ceil(div) * div
}

fn crop(image: &Tensor<f32>, at: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let s = image.shape();
    let (w, h) = (s[2], s[3]);
    let src = image.data();
    let mut out = Vec::with_capacity(size.iter().product());
    for z in at[0]..at[0] + size[0] {
        for y in at[1]..at[1] + size[1] {
            let row = (z * w + y) * h;
            out.extend_from_slice(&src[row + at[2]..row + at[2] + size[2]]);
        }
    }
    Tensor::new([1, size[0], size[1], size[2]], out).expect("crop shape")
}

fn pad(image: &Tensor<f32>, dims: [usize; 3]) -> Tensor<f32> {
    let s = image.shape();
    let mut out = Tensor::full([1, dims[0], dims[1], dims[2]], PAD_VALUE);
    for z in 0..s[1] {
        for y in 0..s[2] {
            let src = &image.data()[(z * s[2] + y) * s[3]..][..s[3]];
            let dst = (z * dims[1] + y) * dims[2];
            out.data_mut()[dst..dst + s[3]].copy_from_slice(src);
        }
    }
    out
}

/// Averages sigmoid probabilities of overlapping windows.
///
/// `predict` maps a `[1, wd, ww, wh]` window to logits `[C, ..., wd, ww, wh]`
/// (any leading shape); the result has the same leading shape over the full
/// `[D, W, H]` grid. The volume is padded up to a multiple of `divisor`
/// first. Windows are evaluated in parallel and merged in placement order.
pub fn sliding_window<F>(
    image: &Tensor<f32>,
    window: [usize; 3],
    stride: [usize; 3],
    divisor: usize,
    predict: F,
) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::config(format!("expected a [1, D, W, H] volume, got {s:?}")));
    }
    if window.iter().any(|&w| w == 0 || w % divisor != 0) {
        return Err(Error::config(format!(
            "window {window:?} must be a positive multiple of {divisor}"
        )));
    }
    let dims = [s[1], s[2], s[3]];
    let padded_dims = dims.map(|n| pad_to_multiple(n, divisor));
    let placements = window_placements(padded_dims, window, stride)?;
    let padded = if padded_dims == dims {
        image.clone()
    } else {
        pad(image, padded_dims)
    };

    let outputs = placements
        .par_iter()
        .map(|&at| predict(&crop(&padded, at, window)))
        .collect::<Result<Vec<_>>>()?;
    let wn: usize = window.iter().product();
    let lead: Vec<usize> = outputs[0].shape()[..outputs[0].ndim() - 3].to_vec();
    let channels: usize = lead.iter().product();
    let pn: usize = padded_dims.iter().product();
    let mut sum = vec![0.0f32; channels * pn];
    let mut count = vec![0u32; pn];
    for (at, out) in placements.iter().zip(&outputs) {
        if out.numel() != channels * wn {
            return Err(Error::config(format!("window prediction shape {:?}", out.shape())));
        }
        for z in 0..window[0] {
            for y in 0..window[1] {
                for x in 0..window[2] {
                    let v = ((at[0] + z) * padded_dims[1] + at[1] + y) * padded_dims[2] + at[2] + x;
                    let wv = (z * window[1] + y) * window[2] + x;
                    count[v] += 1;
                    for c in 0..channels {
                        sum[c * pn + v] += sigmoid(out.data()[c * wn + wv]);
                    }
                }
            }
        }
    }
    let n: usize = dims.iter().product();
    let mut probs = Vec::with_capacity(channels * n);
    for c in 0..channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let v = (z * padded_dims[1] + y) * padded_dims[2] + x;
                    probs.push(sum[c * pn + v] / count[v] as f32);
                }
            }
        }
    }
    let mut shape = lead;
    shape.extend_from_slice(&dims);
    Ok(Tensor::new(shape, probs)?)
}

/// Half-window stride.
pub fn default_stride(window: [usize; 3]) -> [usize; 3] {
    window.map(|w| (w / 2).max(1))
}

/// All-task probabilities `[M, 2, D, W, H]` of a `[1, D, W, H]` volume.
pub fn sliding_window_infer<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<f32>,
    window: [usize; 3],
) -> Result<Tensor<f32>> {
    sliding_window(
        image,
        window,
        default_stride(window),
        model.cfg.backbone.divisor(),
        |x| Ok(model.predict_all(&x.cast())?.cast()),
    )
}

/// Single-task probabilities `[2, D, W, H]`; identical to row `task` of
/// [`sliding_window_infer`].
pub fn sliding_window_task<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<f32>,
    window: [usize; 3],
    task: usize,
) -> Result<Tensor<f32>> {
    sliding_window(
        image,
        window,
        default_stride(window),
        model.cfg.backbone.divisor(),
        |x| Ok(model.predict_task(&x.cast(), task)?.cast()),
    )
}

/// Clamps a requested window to a volume's padded extent.
pub fn fit_window(window: [usize; 3], dims: [usize; 3], divisor: usize) -> [usize; 3] {
    [0, 1, 2].map(|a| window[a].min(pad_to_multiple(dims[a], divisor)))
}

/// Thresholds probabilities at 0.5.
pub fn binarize(probs: &[f32]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_and_clamp() {
        assert_eq!(window_starts(64, 64, 32).unwrap(), vec![0]);
        assert_eq!(window_starts(70, 64, 32).unwrap(), vec![0, 6]);
        assert_eq!(window_starts(100, 32, 16).unwrap(), vec![0, 16, 32, 48, 64, 68]);
        assert!(window_starts(30, 32, 16).is_err());
    }

    #[test]
    fn constant_model_averages_to_constant() {
        let image = Tensor::zeros([1, 8, 12, 10]);
        let logit = 0.3f32;
        let out = sliding_window(&image, [4, 8, 8], [2, 4, 4], 2, |x| {
            let s = x.shape();
            Ok(Tensor::full([3, s[1], s[2], s[3]], logit))
        })
        .unwrap();
        assert_eq!(out.shape(), &[3, 8, 12, 10]);
        let c = sigmoid(logit);
        assert!(out.data().iter().all(|&v| (v - c).abs() < 1e-6));
    }
}
