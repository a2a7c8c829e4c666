//! Filter prediction and the per-task dynamic segmentation head.
//!
//! A task's kernels are packed into one vector of length
//! [`dynamic_param_count`]: layer by layer, each layer's `[out, in]`
//! row-major weight matrix followed by its bias. Hidden layers map
//! `width -> width`, the last maps `width -> 2`.

use std::ops::Range;

use rayon::prelude::*;
use transdod_tensor::ops::{conv3d_1x1_forward, relu_forward};
use transdod_tensor::{Graph, Scalar, Tensor, TensorError, Var};

use crate::config::{dynamic_param_count, HeadConfig, HEAD_OUTPUTS};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamBuilder};

/// Position of one layer inside a packed kernel vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Slots of every layer, in evaluation order.
pub fn kernel_layout(cfg: &HeadConfig) -> Result<Vec<LayerSlot>> {
    dynamic_param_count(cfg.width, cfg.depth)?;
    let mut at = 0;
    Ok((0..cfg.depth)
        .map(|i| {
            let outputs = if i + 1 == cfg.depth { HEAD_OUTPUTS } else { cfg.width };
            let inputs = cfg.width;
            let weight = at..at + outputs * inputs;
            let bias = weight.end..weight.end + outputs;
            at = bias.end;
            LayerSlot {
                outputs,
                inputs,
                weight,
                bias,
            }
        })
        .collect())
}

/// Per-layer `(weight [out, in], bias [out])` views of a packed vector.
pub fn slice_kernels<T: Scalar>(omega: &[T], cfg: &HeadConfig) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let expected = dynamic_param_count(cfg.width, cfg.depth)?;
    if omega.len() != expected {
        return Err(Error::format(
            0,
            format!("kernel vector has {} entries, expected {expected}", omega.len()),
        ));
    }
    kernel_layout(cfg)?
        .into_iter()
        .map(|s| {
            Ok((
                Tensor::new([s.outputs, s.inputs], omega[s.weight].to_vec())?,
                Tensor::new([s.outputs], omega[s.bias].to_vec())?,
            ))
        })
        .collect()
}

/// Inverse of [`slice_kernels`].
pub fn pack_kernels<T: Scalar>(layers: &[(Tensor<T>, Tensor<T>)]) -> Vec<T> {
    layers
        .iter()
        .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
        .collect()
}

/// Row-wise MLP `t -> relu(t W1 + b1) W2 + b2` producing one kernel vector
/// per organ embedding.
#[derive(Clone, Debug)]
pub struct FilterHead {
    pub hidden: Linear,
    pub output: Linear,
    pub cfg: HeadConfig,
}

impl FilterHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, cfg: &HeadConfig) -> Result<Self> {
        let df = dynamic_param_count(cfg.width, cfg.depth)?;
        let mut pb = pb.sub(name);
        // Output scale chosen so generated kernels start near He scale.
        let std = (2.0 / (cfg.width * d) as f64).sqrt();
        Ok(Self {
            hidden: Linear::he(&mut pb, "hidden", d, d),
            output: Linear::new(&mut pb, "output", d, df, true, std),
            cfg: cfg.clone(),
        })
    }

    /// `organs: [M, d]` to kernels `[M, d_F]`.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, organs: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, organs)?;
        let h = g.relu(h)?;
        self.output.forward(g, p, h)
    }
}

fn check_task(task: usize, tasks: usize) -> Result<()> {
    if task >= tasks {
        return Err(Error::Task { task, tasks });
    }
    Ok(())
}

fn check_map<T: Scalar>(map: &Tensor<T>, cfg: &HeadConfig) -> Result<()> {
    if map.ndim() != 4 || map.shape()[0] != cfg.width {
        return Err(TensorError::dim(
            "dynamic_head",
            format!("feature map {:?} needs {} channels", map.shape(), cfg.width),
        )
        .into());
    }
    Ok(())
}

/// Applies task `task`'s kernels from `kernels: [M, d_F]` to the
/// pre-segmentation map `[C2, D, W, H]`, giving `[2, D, W, H]` logits.
pub fn dynamic_forward<T: Scalar>(
    g: &mut Graph<T>,
    map: Var,
    kernels: Var,
    task: usize,
    cfg: &HeadConfig,
) -> Result<Var> {
    check_map(g.value(map), cfg)?;
    let df = dynamic_param_count(cfg.width, cfg.depth)?;
    let ks = g.shape(kernels).to_vec();
    if ks.len() != 2 || ks[1] != df {
        return Err(Error::config(format!("kernels {ks:?}, expected [M, {df}]")));
    }
    check_task(task, ks[0])?;
    let row = g.slice_rows(kernels, task, 1)?;
    let row = g.reshape(row, &[df])?;
    let layout = kernel_layout(cfg)?;
    let mut x = map;
    for (i, s) in layout.iter().enumerate() {
        let w = g.slice_rows(row, s.weight.start, s.weight.len())?;
        let w = g.reshape(w, &[s.outputs, s.inputs])?;
        let b = g.slice_rows(row, s.bias.start, s.bias.len())?;
        x = g.conv3d_1x1(x, w, Some(b))?;
        if i + 1 < layout.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Tape-free single-task head with the same arithmetic as [`dynamic_forward`].
pub fn dynamic_forward_plain<T: Scalar>(map: &Tensor<T>, omega: &[T], cfg: &HeadConfig) -> Result<Tensor<T>> {
    check_map(map, cfg)?;
    let layers = slice_kernels(omega, cfg)?;
    let last = layers.len() - 1;
    let mut x = map.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        x = conv3d_1x1_forward(&x, w, Some(b))?;
        if i < last {
            x = relu_forward(&x);
        }
    }
    Ok(x)
}

/// Every task head at once: `[M, 2, D, W, H]`, heads evaluated in parallel.
pub fn dynamic_forward_all<T: Scalar>(map: &Tensor<T>, kernels: &Tensor<T>, cfg: &HeadConfig) -> Result<Tensor<T>> {
    check_map(map, cfg)?;
    let df = dynamic_param_count(cfg.width, cfg.depth)?;
    if kernels.ndim() != 2 || kernels.shape()[1] != df {
        return Err(Error::config(format!(
            "kernels {:?}, expected [M, {df}]",
            kernels.shape()
        )));
    }
    let tasks = kernels.shape()[0];
    let outs = kernels
        .data()
        .par_chunks(df)
        .map(|omega| dynamic_forward_plain(map, omega, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = vec![tasks];
    shape.extend_from_slice(outs[0].shape());
    let data = outs.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_segments() {
        let lens: Vec<usize> = kernel_layout(&HeadConfig::default())
            .unwrap()
            .iter()
            .map(|s| s.weight.len() + s.bias.len())
            .collect();
        assert_eq!(lens, vec![72, 72, 18]);
    }

    #[test]
    fn pack_inverts_slice() {
        let cfg = HeadConfig { width: 4, depth: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let omega: Vec<f32> = (0..dynamic_param_count(4, 4).unwrap()).map(|_| rng.random()).collect();
        let packed = pack_kernels(&slice_kernels(&omega, &cfg).unwrap());
        assert!(packed.iter().zip(&omega).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(slice_kernels(&omega[1..], &cfg), Err(Error::Format { .. })));
    }

    #[test]
    fn zero_kernels_give_zero_logits() {
        let cfg = HeadConfig::default();
        let map = Tensor::from_fn([8, 2, 3, 2], |i| i as f64 - 20.0);
        let out = dynamic_forward_plain(&map, &vec![0.0; 162], &cfg).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_layer_is_affine_in_its_kernels() {
        let cfg = HeadConfig { width: 3, depth: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Tensor::from_fn([3, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let base: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let last = kernel_layout(&cfg).unwrap()[1].weight.start;
        let with = |tail: &[f64]| {
            let mut o = base.clone();
            o[last..].copy_from_slice(tail);
            dynamic_forward_plain(&map, &o, &cfg).unwrap()
        };
        let u: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let (fu, fv, fuv, f0) = (with(&u), with(&v), with(&uv), with(&[0.0; 8]));
        for i in 0..fu.numel() {
            let lin = fu.data()[i] + fv.data()[i] - f0.data()[i];
            assert!((fuv.data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn task_out_of_range() {
        let cfg = HeadConfig { width: 2, depth: 2 };
        let mut g = Graph::<f64>::new();
        let map = g.param(Tensor::zeros([2, 2, 2, 2]));
        let k = g.param(Tensor::zeros([3, dynamic_param_count(2, 2).unwrap()]));
        assert!(matches!(
            dynamic_forward(&mut g, map, k, 3, &cfg),
            Err(Error::Task { task: 3, tasks: 3 })
        ));
    }
}
