//! Self-attention, deformable attention and trilinear sampling.
//!
//! Deformable attention is built from three tape ops:
//! [`sampling_locations`] turns normalized reference points plus offsets into
//! per-level voxel coordinates, a softmax normalizes the weight logits of each
//! (query, head) jointly over all `levels * points` samples, and
//! [`msda_core`] gathers and mixes the trilinearly sampled values.
//!
//! Sample layout along the last axis of offsets, logits and locations is
//! `(head, level, point)` with the point index fastest; coordinates are
//! `(z, y, x)` triples.

use rayon::prelude::*;
use transdod_tensor::ops::{add_bias_forward, matmul_forward, softmax_forward};
use transdod_tensor::{Backward, BackwardCtx, Graph, Scalar, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamBuilder, ParamStore};

/// Grid extent `(D, W, H)` of one level.
pub type Dims = [usize; 3];

fn voxels(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// The up-to-8 in-bounds corners around a fractional point.
struct Stencil<T> {
    len: usize,
    index: [usize; 8],
    weight: [T; 8],
    /// Derivative of each corner weight with respect to `(z, y, x)`.
    slope: [[T; 3]; 8],
}

fn stencil<T: Scalar>(dims: Dims, p: &[T]) -> Stencil<T> {
    let mut st = Stencil {
        len: 0,
        index: [0; 8],
        weight: [T::zero(); 8],
        slope: [[T::zero(); 3]; 8],
    };
    let mut base = [0isize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let f = p[a].floor();
        let fi = f.as_f64();
        if !(fi >= -1.0 && fi <= dims[a] as f64) {
            return st;
        }
        base[a] = fi as isize;
        frac[a] = p[a] - f;
    }
    let lerp = |a: usize, hi: bool| if hi { frac[a] } else { T::one() - frac[a] };
    let sign = |hi: bool| if hi { T::one() } else { -T::one() };
    for dz in [false, true] {
        let iz = base[0] + dz as isize;
        if iz < 0 || iz >= dims[0] as isize {
            continue;
        }
        let wz = lerp(0, dz);
        for dy in [false, true] {
            let iy = base[1] + dy as isize;
            if iy < 0 || iy >= dims[1] as isize {
                continue;
            }
            let wy = lerp(1, dy);
            for dx in [false, true] {
                let ix = base[2] + dx as isize;
                if ix < 0 || ix >= dims[2] as isize {
                    continue;
                }
                let wx = lerp(2, dx);
                let n = st.len;
                st.index[n] = (iz as usize * dims[1] + iy as usize) * dims[2] + ix as usize;
                st.weight[n] = wz * wy * wx;
                st.slope[n] = [sign(dz) * wy * wx, wz * sign(dy) * wx, wz * wy * sign(dx)];
                st.len += 1;
            }
        }
    }
    st
}

fn check_points<T: Scalar>(op: &'static str, points: &Tensor<T>) -> Result<usize> {
    if points.ndim() != 2 || points.shape()[1] != 3 {
        return Err(TensorError::dim(op, format!("points {:?} must be [P, 3]", points.shape())).into());
    }
    Ok(points.shape()[0])
}

/// Samples a `[C, D, W, H]` volume at fractional `(z, y, x)` voxel
/// coordinates, returning `[C, P]`. Corners outside the grid read as zero.
pub fn trilinear_sample_forward<T: Scalar>(volume: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let np = check_points("trilinear_sample", points)?;
    if volume.ndim() != 4 || volume.numel() == 0 {
        return Err(TensorError::dim("trilinear_sample", format!("volume {:?}", volume.shape())).into());
    }
    let c = volume.shape()[0];
    let dims = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
    let n = voxels(dims);
    let v = volume.data();
    let mut out = vec![T::zero(); c * np];
    for (p, pt) in points.data().chunks(3).enumerate() {
        let st = stencil(dims, pt);
        for ch in 0..c {
            let mut s = T::zero();
            for j in 0..st.len {
                s += st.weight[j] * v[ch * n + st.index[j]];
            }
            out[ch * np + p] = s;
        }
    }
    Ok(Tensor::new([c, np], out)?)
}

struct TrilinearOp;

impl<T: Scalar> Backward<T> for TrilinearOp {
    fn name(&self) -> &'static str {
        "trilinear_sample"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (volume, points) = (ctx.inputs[0], ctx.inputs[1]);
        let c = volume.shape()[0];
        let dims = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
        let n = voxels(dims);
        let np = points.shape()[0];
        let v = volume.data();
        let mut dv = ctx.needs_grad[0].then(|| vec![T::zero(); v.len()]);
        let mut dp = ctx.needs_grad[1].then(|| vec![T::zero(); np * 3]);
        for (p, pt) in points.data().chunks(3).enumerate() {
            let st = stencil(dims, pt);
            for ch in 0..c {
                let g = ctx.grad[ch * np + p];
                for j in 0..st.len {
                    let at = ch * n + st.index[j];
                    if let Some(dv) = dv.as_mut() {
                        dv[at] += st.weight[j] * g;
                    }
                    if let Some(dp) = dp.as_mut() {
                        for a in 0..3 {
                            dp[p * 3 + a] += g * st.slope[j][a] * v[at];
                        }
                    }
                }
            }
        }
        vec![dv, dp]
    }
}

/// Differentiable [`trilinear_sample_forward`], with gradients to both the
/// volume and the coordinates.
pub fn trilinear_sample<T: Scalar>(g: &mut Graph<T>, volume: Var, points: Var) -> Result<Var> {
    let out = trilinear_sample_forward(g.value(volume), g.value(points))?;
    Ok(g.push_op(out, &[volume, points], TrilinearOp)?)
}

/// Sampling geometry shared by the deformable-attention ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleLayout {
    pub dims: Vec<Dims>,
    pub heads: usize,
    pub points: usize,
}

impl SampleLayout {
    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    /// Samples per query, `heads * levels * points`.
    pub fn samples(&self) -> usize {
        self.heads * self.levels() * self.points
    }

    fn level_of(&self, sample: usize) -> usize {
        (sample / self.points) % self.levels()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("deformable attention needs at least one level"));
        }
        if self.heads == 0 || self.points == 0 || self.dims.iter().any(|d| voxels(*d) == 0) {
            return Err(Error::config(format!("degenerate sample layout {self:?}")));
        }
        Ok(())
    }
}

fn level_scale<T: Scalar>(dims: Dims) -> [T; 3] {
    dims.map(|n| T::of((n - 1) as f64))
}

/// `loc = ref * (n_l - 1) + offset` per axis: reference points in `[0, 1]^3`
/// mapped onto each level's voxel grid, then shifted by offsets in voxels.
pub fn sampling_locations_forward<T: Scalar>(
    refs: &Tensor<T>,
    offsets: &Tensor<T>,
    layout: &SampleLayout,
) -> Result<Tensor<T>> {
    layout.validate()?;
    let nq = check_points("sampling_locations", refs)?;
    let s = layout.samples();
    if offsets.shape() != [nq, s * 3] {
        return Err(TensorError::dim(
            "sampling_locations",
            format!("offsets {:?}, expected [{nq}, {}]", offsets.shape(), s * 3),
        )
        .into());
    }
    let scales: Vec<[T; 3]> = layout.dims.iter().map(|&d| level_scale(d)).collect();
    let (r, o) = (refs.data(), offsets.data());
    let mut out = vec![T::zero(); nq * s * 3];
    for q in 0..nq {
        for j in 0..s {
            let sc = &scales[layout.level_of(j)];
            for a in 0..3 {
                let at = (q * s + j) * 3 + a;
                out[at] = r[q * 3 + a] * sc[a] + o[at];
            }
        }
    }
    Ok(Tensor::new([nq, s * 3], out)?)
}

struct LocationsOp {
    layout: SampleLayout,
}

impl<T: Scalar> Backward<T> for LocationsOp {
    fn name(&self) -> &'static str {
        "sampling_locations"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let nq = ctx.inputs[0].shape()[0];
        let s = self.layout.samples();
        let dref = ctx.needs_grad[0].then(|| {
            let scales: Vec<[T; 3]> = self.layout.dims.iter().map(|&d| level_scale(d)).collect();
            let mut dr = vec![T::zero(); nq * 3];
            for q in 0..nq {
                for j in 0..s {
                    let sc = &scales[self.layout.level_of(j)];
                    for a in 0..3 {
                        dr[q * 3 + a] += ctx.grad[(q * s + j) * 3 + a] * sc[a];
                    }
                }
            }
            dr
        });
        let doff = ctx.needs_grad[1].then(|| ctx.grad.to_vec());
        vec![dref, doff]
    }
}

pub fn sampling_locations<T: Scalar>(g: &mut Graph<T>, refs: Var, offsets: Var, layout: &SampleLayout) -> Result<Var> {
    let out = sampling_locations_forward(g.value(refs), g.value(offsets), layout)?;
    Ok(g.push_op(out, &[refs, offsets], LocationsOp { layout: layout.clone() })?)
}

fn check_core<T: Scalar>(
    values: &[&Tensor<T>],
    locations: &Tensor<T>,
    weights: &Tensor<T>,
    layout: &SampleLayout,
) -> Result<(usize, usize)> {
    layout.validate()?;
    if values.len() != layout.levels() {
        return Err(Error::config(format!(
            "{} value levels for a {}-level layout",
            values.len(),
            layout.levels()
        )));
    }
    let d = values[0].shape().get(1).copied().unwrap_or(0);
    if d == 0 || d % layout.heads != 0 {
        return Err(Error::config(format!(
            "value width {d} not divisible by {} heads",
            layout.heads
        )));
    }
    for (v, dims) in values.iter().zip(&layout.dims) {
        if v.shape() != [voxels(*dims), d] {
            return Err(TensorError::dim("msda", format!("level values {:?} for grid {dims:?}", v.shape())).into());
        }
    }
    let s = layout.samples();
    let nq = weights.shape()[0];
    if weights.shape() != [nq, s] || locations.shape() != [nq, s * 3] {
        return Err(TensorError::dim(
            "msda",
            format!(
                "weights {:?}, locations {:?}, {s} samples",
                weights.shape(),
                locations.shape()
            ),
        )
        .into());
    }
    Ok((nq, d))
}

/// Weighted sum of trilinear samples: for each query and head,
/// `sum_{l,k} w[q,h,l,k] * sample(values_l[:, head cols], loc[q,h,l,k])`,
/// heads concatenated to `[nq, d]`.
pub fn msda_core_forward<T: Scalar>(
    values: &[&Tensor<T>],
    locations: &Tensor<T>,
    weights: &Tensor<T>,
    layout: &SampleLayout,
) -> Result<Tensor<T>> {
    let (nq, d) = check_core(values, locations, weights, layout)?;
    let (heads, levels, points) = (layout.heads, layout.levels(), layout.points);
    let dh = d / heads;
    let s = layout.samples();
    let (loc, w) = (locations.data(), weights.data());
    let mut out = vec![T::zero(); nq * d];
    out.par_chunks_mut(d).enumerate().for_each(|(q, row)| {
        let mut sample = vec![T::zero(); dh];
        for i in 0..heads {
            for l in 0..levels {
                let v = values[l].data();
                for k in 0..points {
                    let j = (i * levels + l) * points + k;
                    let a = w[q * s + j];
                    let st = stencil(layout.dims[l], &loc[(q * s + j) * 3..][..3]);
                    sample.fill(T::zero());
                    for c in 0..st.len {
                        let base = st.index[c] * d + i * dh;
                        let wc = st.weight[c];
                        for (sv, &vv) in sample.iter_mut().zip(&v[base..base + dh]) {
                            *sv += wc * vv;
                        }
                    }
                    for (o, &sv) in row[i * dh..(i + 1) * dh].iter_mut().zip(&sample) {
                        *o += a * sv;
                    }
                }
            }
        }
    });
    Ok(Tensor::new([nq, d], out)?)
}

struct MsdaCoreOp {
    layout: SampleLayout,
}

impl<T: Scalar> Backward<T> for MsdaCoreOp {
    fn name(&self) -> &'static str {
        "msda_core"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let layout = &self.layout;
        let levels = layout.levels();
        let (heads, points) = (layout.heads, layout.points);
        let values = &ctx.inputs[..levels];
        let (loc, w) = (ctx.inputs[levels].data(), ctx.inputs[levels + 1].data());
        let nq = ctx.inputs[levels + 1].shape()[0];
        let d = values[0].shape()[1];
        let dh = d / heads;
        let s = layout.samples();
        let grad = ctx.grad;

        let mut result: Vec<Option<Vec<T>>> = Vec::with_capacity(levels + 2);
        if ctx.needs_grad[..levels].iter().any(|&b| b) {
            // Heads own disjoint columns, so each accumulates privately.
            let per_head: Vec<Vec<Vec<T>>> = (0..heads)
                .into_par_iter()
                .map(|i| {
                    let mut acc: Vec<Vec<T>> = layout.dims.iter().map(|&dm| vec![T::zero(); voxels(dm) * dh]).collect();
                    for q in 0..nq {
                        let gq = &grad[q * d + i * dh..][..dh];
                        for l in 0..levels {
                            for k in 0..points {
                                let j = (i * levels + l) * points + k;
                                let a = w[q * s + j];
                                let st = stencil(layout.dims[l], &loc[(q * s + j) * 3..][..3]);
                                for c in 0..st.len {
                                    let aw = a * st.weight[c];
                                    let dst = &mut acc[l][st.index[c] * dh..][..dh];
                                    for (dv, &gv) in dst.iter_mut().zip(gq) {
                                        *dv += aw * gv;
                                    }
                                }
                            }
                        }
                    }
                    acc
                })
                .collect();
            for l in 0..levels {
                if !ctx.needs_grad[l] {
                    result.push(None);
                    continue;
                }
                let n = voxels(layout.dims[l]);
                let mut dv = vec![T::zero(); n * d];
                for (i, head) in per_head.iter().enumerate() {
                    for r in 0..n {
                        dv[r * d + i * dh..][..dh].copy_from_slice(&head[l][r * dh..][..dh]);
                    }
                }
                result.push(Some(dv));
            }
        } else {
            result.extend((0..levels).map(|_| None));
        }

        let (need_loc, need_w) = (ctx.needs_grad[levels], ctx.needs_grad[levels + 1]);
        if need_loc || need_w {
            let mut dloc = vec![T::zero(); nq * s * 3];
            let mut dw = vec![T::zero(); nq * s];
            dloc.par_chunks_mut(s * 3)
                .zip(dw.par_chunks_mut(s))
                .enumerate()
                .for_each(|(q, (dl, dwq))| {
                    for i in 0..heads {
                        let gq = &grad[q * d + i * dh..][..dh];
                        for l in 0..levels {
                            let v = values[l].data();
                            for k in 0..points {
                                let j = (i * levels + l) * points + k;
                                let st = stencil(layout.dims[l], &loc[(q * s + j) * 3..][..3]);
                                let mut dot = T::zero();
                                let mut slope = [T::zero(); 3];
                                for c in 0..st.len {
                                    let base = st.index[c] * d + i * dh;
                                    let gv: T = gq.iter().zip(&v[base..base + dh]).map(|(&g, &x)| g * x).sum();
                                    dot += st.weight[c] * gv;
                                    for a in 0..3 {
                                        slope[a] += st.slope[c][a] * gv;
                                    }
                                }
                                dwq[j] = dot;
                                let a = w[q * s + j];
                                for ax in 0..3 {
                                    dl[j * 3 + ax] = a * slope[ax];
                                }
                            }
                        }
                    }
                });
            result.push(need_loc.then_some(dloc));
            result.push(need_w.then_some(dw));
        } else {
            result.extend([None, None]);
        }
        result
    }
}

/// Tape version of [`msda_core_forward`]; inputs are the per-level value
/// matrices, locations `[nq, 3S]` and normalized weights `[nq, S]`.
pub fn msda_core<T: Scalar>(
    g: &mut Graph<T>,
    values: &[Var],
    locations: Var,
    weights: Var,
    layout: &SampleLayout,
) -> Result<Var> {
    let vals: Vec<&Tensor<T>> = values.iter().map(|&v| g.value(v)).collect();
    let out = msda_core_forward(&vals, g.value(locations), g.value(weights), layout)?;
    let mut inputs = values.to_vec();
    inputs.extend([locations, weights]);
    Ok(g.push_op(out, &inputs, MsdaCoreOp { layout: layout.clone() })?)
}

/// Deformable sampling from already projected values: builds locations,
/// normalizes `logits` jointly over each (query, head) and mixes samples.
pub fn msda_sample<T: Scalar>(
    g: &mut Graph<T>,
    values: &[Var],
    refs: Var,
    offsets: Var,
    logits: Var,
    layout: &SampleLayout,
) -> Result<Var> {
    let nq = g.shape(logits)[0];
    let per_head = layout.levels() * layout.points;
    let loc = sampling_locations(g, refs, offsets, layout)?;
    let l = g.reshape(logits, &[nq * layout.heads, per_head])?;
    let a = g.softmax(l)?;
    let a = g.reshape(a, &[nq, layout.samples()])?;
    msda_core(g, values, loc, a, layout)
}

/// Tokens of one pyramid level with their grid extent.
#[derive(Clone, Copy, Debug)]
pub struct LevelTokens {
    pub tokens: Var,
    pub dims: Dims,
}

/// Multi-scale deformable attention with learned value, offset, weight and
/// output projections. With one level it is single-scale deformable attention.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub value_proj: Vec<Linear>,
    pub offsets: Linear,
    pub logits: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
}

/// Standard deviation of the offset-head weights; small so initial offsets
/// stay near zero yet the samples of one query are not tied together.
pub const OFFSET_INIT_STD: f64 = 0.01;

impl DeformableAttention {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Self {
        let mut pb = pb.sub(name);
        let samples = heads * levels * points;
        Self {
            value_proj: (0..levels)
                .map(|l| Linear::lecun(&mut pb, &format!("value{l}"), d, d))
                .collect(),
            offsets: Linear::new(&mut pb, "offsets", d, samples * 3, true, OFFSET_INIT_STD),
            logits: Linear::new(&mut pb, "logits", d, samples, true, 0.0),
            output: Linear::lecun(&mut pb, "output", d, d),
            heads,
            points,
        }
    }

    pub fn layout(&self, levels: &[LevelTokens]) -> SampleLayout {
        SampleLayout {
            dims: levels.iter().map(|l| l.dims).collect(),
            heads: self.heads,
            points: self.points,
        }
    }

    /// `query: [nq, d]`, `refs: [nq, 3]` normalized reference points.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        refs: Var,
        levels: &[LevelTokens],
    ) -> Result<Var> {
        if levels.len() != self.value_proj.len() {
            return Err(Error::config(format!(
                "attention built for {} levels, given {}",
                self.value_proj.len(),
                levels.len()
            )));
        }
        let values = levels
            .iter()
            .zip(&self.value_proj)
            .map(|(lvl, proj)| proj.forward(g, p, lvl.tokens))
            .collect::<Result<Vec<_>>>()?;
        let offsets = self.offsets.forward(g, p, query)?;
        let logits = self.logits.forward(g, p, query)?;
        let core = msda_sample(g, &values, refs, offsets, logits, &self.layout(levels))?;
        self.output.forward(g, p, core)
    }
}

fn linear_plain<T: Scalar>(store: &ParamStore<T>, lin: &Linear, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = matmul_forward(x, store.get(lin.weight))?;
    Ok(match lin.bias {
        Some(b) => add_bias_forward(&y, store.get(b).data(), 1)?,
        None => y,
    })
}

/// Single-scale deformable attention evaluated directly, without the tape:
/// every head samples its own `[d/h, D, W, H]` value volume at `points`
/// locations around the reference point.
pub fn deformable_attention_core<T: Scalar>(
    values: &Tensor<T>,
    dims: Dims,
    refs: &Tensor<T>,
    offsets: &Tensor<T>,
    logits: &Tensor<T>,
    heads: usize,
    points: usize,
) -> Result<Tensor<T>> {
    let nq = check_points("deformable_attention", refs)?;
    let n = voxels(dims);
    let d = values.shape()[1];
    if values.shape() != [n, d] || d % heads != 0 {
        return Err(TensorError::dim("deformable_attention", format!("values {:?}", values.shape())).into());
    }
    let dh = d / heads;
    let weights = softmax_forward(&logits.clone().reshape([nq * heads, points])?)?;
    let scale = level_scale::<T>(dims);
    let (r, o) = (refs.data(), offsets.data());
    let mut out = vec![T::zero(); nq * d];
    for i in 0..heads {
        let volume = Tensor::from_fn([dh, dims[0], dims[1], dims[2]], |at| {
            values.data()[(at % n) * d + i * dh + at / n]
        });
        for q in 0..nq {
            let pts = Tensor::from_fn([points, 3], |at| {
                let (k, a) = (at / 3, at % 3);
                r[q * 3 + a] * scale[a] + o[(q * heads * points + i * points + k) * 3 + a]
            });
            let sampled = trilinear_sample_forward(&volume, &pts)?;
            for k in 0..points {
                let a = weights.data()[(q * heads + i) * points + k];
                for c in 0..dh {
                    out[q * d + i * dh + c] += a * sampled.data()[c * points + k];
                }
            }
        }
    }
    Ok(Tensor::new([nq, d], out)?)
}

impl DeformableAttention {
    /// Tape-free single-scale evaluation with this module's projections.
    pub fn single_scale_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        query: &Tensor<T>,
        refs: &Tensor<T>,
        tokens: &Tensor<T>,
        dims: Dims,
    ) -> Result<Tensor<T>> {
        if self.value_proj.len() != 1 {
            return Err(Error::config("single-scale evaluation needs a one-level module"));
        }
        let values = linear_plain(store, &self.value_proj[0], tokens)?;
        let offsets = linear_plain(store, &self.offsets, query)?;
        let logits = linear_plain(store, &self.logits, query)?;
        let core = deformable_attention_core(&values, dims, refs, &offsets, &logits, self.heads, self.points)?;
        linear_plain(store, &self.output, &core)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        let mut pb = pb.sub(name);
        Ok(Self {
            query: Linear::lecun(&mut pb, "query", d, d),
            key: Linear::lecun(&mut pb, "key", d, d),
            value: Linear::lecun(&mut pb, "value", d, d),
            output: Linear::lecun(&mut pb, "output", d, d),
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.query.forward(g, p, q)?;
        let k = self.key.forward(g, p, k)?;
        let v = self.value.forward(g, p, v)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = g.slice_cols(q, i * dh, dh)?;
            let ki = g.slice_cols(k, i * dh, dh)?;
            let vi = g.slice_cols(v, i * dh, dh)?;
            let kt = g.transpose(ki)?;
            let scores = g.matmul(qi, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vi)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.output.forward(g, p, cat)
    }
}
