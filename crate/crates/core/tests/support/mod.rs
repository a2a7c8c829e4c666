//! Loop oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdod_core::attention::{DeformableAttention, LevelTokens};
use transdod_core::config::dynamic_param_count;
use transdod_core::head::dynamic_forward;
use transdod_core::params::{Linear, ParamBuilder, ParamStore};
use transdod_core::HeadConfig;
use transdod_tensor::{Graph, Tensor};

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x [n, in] * w [in, out] + b`, by loops.
pub fn affine(x: &[f64], n: usize, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        for o in 0..fout {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..fin {
                s += x[r * fin + i] * w.data()[i * fout + o];
            }
            out[r * fout + o] = s;
        }
    }
    out
}

pub fn apply(store: &ParamStore<f64>, lin: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    affine(x, n, store.get(lin.weight), lin.bias.map(|b| store.get(b)))
}

/// Sum over the 8 surrounding lattice points of `prod(1 - |p - c|)`, with
/// points off the grid reading as zero. `value(voxel)` returns one channel.
pub fn corner_sum(dims: [usize; 3], p: [f64; 3], value: impl Fn(usize) -> f64) -> f64 {
    let base = p.map(f64::floor);
    let mut s = 0.0;
    for corner in 0..8 {
        let c = [0, 1, 2].map(|a| base[a] + ((corner >> (2 - a)) & 1) as f64);
        if (0..3).any(|a| c[a] < 0.0 || c[a] >= dims[a] as f64) {
            continue;
        }
        let w: f64 = (0..3).map(|a| 1.0 - (p[a] - c[a]).abs()).product();
        let idx = (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize;
        s += w * value(idx);
    }
    s
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Full multi-scale deformable attention by loops: projections, joint
/// softmax per (query, head), per-level rescaling of the reference point,
/// trilinear sampling and output projection.
pub fn msda_oracle(
    attn: &DeformableAttention,
    store: &ParamStore<f64>,
    query: &Tensor<f64>,
    refs: &Tensor<f64>,
    levels: &[(Tensor<f64>, [usize; 3])],
) -> Vec<f64> {
    let nq = query.shape()[0];
    let d = query.shape()[1];
    let (h, nl, k) = (attn.heads, levels.len(), attn.points);
    let dh = d / h;
    let values: Vec<Vec<f64>> = levels
        .iter()
        .zip(&attn.value_proj)
        .map(|((t, _), lin)| apply(store, lin, t.data(), t.shape()[0]))
        .collect();
    let offsets = apply(store, &attn.offsets, query.data(), nq);
    let logits = apply(store, &attn.logits, query.data(), nq);
    let s = h * nl * k;
    let mut cat = vec![0.0; nq * d];
    for q in 0..nq {
        for head in 0..h {
            let js: Vec<usize> = (0..nl * k).map(|lk| head * nl * k + lk).collect();
            let a = softmax(&js.iter().map(|&j| logits[q * s + j]).collect::<Vec<_>>());
            for (lk, &j) in js.iter().enumerate() {
                let l = lk / k;
                let dims = levels[l].1;
                let p =
                    [0, 1, 2].map(|ax| refs.data()[q * 3 + ax] * (dims[ax] - 1) as f64 + offsets[(q * s + j) * 3 + ax]);
                for c in 0..dh {
                    cat[q * d + head * dh + c] += a[lk] * corner_sum(dims, p, |v| values[l][v * d + head * dh + c]);
                }
            }
        }
    }
    apply(store, &attn.output, &cat, nq)
}

/// Largest deviation of the deformable attention module from
/// [`msda_oracle`] on random instance `inst`; shapes cycle with `inst`.
pub fn msda_instance_error(inst: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
    let heads = 1 + (inst % 2) as usize;
    let d = 6 * heads;
    let nl = 1 + (inst % 3) as usize;
    let k = 1 + (inst % 4) as usize;
    let nq = 1 + (inst % 5) as usize;
    let mut store = ParamStore::new();
    let attn = DeformableAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "msda", d, heads, nl, k);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.8..0.8));
    }
    let levels: Vec<(Tensor<f64>, [usize; 3])> = (0..nl)
        .map(|_| {
            let dims = [0; 3].map(|_: usize| rng.random_range(1..5usize));
            (uniform(&mut rng, &[dims.iter().product(), d], -1.0, 1.0), dims)
        })
        .collect();
    let query = uniform(&mut rng, &[nq, d], -1.0, 1.0);
    let refs = uniform(&mut rng, &[nq, 3], 0.0, 1.0);

    let mut g = Graph::inference();
    let p = store.bind(&mut g);
    let lt: Vec<LevelTokens> = levels
        .iter()
        .map(|(t, dims)| LevelTokens {
            tokens: g.constant(t.clone()),
            dims: *dims,
        })
        .collect();
    let (qv, rv) = (g.constant(query.clone()), g.constant(refs.clone()));
    let out = attn.forward(&mut g, &p, qv, rv, &lt).unwrap();
    max_abs_diff(g.value(out).data(), &msda_oracle(&attn, &store, &query, &refs, &levels))
}

/// Task `task` of a packed-kernel head evaluated voxel by voxel:
/// `depth` pointwise layers, ReLU between them, two output channels.
pub fn dynamic_head_oracle(map: &Tensor<f64>, kernels: &Tensor<f64>, task: usize, cfg: &HeadConfig) -> Vec<f64> {
    let df = kernels.shape()[1];
    let nv = map.numel() / cfg.width;
    let omega = &kernels.data()[task * df..(task + 1) * df];
    let mut want = vec![0.0; 2 * nv];
    for v in 0..nv {
        let mut x: Vec<f64> = (0..cfg.width).map(|c| map.data()[c * nv + v]).collect();
        let mut at = 0;
        for layer in 0..cfg.depth {
            let outs = if layer + 1 == cfg.depth { 2 } else { cfg.width };
            let w = &omega[at..at + outs * cfg.width];
            let b = &omega[at + outs * cfg.width..at + outs * cfg.width + outs];
            at += outs * cfg.width + outs;
            let mut y: Vec<f64> = (0..outs)
                .map(|o| b[o] + (0..cfg.width).map(|i| w[o * cfg.width + i] * x[i]).sum::<f64>())
                .collect();
            if layer + 1 < cfg.depth {
                y.iter_mut().for_each(|t| *t = t.max(0.0));
            }
            x = y;
        }
        assert_eq!(at, df);
        want[v] = x[0];
        want[nv + v] = x[1];
    }
    want
}

/// Largest deviation of the dynamic head from [`dynamic_head_oracle`] on
/// random instance `inst`.
pub fn dynamic_instance_error(inst: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + inst);
    let cfg = HeadConfig {
        width: 2 + (inst % 4) as usize * 2,
        depth: 2 + (inst % 3) as usize,
    };
    let df = dynamic_param_count(cfg.width, cfg.depth).unwrap();
    let tasks = 1 + (inst % 4) as usize;
    let task = (inst as usize * 7) % tasks;
    let dims = [2, 3, 1 + (inst % 3) as usize];
    let map = uniform(&mut rng, &[cfg.width, dims[0], dims[1], dims[2]], -1.0, 1.0);
    let kernels = uniform(&mut rng, &[tasks, df], -1.0, 1.0);

    let mut g = Graph::inference();
    let (mv, kv) = (g.constant(map.clone()), g.constant(kernels.clone()));
    let out = dynamic_forward(&mut g, mv, kv, task, &cfg).unwrap();
    max_abs_diff(g.value(out).data(), &dynamic_head_oracle(&map, &kernels, task, &cfg))
}

fn brute_boundary(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let at = |z: i64, y: i64, x: i64| {
        z >= 0
            && y >= 0
            && x >= 0
            && z < dims[0] as i64
            && y < dims[1] as i64
            && x < dims[2] as i64
            && mask[((z as usize) * dims[1] + y as usize) * dims[2] + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..dims[0] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[2] as i64 {
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if at(z, y, x) && nbrs.iter().any(|(a, b, c)| !at(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn brute_hausdorff(a: &[bool], b: &[bool], dims: [usize; 3]) -> f64 {
    let (ba, bb) = (brute_boundary(a, dims), brute_boundary(b, dims));
    let dist = |p: &[i64; 3], q: &[i64; 3]| ((0..3).map(|i| (p[i] - q[i]).pow(2)).sum::<i64>() as f64).sqrt();
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&ba, &bb).max(directed(&bb, &ba))
}

/// `2 |A and B| / (|A| + |B|)` by counting.
pub fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count()) as f64;
    2.0 * inter / total
}

/// Random non-empty mask pair on a grid with every side in `2..7`.
pub fn random_mask_pair(rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<bool>, [usize; 3]) {
    let dims = [0; 3].map(|_: usize| rng.random_range(2..7usize));
    let n: usize = dims.iter().product();
    let (pa, pb) = (rng.random_range(0.1..0.7), rng.random_range(0.1..0.7));
    let mut a: Vec<bool> = (0..n).map(|_| rng.random_bool(pa)).collect();
    let mut b: Vec<bool> = (0..n).map(|_| rng.random_bool(pb)).collect();
    a[rng.random_range(0..n)] = true;
    b[rng.random_range(0..n)] = true;
    (a, b, dims)
}
