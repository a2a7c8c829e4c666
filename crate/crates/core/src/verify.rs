//! Finite-difference gradient suite over every differentiable component,
//! run in 64-bit on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdod_tensor::{
    grad_check_refined, grad_check_sampled, ConvGeometry, GradCheckReport, Graph, Tensor, TensorError, Var, NORM_EPS,
};

use crate::attention::{msda_sample, trilinear_sample, DeformableAttention, LevelTokens, SampleLayout, SelfAttention};
use crate::config::ModelConfig;
use crate::data;
use crate::error::Result;
use crate::head::{dynamic_forward, FilterHead};
use crate::model::Model;
use crate::objective::{masked_loss, LabelPair, DICE_EPS};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::transformer::{DecoderLayer, EncoderContext, EncoderLayer};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Entries perturbed per tensor in the whole-model check.
pub const MODEL_SAMPLES: usize = 6;

type FdResult<T> = transdod_tensor::Result<T>;

/// One named check of the suite.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(FD_TOLERANCE)
    }
}

fn lift<T>(r: Result<T>) -> FdResult<T> {
    r.map_err(|e| TensorError::Evaluation(e.to_string()))
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(lo..hi))
    }
}

/// `sum(y * r)` with `r` fixed by `seed`, so every output entry matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> FdResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::from_fn(g.shape(y).to_vec(), |_| rng.random_range(-1.0..1.0)));
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Builds a layer, then jitters its weights so zero-initialized heads still
/// carry signal through every path.
fn layer<L>(seed: u64, jitter: f64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> L) -> (L, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = build(&mut ParamBuilder::new(&mut store, &mut rng));
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += jitter * rng.random_range(-1.0..1.0));
    }
    (l, store)
}

/// Checks a layer w.r.t. its parameters followed by `inputs`.
fn check_layer<L>(
    l: &L,
    store: &ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&L, &mut Graph<f64>, &Bound, &[Var]) -> FdResult<Var>,
) -> Result<GradCheckReport> {
    let np = store.len();
    let mut all = store.tensors().to_vec();
    all.extend(inputs);
    Ok(grad_check_sampled(
        |g, v| f(l, g, &Bound::from_vars(v[..np].to_vec()), &v[np..]),
        &all,
        FD_STEP,
        None,
    )?)
}

fn check_plain(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> FdResult<Var>,
) -> Result<GradCheckReport> {
    Ok(grad_check_sampled(f, inputs, FD_STEP, None)?)
}

/// Moves encoder sampling offsets half a voxel off the lattice. Encoder
/// reference points are voxel centers and offsets start near zero, so
/// unshifted samples straddle the kinks of trilinear interpolation.
pub fn offset_encoder_sampling(model: &mut Model<f64>) {
    for l in 0..model.cfg.transformer.enc_layers {
        if let Some(id) = model.params.find(&format!("transformer.enc{l}.attn.offsets.bias")) {
            model.params.get_mut(id).data_mut().fill(0.5);
        }
    }
}

/// Runs every check for the component sizes of `cfg`. The whole-model check
/// uses a cube whose side is the smallest multiple of the backbone divisor
/// that is at least 8.
pub fn gradient_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<GradEntry>> {
    cfg.validate()?;
    let tc = &cfg.transformer;
    let hc = &cfg.head;
    let d = tc.d;
    let mut inp = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = Vec::new();
    let mut push = |name, report| out.push(GradEntry { name, report });

    let x = inp.uniform(&[3, 2, 3, 2], -1.0, 1.0);
    let gamma = inp.uniform(&[3], 0.5, 1.5);
    let beta = inp.uniform(&[3], -0.5, 0.5);
    push(
        "instance_norm",
        check_plain(&[x, gamma, beta], |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], NORM_EPS)?;
            project(g, y, seed + 1)
        })?,
    );

    let x = inp.uniform(&[2, 4, 3, 4], -1.0, 1.0);
    let w = inp.uniform(&[3, 2, 3, 3, 3], -0.5, 0.5);
    let b = inp.uniform(&[3], -0.5, 0.5);
    for (name, geo) in [
        ("conv3d", ConvGeometry::same(3)),
        ("conv3d_stride2", ConvGeometry::new(3, 2, 1)),
    ] {
        push(
            name,
            check_plain(&[x.clone(), w.clone(), b.clone()], |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), geo)?;
                project(g, y, seed + 2)
            })?,
        );
    }

    let x = inp.uniform(&[4, 5], -2.0, 2.0);
    push(
        "softmax",
        check_plain(&[x], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, seed + 3)
        })?,
    );

    let (sa, store) = layer(seed + 4, 0.0, |pb| SelfAttention::new(pb, "sa", d, tc.heads));
    let sa = sa?;
    let q_in = vec![
        inp.uniform(&[3, d], -1.0, 1.0),
        inp.uniform(&[5, d], -1.0, 1.0),
        inp.uniform(&[5, d], -1.0, 1.0),
    ];
    push(
        "self_attention",
        check_layer(&sa, &store, q_in, |sa, g, p, x| {
            let y = lift(sa.forward(g, p, x[0], x[1], x[2]))?;
            project(g, y, seed + 5)
        })?,
    );

    let volume = inp.uniform(&[2, 3, 4, 3], -1.0, 1.0);
    let points = Tensor::from_fn([6, 3], |i| {
        let n = [3.0, 4.0, 3.0][i % 3];
        inp.rng.random_range(-0.5..n - 0.5)
    });
    push(
        "trilinear_sample",
        check_plain(&[volume, points], |g, v| {
            let s = lift(trilinear_sample(g, v[0], v[1]))?;
            project(g, s, seed + 6)
        })?,
    );

    let level_dims: Vec<[usize; 3]> = (0..tc.levels).map(|l| [2, 2 + l % 2, 2 + l / 2]).collect();
    let layout = SampleLayout {
        dims: level_dims.clone(),
        heads: tc.heads,
        points: tc.points,
    };
    let nq = 3;
    let s = layout.samples();
    let mut msda_in: Vec<Tensor<f64>> = level_dims
        .iter()
        .map(|dm| inp.uniform(&[dm.iter().product(), d], -1.0, 1.0))
        .collect();
    msda_in.push(inp.uniform(&[nq, 3], 0.05, 0.95));
    msda_in.push(inp.uniform(&[nq, s * 3], -0.7, 0.7));
    msda_in.push(inp.uniform(&[nq, s], -2.0, 2.0));
    let nl = tc.levels;
    push(
        "msda_sample",
        check_plain(&msda_in, |g, v| {
            let y = lift(msda_sample(g, &v[..nl], v[nl], v[nl + 1], v[nl + 2], &layout))?;
            project(g, y, seed + 7)
        })?,
    );

    let (attn, store) = layer(seed + 8, 0.3, |pb| {
        DeformableAttention::new(pb, "msda", d, tc.heads, nl, tc.points)
    });
    let mut attn_in = vec![inp.uniform(&[nq, d], -1.0, 1.0)];
    attn_in.extend(
        level_dims
            .iter()
            .map(|dm| inp.uniform(&[dm.iter().product(), d], -1.0, 1.0)),
    );
    let refs = inp.uniform(&[nq, 3], 0.1, 0.9);
    push(
        "deformable_attention",
        check_layer(&attn, &store, attn_in, |a, g, p, x| {
            let r = g.constant(refs.clone());
            let levels: Vec<LevelTokens> = level_dims
                .iter()
                .enumerate()
                .map(|(l, &dims)| LevelTokens { tokens: x[1 + l], dims })
                .collect();
            let y = lift(a.forward(g, p, x[0], r, &levels))?;
            project(g, y, seed + 9)
        })?,
    );

    let n_tokens: usize = level_dims.iter().map(|dm| dm.iter().product::<usize>()).sum();
    let (enc, store) = layer(seed + 10, 0.1, |pb| EncoderLayer::new(pb, "enc", tc));
    let bias = inp.uniform(&[n_tokens, d], -0.5, 0.5);
    let enc_refs = inp.uniform(&[n_tokens, 3], 0.0, 1.0);
    let z = inp.uniform(&[n_tokens, d], -1.0, 1.0);
    push(
        "encoder_layer",
        check_layer(&enc, &store, vec![z], |layer, g, p, x| {
            let ctx = EncoderContext {
                query_bias: g.constant(bias.clone()),
                refs: g.constant(enc_refs.clone()),
                dims: level_dims.clone(),
            };
            let y = lift(layer.forward(g, p, x[0], &ctx, tc.alpha_enc()))?;
            project(g, y, seed + 11)
        })?,
    );

    let m = cfg.num_tasks;
    let (dec, store) = layer(seed + 12, 0.1, |pb| DecoderLayer::new(pb, "dec", tc));
    let dec = dec?;
    let dec_refs = inp.uniform(&[m, 3], 0.1, 0.9);
    let dec_in = vec![
        inp.uniform(&[m, d], -1.0, 1.0),
        inp.uniform(&[m, d], -1.0, 1.0),
        inp.uniform(&[n_tokens, d], -1.0, 1.0),
    ];
    push(
        "decoder_layer",
        check_layer(&dec, &store, dec_in, |layer, g, p, x| {
            let r = g.constant(dec_refs.clone());
            let mut start = 0;
            let mut memory = Vec::with_capacity(level_dims.len());
            for &dims in &level_dims {
                let n: usize = dims.iter().product();
                memory.push(LevelTokens {
                    tokens: g.slice_rows(x[2], start, n)?,
                    dims,
                });
                start += n;
            }
            let y = lift(layer.forward(g, p, x[0], x[1], r, &memory, tc.alpha_dec()))?;
            project(g, y, seed + 13)
        })?,
    );

    let (filters, store) = layer(seed + 14, 0.0, |pb| FilterHead::new(pb, "filters", d, hc));
    let filters = filters?;
    push(
        "predict_filters",
        check_layer(&filters, &store, vec![inp.uniform(&[m, d], -1.0, 1.0)], |f, g, p, x| {
            let y = lift(f.predict(g, p, x[0]))?;
            project(g, y, seed + 15)
        })?,
    );

    let df = cfg.dynamic_params();
    let map = inp.uniform(&[hc.width, 2, 3, 2], -1.0, 1.0);
    let kernels = inp.uniform(&[m, df], -1.0, 1.0);
    push(
        "dynamic_forward",
        check_plain(&[map, kernels], |g, v| {
            let mut total = None;
            for task in 0..m {
                let y = lift(dynamic_forward(g, v[0], v[1], task, hc))?;
                let s = project(g, y, seed + 16 + task as u64)?;
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("at least one task"))
        })?,
    );

    let dims = [2, 3, 3];
    let labels: Vec<u8> = (0..18).map(|_| inp.rng.random_range(0..3)).collect();
    let logits = inp.uniform(&[2, 2, 3, 3], -3.0, 3.0);
    let pairs = [(true, true), (false, true), (true, false)]
        .map(|(o, t)| LabelPair::<f64>::from_labels(&labels, dims, o, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    push(
        "masked_loss",
        check_plain(&[logits], |g, v| {
            let mut total = None;
            for pair in &pairs {
                let l = lift(masked_loss(g, v[0], pair, DICE_EPS))?.total;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("three patterns"))
        })?,
    );

    let mut model = Model::<f32>::new(cfg, seed)?.cast::<f64>();
    offset_encoder_sampling(&mut model);
    let div = cfg.backbone.divisor();
    let side = 8usize.div_ceil(div) * div;
    let volume = inp.uniform(&[1, side, side, side], -1.0, 1.0);
    let labels: Vec<u8> = (0..side.pow(3)).map(|_| inp.rng.random_range(0..3)).collect();
    let task = data::task(0)?;
    let pair = LabelPair::<f64>::from_labels(&labels, [side; 3], task.organ_labeled, task.tumor_labeled)?;
    let report = grad_check_refined(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let xv = g.constant(volume.clone());
            let (_, logits) = lift(model.task_logits(g, &p, xv, 0))?;
            Ok(lift(masked_loss(g, logits, &pair, DICE_EPS))?.total)
        },
        model.params.tensors(),
        FD_STEP,
        Some(MODEL_SAMPLES),
        FD_TOLERANCE,
    )?;
    push("micro_model", report);
    Ok(out)
}
