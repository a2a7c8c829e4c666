//! Round-robin multi-task training with micro-batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdod_tensor::{Graph, Tensor, TensorError};

use super::checkpoint::{Checkpoint, RngState};
use super::infer::{binarize, fit_window, sliding_window_task};
use super::metrics::dice_metric;
use super::optim::{poly_lr, AdamState, AdamW};
use super::TrainConfig;
use crate::config::ModelConfig;
use crate::data::{self, Split, TaskDescriptor, VolumeCase};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{masked_loss, LabelPair, DICE_EPS};

/// A case with its task's annotation flags.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub task: TaskDescriptor,
}

impl TrainCase {
    pub fn new(case: VolumeCase) -> Result<Self> {
        let task = data::task(case.task_id)?;
        Ok(Self {
            image: case.image,
            labels: case.labels,
            task,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Training cases grouped by task, plus held-out validation cases.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: BTreeMap<usize, Vec<TrainCase>>,
    pub val: Vec<TrainCase>,
}

impl Dataset {
    pub fn from_cases(cases: impl IntoIterator<Item = (Split, VolumeCase)>) -> Result<Self> {
        let mut out = Dataset::default();
        for (split, case) in cases {
            let c = TrainCase::new(case)?;
            match split {
                Split::Train => out.train.entry(c.task.id).or_default().push(c),
                Split::Val => out.val.push(c),
                Split::Test => {}
            }
        }
        Ok(out)
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        Self::from_cases(data::load_cases(path)?.into_iter().map(|(e, c)| (e.split, c)))
    }

    /// Task ids with training cases, ascending; the round-robin order.
    pub fn tasks(&self) -> Vec<usize> {
        self.train.keys().copied().collect()
    }
}

/// Losses of one optimizer step (batch means).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub task: usize,
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn loss(&self) -> f64 {
        self.loss_dice + self.loss_ce
    }
}

/// One CSV row: an epoch's mean losses for one task and optional validation Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub task: usize,
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub val_dice_organ: Option<f64>,
    pub val_dice_tumor: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,task,loss_dice,loss_ce,val_dice_organ,val_dice_tumor";

pub fn log_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{}",
            r.epoch,
            r.task,
            r.loss_dice,
            r.loss_ce,
            opt(r.val_dice_organ),
            opt(r.val_dice_tumor)
        );
    }
    s
}

/// Per-case Dice of the labeled channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseDice {
    pub task: usize,
    pub organ: Option<f64>,
    pub tumor: Option<f64>,
}

/// Segments each case for its own task and scores the labeled channels.
pub fn evaluate_cases(model: &Model<f32>, cases: &[TrainCase], window: [usize; 3]) -> Result<Vec<CaseDice>> {
    cases
        .iter()
        .map(|c| {
            let dims = c.dims();
            let win = fit_window(window, dims, model.cfg.backbone.divisor());
            let probs = sliding_window_task(model, &c.image, win, c.task.id)?;
            let n = c.labels.len();
            let organ_gt: Vec<bool> = c.labels.iter().map(|&l| l >= 1).collect();
            let tumor_gt: Vec<bool> = c.labels.iter().map(|&l| l == 2).collect();
            let organ = c
                .task
                .organ_labeled
                .then(|| dice_metric(&binarize(&probs.data()[..n]), &organ_gt))
                .transpose()?;
            let tumor = c
                .task
                .tumor_labeled
                .then(|| dice_metric(&binarize(&probs.data()[n..]), &tumor_gt))
                .transpose()?;
            Ok(CaseDice {
                task: c.task.id,
                organ,
                tumor,
            })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean organ and tumor Dice over the cases of one task.
pub fn task_means(scores: &[CaseDice], task: usize) -> (Option<f64>, Option<f64>) {
    let of = scores.iter().filter(|s| s.task == task);
    (
        mean(of.clone().filter_map(|s| s.organ)),
        mean(of.filter_map(|s| s.tumor)),
    )
}

/// Crop (and optional flip) drawn for one micro-batch element.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelPair<f32>,
}

fn crop_sample(case: &TrainCase, at: [usize; 3], size: [usize; 3], flip: [bool; 3]) -> Result<Sample> {
    let dims = case.dims();
    let n = size.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                let src = [z, y, x];
                let p: [usize; 3] = [0, 1, 2].map(|a| at[a] + if flip[a] { size[a] - 1 - src[a] } else { src[a] });
                let i = (p[0] * dims[1] + p[1]) * dims[2] + p[2];
                image.push(case.image.data()[i]);
                labels.push(case.labels[i]);
            }
        }
    }
    Ok(Sample {
        image: Tensor::new([1, size[0], size[1], size[2]], image)?,
        labels: LabelPair::from_labels(&labels, size, case.task.organ_labeled, case.task.tumor_labeled)?,
    })
}

/// Optimizer, sampler and model state of a training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

/// Sampler stream; model initialization uses stream 0 of the same seed.
const SAMPLER_STREAM: u64 = 1;

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let adam = AdamState::zeros(model.params.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt: AdamW::new(cfg.weight_decay),
            adam,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ck.model, ck.train.seed)?;
        if model.params.names() != ck.names.as_slice() {
            return Err(Error::config("checkpoint parameters do not match the architecture"));
        }
        for (dst, src) in model.params.tensors_mut().iter_mut().zip(&ck.params) {
            if dst.shape() != src.shape() {
                return Err(Error::config(format!(
                    "parameter shape {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        let pos: u128 = ck
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::format(0, format!("bad sampler position {}", ck.rng.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(Self {
            model,
            cfg: ck.train.clone(),
            opt: ck.optimizer,
            adam: ck.adam.clone(),
            rng,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            optimizer: self.opt,
            step: self.step,
            names: self.model.params.names().to_vec(),
            params: self.model.params.tensors().to_vec(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.cfg.steps_per_epoch
    }

    /// Mean gradient and mean loss parts of `task` over `batch`.
    pub fn gradients(&self, batch: &[Sample], task: usize, step: u64) -> Result<(Vec<Vec<f32>>, f64, f64)> {
        let mut acc: Vec<Vec<f32>> = self
            .model
            .params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        let (mut dice, mut ce) = (0.0, 0.0);
        let non_finite = |d: Vec<f64>, c: Vec<f64>| Error::NonFiniteLoss {
            step,
            task,
            dice: d,
            ce: c,
        };
        for s in batch {
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let x = g.constant(s.image.clone());
            let loss = self
                .model
                .task_logits(&mut g, &p, x, task)
                .and_then(|(_, logits)| masked_loss(&mut g, logits, &s.labels, DICE_EPS))
                .map_err(|e| match e {
                    Error::Tensor(TensorError::NonFinite { .. } | TensorError::Evaluation(_)) => {
                        non_finite(vec![], vec![])
                    }
                    e => e,
                })?;
            let (ld, lc) = (loss.dice_loss(), loss.ce_loss());
            if !(ld + lc).is_finite() {
                return Err(non_finite(
                    loss.dice.iter().flatten().copied().collect(),
                    loss.ce.iter().flatten().copied().collect(),
                ));
            }
            dice += ld;
            ce += lc;
            let grads = g.backward(loss.total)?;
            for (a, &v) in acc.iter_mut().zip(p.vars()) {
                if let Some(gr) = grads.get(v) {
                    a.iter_mut().zip(gr).for_each(|(x, y)| *x += *y);
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        acc.iter_mut().flatten().for_each(|x| *x *= inv);
        let b = batch.len() as f64;
        Ok((acc, dice / b, ce / b))
    }

    fn draw_batch(&mut self, cases: &[TrainCase]) -> Result<Vec<Sample>> {
        let patch = self.cfg.patch;
        (0..self.cfg.batch_size)
            .map(|_| {
                let case = &cases[self.rng.random_range(0..cases.len())];
                let dims = case.dims();
                if (0..3).any(|a| patch[a] > dims[a]) {
                    return Err(Error::config(format!("patch {patch:?} larger than case {dims:?}")));
                }
                let at = [0, 1, 2].map(|a| self.rng.random_range(0..=dims[a] - patch[a]));
                let flip = if self.cfg.flip {
                    [0, 1, 2].map(|_| self.rng.random::<bool>())
                } else {
                    [false; 3]
                };
                crop_sample(case, at, patch, flip)
            })
            .collect()
    }

    /// One optimizer step on the next task in round-robin order.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let tasks = data.tasks();
        if tasks.is_empty() {
            return Err(Error::config("no training cases"));
        }
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.model.cfg.num_tasks) {
            return Err(Error::Task {
                task: t,
                tasks: self.model.cfg.num_tasks,
            });
        }
        let task = tasks[(self.step % tasks.len() as u64) as usize];
        let epoch = self.epoch();
        let lr = poly_lr(epoch, self.cfg.max_epoch, self.cfg.lr_init)?;
        let batch = self.draw_batch(&data.train[&task])?;
        let (grads, loss_dice, loss_ce) = self.gradients(&batch, task, self.step)?;
        self.opt
            .step(self.model.params.tensors_mut(), &grads, &mut self.adam, lr);
        let rec = StepRecord {
            step: self.step,
            epoch,
            task,
            loss_dice,
            loss_ce,
            lr,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `max_steps` (or the schedule end), returning one row per
    /// (epoch, task) with validation Dice on validation epochs.
    pub fn run(&mut self, data: &Dataset, max_steps: Option<u64>) -> Result<Vec<EpochRow>> {
        let end = max_steps.unwrap_or(u64::MAX).min(self.cfg.total_steps());
        let mut rows = Vec::new();
        let mut epoch_acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        while self.step < end {
            let rec = self.step(data)?;
            let e = epoch_acc.entry(rec.task).or_default();
            e.0 += rec.loss_dice;
            e.1 += rec.loss_ce;
            e.2 += 1;
            let epoch_done = self.step % self.cfg.steps_per_epoch == 0;
            if epoch_done || self.step == end {
                let last = self.step >= self.cfg.total_steps();
                let validate = !data.val.is_empty()
                    && (last || (self.cfg.val_every > 0 && (rec.epoch + 1) % self.cfg.val_every == 0));
                let scores = if validate {
                    evaluate_cases(&self.model, &data.val, self.cfg.window)?
                } else {
                    Vec::new()
                };
                for (task, (d, c, n)) in std::mem::take(&mut epoch_acc) {
                    let (vo, vt) = task_means(&scores, task);
                    rows.push(EpochRow {
                        epoch: rec.epoch,
                        task,
                        loss_dice: d / n as f64,
                        loss_ce: c / n as f64,
                        val_dice_organ: vo,
                        val_dice_tumor: vt,
                    });
                }
            }
        }
        Ok(rows)
    }
}
