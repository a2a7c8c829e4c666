use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use transdod_core::data::{self, ManifestEntry, Split, VolumeCase, TASKS};
use transdod_core::engine::checkpoint::Checkpoint;
use transdod_core::engine::infer::{binarize, fit_window, sliding_window_infer, sliding_window_task};
use transdod_core::engine::metrics::{dice_metric, hausdorff};
use transdod_core::engine::train::{log_csv, Dataset, Trainer};
use transdod_core::verify::{gradient_suite, FD_TOLERANCE};
use transdod_core::{Error, Model, ModelConfig};
use transdod_tensor::Tensor;

use crate::config::{RunConfig, RunManifest};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.csv";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn shape3(v: &[usize], flag: &str) -> Result<[usize; 3]> {
    v.try_into()
        .map_err(|_| CliError::Usage(format!("--{flag} takes three extents D,W,H")))
}

/// Seed of the `index`-th case of a generation run.
pub fn case_seed(run_seed: u64, index: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// File name of the mask written for `task`.
pub fn mask_file(task: usize) -> String {
    format!("task{task}.vol")
}

pub fn gen(a: &crate::GenArgs) -> Result<()> {
    let tasks = a.tasks.clone().unwrap_or_else(|| (0..TASKS.len()).collect());
    let descriptors = tasks.iter().map(|&t| data::task(t)).collect::<Result<Vec<_>, _>>()?;
    let shape = shape3(&a.shape, "shape")?;
    if a.cases_per_task == 0 || a.val_per_task >= a.cases_per_task {
        return Err(CliError::Usage("--cases-per-task must exceed --val-per-task".into()));
    }
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for t in &descriptors {
        let dir = format!("{}_{}", t.id, t.name);
        create_dir(&a.out.join(&dir))?;
        for i in 0..a.cases_per_task {
            let case = data::generate_case(t, case_seed(a.seed, i), shape)?;
            let rel = format!("{dir}/case{i:03}.vol");
            data::write_volume(&case, &a.out.join(&rel))?;
            let split = if i + a.val_per_task >= a.cases_per_task {
                Split::Val
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                path: rel,
                task_id: t.id,
                split,
            });
        }
    }
    data::write_manifest(&entries, &a.out.join(MANIFEST_FILE))?;
    RunManifest {
        command: "gen",
        config_path: None,
        seed: a.seed,
        output: &a.out,
        resolved: json!({
            "tasks": tasks,
            "cases_per_task": a.cases_per_task,
            "val_per_task": a.val_per_task,
            "shape": shape,
        }),
    }
    .write(&a.out.join(RUN_FILE))?;
    println!(
        "wrote {} volumes for {} tasks to {}",
        entries.len(),
        tasks.len(),
        a.out.display()
    );
    Ok(())
}

/// Fails with the differing fields when `ck` was trained under another model.
pub fn check_compatible(expected: &ModelConfig, ck: &Checkpoint) -> Result<()> {
    let diff = expected.diff(&ck.model);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(diff).into())
    }
}

pub fn train(a: &crate::TrainArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let data = Dataset::from_manifest(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_compatible(&cfg.model, &ck)?;
            if ck.train != cfg.train {
                let theirs = serde_json::to_value(&ck.train).map_err(Error::from)?;
                let ours = serde_json::to_value(&cfg.train).map_err(Error::from)?;
                let fields = ours
                    .as_object()
                    .into_iter()
                    .flatten()
                    .filter(|(k, v)| theirs.get(k.as_str()) != Some(v))
                    .map(|(k, _)| format!("train.{k}"))
                    .collect();
                return Err(Error::Incompatible(fields).into());
            }
            Trainer::from_checkpoint(&ck)?
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    create_dir(&a.out)?;
    RunManifest {
        command: "train",
        config_path: a.config.as_deref(),
        seed: cfg.train.seed,
        output: &a.out,
        resolved: json!({
            "config": &cfg,
            "data": &a.data,
            "max_steps": a.max_steps,
            "resume": &a.resume,
        }),
    }
    .write(&a.out.join(RUN_FILE))?;
    let rows = trainer.run(&data, a.max_steps)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ckpt)?;
    let log = a.out.join(LOG_FILE);
    fs::write(&log, log_csv(&rows)).map_err(|e| Error::io(&log, e))?;
    if let Some(last) = rows.last() {
        println!(
            "step {} epoch {} loss_dice {:.4} loss_ce {:.4}",
            trainer.step, last.epoch, last.loss_dice, last.loss_ce
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Mask volume with the labeled channels of `task`: 1 organ, 2 tumor, image
/// block zeroed.
fn mask_case(probs: &[f32], n: usize, dims: [usize; 3], task: usize, seed: u64) -> Result<VolumeCase> {
    let t = data::task(task)?;
    let organ = binarize(&probs[..n]);
    let tumor = binarize(&probs[n..2 * n]);
    let labels = (0..n)
        .map(|i| match (t.tumor_labeled && tumor[i], t.organ_labeled && organ[i]) {
            (true, _) => 2,
            (false, true) => 1,
            _ => 0,
        })
        .collect();
    Ok(VolumeCase {
        image: Tensor::zeros([1, dims[0], dims[1], dims[2]]),
        labels,
        task_id: task,
        seed,
    })
}

pub fn infer(a: &crate::InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    if let Some(path) = &a.config {
        check_compatible(&RunConfig::load(path)?.model, &ck)?;
    }
    let mut model = Model::<f32>::new(&ck.model, ck.train.seed)?;
    if model.params.names() != ck.names.as_slice() {
        return Err(Error::config("checkpoint parameters do not match the architecture").into());
    }
    for (dst, src) in model.params.tensors_mut().iter_mut().zip(&ck.params) {
        *dst = src.clone();
    }
    let m = ck.model.num_tasks;
    if let Some(t) = a.task.filter(|&t| t >= m.min(TASKS.len())) {
        return Err(Error::Task {
            task: t,
            tasks: m.min(TASKS.len()),
        }
        .into());
    }
    let case = data::read_volume(&a.volume)?;
    let dims = case.dims();
    let n: usize = dims.iter().product();
    let window = match &a.window {
        Some(w) => shape3(w, "window")?,
        None => ck.train.window,
    };
    let window = fit_window(window, dims, ck.model.backbone.divisor());
    create_dir(&a.out)?;
    let mut written = Vec::new();
    let mut emit = |task: usize, probs: &[f32]| -> Result<()> {
        let path = a.out.join(mask_file(task));
        data::write_volume(&mask_case(probs, n, dims, task, case.seed)?, &path)?;
        written.push(path);
        Ok(())
    };
    match a.task {
        Some(task) => emit(task, sliding_window_task(&model, &case.image, window, task)?.data())?,
        None => {
            let all = sliding_window_infer(&model, &case.image, window)?;
            for task in 0..m.min(TASKS.len()) {
                emit(task, &all.data()[task * 2 * n..(task + 1) * 2 * n])?;
            }
        }
    }
    RunManifest {
        command: "infer",
        config_path: a.config.as_deref(),
        seed: ck.train.seed,
        output: &a.out,
        resolved: json!({
            "checkpoint": &a.ckpt,
            "volume": &a.volume,
            "model": &ck.model,
            "window": window,
            "tasks": a.task.map_or_else(|| (0..m.min(TASKS.len())).collect(), |t| vec![t]),
        }),
    }
    .write(&a.out.join(RUN_FILE))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Dice and Hausdorff distance of one structure; the distance is absent when
/// either mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StructureMetrics {
    pub dice: f64,
    pub hausdorff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: usize,
    pub task_name: &'static str,
    /// `None` when the task does not annotate the structure.
    pub organ: Option<StructureMetrics>,
    pub tumor: Option<StructureMetrics>,
    pub unavailable: Vec<&'static str>,
}

fn structure(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> Result<StructureMetrics> {
    let hd = match hausdorff(pred, gt, dims) {
        Ok(h) => Some(h),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(StructureMetrics {
        dice: dice_metric(pred, gt)?,
        hausdorff: hd,
    })
}

/// Scores the structures annotated by the ground truth's task.
pub fn evaluate(pred: &VolumeCase, gt: &VolumeCase) -> Result<EvalReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::config(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())).into());
    }
    let t = data::task(gt.task_id)?;
    let dims = gt.dims();
    let channel = |v: &VolumeCase, tumor: bool| -> Vec<bool> {
        v.labels.iter().map(|&l| if tumor { l == 2 } else { l >= 1 }).collect()
    };
    let mut unavailable = Vec::new();
    let mut score = |labeled: bool, tumor: bool, name| -> Result<Option<StructureMetrics>> {
        if !labeled {
            unavailable.push(name);
            return Ok(None);
        }
        structure(&channel(pred, tumor), &channel(gt, tumor), dims).map(Some)
    };
    let organ = score(t.organ_labeled, false, "organ")?;
    let tumor = score(t.tumor_labeled, true, "tumor")?;
    Ok(EvalReport {
        task: t.id,
        task_name: t.name,
        organ,
        tumor,
        unavailable,
    })
}

pub fn eval(a: &crate::EvalArgs) -> Result<()> {
    let report = evaluate(&data::read_volume(&a.pred)?, &data::read_volume(&a.gt)?)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(path) = &a.out {
        fs::write(path, text.clone() + "\n").map_err(|e| Error::io(path, e))?;
    }
    println!("{text}");
    Ok(())
}

pub fn paramcount_table(cfg: &ModelConfig) -> Result<String> {
    let c = Model::<f32>::new(cfg, 0)?.param_counts();
    Ok(format!(
        "{:<22}{:>12}\n{:<22}{:>12}\n{:<22}{:>12}\n{:<22}{:>12}\n{:<22}{:>12}\n",
        "dynamic_head (d_F)",
        c.dynamic_per_task,
        "backbone",
        c.backbone,
        "transformer",
        c.transformer,
        "filter_head",
        c.filter_head,
        "total",
        c.total
    ))
}

pub fn paramcount(a: &crate::ParamcountArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    print!("{}", paramcount_table(&cfg.model)?);
    Ok(())
}

pub fn gradcheck(a: &crate::GradcheckArgs) -> Result<()> {
    let model = match &a.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::micro(),
    };
    let suite = gradient_suite(&model, a.seed)?;
    let mut failed: Vec<&str> = Vec::new();
    for e in &suite {
        let ok = e.passed();
        if !ok {
            failed.push(e.name);
        }
        println!(
            "{:<22} max_rel_err {:.3e}  checked {:>5}  {}",
            e.name,
            e.report.max_rel_err,
            e.report.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        println!("all {} checks below {FD_TOLERANCE:e}", suite.len());
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
