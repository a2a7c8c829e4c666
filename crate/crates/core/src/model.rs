//! The full network: backbone, kernel-generating transformer and dynamic heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transdod_tensor::{Graph, Scalar, Tensor, Var};

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{dynamic_forward, dynamic_forward_all, dynamic_forward_plain, FilterHead};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::transformer::Transformer;

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-segmentation map `[C2, D, W, H]`.
    pub map: Var,
    /// Packed kernels `[M, d_F]`.
    pub kernels: Var,
    /// Organ output embeddings `[M, d]`.
    pub organs: Var,
}

/// Parameter totals per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub dynamic_per_task: usize,
    pub backbone: usize,
    pub transformer: usize,
    pub filter_head: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub transformer: Transformer,
    pub filters: FilterHead,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let backbone = Backbone::new(&mut pb.sub("backbone"), &cfg.backbone, cfg.transformer.d);
        let transformer = Transformer::new(
            &mut pb.sub("transformer"),
            &cfg.transformer,
            &cfg.backbone.stage_channels,
            cfg.num_tasks,
        )?;
        let filters = FilterHead::new(&mut pb, "filters", cfg.transformer.d, &cfg.head)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            transformer,
            filters,
        })
    }

    /// Same architecture with parameters converted to another width.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            transformer: self.transformer.clone(),
            filters: self.filters.clone(),
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        let backbone = self.params.numel_with_prefix("backbone.");
        let transformer = self.params.numel_with_prefix("transformer.");
        let filter_head = self.params.numel_with_prefix("filters.");
        ParamCounts {
            dynamic_per_task: self.cfg.dynamic_params(),
            backbone,
            transformer,
            filter_head,
            total: self.params.numel(),
        }
    }

    /// Runs everything up to the dynamic heads on a `[1, D, W, H]` volume.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<ForwardOutput> {
        let pyramid = self.backbone.encode(g, p, x)?;
        let gen = self.transformer.run(g, p, &pyramid)?;
        let map = self.backbone.decode(g, p, &pyramid, Some(gen.volume))?;
        let kernels = self.filters.predict(g, p, gen.organs)?;
        Ok(ForwardOutput {
            map,
            kernels,
            organs: gen.organs,
        })
    }

    /// Logits `[2, D, W, H]` of a single task; other heads are not evaluated.
    pub fn task_logits(&self, g: &mut Graph<T>, p: &Bound, x: Var, task: usize) -> Result<(ForwardOutput, Var)> {
        let out = self.forward(g, p, x)?;
        let logits = dynamic_forward(g, out.map, out.kernels, task, &self.cfg.head)?;
        Ok((out, logits))
    }

    fn shared(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok((g.value(out.map).clone(), g.value(out.kernels).clone()))
    }

    /// Logits of every task, `[M, 2, D, W, H]`, from one shared forward pass.
    pub fn predict_all(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (map, kernels) = self.shared(x)?;
        dynamic_forward_all(&map, &kernels, &self.cfg.head)
    }

    /// Logits `[2, D, W, H]` of one task.
    pub fn predict_task(&self, x: &Tensor<T>, task: usize) -> Result<Tensor<T>> {
        let (map, kernels) = self.shared(x)?;
        let tasks = kernels.shape()[0];
        if task >= tasks {
            return Err(crate::Error::Task { task, tasks });
        }
        let df = kernels.shape()[1];
        dynamic_forward_plain(&map, &kernels.data()[task * df..(task + 1) * df], &self.cfg.head)
    }
}
