//! Named parameter storage and the small layers built on it.
//!
//! Modules hold [`ParamId`]s into a [`ParamStore`]. Each step binds the whole
//! store onto a fresh graph with [`ParamStore::bind`], and layers look their
//! variables up through the returned [`Bound`] table.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use transdod_tensor::{ConvGeometry, Graph, Scalar, Tensor, Var, NORM_EPS};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Adds every parameter to `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables already on a graph, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Registers initialized parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.name(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(std * rng.sample::<f64, _>(StandardNormal)));
        let name = self.name(name);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(name);
        self.store.add(name, Tensor::full(shape.to_vec(), T::of(value)))
    }
}

/// Row-wise affine map with weight `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights drawn from `N(0, std^2)`, bias zero.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let mut pb = pb.sub(name);
        Self {
            weight: pb.normal("weight", &[fan_in, fan_out], std),
            bias: bias.then(|| pb.constant("bias", &[fan_out], 0.0)),
        }
    }

    /// Variance-preserving init for a layer followed by relu.
    pub fn he<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::new(pb, name, fan_in, fan_out, true, (2.0 / fan_in as f64).sqrt())
    }

    /// Unit-gain init for a layer without a following nonlinearity.
    pub fn lecun<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::new(pb, name, fan_in, fan_out, true, (1.0 / fan_in as f64).sqrt())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.weight], self.bias.map(|b| p[b]))?)
    }
}

/// 3D convolution with weight `[out, in, k, k, k]` (or `[out, in]` when `k = 1`).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

impl Conv {
    /// He-normal weights over `in * k^3` fan-in; zero bias.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Self {
        let k = geometry.kernel;
        let std = (2.0 / (cin * k * k * k) as f64).sqrt();
        let mut pb = pb.sub(name);
        let weight = if k == 1 && geometry.stride == 1 && geometry.padding == 0 {
            pb.normal("weight", &[cout, cin], std)
        } else {
            pb.normal("weight", &[cout, cin, k, k, k], std)
        };
        Self {
            weight,
            bias: bias.then(|| pb.constant("bias", &[cout], 0.0)),
            geometry,
        }
    }

    pub fn pointwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(pb, name, cin, cout, ConvGeometry::new(1, 1, 0), bias)
    }

    pub fn is_pointwise(&self) -> bool {
        self.geometry.kernel == 1 && self.geometry.stride == 1 && self.geometry.padding == 0
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| p[b]);
        Ok(if self.is_pointwise() {
            g.conv3d_1x1(x, p[self.weight], b)?
        } else {
            g.conv3d(x, p[self.weight], b, self.geometry)?
        })
    }
}

/// Affine parameters of an instance or layer norm.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Self {
        let mut pb = pb.sub(name);
        Self {
            gamma: pb.constant("gamma", &[width], 1.0),
            beta: pb.constant("beta", &[width], 0.0),
        }
    }

    pub fn instance<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.instance_norm(x, p[self.gamma], p[self.beta], T::of(NORM_EPS))?)
    }

    pub fn layer<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], T::of(NORM_EPS))?)
    }
}

/// `linear -> relu -> linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        let mut pb = pb.sub(name);
        Self {
            inner: Linear::he(&mut pb, "inner", width, hidden),
            outer: Linear::lecun(&mut pb, "outer", hidden, width),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_prefixes_and_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let lin = Linear::he(&mut pb.sub("block"), "proj", 3, 4);
        let norm = Norm::new(&mut pb, "ln", 4);
        assert_eq!(
            store.names(),
            &["block.proj.weight", "block.proj.bias", "ln.gamma", "ln.beta"]
        );
        assert_eq!(store.numel(), 12 + 4 + 8);
        assert_eq!(store.numel_with_prefix("block."), 16);
        assert_eq!(store.find("ln.gamma"), Some(norm.gamma));
        assert!(store.get(lin.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ParamBuilder::new(&mut store, &mut rng).normal("w", &[16], 1.0);
            store.tensors()[0].clone()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }
}
