//! 3D residual encoder-decoder producing the feature pyramid and the
//! pre-segmentation map.

use transdod_tensor::{ConvGeometry, Graph, Scalar, TensorError, Var};

use crate::config::{BackboneConfig, FusionMode};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Norm, ParamBuilder};

/// `relu(IN(conv(relu(IN(conv(x))))) + skip(x))`, with a pointwise
/// projection on the skip path when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub skip: Option<Conv>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut pb = pb.sub(name);
        let same = ConvGeometry::same(3);
        Self {
            conv1: Conv::new(&mut pb, "conv1", cin, cout, same, false),
            norm1: Norm::new(&mut pb, "norm1", cout),
            conv2: Conv::new(&mut pb, "conv2", cout, cout, same, false),
            norm2: Norm::new(&mut pb, "norm2", cout),
            skip: (cin != cout).then(|| Conv::pointwise(&mut pb, "skip", cin, cout, false)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.instance(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = self.norm2.instance(g, p, h)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y)?)
    }
}

/// Stride-2 convolution, instance norm, relu.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: Option<Downsample>,
    pub blocks: Vec<ResidualBlock>,
}

/// One decoder step: upsample, halve channels, add the skip, refine.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub proj: Conv,
    pub block: ResidualBlock,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub encoder: Vec<EncoderStage>,
    /// Indexed by target stage `s = 0..S-1`.
    pub decoder: Vec<DecoderStage>,
    /// Maps transformer memory (`memory_width` channels) onto the deepest stage.
    pub adapter: Conv,
    pub head: Conv,
}

/// Encoder outputs, finest first: `features[s]` has `stage_channels[s]`
/// channels at `1/2^s` resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<Var>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        *self.features.last().expect("non-empty pyramid")
    }
}

impl Backbone {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &BackboneConfig, memory_width: usize) -> Self {
        let ch = &cfg.stage_channels;
        let stages = ch.len();
        let mut encoder = Vec::with_capacity(stages);
        for (s, &c) in ch.iter().enumerate() {
            let mut pb = pb.sub(&format!("enc{s}"));
            let cin = if s == 0 { 1 } else { ch[s - 1] };
            let down = (s > 0).then(|| Downsample {
                conv: Conv::new(&mut pb, "down", cin, c, ConvGeometry::new(3, 2, 1), false),
                norm: Norm::new(&mut pb, "down_norm", c),
            });
            let first_in = if s == 0 { 1 } else { c };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResidualBlock::new(&mut pb, &format!("block{b}"), if b == 0 { first_in } else { c }, c))
                .collect();
            encoder.push(EncoderStage { down, blocks });
        }
        let decoder = (0..stages - 1)
            .map(|s| {
                let mut pb = pb.sub(&format!("dec{s}"));
                DecoderStage {
                    proj: Conv::pointwise(&mut pb, "proj", ch[s + 1], ch[s], false),
                    block: ResidualBlock::new(&mut pb, "block", ch[s], ch[s]),
                }
            })
            .collect();
        let adapter = Conv::pointwise(pb, "adapter", memory_width, ch[stages - 1], false);
        let head = Conv::pointwise(pb, "head", ch[0], cfg.out_channels, true);
        Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            adapter,
            head,
        }
    }

    /// Runs the encoder on a `[1, D, W, H]` volume.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(x).to_vec();
        let div = self.cfg.divisor();
        if shape.len() != 4 || shape[0] != 1 || shape[1..].iter().any(|&n| n == 0 || n % div != 0) {
            return Err(TensorError::dim(
                "encode",
                format!("input {shape:?} must be [1, D, W, H] with sizes divisible by {div}"),
            )
            .into());
        }
        let mut features = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            if let Some(d) = &stage.down {
                h = d.conv.forward(g, p, h)?;
                h = d.norm.instance(g, p, h)?;
                h = g.relu(h)?;
            }
            for block in &stage.blocks {
                h = block.forward(g, p, h)?;
            }
            features.push(h);
        }
        Ok(FeaturePyramid { features })
    }

    /// Decodes to the `[C2, D, W, H]` pre-segmentation map. `memory` is the
    /// transformer memory on the deepest grid, `[d, D_S, W_S, H_S]`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
        memory: Option<Var>,
    ) -> Result<Var> {
        if pyramid.features.len() != self.encoder.len() {
            return Err(Error::config(format!(
                "pyramid has {} levels, backbone has {}",
                pyramid.features.len(),
                self.encoder.len()
            )));
        }
        let deep = pyramid.deepest();
        let mut adapted = || -> Result<Var> {
            let z = memory.ok_or_else(|| Error::config("fusion mode needs transformer memory"))?;
            self.adapter.forward(g, p, z)
        };
        let mut h = match self.cfg.fusion_mode {
            FusionMode::ModeA => {
                let z = adapted()?;
                g.add(deep, z)?
            }
            FusionMode::ModeB => deep,
            FusionMode::ModeC => adapted()?,
        };
        for s in (0..self.decoder.len()).rev() {
            let step = &self.decoder[s];
            h = g.upsample2x(h)?;
            h = step.proj.forward(g, p, h)?;
            h = g.add(h, pyramid.features[s])?;
            h = step.block.forward(g, p, h)?;
        }
        self.head.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use transdod_tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn build(cfg: &BackboneConfig, d: usize) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg, d);
        (store, bb)
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = BackboneConfig::default();
        let (store, bb) = build(&cfg, 12);
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(random(&[1, 16, 32, 32], 1));
        let pyr = bb.encode(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(pyr.features[1]), &[16, 8, 16, 16]);
        assert_eq!(g.shape(pyr.deepest()), &[64, 2, 4, 4]);
        let bad = g.constant(random(&[1, 12, 32, 32], 1));
        assert!(bb.encode(&mut g, &p, bad).is_err());
    }

    #[test]
    fn zeroed_block_body_passes_skip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResidualBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 3, 3);
        store.get_mut(block.conv2.weight).data_mut().fill(0.0);
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let xt = random(&[3, 4, 4, 4], 2);
        let x = g.constant(xt.clone());
        let y = block.forward(&mut g, &p, x).unwrap();
        let expect: Vec<f64> = xt.data().iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn fusion_modes_shapes_and_identity() {
        let mut cfg = BackboneConfig {
            stage_channels: vec![4, 8, 16],
            ..BackboneConfig::default()
        };
        let x = random(&[1, 8, 8, 8], 3);
        let run = |cfg: &BackboneConfig, z: Tensor<f64>| {
            let (store, bb) = build(cfg, 6);
            let mut g = Graph::inference();
            let p = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let pyr = bb.encode(&mut g, &p, xv).unwrap();
            let zv = g.constant(z);
            let out = bb.decode(&mut g, &p, &pyr, Some(zv)).unwrap();
            g.value(out).clone()
        };
        let zero = Tensor::zeros([6, 2, 2, 2]);
        let a = run(&cfg, zero.clone());
        assert_eq!(a.shape(), &[8, 8, 8, 8]);
        cfg.fusion_mode = FusionMode::ModeB;
        let b0 = run(&cfg, zero);
        let b1 = run(&cfg, random(&[6, 2, 2, 2], 4));
        assert_eq!(a, b0);
        assert_eq!(b0, b1);
        cfg.fusion_mode = FusionMode::ModeC;
        assert_eq!(run(&cfg, random(&[6, 2, 2, 2], 4)).shape(), &[8, 8, 8, 8]);
    }
}
