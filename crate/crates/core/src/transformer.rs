//! Deformable transformer that turns the feature pyramid into one output
//! embedding per organ query.

use transdod_tensor::{Graph, Scalar, Tensor, Var};

use crate::attention::{DeformableAttention, Dims, LevelTokens, SelfAttention};
use crate::backbone::FeaturePyramid;
use crate::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, FeedForward, Linear, Norm, ParamBuilder, ParamId};
use crate::posenc::{encode_positions, grid_coordinates};

/// Standard deviation of learned embeddings (levels, organ queries, initial state).
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

/// Per-forward constants shared by every encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderContext {
    /// Positional plus level embedding per token, `[N, d]`.
    pub query_bias: Var,
    /// Normalized grid coordinate of every token, `[N, 3]`.
    pub refs: Var,
    pub dims: Vec<Dims>,
}

impl EncoderContext {
    fn level_rows(&self) -> impl Iterator<Item = (usize, usize, Dims)> + '_ {
        self.dims.iter().scan(0, |start, &d| {
            let n = d[0] * d[1] * d[2];
            let out = (*start, n, d);
            *start += n;
            Some(out)
        })
    }

    /// Splits `[N, d]` memory into per-level token blocks.
    pub fn split<T: Scalar>(&self, g: &mut Graph<T>, memory: Var) -> Result<Vec<LevelTokens>> {
        self.level_rows()
            .map(|(start, n, dims)| {
                Ok(LevelTokens {
                    tokens: g.slice_rows(memory, start, n)?,
                    dims,
                })
            })
            .collect()
    }
}

impl EncoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &TransformerConfig) -> Self {
        let mut pb = pb.sub(name);
        Self {
            attn: DeformableAttention::new(&mut pb, "attn", cfg.d, cfg.heads, cfg.levels, cfg.points),
            norm1: Norm::new(&mut pb, "norm1", cfg.d),
            ffn: FeedForward::new(&mut pb, "ffn", cfg.d, cfg.ffn_hidden()),
            norm2: Norm::new(&mut pb, "norm2", cfg.d),
        }
    }

    /// Queries carry position and level embeddings, values are the raw tokens.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        ctx: &EncoderContext,
        alpha: f64,
    ) -> Result<Var> {
        let alpha = T::of(alpha);
        let q = g.add(z, ctx.query_bias)?;
        let levels = ctx.split(g, z)?;
        let a = self.attn.forward(g, p, q, ctx.refs, &levels)?;
        let h = g.add_scaled(a, z, alpha)?;
        let h = self.norm1.layer(g, p, h)?;
        let f = self.ffn.forward(g, p, h)?;
        let out = g.add_scaled(f, h, alpha)?;
        self.norm2.layer(g, p, out)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: Norm,
    pub cross: DeformableAttention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            self_attn: SelfAttention::new(&mut pb, "self_attn", cfg.d, cfg.heads)?,
            norm1: Norm::new(&mut pb, "norm1", cfg.d),
            cross: DeformableAttention::new(&mut pb, "cross", cfg.d, cfg.heads, cfg.levels, cfg.points),
            norm2: Norm::new(&mut pb, "norm2", cfg.d),
            ffn: FeedForward::new(&mut pb, "ffn", cfg.d, cfg.ffn_hidden()),
            norm3: Norm::new(&mut pb, "norm3", cfg.d),
        })
    }

    /// `t: [M, d]` organ states, `query_embed: [M, d]`, `refs: [M, 3]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        t: Var,
        query_embed: Var,
        refs: Var,
        memory: &[LevelTokens],
        alpha: f64,
    ) -> Result<Var> {
        if g.shape(t) != g.shape(query_embed) {
            return Err(Error::config(format!(
                "decoder state {:?} does not match query embedding {:?}",
                g.shape(t),
                g.shape(query_embed)
            )));
        }
        let alpha = T::of(alpha);
        let qk = g.add(t, query_embed)?;
        let a = self.self_attn.forward(g, p, qk, qk, t)?;
        let h = g.add_scaled(a, t, alpha)?;
        let h = self.norm1.layer(g, p, h)?;
        let q = g.add(h, query_embed)?;
        let c = self.cross.forward(g, p, q, refs, memory)?;
        let h2 = g.add_scaled(c, h, alpha)?;
        let h2 = self.norm2.layer(g, p, h2)?;
        let f = self.ffn.forward(g, p, h2)?;
        let out = g.add_scaled(f, h2, alpha)?;
        self.norm3.layer(g, p, out)
    }
}

/// Encoder memory and decoder outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Tokens of all levels after the encoder, `[N, d]`, coarsest level first.
    pub memory: Var,
    pub levels: Vec<LevelTokens>,
    /// Organ output embeddings, `[M, d]`.
    pub organs: Var,
    /// Coarsest-level memory folded back onto its grid, `[d, D, W, H]`.
    pub volume: Var,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    /// Pointwise projection to `d` per level, coarsest first.
    pub tokenizer: Vec<Conv>,
    pub level_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub query_embed: ParamId,
    pub init_state: ParamId,
    pub ref_head: Linear,
    pub decoder: Vec<DecoderLayer>,
}

impl Transformer {
    /// `stage_channels` lists the backbone stages finest first; the last
    /// `levels` of them are tokenized.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &TransformerConfig,
        stage_channels: &[usize],
        organs: usize,
    ) -> Result<Self> {
        let (d, levels) = (cfg.d, cfg.levels);
        if levels == 0 || levels > stage_channels.len() {
            return Err(Error::config(format!(
                "{levels} levels requested from {} stages",
                stage_channels.len()
            )));
        }
        let tokenizer = (0..levels)
            .map(|l| {
                let c = stage_channels[stage_channels.len() - 1 - l];
                Conv::pointwise(pb, &format!("tokenizer{l}"), c, d, true)
            })
            .collect();
        let level_embed = pb.normal("level_embed", &[levels, d], EMBED_INIT_STD);
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(pb, &format!("enc{i}"), cfg))
            .collect();
        let query_embed = pb.normal("query_embed", &[organs, d], EMBED_INIT_STD);
        let init_state = pb.normal("init_state", &[organs, d], EMBED_INIT_STD);
        let ref_head = Linear::new(pb, "ref_head", d, 3, true, EMBED_INIT_STD);
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(pb, &format!("dec{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tokenizer,
            level_embed,
            encoder,
            query_embed,
            init_state,
            ref_head,
            decoder,
        })
    }

    /// Flattens the coarsest `levels` pyramid stages into `[N, d]` tokens.
    pub fn tokenize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, Vec<Dims>)> {
        let stages = pyramid.features.len();
        if stages < self.tokenizer.len() {
            return Err(Error::config(format!(
                "pyramid has {stages} stages, {} levels needed",
                self.tokenizer.len()
            )));
        }
        let mut rows = Vec::with_capacity(self.tokenizer.len());
        let mut dims = Vec::with_capacity(self.tokenizer.len());
        for (l, proj) in self.tokenizer.iter().enumerate() {
            let f = pyramid.features[stages - 1 - l];
            let shape = g.shape(f).to_vec();
            let dm = [shape[1], shape[2], shape[3]];
            let x = proj.forward(g, p, f)?;
            let x = g.reshape(x, &[self.cfg.d, dm[0] * dm[1] * dm[2]])?;
            rows.push(g.transpose(x)?);
            dims.push(dm);
        }
        Ok((g.concat_rows(&rows)?, dims))
    }

    /// Builds queries' positional/level offsets and reference points.
    pub fn encoder_context<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, dims: &[Dims]) -> Result<EncoderContext> {
        let d = self.cfg.d;
        let n: usize = dims.iter().map(|x| x[0] * x[1] * x[2]).sum();
        let mut pos = Vec::with_capacity(n * d);
        let mut refs = Vec::with_capacity(n * 3);
        let mut onehot = vec![T::zero(); n * dims.len()];
        let mut row = 0;
        for (l, dm) in dims.iter().enumerate() {
            pos.extend_from_slice(encode_positions::<T>(dm[0], dm[1], dm[2], d)?.data());
            refs.extend_from_slice(grid_coordinates::<T>(dm[0], dm[1], dm[2]).data());
            for _ in 0..dm[0] * dm[1] * dm[2] {
                onehot[row * dims.len() + l] = T::one();
                row += 1;
            }
        }
        let pos = g.constant(Tensor::new([n, d], pos)?);
        let onehot = g.constant(Tensor::new([n, dims.len()], onehot)?);
        let lvl = g.matmul(onehot, p[self.level_embed])?;
        Ok(EncoderContext {
            query_bias: g.add(pos, lvl)?,
            refs: g.constant(Tensor::new([n, 3], refs)?),
            dims: dims.to_vec(),
        })
    }

    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<GeneratorOutput> {
        let (mut memory, dims) = self.tokenize(g, p, pyramid)?;
        let ctx = self.encoder_context(g, p, &dims)?;
        let alpha_enc = self.cfg.alpha_enc();
        for layer in &self.encoder {
            memory = layer.forward(g, p, memory, &ctx, alpha_enc)?;
        }
        let levels = ctx.split(g, memory)?;

        let query_embed = p[self.query_embed];
        let refs = self.ref_head.forward(g, p, query_embed)?;
        let refs = g.sigmoid(refs)?;
        let alpha_dec = self.cfg.alpha_dec();
        let mut t = p[self.init_state];
        for layer in &self.decoder {
            t = layer.forward(g, p, t, query_embed, refs, &levels, alpha_dec)?;
        }

        let coarse = levels[0];
        let z = g.transpose(coarse.tokens)?;
        let [dd, dw, dh] = coarse.dims;
        let volume = g.reshape(z, &[self.cfg.d, dd, dw, dh])?;
        Ok(GeneratorOutput {
            memory,
            levels,
            organs: t,
            volume,
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::config::{deepnorm_alpha_dec, deepnorm_alpha_enc};

    #[test]
    fn deepnorm_constants() {
        assert!((deepnorm_alpha_enc(3, 3) - 1.1418).abs() < 1e-4);
        assert!((deepnorm_alpha_dec(3) - 1.7321).abs() < 1e-4);
    }
}
