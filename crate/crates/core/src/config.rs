//! Model hyperparameters with validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the bottleneck of the decoder combines CNN and transformer features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// CNN features plus transformer memory.
    ModeA,
    /// CNN features only.
    ModeB,
    /// Transformer memory only.
    ModeC,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub out_channels: usize,
    pub fusion_mode: FusionMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            out_channels: 8,
            fusion_mode: FusionMode::ModeA,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub levels: usize,
    pub points: usize,
    /// Hidden width of the feed-forward blocks; `4 * d` when absent.
    pub ffn_hidden: Option<usize>,
    /// Residual scale overrides; deep-norm values when absent.
    pub alpha_enc: Option<f64>,
    pub alpha_dec: Option<f64>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d: 192,
            heads: 6,
            enc_layers: 3,
            dec_layers: 3,
            levels: 3,
            points: 4,
            ffn_hidden: None,
            alpha_enc: None,
            alpha_dec: None,
        }
    }
}

/// Deep-norm encoder residual scale `0.81 (N^4 M)^(1/16)`.
pub fn deepnorm_alpha_enc(enc_layers: usize, dec_layers: usize) -> f64 {
    0.81 * ((enc_layers as f64).powi(4) * dec_layers as f64).powf(1.0 / 16.0)
}

/// Deep-norm decoder residual scale `(3 M)^(1/4)`.
pub fn deepnorm_alpha_dec(dec_layers: usize) -> f64 {
    (3.0 * dec_layers as f64).powf(0.25)
}

impl TransformerConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d)
    }

    pub fn alpha_enc(&self) -> f64 {
        self.alpha_enc
            .unwrap_or_else(|| deepnorm_alpha_enc(self.enc_layers, self.dec_layers))
    }

    pub fn alpha_dec(&self) -> f64 {
        self.alpha_dec.unwrap_or_else(|| deepnorm_alpha_dec(self.dec_layers))
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub width: usize,
    pub depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: 8, depth: 3 }
    }
}

/// Number of output channels of every dynamic head (organ, tumor).
pub const HEAD_OUTPUTS: usize = 2;

/// Length of one task's packed dynamic-head vector:
/// `(w*w + w)(depth - 1) + (2w + 2)`.
pub fn dynamic_param_count(width: usize, depth: usize) -> Result<usize> {
    if width == 0 || depth < 2 {
        return Err(Error::config(format!(
            "dynamic head needs width >= 1 and depth >= 2, got ({width}, {depth})"
        )));
    }
    Ok((width * width + width) * (depth - 1) + (width * HEAD_OUTPUTS + HEAD_OUTPUTS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
    /// Number of organ queries (tasks).
    pub num_tasks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            transformer: TransformerConfig::default(),
            head: HeadConfig::default(),
            num_tasks: 7,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every component; used for
    /// whole-model gradient checks on `1x8x8x8` volumes.
    pub fn micro() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: vec![4, 8],
                blocks_per_stage: 1,
                out_channels: 4,
                fusion_mode: FusionMode::ModeA,
            },
            transformer: TransformerConfig {
                d: 12,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                levels: 2,
                points: 2,
                ffn_hidden: Some(24),
                alpha_enc: None,
                alpha_dec: None,
            },
            head: HeadConfig { width: 4, depth: 3 },
            num_tasks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let t = &self.transformer;
        let fail = |m: String| Err(Error::Config(m));
        if b.stage_channels.is_empty() || b.stage_channels.contains(&0) {
            return fail(format!(
                "stage_channels must be non-empty and positive: {:?}",
                b.stage_channels
            ));
        }
        if b.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be >= 1".into());
        }
        if b.out_channels != self.head.width {
            return fail(format!(
                "backbone out_channels ({}) must equal head width ({})",
                b.out_channels, self.head.width
            ));
        }
        if t.d == 0 || t.heads == 0 || t.d % t.heads != 0 {
            return fail(format!(
                "d ({}) must be a positive multiple of heads ({})",
                t.d, t.heads
            ));
        }
        if t.d % 6 != 0 {
            return fail(format!("d ({}) must be divisible by 6", t.d));
        }
        if t.levels == 0 || t.levels > b.stages() {
            return fail(format!("levels ({}) must be in 1..={}", t.levels, b.stages()));
        }
        if t.points == 0 {
            return fail("points must be >= 1".into());
        }
        if t.ffn_hidden() == 0 {
            return fail("ffn_hidden must be >= 1".into());
        }
        if t.enc_layers > 0 && t.alpha_enc().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail(format!("alpha_enc must be positive, got {}", t.alpha_enc()));
        }
        if t.dec_layers > 0 && t.alpha_dec().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail(format!("alpha_dec must be positive, got {}", t.alpha_dec()));
        }
        if self.num_tasks == 0 {
            return fail("num_tasks must be >= 1".into());
        }
        dynamic_param_count(self.head.width, self.head.depth)?;
        Ok(())
    }

    pub fn dynamic_params(&self) -> usize {
        dynamic_param_count(self.head.width, self.head.depth).unwrap_or(0)
    }

    /// Dotted paths of every field whose value differs from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
