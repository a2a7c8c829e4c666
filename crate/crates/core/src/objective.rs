//! Dice plus binary cross-entropy over the labeled channels of a task.

use transdod_tensor::ops::sigmoid;
use transdod_tensor::{Backward, BackwardCtx, Graph, Scalar, Tensor, TensorError, Var};

use crate::error::Result;

/// Smoothing term added per voxel to the Dice denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary organ/tumor targets with availability flags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPair<T> {
    /// `[2, D, W, H]`: channel 0 organ (`label >= 1`), channel 1 tumor (`label == 2`).
    pub y: Tensor<T>,
    pub labeled: [bool; 2],
}

impl<T: Scalar> LabelPair<T> {
    pub fn from_labels(labels: &[u8], dims: [usize; 3], organ_labeled: bool, tumor_labeled: bool) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(TensorError::dim("labels", format!("{} labels for grid {dims:?}", labels.len())).into());
        }
        let mut y = vec![T::zero(); 2 * n];
        for (i, &l) in labels.iter().enumerate() {
            if l >= 1 {
                y[i] = T::one();
            }
            if l == 2 {
                y[n + i] = T::one();
            }
        }
        Ok(Self {
            y: Tensor::new([2, dims[0], dims[1], dims[2]], y)?,
            labeled: [organ_labeled, tumor_labeled],
        })
    }
}

fn clamp_prob(s: f64) -> f64 {
    s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `[dice, ce]` of one channel: `2 sum(p y) / sum(p + y + eps)` and the
/// voxel mean of `y ln p + (1 - y) ln(1 - p)`.
pub fn channel_terms<T: Scalar>(logits: &[T], y: &[T], eps: f64) -> [f64; 2] {
    let (mut inter, mut union, mut ce) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(y) {
        let p = clamp_prob(sigmoid(x.as_f64()));
        let t = t.as_f64();
        inter += p * t;
        union += p + t + eps;
        ce += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    [2.0 * inter / union, ce / logits.len() as f64]
}

struct ChannelLossOp<T> {
    y: Vec<T>,
    eps: f64,
}

impl<T: Scalar> Backward<T> for ChannelLossOp<T> {
    fn name(&self) -> &'static str {
        "dice_bce"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let n = x.len() as f64;
        let (gd, gc) = (ctx.grad[0].as_f64(), ctx.grad[1].as_f64());
        let (mut inter, mut union) = (0.0, 0.0);
        for (&xi, &t) in x.iter().zip(&self.y) {
            let p = clamp_prob(sigmoid(xi.as_f64()));
            inter += p * t.as_f64();
            union += p + t.as_f64() + self.eps;
        }
        let dx = x
            .iter()
            .zip(&self.y)
            .map(|(&xi, &t)| {
                let s = sigmoid(xi.as_f64());
                if s <= PROB_CLAMP || s >= 1.0 - PROB_CLAMP {
                    return T::zero();
                }
                let t = t.as_f64();
                let ddice = 2.0 * t / union - 2.0 * inter / (union * union);
                let dce = (t / s - (1.0 - t) / (1.0 - s)) / n;
                T::of((gd * ddice + gc * dce) * s * (1.0 - s))
            })
            .collect();
        vec![Some(dx)]
    }
}

/// Records [`channel_terms`] on the tape; `logits` is one channel of any shape.
pub fn channel_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y: &[T], eps: f64) -> Result<Var> {
    let x = g.value(logits);
    if x.numel() != y.len() || x.numel() == 0 {
        return Err(TensorError::dim("dice_bce", format!("{} logits, {} targets", x.numel(), y.len())).into());
    }
    if !x.is_finite() {
        return Err(TensorError::Evaluation("non-finite logits".into()).into());
    }
    let terms = channel_terms(x.data(), y, eps);
    let out = Tensor::new([2], terms.map(T::of).to_vec())?;
    Ok(g.push_op(out, &[logits], ChannelLossOp { y: y.to_vec(), eps })?)
}

/// Loss of one task prediction and its per-channel parts.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// Dice term per channel, `None` when unlabeled.
    pub dice: [Option<f64>; 2],
    /// Cross-entropy term per channel, `None` when unlabeled.
    pub ce: [Option<f64>; 2],
}

impl LossOutput {
    /// `-sum(dice)`, the Dice share of the loss.
    pub fn dice_loss(&self) -> f64 {
        -self.dice.iter().flatten().sum::<f64>()
    }

    /// `-sum(ce)`, the cross-entropy share of the loss.
    pub fn ce_loss(&self) -> f64 {
        -self.ce.iter().flatten().sum::<f64>()
    }
}

/// `-sum_k (dice_k + ce_k)` over labeled channels of `logits: [2, D, W, H]`.
/// Unlabeled channels never enter the tape, so they receive no gradient.
pub fn masked_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &LabelPair<T>, eps: f64) -> Result<LossOutput> {
    if g.shape(logits) != labels.y.shape() {
        return Err(TensorError::dim(
            "masked_loss",
            format!("logits {:?} vs labels {:?}", g.shape(logits), labels.y.shape()),
        )
        .into());
    }
    let n = labels.y.numel() / 2;
    let mut dice = [None; 2];
    let mut ce = [None; 2];
    let mut total: Option<Var> = None;
    for k in 0..2 {
        if !labels.labeled[k] {
            continue;
        }
        let ch = g.slice_rows(logits, k, 1)?;
        let terms = channel_loss(g, ch, &labels.y.data()[k * n..(k + 1) * n], eps)?;
        let v = g.value(terms).data();
        dice[k] = Some(v[0].as_f64());
        ce[k] = Some(v[1].as_f64());
        let s = g.sum(terms)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => g.scale(t, -T::one())?,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossOutput { total, dice, ce })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_on_background() {
        let x = vec![0.0f64; 10];
        let y = vec![0.0f64; 10];
        let [dice, ce] = channel_terms(&x, &y, DICE_EPS);
        assert_eq!(dice, 0.0);
        assert!((-ce - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn label_pair_channels() {
        let lp = LabelPair::<f32>::from_labels(&[0, 1, 2, 0], [1, 2, 2], true, false).unwrap();
        assert_eq!(lp.y.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(lp.labeled, [true, false]);
    }

    #[test]
    fn no_labeled_channel_is_constant_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([2, 1, 1, 2]));
        let lp = LabelPair::from_labels(&[0, 1], [1, 1, 2], false, false).unwrap();
        let out = masked_loss(&mut g, x, &lp, DICE_EPS).unwrap();
        assert_eq!(g.value(out.total).data(), &[0.0]);
        assert!(g.backward(out.total).unwrap().get(x).is_none());
    }
}
