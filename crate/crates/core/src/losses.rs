//! Training objective and evaluation metric.
//!
//! The per-head objective is pixel-mean categorical cross entropy plus the
//! soft Dice losses of the kidney and tumor channels; the three supervised
//! heads are summed with unit weights.

use crate::autograd::{BackwardOp, Tape, Var};
use crate::data::Class;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DICE_EPS: f64 = 1e-5;
/// Probabilities below this are clamped inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

fn same_shape(op: &'static str, y: &Tensor, p: &Tensor) -> Result<()> {
    if y.shape() != p.shape() {
        return Err(Error::shape(op, format!("target {:?} vs prediction {:?}", y.shape(), p.shape())));
    }
    Ok(())
}

struct DiceTerms {
    intersection: f64,
    sum_y: f64,
    sum_p: f64,
}

fn dice_terms(y: &[f64], p: &[f64]) -> DiceTerms {
    let mut t = DiceTerms {
        intersection: 0.0,
        sum_y: 0.0,
        sum_p: 0.0,
    };
    for (a, b) in y.iter().zip(p) {
        t.intersection += a * b;
        t.sum_y += a;
        t.sum_p += b;
    }
    t
}

/// `1 − (2·Σ yᵢpᵢ + ε) / (Σ yᵢ + Σ pᵢ + ε)` over every element.
pub fn dice_loss_value(y: &Tensor, p: &Tensor, eps: f64) -> Result<f64> {
    same_shape("dice_loss", y, p)?;
    let t = dice_terms(y.data(), p.data());
    Ok(1.0 - (2.0 * t.intersection + eps) / (t.sum_y + t.sum_p + eps))
}

/// `−(1/N) Σ_pixels Σ_classes y·ln(max(p, 1e-12))` for `[B,C,H,W]` inputs.
pub fn cross_entropy_value(y: &Tensor, p: &Tensor) -> Result<f64> {
    same_shape("cross_entropy", y, p)?;
    let (_, c, _, _) = p.dims4("cross_entropy")?;
    let pixels = (p.len() / c) as f64;
    let s: f64 = y
        .data()
        .iter()
        .zip(p.data())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, q)| t * q.max(LOG_CLAMP).ln())
        .sum();
    Ok(-s / pixels)
}

struct DiceLoss {
    y: Tensor,
    eps: f64,
}

impl BackwardOp for DiceLoss {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let t = dice_terms(self.y.data(), p.data());
        let num = 2.0 * t.intersection + self.eps;
        let den = t.sum_y + t.sum_p + self.eps;
        let g = grad.data()[0];
        let d = self
            .y
            .data()
            .iter()
            .map(|&yi| g * (num - 2.0 * yi * den) / (den * den))
            .collect();
        Ok(vec![Some(Tensor::from_parts(p.shape().to_vec(), d))])
    }
}

struct CrossEntropy {
    y: Tensor,
}

impl BackwardOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let c = p.shape()[1];
        let scale = -grad.data()[0] / (p.len() / c) as f64;
        let d = self
            .y
            .data()
            .iter()
            .zip(p.data())
            .map(|(&t, &q)| if t != 0.0 && q >= LOG_CLAMP { scale * t / q } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::from_parts(p.shape().to_vec(), d))])
    }
}

/// Soft Dice loss of probabilities `p` against the binary target `y`.
pub fn dice_loss(tape: &mut Tape, y: &Tensor, p: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::invalid("dice_loss", format!("epsilon must be positive, got {eps}")));
    }
    let value = dice_loss_value(y, tape.value(p), eps)?;
    tape.record(
        Tensor::scalar(value),
        vec![p],
        Box::new(DiceLoss { y: y.clone(), eps }),
    )
}

/// Pixel-mean categorical cross entropy of channel probabilities `p`.
pub fn cross_entropy(tape: &mut Tape, y: &Tensor, p: Var) -> Result<Var> {
    let value = cross_entropy_value(y, tape.value(p))?;
    tape.record(Tensor::scalar(value), vec![p], Box::new(CrossEntropy { y: y.clone() }))
}

/// One channel of a `[B,C,H,W]` tensor as `[B,1,H,W]`.
pub fn channel_of(t: &Tensor, channel: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4("channel_of")?;
    if channel >= c {
        return Err(Error::shape("channel_of", format!("channel {channel} out of range for {c}")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        out.extend_from_slice(&t.data()[(n * c + channel) * hw..(n * c + channel + 1) * hw]);
    }
    Ok(Tensor::from_parts(vec![b, 1, h, w], out))
}

/// Cross entropy plus kidney and tumor Dice losses for one head.
pub fn combined_loss(tape: &mut Tape, y: &Tensor, p: Var, eps: f64) -> Result<Var> {
    let ce = cross_entropy(tape, y, p)?;
    let mut total = ce;
    for class in [Class::Kidney, Class::Tumor] {
        let pc = tape.select_channel(p, class.id())?;
        let yc = channel_of(y, class.id())?;
        let d = dice_loss(tape, &yc, pc, eps)?;
        total = tape.add(total, d)?;
    }
    Ok(total)
}

/// Value-level [`combined_loss`].
pub fn combined_loss_value(y: &Tensor, p: &Tensor, eps: f64) -> Result<f64> {
    let mut total = cross_entropy_value(y, p)?;
    for class in [Class::Kidney, Class::Tumor] {
        total += dice_loss_value(&channel_of(y, class.id())?, &channel_of(p, class.id())?, eps)?;
    }
    Ok(total)
}

/// Unweighted sum of [`combined_loss`] over every supervised head.
pub fn total_loss(tape: &mut Tape, heads: &[Var], y: &Tensor, eps: f64) -> Result<Var> {
    let (&first, rest) = heads
        .split_first()
        .ok_or_else(|| Error::invalid("total_loss", "no heads"))?;
    let mut total = combined_loss(tape, y, first, eps)?;
    for &head in rest {
        let l = combined_loss(tape, y, head, eps)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Per-pixel argmax over channels of a `[B,C,H,W]` tensor; ties go to the
/// lowest class id. Output is `B·H·W` labels in row-major order.
pub fn argmax_labels(t: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = t.dims4("argmax")?;
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(n * c + ch) * hw + p] > d[(n * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Set counts behind a hard Dice score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn from_labels(pred: &[u8], truth: &[u8], class: u8) -> Self {
        let mut c = DiceCounts::default();
        for (&p, &g) in pred.iter().zip(truth) {
            let (ip, ig) = (p == class, g == class);
            c.predicted += ip as u64;
            c.truth += ig as u64;
            c.intersection += (ip && ig) as u64;
        }
        c
    }

    pub fn merge(&mut self, other: DiceCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// `2|P∩G| / (|P|+|G|)`, defined as 1 when both sets are empty.
    pub fn score(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

fn check_class(class_id: usize) -> Result<u8> {
    if class_id >= crate::data::NUM_CLASSES {
        return Err(Error::invalid("dice_score", format!("class id {class_id} not in 0..{}", crate::data::NUM_CLASSES)));
    }
    Ok(class_id as u8)
}

/// Hard Dice score pooled over the whole batch after channel argmax of
/// both `pred` and the one-hot target `y`.
pub fn dice_score(pred: &Tensor, y: &Tensor, class_id: usize) -> Result<f64> {
    let class = check_class(class_id)?;
    same_shape("dice_score", y, pred)?;
    let (p, g) = (argmax_labels(pred)?, argmax_labels(y)?);
    Ok(DiceCounts::from_labels(&p, &g, class).score())
}

/// Hard Dice score of each batch element separately.
pub fn dice_score_per_image(pred: &Tensor, y: &Tensor, class_id: usize) -> Result<Vec<f64>> {
    let class = check_class(class_id)?;
    same_shape("dice_score", y, pred)?;
    let (b, _, h, w) = pred.dims4("dice_score")?;
    let (p, g) = (argmax_labels(pred)?, argmax_labels(y)?);
    let hw = h * w;
    Ok((0..b)
        .map(|n| DiceCounts::from_labels(&p[n * hw..(n + 1) * hw], &g[n * hw..(n + 1) * hw], class).score())
        .collect())
}

/// Kidney and tumor Dice accumulated over many batches, both pooled and as a
/// mean of per-image scores.
#[derive(Debug, Clone, Default)]
pub struct DiceAccumulator {
    pooled: [DiceCounts; 2],
    per_image: [Vec<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceSummary {
    pub pooled_kidney: f64,
    pub pooled_tumor: f64,
    pub mean_kidney: f64,
    pub mean_tumor: f64,
    pub images: usize,
}

impl DiceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image given as predicted and true label maps.
    pub fn add_labels(&mut self, pred: &[u8], truth: &[u8]) {
        for (slot, class) in [Class::Kidney, Class::Tumor].into_iter().enumerate() {
            let c = DiceCounts::from_labels(pred, truth, class.id() as u8);
            self.pooled[slot].merge(c);
            self.per_image[slot].push(c.score());
        }
    }

    /// Adds every image of a batch of probabilities against one-hot targets.
    pub fn add_batch(&mut self, pred: &Tensor, y: &Tensor) -> Result<()> {
        same_shape("dice_score", y, pred)?;
        let (b, _, h, w) = pred.dims4("dice_score")?;
        let hw = h * w;
        let (p, g) = (argmax_labels(pred)?, argmax_labels(y)?);
        for n in 0..b {
            self.add_labels(&p[n * hw..(n + 1) * hw], &g[n * hw..(n + 1) * hw]);
        }
        Ok(())
    }

    pub fn summary(&self) -> DiceSummary {
        let mean = |v: &Vec<f64>| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        DiceSummary {
            pooled_kidney: self.pooled[0].score(),
            pooled_tumor: self.pooled[1].score(),
            mean_kidney: mean(&self.per_image[0]),
            mean_tumor: mean(&self.per_image[1]),
            images: self.per_image[0].len(),
        }
    }
}
