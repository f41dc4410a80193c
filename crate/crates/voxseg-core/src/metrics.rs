//! Segmentation reporting metrics over predicted and ground-truth label
//! grids: per-class one-vs-rest confusion counts and the accuracy, IoU,
//! Dice, precision, sensitivity, and specificity ratios derived from them,
//! plus the binary cross-entropy and soft-Dice reporting losses.
//!
//! Counting is exact integer arithmetic; each ratio performs a single
//! division in f64. Empty-vs-empty masks score 1.0 (an absent class
//! correctly predicted absent is a success), and degenerate denominators in
//! precision/sensitivity/specificity likewise score 1.0.

use alloc::format;
use alloc::string::String;

use crate::tensor::{LabelGrid, Real, Tensor};

/// Tumor-class labels are 1..=3; background 0 is excluded from macro
/// averages.
pub const CLASS_NAMES: [&str; 4] = ["background", "necrotic", "edema", "enhancing"];
pub const TUMOR_CLASSES: [u8; 3] = [1, 2, 3];
pub const NUM_CLASSES: usize = 4;

/// Clamp bound used by the reporting binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Smoothing used by the reporting soft-Dice.
pub const SOFT_DICE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    ShapeMismatch(String),
    BadLabel(u8),
    EmptyGrid,
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            MetricsError::BadLabel(v) => write!(f, "label {v} outside 0..=3"),
            MetricsError::EmptyGrid => write!(f, "empty label grid"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// One-vs-rest voxel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn check_labels(grid: &LabelGrid) -> Result<(), MetricsError> {
    match grid.data().iter().find(|&&v| v > 3) {
        Some(&bad) => Err(MetricsError::BadLabel(bad)),
        None => Ok(()),
    }
}

fn check_same_shape(pred: &LabelGrid, truth: &LabelGrid) -> Result<(), MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(format!(
            "pred {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

pub fn confusion_counts(
    pred: &LabelGrid,
    truth: &LabelGrid,
    class_id: u8,
) -> Result<ConfusionCounts, MetricsError> {
    check_same_shape(pred, truth)?;
    check_labels(pred)?;
    check_labels(truth)?;
    if class_id > 3 {
        return Err(MetricsError::BadLabel(class_id));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == class_id, t == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// (TP + TN) / total.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyGrid);
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// TP / (TP + FP); 1.0 when nothing was predicted positive.
pub fn precision(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// TP / (TP + FN); 1.0 when the class is absent from the truth.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// TN / (TN + FP); 1.0 when everything is truly positive.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    let den = c.tn + c.fp;
    if den == 0 {
        1.0
    } else {
        c.tn as f64 / den as f64
    }
}

fn iou_from_counts(c: &ConfusionCounts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

fn dice_from_counts(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// Intersection over union of the class masks; 1.0 when both are empty.
pub fn iou(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Result<f64, MetricsError> {
    Ok(iou_from_counts(&confusion_counts(pred, truth, class_id)?))
}

/// 2|A and B| / (|A| + |B|); 1.0 when both masks are empty.
pub fn dice(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Result<f64, MetricsError> {
    Ok(dice_from_counts(&confusion_counts(pred, truth, class_id)?))
}

/// Binary cross-entropy, `-(1/N) sum y ln p + (1-y) ln(1-p)`, probabilities
/// clamped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(probs: &[f64], truth: &[bool]) -> Result<f64, MetricsError> {
    if probs.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} probabilities vs {} truth voxels",
            probs.len(),
            truth.len()
        )));
    }
    if probs.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let mut acc = 0.0f64;
    for (&p, &y) in probs.iter().zip(truth) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc += if y {
            libm::log(p)
        } else {
            libm::log(1.0 - p)
        };
    }
    Ok(-acc / probs.len() as f64)
}

/// Eq. 2-7 values for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl ClassMetrics {
    fn from_counts(c: &ConfusionCounts) -> Result<Self, MetricsError> {
        Ok(ClassMetrics {
            accuracy: accuracy(c)?,
            iou: iou_from_counts(c),
            dice: dice_from_counts(c),
            precision: precision(c),
            sensitivity: sensitivity(c),
            specificity: specificity(c),
        })
    }
}

/// Per-tumor-class metrics, their macro average (background excluded), and
/// the reporting losses. `dsc_accuracy` is the macro soft-Dice over tumor
/// classes; `dice_loss` is its complement `1 - dsc_accuracy`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: [ClassMetrics; 3],
    pub macro_avg: ClassMetrics,
    pub bce_loss: f64,
    pub dice_loss: f64,
    pub dsc_accuracy: f64,
}

/// Running sums for aggregation across samples: all counts and soft sums are
/// added first, ratios are taken once at the end.
#[derive(Clone, Debug, Default)]
pub struct ReportAccumulator {
    counts: [ConfusionCounts; 3],
    soft_inter: [f64; 3],
    soft_pred: [f64; 3],
    soft_truth: [f64; 3],
    bce_sum: f64,
    voxels: u64,
}

impl ReportAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one sample in. `probs` is `[4, D, H, W]` softmax output aligned
    /// with the label grids.
    pub fn add_sample<E: Real>(
        &mut self,
        pred: &LabelGrid,
        truth: &LabelGrid,
        probs: &Tensor<E>,
    ) -> Result<(), MetricsError> {
        check_same_shape(pred, truth)?;
        let voxels = truth.len();
        if probs.shape().len() != 4
            || probs.shape()[0] != NUM_CLASSES
            || probs.shape()[1..] != [truth.shape()[0], truth.shape()[1], truth.shape()[2]]
        {
            return Err(MetricsError::ShapeMismatch(format!(
                "probs {:?} vs labels {:?}",
                probs.shape(),
                truth.shape()
            )));
        }
        for (slot, &class_id) in TUMOR_CLASSES.iter().enumerate() {
            let c = confusion_counts(pred, truth, class_id)?;
            self.counts[slot].merge(&c);

            let channel = &probs.data()[class_id as usize * voxels..(class_id as usize + 1) * voxels];
            for (&p, &t) in channel.iter().zip(truth.data()) {
                let p = p.to_f64();
                let y = t == class_id;
                if y {
                    self.soft_inter[slot] += p;
                    self.soft_truth[slot] += 1.0;
                }
                self.soft_pred[slot] += p;
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                self.bce_sum += if y {
                    libm::log(pc)
                } else {
                    libm::log(1.0 - pc)
                };
            }
        }
        self.voxels += voxels as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport, MetricsError> {
        if self.voxels == 0 {
            return Err(MetricsError::EmptyGrid);
        }
        let mut per_class = [ClassMetrics::default(); 3];
        let mut macro_avg = ClassMetrics::default();
        let mut soft_dice_sum = 0.0;
        for slot in 0..3 {
            per_class[slot] = ClassMetrics::from_counts(&self.counts[slot])?;
            macro_avg.accuracy += per_class[slot].accuracy / 3.0;
            macro_avg.iou += per_class[slot].iou / 3.0;
            macro_avg.dice += per_class[slot].dice / 3.0;
            macro_avg.precision += per_class[slot].precision / 3.0;
            macro_avg.sensitivity += per_class[slot].sensitivity / 3.0;
            macro_avg.specificity += per_class[slot].specificity / 3.0;
            soft_dice_sum += (2.0 * self.soft_inter[slot] + SOFT_DICE_EPSILON)
                / (self.soft_pred[slot] + self.soft_truth[slot] + SOFT_DICE_EPSILON);
        }
        let dsc_accuracy = soft_dice_sum / 3.0;
        // bce_sum spans the three one-vs-rest passes.
        let bce = -self.bce_sum / (3.0 * self.voxels as f64);
        Ok(MetricsReport {
            per_class,
            macro_avg,
            bce_loss: bce,
            dice_loss: 1.0 - dsc_accuracy,
            dsc_accuracy,
        })
    }
}

/// Single-sample report: per-class Eq. 2-7 for the tumor classes, macro
/// average, and losses.
pub fn report<E: Real>(
    pred: &LabelGrid,
    truth: &LabelGrid,
    probs: &Tensor<E>,
) -> Result<MetricsReport, MetricsError> {
    let mut acc = ReportAccumulator::new();
    acc.add_sample(pred, truth, probs)?;
    acc.finish()
}
