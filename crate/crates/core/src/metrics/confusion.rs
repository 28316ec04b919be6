use serde::{Deserialize, Serialize};

use super::check_shapes;
use crate::data::BinaryMask;
use crate::error::{contract, Result};
use crate::plane::ProbabilityMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts with the prediction binarized at `p >= tau`.
    pub fn count(s_p: &ProbabilityMap, g: &BinaryMask, tau: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &gv) in s_p.as_slice().iter().zip(g.values().as_slice()) {
            match (p >= tau, gv == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub dice: f64,
    pub sen: f64,
    pub spec: f64,
    pub prec: f64,
}

/// `num / den`, or 1 when both compared sets are empty and 0 otherwise.
fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl From<ConfusionCounts> for ConfusionMetrics {
    fn from(c: ConfusionCounts) -> Self {
        let pred_pos = c.tp + c.fp;
        let gt_pos = c.tp + c.fn_;
        let pred_neg = c.tn + c.fn_;
        let gt_neg = c.tn + c.fp;
        ConfusionMetrics {
            dice: ratio(
                2 * c.tp,
                2 * c.tp + c.fp + c.fn_,
                pred_pos == 0 && gt_pos == 0,
            ),
            sen: ratio(c.tp, gt_pos, pred_pos == 0),
            spec: ratio(c.tn, gt_neg, pred_neg == 0),
            prec: ratio(c.tp, pred_pos, gt_pos == 0),
        }
    }
}

/// Dice, sensitivity, specificity and precision at threshold `tau`.
pub fn confusion_metrics(
    s_p: &ProbabilityMap,
    g: &BinaryMask,
    tau: f64,
) -> Result<ConfusionMetrics> {
    contract!(tau > 0.0 && tau < 1.0, "threshold {tau} outside (0, 1)");
    check_shapes(s_p, g)?;
    Ok(ConfusionCounts::count(s_p, g, tau).into())
}
