//! Segmentation quality metrics for a probability map against a binary mask.

mod confusion;
mod enhanced;
mod report;
mod structure;

pub use confusion::{confusion_metrics, ConfusionCounts, ConfusionMetrics};
pub use enhanced::{e_measure_at, e_measure_mean, E_THRESHOLDS};
pub use report::{
    evaluate_dir, evaluate_pairs, ImageMetrics, MetricConfig, MetricsReport, CSV_HEADER,
};
pub use structure::s_measure;

use crate::data::BinaryMask;
use crate::error::{contract, Result};
use crate::plane::ProbabilityMap;

pub(crate) fn check_shapes(s_p: &ProbabilityMap, g: &BinaryMask) -> Result<()> {
    contract!(
        s_p.dims() == g.dims(),
        "prediction {:?} and ground truth {:?} differ in shape",
        s_p.dims(),
        g.dims()
    );
    Ok(())
}

pub(crate) fn check_unit_range(s_p: &ProbabilityMap) -> Result<()> {
    contract!(
        s_p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
        "prediction values must lie in [0, 1]"
    );
    Ok(())
}

/// Mean absolute error `sum |S_p - G| / (w h)`.
pub fn mae(s_p: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    check_shapes(s_p, g)?;
    let total: f64 = s_p
        .as_slice()
        .iter()
        .zip(g.values().as_slice())
        .map(|(&p, &gv)| (p - f64::from(gv)).abs())
        .sum();
    Ok(total / s_p.len() as f64)
}
