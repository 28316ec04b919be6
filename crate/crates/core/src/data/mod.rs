//! CT slices, masks, dataset splits and training batches.

mod batches;
mod edge;
pub mod io;
mod resize;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

pub use batches::{multiscale_batches, scaled_dims, MultiScaleBatches, TrainBatch, DEFAULT_RATIOS};
pub use edge::derive_edge_map;
pub use resize::{resize_image, resize_mask, resize_pair};
pub use split::{load_dataset, write_manifest, DatasetSplit, Partition, SplitSpec};

/// Smallest accepted side length for ingested slices.
pub const MIN_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Labeled,
    Unlabeled,
}

/// A 2-D CT slice with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    id: String,
    pixels: Plane<f64>,
    source: Source,
}

impl CtSlice {
    /// Ingests raw intensities, min/max-normalizing them to `[0, 1]`.
    ///
    /// A constant image maps to all zeros.
    pub fn from_raw(id: impl Into<String>, raw: Plane<f64>, source: Source) -> Result<Self> {
        let id = id.into();
        if !raw.is_finite() {
            return Err(Error::Validation(format!(
                "slice `{id}` has non-finite pixels"
            )));
        }
        if raw.height() < MIN_SIDE || raw.width() < MIN_SIDE {
            return Err(Error::Validation(format!(
                "slice `{id}` is {}x{}, need at least {MIN_SIDE}x{MIN_SIDE}",
                raw.height(),
                raw.width()
            )));
        }
        let (lo, hi) = raw
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let pixels = if span > 0.0 {
            raw.map(|v| (v - lo) / span)
        } else {
            raw.map(|_| 0.0)
        };
        Ok(CtSlice { id, pixels, source })
    }

    /// Wraps pixels already in `[0, 1]` (used for resampled copies).
    pub(crate) fn from_normalized(id: String, pixels: Plane<f64>, source: Source) -> Self {
        CtSlice { id, pixels, source }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Plane<f64> {
        &self.pixels
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }
}

/// Strictly binary segmentation or edge mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    id: String,
    values: Plane<u8>,
}

impl BinaryMask {
    pub fn new(id: impl Into<String>, values: Plane<u8>) -> Result<Self> {
        let id = id.into();
        if let Some(v) = values.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask `{id}` has non-binary value {v}"
            )));
        }
        Ok(BinaryMask { id, values })
    }

    /// Maps 0 to background and 255 to foreground; anything else is rejected.
    pub fn from_gray(id: impl Into<String>, gray: &Plane<u8>) -> Result<Self> {
        let id = id.into();
        let mut out = Vec::with_capacity(gray.len());
        for &v in gray.as_slice() {
            match v {
                0 => out.push(0),
                255 => out.push(1),
                other => {
                    return Err(Error::Validation(format!(
                        "mask `{id}` has value {other}, expected 0 or 255"
                    )))
                }
            }
        }
        Ok(BinaryMask {
            id,
            values: Plane::new(gray.height(), gray.width(), out)?,
        })
    }

    /// Foreground wherever `pred` holds.
    pub fn from_predicate<T: Copy>(
        id: impl Into<String>,
        plane: &Plane<T>,
        pred: impl Fn(T) -> bool,
    ) -> Self {
        BinaryMask {
            id: id.into(),
            values: plane.map(|v| u8::from(pred(v))),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &Plane<u8> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn foreground(&self) -> usize {
        self.values.as_slice().iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f64(&self) -> Plane<f64> {
        self.values.map(f64::from)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

pub const BACKGROUND: u8 = 0;
pub const GGO: u8 = 1;
pub const CONSOLIDATION: u8 = 2;

/// Per-pixel labels: background, ground-glass opacity, consolidation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiClassMask {
    id: String,
    values: Plane<u8>,
}

impl MultiClassMask {
    pub fn new(id: impl Into<String>, values: Plane<u8>) -> Result<Self> {
        let id = id.into();
        if let Some(v) = values.as_slice().iter().find(|&&v| v > CONSOLIDATION) {
            return Err(Error::Validation(format!(
                "multi-class mask `{id}` has label {v}, expected 0, 1 or 2"
            )));
        }
        Ok(MultiClassMask { id, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &Plane<u8> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// Indicator mask of one class.
    pub fn indicator(&self, class: u8) -> BinaryMask {
        BinaryMask::from_predicate(self.id.clone(), &self.values, |v| v == class)
    }
}

/// Labeled training/evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub image: CtSlice,
    pub mask: BinaryMask,
}

impl LabeledPair {
    pub fn new(image: CtSlice, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Contract(format!(
                "slice `{}` is {:?} but its mask is {:?}",
                image.id(),
                image.dims(),
                mask.dims()
            )));
        }
        Ok(LabeledPair { image, mask })
    }

    pub fn id(&self) -> &str {
        self.image.id()
    }
}

/// Intensity normalization applied when slices enter the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    /// Keep the `[0, 1]` min/max scaling.
    #[default]
    MinMax,
    /// Standardize with fixed statistics, as expected by pretrained encoders.
    MeanStd { mean: f64, std: f64 },
}

impl Normalization {
    pub fn apply(&self, pixels: &Plane<f64>) -> Plane<f64> {
        match *self {
            Normalization::MinMax => pixels.clone(),
            Normalization::MeanStd { mean, std } => pixels.map(|v| (v - mean) / std),
        }
    }
}
