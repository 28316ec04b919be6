use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_edge_map, resize_pair, BinaryMask, LabeledPair, Normalization};
use crate::error::{Error, Result};
use crate::par;
use crate::plane::Plane;
use crate::tensor::Tensor;

pub const DEFAULT_RATIOS: [f64; 3] = [0.75, 1.0, 1.25];

/// Every spatial dimension is a multiple of this so five stride-2 stages divide evenly.
pub const DIM_MULTIPLE: usize = 32;

fn round_to_multiple(v: f64) -> usize {
    let m = DIM_MULTIPLE as f64;
    ((v / m).round() as usize).max(1) * DIM_MULTIPLE
}

/// Scales `base` by `ratio`, rounding each side to the nearest multiple of 32.
pub fn scaled_dims(base: (usize, usize), ratio: f64) -> Result<(usize, usize)> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Argument(format!(
            "scaling ratio must be positive, got {ratio}"
        )));
    }
    Ok((
        round_to_multiple(base.0 as f64 * ratio),
        round_to_multiple(base.1 as f64 * ratio),
    ))
}

pub struct TrainBatch {
    pub ids: Vec<String>,
    /// `N x 1 x H x W` network input.
    pub images: Tensor,
    pub masks: Vec<BinaryMask>,
    pub edges: Vec<BinaryMask>,
    pub ratio: f64,
}

impl TrainBatch {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s.h, s.w)
    }

    pub fn from_pairs(
        pairs: &[&LabeledPair],
        dims: (usize, usize),
        ratio: f64,
        norm: Normalization,
    ) -> Result<Self> {
        let prepared = par::map_slice(pairs, |p| -> Result<(Plane<f64>, BinaryMask, BinaryMask)> {
            let (img, mask) = resize_pair(&p.image, &p.mask, dims)?;
            let edge = derive_edge_map(&mask);
            Ok((norm.apply(img.pixels()), mask, edge))
        });
        let mut planes = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        let mut edges = Vec::with_capacity(pairs.len());
        for item in prepared {
            let (p, m, e) = item?;
            planes.push(p);
            masks.push(m);
            edges.push(e);
        }
        Ok(TrainBatch {
            ids: pairs.iter().map(|p| p.id().to_string()).collect(),
            images: Tensor::from_planes(&planes)?,
            masks,
            edges,
            ratio,
        })
    }
}

/// One epoch of shuffled batches; each batch draws one ratio uniformly.
pub struct MultiScaleBatches<'a> {
    pairs: &'a [LabeledPair],
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    base: (usize, usize),
    ratios: Vec<f64>,
    norm: Normalization,
    rng: &'a mut ChaCha8Rng,
}

pub fn multiscale_batches<'a>(
    pairs: &'a [LabeledPair],
    ratios: &[f64],
    base: (usize, usize),
    batch_size: usize,
    norm: Normalization,
    rng: &'a mut ChaCha8Rng,
) -> Result<MultiScaleBatches<'a>> {
    if ratios.is_empty() {
        return Err(Error::Argument(
            "at least one scaling ratio is required".into(),
        ));
    }
    for &r in ratios {
        scaled_dims(base, r)?;
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    Ok(MultiScaleBatches {
        pairs,
        order,
        cursor: 0,
        batch_size,
        base,
        ratios: ratios.to_vec(),
        norm,
        rng,
    })
}

impl Iterator for MultiScaleBatches<'_> {
    type Item = Result<TrainBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let members: Vec<&LabeledPair> = self.order[self.cursor..end]
            .iter()
            .map(|&i| &self.pairs[i])
            .collect();
        self.cursor = end;
        let ratio = self.ratios[self.rng.gen_range(0..self.ratios.len())];
        let dims = match scaled_dims(self.base, ratio) {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };
        Some(TrainBatch::from_pairs(&members, dims, ratio, self.norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticGenerator};
    use rand::SeedableRng;

    #[test]
    fn scaled_dims_round_to_multiples_of_32() {
        assert_eq!(scaled_dims((352, 352), 1.0).unwrap(), (352, 352));
        assert_eq!(scaled_dims((352, 352), 0.75).unwrap(), (256, 256));
        assert_eq!(scaled_dims((352, 352), 1.25).unwrap(), (448, 448));
        assert!(matches!(
            scaled_dims((352, 352), 0.0),
            Err(Error::Argument(_))
        ));
        assert!(scaled_dims((352, 352), -1.0).is_err());
    }

    #[test]
    fn epoch_visits_every_pair_once_with_divisible_dims() {
        let gen = SyntheticGenerator::new(SyntheticConfig {
            size: 64,
            ..Default::default()
        });
        let pairs: Vec<_> = (0..7).map(|i| gen.labeled(i).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = Vec::new();
        for b in multiscale_batches(
            &pairs,
            &DEFAULT_RATIOS,
            (64, 64),
            3,
            Normalization::MinMax,
            &mut rng,
        )
        .unwrap()
        {
            let b = b.unwrap();
            let (h, w) = b.dims();
            assert_eq!((h % 32, w % 32), (0, 0));
            assert_eq!(b.edges.len(), b.masks.len());
            seen.extend(b.ids);
        }
        seen.sort();
        let mut expect: Vec<_> = pairs.iter().map(|p| p.id().to_string()).collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn singleton_ratio_keeps_base_resolution() {
        let gen = SyntheticGenerator::new(SyntheticConfig {
            size: 96,
            ..Default::default()
        });
        let pairs: Vec<_> = (0..4).map(|i| gen.labeled(i).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for b in multiscale_batches(&pairs, &[1.0], (96, 96), 2, Normalization::MinMax, &mut rng)
            .unwrap()
        {
            assert_eq!(b.unwrap().dims(), (96, 96));
        }
    }
}
