//! Procedurally generated CT-like slices with elliptical infection blobs.
//!
//! Used by tests, benches and desk-scale experiments where real scans are not
//! available. Each sample is a pure function of `(seed, stream, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BinaryMask, CtSlice, LabeledPair, MultiClassMask, Source, CONSOLIDATION, GGO};
use crate::error::Result;
use crate::plane::Plane;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub size: usize,
    pub seed: u64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 64,
            seed: 0,
            min_blobs: 1,
            max_blobs: 3,
            noise: 0.05,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn inside(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    cfg: SyntheticConfig,
}

const LABELED: u64 = 1;
const UNLABELED: u64 = 2;

impl SyntheticGenerator {
    pub fn new(cfg: SyntheticConfig) -> Self {
        SyntheticGenerator { cfg }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn rng(&self, stream: u64, index: usize) -> ChaCha8Rng {
        let mix = self
            .cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(index as u64);
        ChaCha8Rng::seed_from_u64(mix)
    }

    /// Raw intensities and class labels for one sample.
    pub fn render(&self, stream: u64, index: usize) -> (Plane<f64>, Plane<u8>) {
        let n = self.cfg.size as f64;
        let mut rng = self.rng(stream, index);
        let lobes = [
            Ellipse {
                cy: n * 0.5,
                cx: n * 0.3,
                ry: n * 0.36,
                rx: n * 0.2,
                cos: 1.0,
                sin: 0.0,
            },
            Ellipse {
                cy: n * 0.5,
                cx: n * 0.7,
                ry: n * 0.36,
                rx: n * 0.2,
                cos: 1.0,
                sin: 0.0,
            },
        ];
        let count = rng.gen_range(self.cfg.min_blobs..=self.cfg.max_blobs.max(self.cfg.min_blobs));
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let lobe = &lobes[rng.gen_range(0..2)];
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let class = if rng.gen_bool(0.5) {
                GGO
            } else {
                CONSOLIDATION
            };
            blobs.push((
                Ellipse {
                    cy: lobe.cy + rng.gen_range(-0.5..0.5) * lobe.ry,
                    cx: lobe.cx + rng.gen_range(-0.5..0.5) * lobe.rx,
                    ry: rng.gen_range(0.06..0.16) * n,
                    rx: rng.gen_range(0.05..0.13) * n,
                    cos: theta.cos(),
                    sin: theta.sin(),
                },
                class,
            ));
        }
        let size = self.cfg.size;
        let mut labels = Plane::filled(size, size, 0u8);
        let mut pixels = Plane::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let in_lung = lobes.iter().any(|l| l.inside(fy, fx));
                let mut v = if in_lung { 0.2 } else { 0.55 };
                let mut label = 0u8;
                if in_lung {
                    for (b, class) in &blobs {
                        if b.inside(fy, fx) {
                            label = label.max(*class);
                        }
                    }
                }
                match label {
                    GGO => v = 0.5 + 0.08 * ((fx * 0.9).sin() * (fy * 0.7).cos()),
                    CONSOLIDATION => v = 0.85,
                    _ => {}
                }
                v += self.cfg.noise * (rng.gen::<f64>() - 0.5) * 2.0;
                pixels.set(y, x, v);
                labels.set(y, x, label);
            }
        }
        (pixels, labels)
    }

    pub fn labeled(&self, index: usize) -> Result<LabeledPair> {
        let (pixels, labels) = self.render(LABELED, index);
        let id = format!("syn_l{index:04}");
        let image = CtSlice::from_raw(id.clone(), pixels, Source::Labeled)?;
        let mask = BinaryMask::from_predicate(id, &labels, |v| v > 0);
        LabeledPair::new(image, mask)
    }

    pub fn unlabeled(&self, index: usize) -> Result<CtSlice> {
        let (pixels, _) = self.render(UNLABELED, index);
        CtSlice::from_raw(format!("syn_u{index:04}"), pixels, Source::Unlabeled)
    }

    /// Ground truth of an unlabeled sample, for measuring pseudo-label quality.
    pub fn unlabeled_truth(&self, index: usize) -> BinaryMask {
        let (_, labels) = self.render(UNLABELED, index);
        BinaryMask::from_predicate(format!("syn_u{index:04}"), &labels, |v| v > 0)
    }

    pub fn multiclass(&self, index: usize) -> Result<(LabeledPair, MultiClassMask)> {
        let (pixels, labels) = self.render(LABELED, index);
        let id = format!("syn_l{index:04}");
        let image = CtSlice::from_raw(id.clone(), pixels, Source::Labeled)?;
        let mask = BinaryMask::from_predicate(id.clone(), &labels, |v| v > 0);
        Ok((
            LabeledPair::new(image, mask)?,
            MultiClassMask::new(id, labels)?,
        ))
    }
}
