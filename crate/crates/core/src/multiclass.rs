//! Infection-guided multi-class labeling: a small segmentation head over the
//! CT slice stacked with the binary network's infection probability map.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{CtSlice, MultiClassMask, CONSOLIDATION, GGO};
use crate::error::{contract, Error, Result};
use crate::metrics::{ImageMetrics, MetricConfig, CSV_HEADER};
use crate::nn::{Conv2d, Init, ParamBuilder, ParamStore};
use crate::optim::{Optimizer, Sgd, SgdConfig};
use crate::par;
use crate::plane::{Plane, ProbabilityMap};
use crate::resample;
use crate::tensor::{ConvGeometry, Shape, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const CHECKPOINT_KIND: &str = "multiclass";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Strided convolutions, a 1x1 classifier and bilinear upsampling.
    Fcn,
    /// Two-level encoder-decoder with skip concatenation.
    EncoderDecoder,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(HeadKind::Fcn),
            "encdec" | "encoder-decoder" => Ok(HeadKind::EncoderDecoder),
            other => Err(Error::Argument(format!(
                "unknown multiclass head `{other}` (fcn, encdec)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub head: HeadKind,
    pub width: usize,
    /// Every input is resampled to this size before the head.
    pub input_size: (usize, usize),
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            head: HeadKind::Fcn,
            width: 16,
            input_size: (512, 512),
            sgd: SgdConfig {
                lr: 1e-10,
                momentum: 0.99,
                weight_decay: 5e-4,
            },
            epochs: 100,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Argument(format!(
                "multiclass input {h}x{w} must be positive multiples of 4"
            )));
        }
        if self.width == 0 || self.batch_size == 0 {
            return Err(Error::Argument(
                "multiclass width and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

enum Head {
    Fcn {
        c1: Conv2d,
        c2: Conv2d,
        c3: Conv2d,
        classifier: Conv2d,
    },
    EncoderDecoder {
        e1: Conv2d,
        e2: Conv2d,
        e3: Conv2d,
        d2: Conv2d,
        d1: Conv2d,
        classifier: Conv2d,
    },
}

impl Head {
    fn new(kind: HeadKind, w: usize, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let k3 = ConvGeometry::same(3);
        let k1 = ConvGeometry::new(1, 1, 0);
        Ok(match kind {
            HeadKind::Fcn => Head::Fcn {
                c1: pb.conv("c1", 2, w, k3, true)?,
                c2: pb.conv("c2", w, 2 * w, ConvGeometry::new(3, 2, 1), true)?,
                c3: pb.conv("c3", 2 * w, 2 * w, ConvGeometry::new(3, 2, 1), true)?,
                classifier: pb.conv("classifier", 2 * w, NUM_CLASSES, k1, true)?,
            },
            HeadKind::EncoderDecoder => Head::EncoderDecoder {
                e1: pb.conv("e1", 2, w, k3, true)?,
                e2: pb.conv("e2", w, 2 * w, k3, true)?,
                e3: pb.conv("e3", 2 * w, 4 * w, k3, true)?,
                d2: pb.conv("d2", 6 * w, 2 * w, k3, true)?,
                d1: pb.conv("d1", 3 * w, w, k3, true)?,
                classifier: pb.conv("classifier", w, NUM_CLASSES, k1, true)?,
            },
        })
    }

    /// Class logits at input resolution.
    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        match self {
            Head::Fcn {
                c1,
                c2,
                c3,
                classifier,
            } => {
                let h = c1.forward_relu(tape, x)?;
                let h = c2.forward_relu(tape, h)?;
                let h = c3.forward_relu(tape, h)?;
                let logits = classifier.forward(tape, h)?;
                Ok(tape.resize(logits, s.h, s.w))
            }
            Head::EncoderDecoder {
                e1,
                e2,
                e3,
                d2,
                d1,
                classifier,
            } => {
                let a1 = e1.forward_relu(tape, x)?;
                let p1 = tape.avg_pool(a1, 2)?;
                let a2 = e2.forward_relu(tape, p1)?;
                let p2 = tape.avg_pool(a2, 2)?;
                let a3 = e3.forward_relu(tape, p2)?;
                let u2 = tape.resize(a3, s.h / 2, s.w / 2);
                let cat2 = tape.concat(&[u2, a2])?;
                let b2 = d2.forward_relu(tape, cat2)?;
                let u1 = tape.resize(b2, s.h, s.w);
                let cat1 = tape.concat(&[u1, a1])?;
                let b1 = d1.forward_relu(tape, cat1)?;
                classifier.forward(tape, b1)
            }
        }
    }
}

/// A CT slice, its infection probability map and the class labels.
#[derive(Clone, Debug)]
pub struct McSample {
    pub image: CtSlice,
    pub guidance: ProbabilityMap,
    pub labels: MultiClassMask,
}

impl McSample {
    pub fn new(image: CtSlice, guidance: ProbabilityMap, labels: MultiClassMask) -> Result<Self> {
        if image.dims() != guidance.dims() || image.dims() != labels.dims() {
            return Err(Error::Validation(format!(
                "{}: image {:?}, guidance {:?} and labels {:?} must share dims",
                image.id(),
                image.dims(),
                guidance.dims(),
                labels.dims()
            )));
        }
        Ok(McSample {
            image,
            guidance,
            labels,
        })
    }
}

/// Softmax cross-entropy averaged over all pixels of the batch, with its
/// gradient with respect to `logits` (`N x 3 x H x W`).
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[Plane<u8>]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    contract!(
        s.c == NUM_CLASSES,
        "expected {NUM_CLASSES} class channels, got {}",
        s.c
    );
    contract!(
        targets.len() == s.n,
        "{} targets for a batch of {}",
        targets.len(),
        s.n
    );
    let hw = s.plane_len();
    let count = (s.n * hw) as f64;
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    for (n, t) in targets.iter().enumerate() {
        contract!(
            t.dims() == (s.h, s.w),
            "target {:?} does not match logits {}x{}",
            t.dims(),
            s.h,
            s.w
        );
        let x = logits.sample(n).to_vec();
        let g = &mut grad.data_mut()[n * s.sample_len()..(n + 1) * s.sample_len()];
        for (i, &label) in t.as_slice().iter().enumerate() {
            let z = [x[i], x[hw + i], x[2 * hw + i]];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = z.map(|v| (v - m).exp());
            let sum: f64 = e.iter().sum();
            loss += sum.ln() + m - z[label as usize];
            for c in 0..NUM_CLASSES {
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                g[c * hw + i] = (e[c] / sum - onehot) / count;
            }
        }
    }
    Ok((loss / count, grad))
}

/// Per-pixel argmax over the class channels of sample `n`; ties go to the
/// lower class index.
pub fn argmax_labels(logits: &Tensor, n: usize) -> Plane<u8> {
    let s = logits.shape();
    let hw = s.plane_len();
    let x = logits.sample(n);
    let data = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..s.c {
                if x[c * hw + i] > x[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Plane::new(s.h, s.w, data).expect("plane sized from tensor")
}

pub struct McModel {
    cfg: McConfig,
    head: Head,
    store: ParamStore,
    opt: Sgd,
}

impl McModel {
    pub fn new(cfg: McConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let head = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, Init::XavierUniform);
            Head::new(cfg.head, cfg.width, &mut pb.sub("head"))?
        };
        Ok(McModel {
            opt: Sgd::new(cfg.sgd),
            cfg,
            head,
            store,
        })
    }

    pub fn config(&self) -> &McConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut m = McModel::new(ck.config_as()?)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }

    /// Two-channel input at the head's resolution.
    fn input(&self, image: &CtSlice, guidance: &ProbabilityMap) -> Result<Tensor> {
        let (h, w) = self.cfg.input_size;
        let planes = [
            image.pixels().resize_bilinear(h, w),
            guidance.resize_bilinear(h, w),
        ];
        Tensor::from_planes(&planes)?.reshape(Shape::new(1, 2, h, w))
    }

    fn target(&self, labels: &MultiClassMask) -> Plane<u8> {
        let (h, w) = self.cfg.input_size;
        let (sh, sw) = labels.dims();
        Plane::new(
            h,
            w,
            resample::nearest(labels.values().as_slice(), sh, sw, h, w),
        )
        .expect("resized plane")
    }

    fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(input.clone());
        let out = self.head.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// One SGD step on a prepared batch; returns the batch loss.
    fn step(&mut self, inputs: &[&Tensor], targets: &[Plane<u8>]) -> Result<f64> {
        let batch = Tensor::concat_batch(inputs)?;
        let (loss, grads) = {
            let mut tape = Tape::new(&self.store);
            let x = tape.input(batch);
            let out = self.head.forward(&mut tape, x)?;
            let (loss, g) = softmax_cross_entropy(tape.value(out), targets)?;
            (loss, tape.backward(vec![(out, g)])?.for_params(&self.store))
        };
        self.opt.step(&mut self.store, &grads);
        Ok(loss)
    }

    /// Class labels for one slice at the slice's own resolution.
    pub fn infer(&self, image: &CtSlice, guidance: &ProbabilityMap) -> Result<MultiClassMask> {
        contract!(
            image.dims() == guidance.dims(),
            "guidance {:?} does not match slice {:?}",
            guidance.dims(),
            image.dims()
        );
        let logits = self.logits(&self.input(image, guidance)?)?;
        let (h, w) = image.dims();
        let back = logits.resize_bilinear(h, w);
        MultiClassMask::new(image.id(), argmax_labels(&back, 0))
    }
}

/// Trains a fresh head on `samples`; returns it with its per-epoch loss curve.
pub fn guided_train(samples: &[McSample], cfg: &McConfig) -> Result<(McModel, Vec<f64>)> {
    let mut model = McModel::new(cfg.clone())?;
    let curve = continue_training(&mut model, samples, cfg.epochs)?;
    Ok((model, curve))
}

/// Further epochs on an existing head.
pub fn continue_training(
    model: &mut McModel,
    samples: &[McSample],
    epochs: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "multiclass training needs at least one sample".into(),
        ));
    }
    let prepared = par::map_slice(samples, |s| -> Result<(Tensor, Plane<u8>)> {
        Ok((model.input(&s.image, &s.guidance)?, model.target(&s.labels)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(model.cfg.batch_size) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &prepared[i].0).collect();
            let targets: Vec<Plane<u8>> = chunk.iter().map(|&i| prepared[i].1.clone()).collect();
            sum += model.step(&inputs, &targets)? * chunk.len() as f64;
            n += chunk.len();
        }
        curve.push(sum / n as f64);
    }
    Ok(curve)
}

pub fn guided_infer(
    image: &CtSlice,
    guidance: &ProbabilityMap,
    model: &McModel,
) -> Result<MultiClassMask> {
    model.infer(image, guidance)
}

/// Binary metric suites for each infection class and their unweighted mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub ggo: ImageMetrics,
    pub consolidation: ImageMetrics,
    pub average: ImageMetrics,
}

pub fn per_class_metrics(
    pred: &MultiClassMask,
    gt: &MultiClassMask,
    cfg: &MetricConfig,
) -> Result<ClassTable> {
    contract!(
        pred.dims() == gt.dims(),
        "prediction {:?} and ground truth {:?} differ in shape",
        pred.dims(),
        gt.dims()
    );
    let suite = |class: u8| {
        ImageMetrics::compute(&pred.indicator(class).to_f64(), &gt.indicator(class), cfg)
    };
    let ggo = suite(GGO)?;
    let consolidation = suite(CONSOLIDATION)?;
    Ok(ClassTable {
        ggo,
        consolidation,
        average: ImageMetrics::mean([&ggo, &consolidation]),
    })
}

pub const CLASS_BLOCKS: [&str; 3] = ["ggo", "consolidation", "average"];

pub fn class_table_header() -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for block in CLASS_BLOCKS {
        h.extend(CSV_HEADER[1..].iter().map(|m| format!("{block}_{m}")));
    }
    h
}

/// Wide CSV with one GGO / consolidation / average block per row and a final
/// `MEAN` row averaging every column over images.
pub fn class_table_csv(rows: &[(String, ClassTable)]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(class_table_header()).map_err(csv_err)?;
    let record = |id: &str, t: &ClassTable| {
        let mut r = vec![id.to_string()];
        for m in [t.ggo, t.consolidation, t.average] {
            r.extend(m.values().iter().map(f64::to_string));
        }
        r
    };
    for (id, t) in rows {
        w.write_record(record(id, t)).map_err(csv_err)?;
    }
    let mean = ClassTable {
        ggo: ImageMetrics::mean(rows.iter().map(|(_, t)| &t.ggo)),
        consolidation: ImageMetrics::mean(rows.iter().map(|(_, t)| &t.consolidation)),
        average: ImageMetrics::mean(rows.iter().map(|(_, t)| &t.average)),
    };
    w.write_record(record("MEAN", &mean)).map_err(csv_err)?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_class_table(path: &Path, rows: &[(String, ClassTable)]) -> Result<()> {
    std::fs::write(path, class_table_csv(rows)?).map_err(|e| Error::io(path, e))
}

/// RGB overlay of the labels on the slice: GGO red, consolidation green.
pub fn render_overlay(image: &CtSlice, labels: &MultiClassMask) -> Result<Vec<u8>> {
    contract!(
        image.dims() == labels.dims(),
        "labels {:?} do not match slice {:?}",
        labels.dims(),
        image.dims()
    );
    let mut rgb = Vec::with_capacity(image.pixels().len() * 3);
    for (&v, &l) in image
        .pixels()
        .as_slice()
        .iter()
        .zip(labels.values().as_slice())
    {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&match l {
            GGO => [255, 0, 0],
            CONSOLIDATION => [0, 255, 0],
            _ => [g, g, g],
        });
    }
    Ok(rgb)
}
