//! Supervised training and inference for the segmentation network.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{
    multiscale_batches, CtSlice, LabeledPair, Normalization, TrainBatch, DEFAULT_RATIOS,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::{InfNet, ModelConfig, PredictionBundle};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::plane::{Plane, ProbabilityMap};
use crate::tensor::Tensor;

/// Per-step loss breakdown appended as CSV rows.
pub struct LossLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{}", b.csv_row(step)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub ratios: Vec<f64>,
    pub norm: Normalization,
    /// Slices per inference batch.
    pub predict_batch: usize,
}

impl TrainerConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainerConfig {
            model,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            ratios: DEFAULT_RATIOS.to_vec(),
            norm: Normalization::MinMax,
            predict_batch: 8,
        }
    }
}

/// Network, weights and optimizer state bundled for training and inference.
pub struct Trainer {
    cfg: TrainerConfig,
    net: InfNet,
    store: ParamStore,
    opt: Adam,
    step: usize,
    log: Option<LossLog>,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, seed: u64) -> Result<Self> {
        cfg.loss.validate()?;
        let (net, store) = InfNet::build(&cfg.model, seed)?;
        Ok(Trainer {
            opt: Adam::new(cfg.optimizer),
            cfg,
            net,
            store,
            step: 0,
            log: None,
        })
    }

    /// Rebuilds a trainer around existing weights.
    pub fn from_store(cfg: TrainerConfig, store: &ParamStore) -> Result<Self> {
        let mut t = Trainer::new(cfg, 0)?;
        t.store.load_from(store)?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn net(&self) -> &InfNet {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn set_log(&mut self, log: Option<LossLog>) {
        self.log = log;
    }

    pub fn flush_log(&mut self) -> Result<()> {
        self.log.as_mut().map_or(Ok(()), LossLog::flush)
    }

    pub fn reset_optimizer(&mut self) {
        self.opt.reset();
    }

    /// Loss of one batch, without touching the weights.
    pub fn batch_loss(&self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let bundle = self.net.predict(&self.store, &batch.images)?;
        Ok(total_loss(&bundle, &batch.masks, &batch.edges, &self.cfg.loss)?.breakdown)
    }

    /// One forward/backward pass and optimizer update.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let dims = batch.dims();
        let grads = {
            let mut tape = Tape::new(&self.store);
            let x = tape.input(batch.images.clone());
            let vars = self.net.forward(&mut tape, x)?;
            let bundle = PredictionBundle::from_tape(&tape, &vars, dims);
            let loss = total_loss(&bundle, &batch.masks, &batch.edges, &self.cfg.loss)?;
            if !loss.breakdown.total.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite loss at step {}",
                    self.step
                )));
            }
            let g = loss.grads;
            let mut seeds = vec![(vars.s_g, g.s_g)];
            for (var, grad) in [
                (vars.s5, g.s5),
                (vars.s4, g.s4),
                (vars.s3, g.s3),
                (vars.s_e, g.s_e),
            ] {
                if let (Some(v), Some(t)) = (var, grad) {
                    seeds.push((v, t));
                }
            }
            (
                tape.backward(seeds)?.for_params(&self.store),
                loss.breakdown,
            )
        };
        let (param_grads, breakdown) = grads;
        self.opt.step(&mut self.store, &param_grads);
        self.step += 1;
        if let Some(log) = self.log.as_mut() {
            log.append(self.step, &breakdown)?;
        }
        Ok(breakdown)
    }

    /// One shuffled multi-scale pass over `pairs`; returns the mean total loss.
    pub fn train_epoch(
        &mut self,
        pairs: &[LabeledPair],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Argument("cannot train on an empty set".into()));
        }
        let ratios = self.cfg.ratios.clone();
        let batches = multiscale_batches(
            pairs,
            &ratios,
            self.cfg.model.input_size,
            batch_size,
            self.cfg.norm,
            rng,
        )?;
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batches {
            let batch = batch?;
            let n = batch.ids.len();
            sum += self.train_step(&batch)?.total * n as f64;
            count += n;
        }
        Ok(sum / count as f64)
    }

    /// Runs `epochs` epochs and returns the per-epoch mean losses.
    pub fn fit(
        &mut self,
        pairs: &[LabeledPair],
        epochs: usize,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        (0..epochs)
            .map(|_| self.train_epoch(pairs, batch_size, rng))
            .collect()
    }

    /// Mean total loss at the base input size.
    pub fn eval_loss(&self, pairs: &[LabeledPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut sum = 0.0;
        for chunk in pairs.chunks(self.cfg.predict_batch.max(1)) {
            let refs: Vec<&LabeledPair> = chunk.iter().collect();
            let batch =
                TrainBatch::from_pairs(&refs, self.cfg.model.input_size, 1.0, self.cfg.norm)?;
            sum += self.batch_loss(&batch)?.total * chunk.len() as f64;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Final probability maps, resampled back to each slice's own size.
    pub fn predict(&self, slices: &[&CtSlice]) -> Result<Vec<ProbabilityMap>> {
        let (h, w) = self.cfg.model.input_size;
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(self.cfg.predict_batch.max(1)) {
            let planes: Vec<Plane<f64>> = chunk
                .iter()
                .map(|s| self.cfg.norm.apply(&s.pixels().resize_bilinear(h, w)))
                .collect();
            let bundle = self
                .net
                .predict(&self.store, &Tensor::from_planes(&planes)?)?;
            for (i, s) in chunk.iter().enumerate() {
                let (sh, sw) = s.dims();
                let p = bundle
                    .probability(i)
                    .resize_bilinear(sh, sw)
                    .map(|v| v.clamp(0.0, 1.0));
                out.push(p);
            }
        }
        Ok(out)
    }
}
