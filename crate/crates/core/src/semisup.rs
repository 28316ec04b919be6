//! Pseudo-label propagation over an unlabeled pool and the two-step
//! pretrain / fine-tune schedule.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, CtSlice, LabeledPair};
use crate::error::{Error, Result};
use crate::plane::ProbabilityMap;
use crate::train::Trainer;

/// What the propagation loop needs from a model.
pub trait Segmenter {
    fn predict(&self, slices: &[&CtSlice]) -> Result<Vec<ProbabilityMap>>;

    /// One pass over `pairs`; returns the mean training loss.
    fn train_epoch(
        &mut self,
        pairs: &[LabeledPair],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64>;

    fn eval_loss(&self, pairs: &[LabeledPair]) -> Result<f64>;

    fn reset_optimizer(&mut self) {}
}

impl Segmenter for Trainer {
    fn predict(&self, slices: &[&CtSlice]) -> Result<Vec<ProbabilityMap>> {
        Trainer::predict(self, slices)
    }

    fn train_epoch(
        &mut self,
        pairs: &[LabeledPair],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        Trainer::train_epoch(self, pairs, batch_size, rng)
    }

    fn eval_loss(&self, pairs: &[LabeledPair]) -> Result<f64> {
        Trainer::eval_loss(self, pairs)
    }

    fn reset_optimizer(&mut self) {
        Trainer::reset_optimizer(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gt,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiConfig {
    /// Slices moved from the unlabeled pool per round.
    pub k: usize,
    pub pseudo_threshold: f64,
    /// Epochs over the training set on labeled data before the first round.
    pub initial_epochs: usize,
    /// Fine-tuning epochs over the enlarged training set each round.
    pub round_epochs: usize,
    pub batch_size: usize,
    pub reset_optimizer_each_round: bool,
    pub seed: u64,
}

impl Default for SemiConfig {
    fn default() -> Self {
        SemiConfig {
            k: 5,
            pseudo_threshold: 0.5,
            initial_epochs: 100,
            round_epochs: 1,
            batch_size: 16,
            reset_optimizer_each_round: false,
            seed: 0,
        }
    }
}

impl SemiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Argument(format!(
                "pseudo-label threshold {} outside (0, 1)",
                self.pseudo_threshold
            )));
        }
        Ok(())
    }
}

/// One line of the round history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_ids: Vec<String>,
    pub train: usize,
    pub unlabeled: usize,
    pub mean_loss: f64,
}

pub struct PseudoLabelState {
    training: Vec<LabeledPair>,
    provenance: Vec<Provenance>,
    unlabeled: Vec<CtSlice>,
    iteration: usize,
    k: usize,
    initial_labeled: usize,
    initial_unlabeled: usize,
    forbidden: BTreeSet<String>,
    sampler: ChaCha8Rng,
}

impl PseudoLabelState {
    /// `forbidden` lists ids (the test set) that must never enter training.
    pub fn new(
        labeled: Vec<LabeledPair>,
        unlabeled: Vec<CtSlice>,
        k: usize,
        seed: u64,
        forbidden: BTreeSet<String>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        let train_ids: BTreeSet<&str> = labeled.iter().map(LabeledPair::id).collect();
        if let Some(dup) = unlabeled.iter().find(|s| train_ids.contains(s.id())) {
            return Err(Error::Validation(format!(
                "id {} is both labeled and unlabeled",
                dup.id()
            )));
        }
        let state = PseudoLabelState {
            provenance: vec![Provenance::Gt; labeled.len()],
            initial_labeled: labeled.len(),
            initial_unlabeled: unlabeled.len(),
            training: labeled,
            unlabeled,
            iteration: 0,
            k,
            forbidden,
            sampler: ChaCha8Rng::seed_from_u64(seed),
        };
        state.check_leakage()?;
        Ok(state)
    }

    pub fn training(&self) -> &[LabeledPair] {
        &self.training
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn unlabeled(&self) -> &[CtSlice] {
        &self.unlabeled
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Rounds needed to drain the initial pool.
    pub fn total_rounds(&self) -> usize {
        self.initial_unlabeled.div_ceil(self.k)
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&x| x == p).count()
    }

    /// Pseudo-labeled pairs in the order they were added.
    pub fn pseudo_pairs(&self) -> Vec<LabeledPair> {
        self.training
            .iter()
            .zip(&self.provenance)
            .filter(|(_, &p)| p == Provenance::Pseudo)
            .map(|(t, _)| t.clone())
            .collect()
    }

    fn check_leakage(&self) -> Result<()> {
        match self
            .training
            .iter()
            .find(|p| self.forbidden.contains(p.id()))
        {
            Some(p) => Err(Error::Validation(format!(
                "test id {} leaked into the training set",
                p.id()
            ))),
            None => Ok(()),
        }
    }

    fn check_conservation(&self) -> Result<()> {
        let expect = self.initial_labeled + self.initial_unlabeled;
        if self.training.len() + self.unlabeled.len() != expect
            || self.count(Provenance::Gt) != self.initial_labeled
        {
            return Err(Error::Validation(
                "pseudo-label bookkeeping lost or duplicated slices".into(),
            ));
        }
        Ok(())
    }

    /// Draws `min(K, |pool|)` pool positions uniformly without replacement.
    fn sample(&mut self) -> Vec<usize> {
        let m = self.k.min(self.unlabeled.len());
        index::sample(&mut self.sampler, self.unlabeled.len(), m).into_vec()
    }
}

/// One propagation round: label `K` pool slices with the model, move them
/// into training and fine-tune. Returns `None` when the pool is empty.
pub fn pseudo_label_round<M: Segmenter>(
    state: &mut PseudoLabelState,
    model: &mut M,
    cfg: &SemiConfig,
    train_rng: &mut ChaCha8Rng,
) -> Result<Option<RoundRecord>> {
    if state.unlabeled.is_empty() {
        log::warn!("unlabeled pool is empty; skipping round");
        return Ok(None);
    }
    let picks = state.sample();
    let slices: Vec<&CtSlice> = picks.iter().map(|&i| &state.unlabeled[i]).collect();
    let probs = model.predict(&slices)?;
    let mut new_pairs = Vec::with_capacity(picks.len());
    for (slice, p) in slices.iter().zip(&probs) {
        let mask = BinaryMask::from_predicate(slice.id(), p, |v| v >= cfg.pseudo_threshold);
        new_pairs.push(LabeledPair::new((*slice).clone(), mask)?);
    }
    let sampled_ids: Vec<String> = new_pairs.iter().map(|p| p.id().to_string()).collect();
    let mut descending = picks.clone();
    descending.sort_unstable_by(|a, b| b.cmp(a));
    for i in descending {
        state.unlabeled.remove(i);
    }
    for pair in new_pairs {
        state.training.push(pair);
        state.provenance.push(Provenance::Pseudo);
    }
    state.iteration += 1;
    state.check_leakage()?;
    state.check_conservation()?;

    if cfg.reset_optimizer_each_round {
        model.reset_optimizer();
    }
    let mut loss = 0.0;
    for _ in 0..cfg.round_epochs {
        loss = model.train_epoch(&state.training, cfg.batch_size, train_rng)?;
    }
    Ok(Some(RoundRecord {
        round: state.iteration,
        sampled_ids,
        train: state.training.len(),
        unlabeled: state.unlabeled.len(),
        mean_loss: if cfg.round_epochs == 0 {
            f64::NAN
        } else {
            loss
        },
    }))
}

/// Appends round records as JSON lines.
pub struct HistoryWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(HistoryWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &RoundRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Trains on the labeled set, then runs rounds until the pool is empty.
/// `after_round` sees every record with the model as it stands after that
/// round; an error from it aborts the loop.
pub fn run_semi_supervised<M: Segmenter>(
    state: &mut PseudoLabelState,
    model: &mut M,
    cfg: &SemiConfig,
    mut after_round: impl FnMut(&RoundRecord, &M) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    if state.k != cfg.k {
        return Err(Error::Argument(format!(
            "state K {} differs from config K {}",
            state.k, cfg.k
        )));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    if !state.training.is_empty() {
        for _ in 0..cfg.initial_epochs {
            model.train_epoch(&state.training, cfg.batch_size, &mut train_rng)?;
        }
    } else if !state.unlabeled.is_empty() {
        return Err(Error::Validation(
            "pseudo-labeling needs at least one labeled slice".into(),
        ));
    }
    let mut history = Vec::with_capacity(state.total_rounds());
    while !state.unlabeled.is_empty() {
        let Some(record) = pseudo_label_round(state, model, cfg, &mut train_rng)? else {
            break;
        };
        log::info!(
            "round {}: train {} unlabeled {} loss {:.4}",
            record.round,
            record.train,
            record.unlabeled,
            record.mean_loss
        );
        after_round(&record, model)?;
        history.push(record);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub pretrain: Phase,
    pub finetune: Phase,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain: Phase {
                epochs: 100,
                batch_size: 24,
            },
            finetune: Phase {
                epochs: 100,
                batch_size: 16,
            },
        }
    }
}

/// Per-epoch loss curves of a two-step run. Validation losses are NaN when
/// no validation set was given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub pretrain_train: Vec<f64>,
    pub finetune_train: Vec<f64>,
    pub finetune_val: Vec<f64>,
}

/// Pretrains `model` on pseudo-labeled slices, then fine-tunes the same
/// weights on ground truth. An empty `pseudo_set` reduces this to the
/// supervised baseline.
pub fn two_step_train<M: Segmenter>(
    model: &mut M,
    pseudo_set: &[LabeledPair],
    gt_set: &[LabeledPair],
    val_set: &[LabeledPair],
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Curves> {
    for phase in [schedule.pretrain, schedule.finetune] {
        if phase.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
    }
    if gt_set.is_empty() && schedule.finetune.epochs > 0 {
        return Err(Error::Validation(
            "fine-tuning needs at least one ground-truth slice".into(),
        ));
    }
    let mut curves = Curves::default();
    if !pseudo_set.is_empty() {
        for _ in 0..schedule.pretrain.epochs {
            curves.pretrain_train.push(model.train_epoch(
                pseudo_set,
                schedule.pretrain.batch_size,
                rng,
            )?);
        }
    }
    for _ in 0..schedule.finetune.epochs {
        curves
            .finetune_train
            .push(model.train_epoch(gt_set, schedule.finetune.batch_size, rng)?);
        curves.finetune_val.push(model.eval_loss(val_set)?);
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticGenerator};

    struct Stub;

    impl Segmenter for Stub {
        fn predict(&self, slices: &[&CtSlice]) -> Result<Vec<ProbabilityMap>> {
            Ok(slices.iter().map(|s| s.pixels().clone()).collect())
        }
        fn train_epoch(&mut self, _: &[LabeledPair], _: usize, _: &mut ChaCha8Rng) -> Result<f64> {
            Ok(0.0)
        }
        fn eval_loss(&self, _: &[LabeledPair]) -> Result<f64> {
            Ok(0.0)
        }
    }

    fn pools(labeled: usize, unlabeled: usize) -> (Vec<LabeledPair>, Vec<CtSlice>) {
        let gen = SyntheticGenerator::new(SyntheticConfig::default());
        (
            (0..labeled).map(|i| gen.labeled(i).unwrap()).collect(),
            (0..unlabeled).map(|i| gen.unlabeled(i).unwrap()).collect(),
        )
    }

    #[test]
    fn empty_pool_is_a_no_op() {
        let (l, u) = pools(2, 0);
        let mut s = PseudoLabelState::new(l, u, 5, 0, BTreeSet::new()).unwrap();
        let cfg = SemiConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pseudo_label_round(&mut s, &mut Stub, &cfg, &mut rng)
            .unwrap()
            .is_none());
        assert_eq!((s.training().len(), s.iteration()), (2, 0));
    }

    #[test]
    fn leaked_test_id_is_rejected() {
        let (l, u) = pools(2, 3);
        let forbidden = BTreeSet::from([u[1].id().to_string()]);
        let mut s = PseudoLabelState::new(l, u, 3, 0, forbidden).unwrap();
        let cfg = SemiConfig {
            k: 3,
            initial_epochs: 0,
            ..SemiConfig::default()
        };
        let err = run_semi_supervised(&mut s, &mut Stub, &cfg, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn empty_gt_set_refuses_fine_tuning() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(two_step_train(
            &mut Stub,
            &[],
            &[],
            &[],
            &TrainSchedule::default(),
            &mut rng
        )
        .is_err());
    }
}
