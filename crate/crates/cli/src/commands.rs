use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use lungseg::checkpoint::Checkpoint;
use lungseg::config::{FinetuneSet, RunConfig};
use lungseg::data::io::{
    list_images, quantize, read_gray_raw, read_labels, read_mask, read_probability, write_gray8,
    write_labels, write_mask, write_probability, write_rgb,
};
use lungseg::data::synthetic::{SyntheticConfig, SyntheticGenerator};
use lungseg::data::{
    derive_edge_map, load_dataset, write_manifest, CtSlice, DatasetSplit, LabeledPair, Source,
};
use lungseg::metrics::{evaluate_dir, evaluate_pairs, ImageMetrics, MetricConfig};
use lungseg::multiclass::{
    guided_train, per_class_metrics, render_overlay, write_class_table, McModel, McSample,
    CLASS_BLOCKS,
};
use lungseg::plane::Plane;
use lungseg::semisup::{
    run_semi_supervised, two_step_train, Curves, HistoryWriter, PseudoLabelState,
};
use lungseg::train::{LossLog, Trainer, TrainerConfig};
use lungseg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layout::OutLayout;
use crate::plot;
use crate::{CliError, Command};

const INFNET_KIND: &str = "infnet";

type CmdResult = Result<(), CliError>;

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> CmdResult {
    match cmd {
        Command::PrepareData { data } => prepare_data(data, cfg, out),
        Command::Train { data } => train(data, cfg, out),
        Command::SemiTrain { data } => semi_train(data, cfg, out),
        Command::Infer { checkpoint, input } => infer(checkpoint, input, out),
        Command::Eval {
            pred,
            gt,
            multiclass,
            threshold,
        } => {
            let mut m = cfg.metrics;
            if let Some(t) = threshold {
                m.threshold = *t;
            }
            if *multiclass {
                eval_multiclass(pred, gt, &m, out)
            } else {
                eval_binary(pred, gt, &m, out)
            }
        }
        Command::McTrain { data, guidance } => mc_train(data, guidance.as_deref(), cfg, out),
        Command::McInfer {
            checkpoint,
            input,
            guidance,
            render,
        } => mc_infer(checkpoint, input, guidance, *render, out),
        Command::Report { inputs } => report(inputs, out),
        Command::MakeSynthetic {
            dest,
            labeled,
            unlabeled,
            size,
        } => make_synthetic(dest, *labeled, *unlabeled, *size, cfg.seed),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_data(data: &Path, cfg: &RunConfig, out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let split = load_dataset(data, &cfg.split)?;
    write_manifest(&layout.root.join("manifest.tsv"), &split)?;
    let edges = layout.root.join("edges");
    for pair in split.train.iter().chain(&split.val).chain(&split.test) {
        write_mask(
            &edges.join(format!("{}.png", pair.id())),
            &derive_edge_map(&pair.mask),
        )?;
    }
    write_text(&layout.root.join("config.txt"), &cfg.to_text())?;
    println!(
        "train {} val {} test {} unlabeled {} unused {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.unlabeled.len(),
        split.unused.len()
    );
    Ok(())
}

fn new_trainer(cfg: &RunConfig, seed: u64) -> Result<Trainer, Error> {
    let mut t = Trainer::new(cfg.trainer_config(), seed)?;
    if let Some(path) = &cfg.pretrained_weights {
        let n = Checkpoint::load(path)?.load_prefix(t.store_mut(), "encoder.")?;
        log::info!("loaded {n} encoder tensors from {}", path.display());
    }
    Ok(t)
}

fn finetune_sets(split: &DatasetSplit, cfg: &RunConfig) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
    match cfg.finetune_set {
        FinetuneSet::Train => (split.train.clone(), split.val.clone()),
        FinetuneSet::TrainVal => (
            split.train.iter().chain(&split.val).cloned().collect(),
            Vec::new(),
        ),
    }
}

fn write_curves(path: &Path, curves: &Curves) -> Result<(), Error> {
    let mut text = String::from("phase,epoch,train_loss,val_loss\n");
    for (e, l) in curves.pretrain_train.iter().enumerate() {
        text.push_str(&format!("pretrain,{},{l},\n", e + 1));
    }
    for (e, (l, v)) in curves
        .finetune_train
        .iter()
        .zip(&curves.finetune_val)
        .enumerate()
    {
        let v = if v.is_nan() {
            String::new()
        } else {
            v.to_string()
        };
        text.push_str(&format!("finetune,{},{l},{v}\n", e + 1));
    }
    write_text(path, &text)
}

fn save_trainer(t: &Trainer, path: &Path) -> Result<(), Error> {
    Checkpoint::new(INFNET_KIND, t.config(), t.store())?.save(path)
}

/// Writes test-set predictions and scores them exactly as `eval` would
/// score the written files.
fn predict_and_score(
    t: &Trainer,
    test: &[LabeledPair],
    layout: &OutLayout,
    metrics: &MetricConfig,
) -> Result<(), Error> {
    if test.is_empty() {
        log::warn!("empty test partition; skipping evaluation");
        return Ok(());
    }
    let slices: Vec<&CtSlice> = test.iter().map(|p| &p.image).collect();
    let probs = t.predict(&slices)?;
    let mut rows = Vec::with_capacity(test.len());
    for (pair, p) in test.iter().zip(probs) {
        write_probability(&layout.predictions.join(format!("{}.png", pair.id())), &p)?;
        let stored = quantize(&p).map(|v| f64::from(v) / 255.0);
        rows.push((pair.id().to_string(), stored, pair.mask.clone()));
    }
    let report = evaluate_pairs(&rows, metrics)?;
    report.write_csv(&layout.report("metrics.csv"))?;
    print_mean("test", &report.aggregate.values());
    Ok(())
}

fn print_mean(label: &str, v: &[f64; 7]) {
    println!(
        "{label}: dice {:.4} sen {:.4} spec {:.4} prec {:.4} s_alpha {:.4} e_phi_mean {:.4} mae {:.4}",
        v[0], v[1], v[2], v[3], v[4], v[5], v[6]
    );
}

fn train(data: &Path, cfg: &RunConfig, out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let split = load_dataset(data, &cfg.split)?;
    write_manifest(&layout.root.join("manifest.tsv"), &split)?;
    write_text(&layout.root.join("config.txt"), &cfg.to_text())?;
    let (gt, val) = finetune_sets(&split, cfg);
    let mut model = new_trainer(cfg, cfg.seed)?;
    model.set_log(Some(LossLog::create(&layout.report("train_loss.csv"))?));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let curves = two_step_train(&mut model, &[], &gt, &val, &cfg.schedule, &mut rng)?;
    model.flush_log()?;
    write_curves(&layout.report("curves.csv"), &curves)?;
    save_trainer(&model, &layout.checkpoint("infnet.ckpt"))?;
    predict_and_score(&model, &split.test, &layout, &cfg.metrics)?;
    Ok(())
}

fn semi_train(data: &Path, cfg: &RunConfig, out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let split = load_dataset(data, &cfg.split)?;
    write_manifest(&layout.root.join("manifest.tsv"), &split)?;
    write_text(&layout.root.join("config.txt"), &cfg.to_text())?;
    let test_ids: BTreeSet<String> = split.test.iter().map(|p| p.id().to_string()).collect();
    let semi = cfg.semi_config();
    let mut state = PseudoLabelState::new(
        split.train.clone(),
        split.unlabeled.clone(),
        semi.k,
        cfg.seed,
        test_ids,
    )?;
    let mut propagator = new_trainer(cfg, cfg.seed)?;
    let mut history = HistoryWriter::create(&layout.history)?;
    let every = cfg.checkpoint_every;
    run_semi_supervised(&mut state, &mut propagator, &semi, |record, model| {
        history.append(record)?;
        if every > 0 && record.round % every == 0 {
            save_trainer(
                model,
                &layout.checkpoint(&format!("round_{:04}.ckpt", record.round)),
            )?;
        }
        Ok(())
    })?;
    save_trainer(&propagator, &layout.checkpoint("propagation.ckpt"))?;

    let (gt, val) = finetune_sets(&split, cfg);
    let mut model = new_trainer(cfg, cfg.seed)?;
    model.set_log(Some(LossLog::create(&layout.report("train_loss.csv"))?));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let curves = two_step_train(
        &mut model,
        &state.pseudo_pairs(),
        &gt,
        &val,
        &cfg.schedule,
        &mut rng,
    )?;
    model.flush_log()?;
    write_curves(&layout.report("curves.csv"), &curves)?;
    save_trainer(&model, &layout.checkpoint("semi-infnet.ckpt"))?;
    predict_and_score(&model, &split.test, &layout, &cfg.metrics)?;
    Ok(())
}

/// Input directories named on the command line must exist.
fn require_dir(dir: &Path) -> Result<(), Error> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ))
    }
}

fn load_slices(dir: &Path) -> Result<Vec<CtSlice>, Error> {
    require_dir(dir)?;
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no images in {}", dir.display())));
    }
    files
        .iter()
        .map(|(id, path)| CtSlice::from_raw(id.clone(), read_gray_raw(path)?, Source::Unlabeled))
        .collect()
}

fn infer(checkpoint: &Path, input: &Path, out: &Path) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    ck.expect_kind(INFNET_KIND)?;
    let tcfg: TrainerConfig = ck.config_as()?;
    let model = Trainer::from_store(tcfg, &ck.params)?;
    let layout = OutLayout::create(out)?;
    let slices = load_slices(input)?;
    let refs: Vec<&CtSlice> = slices.iter().collect();
    for (s, p) in slices.iter().zip(model.predict(&refs)?) {
        write_probability(&layout.predictions.join(format!("{}.png", s.id())), &p)?;
    }
    println!(
        "wrote {} probability maps to {}",
        slices.len(),
        layout.predictions.display()
    );
    Ok(())
}

fn eval_binary(pred: &Path, gt: &Path, m: &MetricConfig, out: &Path) -> CmdResult {
    let report = evaluate_dir(pred, gt, m)?;
    let layout = OutLayout::create(out)?;
    report.write_csv(&layout.report("metrics.csv"))?;
    print_mean("mean", &report.aggregate.values());
    Ok(())
}

fn matched_ids(a: &Path, b: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, Error> {
    require_dir(a)?;
    require_dir(b)?;
    let left: BTreeMap<String, PathBuf> = list_images(a)?.into_iter().collect();
    let right: BTreeMap<String, PathBuf> = list_images(b)?.into_iter().collect();
    let only_left: Vec<&str> = left
        .keys()
        .filter(|k| !right.contains_key(*k))
        .map(String::as_str)
        .collect();
    let only_right: Vec<&str> = right
        .keys()
        .filter(|k| !left.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !only_left.is_empty() || !only_right.is_empty() {
        return Err(Error::Validation(format!(
            "id mismatch: only in {} [{}]; only in {} [{}]",
            a.display(),
            only_left.join(", "),
            b.display(),
            only_right.join(", ")
        )));
    }
    if left.is_empty() {
        return Err(Error::Validation(format!("no images in {}", a.display())));
    }
    Ok(left
        .into_iter()
        .map(|(id, p)| {
            let q = right[&id].clone();
            (id, p, q)
        })
        .collect())
}

fn eval_multiclass(pred: &Path, gt: &Path, m: &MetricConfig, out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let mut rows = Vec::new();
    for (id, p, g) in matched_ids(pred, gt)? {
        let table = per_class_metrics(&read_labels(&p, &id)?, &read_labels(&g, &id)?, m)?;
        rows.push((id, table));
    }
    write_class_table(&layout.report("multiclass_metrics.csv"), &rows)?;
    for (k, label) in CLASS_BLOCKS.iter().enumerate() {
        let block = ImageMetrics::mean(
            rows.iter()
                .map(|(_, t)| [&t.ggo, &t.consolidation, &t.average][k]),
        );
        print_mean(label, &block.values());
    }
    Ok(())
}

fn mc_train(data: &Path, guidance: Option<&Path>, cfg: &RunConfig, out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let labels_dir = data.join("multiclass_masks");
    let label_files = list_images(&labels_dir)?;
    if label_files.is_empty() {
        return Err(Error::Validation(format!("no label maps in {}", labels_dir.display())).into());
    }
    let mut samples = Vec::with_capacity(label_files.len());
    for (id, path) in &label_files {
        let image = CtSlice::from_raw(
            id.clone(),
            read_gray_raw(&data.join("images").join(format!("{id}.png")))?,
            Source::Labeled,
        )?;
        let guide = match guidance {
            Some(dir) => read_probability(&dir.join(format!("{id}.png")))?,
            None => read_mask(&data.join("masks").join(format!("{id}.png")), id)?.to_f64(),
        };
        samples.push(McSample::new(image, guide, read_labels(path, id)?)?);
    }
    let (model, curve) = guided_train(&samples, &cfg.mc_config())?;
    let mut text = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", e + 1));
    }
    write_text(&layout.report("mc_loss.csv"), &text)?;
    model
        .checkpoint()?
        .save(&layout.checkpoint("multiclass.ckpt"))?;
    println!("trained multiclass head on {} slices", samples.len());
    Ok(())
}

fn mc_infer(
    checkpoint: &Path,
    input: &Path,
    guidance: &Path,
    render: bool,
    out: &Path,
) -> CmdResult {
    let model = McModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let layout = OutLayout::create(out)?;
    let slices = load_slices(input)?;
    for s in &slices {
        let guide = read_probability(&guidance.join(format!("{}.png", s.id())))?;
        let labels = model.infer(s, &guide)?;
        write_labels(&layout.predictions.join(format!("{}.png", s.id())), &labels)?;
        if render {
            let (h, w) = s.dims();
            let rgb = render_overlay(s, &labels)?;
            write_rgb(
                &layout
                    .predictions
                    .join("overlay")
                    .join(format!("{}.png", s.id())),
                w,
                h,
                rgb,
            )?;
        }
    }
    println!("labeled {} slices", slices.len());
    Ok(())
}

fn report(inputs: &[String], out: &Path) -> CmdResult {
    let layout = OutLayout::create(out)?;
    let mut header: Option<Vec<String>> = None;
    let mut summary: Vec<(String, Vec<f64>)> = Vec::new();
    for spec in inputs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(spec)
                    .to_string();
                (stem, p)
            }
        };
        let (h, means) = column_means(&path)?;
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => {
                return Err(Error::Validation(format!(
                    "{} has a different header from the other inputs",
                    path.display()
                ))
                .into())
            }
            _ => {}
        }
        summary.push((name, means));
    }
    let header = header.expect("at least one input");
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::from(Error::Validation(format!("csv: {e}")));
    w.write_record(&header).map_err(csv_err)?;
    for (name, means) in &summary {
        let mut row = vec![name.clone()];
        row.extend(means.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::from(Error::Validation(e.to_string())))?;
    fs::write(layout.report("summary.csv"), bytes)
        .map_err(|e| Error::io(layout.report("summary.csv"), e))?;
    let svg = plot::grouped_bars(&header[1..], &summary);
    write_text(&layout.report("summary.svg"), &svg)?;
    println!(
        "summarized {} inputs into {}",
        summary.len(),
        layout.report("summary.csv").display()
    );
    Ok(())
}

/// Header and per-column means of a metrics CSV, ignoring its `MEAN` row.
fn column_means(path: &Path) -> Result<(Vec<String>, Vec<f64>), Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Validation(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.first().map(String::as_str) != Some("id") || header.len() < 2 {
        return Err(bad(
            "expected an `id` column followed by metric columns".into()
        ));
    }
    let mut sums = vec![0.0; header.len() - 1];
    let mut n = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.get(0) == Some("MEAN") {
            continue;
        }
        for (k, s) in sums.iter_mut().enumerate() {
            let field = rec.get(k + 1).ok_or_else(|| bad("short row".into()))?;
            *s += field
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number {field:?}")))?;
        }
        n += 1;
    }
    if n == 0 {
        return Err(bad("no per-image rows".into()));
    }
    Ok((header, sums.into_iter().map(|s| s / n as f64).collect()))
}

fn make_synthetic(
    dest: &Path,
    labeled: usize,
    unlabeled: usize,
    size: usize,
    seed: u64,
) -> CmdResult {
    let gen = SyntheticGenerator::new(SyntheticConfig {
        size,
        seed,
        ..SyntheticConfig::default()
    });
    let to8 = |p: &Plane<f64>| quantize(p);
    for i in 0..labeled {
        let (pair, labels) = gen.multiclass(i)?;
        let id = pair.id().to_string();
        write_gray8(
            &dest.join("images").join(format!("{id}.png")),
            &to8(pair.image.pixels()),
        )?;
        write_mask(&dest.join("masks").join(format!("{id}.png")), &pair.mask)?;
        write_labels(
            &dest.join("multiclass_masks").join(format!("{id}.png")),
            &labels,
        )?;
    }
    for i in 0..unlabeled {
        let s = gen.unlabeled(i)?;
        write_gray8(
            &dest.join("unlabeled").join(format!("{}.png", s.id())),
            &to8(s.pixels()),
        )?;
    }
    println!(
        "wrote {labeled} labeled and {unlabeled} unlabeled slices to {}",
        dest.display()
    );
    Ok(())
}
