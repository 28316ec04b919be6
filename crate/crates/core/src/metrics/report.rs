use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{confusion_metrics, e_measure_mean, mae, s_measure};
use crate::data::io::{list_images, read_mask, read_probability};
use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::par;
use crate::plane::ProbabilityMap;

pub const CSV_HEADER: [&str; 8] = [
    "id",
    "dice",
    "sen",
    "spec",
    "prec",
    "s_alpha",
    "e_phi_mean",
    "mae",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Binarization level for the confusion metrics.
    pub threshold: f64,
    pub alpha: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            threshold: 0.5,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub sen: f64,
    pub spec: f64,
    pub prec: f64,
    pub s_alpha: f64,
    pub e_phi_mean: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(s_p: &ProbabilityMap, g: &BinaryMask, cfg: &MetricConfig) -> Result<Self> {
        let c = confusion_metrics(s_p, g, cfg.threshold)?;
        Ok(ImageMetrics {
            dice: c.dice,
            sen: c.sen,
            spec: c.spec,
            prec: c.prec,
            s_alpha: s_measure(s_p, g, cfg.alpha)?,
            e_phi_mean: e_measure_mean(s_p, g)?,
            mae: mae(s_p, g)?,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.dice,
            self.sen,
            self.spec,
            self.prec,
            self.s_alpha,
            self.e_phi_mean,
            self.mae,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        ImageMetrics {
            dice: v[0],
            sen: v[1],
            spec: v[2],
            prec: v[3],
            s_alpha: v[4],
            e_phi_mean: v[5],
            mae: v[6],
        }
    }

    /// Unweighted mean of `rows`; all zeros for an empty slice.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a ImageMetrics>) -> Self {
        let mut acc = [0.0; 7];
        let mut n = 0usize;
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        ImageMetrics::from_values(acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows sorted by id.
    pub per_image: Vec<(String, ImageMetrics)>,
    pub aggregate: ImageMetrics,
    pub binarize_threshold: f64,
}

impl MetricsReport {
    pub fn new(mut per_image: Vec<(String, ImageMetrics)>, binarize_threshold: f64) -> Self {
        per_image.sort_by(|a, b| a.0.cmp(&b.0));
        let aggregate = ImageMetrics::mean(per_image.iter().map(|(_, m)| m));
        MetricsReport {
            per_image,
            aggregate,
            binarize_threshold,
        }
    }

    pub fn get(&self, id: &str) -> Option<&ImageMetrics> {
        self.per_image.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>, id: &str, m: &ImageMetrics| -> csv::Result<()> {
            let mut row = vec![id.to_string()];
            row.extend(m.values().iter().map(f64::to_string));
            w.write_record(&row)
        };
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for (id, m) in &self.per_image {
            write(&mut w, id, m).map_err(csv_err)?;
        }
        write(&mut w, "MEAN", &self.aggregate).map_err(csv_err)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Parses a CSV produced by [`MetricsReport::write_csv`]. The `MEAN` row is
    /// recomputed rather than trusted.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Validation(format!("{}: {msg}", path.display()));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(bad(format!("unexpected header {:?}", header)));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            if id == "MEAN" {
                continue;
            }
            let mut v = [0.0; 7];
            for (k, slot) in v.iter_mut().enumerate() {
                let field = rec
                    .get(k + 1)
                    .ok_or_else(|| bad(format!("row {id} is short")))?;
                *slot = field
                    .parse()
                    .map_err(|_| bad(format!("row {id}: bad number {field:?}")))?;
            }
            rows.push((id, ImageMetrics::from_values(v)));
        }
        Ok(MetricsReport::new(rows, f64::NAN))
    }
}

/// Per-image metrics for in-memory pairs, computed in parallel.
pub fn evaluate_pairs(
    pairs: &[(String, ProbabilityMap, BinaryMask)],
    cfg: &MetricConfig,
) -> Result<MetricsReport> {
    let rows = par::map_slice(pairs, |(id, p, g)| {
        ImageMetrics::compute(p, g, cfg).map(|m| (id.clone(), m))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows, cfg.threshold))
}

/// Scores every prediction PNG in `pred_dir` against the mask of the same id
/// in `gt_dir`. Any id present on one side only aborts with the full list.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path, cfg: &MetricConfig) -> Result<MetricsReport> {
    for dir in [pred_dir, gt_dir] {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
    }
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let pred_ids: BTreeSet<&str> = preds.iter().map(|(id, _)| id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gts.iter().map(|(id, _)| id.as_str()).collect();
    let no_gt: Vec<&str> = pred_ids.difference(&gt_ids).copied().collect();
    let no_pred: Vec<&str> = gt_ids.difference(&pred_ids).copied().collect();
    if !no_gt.is_empty() || !no_pred.is_empty() {
        return Err(Error::Validation(format!(
            "id mismatch: without ground truth [{}]; without prediction [{}]",
            no_gt.join(", "),
            no_pred.join(", ")
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation(format!(
            "no images in {}",
            pred_dir.display()
        )));
    }
    let rows = par::map_slice(&preds, |(id, path)| -> Result<(String, ImageMetrics)> {
        let p = read_probability(path)?;
        let gt_path = &gts.iter().find(|(g, _)| g == id).expect("ids matched").1;
        let g = read_mask(gt_path, id)?;
        Ok((id.clone(), ImageMetrics::compute(&p, &g, cfg)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows, cfg.threshold))
}
