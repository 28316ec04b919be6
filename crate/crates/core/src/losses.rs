//! Edge BCE, hard-pixel weighted BCE + IoU, and the deep-supervision total.
//!
//! Every loss returns its value together with the gradient with respect to
//! the logit map it was given, at that map's native resolution. Logits are
//! bilinearly upsampled to ground-truth resolution before comparison, and the
//! gradient is routed back through the adjoint of that upsampling.

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::data::BinaryMask;
use crate::error::{contract, Error, Result};
use crate::model::PredictionBundle;
use crate::par;
use crate::plane::{LogitMap, Plane};
use crate::resample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the BCE part of the segmentation loss.
    pub lambda: f64,
    pub hard_pixel_gain: f64,
    pub pool_window: usize,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            hard_pixel_gain: 5.0,
            pool_window: 31,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Argument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.pool_window % 2 == 0 {
            return Err(Error::Argument(format!(
                "pool window must be odd, got {}",
                self.pool_window
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Argument(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the input logits.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Plane<f64>,
}

/// Logits upsampled to the target grid, or a contract error when the two
/// grids are not related by one integer stride on both axes.
fn upsample_to(logits: &LogitMap, target: (usize, usize)) -> Result<Plane<f64>> {
    let (h, w) = logits.dims();
    let (th, tw) = target;
    contract!(
        h > 0 && w > 0 && th % h == 0 && tw % w == 0 && th / h == tw / w,
        "logits {h}x{w} cannot be upsampled onto ground truth {th}x{tw}"
    );
    Ok(logits.resize_bilinear(th, tw))
}

fn to_native(grad_up: Vec<f64>, logits: &LogitMap, target: (usize, usize)) -> Plane<f64> {
    let (h, w) = logits.dims();
    let g = resample::bilinear_adjoint(&grad_up, h, w, target.0, target.1);
    Plane::new(h, w, g).expect("adjoint keeps the logit shape")
}

/// BCE of one pixel with the probability clamped to `[eps, 1 - eps]`, and
/// its derivative with respect to the logit.
#[inline]
fn clamped_bce(logit: f64, target: f64, eps: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    let p = s.clamp(eps, 1.0 - eps);
    let value = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = if s > eps && s < 1.0 - eps {
        (-target / p + (1.0 - target) / (1.0 - p)) * s * (1.0 - s)
    } else {
        0.0
    };
    (value, grad)
}

/// Mean pixel BCE between edge logits and the edge ground truth.
pub fn edge_loss(s_e: &LogitMap, g_e: &BinaryMask, eps: f64) -> Result<LossValue> {
    let target = g_e.dims();
    let up = upsample_to(s_e, target)?;
    let n = up.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(up.len());
    for (&x, &g) in up.as_slice().iter().zip(g_e.values().as_slice()) {
        let (v, d) = clamped_bce(x, f64::from(g), eps);
        value += v;
        grad.push(d / n);
    }
    Ok(LossValue {
        value: value / n,
        grad: to_native(grad, s_e, target),
    })
}

/// `1 + gain * |boxmean(G) - G|`, with a zero-padded `window`x`window` mean.
pub fn hard_pixel_weights(g: &BinaryMask, weights: &LossWeights) -> Plane<f64> {
    let (h, w) = g.dims();
    let gf = g.to_f64();
    let mean = resample::box_mean_zero_padded(gf.as_slice(), h, w, weights.pool_window);
    let data = mean
        .iter()
        .zip(gf.as_slice())
        .map(|(m, v)| 1.0 + weights.hard_pixel_gain * (m - v).abs())
        .collect();
    Plane::new(h, w, data).expect("same dims as mask")
}

/// `sum(w * bce) / sum(w)`.
pub fn weighted_bce(
    s: &LogitMap,
    g: &BinaryMask,
    weight: &Plane<f64>,
    eps: f64,
) -> Result<LossValue> {
    g.values().check_dims(weight, "weighted_bce weights")?;
    let target = g.dims();
    let up = upsample_to(s, target)?;
    let total_w: f64 = weight.as_slice().iter().sum();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(up.len());
    for ((&x, &gv), &wv) in up
        .as_slice()
        .iter()
        .zip(g.values().as_slice())
        .zip(weight.as_slice())
    {
        let (v, d) = clamped_bce(x, f64::from(gv), eps);
        value += wv * v;
        grad.push(wv * d / total_w);
    }
    Ok(LossValue {
        value: value / total_w,
        grad: to_native(grad, s, target),
    })
}

/// `1 - (sum(w p G) + eps) / (sum(w (p + G - p G)) + eps)` with `p = sigmoid(S)`.
pub fn weighted_iou(
    s: &LogitMap,
    g: &BinaryMask,
    weight: &Plane<f64>,
    eps: f64,
) -> Result<LossValue> {
    g.values().check_dims(weight, "weighted_iou weights")?;
    let target = g.dims();
    let up = upsample_to(s, target)?;
    let probs: Vec<f64> = up.as_slice().iter().map(|&x| sigmoid(x)).collect();
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&p, &gv), &wv) in probs
        .iter()
        .zip(g.values().as_slice())
        .zip(weight.as_slice())
    {
        let gv = f64::from(gv);
        inter += wv * p * gv;
        union += wv * (p + gv - p * gv);
    }
    let (num, den) = (inter + eps, union + eps);
    let grad = probs
        .iter()
        .zip(g.values().as_slice())
        .zip(weight.as_slice())
        .map(|((&p, &gv), &wv)| {
            let gv = f64::from(gv);
            let d_inter = wv * gv;
            let d_union = wv * (1.0 - gv);
            let d_ratio = (d_inter * den - num * d_union) / (den * den);
            -d_ratio * p * (1.0 - p)
        })
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad: to_native(grad, s, target),
    })
}

/// `L_IoU^w + lambda * L_BCE^w` sharing one hard-pixel weight map.
pub fn segmentation_loss(
    s: &LogitMap,
    g: &BinaryMask,
    weight: &Plane<f64>,
    weights: &LossWeights,
) -> Result<LossValue> {
    let iou = weighted_iou(s, g, weight, weights.epsilon)?;
    let bce = weighted_bce(s, g, weight, weights.epsilon)?;
    let grad = Plane::new(
        iou.grad.height(),
        iou.grad.width(),
        iou.grad
            .as_slice()
            .iter()
            .zip(bce.grad.as_slice())
            .map(|(a, b)| a + weights.lambda * b)
            .collect(),
    )?;
    Ok(LossValue {
        value: iou.value + weights.lambda * bce.value,
        grad,
    })
}

/// Batch-mean value of each deep-supervision term; `None` marks a term whose
/// side output is absent under the current ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub edge: Option<f64>,
    pub side5: Option<f64>,
    pub side4: Option<f64>,
    pub side3: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,seg_global,edge,seg_s5,seg_s4,seg_s3,total";

    pub fn csv_row(&self, step: usize) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{step},{},{},{},{},{},{}",
            self.global,
            opt(self.edge),
            opt(self.side5),
            opt(self.side4),
            opt(self.side3),
            self.total
        )
    }
}

/// Gradients of the total loss with respect to each bundle logit tensor.
#[derive(Clone, Debug)]
pub struct BundleGrads {
    pub s_g: Tensor,
    pub s5: Option<Tensor>,
    pub s4: Option<Tensor>,
    pub s3: Option<Tensor>,
    pub s_e: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grads: BundleGrads,
}

struct SampleTerms {
    global: LossValue,
    edge: Option<LossValue>,
    sides: [Option<LossValue>; 3],
}

/// Deep-supervised loss: segmentation loss on `S_g`, `S_5`, `S_4`, `S_3`
/// plus the edge loss on `S_e`, each averaged over the batch.
pub fn total_loss(
    bundle: &PredictionBundle,
    g_s: &[BinaryMask],
    g_e: &[BinaryMask],
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let n = bundle.s_g.shape().n;
    contract!(
        g_s.len() == n,
        "{} segmentation masks for a batch of {n}",
        g_s.len()
    );
    if bundle.s_e.is_some() {
        contract!(
            g_e.len() == n,
            "{} edge masks for a batch of {n}",
            g_e.len()
        );
    }
    let sides = [bundle.s5.as_ref(), bundle.s4.as_ref(), bundle.s3.as_ref()];
    let per_sample = par::map_range(n, |i| -> Result<SampleTerms> {
        let omega = hard_pixel_weights(&g_s[i], weights);
        let global = segmentation_loss(&bundle.s_g.plane(i, 0), &g_s[i], &omega, weights)?;
        let edge = match &bundle.s_e {
            Some(t) => Some(edge_loss(&t.plane(i, 0), &g_e[i], weights.epsilon)?),
            None => None,
        };
        let mut side_terms = [None, None, None];
        for (slot, side) in side_terms.iter_mut().zip(sides) {
            if let Some(t) = side {
                *slot = Some(segmentation_loss(&t.plane(i, 0), &g_s[i], &omega, weights)?);
            }
        }
        Ok(SampleTerms {
            global,
            edge,
            sides: side_terms,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / n as f64;
    let stack = |template: &Tensor, pick: &dyn Fn(&SampleTerms) -> &LossValue| -> Result<Tensor> {
        let mut data = Vec::with_capacity(template.shape().numel());
        for t in &per_sample {
            data.extend(pick(t).grad.as_slice().iter().map(|g| g * scale));
        }
        Tensor::from_vec(template.shape(), data)
    };
    let mean =
        |pick: &dyn Fn(&SampleTerms) -> f64| per_sample.iter().map(pick).sum::<f64>() * scale;

    let global = mean(&|t| t.global.value);
    let g_global = stack(&bundle.s_g, &|t| &t.global)?;
    let edge = bundle
        .s_e
        .as_ref()
        .map(|_| mean(&|t| t.edge.as_ref().map_or(0.0, |v| v.value)));
    let g_edge = match &bundle.s_e {
        Some(t) => Some(stack(t, &|s| s.edge.as_ref().expect("edge term present"))?),
        None => None,
    };
    let mut side_values = [None; 3];
    let mut side_grads: [Option<Tensor>; 3] = [None, None, None];
    for k in 0..3 {
        if let Some(t) = sides[k] {
            side_values[k] = Some(mean(&|s| s.sides[k].as_ref().map_or(0.0, |v| v.value)));
            side_grads[k] = Some(stack(t, &|s| {
                s.sides[k].as_ref().expect("side term present")
            })?);
        }
    }
    let total = global + edge.unwrap_or(0.0) + side_values.iter().flatten().sum::<f64>();
    let [g5, g4, g3] = side_grads;
    Ok(TotalLoss {
        breakdown: LossBreakdown {
            global,
            edge,
            side5: side_values[0],
            side4: side_values[1],
            side3: side_values[2],
            total,
        },
        grads: BundleGrads {
            s_g: g_global,
            s5: g5,
            s4: g4,
            s3: g3,
            s_e: g_edge,
        },
    })
}
