use super::{check_shapes, check_unit_range};
use crate::data::BinaryMask;
use crate::error::{contract, Result};
use crate::plane::ProbabilityMap;

const EPS: f64 = f64::EPSILON;

/// Structure measure `(1 - alpha) S_o + alpha S_r`, clamped at 0.
///
/// An all-background ground truth scores `1 - mean(S_p)`, an all-foreground
/// one scores `mean(S_p)`.
pub fn s_measure(s_p: &ProbabilityMap, g: &BinaryMask, alpha: f64) -> Result<f64> {
    check_shapes(s_p, g)?;
    check_unit_range(s_p)?;
    contract!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
    let (h, w) = g.dims();
    let p = s_p.as_slice();
    let gt: Vec<bool> = g.values().as_slice().iter().map(|&v| v == 1).collect();
    let fg = gt.iter().filter(|&&v| v).count();
    let mean_p = s_p.mean();
    if fg == 0 {
        return Ok(1.0 - mean_p);
    }
    if fg == gt.len() {
        return Ok(mean_p);
    }
    let q = (1.0 - alpha) * object_score(p, &gt) + alpha * region_score(p, &gt, h, w);
    Ok(q.max(0.0))
}

fn object_score(p: &[f64], gt: &[bool]) -> f64 {
    let u = gt.iter().filter(|&&v| v).count() as f64 / gt.len() as f64;
    let fg: Vec<f64> = p
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g)
        .map(|(&v, _)| v)
        .collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(gt)
        .filter(|(_, &g)| !g)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    u * object(&fg) + (1.0 - u) * object(&bg)
}

fn object(values: &[f64]) -> f64 {
    let n = values.len();
    let x = values.iter().sum::<f64>() / n as f64;
    let sigma = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// 1-based centroid column and row of the foreground, rounded half away from zero.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let total = gt.iter().filter(|&&v| v).count() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn region_score(p: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let area = (h * w) as f64;
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (k, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
        let weight = if k < 3 {
            ((y1 - y0) * (x1 - x0)) as f64 / area
        } else {
            1.0 - weight_sum
        };
        weight_sum += weight;
        if y1 > y0 && x1 > x0 {
            let mut pv = Vec::with_capacity((y1 - y0) * (x1 - x0));
            let mut gv = Vec::with_capacity(pv.capacity());
            for y in y0..y1 {
                for x in x0..x1 {
                    pv.push(p[y * w + x]);
                    gv.push(if gt[y * w + x] { 1.0 } else { 0.0 });
                }
            }
            total += weight * ssim(&pv, &gv);
        }
    }
    total
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / denom;
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / denom;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / denom;
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx2 + sy2);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}
