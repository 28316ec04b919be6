use super::{check_shapes, check_unit_range};
use crate::data::BinaryMask;
use crate::error::Result;
use crate::plane::ProbabilityMap;

const EPS: f64 = f64::EPSILON;

/// Number of binarization levels swept by [`e_measure_mean`]. Level `t`
/// keeps pixels with `S_p > t / 256`.
pub const E_THRESHOLDS: usize = 256;

/// Enhanced-alignment score of one binary foreground map.
pub fn e_measure_at(fm: &[bool], g: &BinaryMask) -> f64 {
    let gt = g.values().as_slice();
    let n = gt.len();
    let fg_gt = gt.iter().filter(|&&v| v == 1).count();
    let fg_fm = fm.iter().filter(|&&v| v).count();
    let mut counts = [[0usize; 2]; 2];
    for (&f, &gv) in fm.iter().zip(gt) {
        counts[usize::from(f)][usize::from(gv)] += 1;
    }
    score_from_counts(counts, fg_fm, fg_gt, n)
}

/// `counts[f][g]` holds the number of pixels with prediction `f` and truth `g`.
fn score_from_counts(counts: [[usize; 2]; 2], fg_fm: usize, fg_gt: usize, n: usize) -> f64 {
    let nf = n as f64;
    let total: f64 = if fg_gt == 0 {
        counts[0][0] as f64 + counts[0][1] as f64
    } else if fg_gt == n {
        counts[1][0] as f64 + counts[1][1] as f64
    } else {
        let mu_f = fg_fm as f64 / nf;
        let mu_g = fg_gt as f64 / nf;
        let mut acc = 0.0;
        for (f, row) in counts.iter().enumerate() {
            for (gi, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let a = f as f64 - mu_f;
                let b = gi as f64 - mu_g;
                let xi = 2.0 * a * b / (a * a + b * b + EPS);
                acc += c as f64 * (xi + 1.0).powi(2) / 4.0;
            }
        }
        acc
    };
    total / nf
}

/// Mean enhanced-alignment measure over [`E_THRESHOLDS`] binarizations.
pub fn e_measure_mean(s_p: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    check_shapes(s_p, g)?;
    check_unit_range(s_p)?;
    let n = s_p.len();
    let levels = E_THRESHOLDS;
    // hist[g][k]: pixels that are foreground for exactly the first k levels.
    let mut hist = vec![[0usize; 2]; levels + 1];
    for (&p, &gv) in s_p.as_slice().iter().zip(g.values().as_slice()) {
        let k = (p * levels as f64).ceil().clamp(0.0, levels as f64) as usize;
        hist[k][usize::from(gv)] += 1;
    }
    let fg_gt = g.foreground();
    // Pixels still foreground at level t are those with k > t.
    let mut above = [0usize; 2];
    for row in &hist[1..] {
        above[0] += row[0];
        above[1] += row[1];
    }
    let mut sum = 0.0;
    for t in 0..levels {
        let counts = [
            [n - fg_gt - above[0], fg_gt - above[1]],
            [above[0], above[1]],
        ];
        sum += score_from_counts(counts, above[0] + above[1], fg_gt, n);
        above[0] -= hist[t + 1][0];
        above[1] -= hist[t + 1][1];
    }
    Ok(sum / levels as f64)
}
