//! Segmentation metrics: map thresholding, Dice, IoU, HD95 and mean/std
//! report aggregation over a dataset split.

use crate::cam::ActivationMap;
use crate::{Error, Result, Scalar};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Binary mask produced by thresholding an activation map.
#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub values: Array2<u8>,
    pub threshold_used: f64,
}

/// Pixel = 1 iff value > threshold (strict: a value equal to the threshold
/// stays background).
pub fn threshold_map<T: Scalar>(
    map: &ActivationMap<T>,
    threshold: f64,
) -> Result<SegmentationMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::BadThreshold(threshold));
    }
    let t = T::from_f64_(threshold);
    let values = map.values.mapv(|v| u8::from(v > t));
    Ok(SegmentationMask { values, threshold_used: threshold })
}

fn count_set(mask: &Array2<u8>) -> usize {
    mask.iter().filter(|&&v| v != 0).count()
}

fn check_shapes(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            expected: gt.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; empty prediction against nonempty truth scores 0.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let g = count_set(gt);
    if g == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let p = count_set(pred);
    if p == 0 {
        return Ok(0.0);
    }
    let inter = pred
        .iter()
        .zip(gt.iter())
        .filter(|(&a, &b)| a != 0 && b != 0)
        .count();
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`.
pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let g = count_set(gt);
    if g == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let p = count_set(pred);
    if p == 0 {
        return Ok(0.0);
    }
    let inter = pred
        .iter()
        .zip(gt.iter())
        .filter(|(&a, &b)| a != 0 && b != 0)
        .count();
    let union = p + g - inter;
    Ok(inter as f64 / union as f64)
}

/// Set pixels whose 4-neighborhood contains an unset or out-of-bounds pixel.
pub fn boundary_pixels(mask: &Array2<u8>) -> Vec<(i64, i64)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let exposed = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                nr < 0
                    || nc < 0
                    || nr >= h as i64
                    || nc >= w as i64
                    || mask[[nr as usize, nc as usize]] == 0
            });
            if exposed {
                out.push((r as i64, c as i64));
            }
        }
    }
    out
}

/// Minimum squared Euclidean distance from each point of `from` to `to`.
fn directed_sq_distances(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<u64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(tr, tc)| {
                    let dr = (r - tr).unsigned_abs();
                    let dc = (c - tc).unsigned_abs();
                    dr * dr + dc * dc
                })
                .min()
                .expect("nonempty target boundary")
        })
        .collect()
}

/// q-th percentile with linear interpolation at rank `q * (n - 1)` over a
/// sorted ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    assert!((0.0..=1.0).contains(&q), "q in [0,1]");
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95th percentile of the concatenated directed boundary-to-boundary
/// nearest-neighbor distances, in pixels.
pub fn hd95(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    if count_set(pred) == 0 {
        return Err(Error::EmptyMask("prediction"));
    }
    if count_set(gt) == 0 {
        return Err(Error::EmptyMask("ground-truth"));
    }
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let mut distances: Vec<f64> = directed_sq_distances(&bp, &bg)
        .into_iter()
        .chain(directed_sq_distances(&bg, &bp))
        .map(|sq| (sq as f64).sqrt())
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(percentile(&distances, 0.95))
}

/// One prediction/ground-truth pair to score.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub case_id: String,
    pub z_index: usize,
    pub pred: Array2<u8>,
    pub gt: Array2<u8>,
}

/// Per-sample metric row; `hd95` is undefined when the prediction is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub case_id: String,
    pub z_index: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation in fixed index order.
pub fn mean_std(values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dice: MetricStat,
    pub iou: MetricStat,
    /// Over samples where HD95 is defined; absent when no sample defines it.
    pub hd95: Option<MetricStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub summary: MetricsSummary,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

/// Scores every pair with a nonempty ground truth; empty-truth pairs are
/// counted in `n_skipped`. Rows are ordered by `(case_id, z_index)` so the
/// report does not depend on input order.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut n_skipped = 0usize;
    for pair in pairs {
        check_shapes(&pair.pred, &pair.gt)?;
        if count_set(&pair.gt) == 0 {
            n_skipped += 1;
            continue;
        }
        let d = dice(&pair.pred, &pair.gt)?;
        let j = iou(&pair.pred, &pair.gt)?;
        let h = if count_set(&pair.pred) == 0 {
            None
        } else {
            Some(hd95(&pair.pred, &pair.gt)?)
        };
        rows.push(SampleMetrics {
            case_id: pair.case_id.clone(),
            z_index: pair.z_index,
            dice: d,
            iou: j,
            hd95: h,
        });
    }
    if rows.is_empty() {
        return Err(Error::NoEvaluableSamples);
    }
    rows.sort_by(|a, b| (&a.case_id, a.z_index).cmp(&(&b.case_id, b.z_index)));
    Ok(build_report(rows, n_skipped))
}

fn build_report(rows: Vec<SampleMetrics>, n_skipped: usize) -> MetricsReport {
    let dices: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
    let summary = MetricsSummary {
        dice: mean_std(&dices),
        iou: mean_std(&ious),
        hd95: (!hds.is_empty()).then(|| mean_std(&hds)),
    };
    MetricsReport { n_evaluated: rows.len(), per_sample: rows, summary, n_skipped }
}
