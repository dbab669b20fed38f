//! Brute-force oracles the integration suites compare the library against.
//! Everything here is written for obviousness, not speed.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Dice from direct set counts.
pub fn dice_oracle(pred: &Array2<u8>, gt: &Array2<u8>) -> f64 {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        if a == 1 {
            p += 1;
        }
        if b == 1 {
            g += 1;
        }
        if a == 1 && b == 1 {
            inter += 1;
        }
    }
    2.0 * inter as f64 / (p + g) as f64
}

/// IoU from direct set counts.
pub fn iou_oracle(pred: &Array2<u8>, gt: &Array2<u8>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        if a == 1 && b == 1 {
            inter += 1;
        }
        if a == 1 || b == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Boundary pixels: set pixels whose 4-neighborhood leaves the mask (or the
/// image). Independent re-statement of the library's definition.
pub fn boundary_oracle(mask: &Array2<u8>) -> Vec<(i64, i64)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if mask[[r as usize, c as usize]] != 1 {
                continue;
            }
            let mut edge = false;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    edge = true;
                } else if mask[[nr as usize, nc as usize]] == 0 {
                    edge = true;
                }
            }
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// HD95 via exhaustive O(N²) pairwise distances and an independently written
/// linear-interpolation percentile.
pub fn hd95_oracle(pred: &Array2<u8>, gt: &Array2<u8>) -> f64 {
    let bp = boundary_oracle(pred);
    let bg = boundary_oracle(gt);
    assert!(!bp.is_empty() && !bg.is_empty(), "oracle needs nonempty masks");
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(tr, tc)| {
                        let (dr, dc) = ((r - tr) as f64, (c - tc) as f64);
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut all = directed(&bp, &bg);
    all.extend(directed(&bg, &bp));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    // Same interpolation expression as the implementation: the exact-match
    // assertion would otherwise trip over last-ulp rounding differences.
    all[lo] + (all[hi] - all[lo]) * frac
}

/// Random blob mask: a few filled rectangles, possibly empty.
pub fn random_mask(rng: &mut ChaCha20Rng, h: usize, w: usize, blobs: usize) -> Array2<u8> {
    let mut m = Array2::<u8>::zeros((h, w));
    for _ in 0..blobs {
        let r0 = rng.gen_range(0..h);
        let c0 = rng.gen_range(0..w);
        let rh = rng.gen_range(1..=h / 4 + 1);
        let cw = rng.gen_range(1..=w / 4 + 1);
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + cw).min(w) {
                m[[r, c]] = 1;
            }
        }
    }
    m
}

fn cos01(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv) + 1.0) / 2.0
}

/// Scalar re-statement of the contrastive fg/bg loss.
pub fn c2am_oracle(fg: &[Array1<f64>], bg: &[Array1<f64>], eps: f64) -> f64 {
    let b = fg.len();
    assert!(b >= 2);
    let clamp_log = |x: f64| -> f64 { x.clamp(eps, 1.0).ln() };
    let mut l_neg = 0.0;
    for i in 0..b {
        for j in 0..b {
            l_neg -= clamp_log(1.0 - cos01(&fg[i], &bg[j]) + eps);
        }
    }
    l_neg /= (b * b) as f64;
    let mut l_fg = 0.0;
    let mut l_bg = 0.0;
    for i in 0..b {
        for j in (i + 1)..b {
            l_fg -= clamp_log(cos01(&fg[i], &fg[j]) + eps);
            l_bg -= clamp_log(cos01(&bg[i], &bg[j]) + eps);
        }
    }
    let pairs = (b * (b - 1)) as f64 / 2.0;
    l_fg /= pairs;
    l_bg /= pairs;
    l_fg + l_bg + l_neg
}

/// Scalar double-loop fg/bg pooling oracle.
pub fn fg_bg_oracle(
    m: &Array2<f64>,
    f: &Array3<f64>,
    eps: f64,
) -> (Array1<f64>, Array1<f64>) {
    let (d, h, w) = f.dim();
    let mut fg = Array1::<f64>::zeros(d);
    let mut bg = Array1::<f64>::zeros(d);
    let mut mass_fg = 0.0;
    let mut mass_bg = 0.0;
    for r in 0..h {
        for c in 0..w {
            mass_fg += m[[r, c]];
            mass_bg += 1.0 - m[[r, c]];
            for k in 0..d {
                fg[k] += m[[r, c]] * f[[k, r, c]];
                bg[k] += (1.0 - m[[r, c]]) * f[[k, r, c]];
            }
        }
    }
    let normalize = |mut v: Array1<f64>, mass: f64| -> Array1<f64> {
        v.mapv_inplace(|x| x / mass.max(eps));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.mapv_inplace(|x| x / n);
        }
        v
    };
    (normalize(fg, mass_fg), normalize(bg, mass_bg))
}

/// Scalar softmax cross-entropy, mean over the batch.
pub fn ce_oracle(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.outer_iter().zip(labels.iter()) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        total -= (row[label] - mx) - denom.ln();
    }
    total / labels.len() as f64
}

/// Scalar SupCon oracle: sum over anchors of the mean positive-pair term.
pub fn supcon_oracle(z: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let n = z.nrows();
    let dot = |i: usize, j: usize| -> f64 {
        z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| a * b).sum()
    };
    let mut loss = 0.0;
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(i, a) / tau).exp()).sum();
        let mut anchor = 0.0;
        for &p in &positives {
            anchor += ((dot(i, p) / tau).exp() / denom).ln();
        }
        loss -= anchor / positives.len() as f64;
    }
    loss
}
