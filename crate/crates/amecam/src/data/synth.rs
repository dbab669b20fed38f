//! Synthetic volume generator: a noisy bright disk ("brain") inside a
//! brighter skull ring on a dark background, optionally carrying a
//! hyperintense ellipsoid ("tumor") strictly inside it, plus small non-tumor
//! clutter. Everything is a pure function of the seed.

use super::{Modality, VolumeRecord};
use crate::{Error, Result, Scalar};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

const MIN_DIM: usize = 8;

/// Axis-aligned ellipsoid: `sum(((p - center) / radii)^2) <= 1`.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for i in 0..3 {
            let t = (p[i] - self.center[i]) / self.radii[i];
            q += t * t;
        }
        q
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.radius2(p) <= 1.0
    }
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Uniform point in the closed unit ball, by rejection.
fn unit_ball(rng: &mut ChaCha20Rng) -> [f64; 3] {
    loop {
        let p = [uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)];
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

/// Generates `n_cases` volumes of shape `[d, h, w]`. Each case carries a
/// tumor with probability `tumor_fraction`; tumor voxels are hyperintense
/// and recorded in the mask. Identical arguments yield bit-identical output.
pub fn generate_synthetic<T: Scalar>(
    n_cases: usize,
    d: usize,
    h: usize,
    w: usize,
    tumor_fraction: f64,
    seed: u64,
) -> Result<Vec<VolumeRecord<T>>> {
    if n_cases == 0 {
        return Err(Error::EmptyCaseList);
    }
    if d < MIN_DIM || h < MIN_DIM || w < MIN_DIM {
        return Err(Error::BadDimensions(format!(
            "volume dims ({d}, {h}, {w}) below the minimum of {MIN_DIM}"
        )));
    }
    if !(0.0..=1.0).contains(&tumor_fraction) {
        return Err(Error::InvalidConfig(format!(
            "tumor fraction {tumor_fraction} outside [0, 1]"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.04).expect("finite std");
    let speckle_amp = Normal::new(0.0, 0.12).expect("finite std");
    let plane = (h.min(w)) as f64;

    let mut out = Vec::with_capacity(n_cases);
    for idx in 0..n_cases {
        // The disk is the same in every slice of every volume: a cylinder
        // through the slab, centered, with a fixed radius. Slices then share
        // their tissue/air composition exactly, so nothing about the head
        // outline separates one slice from another — only the lesion,
        // clutter and noise vary.
        let brain = Ellipsoid {
            center: [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0],
            radii: [1e9, 0.40 * plane, 0.40 * plane],
        };
        // Contrast ordering mimics hyperintense-lesion modalities: the
        // tumor-tissue step (0.45) dwarfs the tissue-air step, so the
        // strongest feature partition in any slice is the tumor against
        // everything else, not the head against the air. Keeping tissue
        // barely above air (2.5 sigma of the noise) also denies the
        // contrastive phase any profit from annexing tissue into the
        // foreground pool: tissue looks like the background it would leave.
        let brain_gain = 0.10;
        let has_tumor = rng.gen::<f64>() < tumor_fraction;
        let tumor = has_tumor.then(|| {
            // A long lesion with a narrow size band: most positive slices cut
            // near-full cross-sections, so the pooled lesion statistics stay
            // steady from slice to slice instead of being dominated by the
            // thin caps at the lesion's ends.
            let radii = [
                uniform(&mut rng, 0.35, 0.50) * d as f64,
                uniform(&mut rng, 0.50, 0.60) * brain.radii[1],
                uniform(&mut rng, 0.50, 0.60) * brain.radii[2],
            ];
            // Sufficient for strict containment in the plane: |(c_t - c_b)/b|
            // plus the largest radius ratio stays below 1.
            let max_ratio = (1..3).map(|i| radii[i] / brain.radii[i]).fold(0.0, f64::max);
            let margin = 0.95 - max_ratio;
            let ball = unit_ball(&mut rng);
            let place = [0.40 * d as f64, margin * brain.radii[1], margin * brain.radii[2]];
            let mut center = [0.0; 3];
            for i in 0..3 {
                center[i] = brain.center[i] + ball[i] * place[i];
            }
            // The disk runs through the whole slab; the tumor must not.
            // Shrink its z-radius so it stays strictly interior.
            let mut radii = radii;
            radii[0] = radii[0].min(center[0] - 1.5).min(d as f64 - 2.5 - center[0]).max(1.0);
            Ellipsoid { center, radii }
        });
        // Lesions are textured, not flat: a one-sided speckle darkens 4-px
        // cells inside the tumor, so the lesion is distinctive in texture as
        // well as level. One-sided keeps the envelope hyperintense and the
        // slice maximum on the skull; the cell size survives the network
        // stem's downsampling.
        let speckle = tumor.is_some().then(|| {
            let cells = (d, h.div_ceil(4), w.div_ceil(4));
            Array3::from_shape_simple_fn(cells, || f64::abs(speckle_amp.sample(&mut rng)))
        });

        // Small non-tumor hyperintensities ("clutter"): tissue heterogeneity
        // that local receptive fields confuse with tumor edges while wider
        // context does not. Kept away from the tumor so the brightest tissue
        // voxels stay well below the skull shell.
        let n_clutter = rng.gen_range(4..=8);
        let mut clutter: Vec<(Ellipsoid, f64)> = Vec::with_capacity(n_clutter);
        for _ in 0..n_clutter {
            let ball = unit_ball(&mut rng);
            let center = [
                brain.center[0] + ball[0] * 0.80 * brain.radii[0].min(0.45 * d as f64),
                brain.center[1] + ball[1] * 0.80 * brain.radii[1],
                brain.center[2] + ball[2] * 0.80 * brain.radii[2],
            ];
            let radii = [
                uniform(&mut rng, 1.0, 2.2),
                uniform(&mut rng, 2.0, 5.0),
                uniform(&mut rng, 2.0, 5.0),
            ];
            let gain = uniform(&mut rng, 0.08, 0.14);
            if tumor.as_ref().is_some_and(|t| t.radius2(center) < 4.0) {
                continue; // too close to the tumor; drop rather than resample
            }
            clutter.push((Ellipsoid { center, radii }, gain));
        }

        let mut voxels = Array3::<T>::zeros((d, h, w));
        let mut mask = Array3::<u8>::zeros((d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    let q = brain.radius2(p);
                    let mut v = 0.10;
                    if q <= 1.0 {
                        v += brain_gain;
                    } else if q <= 1.21 {
                        // Bright skull shell. It pins every slice's intensity
                        // maximum so per-slice normalization cannot encode
                        // tumor presence in the global brightness level.
                        v += 0.90;
                    }
                    if let Some(t) = &tumor {
                        if t.contains(p) {
                            v += 0.45 - speckle.as_ref().expect("drawn with tumor")[[z, y / 4, x / 4]];
                            mask[[z, y, x]] = 1;
                        }
                    }
                    if let Some((_, g)) = clutter.iter().find(|(e, _)| e.contains(p)) {
                        v += g;
                    }
                    v += noise.sample(&mut rng);
                    voxels[[z, y, x]] = T::from_f64_(v.max(0.0));
                }
            }
        }
        out.push(VolumeRecord {
            case_id: format!("case{idx:04}"),
            modality: Modality::Synth,
            voxels,
            mask: Some(mask),
        });
    }
    Ok(out)
}
