//! Class activation maps: extraction from exit heads, normalization,
//! upsampling to input resolution, the plain-average baseline, a Grad-CAM
//! reference route, and the on-disk export format.

use crate::net::{ExitHead, MultiExitNet};
use crate::nn::ops;
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Where a map came from; exits are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Exit(u8),
    Averaged,
    Attentive,
    GradCam,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSource::Exit(k) => write!(f, "exit{k}"),
            MapSource::Averaged => write!(f, "averaged"),
            MapSource::Attentive => write!(f, "attentive"),
            MapSource::GradCam => write!(f, "gradcam"),
        }
    }
}

impl FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exit1" => Ok(MapSource::Exit(1)),
            "exit2" => Ok(MapSource::Exit(2)),
            "exit3" => Ok(MapSource::Exit(3)),
            "exit4" => Ok(MapSource::Exit(4)),
            "avg" | "averaged" => Ok(MapSource::Averaged),
            "attentive" => Ok(MapSource::Attentive),
            "gradcam" => Ok(MapSource::GradCam),
            other => Err(Error::InvalidConfig(format!("unknown map source: {other}"))),
        }
    }
}

/// A single-channel map with values in `[0,1]`.
///
/// Unless identically zero, the values are min-max normalized (min 0, max 1).
/// `native_resolution` records the grid the map was computed on before any
/// upsampling.
#[derive(Debug, Clone)]
pub struct ActivationMap<T> {
    pub values: Array2<T>,
    pub source: MapSource,
    pub native_resolution: (usize, usize),
}

impl<T: Scalar> ActivationMap<T> {
    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Upsamples to `(h, w)`, keeping source and native resolution.
    pub fn upsample_to(&self, h: usize, w: usize) -> Result<ActivationMap<T>> {
        Ok(ActivationMap {
            values: upsample_map(&self.values, (h, w))?,
            source: self.source,
            native_resolution: self.native_resolution,
        })
    }
}

/// `(m - min) / (max - min)`; a constant map maps to all zeros.
pub fn minmax_normalize<T: Scalar>(m: &Array2<T>) -> Result<Array2<T>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let min = m.iter().cloned().fold(T::infinity(), T::min);
    let max = m.iter().cloned().fold(T::neg_infinity(), T::max);
    if max == min {
        return Ok(Array2::zeros(m.raw_dim()));
    }
    let range = max - min;
    Ok(m.mapv(|v| (v - min) / range))
}

/// Corner-aligned bilinear upsampling; rejects shrinking targets. When the
/// input lies in `[0,1]` the output is clamped back into `[0,1]` so rounding
/// cannot push it out.
pub fn upsample_map<T: Scalar>(m: &Array2<T>, target: (usize, usize)) -> Result<Array2<T>> {
    let (h, w) = m.dim();
    let (th, tw) = target;
    if h == 0 || w == 0 || th < h || tw < w {
        return Err(Error::BadTargetSize { native: (h, w), target });
    }
    let mut out = ops::bilinear_resize2d(m, th, tw);
    let min = m.iter().cloned().fold(T::infinity(), T::min);
    let max = m.iter().cloned().fold(T::neg_infinity(), T::max);
    if min >= T::zero() && max <= T::one() {
        out.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    }
    Ok(out)
}

/// Weighted channel sum under one exit head: ReLU of
/// `sum_c weight[target_class, c] * features[c]`, min-max normalized.
pub fn compute_exit_cam<T: Scalar>(
    features: &ndarray::Array3<T>,
    head: &ExitHead<T>,
    target_class: usize,
) -> Result<ActivationMap<T>> {
    let (c, h, w) = features.dim();
    if c != head.linear.in_features {
        return Err(Error::ChannelMismatch { features: c, head: head.linear.in_features });
    }
    let weights = head.class_weights(target_class);
    let raw = weighted_channel_sum(features, &weights);
    let rectified = ops::relu(&raw);
    Ok(ActivationMap {
        values: minmax_normalize(&rectified)?,
        source: MapSource::Exit(head.exit_index as u8),
        native_resolution: (h, w),
    })
}

fn weighted_channel_sum<T: Scalar>(
    features: &ndarray::Array3<T>,
    weights: &Array1<T>,
) -> Array2<T> {
    let (c, h, w) = features.dim();
    let mut raw = Array2::zeros((h, w));
    for ch in 0..c {
        let wc = weights[ch];
        for r in 0..h {
            for col in 0..w {
                raw[[r, col]] += wc * features[[ch, r, col]];
            }
        }
    }
    raw
}

/// Sums `terms` smallest-first so that the result does not depend on the
/// order the terms arrived in. Both aggregators route their per-pixel convex
/// combinations through this, which is what makes uniform attention and the
/// plain average bit-identical.
pub(crate) fn canonical_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite terms"));
    let mut acc = T::zero();
    for &t in terms.iter() {
        acc += t;
    }
    acc
}

/// Pixel-wise arithmetic mean of the maps, then min-max normalization.
pub fn average_aggregate<T: Scalar>(cams: &[ActivationMap<T>]) -> Result<ActivationMap<T>> {
    if cams.is_empty() {
        return Err(Error::EmptyList);
    }
    let dim = cams[0].values.dim();
    if cams.iter().any(|c| c.values.dim() != dim) {
        return Err(Error::MixedResolutions);
    }
    let inv = T::from_f64_(1.0 / cams.len() as f64);
    let (h, w) = dim;
    let mut mean = Array2::zeros(dim);
    let mut terms = vec![T::zero(); cams.len()];
    for r in 0..h {
        for c in 0..w {
            for (k, cam) in cams.iter().enumerate() {
                terms[k] = cam.values[[r, c]] * inv;
            }
            mean[[r, c]] = canonical_sum(&mut terms);
        }
    }
    Ok(ActivationMap {
        values: minmax_normalize(&mean)?,
        source: MapSource::Averaged,
        native_resolution: dim,
    })
}

/// Grad-CAM on the deepest exit, via actual gradient computation: backprop a
/// one-hot logit through the head to the pooled features, spread it over the
/// feature map, pool the resulting gradient into channel weights, then build
/// the rectified weighted sum.
pub fn grad_cam_reference<T: Scalar>(
    net: &MultiExitNet<T>,
    image: &Array2<T>,
    target_class: usize,
) -> Result<ActivationMap<T>> {
    if target_class >= net.cfg.num_classes {
        return Err(Error::GradientUnavailable(format!(
            "target class {target_class} out of range for {} classes",
            net.cfg.num_classes
        )));
    }
    let out = net.forward_multi_exit(image)?;
    let f4 = &out.features[3];
    let (c, h, w) = f4.dim();

    let gap_in = f4
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("batch of one");
    let pooled = ops::gap(&gap_in);
    let mut dlogits = Array2::<T>::zeros((1, net.cfg.num_classes));
    dlogits[[0, target_class]] = T::one();
    // Clone the head so gradient accumulation cannot touch the live model.
    let mut head = net.heads[3].linear.clone();
    let dpooled = head.backward(&pooled, &dlogits);
    let dfeat = ops::gap_backward(&dpooled, h, w);

    // Channel weights: spatial mean of the feature gradient.
    let alpha_rows = ops::gap(&dfeat);
    let alpha: Array1<T> = alpha_rows.row(0).to_owned();
    let raw = weighted_channel_sum(f4, &alpha);
    let rectified = ops::relu(&raw);
    Ok(ActivationMap {
        values: minmax_normalize(&rectified)?,
        source: MapSource::GradCam,
        native_resolution: (h, w),
    })
}

/// JSON sidecar stored next to every exported map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamSidecar {
    pub case_id: String,
    pub z_index: usize,
    pub shape: [usize; 2],
    pub source: String,
    pub native_resolution: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
}

fn cam_stem(case_id: &str, z_index: usize) -> String {
    format!("{case_id}_z{z_index:04}")
}

/// Writes `<case>_z<zzzz>.cam.bin` (row-major little-endian f32) and the
/// matching `.cam.json` sidecar; returns the sidecar path.
pub fn write_cam<T: Scalar>(
    dir: &Path,
    case_id: &str,
    z_index: usize,
    map: &ActivationMap<T>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = cam_stem(case_id, z_index);
    let (h, w) = map.values.dim();
    let mut bytes = Vec::with_capacity(h * w * 4);
    for &v in map.values.iter() {
        bytes.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes());
    }
    std::fs::write(dir.join(format!("{stem}.cam.bin")), &bytes)?;
    let sidecar = CamSidecar {
        case_id: case_id.to_string(),
        z_index,
        shape: [h, w],
        source: map.source.to_string(),
        native_resolution: [map.native_resolution.0, map.native_resolution.1],
        dtype: "f32".to_string(),
        byte_order: "little-endian".to_string(),
    };
    let json_path = dir.join(format!("{stem}.cam.json"));
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(json_path)
}

/// Reads one exported map given its sidecar path.
pub fn read_cam(sidecar_path: &Path) -> Result<(CamSidecar, ActivationMap<f32>)> {
    if !sidecar_path.exists() {
        return Err(Error::MissingFile(sidecar_path.to_path_buf()));
    }
    let sidecar: CamSidecar = serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    if sidecar.dtype != "f32" {
        return Err(Error::CorruptHeader {
            path: sidecar_path.to_path_buf(),
            reason: format!("unsupported dtype {}", sidecar.dtype),
        });
    }
    // `.cam.json` -> `.cam.bin`.
    let s = sidecar_path.to_string_lossy();
    let bin_path = PathBuf::from(s.strip_suffix("json").map(|p| format!("{p}bin")).ok_or_else(
        || Error::CorruptHeader {
            path: sidecar_path.to_path_buf(),
            reason: "sidecar must end in .json".into(),
        },
    )?);
    if !bin_path.exists() {
        return Err(Error::MissingFile(bin_path));
    }
    let bytes = std::fs::read(&bin_path)?;
    let [h, w] = sidecar.shape;
    if bytes.len() != h * w * 4 {
        return Err(Error::CorruptHeader {
            path: bin_path,
            reason: format!("expected {} bytes, found {}", h * w * 4, bytes.len()),
        });
    }
    let mut values = Array2::<f32>::zeros((h, w));
    for (i, v) in values.iter_mut().enumerate() {
        *v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
    }
    let source = MapSource::from_str(&sidecar.source)?;
    let native = (sidecar.native_resolution[0], sidecar.native_resolution[1]);
    Ok((sidecar.clone(), ActivationMap { values, source, native_resolution: native }))
}

/// All exported maps under `dir`, ordered by `(case_id, z_index)`.
pub fn read_cam_dir(dir: &Path) -> Result<Vec<(CamSidecar, ActivationMap<f32>)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".cam.json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(read_cam(&p)?);
    }
    out.sort_by(|a, b| (&a.0.case_id, a.0.z_index).cmp(&(&b.0.case_id, b.0.z_index)));
    Ok(out)
}

/// 8-bit grayscale preview (`value * 255`, rounded).
pub fn write_cam_png<T: Scalar>(path: &Path, map: &ActivationMap<T>) -> Result<()> {
    let (h, w) = map.values.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (r, row) in map.values.outer_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let byte = (v.to_f64_().clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, image::Luma([byte]));
        }
    }
    img.save(path).map_err(|_| Error::UnwritablePath(path.to_path_buf()))
}
