//! Volumes, slices, labels and split manifests.
//!
//! Volumes arrive as `[D, H, W]` stacks with optional binary masks. Slicing
//! walks the z axis, min-max normalizes every plane to `[0,1]` and derives
//! the image-level label from the mask plane. Splits are assigned per case so
//! no case leaks across train/val/test.

pub mod io;
pub mod synth;

pub use synth::generate_synthetic;

use crate::{Error, Result, Scalar};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T1")]
    T1,
    #[serde(rename = "T1CE")]
    T1ce,
    #[serde(rename = "T2")]
    T2,
    #[serde(rename = "T2FLAIR")]
    T2Flair,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::T1 => "T1",
            Modality::T1ce => "T1CE",
            Modality::T2 => "T2",
            Modality::T2Flair => "T2FLAIR",
            Modality::Synth => "SYNTH",
        };
        f.write_str(s)
    }
}

/// One 3D scan: `voxels[z, y, x]`, mask (when present) in `{0,1}` with the
/// same shape.
#[derive(Debug, Clone)]
pub struct VolumeRecord<T> {
    pub case_id: String,
    pub modality: Modality,
    pub voxels: Array3<T>,
    pub mask: Option<Array3<u8>>,
}

impl<T: Scalar> VolumeRecord<T> {
    pub fn validate(&self) -> Result<()> {
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxels);
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != self.voxels.dim() {
                return Err(Error::ShapeMismatch {
                    expected: self.voxels.shape().to_vec(),
                    got: mask.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// One axial plane, normalized to `[0,1]`, with its image-level label.
///
/// `raw_min`/`raw_max` are the pre-normalization extrema of the plane, kept
/// so the raw values can be reconstructed.
#[derive(Debug, Clone)]
pub struct SliceSample<T> {
    pub case_id: String,
    pub z_index: usize,
    pub image: Array2<T>,
    pub label: u8,
    pub gt_mask: Option<Array2<u8>>,
    pub modality: Modality,
    pub raw_min: T,
    pub raw_max: T,
}

impl<T: Scalar> SliceSample<T> {
    /// Undoes the per-slice normalization.
    pub fn denormalize(&self) -> Array2<T> {
        let range = self.raw_max - self.raw_min;
        self.image.mapv(|v| v * range + self.raw_min)
    }
}

/// 1 iff any pixel of the plane is set.
pub fn derive_slice_label(mask_plane: &Array2<u8>) -> u8 {
    u8::from(mask_plane.iter().any(|&v| v != 0))
}

/// Min-max normalization of one plane; constant planes map to all-zero.
/// Returns the image together with the extrema it was normalized by.
pub fn normalize_plane<T: Scalar>(plane: &Array2<T>) -> (Array2<T>, T, T) {
    let raw_min = plane.iter().cloned().fold(T::infinity(), T::min);
    let raw_max = plane.iter().cloned().fold(T::neg_infinity(), T::max);
    let image = if raw_max == raw_min {
        Array2::zeros(plane.raw_dim())
    } else {
        let range = raw_max - raw_min;
        plane.mapv(|v| (v - raw_min) / range)
    };
    (image, raw_min, raw_max)
}

/// Splits a volume into `D` normalized slices ordered by `z_index`.
///
/// Labels come from the mask, so the volume must carry one; constant planes
/// normalize to all-zero.
pub fn slice_volume<T: Scalar>(vol: &VolumeRecord<T>) -> Result<Vec<SliceSample<T>>> {
    vol.validate()?;
    let mask = vol.mask.as_ref().ok_or(Error::MissingMask)?;
    let (d, _, _) = vol.voxels.dim();
    let mut out = Vec::with_capacity(d);
    for z in 0..d {
        let plane = vol.voxels.index_axis(Axis(0), z).to_owned();
        let (image, raw_min, raw_max) = normalize_plane(&plane);
        let gt = mask.index_axis(Axis(0), z).to_owned();
        let label = derive_slice_label(&gt);
        out.push(SliceSample {
            case_id: vol.case_id.clone(),
            z_index: z,
            image,
            label,
            gt_mask: Some(gt),
            modality: vol.modality,
            raw_min,
            raw_max,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub z_index: usize,
    pub split: Split,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub counts: SplitCounts,
    /// Volume directory the manifest was built from, so downstream commands
    /// can locate the data without an extra flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Split of a case, if the case appears at all.
    pub fn case_split(&self, case_id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.case_id == case_id).map(|e| e.split)
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Shuffles cases with the seed, carves contiguous blocks per ratio, then
/// lists every slice of every case under its case's split.
pub fn build_manifest<T: Scalar>(
    cases: &[VolumeRecord<T>],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    if cases.is_empty() {
        return Err(Error::EmptyCaseList);
    }
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(r));
    }
    let needed = r.iter().filter(|&&x| x > 0.0).count();
    if needed == 0 {
        return Err(Error::BadRatios(r));
    }
    if cases.len() < needed {
        return Err(Error::TooFewCases { got: cases.len(), needed });
    }

    let mut ids: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    // Floor-cumulative block sizes keep the total exact.
    let c1 = (n as f64 * r[0]).floor() as usize;
    let c2 = (n as f64 * (r[0] + r[1])).floor() as usize;
    let mut sizes = [c1, c2 - c1, n - c2];
    // A positive ratio must own at least one case; steal from the largest.
    loop {
        let Some(empty) = (0..3).find(|&i| r[i] > 0.0 && sizes[i] == 0) else {
            break;
        };
        let donor = (0..3).max_by_key(|&i| sizes[i]).expect("three splits");
        debug_assert!(sizes[donor] > 1);
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }

    let mut split_of: HashMap<&str, Split> = HashMap::new();
    let mut cursor = 0usize;
    for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        for id in &ids[cursor..cursor + sizes[i]] {
            split_of.insert(id, split);
        }
        cursor += sizes[i];
    }

    let mut entries = Vec::new();
    let mut counts = SplitCounts::default();
    for case in cases {
        let split = split_of[case.case_id.as_str()];
        for sample in slice_volume(case)? {
            counts.bump(split);
            entries.push(ManifestEntry {
                case_id: sample.case_id,
                z_index: sample.z_index,
                split,
                label: sample.label,
            });
        }
    }
    Ok(DatasetManifest { entries, seed, counts, data_dir: None })
}

/// Slices of one split, in manifest order.
pub fn collect_split_slices<T: Scalar>(
    volumes: &[VolumeRecord<T>],
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<SliceSample<T>>> {
    let mut sliced: HashMap<&str, Vec<SliceSample<T>>> = HashMap::new();
    for vol in volumes {
        if manifest.case_split(&vol.case_id) == Some(split) {
            sliced.insert(vol.case_id.as_str(), slice_volume(vol)?);
        }
    }
    let mut out = Vec::new();
    for entry in manifest.entries_for(split) {
        let samples = sliced.get(entry.case_id.as_str()).ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!(
                "manifest case {} not found in the data directory",
                entry.case_id
            ))
        })?;
        if entry.z_index >= samples.len() {
            return Err(Error::BadDimensions(format!(
                "manifest z {} exceeds depth {} of case {}",
                entry.z_index,
                samples.len(),
                entry.case_id
            )));
        }
        out.push(samples[entry.z_index].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use std::collections::HashSet;

    fn volume_with_mask(case_id: &str, d: usize) -> VolumeRecord<f64> {
        let voxels = Array3::from_shape_fn((d, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f64);
        let mut mask = Array3::<u8>::zeros((d, 4, 4));
        mask[[0, 1, 1]] = 1;
        VolumeRecord { case_id: case_id.into(), modality: Modality::Synth, voxels, mask: Some(mask) }
    }

    #[test]
    fn validate_catches_nan_and_mask_shape() {
        let mut vol = volume_with_mask("a", 2);
        vol.voxels[[0, 0, 0]] = f64::NAN;
        assert!(matches!(vol.validate(), Err(Error::NonFiniteVoxels)));

        let mut vol = volume_with_mask("a", 2);
        vol.mask = Some(Array3::zeros((2, 4, 3)));
        assert!(matches!(vol.validate(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn slices_come_out_in_z_order_and_normalized() {
        let vol = volume_with_mask("a", 4);
        let slices = slice_volume(&vol).unwrap();
        assert_eq!(slices.len(), 4);
        for (z, s) in slices.iter().enumerate() {
            assert_eq!(s.z_index, z);
            let min = s.image.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = s.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, 0.0);
            assert_eq!(max, 1.0);
        }
        assert_eq!(slices[0].label, 1);
        assert_eq!(slices[1].label, 0);
    }

    #[test]
    fn min_max_endpoints_map_to_zero_and_one() {
        let mut vol = volume_with_mask("a", 1);
        vol.voxels = Array3::from_shape_fn((1, 1, 2), |(_, _, x)| if x == 0 { 100.0 } else { 300.0 });
        vol.mask = Some(Array3::zeros((1, 1, 2)));
        let slices = slice_volume(&vol).unwrap();
        assert_eq!(slices[0].image, arr2(&[[0.0, 1.0]]));
    }

    #[test]
    fn constant_slice_normalizes_to_zero() {
        let mut vol = volume_with_mask("a", 1);
        vol.voxels = Array3::from_elem((1, 3, 3), 7.0);
        vol.mask = Some(Array3::zeros((1, 3, 3)));
        let slices = slice_volume(&vol).unwrap();
        assert!(slices[0].image.iter().all(|&v| v == 0.0));
        // Denormalization still reconstructs the constant plane.
        assert!(slices[0].denormalize().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn denormalization_reconstructs_raw_planes() {
        let vol = volume_with_mask("a", 3);
        let slices = slice_volume(&vol).unwrap();
        for (z, s) in slices.iter().enumerate() {
            let raw = s.denormalize();
            for (r, row) in raw.outer_iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    assert_abs_diff_eq!(v, vol.voxels[[z, r, c]], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn label_requires_a_mask() {
        let mut vol = volume_with_mask("a", 2);
        vol.mask = None;
        assert!(matches!(slice_volume(&vol), Err(Error::MissingMask)));
    }

    #[test]
    fn derive_label_edge_cases() {
        assert_eq!(derive_slice_label(&Array2::zeros((8, 8))), 0);
        let mut one = Array2::<u8>::zeros((8, 8));
        one[[3, 5]] = 1;
        assert_eq!(derive_slice_label(&one), 1);
        assert_eq!(derive_slice_label(&Array2::ones((8, 8))), 1);
    }

    #[test]
    fn manifest_splits_ten_cases_eight_one_one() {
        let cases: Vec<VolumeRecord<f64>> =
            (0..10).map(|i| volume_with_mask(&format!("case{i:02}"), 2)).collect();
        let manifest = build_manifest(&cases, (0.8, 0.1, 0.1), 7).unwrap();
        let mut case_splits: HashMap<&str, HashSet<Split>> = HashMap::new();
        for e in &manifest.entries {
            case_splits.entry(e.case_id.as_str()).or_default().insert(e.split);
        }
        assert_eq!(case_splits.len(), 10);
        // All slices of a case share its split.
        assert!(case_splits.values().all(|s| s.len() == 1));
        let count_cases = |split: Split| {
            case_splits.values().filter(|s| s.contains(&split)).count()
        };
        assert_eq!(count_cases(Split::Train), 8);
        assert_eq!(count_cases(Split::Val), 1);
        assert_eq!(count_cases(Split::Test), 1);
        // Counts tally entries (slices), two per case.
        assert_eq!(manifest.counts, SplitCounts { train: 16, val: 2, test: 2 });
    }

    #[test]
    fn manifest_is_deterministic_and_case_disjoint() {
        let cases: Vec<VolumeRecord<f64>> =
            (0..7).map(|i| volume_with_mask(&format!("c{i}"), 3)).collect();
        let a = build_manifest(&cases, (0.6, 0.2, 0.2), 11).unwrap();
        let b = build_manifest(&cases, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(a, b);
        let keys: HashSet<(String, usize)> =
            a.entries.iter().map(|e| (e.case_id.clone(), e.z_index)).collect();
        assert_eq!(keys.len(), a.entries.len(), "every slice appears exactly once");
    }

    #[test]
    fn manifest_rejects_degenerate_inputs() {
        let cases: Vec<VolumeRecord<f64>> = vec![volume_with_mask("only", 2)];
        assert!(matches!(
            build_manifest(&cases, (0.8, 0.1, 0.1), 1),
            Err(Error::TooFewCases { got: 1, needed: 3 })
        ));
        assert!(matches!(
            build_manifest::<f64>(&[], (0.8, 0.1, 0.1), 1),
            Err(Error::EmptyCaseList)
        ));
        assert!(matches!(
            build_manifest(&cases, (0.5, 0.2, 0.2), 1),
            Err(Error::BadRatios(_))
        ));
    }

    #[test]
    fn small_case_counts_still_fill_every_positive_split() {
        let cases: Vec<VolumeRecord<f64>> =
            (0..3).map(|i| volume_with_mask(&format!("c{i}"), 1)).collect();
        let manifest = build_manifest(&cases, (0.8, 0.1, 0.1), 3).unwrap();
        assert!(manifest.counts.train >= 1);
        assert!(manifest.counts.val >= 1);
        assert!(manifest.counts.test >= 1);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let cases: Vec<VolumeRecord<f64>> =
            (0..4).map(|i| volume_with_mask(&format!("c{i}"), 2)).collect();
        let manifest = build_manifest(&cases, (0.5, 0.25, 0.25), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), manifest);
    }

    #[test]
    fn split_slices_follow_the_manifest() {
        let cases: Vec<VolumeRecord<f64>> =
            (0..4).map(|i| volume_with_mask(&format!("c{i}"), 2)).collect();
        let manifest = build_manifest(&cases, (0.5, 0.25, 0.25), 5).unwrap();
        let train = collect_split_slices(&cases, &manifest, Split::Train).unwrap();
        assert_eq!(train.len(), manifest.counts.train);
        for (sample, entry) in train.iter().zip(manifest.entries_for(Split::Train)) {
            assert_eq!(sample.case_id, entry.case_id);
            assert_eq!(sample.z_index, entry.z_index);
            assert_eq!(sample.label, entry.label);
        }
    }
}
