//! On-disk volume formats.
//!
//! Two formats are supported: NIfTI (`.nii` / `.nii.gz`) and a raw pair of
//! `<case>.bin` (f32, little-endian, `[D,H,W]` row-major) plus a `<case>.json`
//! sidecar describing it. Masks live next to the image as `<case>.mask.bin`
//! (u8 per voxel) or `<case>.mask.nii[.gz]`; any value above zero counts as
//! foreground.

use super::{Modality, VolumeRecord};
use crate::{Error, Result, Scalar};
use ndarray::{Array3, ArrayD, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub modality: Option<Modality>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".nii.gz", ".nii", ".json", ".bin"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    name
}

/// Writes `<case_id>.bin` + `<case_id>.json` (+ `<case_id>.mask.bin`) into
/// `dir`. Voxels are stored as little-endian f32.
pub fn write_volume<T: Scalar>(dir: &Path, vol: &VolumeRecord<T>) -> Result<()> {
    vol.validate()?;
    std::fs::create_dir_all(dir)?;
    let (d, h, w) = vol.voxels.dim();

    let mut bytes = Vec::with_capacity(d * h * w * 4);
    for &v in vol.voxels.iter() {
        bytes.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes());
    }
    std::fs::write(dir.join(format!("{}.bin", vol.case_id)), bytes)?;

    let sidecar = VolumeSidecar {
        dims: [d, h, w],
        dtype: "f32".into(),
        byte_order: "little-endian".into(),
        case_id: Some(vol.case_id.clone()),
        modality: Some(vol.modality),
    };
    std::fs::write(
        dir.join(format!("{}.json", vol.case_id)),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;

    if let Some(mask) = &vol.mask {
        let bytes: Vec<u8> = mask.iter().copied().collect();
        std::fs::write(dir.join(format!("{}.mask.bin", vol.case_id)), bytes)?;
    }
    Ok(())
}

fn read_mask_bin(path: &Path, dims: (usize, usize, usize)) -> Result<Array3<u8>> {
    let bytes = std::fs::read(path)?;
    let n = dims.0 * dims.1 * dims.2;
    if bytes.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![dims.0, dims.1, dims.2],
            got: vec![bytes.len()],
        });
    }
    let coerced: Vec<u8> = bytes.iter().map(|&b| u8::from(b > 0)).collect();
    Ok(Array3::from_shape_vec(dims, coerced).expect("length checked"))
}

fn load_raw_volume<T: Scalar>(
    path: &Path,
    fallback_modality: Modality,
    mask_path: Option<&Path>,
) -> Result<VolumeRecord<T>> {
    // Accept either half of the pair; derive the other by suffix.
    let name = path.to_string_lossy();
    let (sidecar_path, bin_path) = if name.ends_with(".json") {
        (path.to_path_buf(), PathBuf::from(format!("{}bin", &name[..name.len() - 4])))
    } else {
        (PathBuf::from(format!("{}json", &name[..name.len() - 3])), path.to_path_buf())
    };
    if !sidecar_path.exists() {
        return Err(Error::MissingFile(sidecar_path));
    }
    if !bin_path.exists() {
        return Err(Error::MissingFile(bin_path));
    }

    let sidecar: VolumeSidecar = serde_json::from_slice(&std::fs::read(&sidecar_path)?)
        .map_err(|e| corrupt(&sidecar_path, e.to_string()))?;
    if sidecar.dtype != "f32" {
        return Err(corrupt(&sidecar_path, format!("unsupported dtype {}", sidecar.dtype)));
    }
    if sidecar.byte_order != "little-endian" {
        return Err(corrupt(&sidecar_path, format!("unsupported byte order {}", sidecar.byte_order)));
    }
    let [d, h, w] = sidecar.dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(corrupt(&sidecar_path, "zero-sized dims"));
    }

    let bytes = std::fs::read(&bin_path)?;
    if bytes.len() != d * h * w * 4 {
        return Err(Error::ShapeMismatch { expected: vec![d, h, w], got: vec![bytes.len() / 4] });
    }
    let mut values = Vec::with_capacity(d * h * w);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(Error::NonFiniteVoxels);
        }
        values.push(T::from_f64_(v as f64));
    }
    let voxels = Array3::from_shape_vec((d, h, w), values).expect("length checked");

    let default_mask = PathBuf::from(format!(
        "{}.mask.bin",
        bin_path.to_string_lossy().strip_suffix(".bin").expect("bin suffix")
    ));
    let mask = match mask_path {
        Some(p) => Some(read_mask_bin(p, (d, h, w))?),
        None if default_mask.exists() => Some(read_mask_bin(&default_mask, (d, h, w))?),
        None => None,
    };

    Ok(VolumeRecord {
        case_id: sidecar.case_id.unwrap_or_else(|| file_stem(path)),
        modality: sidecar.modality.unwrap_or(fallback_modality),
        voxels,
        mask,
    })
}

fn load_nifti_array(path: &Path) -> Result<ArrayD<f32>> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))?;
    obj.into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))
}

/// Loads a NIfTI volume, reordering axes from the file's `(x, y, z)` layout
/// to `[D, H, W]` = `[z, y, x]`.
fn load_nifti_volume<T: Scalar>(
    path: &Path,
    modality: Modality,
    mask_path: Option<&Path>,
) -> Result<VolumeRecord<T>> {
    let arr = load_nifti_array(path)?;
    if arr.ndim() != 3 {
        return Err(corrupt(path, format!("expected a 3D volume, got {} axes", arr.ndim())));
    }
    let xyz = arr.into_dimensionality::<Ix3>().expect("checked ndim");
    if xyz.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteVoxels);
    }
    let zyx = xyz.permuted_axes([2, 1, 0]);
    let voxels = zyx.mapv(|v| T::from_f64_(v as f64)).as_standard_layout().to_owned();

    let mask = match mask_path {
        Some(p) => {
            let m = load_nifti_array(p)?;
            if m.shape() != [voxels.dim().2, voxels.dim().1, voxels.dim().0] {
                return Err(Error::ShapeMismatch {
                    expected: vec![voxels.dim().2, voxels.dim().1, voxels.dim().0],
                    got: m.shape().to_vec(),
                });
            }
            let m3 = m.into_dimensionality::<Ix3>().expect("3d check above");
            Some(
                m3.permuted_axes([2, 1, 0])
                    .mapv(|v| u8::from(v > 0.0))
                    .as_standard_layout()
                    .to_owned(),
            )
        }
        None => None,
    };

    Ok(VolumeRecord { case_id: file_stem(path), modality, voxels, mask })
}

fn guess_modality(stem: &str) -> Modality {
    let lower = stem.to_lowercase();
    if lower.contains("t1ce") {
        Modality::T1ce
    } else if lower.contains("flair") {
        Modality::T2Flair
    } else if lower.contains("t2") {
        Modality::T2
    } else if lower.contains("t1") {
        Modality::T1
    } else {
        Modality::Synth
    }
}

/// Loads a single volume; the format is chosen by extension. For raw pairs
/// `path` may point at either the `.bin` or the `.json` half.
pub fn load_volume<T: Scalar>(path: &Path, mask_path: Option<&Path>) -> Result<VolumeRecord<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let name = path.to_string_lossy();
    let modality = guess_modality(&file_stem(path));
    let vol = if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti_volume(path, modality, mask_path)?
    } else if name.ends_with(".json") || name.ends_with(".bin") {
        load_raw_volume(path, modality, mask_path)?
    } else {
        return Err(corrupt(path, "unsupported extension (want .nii, .nii.gz, .bin or .json)"));
    };
    vol.validate()?;
    Ok(vol)
}

/// Loads every volume in a directory (raw sidecar pairs and NIfTI files),
/// sorted by case id. Mask files are attached, never listed as cases.
pub fn load_volume_dir<T: Scalar>(dir: &Path) -> Result<Vec<VolumeRecord<T>>> {
    if !dir.exists() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.contains(".mask.") {
            continue;
        }
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            paths.push(path);
        } else if name.ends_with(".json") && !name.ends_with(".cam.json") {
            // Only volume sidecars qualify; other JSON (manifests, reports)
            // lacks the dims field and is skipped.
            let Ok(bytes) = std::fs::read(&path) else { continue };
            if serde_json::from_slice::<VolumeSidecar>(&bytes).is_ok() {
                paths.push(path);
            }
        }
    }
    paths.sort();

    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.to_string_lossy().into_owned();
        let mask_path = if name.ends_with(".nii.gz") || name.ends_with(".nii") {
            let candidate = if let Some(base) = name.strip_suffix(".nii.gz") {
                PathBuf::from(format!("{base}.mask.nii.gz"))
            } else {
                PathBuf::from(format!("{}.mask.nii", name.strip_suffix(".nii").expect("nii")))
            };
            candidate.exists().then_some(candidate)
        } else {
            None // raw loader finds its sibling mask on its own
        };
        out.push(load_volume(&path, mask_path.as_deref())?);
    }
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use ndarray::Array3;

    fn sample_volume() -> VolumeRecord<f32> {
        generate_synthetic::<f32>(1, 8, 10, 12, 1.0, 5).unwrap().remove(0)
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample_volume();
        write_volume(dir.path(), &vol).unwrap();
        let back: VolumeRecord<f32> =
            load_volume(&dir.path().join("case0000.json"), None).unwrap();
        assert_eq!(back.case_id, vol.case_id);
        assert_eq!(back.modality, vol.modality);
        assert_eq!(back.voxels.dim(), vol.voxels.dim());
        assert!(back
            .voxels
            .iter()
            .zip(vol.voxels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.mask, vol.mask);

        // Pointing at the .bin half works too.
        let again: VolumeRecord<f32> = load_volume(&dir.path().join("case0000.bin"), None).unwrap();
        assert_eq!(again.voxels, back.voxels);
    }

    #[test]
    fn missing_and_corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume::<f32>(&dir.path().join("nope.json"), None),
            Err(Error::MissingFile(_))
        ));

        std::fs::write(dir.path().join("bad.json"), b"{not json").unwrap();
        std::fs::write(dir.path().join("bad.bin"), [0u8; 4]).unwrap();
        assert!(matches!(
            load_volume::<f32>(&dir.path().join("bad.json"), None),
            Err(Error::CorruptHeader { .. })
        ));
    }

    #[test]
    fn payload_size_must_match_dims() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample_volume();
        write_volume(dir.path(), &vol).unwrap();
        let bin = dir.path().join("case0000.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            load_volume::<f32>(&dir.path().join("case0000.json"), None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = sample_volume();
        vol.mask = None;
        write_volume(dir.path(), &vol).unwrap();
        let bin = dir.path().join("case0000.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            load_volume::<f32>(&dir.path().join("case0000.json"), None),
            Err(Error::NonFiniteVoxels)
        ));
    }

    #[test]
    fn mask_values_are_coerced_to_binary() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = sample_volume();
        vol.mask = Some(Array3::zeros(vol.voxels.dim()));
        write_volume(dir.path(), &vol).unwrap();
        let mask_path = dir.path().join("case0000.mask.bin");
        let mut bytes = std::fs::read(&mask_path).unwrap();
        bytes[0] = 0;
        bytes[1] = 1;
        bytes[2] = 5; // label 5 still means foreground
        std::fs::write(&mask_path, bytes).unwrap();
        let back: VolumeRecord<f32> = load_volume(&dir.path().join("case0000.json"), None).unwrap();
        let mask = back.mask.unwrap();
        let flat: Vec<u8> = mask.iter().copied().take(3).collect();
        assert_eq!(flat, [0, 1, 1]);
        assert!(mask.iter().all(|&m| m <= 1));
    }

    #[test]
    fn directory_scan_finds_all_cases_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for vol in generate_synthetic::<f32>(3, 8, 10, 10, 0.5, 2).unwrap() {
            write_volume(dir.path(), &vol).unwrap();
        }
        // Unrelated JSON must not be picked up.
        std::fs::write(dir.path().join("manifest.json"), b"{\"entries\": []}").unwrap();
        let vols: Vec<VolumeRecord<f32>> = load_volume_dir(dir.path()).unwrap();
        let ids: Vec<&str> = vols.iter().map(|v| v.case_id.as_str()).collect();
        assert_eq!(ids, ["case0000", "case0001", "case0002"]);
        assert!(vols.iter().all(|v| v.mask.is_some()));
    }

    #[test]
    fn nifti_round_trip_reorders_axes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan_t2.nii");
        // Written with axes (x, y, z) = (4, 3, 2); distinct value per voxel.
        let xyz = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        nifti::writer::WriterOptions::new(&path)
            .write_nifti(&xyz)
            .expect("write nifti");
        let vol: VolumeRecord<f32> = load_volume(&path, None).unwrap();
        assert_eq!(vol.voxels.dim(), (2, 3, 4), "loaded as [D, H, W]");
        assert_eq!(vol.modality, Modality::T2);
        for ((x, y, z), &v) in xyz.indexed_iter() {
            assert_eq!(vol.voxels[[z, y, x]], v);
        }
    }
}
