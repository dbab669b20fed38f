//! End-to-end command implementations behind the CLI, pinned to f32. Each
//! function is callable from tests so the binary stays a thin argument
//! parser.

use crate::cam::{
    self, average_aggregate, compute_exit_cam, grad_cam_reference, ActivationMap, MapSource,
};
use crate::config::RunConfig;
use crate::data::io::{load_volume_dir, write_volume};
use crate::data::{
    build_manifest, generate_synthetic, normalize_plane, collect_split_slices, DatasetManifest,
    Split, VolumeRecord,
};
use crate::eval::{evaluate_pairs, threshold_map, EvalPair, MetricsReport};
use crate::net::NUM_EXITS;
use crate::overlay::render_overlay;
use crate::train::{
    load_checkpoint, run_aggregation_phase, run_multi_exit_phase, run_pretrain_phase,
    save_checkpoint, write_training_log, CheckpointMeta, EpochLog, ModelBundle, Phase,
    ACCURACY_TARGET,
};
use crate::{agg, Error, PipelineScalar as S, Result};
use ndarray::{Array2, Axis};
use serde_json::json;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub fn cmd_synth(
    cases: usize,
    dims: (usize, usize, usize),
    tumor_frac: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let volumes = generate_synthetic::<S>(cases, dims.0, dims.1, dims.2, tumor_frac, seed)?;
    for vol in &volumes {
        write_volume(out, vol)?;
    }
    println!("wrote {} volumes of shape {:?} to {}", volumes.len(), dims, out.display());
    Ok(())
}

pub fn cmd_manifest(data: &Path, ratios: (f64, f64, f64), seed: u64, out: &Path) -> Result<()> {
    let volumes: Vec<VolumeRecord<S>> = load_volume_dir(data)?;
    let mut manifest = build_manifest(&volumes, ratios, seed)?;
    manifest.data_dir = Some(data.to_path_buf());
    manifest.save(out)?;
    println!(
        "manifest: {} train / {} val / {} test slices over {} cases -> {}",
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        volumes.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub ckpt_out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn cmd_pretrain(args: &TrainArgs) -> Result<()> {
    run_training(args, Phase::Pretrain)
}

pub fn cmd_train_classifier(args: &TrainArgs) -> Result<()> {
    run_training(args, Phase::MultiExit)
}

pub fn cmd_train_aggregator(args: &TrainArgs) -> Result<()> {
    run_training(args, Phase::Aggregation)
}

/// Per-checkpoint CSV log path: `model.ckpt` -> `model.log.csv`.
fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<VolumeRecord<S>>, DatasetManifest)> {
    let volumes = load_volume_dir(&cfg.data.data_dir)?;
    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    Ok((volumes, manifest))
}

/// Fresh bundle, or the resumed one after structural compatibility checks.
/// Non-structural aggregation knobs (loss arm, epsilon) follow the new
/// config; the architecture must match the checkpoint exactly.
fn prepare_bundle(
    cfg: &RunConfig,
    resume: Option<&Path>,
    required_phase: Option<Phase>,
) -> Result<(ModelBundle<S>, Vec<EpochLog>)> {
    let Some(path) = resume else {
        return Ok((ModelBundle::new(&cfg.backbone, &cfg.aggregation, cfg.phase.seed)?, Vec::new()));
    };
    let (meta, mut bundle) = load_checkpoint::<S>(path)?;
    if meta.run.backbone != cfg.backbone {
        return Err(Error::IncompatibleCheckpoint(
            "backbone configuration differs from the checkpoint".into(),
        ));
    }
    if meta.run.aggregation.attention_hidden != cfg.aggregation.attention_hidden {
        return Err(Error::IncompatibleCheckpoint(
            "attention width differs from the checkpoint".into(),
        ));
    }
    if let Some(phase) = required_phase {
        if meta.phase != phase {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {phase} checkpoint, found {}",
                meta.phase
            )));
        }
    }
    bundle.agg_cfg = cfg.aggregation.clone();
    Ok((bundle, meta.metrics))
}

fn run_training(args: &TrainArgs, phase: Phase) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.phase.phase = phase; // the subcommand, not the file, decides the phase
    cfg.validate()?;
    let (volumes, manifest) = load_dataset(&cfg)?;
    let train = collect_split_slices(&volumes, &manifest, Split::Train)?;
    let val = collect_split_slices(&volumes, &manifest, Split::Val)?;

    if phase == Phase::Aggregation && args.resume.is_none() {
        return Err(Error::InvalidConfig(
            "the aggregation phase needs --resume with a trained classifier checkpoint".into(),
        ));
    }
    let required = (phase == Phase::Aggregation).then_some(Phase::MultiExit);
    let (mut bundle, mut metrics) = prepare_bundle(&cfg, args.resume.as_deref(), required)?;

    let report = match phase {
        Phase::Pretrain => run_pretrain_phase(&mut bundle, &train, &cfg.phase)?,
        Phase::MultiExit => {
            run_multi_exit_phase(&mut bundle, &train, &val, &cfg.phase, ACCURACY_TARGET)?
        }
        Phase::Aggregation => run_aggregation_phase(&mut bundle, &train, &cfg.phase)?,
    };
    metrics.extend(report.logs.iter().cloned());

    let meta = CheckpointMeta {
        phase,
        epoch: report.epochs_run,
        seed: cfg.phase.seed,
        dtype: String::new(), // filled by save_checkpoint
        run: cfg,
        metrics: metrics.clone(),
        tensors: Vec::new(),
    };
    save_checkpoint(&args.ckpt_out, &bundle, meta)?;
    write_training_log(&log_path(&args.ckpt_out), &metrics)?;
    println!(
        "{phase}: {} epochs, final loss {:.4}{} -> {}",
        report.epochs_run,
        report.final_loss,
        if report.early_stopped { " (early stop)" } else { "" },
        args.ckpt_out.display()
    );
    Ok(())
}

/// One activation map for one slice under the requested mode.
pub fn compute_map(
    bundle: &ModelBundle<S>,
    image: &Array2<S>,
    mode: MapSource,
) -> Result<ActivationMap<S>> {
    const TARGET: usize = 1; // tumor class
    let size = bundle.backbone_cfg.input_size;
    let exit_cams = |out: &crate::net::MultiExitOutput<S>| -> Result<Vec<ActivationMap<S>>> {
        (0..NUM_EXITS)
            .map(|k| {
                compute_exit_cam(&out.features[k], &bundle.net.heads[k], TARGET)?
                    .upsample_to(size, size)
            })
            .collect()
    };
    match mode {
        MapSource::Exit(k) => {
            if !(1..=NUM_EXITS as u8).contains(&k) {
                return Err(Error::InvalidConfig(format!("exit {k} out of range")));
            }
            let out = bundle.net.forward_multi_exit(image)?;
            let idx = k as usize - 1;
            compute_exit_cam(&out.features[idx], &bundle.net.heads[idx], TARGET)?
                .upsample_to(size, size)
        }
        MapSource::Averaged => {
            let out = bundle.net.forward_multi_exit(image)?;
            average_aggregate(&exit_cams(&out)?)
        }
        MapSource::Attentive => {
            let out = bundle.net.forward_multi_exit(image)?;
            let cams = exit_cams(&out)?;
            let field = agg::attention_forward(image, &cams, &bundle.attention)?;
            agg::attentive_aggregate(&cams, &field)
        }
        MapSource::GradCam => {
            grad_cam_reference(&bundle.net, image, TARGET)?.upsample_to(size, size)
        }
    }
}

pub fn cmd_cam(
    ckpt: &Path,
    split: Split,
    mode: MapSource,
    out: &Path,
    data: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let (meta, bundle) = load_checkpoint::<S>(ckpt)?;
    let data_dir = data.unwrap_or(&meta.run.data.data_dir);
    let man_path = manifest_path.unwrap_or(&meta.run.data.manifest);
    let volumes: Vec<VolumeRecord<S>> = load_volume_dir(data_dir)?;
    let manifest = DatasetManifest::load(man_path)?;
    let slices = collect_split_slices(&volumes, &manifest, split)?;
    if slices.is_empty() {
        return Err(Error::NoEvaluableSamples);
    }
    for s in &slices {
        let map = compute_map(&bundle, &s.image, mode)?;
        cam::write_cam(out, &s.case_id, s.z_index, &map)?;
    }
    println!("wrote {} {mode} maps for split {split} to {}", slices.len(), out.display());
    Ok(())
}

/// `A:B:STEP` threshold sweep range (inclusive of B up to rounding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sweep {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Sweep {
    pub fn thresholds(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let t = self.lo + self.step * k as f64;
            if t > self.hi + 1e-12 {
                break;
            }
            out.push(t);
            k += 1;
        }
        out
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let err = || Error::InvalidConfig(format!("bad sweep spec {s:?} (want A:B:STEP)"));
        if parts.len() != 3 {
            return Err(err());
        }
        let nums: Vec<f64> =
            parts.iter().map(|p| p.parse::<f64>().map_err(|_| err())).collect::<Result<_>>()?;
        let sweep = Sweep { lo: nums[0], hi: nums[1], step: nums[2] };
        if !(sweep.lo > 0.0 && sweep.hi < 1.0 && sweep.lo <= sweep.hi && sweep.step > 0.0) {
            return Err(Error::BadThreshold(sweep.lo));
        }
        Ok(sweep)
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub cams: PathBuf,
    pub manifest: PathBuf,
    /// Volume directory; defaults to the manifest's parent directory.
    pub data: Option<PathBuf>,
    pub threshold: f64,
    pub sweep: Option<Sweep>,
    pub report: PathBuf,
    pub csv: PathBuf,
}

fn gt_masks_by_slice(
    volumes: &[VolumeRecord<S>],
) -> HashMap<(String, usize), Array2<u8>> {
    let mut masks = HashMap::new();
    for vol in volumes {
        if let Some(mask) = &vol.mask {
            for z in 0..mask.dim().0 {
                masks.insert(
                    (vol.case_id.clone(), z),
                    mask.index_axis(Axis(0), z).to_owned(),
                );
            }
        }
    }
    masks
}

fn pairs_at_threshold(
    cams: &[(cam::CamSidecar, ActivationMap<S>)],
    masks: &HashMap<(String, usize), Array2<u8>>,
    threshold: f64,
) -> Result<Vec<EvalPair>> {
    let mut pairs = Vec::with_capacity(cams.len());
    for (sidecar, map) in cams {
        let key = (sidecar.case_id.clone(), sidecar.z_index);
        let gt = masks.get(&key).ok_or(Error::MissingMask)?;
        let pred = threshold_map(map, threshold)?;
        pairs.push(EvalPair {
            case_id: sidecar.case_id.clone(),
            z_index: sidecar.z_index,
            pred: pred.values,
            gt: gt.clone(),
        });
    }
    Ok(pairs)
}

fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("case_id,z_index,dice,iou,hd95\n");
    for row in &report.per_sample {
        let hd = row.hd95.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{hd}\n", row.case_id, row.z_index, row.dice, row.iou));
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let manifest_dir = args
        .manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let data_dir = args
        .data
        .clone()
        .or(manifest.data_dir)
        .unwrap_or(manifest_dir);
    let volumes: Vec<VolumeRecord<S>> = load_volume_dir(&data_dir)?;
    let masks = gt_masks_by_slice(&volumes);
    let cams = cam::read_cam_dir(&args.cams)?;
    if cams.is_empty() {
        return Err(Error::NoEvaluableSamples);
    }

    let report = evaluate_pairs(&pairs_at_threshold(&cams, &masks, args.threshold)?)?;

    let mut doc = serde_json::to_value(&report)?;
    doc["config"] = json!({
        "cams": args.cams.display().to_string(),
        "manifest": args.manifest.display().to_string(),
        "data": data_dir.display().to_string(),
        "threshold": args.threshold,
        "sweep": args.sweep.map(|s| format!("{}:{}:{}", s.lo, s.hi, s.step)),
    });
    if let Some(sweep) = args.sweep {
        let mut rows = Vec::new();
        for t in sweep.thresholds() {
            let r = evaluate_pairs(&pairs_at_threshold(&cams, &masks, t)?)?;
            rows.push(json!({
                "threshold": t,
                "dice_mean": r.summary.dice.mean,
                "iou_mean": r.summary.iou.mean,
            }));
        }
        let best = rows
            .iter()
            .max_by(|a, b| {
                let da = a["dice_mean"].as_f64().unwrap_or(f64::NEG_INFINITY);
                let db = b["dice_mean"].as_f64().unwrap_or(f64::NEG_INFINITY);
                da.partial_cmp(&db).expect("finite dice means")
            })
            .cloned();
        doc["sweep"] = json!({ "per_threshold": rows, "best": best });
    }

    write_text(&args.report, &serde_json::to_string_pretty(&doc)?)?;
    write_text(&args.csv, &report_csv(&report))?;
    println!(
        "evaluated {} slices ({} skipped): dice {:.3} +/- {:.3}, iou {:.3} +/- {:.3}",
        report.n_evaluated,
        report.n_skipped,
        report.summary.dice.mean,
        report.summary.dice.std,
        report.summary.iou.mean,
        report.summary.iou.std,
    );
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && std::fs::create_dir_all(parent).is_err() {
            return Err(Error::UnwritablePath(path.to_path_buf()));
        }
    }
    std::fs::write(path, text).map_err(|_| Error::UnwritablePath(path.to_path_buf()))
}

pub fn cmd_overlay(cams: &Path, images: &Path, out: &Path) -> Result<()> {
    let volumes: Vec<VolumeRecord<S>> = load_volume_dir(images)?;
    let by_case: HashMap<&str, &VolumeRecord<S>> =
        volumes.iter().map(|v| (v.case_id.as_str(), v)).collect();
    let cam_files = cam::read_cam_dir(cams)?;
    if cam_files.is_empty() {
        return Err(Error::NoEvaluableSamples);
    }
    let mut written = 0usize;
    for (sidecar, map) in &cam_files {
        let vol = by_case
            .get(sidecar.case_id.as_str())
            .ok_or_else(|| Error::MissingFile(images.join(format!("{}.json", sidecar.case_id))))?;
        if sidecar.z_index >= vol.voxels.dim().0 {
            return Err(Error::BadDimensions(format!(
                "map {}:{} exceeds volume depth {}",
                sidecar.case_id,
                sidecar.z_index,
                vol.voxels.dim().0
            )));
        }
        let plane = vol.voxels.index_axis(Axis(0), sidecar.z_index).to_owned();
        let (image, _, _) = normalize_plane(&plane);
        let mask_plane = vol.mask.as_ref().map(|m| m.index_axis(Axis(0), sidecar.z_index).to_owned());
        let name = format!("{}_z{:04}_{}.png", sidecar.case_id, sidecar.z_index, sidecar.source);
        render_overlay(&image, Some(&map.values), mask_plane.as_ref(), &out.join(name))?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parses_and_enumerates_inclusively() {
        let sweep: Sweep = "0.1:0.9:0.2".parse().unwrap();
        let ts = sweep.thresholds();
        assert_eq!(ts.len(), 5);
        assert!((ts[0] - 0.1).abs() < 1e-12);
        assert!((ts[4] - 0.9).abs() < 1e-12);
        assert!("0.5".parse::<Sweep>().is_err());
        assert!("0:0.9:0.1".parse::<Sweep>().is_err(), "lo must be positive");
        assert!("0.2:0.1:0.1".parse::<Sweep>().is_err(), "descending range");
        assert!("0.1:0.9:0".parse::<Sweep>().is_err(), "zero step");
    }

    #[test]
    fn log_path_replaces_the_extension() {
        assert_eq!(log_path(Path::new("runs/model.ckpt")), Path::new("runs/model.log.csv"));
        assert_eq!(log_path(Path::new("model")), Path::new("model.log.csv"));
    }

    #[test]
    fn csv_rows_follow_the_schema() {
        use crate::eval::{MetricStat, MetricsSummary, SampleMetrics};
        let report = MetricsReport {
            per_sample: vec![
                SampleMetrics { case_id: "a".into(), z_index: 3, dice: 0.5, iou: 0.25, hd95: Some(2.0) },
                SampleMetrics { case_id: "b".into(), z_index: 0, dice: 0.0, iou: 0.0, hd95: None },
            ],
            summary: MetricsSummary {
                dice: MetricStat { mean: 0.25, std: 0.25 },
                iou: MetricStat { mean: 0.125, std: 0.125 },
                hd95: Some(MetricStat { mean: 2.0, std: 0.0 }),
            },
            n_evaluated: 2,
            n_skipped: 0,
        };
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,z_index,dice,iou,hd95");
        assert_eq!(lines[1], "a,3,0.5,0.25,2");
        assert_eq!(lines[2], "b,0,0,0,");
    }
}
