//! The three phase runners. All of them walk data in a seed-determined
//! order, step on a per-epoch cosine schedule, and leave a per-epoch log.

use super::augment::augment_view;
use super::optim::{LayerGroup, Optimizer};
use super::{cosine_lr, EpochLog, ModelBundle, Phase, PhaseConfig};
use crate::agg::{
    aggregation_ce_grad, attentive_combine_raw, c2am_grad, fg_bg_embed_backward,
    fg_bg_embed_cached, minmax_normalize_backward, minmax_normalize_cached, AggLossKind,
    AttentionCache, FgBgCache, FgBgEmbedding, MinmaxCache,
};
use crate::cam::{compute_exit_cam, ActivationMap};
use crate::data::SliceSample;
use crate::net::{multi_exit_ce_batch, supcon_loss_raw, MultiExitNet, NUM_EXITS};
use crate::nn::{self, conv, ops};
use crate::{Error, Result, Scalar};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Tumor class index used for CAM extraction during training.
const TARGET_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub early_stopped: bool,
    pub logs: Vec<EpochLog>,
}

fn check_inputs<T: Scalar>(slices: &[SliceSample<T>], input_size: usize) -> Result<()> {
    for s in slices {
        if s.image.dim() != (input_size, input_size) {
            return Err(Error::ShapeMismatch {
                expected: vec![input_size, input_size],
                got: s.image.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn expect_phase(cfg: &PhaseConfig, phase: Phase) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(Error::InvalidConfig(format!(
            "config is for phase {}, runner is {phase}",
            cfg.phase
        )));
    }
    Ok(())
}

/// Stacks slices into `[N, 1, S, S]` plus their labels.
fn stack_batch<T: Scalar>(slices: &[&SliceSample<T>]) -> (Array4<T>, Vec<usize>) {
    let (h, w) = slices[0].image.dim();
    let mut x = Array4::zeros((slices.len(), 1, h, w));
    let mut labels = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(&s.image);
        labels.push(s.label as usize);
    }
    (x, labels)
}

fn argmax_row<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of slices each exit classifies correctly (inference mode).
pub fn evaluate_exit_accuracy<T: Scalar>(
    net: &MultiExitNet<T>,
    slices: &[SliceSample<T>],
    batch_size: usize,
) -> [f64; NUM_EXITS] {
    assert!(!slices.is_empty(), "accuracy over an empty split is undefined");
    let refs: Vec<&SliceSample<T>> = slices.iter().collect();
    let mut correct = [0usize; NUM_EXITS];
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, labels) = stack_batch(chunk);
        let out = net.forward_batch_eval(&x);
        for (k, c) in correct.iter_mut().enumerate() {
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(out.logits[k].row(i)) == label {
                    *c += 1;
                }
            }
        }
    }
    correct.map(|c| c as f64 / slices.len() as f64)
}

/// SupCon pretraining on projected exit-4 embeddings of two augmented views
/// per slice, with class-balanced batches.
pub fn run_pretrain_phase<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    train: &[SliceSample<T>],
    cfg: &PhaseConfig,
) -> Result<PhaseReport> {
    expect_phase(cfg, Phase::Pretrain)?;
    check_inputs(train, bundle.backbone_cfg.input_size)?;
    let pos: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == 1).collect();
    let neg: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == 0).collect();
    if pos.len() < 2 {
        return Err(Error::SamplerInfeasible { class: 1, count: pos.len() });
    }
    if neg.len() < 2 {
        return Err(Error::SamplerInfeasible { class: 0, count: neg.len() });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let temperature = T::from_f64_(cfg.temperature);
    let half_pos = cfg.batch_size / 2;
    let half_neg = cfg.batch_size - half_pos;
    let size = bundle.backbone_cfg.input_size;
    let mut logs = Vec::new();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)?;
        let mut pos_order = pos.clone();
        let mut neg_order = neg.clone();
        pos_order.shuffle(&mut rng);
        neg_order.shuffle(&mut rng);
        let n_batches = (train.len() / cfg.batch_size).max(1);
        let mut epoch_loss = 0.0;

        for b in 0..n_batches {
            // Balanced batch: half from each class, cycling the shorter list.
            let mut chosen = Vec::with_capacity(cfg.batch_size);
            for t in 0..half_pos {
                chosen.push(pos_order[(b * half_pos + t) % pos_order.len()]);
            }
            for t in 0..half_neg {
                chosen.push(neg_order[(b * half_neg + t) % neg_order.len()]);
            }

            let n = chosen.len() * 2;
            let mut x = Array4::zeros((n, 1, size, size));
            let mut labels = Vec::with_capacity(n);
            for (i, &idx) in chosen.iter().enumerate() {
                for v in 0..2 {
                    let view = augment_view(&train[idx].image, &mut rng);
                    x.index_axis_mut(Axis(0), 2 * i + v)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&view);
                    labels.push(train[idx].label as usize);
                }
            }

            nn::zero_grads(&mut bundle.net);
            let (out, cache) = bundle.net.forward_batch_train(&x);
            let gap4 = &out.gaps[NUM_EXITS - 1];
            let (proj, pcache) = bundle.net.projector.forward(gap4);
            let z = ops::normalize_rows(&proj);
            let (loss, dz) = supcon_loss_raw(&z, &labels, temperature);
            let dproj = ops::normalize_rows_backward(&proj, &dz);
            let dgap = bundle.net.projector.backward(&pcache, &dproj);
            let (_, _, h4, w4) = out.features[NUM_EXITS - 1].dim();
            let mut dfeatures: Vec<Array4<T>> =
                out.features.iter().map(|f| Array4::zeros(f.raw_dim())).collect();
            dfeatures[NUM_EXITS - 1] = ops::gap_backward(&dgap, h4, w4);
            bundle.net.backward_from_features(&cache, dfeatures);
            opt.step(&mut bundle.net, lr);
            epoch_loss += loss.to_f64_();
        }

        let loss = epoch_loss / n_batches as f64;
        final_loss = loss;
        logs.push(EpochLog { epoch, phase: Phase::Pretrain, loss, lr, exit_accuracy: None });
        log::info!("pretrain epoch {epoch}: supcon loss {loss:.4}, lr {lr:.2e}");
    }

    Ok(PhaseReport { epochs_run: cfg.epochs, final_loss, early_stopped: false, logs })
}

/// Joint cross-entropy over all four exits; stops early once every exit
/// reaches `accuracy_target` on the validation split, but never before a
/// quarter of the epoch budget has run: accuracy saturates well before the
/// activation maps stop sharpening, and downstream phases consume the maps.
pub fn run_multi_exit_phase<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    train: &[SliceSample<T>],
    val: &[SliceSample<T>],
    cfg: &PhaseConfig,
    accuracy_target: f64,
) -> Result<PhaseReport> {
    expect_phase(cfg, Phase::MultiExit)?;
    if train.is_empty() {
        return Err(Error::EmptyList);
    }
    check_inputs(train, bundle.backbone_cfg.input_size)?;
    check_inputs(val, bundle.backbone_cfg.input_size)?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut logs = Vec::new();
    let mut final_loss = f64::NAN;
    let mut early_stopped = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SliceSample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = stack_batch(&refs);
            nn::zero_grads(&mut bundle.net);
            let (out, cache) = bundle.net.forward_batch_train(&x);
            let (loss, dlogits) = multi_exit_ce_batch(&out.logits, &labels);
            let mut dfeatures = Vec::with_capacity(NUM_EXITS);
            for k in 0..NUM_EXITS {
                let dgap = bundle.net.heads[k].linear.backward(&out.gaps[k], &dlogits[k]);
                let (_, _, h, w) = out.features[k].dim();
                dfeatures.push(ops::gap_backward(&dgap, h, w));
            }
            bundle.net.backward_from_features(&cache, dfeatures);
            opt.step(&mut bundle.net, lr);
            epoch_loss += loss.to_f64_() * chunk.len() as f64;
        }

        let loss = epoch_loss / train.len() as f64;
        final_loss = loss;
        epochs_run = epoch + 1;
        let accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate_exit_accuracy(&bundle.net, val, cfg.batch_size))
        };
        logs.push(EpochLog { epoch, phase: Phase::MultiExit, loss, lr, exit_accuracy: accuracy });
        if let Some(acc) = accuracy {
            log::info!(
                "multi-exit epoch {epoch}: loss {loss:.4}, val acc {:?}, lr {lr:.2e}",
                acc.map(|a| (a * 1000.0).round() / 1000.0)
            );
            if epoch + 1 >= cfg.epochs.div_ceil(4) && acc.iter().all(|&a| a >= accuracy_target) {
                early_stopped = true;
                break;
            }
        } else {
            log::info!("multi-exit epoch {epoch}: loss {loss:.4}, lr {lr:.2e}");
        }
    }

    Ok(PhaseReport { epochs_run, final_loss, early_stopped, logs })
}

/// Per-slice intermediates of the aggregation forward pass, kept for the
/// backward sweep after the batch loss is known.
struct SliceWork<T: Scalar> {
    cams: Vec<ActivationMap<T>>,
    att_cache: AttentionCache<T>,
    fused: Array2<T>,
    fused_n: Array2<T>,
    ncache: MinmaxCache<T>,
    embedded: Array3<T>,
    fg_cache: FgBgCache<T>,
}

fn aggregation_forward<T: Scalar>(
    bundle: &ModelBundle<T>,
    sample: &SliceSample<T>,
    eps: T,
) -> Result<(FgBgEmbedding<T>, SliceWork<T>)> {
    let size = bundle.backbone_cfg.input_size;
    let out = bundle.net.forward_multi_exit(&sample.image)?;
    let cams = (0..NUM_EXITS)
        .map(|k| {
            compute_exit_cam(&out.features[k], &bundle.net.heads[k], TARGET_CLASS)?
                .upsample_to(size, size)
        })
        .collect::<Result<Vec<_>>>()?;
    let (att, att_cache) = bundle.attention.forward(&sample.image, &cams)?;
    let fused = attentive_combine_raw(&cams, &att)?;
    // The pools see the normalized map — the same object the aggregator
    // exports. Normalization also makes the loss blind to uniform raises of
    // the fusion, which would otherwise be a cheap descent direction that
    // inflates the foreground without sharpening it.
    let (fused_n, ncache) = minmax_normalize_cached(&fused)?;
    // Finest exit only; see the projector's construction for why.
    let feats = ops::pixel_l2_normalize(&out.features[0], eps);
    let proj = conv::forward_single(&bundle.pixel_proj, &feats);
    let proj_up = ops::bilinear_resize_channels(&proj, size, size);
    let embedded = ops::pixel_l2_normalize(&proj_up, eps);
    let (emb, fg_cache) = fg_bg_embed_cached(&fused_n, &embedded, eps);
    Ok((emb, SliceWork { cams, att_cache, fused, fused_n, ncache, embedded, fg_cache }))
}

/// `dL/dweights[k](x) = dL/dM(x) * cam_k(x)` — the trainable path of the
/// convex combination (the CAMs themselves are frozen inputs).
fn attention_grad_from_map<T: Scalar>(dm: &Array2<T>, cams: &[ActivationMap<T>]) -> Array3<T> {
    let (h, w) = dm.dim();
    let mut dweights = Array3::zeros((cams.len(), h, w));
    for (k, cam) in cams.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                dweights[[k, r, c]] = dm[[r, c]] * cam.values[[r, c]];
            }
        }
    }
    dweights
}

/// Trains the attention net and pixel projector over frozen backbone
/// features, with the contrastive foreground/background loss or the
/// cross-entropy ablation.
pub fn run_aggregation_phase<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    train: &[SliceSample<T>],
    cfg: &PhaseConfig,
) -> Result<PhaseReport> {
    expect_phase(cfg, Phase::Aggregation)?;
    bundle.agg_cfg.validate()?;
    if !bundle.agg_cfg.freeze_backbone {
        return Err(Error::InvalidConfig(
            "aggregation training requires freeze_backbone = true".into(),
        ));
    }
    check_inputs(train, bundle.backbone_cfg.input_size)?;
    let eps = T::from_f64_(bundle.agg_cfg.epsilon);
    let loss_kind = bundle.agg_cfg.loss;

    let pool: Vec<usize> = match loss_kind {
        // The contrastive arm needs foreground to contrast against.
        AggLossKind::C2am => (0..train.len()).filter(|&i| train[i].label == 1).collect(),
        AggLossKind::CrossEntropy => (0..train.len()).collect(),
    };
    if loss_kind == AggLossKind::C2am {
        if cfg.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "contrastive phases need batch_size >= 2".into(),
            ));
        }
        if pool.len() < 2 {
            return Err(Error::SamplerInfeasible { class: 1, count: pool.len() });
        }
    } else if pool.is_empty() {
        return Err(Error::EmptyList);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut logs = Vec::new();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)?;
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            match loss_kind {
                AggLossKind::C2am => {
                    if chunk.len() < 2 {
                        continue; // a trailing singleton has no pairs
                    }
                    nn::zero_grads(&mut bundle.attention);
                    let mut embeddings = Vec::with_capacity(chunk.len());
                    let mut works = Vec::with_capacity(chunk.len());
                    for &idx in chunk {
                        let (emb, work) = aggregation_forward(bundle, &train[idx], eps)?;
                        embeddings.push(emb);
                        works.push(work);
                    }
                    let (loss, grads) = c2am_grad(&embeddings, eps)?;
                    for (work, (dfg, dbg)) in works.iter().zip(&grads) {
                        let (dm_n, _dz) = fg_bg_embed_backward(
                            &work.fg_cache,
                            &work.fused_n,
                            &work.embedded,
                            dfg,
                            dbg,
                        );
                        let dm = minmax_normalize_backward(&work.ncache, &work.fused_n, &dm_n);
                        let dweights = attention_grad_from_map(&dm, &work.cams);
                        bundle.attention.backward(&work.att_cache, &dweights);
                    }
                    // Only the attention net is stepped. The projector stays
                    // frozen, so the contrastive landscape over fused maps is
                    // static: the attention cannot lower the loss by rotating
                    // the embedding instead of improving the fusion.
                    let mut group = LayerGroup::new().with("attention", &mut bundle.attention);
                    opt.step(&mut group, lr);
                    epoch_loss += loss.to_f64_();
                    n_batches += 1;
                }
                AggLossKind::CrossEntropy => {
                    nn::zero_grads(&mut bundle.attention);
                    nn::zero_grads(&mut bundle.map_head);
                    let mut batch_loss = T::zero();
                    for &idx in chunk {
                        let sample = &train[idx];
                        let (_, work) = aggregation_forward(bundle, sample, eps)?;
                        let (loss, dm) = aggregation_ce_grad(
                            &work.fused,
                            sample.label as usize,
                            &mut bundle.map_head,
                        );
                        let dweights = attention_grad_from_map(&dm, &work.cams);
                        bundle.attention.backward(&work.att_cache, &dweights);
                        batch_loss += loss;
                    }
                    // Per-sample gradients were summed; make them means.
                    let inv = T::from_f64_(1.0 / chunk.len() as f64);
                    nn::scale_grads(&mut bundle.attention, inv);
                    nn::scale_grads(&mut bundle.map_head, inv);
                    let mut group = LayerGroup::new()
                        .with("attention", &mut bundle.attention)
                        .with("map_head", &mut bundle.map_head);
                    opt.step(&mut group, lr);
                    epoch_loss += batch_loss.to_f64_() / chunk.len() as f64;
                    n_batches += 1;
                }
            }
        }

        let loss = epoch_loss / n_batches.max(1) as f64;
        final_loss = loss;
        logs.push(EpochLog { epoch, phase: Phase::Aggregation, loss, lr, exit_accuracy: None });
        log::info!("aggregation epoch {epoch}: loss {loss:.4}, lr {lr:.2e}");
    }

    Ok(PhaseReport { epochs_run: cfg.epochs, final_loss, early_stopped: false, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregationConfig;
    use crate::data::{generate_synthetic, slice_volume};
    use crate::net::BackboneConfig;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig { stage_channels: [4, 8, 8, 8], input_size: 32, ..Default::default() }
    }

    fn tiny_agg() -> AggregationConfig {
        AggregationConfig { attention_hidden: 4, ..Default::default() }
    }

    fn tiny_bundle(seed: u64) -> ModelBundle<f32> {
        ModelBundle::new(&tiny_backbone(), &tiny_agg(), seed).unwrap()
    }

    fn tiny_slices(seed: u64) -> Vec<SliceSample<f32>> {
        let mut out = Vec::new();
        for vol in generate_synthetic::<f32>(3, 8, 32, 32, 0.7, seed).unwrap() {
            out.extend(slice_volume(&vol).unwrap());
        }
        out
    }

    fn phase_cfg(phase: Phase, epochs: usize, batch: usize, seed: u64) -> PhaseConfig {
        PhaseConfig {
            phase,
            epochs,
            batch_size: batch,
            seed,
            lr_init: 1e-3,
            lr_min: 1e-5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epoch_phases_leave_parameters_bit_identical() {
        let slices = tiny_slices(1);
        let mut bundle = tiny_bundle(0);
        let before = nn::state_hash(&bundle);
        run_pretrain_phase(&mut bundle, &slices, &phase_cfg(Phase::Pretrain, 0, 4, 0)).unwrap();
        run_multi_exit_phase(&mut bundle, &slices, &[], &phase_cfg(Phase::MultiExit, 0, 4, 0), 0.9)
            .unwrap();
        run_aggregation_phase(&mut bundle, &slices, &phase_cfg(Phase::Aggregation, 0, 4, 0))
            .unwrap();
        assert_eq!(nn::state_hash(&bundle), before);
    }

    #[test]
    fn pretrain_runs_and_is_deterministic() {
        let slices = tiny_slices(2);
        let cfg = phase_cfg(Phase::Pretrain, 2, 4, 7);
        let mut a = tiny_bundle(3);
        let ra = run_pretrain_phase(&mut a, &slices, &cfg).unwrap();
        let mut b = tiny_bundle(3);
        let rb = run_pretrain_phase(&mut b, &slices, &cfg).unwrap();
        assert_eq!(nn::state_hash(&a), nn::state_hash(&b));
        assert_eq!(ra.logs, rb.logs);
        assert!(ra.final_loss.is_finite());
        assert_eq!(ra.epochs_run, 2);
    }

    #[test]
    fn pretrain_requires_two_samples_per_class() {
        let mut slices = tiny_slices(3);
        slices.retain(|s| s.label == 0);
        let mut bundle = tiny_bundle(0);
        let err = run_pretrain_phase(&mut bundle, &slices, &phase_cfg(Phase::Pretrain, 1, 4, 0));
        assert!(matches!(err, Err(Error::SamplerInfeasible { class: 1, count: 0 })));
    }

    #[test]
    fn multi_exit_loss_decreases_and_trail_is_deterministic() {
        let slices = tiny_slices(4);
        let cfg = phase_cfg(Phase::MultiExit, 4, 8, 5);
        let mut a = tiny_bundle(1);
        let ra = run_multi_exit_phase(&mut a, &slices, &slices, &cfg, 2.0).unwrap();
        assert!(ra.logs.last().unwrap().loss < ra.logs[0].loss, "loss failed to drop: {ra:?}");
        assert!(ra.logs.iter().all(|l| l.exit_accuracy.is_some()));
        let mut b = tiny_bundle(1);
        let rb = run_multi_exit_phase(&mut b, &slices, &slices, &cfg, 2.0).unwrap();
        assert_eq!(ra.logs, rb.logs);
    }

    #[test]
    fn multi_exit_early_stops_at_the_target() {
        let slices = tiny_slices(5);
        // Target 0 is met immediately; the floor holds training to a quarter
        // of the 6-epoch budget, so exactly two epochs run.
        let cfg = phase_cfg(Phase::MultiExit, 6, 8, 0);
        let mut bundle = tiny_bundle(2);
        let report = run_multi_exit_phase(&mut bundle, &slices, &slices, &cfg, 0.0).unwrap();
        assert!(report.early_stopped);
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.logs.len(), 2);
    }

    #[test]
    fn aggregation_freezes_the_backbone() {
        let slices = tiny_slices(6);
        let mut bundle = tiny_bundle(4);
        let net_before = nn::state_hash(&bundle.net);
        let att_before = nn::state_hash(&bundle.attention);
        let cfg = phase_cfg(Phase::Aggregation, 1, 4, 9);
        run_aggregation_phase(&mut bundle, &slices, &cfg).unwrap();
        assert_eq!(nn::state_hash(&bundle.net), net_before, "backbone must stay frozen");
        assert_ne!(nn::state_hash(&bundle.attention), att_before, "attention must train");
    }

    #[test]
    fn aggregation_contrastive_arm_needs_positive_pairs() {
        let mut slices = tiny_slices(7);
        slices.retain(|s| s.label == 0);
        let mut bundle = tiny_bundle(0);
        let err = run_aggregation_phase(&mut bundle, &slices, &phase_cfg(Phase::Aggregation, 1, 4, 0));
        assert!(matches!(err, Err(Error::SamplerInfeasible { class: 1, .. })));
    }

    #[test]
    fn aggregation_cross_entropy_arm_trains_the_map_head() {
        let slices = tiny_slices(8);
        let mut bundle = ModelBundle::<f32>::new(
            &tiny_backbone(),
            &AggregationConfig {
                loss: AggLossKind::CrossEntropy,
                attention_hidden: 4,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let head_before = nn::state_hash(&bundle.map_head);
        let net_before = nn::state_hash(&bundle.net);
        let cfg = phase_cfg(Phase::Aggregation, 1, 4, 2);
        let report = run_aggregation_phase(&mut bundle, &slices, &cfg).unwrap();
        assert_ne!(nn::state_hash(&bundle.map_head), head_before);
        assert_eq!(nn::state_hash(&bundle.net), net_before);
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn phase_mismatch_is_rejected() {
        let slices = tiny_slices(9);
        let mut bundle = tiny_bundle(0);
        let err = run_pretrain_phase(&mut bundle, &slices, &phase_cfg(Phase::MultiExit, 1, 4, 0));
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn accuracy_evaluator_counts_argmax_matches() {
        let slices = tiny_slices(10);
        let bundle = tiny_bundle(5);
        let acc = evaluate_exit_accuracy(&bundle.net, &slices, 8);
        for a in acc {
            assert!((0.0..=1.0).contains(&a));
        }
    }
}
