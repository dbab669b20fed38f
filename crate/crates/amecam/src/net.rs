//! Four-stage residual backbone with an internal classifier after each stage.
//!
//! The stem halves the input once and every stage halves it again, so exit k
//! sees spatial size `input_size / 2^(k+1)`. Each exit head is global average
//! pooling followed by a linear classifier; those weights double as the CAM
//! channel weights. A small MLP projector on the exit-4 pooled features serves
//! the contrastive pretraining phase and is ignored afterwards.

use crate::nn::{self, ops, BatchNorm2d, BnCache, Conv2d, Layer, Linear, Param};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of exits; equals the number of residual stages.
pub const NUM_EXITS: usize = 4;

/// Residual blocks per stage (ResNet-18 layout).
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_EXITS],
    pub num_classes: usize,
    pub input_size: usize,
    pub projector_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512],
            num_classes: 2,
            input_size: 128,
            projector_dim: 64,
        }
    }
}

impl BackboneConfig {
    /// The deepest exit sits at `input_size / 32`, so the input must divide
    /// cleanly through five halvings.
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("stage_channels must be nonzero".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.projector_dim == 0 {
            return Err(Error::InvalidConfig("projector_dim must be nonzero".into()));
        }
        Ok(())
    }

    /// Spatial side length of exit `k` (1-based) for this input size.
    pub fn exit_size(&self, k: usize) -> usize {
        self.input_size >> (k + 1)
    }
}

/// GAP + linear internal classifier attached after stage `exit_index`.
#[derive(Debug, Clone)]
pub struct ExitHead<T> {
    pub exit_index: usize,
    pub linear: Linear<T>,
}

impl<T: Scalar> ExitHead<T> {
    fn new<R: Rng>(exit_index: usize, channels: usize, num_classes: usize, rng: &mut R) -> Self {
        Self { exit_index, linear: Linear::new(channels, num_classes, rng) }
    }

    /// CAM channel weights for one class: row `class` of the weight matrix.
    pub fn class_weights(&self, class: usize) -> Array1<T> {
        self.linear
            .weight
            .value
            .index_axis(Axis(0), class)
            .to_owned()
            .into_dimensionality()
            .unwrap()
    }
}

impl<T: Scalar> Layer<T> for ExitHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_params_mut(prefix, f);
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    /// 1x1 stride-matching projection when the identity shortcut cannot apply.
    down: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

struct BlockCache<T> {
    x: Array4<T>,
    h: Array4<T>,
    y: Array4<T>,
    c1: BnCache<T>,
    c2: BnCache<T>,
    cd: Option<BnCache<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng);
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm2d::new(out_ch),
            )
        });
        Self { conv1, bn1: BatchNorm2d::new(out_ch), conv2, bn2: BatchNorm2d::new(out_ch), down }
    }

    fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BlockCache<T>) {
        let a = self.conv1.forward(x);
        let (am, c1) = self.bn1.forward_train(&a);
        let h = ops::relu(&am);
        let b = self.conv2.forward(&h);
        let (bm, c2) = self.bn2.forward_train(&b);
        let (skip, cd) = match &mut self.down {
            Some((conv_d, bn_d)) => {
                let s = conv_d.forward(x);
                let (sm, cd) = bn_d.forward_train(&s);
                (sm, Some(cd))
            }
            None => (x.clone(), None),
        };
        let y = ops::relu(&(bm + skip));
        let cache = BlockCache { x: x.clone(), h, y: y.clone(), c1, c2, cd };
        (y, cache)
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let h = ops::relu(&self.bn1.forward_eval(&self.conv1.forward(x)));
        let main = self.bn2.forward_eval(&self.conv2.forward(&h));
        let skip = match &self.down {
            Some((conv_d, bn_d)) => bn_d.forward_eval(&conv_d.forward(x)),
            None => x.clone(),
        };
        ops::relu(&(main + skip))
    }

    fn backward(&mut self, cache: &BlockCache<T>, grad_y: &Array4<T>) -> Array4<T> {
        let dz = ops::relu_backward(&cache.y, grad_y);
        let db = self.bn2.backward(&cache.c2, &dz);
        let dh = self.conv2.backward(&cache.h, &db);
        let dhm = ops::relu_backward(&cache.h, &dh);
        let da = self.bn1.backward(&cache.c1, &dhm);
        let dx_main = self.conv1.backward(&cache.x, &da);
        let dx_skip = match (&mut self.down, &cache.cd) {
            (Some((conv_d, bn_d)), Some(cd)) => {
                let ds = bn_d.backward(cd, &dz);
                conv_d.backward(&cache.x, &ds)
            }
            _ => dz,
        };
        dx_main + dx_skip
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&nn::join(prefix, "conv1"), f);
        self.bn1.visit_params(&nn::join(prefix, "bn1"), f);
        self.conv2.visit_params(&nn::join(prefix, "conv2"), f);
        self.bn2.visit_params(&nn::join(prefix, "bn2"), f);
        if let Some((conv_d, bn_d)) = &self.down {
            conv_d.visit_params(&nn::join(prefix, "down_conv"), f);
            bn_d.visit_params(&nn::join(prefix, "down_bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&nn::join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&nn::join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&nn::join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&nn::join(prefix, "bn2"), f);
        if let Some((conv_d, bn_d)) = &mut self.down {
            conv_d.visit_params_mut(&nn::join(prefix, "down_conv"), f);
            bn_d.visit_params_mut(&nn::join(prefix, "down_bn"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.bn1.visit_buffers(&nn::join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&nn::join(prefix, "bn2"), f);
        if let Some((_, bn_d)) = &self.down {
            bn_d.visit_buffers(&nn::join(prefix, "down_bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.bn1.visit_buffers_mut(&nn::join(prefix, "bn1"), f);
        self.bn2.visit_buffers_mut(&nn::join(prefix, "bn2"), f);
        if let Some((_, bn_d)) = &mut self.down {
            bn_d.visit_buffers_mut(&nn::join(prefix, "down_bn"), f);
        }
    }
}

/// Two-layer MLP over the exit-4 pooled features; used only for contrastive
/// pretraining and dropped from the inference path afterwards.
#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct ProjectorCache<T> {
    x: Array2<T>,
    h: Array2<T>,
}

impl<T: Scalar> Projector<T> {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::new(in_dim, in_dim, rng), fc2: Linear::new(in_dim, out_dim, rng) }
    }

    /// Returns raw (un-normalized) projections plus the backward cache.
    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, ProjectorCache<T>) {
        let h = ops::relu(&self.fc1.forward(x));
        let z = self.fc2.forward(&h);
        (z, ProjectorCache { x: x.clone(), h })
    }

    pub fn backward(&mut self, cache: &ProjectorCache<T>, grad_z: &Array2<T>) -> Array2<T> {
        let dh = self.fc2.backward(&cache.h, grad_z);
        let dhm = ops::relu_backward(&cache.h, &dh);
        self.fc1.backward(&cache.x, &dhm)
    }
}

impl<T: Scalar> Layer<T> for Projector<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit_params(&nn::join(prefix, "fc1"), f);
        self.fc2.visit_params(&nn::join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_params_mut(&nn::join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&nn::join(prefix, "fc2"), f);
    }
}

/// Per-image output of the backbone: one feature map and one logit vector per
/// exit, shallowest first.
#[derive(Debug, Clone)]
pub struct MultiExitOutput<T> {
    pub features: Vec<Array3<T>>,
    pub logits: Vec<Array1<T>>,
}

/// Batched counterpart used by the training loops.
#[derive(Debug)]
pub struct BatchOutput<T> {
    pub features: Vec<Array4<T>>,
    pub gaps: Vec<Array2<T>>,
    pub logits: Vec<Array2<T>>,
}

pub struct NetCache<T> {
    stem_x: Array4<T>,
    stem_bn: BnCache<T>,
    stem_act: Array4<T>,
    blocks: Vec<Vec<BlockCache<T>>>,
}

#[derive(Debug, Clone)]
pub struct MultiExitNet<T> {
    pub cfg: BackboneConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<Vec<BasicBlock<T>>>,
    pub heads: Vec<ExitHead<T>>,
    pub projector: Projector<T>,
}

impl<T: Scalar> MultiExitNet<T> {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem_ch = cfg.stage_channels[0];
        let stem_conv = Conv2d::new(1, stem_ch, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm2d::new(stem_ch);
        let mut stages = Vec::with_capacity(NUM_EXITS);
        let mut in_ch = stem_ch;
        for &out_ch in &cfg.stage_channels {
            let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
            blocks.push(BasicBlock::new(in_ch, out_ch, 2, rng));
            for _ in 1..BLOCKS_PER_STAGE {
                blocks.push(BasicBlock::new(out_ch, out_ch, 1, rng));
            }
            stages.push(blocks);
            in_ch = out_ch;
        }
        let heads = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ExitHead::new(i + 1, c, cfg.num_classes, rng))
            .collect();
        let projector = Projector::new(cfg.stage_channels[3], cfg.projector_dim, rng);
        Ok(Self { cfg: cfg.clone(), stem_conv, stem_bn, stages, heads, projector })
    }

    /// Training-mode forward over a batch `[N, 1, S, S]`; updates batch-norm
    /// running statistics and returns the caches every backward pass needs.
    pub fn forward_batch_train(&mut self, x: &Array4<T>) -> (BatchOutput<T>, NetCache<T>) {
        let a = self.stem_conv.forward(x);
        let (am, stem_bn) = self.stem_bn.forward_train(&a);
        let stem_act = ops::relu(&am);
        let mut cur = stem_act.clone();
        let mut blocks = Vec::with_capacity(NUM_EXITS);
        let mut features = Vec::with_capacity(NUM_EXITS);
        for stage in self.stages.iter_mut() {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (y, cache) = block.forward_train(&cur);
                cur = y;
                stage_caches.push(cache);
            }
            blocks.push(stage_caches);
            features.push(cur.clone());
        }
        let (gaps, logits) = self.apply_heads(&features);
        (
            BatchOutput { features, gaps, logits },
            NetCache { stem_x: x.clone(), stem_bn, stem_act, blocks },
        )
    }

    /// Inference-mode forward; uses running statistics, touches nothing.
    pub fn forward_batch_eval(&self, x: &Array4<T>) -> BatchOutput<T> {
        let stem = ops::relu(&self.stem_bn.forward_eval(&self.stem_conv.forward(x)));
        let mut cur = stem;
        let mut features = Vec::with_capacity(NUM_EXITS);
        for stage in &self.stages {
            for block in stage {
                cur = block.forward_eval(&cur);
            }
            features.push(cur.clone());
        }
        let (gaps, logits) = self.apply_heads(&features);
        BatchOutput { features, gaps, logits }
    }

    fn apply_heads(&self, features: &[Array4<T>]) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
        let mut gaps = Vec::with_capacity(NUM_EXITS);
        let mut logits = Vec::with_capacity(NUM_EXITS);
        for (feat, head) in features.iter().zip(&self.heads) {
            let g = ops::gap(feat);
            logits.push(head.linear.forward(&g));
            gaps.push(g);
        }
        (gaps, logits)
    }

    /// Backpropagates gradients w.r.t. the four exit feature maps through the
    /// backbone, accumulating parameter gradients. Head and projector
    /// gradients are the caller's job (they sit on top of the features).
    pub fn backward_from_features(&mut self, cache: &NetCache<T>, dfeatures: Vec<Array4<T>>) {
        assert_eq!(dfeatures.len(), NUM_EXITS);
        let mut grad: Option<Array4<T>> = None;
        for (k, stage) in self.stages.iter_mut().enumerate().rev() {
            let mut g = match grad.take() {
                Some(g) => g + &dfeatures[k],
                None => dfeatures[k].clone(),
            };
            for (block, bc) in stage.iter_mut().zip(&cache.blocks[k]).rev() {
                g = block.backward(bc, &g);
            }
            grad = Some(g);
        }
        let dstem = ops::relu_backward(&cache.stem_act, &grad.expect("four stages"));
        let da = self.stem_bn.backward(&cache.stem_bn, &dstem);
        self.stem_conv.backward(&cache.stem_x, &da);
    }

    /// Single-image inference: `[S, S]` in, per-exit features and logits out.
    pub fn forward_multi_exit(&self, image: &Array2<T>) -> Result<MultiExitOutput<T>> {
        let s = self.cfg.input_size;
        if image.dim() != (s, s) {
            return Err(Error::ShapeMismatch {
                expected: vec![s, s],
                got: image.shape().to_vec(),
            });
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let x = image
            .to_owned()
            .into_shape_with_order((1, 1, s, s))
            .expect("batch of one");
        let out = self.forward_batch_eval(&x);
        let mut features = Vec::with_capacity(NUM_EXITS);
        let mut logits = Vec::with_capacity(NUM_EXITS);
        for k in 0..NUM_EXITS {
            let f = out.features[k].index_axis(Axis(0), 0).to_owned();
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation("exit features"));
            }
            let l = out.logits[k].index_axis(Axis(0), 0).to_owned();
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation("exit logits"));
            }
            features.push(f);
            logits.push(l);
        }
        Ok(MultiExitOutput { features, logits })
    }
}

impl<T: Scalar> Layer<T> for MultiExitNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem_conv.visit_params(&nn::join(prefix, "stem.conv"), f);
        self.stem_bn.visit_params(&nn::join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit_params(&nn::join(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
        for (i, head) in self.heads.iter().enumerate() {
            head.visit_params(&nn::join(prefix, &format!("head{}", i + 1)), f);
        }
        self.projector.visit_params(&nn::join(prefix, "projector"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem_conv.visit_params_mut(&nn::join(prefix, "stem.conv"), f);
        self.stem_bn.visit_params_mut(&nn::join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_params_mut(&nn::join(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_params_mut(&nn::join(prefix, &format!("head{}", i + 1)), f);
        }
        self.projector.visit_params_mut(&nn::join(prefix, "projector"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.stem_bn.visit_buffers(&nn::join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit_buffers(&nn::join(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.stem_bn.visit_buffers_mut(&nn::join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_buffers_mut(&nn::join(prefix, &format!("stage{}.block{}", i + 1, j + 1)), f);
            }
        }
    }
}

/// Unweighted sum over exits of softmax cross entropy against one label.
pub fn multi_exit_ce_loss<T: Scalar>(outputs: &MultiExitOutput<T>, label: usize) -> T {
    let mut total = T::zero();
    for logits in &outputs.logits {
        let row = logits.to_owned().into_shape_with_order((1, logits.len())).unwrap();
        let (loss, _) = ops::softmax_cross_entropy(&row, &[label]);
        total += loss;
    }
    total
}

/// Batched variant: per-exit batch-mean CE, summed over exits. Returns the
/// loss and `dL/dlogits` for every exit.
pub fn multi_exit_ce_batch<T: Scalar>(
    logits: &[Array2<T>],
    labels: &[usize],
) -> (T, Vec<Array2<T>>) {
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for l in logits {
        let (loss, grad) = ops::softmax_cross_entropy(l, labels);
        total += loss;
        grads.push(grad);
    }
    (total, grads)
}

/// Supervised contrastive loss over unit embeddings.
///
/// For each anchor i with positive set P(i) (same label, j != i):
/// `-(1/|P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) )`,
/// summed over anchors.
pub fn supcon_loss<T: Scalar>(
    embeddings: &Array2<T>,
    labels: &[usize],
    temperature: T,
) -> Result<T> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    assert_eq!(labels.len(), n, "one label per embedding");
    for (i, row) in embeddings.outer_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64_();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::UnnormalizedEmbedding { index: i, deviation: (norm - 1.0).abs() });
        }
    }
    for (i, &li) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &lj)| j != i && lj == li) {
            return Err(Error::NoPositivePair(i));
        }
    }
    let (loss, _) = supcon_loss_raw(embeddings, labels, temperature);
    Ok(loss)
}

/// Core SupCon computation without the unit-norm precondition; also returns
/// `dL/dz` so the training loop can chain through its own normalization.
pub fn supcon_loss_raw<T: Scalar>(
    embeddings: &Array2<T>,
    labels: &[usize],
    temperature: T,
) -> (T, Array2<T>) {
    let n = embeddings.nrows();
    let sim = embeddings.dot(&embeddings.t());
    // g[i][j] = dL/ds_ij treating i as the anchor, s_ij = z_i.z_j / tau.
    let mut g = Array2::<T>::zeros((n, n));
    let mut loss = T::zero();
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut max = T::neg_infinity();
        for j in 0..n {
            if j != i {
                max = max.max(sim[[i, j]] / temperature);
            }
        }
        let mut denom = T::zero();
        for j in 0..n {
            if j != i {
                denom += (sim[[i, j]] / temperature - max).exp();
            }
        }
        let log_denom = denom.ln() + max;
        let inv_p = T::from_f64_(1.0 / positives.len() as f64);
        for &p in &positives {
            loss += -(sim[[i, p]] / temperature - log_denom) * inv_p;
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let prob = (sim[[i, j]] / temperature - log_denom).exp();
            let pos_term = if labels[j] == labels[i] { inv_p } else { T::zero() };
            g[[i, j]] = prob - pos_term;
        }
    }
    // s_ij depends on both z_i and z_j; fold both anchor roles into dL/dz_k.
    let inv_tau = T::one() / temperature;
    let mut grad = Array2::<T>::zeros(embeddings.raw_dim());
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            let coeff = (g[[k, j]] + g[[j, k]]) * inv_tau;
            for d in 0..embeddings.ncols() {
                grad[[k, d]] += coeff * embeddings[[j, d]];
            }
        }
    }
    (loss, grad)
}
