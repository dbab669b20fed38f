//! Attentive aggregation: a small convolutional network assigns each pixel a
//! convex weighting over the four exit CAMs, trained either with a
//! contrastive foreground/background objective or a cross-entropy ablation.
//!
//! The backbone stays frozen here, so gradients flow only into the attention
//! network, the 1x1 feature projector and (for the ablation) the map head.

use crate::cam::{canonical_sum, minmax_normalize, ActivationMap, MapSource};
use crate::net::NUM_EXITS;
use crate::nn::{self, ops, Conv2d, Layer, Linear, Param};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Objective for the aggregation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggLossKind {
    C2am,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    #[serde(default = "default_loss")]
    pub loss: AggLossKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_freeze")]
    pub freeze_backbone: bool,
    #[serde(default = "default_hidden")]
    pub attention_hidden: usize,
}

fn default_loss() -> AggLossKind {
    AggLossKind::C2am
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_freeze() -> bool {
    true
}
fn default_hidden() -> usize {
    32
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            loss: default_loss(),
            epsilon: default_epsilon(),
            freeze_backbone: default_freeze(),
            attention_hidden: default_hidden(),
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.attention_hidden == 0 {
            return Err(Error::InvalidConfig("attention_hidden must be nonzero".into()));
        }
        Ok(())
    }
}

/// Per-pixel convex weights over the exits: `[K, H, W]`, nonnegative,
/// summing to 1 across the exit axis at every pixel.
#[derive(Debug, Clone)]
pub struct AttentionField<T> {
    pub weights: Array3<T>,
}

impl<T: Scalar> AttentionField<T> {
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.weights.dim();
        (h, w)
    }

    /// Largest convexity violation: max over pixels of
    /// `max(|sum_k w_k - 1|, -min_k w_k)`.
    pub fn convexity_defect(&self) -> f64 {
        let (k, h, w) = self.weights.dim();
        let mut worst = 0.0f64;
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0f64;
                let mut min = f64::INFINITY;
                for ch in 0..k {
                    let v = self.weights[[ch, r, c]].to_f64_();
                    sum += v;
                    min = min.min(v);
                }
                worst = worst.max((sum - 1.0).abs()).max(-min);
            }
        }
        worst
    }
}

/// Three 3x3 convolutions over the `[image; cam_1..cam_K]` stack. The final
/// layer starts at zero so the untrained field is exactly uniform.
#[derive(Debug, Clone)]
pub struct AttentionNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
}

pub struct AttentionCache<T> {
    x: Array4<T>,
    h1: Array4<T>,
    h2: Array4<T>,
    weights: Array3<T>,
}

impl<T: Scalar> AttentionNet<T> {
    pub fn new<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(1 + NUM_EXITS, hidden, 3, 1, 1, true, rng),
            conv2: Conv2d::new(hidden, hidden, 3, 1, 1, true, rng),
            conv3: Conv2d::new_zeroed(hidden, NUM_EXITS, 3, 1, 1, true),
        }
    }

    fn stack_input(image: &Array2<T>, cams: &[ActivationMap<T>]) -> Result<Array4<T>> {
        let (h, w) = image.dim();
        if cams.len() != NUM_EXITS {
            return Err(Error::InvalidConfig(format!(
                "attention expects {NUM_EXITS} maps, got {}",
                cams.len()
            )));
        }
        for cam in cams {
            if cam.values.dim() != (h, w) {
                return Err(Error::ResolutionMismatch { image: (h, w), maps: cam.values.dim() });
            }
        }
        let mut x = Array4::zeros((1, 1 + NUM_EXITS, h, w));
        x.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(image);
        for (k, cam) in cams.iter().enumerate() {
            x.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), k + 1).assign(&cam.values);
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        image: &Array2<T>,
        cams: &[ActivationMap<T>],
    ) -> Result<(AttentionField<T>, AttentionCache<T>)> {
        let x = Self::stack_input(image, cams)?;
        let h1 = ops::relu(&self.conv1.forward(&x));
        let h2 = ops::relu(&self.conv2.forward(&h1));
        let logits4 = self.conv3.forward(&h2);
        let logits = logits4.index_axis(Axis(0), 0).to_owned();
        let weights = ops::pixel_softmax(&logits);
        let cache = AttentionCache { x, h1, h2, weights: weights.clone() };
        Ok((AttentionField { weights }, cache))
    }

    /// Accumulates parameter gradients from `dL/dweights`.
    pub fn backward(&mut self, cache: &AttentionCache<T>, grad_weights: &Array3<T>) {
        let dlogits = ops::pixel_softmax_backward(&cache.weights, grad_weights);
        let (k, h, w) = dlogits.dim();
        let dlogits4 = dlogits.into_shape_with_order((1, k, h, w)).expect("batch of one");
        let dh2 = self.conv3.backward(&cache.h2, &dlogits4);
        let dh2m = ops::relu_backward(&cache.h2, &dh2);
        let dh1 = self.conv2.backward(&cache.h1, &dh2m);
        let dh1m = ops::relu_backward(&cache.h1, &dh1);
        self.conv1.backward(&cache.x, &dh1m);
    }
}

impl<T: Scalar> Layer<T> for AttentionNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&nn::join(prefix, "conv1"), f);
        self.conv2.visit_params(&nn::join(prefix, "conv2"), f);
        self.conv3.visit_params(&nn::join(prefix, "conv3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&nn::join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&nn::join(prefix, "conv2"), f);
        self.conv3.visit_params_mut(&nn::join(prefix, "conv3"), f);
    }
}

/// Runs the attention network over one image and its upsampled exit CAMs.
pub fn attention_forward<T: Scalar>(
    image: &Array2<T>,
    cams: &[ActivationMap<T>],
    net: &AttentionNet<T>,
) -> Result<AttentionField<T>> {
    net.forward(image, cams).map(|(field, _)| field)
}

/// The raw convex combination `M(x) = sum_k w_k(x) cam_k(x)`, before any
/// normalization. Stays in `[0,1]` whenever the inputs do.
pub fn attentive_combine_raw<T: Scalar>(
    cams: &[ActivationMap<T>],
    att: &AttentionField<T>,
) -> Result<Array2<T>> {
    let (k, h, w) = att.weights.dim();
    if cams.len() != k {
        return Err(Error::ShapeMismatch { expected: vec![k], got: vec![cams.len()] });
    }
    for cam in cams {
        if cam.values.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: cam.values.shape().to_vec(),
            });
        }
    }
    let mut m = Array2::zeros((h, w));
    let mut terms = vec![T::zero(); k];
    for r in 0..h {
        for c in 0..w {
            for (i, cam) in cams.iter().enumerate() {
                terms[i] = att.weights[[i, r, c]] * cam.values[[r, c]];
            }
            m[[r, c]] = canonical_sum(&mut terms);
        }
    }
    Ok(m)
}

/// Convex fusion followed by min-max normalization.
pub fn attentive_aggregate<T: Scalar>(
    cams: &[ActivationMap<T>],
    att: &AttentionField<T>,
) -> Result<ActivationMap<T>> {
    let m = attentive_combine_raw(cams, att)?;
    let dim = m.dim();
    Ok(ActivationMap {
        values: minmax_normalize(&m)?,
        source: MapSource::Attentive,
        native_resolution: dim,
    })
}

/// Extremum bookkeeping for backpropagating through [`minmax_normalize`].
/// Ties resolve to the first extremum in row-major order (a subgradient).
pub struct MinmaxCache<T> {
    argmin: (usize, usize),
    argmax: (usize, usize),
    range: T,
}

/// [`minmax_normalize`] plus the cache needed to differentiate through it.
pub fn minmax_normalize_cached<T: Scalar>(
    m: &Array2<T>,
) -> Result<(Array2<T>, MinmaxCache<T>)> {
    let y = minmax_normalize(m)?;
    let mut argmin = (0, 0);
    let mut argmax = (0, 0);
    for ((r, c), &v) in m.indexed_iter() {
        if v < m[argmin] {
            argmin = (r, c);
        }
        if v > m[argmax] {
            argmax = (r, c);
        }
    }
    let range = m[argmax] - m[argmin];
    Ok((y, MinmaxCache { argmin, argmax, range }))
}

/// Backward of `y = (m - min) / (max - min)` given `dL/dy`. The output is
/// invariant to uniform shifts and positive rescalings of the input, so the
/// returned gradient sums to zero; a constant input (range zero) gets a zero
/// gradient, matching the all-zero forward convention.
pub fn minmax_normalize_backward<T: Scalar>(
    cache: &MinmaxCache<T>,
    y: &Array2<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    if cache.range <= T::zero() {
        return Array2::zeros(dy.raw_dim());
    }
    let g_sum = dy.sum();
    let g_dot_y = dy.iter().zip(y.iter()).map(|(&g, &v)| g * v).sum::<T>();
    let mut dm = dy.mapv(|g| g / cache.range);
    dm[cache.argmax] = (dy[cache.argmax] - g_dot_y) / cache.range;
    dm[cache.argmin] = (dy[cache.argmin] - g_sum + g_dot_y) / cache.range;
    dm
}

/// Mask-weighted pooled embeddings of the projected features.
#[derive(Debug, Clone)]
pub struct FgBgEmbedding<T> {
    pub fg: Array1<T>,
    pub bg: Array1<T>,
    pub fg_mass: T,
    pub bg_mass: T,
}

pub struct FgBgCache<T> {
    u_f: Array1<T>,
    u_b: Array1<T>,
    s_f: T,
    s_b: T,
    fg_guarded: bool,
    bg_guarded: bool,
}

fn normalize_vec<T: Scalar>(u: &Array1<T>) -> Array1<T> {
    let norm = u.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        u.mapv(|v| v / norm)
    } else {
        Array1::zeros(u.len())
    }
}

fn normalize_vec_backward<T: Scalar>(u: &Array1<T>, grad_z: &Array1<T>) -> Array1<T> {
    let norm = u.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() {
        return Array1::zeros(u.len());
    }
    let z = u.mapv(|v| v / norm);
    let dot = z.iter().zip(grad_z.iter()).map(|(&a, &b)| a * b).sum::<T>();
    Array1::from_shape_fn(u.len(), |i| (grad_z[i] - z[i] * dot) / norm)
}

/// Pools projected pixel features under the map and its complement:
/// `fg = normalize(sum_x M(x) f(x) / max(sum_x M(x), eps))`, bg with `1 - M`.
pub fn fg_bg_embed<T: Scalar>(m: &Array2<T>, f: &Array3<T>, epsilon: T) -> FgBgEmbedding<T> {
    fg_bg_embed_cached(m, f, epsilon).0
}

pub fn fg_bg_embed_cached<T: Scalar>(
    m: &Array2<T>,
    f: &Array3<T>,
    epsilon: T,
) -> (FgBgEmbedding<T>, FgBgCache<T>) {
    let (d, h, w) = f.dim();
    assert_eq!(m.dim(), (h, w), "map and features must share a grid");
    let mut u_f = Array1::<T>::zeros(d);
    let mut u_b = Array1::<T>::zeros(d);
    let mut fg_mass = T::zero();
    let mut bg_mass = T::zero();
    for r in 0..h {
        for c in 0..w {
            let wgt = m[[r, c]];
            let inv = T::one() - wgt;
            fg_mass += wgt;
            bg_mass += inv;
            for ch in 0..d {
                u_f[ch] += wgt * f[[ch, r, c]];
                u_b[ch] += inv * f[[ch, r, c]];
            }
        }
    }
    let area = T::from_f64_((h * w) as f64);
    if fg_mass < epsilon * area {
        log::warn!("foreground mass {:.3e} below epsilon*area", fg_mass.to_f64_());
    }
    if bg_mass < epsilon * area {
        log::warn!("background mass {:.3e} below epsilon*area", bg_mass.to_f64_());
    }
    let s_f = fg_mass.max(epsilon);
    let s_b = bg_mass.max(epsilon);
    let u_f = u_f.mapv(|v| v / s_f);
    let u_b = u_b.mapv(|v| v / s_b);
    let emb = FgBgEmbedding {
        fg: normalize_vec(&u_f),
        bg: normalize_vec(&u_b),
        fg_mass,
        bg_mass,
    };
    let cache = FgBgCache {
        u_f,
        u_b,
        s_f,
        s_b,
        fg_guarded: fg_mass < epsilon,
        bg_guarded: bg_mass < epsilon,
    };
    (emb, cache)
}

/// Backward of [`fg_bg_embed`]: gradients w.r.t. the map and the features.
pub fn fg_bg_embed_backward<T: Scalar>(
    cache: &FgBgCache<T>,
    m: &Array2<T>,
    f: &Array3<T>,
    grad_fg: &Array1<T>,
    grad_bg: &Array1<T>,
) -> (Array2<T>, Array3<T>) {
    let (d, h, w) = f.dim();
    let du_f = normalize_vec_backward(&cache.u_f, grad_fg);
    let du_b = normalize_vec_backward(&cache.u_b, grad_bg);
    // u = p / s with p = sum weighted features, s = max(mass, eps).
    // d/dM(x): f(x)/s for p, and -p/s^2 = -u/s when s tracks the mass.
    let uf_dot = cache.u_f.iter().zip(du_f.iter()).map(|(&a, &b)| a * b).sum::<T>();
    let ub_dot = cache.u_b.iter().zip(du_b.iter()).map(|(&a, &b)| a * b).sum::<T>();
    let mut dm = Array2::<T>::zeros((h, w));
    let mut df = Array3::<T>::zeros((d, h, w));
    for r in 0..h {
        for c in 0..w {
            let mut fg_term = T::zero();
            let mut bg_term = T::zero();
            for ch in 0..d {
                fg_term += du_f[ch] * f[[ch, r, c]];
                bg_term += du_b[ch] * f[[ch, r, c]];
                df[[ch, r, c]] = m[[r, c]] / cache.s_f * du_f[ch]
                    + (T::one() - m[[r, c]]) / cache.s_b * du_b[ch];
            }
            let mut g = fg_term / cache.s_f - bg_term / cache.s_b;
            if !cache.fg_guarded {
                g -= uf_dot / cache.s_f;
            }
            if !cache.bg_guarded {
                g += ub_dot / cache.s_b;
            }
            dm[[r, c]] = g;
        }
    }
    (dm, df)
}

/// `(cos(u, v) + 1) / 2`, mapped into `[0,1]`. Zero vectors score 0.5.
fn similarity<T: Scalar>(u: &Array1<T>, v: &Array1<T>) -> T {
    let half = T::from_f64_(0.5);
    let nu = u.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nv = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if nu <= T::zero() || nv <= T::zero() {
        return half;
    }
    let dot = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum::<T>();
    (dot / (nu * nv) + T::one()) * half
}

/// `-log(clamp(x, eps, 1))`; clamping keeps every term nonnegative and finite.
fn guarded_neg_log<T: Scalar>(x: T, epsilon: T) -> T {
    -x.max(epsilon).min(T::one()).ln()
}

/// Contrastive separation of pooled foreground from pooled background:
/// cross fg/bg pairs are pushed apart, within-set pairs pulled together.
pub fn c2am_loss<T: Scalar>(batch: &[FgBgEmbedding<T>], epsilon: T) -> Result<T> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let b = batch.len();
    let bf = T::from_f64_(b as f64);
    let one = T::one();
    let mut l_neg = T::zero();
    for i in 0..b {
        for j in 0..b {
            let s = similarity(&batch[i].fg, &batch[j].bg);
            l_neg += guarded_neg_log(one - s + epsilon, epsilon);
        }
    }
    l_neg /= bf * bf;
    let pair_norm = T::from_f64_(2.0 / (b as f64 * (b as f64 - 1.0)));
    let mut l_fg = T::zero();
    let mut l_bg = T::zero();
    for i in 0..b {
        for j in (i + 1)..b {
            l_fg += guarded_neg_log(similarity(&batch[i].fg, &batch[j].fg) + epsilon, epsilon);
            l_bg += guarded_neg_log(similarity(&batch[i].bg, &batch[j].bg) + epsilon, epsilon);
        }
    }
    Ok(l_fg * pair_norm + l_bg * pair_norm + l_neg)
}

/// Gradient of the similarity w.r.t. `u` (by symmetry, swap for `v`).
fn similarity_grad_u<T: Scalar>(u: &Array1<T>, v: &Array1<T>) -> Array1<T> {
    let nu = u.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nv = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if nu <= T::zero() || nv <= T::zero() {
        return Array1::zeros(u.len());
    }
    let dot = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum::<T>();
    let cosv = dot / (nu * nv);
    let half = T::from_f64_(0.5);
    Array1::from_shape_fn(u.len(), |i| half * (v[i] / (nu * nv) - cosv * u[i] / (nu * nu)))
}

/// Derivative of `guarded_neg_log(arg)` w.r.t. `arg`; zero inside the clamp.
fn guarded_neg_log_grad<T: Scalar>(arg: T, epsilon: T) -> T {
    if arg <= epsilon || arg >= T::one() {
        T::zero()
    } else {
        -T::one() / arg
    }
}

/// Loss plus `dL/d(fg_i)`, `dL/d(bg_i)` for every batch element.
pub fn c2am_grad<T: Scalar>(
    batch: &[FgBgEmbedding<T>],
    epsilon: T,
) -> Result<(T, Vec<(Array1<T>, Array1<T>)>)> {
    let loss = c2am_loss(batch, epsilon)?;
    let b = batch.len();
    let d = batch[0].fg.len();
    let mut grads: Vec<(Array1<T>, Array1<T>)> =
        (0..b).map(|_| (Array1::zeros(d), Array1::zeros(d))).collect();
    let one = T::one();
    let inv_b2 = T::from_f64_(1.0 / (b as f64 * b as f64));
    let pair_norm = T::from_f64_(2.0 / (b as f64 * (b as f64 - 1.0)));
    for i in 0..b {
        for j in 0..b {
            // L_neg term: arg = 1 - s + eps, d(arg)/ds = -1.
            let s = similarity(&batch[i].fg, &batch[j].bg);
            let darg = guarded_neg_log_grad(one - s + epsilon, epsilon) * inv_b2;
            let ds = -darg;
            let gu = similarity_grad_u(&batch[i].fg, &batch[j].bg).mapv(|g| g * ds);
            let gv = similarity_grad_u(&batch[j].bg, &batch[i].fg).mapv(|g| g * ds);
            grads[i].0 += &gu;
            grads[j].1 += &gv;
        }
    }
    for i in 0..b {
        for j in (i + 1)..b {
            let s = similarity(&batch[i].fg, &batch[j].fg);
            let ds = guarded_neg_log_grad(s + epsilon, epsilon) * pair_norm;
            let gu = similarity_grad_u(&batch[i].fg, &batch[j].fg).mapv(|g| g * ds);
            let gv = similarity_grad_u(&batch[j].fg, &batch[i].fg).mapv(|g| g * ds);
            grads[i].0 += &gu;
            grads[j].0 += &gv;

            let s = similarity(&batch[i].bg, &batch[j].bg);
            let ds = guarded_neg_log_grad(s + epsilon, epsilon) * pair_norm;
            let gu = similarity_grad_u(&batch[i].bg, &batch[j].bg).mapv(|g| g * ds);
            let gv = similarity_grad_u(&batch[j].bg, &batch[i].bg).mapv(|g| g * ds);
            grads[i].1 += &gu;
            grads[j].1 += &gv;
        }
    }
    Ok((loss, grads))
}

/// Cross-entropy ablation head: classifies the global mean of the fused map.
#[derive(Debug, Clone)]
pub struct MapHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> MapHead<T> {
    pub fn new<R: Rng>(num_classes: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(1, num_classes, rng) }
    }
}

impl<T: Scalar> Layer<T> for MapHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_params_mut(prefix, f);
    }
}

/// Softmax cross entropy of the map-mean logits against the image label.
pub fn aggregation_ce_loss<T: Scalar>(m: &Array2<T>, label: usize, head: &MapHead<T>) -> T {
    let (h, w) = m.dim();
    let mean = m.iter().cloned().sum::<T>() / T::from_f64_((h * w) as f64);
    let x = Array2::from_elem((1, 1), mean);
    let logits = head.linear.forward(&x);
    let (loss, _) = ops::softmax_cross_entropy(&logits, &[label]);
    loss
}

/// Same, accumulating head gradients and returning `dL/dM`.
pub fn aggregation_ce_grad<T: Scalar>(
    m: &Array2<T>,
    label: usize,
    head: &mut MapHead<T>,
) -> (T, Array2<T>) {
    let (h, w) = m.dim();
    let area = T::from_f64_((h * w) as f64);
    let mean = m.iter().cloned().sum::<T>() / area;
    let x = Array2::from_elem((1, 1), mean);
    let logits = head.linear.forward(&x);
    let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &[label]);
    let dx = head.linear.backward(&x, &dlogits);
    let dmean = dx[[0, 0]];
    (loss, Array2::from_elem((h, w), dmean / area))
}
