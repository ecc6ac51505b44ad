//! L2-loss backpropagation through routed paths and the training loop:
//! tag-homogeneous batches in round-robin, per-difficulty parameter
//! updates, the step learning-rate schedule, and multi-scale training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{PrnError, Result};
use crate::imagepipe::{bicubic_resize, crop_patches, ImagePlane};
use crate::prior::{classify, gradient_prior, DifficultyTag, Thresholds};
use crate::prnet::{ParamKey, PrnModel, LEAKY_SLOPE};
use crate::tensorops::{
    conv2d_forward, deconv2d_backward, deconv2d_forward, leaky_relu, leaky_relu_backward,
    LayerParams, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate is divided by 10 every this many epochs (0 = never).
    pub lr_decay_epochs: usize,
    pub epochs: usize,
    pub scales: Vec<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub thresholds: Thresholds,
    /// HR patch edge; rounded up per scale for divisibility.
    pub patch_size: usize,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f32>,
    /// Per-tag gradient scale (mild, moderate, severe).
    pub tag_weights: [f32; 3],
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            lr_decay_epochs: 300,
            epochs: 0,
            scales: vec![3],
            seed: 0,
            optimizer: Optimizer::Adam,
            thresholds: Thresholds::default(),
            patch_size: 54,
            grad_clip: None,
            tag_weights: [1.0, 1.0, 1.0],
        }
    }
}

/// One LR/HR patch pair with its difficulty tag.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lr_patch: Tensor,
    pub hr_patch: Tensor,
    pub tag: DifficultyTag,
    pub scale: usize,
}

/// Crop HR images into patches, synthesize LR by bicubic downscale, tag by
/// the gradient prior of the LR patch. Pairs are shuffled deterministically.
pub fn make_training_pairs(
    hr_images: &[ImagePlane],
    scales: &[usize],
    thresholds: &Thresholds,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if hr_images.is_empty() {
        return Err(PrnError::EmptyInput("make_training_pairs: no images"));
    }
    if scales.is_empty() {
        return Err(PrnError::EmptyInput("make_training_pairs: no scales"));
    }
    let mut pairs = Vec::new();
    for &scale in scales {
        if !(2..=4).contains(&scale) {
            return Err(PrnError::UnsupportedScale(scale));
        }
        let hr_ps = patch_size.div_ceil(scale) * scale;
        let lr_ps = hr_ps / scale;
        for image in hr_images {
            let (_, hr_patches) = crop_patches(image, hr_ps)?;
            for hr in hr_patches {
                let hr_plane = ImagePlane::from_tensor(&hr)?;
                let lr_plane = bicubic_resize(&hr_plane, lr_ps, lr_ps);
                let lr = lr_plane.to_tensor();
                let tag = classify(gradient_prior(&lr)?, thresholds);
                pairs.push(TrainingPair {
                    lr_patch: lr,
                    hr_patch: hr,
                    tag,
                    scale,
                });
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Mean squared error over all elements and its gradient 2(pred - target)/N.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(PrnError::shape(
            "l2_loss",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.numel() as f64;
    let mut acc = 0.0f64;
    let mut grad = pred.clone();
    let scale = (2.0 / n) as f32;
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data().iter()) {
        let d = *g - t;
        acc += (d as f64) * (d as f64);
        *g = d * scale;
    }
    Ok((acc / n, grad))
}

/// Cached activations of one routed pass, for backprop.
struct PathCache {
    conv_inputs: Vec<Tensor>,
    pre_acts: Vec<Tensor>,
    up_input: Tensor,
    output: Tensor,
}

/// Per-layer gradients of one routed pass: convs in route order, then the
/// upsampler.
struct PathGrads {
    convs: Vec<(Tensor, Vec<f32>)>,
    up: (Tensor, Vec<f32>),
}

fn forward_cached(
    patch: &Tensor,
    convs: &[(crate::prnet::StageKind, &LayerParams)],
    up: &LayerParams,
    scale: usize,
) -> Result<PathCache> {
    let mut conv_inputs = Vec::with_capacity(convs.len());
    let mut pre_acts = Vec::with_capacity(convs.len());
    let mut x = patch.clone();
    for (_, layer) in convs {
        let pre = conv2d_forward(&x, layer)?;
        conv_inputs.push(x);
        x = leaky_relu(&pre, LEAKY_SLOPE);
        pre_acts.push(pre);
    }
    let output = deconv2d_forward(&x, up, scale)?;
    Ok(PathCache {
        conv_inputs,
        pre_acts,
        up_input: x,
        output,
    })
}

fn backward_cached(
    cache: &PathCache,
    convs: &[(crate::prnet::StageKind, &LayerParams)],
    up: &LayerParams,
    scale: usize,
    grad_out: &Tensor,
) -> Result<PathGrads> {
    let (mut g, up_gw, up_gb) = deconv2d_backward(&cache.up_input, up, scale, grad_out)?;
    let mut conv_grads = vec![None; convs.len()];
    for (i, (_, layer)) in convs.iter().enumerate().rev() {
        let g_pre = leaky_relu_backward(&cache.pre_acts[i], &g, LEAKY_SLOPE)?;
        // The first layer's input is the data patch; skip its gradient.
        let (g_in, gw, gb) =
            crate::tensorops::conv2d_backward_impl(&cache.conv_inputs[i], layer, &g_pre, i > 0)?;
        conv_grads[i] = Some((gw, gb));
        if let Some(g_in) = g_in {
            g = g_in;
        }
    }
    Ok(PathGrads {
        convs: conv_grads.into_iter().map(|g| g.unwrap()).collect(),
        up: (up_gw, up_gb),
    })
}

/// Loss of one routed pass, forward only.
pub fn routed_loss(
    model: &PrnModel,
    patch: &Tensor,
    target: &Tensor,
    tag: DifficultyTag,
    scale: usize,
) -> Result<f64> {
    let (convs, up) = model.route_layers(tag, scale)?;
    let cache = forward_cached(patch, &convs, up, scale)?;
    Ok(l2_loss(&cache.output, target)?.0)
}

/// Weight and bias gradients of one layer.
pub type LayerGrads = (Tensor, Vec<f32>);

/// Loss and analytic per-layer gradients of one routed pass: convs in
/// route order, then the upsampler. Useful for gradient diagnostics.
pub fn routed_loss_grads(
    model: &PrnModel,
    patch: &Tensor,
    target: &Tensor,
    tag: DifficultyTag,
    scale: usize,
) -> Result<(f64, Vec<LayerGrads>)> {
    let (convs, up) = model.route_layers(tag, scale)?;
    let cache = forward_cached(patch, &convs, up, scale)?;
    let (loss, grad) = l2_loss(&cache.output, target)?;
    let grads = backward_cached(&cache, &convs, up, scale, &grad)?;
    let mut out = grads.convs;
    out.push(grads.up);
    Ok((loss, out))
}

/// Adam moment slots for one layer.
#[derive(Debug, Clone)]
struct AdamSlot {
    m_w: Vec<f32>,
    v_w: Vec<f32>,
    m_b: Vec<f32>,
    v_b: Vec<f32>,
    t: u64,
}

/// Optimizer state across steps, keyed per layer.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    slots: BTreeMap<ParamKey, AdamSlot>,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

fn adam_update(w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f32) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        w[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// One optimization step over a tag- and scale-homogeneous batch.
///
/// Exactly the parameters of the batch's routed path are updated; every
/// other parameter is left bit-identical. Returns the batch's mean loss.
pub fn train_step(
    model: &mut PrnModel,
    batch: &[&TrainingPair],
    config: &TrainConfig,
    state: &mut OptimState,
    lr: f32,
) -> Result<f64> {
    let first = batch.first().ok_or(PrnError::EmptyInput("train_step"))?;
    let (tag, scale) = (first.tag, first.scale);
    if batch.iter().any(|p| p.tag != tag || p.scale != scale) {
        return Err(PrnError::MixedBatch);
    }

    // Per-sample forward/backward in parallel; the ordered collect plus a
    // fixed-order reduction keeps results identical for any worker count.
    let (convs, up) = model.route_layers(tag, scale)?;
    let per_sample: Vec<Result<(f64, PathGrads)>> = batch
        .par_iter()
        .map(|pair| {
            let cache = forward_cached(&pair.lr_patch, &convs, up, scale)?;
            let (loss, grad) = l2_loss(&cache.output, &pair.hr_patch)?;
            let grads = backward_cached(&cache, &convs, up, scale, &grad)?;
            Ok((loss, grads))
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f32;
    let weight = config.tag_weights[tag.index()] * inv_b;
    let mut mean_loss = 0.0f64;
    let mut summed: Option<PathGrads> = None;
    for r in per_sample {
        let (loss, grads) = r?;
        mean_loss += loss;
        match &mut summed {
            None => {
                summed = Some(grads);
            }
            Some(acc) => {
                for (a, g) in acc.convs.iter_mut().zip(grads.convs.iter()) {
                    for (av, gv) in a.0.data_mut().iter_mut().zip(g.0.data().iter()) {
                        *av += gv;
                    }
                    for (av, gv) in a.1.iter_mut().zip(g.1.iter()) {
                        *av += gv;
                    }
                }
                let (aw, ab) = &mut acc.up;
                for (av, gv) in aw.data_mut().iter_mut().zip(grads.up.0.data().iter()) {
                    *av += gv;
                }
                for (av, gv) in ab.iter_mut().zip(grads.up.1.iter()) {
                    *av += gv;
                }
            }
        }
    }
    mean_loss /= batch.len() as f64;
    let mut grads = summed.expect("batch is nonempty");

    // Flatten the batch mean and tag weight into the gradients.
    let scale_all = |s: f32, grads: &mut PathGrads| {
        for (gw, gb) in &mut grads.convs {
            for v in gw.data_mut() {
                *v *= s;
            }
            for v in gb.iter_mut() {
                *v *= s;
            }
        }
        for v in grads.up.0.data_mut() {
            *v *= s;
        }
        for v in grads.up.1.iter_mut() {
            *v *= s;
        }
    };
    scale_all(weight, &mut grads);

    if let Some(max_norm) = config.grad_clip {
        let mut sq = 0.0f64;
        for (gw, gb) in &grads.convs {
            sq += gw.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            sq += gb.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        sq += grads.up.0.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        sq += grads.up.1.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        let norm = sq.sqrt();
        if norm > max_norm as f64 {
            scale_all((max_norm as f64 / norm) as f32, &mut grads);
        }
    }

    // Apply updates to exactly the routed parameter set.
    let route = model.route_params_mut(tag, scale)?;
    debug_assert_eq!(route.len(), grads.convs.len() + 1);
    let mut grad_iter = grads
        .convs
        .into_iter()
        .chain(std::iter::once(grads.up));
    for (key, layer) in route {
        let (gw, gb) = grad_iter.next().expect("one gradient per route layer");
        match config.optimizer {
            Optimizer::Sgd => {
                for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data().iter()) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb.iter()) {
                    *b -= lr * g;
                }
            }
            Optimizer::Adam => {
                let slot = state.slots.entry(key).or_insert_with(|| AdamSlot {
                    m_w: vec![0.0; layer.weights.numel()],
                    v_w: vec![0.0; layer.weights.numel()],
                    m_b: vec![0.0; layer.bias.len()],
                    v_b: vec![0.0; layer.bias.len()],
                    t: 0,
                });
                slot.t += 1;
                adam_update(
                    layer.weights.data_mut(),
                    gw.data(),
                    &mut slot.m_w,
                    &mut slot.v_w,
                    slot.t,
                    lr,
                );
                adam_update(&mut layer.bias, &gb, &mut slot.m_b, &mut slot.v_b, slot.t, lr);
            }
        }
    }
    Ok(mean_loss)
}

/// Learning rate at an epoch: lr * 10^-(epoch / decay_epochs), integer
/// division; `decay_epochs == 0` disables decay.
pub fn effective_lr(base: f32, epoch: usize, decay_epochs: usize) -> f32 {
    if decay_epochs == 0 {
        return base;
    }
    base * 10f32.powi(-((epoch / decay_epochs) as i32))
}

/// Loss summary of one epoch.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    /// Mean loss per tag (mild, moderate, severe); None when no batch of
    /// that tag ran this epoch.
    pub loss_by_tag: [Option<f64>; 3],
    /// Mean loss over all batches of the epoch.
    pub mean_loss: f64,
}

/// Loss curve of a full run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_mild,loss_moderate,loss_severe,loss_mean\n");
        for e in &self.epochs {
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8},{},{},{},{:.8}\n",
                e.epoch,
                e.lr,
                cell(e.loss_by_tag[0]),
                cell(e.loss_by_tag[1]),
                cell(e.loss_by_tag[2]),
                e.mean_loss
            ));
        }
        out
    }
}

/// Train in place: per epoch, tag-homogeneous batches are drawn round-robin
/// across (tag, scale) buckets, skipping exhausted buckets. Deterministic
/// under a fixed seed and config.
pub fn train(model: &mut PrnModel, pairs: &[TrainingPair], config: &TrainConfig) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(PrnError::EmptyInput("train: no pairs"));
    }
    if config.batch_size == 0 {
        return Err(PrnError::InvalidConfig("batch_size must be >= 1".into()));
    }
    if config.lr <= 0.0 || config.lr.is_nan() {
        return Err(PrnError::InvalidConfig("lr must be > 0".into()));
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        buckets.entry((p.tag.index(), p.scale)).or_default().push(i);
    }
    let mut state = OptimState::default();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let lr = effective_lr(config.lr, epoch, config.lr_decay_epochs);
        // Fixed bucket iteration order keeps the RNG stream reproducible.
        let mut batches: BTreeMap<(usize, usize), Vec<Vec<usize>>> = BTreeMap::new();
        for (key, indices) in &mut buckets {
            indices.shuffle(&mut rng);
            batches.insert(
                *key,
                indices.chunks(config.batch_size).map(|c| c.to_vec()).collect(),
            );
        }
        let rounds = batches.values().map(|b| b.len()).max().unwrap_or(0);
        let mut tag_acc = [(0.0f64, 0usize); 3];
        #[allow(clippy::needless_range_loop)]
        for round in 0..rounds {
            for tag_idx in 0..3 {
                for &scale in &config.scales {
                    let Some(bucket) = batches.get(&(tag_idx, scale)) else {
                        continue;
                    };
                    let Some(batch_idx) = bucket.get(round) else {
                        continue;
                    };
                    let batch: Vec<&TrainingPair> = batch_idx.iter().map(|&i| &pairs[i]).collect();
                    let loss = train_step(model, &batch, config, &mut state, lr)?;
                    tag_acc[tag_idx].0 += loss * batch.len() as f64;
                    tag_acc[tag_idx].1 += batch.len();
                }
            }
        }
        let loss_by_tag = tag_acc.map(|(sum, n)| if n > 0 { Some(sum / n as f64) } else { None });
        let total: f64 = tag_acc.iter().map(|(s, _)| s).sum();
        let count: usize = tag_acc.iter().map(|(_, n)| n).sum();
        report.epochs.push(EpochStats {
            epoch,
            lr,
            loss_by_tag,
            mean_loss: if count > 0 { total / count as f64 } else { 0.0 },
        });
    }
    Ok(report)
}
