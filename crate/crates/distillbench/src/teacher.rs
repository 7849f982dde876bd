//! Teacher construction from a poisoned encoder: fine-tuning (FT),
//! activation pruning (FP), adversarial-perturbation pruning (ANP), and
//! trigger inversion plus unlearning (MOTH).

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::ArchId;
use crate::data::{to_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, Encoder};
use crate::pretrain::{augment, contrastive_train_from, nt_xent_with_grad, PretrainHParams, TrainedEncoder};

const EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// FT: continue contrastive training on the clean subset
// ---------------------------------------------------------------------------

pub fn make_teacher_ft(
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    epochs: usize,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    let hp = PretrainHParams { epochs, ..hparams.clone() };
    contrastive_train_from(poisoned.clone(), clean_subset, &hp, seed)
}

// ---------------------------------------------------------------------------
// FP: prune the most active channels of the last tap
// ---------------------------------------------------------------------------

/// Mean absolute activation of each last-tap channel over the dataset.
pub fn last_tap_activation(encoder: &Encoder, dataset: &LabeledDataset) -> Array1<f64> {
    let channels = *encoder.tap_channels().last().expect("at least one tap");
    let mut acc = Array1::<f64>::zeros(channels);
    let mut count = 0usize;
    for chunk in dataset.images.chunks(64) {
        let x = to_batch(chunk);
        let (_, taps) = encoder.forward(&x);
        let tap = taps.last().unwrap();
        let s = tap.shape();
        for c in 0..channels {
            let mut sum = 0.0;
            for bi in 0..s[0] {
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        sum += tap[[bi, c, i, j]].abs();
                    }
                }
            }
            acc[c] += sum;
        }
        count += s[0] * s[2] * s[3];
    }
    acc.mapv(|v| v / count as f64)
}

/// Rank by score descending, ties broken toward the lowest index, and
/// return the first `k` indices.
fn top_k_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

pub fn make_teacher_fp(
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    prune_fraction: f64,
    ft_epochs: usize,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::validation("prune_fraction", "must be in [0, 1)"));
    }
    let activation = last_tap_activation(poisoned, clean_subset);
    let channels = activation.len();
    let k = (prune_fraction * channels as f64).floor() as usize;
    let pruned = top_k_by_score(activation.as_slice().unwrap(), k);
    let mut encoder = poisoned.clone();
    let last = encoder.stage_scales.len() - 1;
    for &c in &pruned {
        encoder.stage_scales[last][c] = 0.0;
    }
    let hp = PretrainHParams { epochs: ft_epochs, ..hparams.clone() };
    // channel scales are outside the trainable parameter vector, so the
    // pruning mask survives the fine-tune
    contrastive_train_from(encoder, clean_subset, &hp, seed)
}

// ---------------------------------------------------------------------------
// ANP: prune channels most sensitive to adversarial scale perturbation
// ---------------------------------------------------------------------------

/// First-order loss increase of the contrastive loss when each channel
/// scale is pushed by a sign-of-gradient multiplicative perturbation of
/// magnitude `budget`: score = budget * |dL/ds| * |s|. A channel with
/// identically-zero activations has zero gradient and thus zero score.
pub fn anp_sensitivities(
    encoder: &Encoder,
    clean_subset: &LabeledDataset,
    budget: f64,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<Vec<Array1<f64>>> {
    if budget <= 0.0 {
        return Err(Error::validation("perturb_budget", "must be > 0"));
    }
    let n = clean_subset.len().min(hparams.batch_size.max(2));
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let imgs = &clean_subset.images[..n];
    let view_a: Vec<Array3<f64>> = imgs.iter().map(|im| augment(im, hparams.augmentation, &mut rng)).collect();
    let view_b: Vec<Array3<f64>> = imgs.iter().map(|im| augment(im, hparams.augmentation, &mut rng)).collect();
    let xa = to_batch(&view_a);
    let xb = to_batch(&view_b);
    let (ea, _, cache_a) = encoder.forward_full(&xa);
    let (eb, _, cache_b) = encoder.forward_full(&xb);
    let (_, da, db) = nt_xent_with_grad(&ea, &eb, hparams.temperature)?;
    let ga = encoder.backward(&cache_a, &da, None);
    let gb = encoder.backward(&cache_b, &db, None);
    let scores = encoder
        .stage_scales
        .iter()
        .enumerate()
        .map(|(si, scales)| {
            Array1::from_shape_fn(scales.len(), |c| {
                let g = ga.scales[si][c] + gb.scales[si][c];
                budget * g.abs() * scales[c].abs()
            })
        })
        .collect();
    Ok(scores)
}

pub fn make_teacher_anp(
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    perturb_budget: f64,
    prune_fraction: f64,
    ft_epochs: usize,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::validation("prune_fraction", "must be in [0, 1)"));
    }
    let scores = anp_sensitivities(poisoned, clean_subset, perturb_budget, hparams, seed)?;
    // flatten (stage, channel) in lexicographic order so ties resolve to
    // the lowest global index
    let mut flat = Vec::new();
    let mut coords = Vec::new();
    for (si, s) in scores.iter().enumerate() {
        for c in 0..s.len() {
            flat.push(s[c]);
            coords.push((si, c));
        }
    }
    let k = (prune_fraction * flat.len() as f64).floor() as usize;
    let mut encoder = poisoned.clone();
    for idx in top_k_by_score(&flat, k) {
        let (si, c) = coords[idx];
        encoder.stage_scales[si][c] = 0.0;
    }
    let hp = PretrainHParams { epochs: ft_epochs, ..hparams.clone() };
    contrastive_train_from(encoder, clean_subset, &hp, seed)
}

// ---------------------------------------------------------------------------
// Trigger inversion
// ---------------------------------------------------------------------------

/// Inverted trigger candidate: a full-image pattern and per-pixel blend
/// weights, applied as x' = (1 - m)·x + m·pattern.
#[derive(Debug, Clone)]
pub struct TriggerEstimate {
    /// H×W×C pattern in pixel space.
    pub pattern: Array3<f64>,
    /// H×W blend weights in [0, 1], shared across channels.
    pub mask: Array2<f64>,
    pub inversion_loss_trace: Vec<f64>,
}

impl TriggerEstimate {
    pub fn validate(&self, image_shape: (usize, usize, usize)) -> Result<()> {
        let (h, w, c) = image_shape;
        if self.pattern.shape() != [h, w, c] || self.mask.shape() != [h, w] {
            return Err(Error::Geometry(
                "trigger estimate shape does not match image shape".into(),
            ));
        }
        if self.mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::validation("mask", "blend weights must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Apply the blended trigger to a BCHW batch.
    pub fn stamp(&self, x: &Array4<f64>) -> Array4<f64> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let m = self.mask[[i, j]];
                        out[[bi, ci, i, j]] =
                            (1.0 - m) * x[[bi, ci, i, j]] + m * self.pattern[[i, j, ci]];
                    }
                }
            }
        }
        out
    }
}

/// Mean cosine similarity over all unordered pairs of rows, with
/// gradients w.r.t. the rows.
pub fn mean_pairwise_cosine(e: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, dim) = (e.shape()[0], e.shape()[1]);
    assert!(n >= 2, "need at least two rows");
    let pairs = (n * (n - 1) / 2) as f64;
    let norms: Vec<f64> = (0..n).map(|i| e.row(i).dot(&e.row(i)).sqrt().max(EPS)).collect();
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        for j in (i + 1)..n {
            let dot = e.row(i).dot(&e.row(j));
            let cos = dot / (norms[i] * norms[j]);
            total += cos;
            for d in 0..dim {
                grad[[i, d]] += (e[[j, d]] / (norms[i] * norms[j])
                    - cos * e[[i, d]] / (norms[i] * norms[i]))
                    / pairs;
                grad[[j, d]] += (e[[i, d]] / (norms[i] * norms[j])
                    - cos * e[[j, d]] / (norms[j] * norms[j]))
                    / pairs;
            }
        }
    }
    (total / pairs, grad)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub const MASK_SPARSITY_WEIGHT: f64 = 1e-3;

/// Optimize a (pattern, mask) pair so that stamped clean samples collapse
/// to similar embeddings, with an L1 penalty keeping the mask sparse.
/// Returns the best iterate seen, starting from a gray pattern (0.5) and
/// a uniform 0.5 mask.
pub fn invert_trigger(
    encoder: &Encoder,
    clean_subset: &LabeledDataset,
    trigger_shape: (usize, usize),
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TriggerEstimate> {
    let (h, w, c) = clean_subset.image_shape();
    if trigger_shape.0 > h || trigger_shape.1 > w || trigger_shape.0 == 0 || trigger_shape.1 == 0 {
        return Err(Error::Geometry(format!(
            "trigger shape {}x{} does not fit {}x{} images",
            trigger_shape.0, trigger_shape.1, h, w
        )));
    }
    let n = clean_subset.len().min(32);
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let _rng = ChaCha12Rng::seed_from_u64(seed); // reserved for batch choice
    let x = to_batch(&clean_subset.images[..n]);

    // pattern and mask live behind sigmoids; zero logits give the
    // documented 0.5 initialization for both
    let n_pat = h * w * c;
    let n_mask = h * w;
    let mut params = vec![0.0f64; n_pat + n_mask];
    let mut adam = Adam::new(learning_rate, params.len());

    let eval = |params: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let pattern = Array3::from_shape_fn((h, w, c), |(i, j, ci)| {
            sigmoid(params[(i * w + j) * c + ci])
        });
        let mask = Array2::from_shape_fn((h, w), |(i, j)| sigmoid(params[n_pat + i * w + j]));
        let est = TriggerEstimate { pattern: pattern.clone(), mask: mask.clone(), inversion_loss_trace: vec![] };
        let stamped = est.stamp(&x);
        let (emb, _, cache) = encoder.forward_full(&stamped);
        let (cos, d_emb) = mean_pairwise_cosine(&emb);
        let objective = cos - MASK_SPARSITY_WEIGHT * mask.iter().sum::<f64>();
        if !objective.is_finite() {
            return Err(Error::InversionFailure(
                "inversion objective became non-finite".into(),
            ));
        }
        if !want_grad {
            return Ok((objective, vec![]));
        }
        let g = encoder.backward(&cache, &d_emb, None);
        let mut grad = vec![0.0f64; params.len()];
        for i in 0..h {
            for j in 0..w {
                let m = mask[[i, j]];
                let mut dm = -MASK_SPARSITY_WEIGHT;
                for ci in 0..c {
                    let mut dp = 0.0;
                    for bi in 0..n {
                        let gi = g.input[[bi, ci, i, j]];
                        dp += m * gi;
                        dm += (pattern[[i, j, ci]] - x[[bi, ci, i, j]]) * gi;
                    }
                    let p = pattern[[i, j, ci]];
                    grad[(i * w + j) * c + ci] = dp * p * (1.0 - p);
                }
                grad[n_pat + i * w + j] = dm * m * (1.0 - m);
            }
        }
        Ok((objective, grad))
    };

    let (mut best_obj, _) = eval(&params, false)?;
    let mut best_params = params.clone();
    let mut trace = vec![best_obj];
    for _ in 0..steps {
        let (obj, grad) = eval(&params, true)?;
        if obj > best_obj {
            best_obj = obj;
            best_params = params.clone();
        }
        // ascend: Adam minimizes, so feed the negated gradient
        let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
        adam.step(&mut params, &neg);
        trace.push(trace.last().unwrap().max(obj));
    }
    let (final_obj, _) = eval(&params, false)?;
    if final_obj > best_obj {
        best_params = params;
        best_obj = final_obj;
    }
    let last = *trace.last().unwrap();
    trace.push(last.max(best_obj));
    let pattern = Array3::from_shape_fn((h, w, c), |(i, j, ci)| {
        sigmoid(best_params[(i * w + j) * c + ci])
    });
    let mask = Array2::from_shape_fn((h, w), |(i, j)| sigmoid(best_params[n_pat + i * w + j]));
    Ok(TriggerEstimate { pattern, mask, inversion_loss_trace: trace })
}

// ---------------------------------------------------------------------------
// MOTH: unlearn the inverted trigger
// ---------------------------------------------------------------------------

/// Mean cosine of corresponding rows with gradients w.r.t. both sides.
fn mean_paired_cosine(u: &Array2<f64>, v: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let (n, dim) = (u.shape()[0], u.shape()[1]);
    let mut total = 0.0;
    let mut du = Array2::<f64>::zeros((n, dim));
    let mut dv = Array2::<f64>::zeros((n, dim));
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let nu = u.row(i).dot(&u.row(i)).sqrt().max(EPS);
        let nv = v.row(i).dot(&v.row(i)).sqrt().max(EPS);
        let dot = u.row(i).dot(&v.row(i));
        let cos = dot / (nu * nv);
        total += cos * scale;
        for d in 0..dim {
            du[[i, d]] = (v[[i, d]] / (nu * nv) - cos * u[[i, d]] / (nu * nu)) * scale;
            dv[[i, d]] = (u[[i, d]] / (nu * nv) - cos * v[[i, d]] / (nv * nv)) * scale;
        }
    }
    (total, du, dv)
}

/// Fine-tune the encoder so that estimated-trigger-stamped inputs embed
/// like their clean counterparts while clean embeddings stay anchored to
/// the frozen original.
pub fn make_teacher_moth(
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    estimate: &TriggerEstimate,
    epochs: usize,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    estimate.validate(clean_subset.image_shape())?;
    hparams.validate()?;
    let frozen = poisoned.clone();
    let mut encoder = poisoned.clone();
    let mut adam = Adam::new(hparams.learning_rate, encoder.num_params());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = clean_subset.len();
    let mut trace = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hparams.batch_size) {
            if chunk.is_empty() {
                continue;
            }
            let imgs: Vec<Array3<f64>> = chunk.iter().map(|&i| clean_subset.images[i].clone()).collect();
            let x = to_batch(&imgs);
            let stamped = estimate.stamp(&x);
            let (e_clean, _, cache_clean) = encoder.forward_full(&x);
            let (e_stamp, _, cache_stamp) = encoder.forward_full(&stamped);
            let e_frozen = frozen.embed(&x);
            // unlearning term plus a clean-preservation anchor
            let (cos_unlearn, du_stamp, du_clean_a) = mean_paired_cosine(&e_stamp, &e_clean);
            let (cos_keep, du_clean_b, _) = mean_paired_cosine(&e_clean, &e_frozen);
            let loss = (1.0 - cos_unlearn) + (1.0 - cos_keep);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "unlearning loss became non-finite".into(),
                });
            }
            let d_stamp = du_stamp.mapv(|v| -v);
            let d_clean = (&du_clean_a + &du_clean_b).mapv(|v| -v);
            let g_stamp = encoder.backward(&cache_stamp, &d_stamp, None);
            let g_clean = encoder.backward(&cache_clean, &d_clean, None);
            let grads: Vec<f64> = g_stamp
                .params_flat()
                .iter()
                .zip(g_clean.params_flat())
                .map(|(a, b)| a + b)
                .collect();
            let mut params = encoder.params_flat();
            adam.step(&mut params, &grads);
            encoder.set_params_flat(&params);
            epoch_loss += loss;
            batches += 1;
        }
        if batches > 0 {
            trace.push(epoch_loss / batches as f64);
        }
    }
    Ok(TrainedEncoder { encoder, loss_trace: trace })
}

/// Convenience wrapper: invert a trigger on the poisoned encoder, then
/// unlearn it.
pub fn make_teacher_moth_full(
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    trigger_shape: (usize, usize),
    inversion_steps: usize,
    epochs: usize,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    let estimate = invert_trigger(
        poisoned,
        clean_subset,
        trigger_shape,
        inversion_steps,
        0.1,
        seed.wrapping_add(0x4d4f5448),
    )?;
    make_teacher_moth(poisoned, clean_subset, &estimate, epochs, hparams, seed)
}

#[allow(unused)]
fn arch_of(encoder: &Encoder) -> Option<ArchId> {
    match encoder.spec.id.as_str() {
        "tiny-cnn" => Some(ArchId::TinyCnn),
        "rn18" => Some(ArchId::Rn18),
        "rn34" => Some(ArchId::Rn34),
        "rn50" => Some(ArchId::Rn50),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth_tiny, Split};
    use crate::nn::ArchSpec;
    use crate::pretrain::AugmentationPolicy;

    fn small_hparams() -> PretrainHParams {
        PretrainHParams {
            epochs: 1,
            learning_rate: 0.001,
            batch_size: 8,
            temperature: 0.5,
            augmentation: AugmentationPolicy::Standard,
        }
    }

    fn setup() -> (Encoder, LabeledDataset) {
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let enc = Encoder::init(&spec, 7);
        let ds = generate_synth_tiny(16, Split::Train, 11);
        (enc, ds)
    }

    use crate::data::LabeledDataset;

    #[test]
    fn ft_zero_epochs_is_identity_and_input_untouched() {
        let (enc, ds) = setup();
        let hash = enc.content_hash();
        let t = make_teacher_ft(&enc, &ds, 0, &small_hparams(), 3).unwrap();
        assert_eq!(t.encoder.content_hash(), hash);
        assert_eq!(enc.content_hash(), hash);
    }

    #[test]
    fn fp_zero_fraction_is_mask_noop() {
        let (enc, ds) = setup();
        let hp = PretrainHParams { epochs: 0, ..small_hparams() };
        let t = make_teacher_fp(&enc, &ds, 0.0, 0, &hp, 3).unwrap();
        assert_eq!(t.encoder.content_hash(), enc.content_hash());
    }

    #[test]
    fn fp_rejects_fraction_of_one() {
        let (enc, ds) = setup();
        assert!(make_teacher_fp(&enc, &ds, 1.0, 0, &small_hparams(), 3).is_err());
    }

    #[test]
    fn fp_pruned_channels_are_exactly_zero_and_mask_idempotent() {
        let (enc, ds) = setup();
        let hp = PretrainHParams { epochs: 0, ..small_hparams() };
        let t = make_teacher_fp(&enc, &ds, 0.25, 0, &hp, 3).unwrap();
        let last = t.encoder.stage_scales.len() - 1;
        let pruned: Vec<usize> = t.encoder.stage_scales[last]
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0.0)
            .map(|(c, _)| c)
            .collect();
        // 25% of 32 channels
        assert_eq!(pruned.len(), 8);
        // ranked channels match the activation statistic
        let act = last_tap_activation(&enc, &ds);
        let expect = top_k_by_score(act.as_slice().unwrap(), 8);
        let mut sorted = pruned.clone();
        sorted.sort_unstable();
        let mut expect_sorted = expect.clone();
        expect_sorted.sort_unstable();
        assert_eq!(sorted, expect_sorted);
        // masked activations vanish on arbitrary input
        let x = to_batch(&ds.images[..4]);
        let (_, taps) = t.encoder.forward(&x);
        let tap = taps.last().unwrap();
        for &c in &pruned {
            assert!(tap.index_axis(ndarray::Axis(1), c).iter().all(|&v| v == 0.0));
        }
        // applying the same mask again changes nothing
        let mut again = t.encoder.clone();
        for &c in &pruned {
            again.stage_scales[last][c] = 0.0;
        }
        assert_eq!(again.content_hash(), t.encoder.content_hash());
    }

    #[test]
    fn anp_rejects_nonpositive_budget() {
        let (enc, ds) = setup();
        assert!(anp_sensitivities(&enc, &ds, 0.0, &small_hparams(), 3).is_err());
        assert!(anp_sensitivities(&enc, &ds, -1.0, &small_hparams(), 3).is_err());
    }

    #[test]
    fn anp_dead_channel_has_zero_sensitivity() {
        let (mut enc, ds) = setup();
        // kill output channel 0 of every conv in stage 0 so its raw
        // activations are identically zero
        let mut params = enc.params_flat();
        // stage0 conv0: w shape (16, 3, 3, 3), bias 16 — zero filter 0 and bias 0
        for p in params.iter_mut().take(3 * 3 * 3) {
            *p = 0.0;
        }
        params[16 * 3 * 3 * 3] = 0.0;
        enc.set_params_flat(&params);
        let scores = anp_sensitivities(&enc, &ds, 0.4, &small_hparams(), 3).unwrap();
        assert_eq!(scores[0][0], 0.0);
        assert!(scores[0].iter().skip(1).any(|&v| v > 0.0));
    }

    #[test]
    fn anp_zero_budget_limit_prunes_lowest_indices() {
        let (enc, ds) = setup();
        // vanishing budget scales all sensitivities toward zero uniformly;
        // equal scores must fall back to lowest-index pruning
        let scores = anp_sensitivities(&enc, &ds, 1e-300, &small_hparams(), 3).unwrap();
        let flat: Vec<f64> = scores.iter().flat_map(|s| s.iter().copied()).collect();
        assert!(flat.iter().all(|&v| v.abs() < 1e-290));
        // exactly equal scores resolve to the lowest channel index
        let picked = top_k_by_score(&vec![0.0; flat.len()], 4);
        assert_eq!(picked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn anp_prunes_and_preserves_input() {
        let (enc, ds) = setup();
        let hash = enc.content_hash();
        let hp = PretrainHParams { epochs: 0, ..small_hparams() };
        let t = make_teacher_anp(&enc, &ds, 0.4, 0.1, 0, &hp, 3).unwrap();
        let zeroed: usize = t
            .encoder
            .stage_scales
            .iter()
            .map(|s| s.iter().filter(|&&v| v == 0.0).count())
            .sum();
        // 10% of 48 total channels (16 + 32)
        assert_eq!(zeroed, 4);
        assert_eq!(enc.content_hash(), hash);
    }

    #[test]
    fn inversion_zero_steps_returns_documented_init() {
        let (enc, ds) = setup();
        let est = invert_trigger(&enc, &ds, (3, 3), 0, 0.1, 5).unwrap();
        assert!(est.pattern.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(est.mask.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        est.validate(ds.image_shape()).unwrap();
    }

    #[test]
    fn inversion_rejects_oversized_trigger() {
        let (enc, ds) = setup();
        assert!(matches!(
            invert_trigger(&enc, &ds, (17, 3), 10, 0.1, 5),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn inversion_objective_never_decreases_in_trace() {
        let (enc, ds) = setup();
        let est = invert_trigger(&enc, &ds, (3, 3), 8, 0.1, 5).unwrap();
        let trace = &est.inversion_loss_trace;
        assert!(trace.windows(2).all(|w| w[1] >= w[0]), "{trace:?}");
        assert!(trace.last().unwrap() >= trace.first().unwrap());
    }

    #[test]
    fn pairwise_cosine_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let e = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() - 0.5);
        let (_, grad) = mean_pairwise_cosine(&e);
        let h = 1e-6;
        for i in 0..3 {
            for d in 0..4 {
                let mut ep = e.clone();
                ep[[i, d]] += h;
                let fp = mean_pairwise_cosine(&ep).0;
                ep[[i, d]] -= 2.0 * h;
                let fm = mean_pairwise_cosine(&ep).0;
                let num = (fp - fm) / (2.0 * h);
                assert!((num - grad[[i, d]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn moth_zero_epochs_is_identity() {
        let (enc, ds) = setup();
        let est = invert_trigger(&enc, &ds, (3, 3), 0, 0.1, 5).unwrap();
        let t = make_teacher_moth(&enc, &ds, &est, 0, &small_hparams(), 3).unwrap();
        assert_eq!(t.encoder.content_hash(), enc.content_hash());
    }

    #[test]
    fn moth_training_step_moves_parameters_but_not_input() {
        let (enc, ds) = setup();
        let hash = enc.content_hash();
        let est = invert_trigger(&enc, &ds, (3, 3), 2, 0.1, 5).unwrap();
        let t = make_teacher_moth(&enc, &ds, &est, 1, &small_hparams(), 3).unwrap();
        assert_ne!(t.encoder.content_hash(), hash);
        assert_eq!(enc.content_hash(), hash);
        assert_eq!(t.loss_trace.len(), 1);
    }
}
