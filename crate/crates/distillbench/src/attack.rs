//! Backdoor injection: BadEncoder-style model poisoning and BASSL-style
//! data poisoning.

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::ArchId;
use crate::data::{build_bassl_poison_set, to_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, Encoder};
use crate::pretrain::{contrastive_pretrain, PretrainHParams, TrainedEncoder};
use crate::types::{AttackMethod, AttackSpec, Trigger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadEncoderHParams {
    pub lambda_effect: f64,
    pub lambda_utility: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for BadEncoderHParams {
    fn default() -> Self {
        BadEncoderHParams {
            lambda_effect: 1.0,
            lambda_utility: 1.0,
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 32,
        }
    }
}

/// Stamp a trigger into a (B, C, H, W) batch in place.
pub fn stamp_batch(x: &mut Array4<f64>, trigger: &Trigger) -> Result<()> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (th, tw) = trigger.size();
    let (r0, c0) = trigger.anchor_for(h, w)?;
    for bi in 0..b {
        for i in 0..th {
            for j in 0..tw {
                for ch in 0..c {
                    x[[bi, ch, r0 + i, c0 + j]] = trigger.pattern[[i, j, ch]];
                }
            }
        }
    }
    Ok(())
}

fn check_nonzero(emb: &Array2<f64>, what: &str) -> Result<()> {
    for row in emb.rows() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::NumericalDegeneracy(format!(
                "zero-norm embedding in {what}"
            )));
        }
    }
    Ok(())
}

/// Mean pairwise cosine similarity between every row of `u` and every row of
/// `v`, plus gradients w.r.t. both.
fn mean_cross_cosine(u: &Array2<f64>, v: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let (nu, dim) = (u.shape()[0], u.shape()[1]);
    let nv = v.shape()[0];
    let mut total = 0.0;
    let mut du = Array2::<f64>::zeros((nu, dim));
    let mut dv = Array2::<f64>::zeros((nv, dim));
    let scale = 1.0 / (nu * nv) as f64;
    for i in 0..nu {
        let ui = u.row(i);
        let un = ui.dot(&ui).sqrt().max(1e-12);
        for j in 0..nv {
            let vj = v.row(j);
            let vn = vj.dot(&vj).sqrt().max(1e-12);
            let dot = ui.dot(&vj);
            let cos = dot / (un * vn);
            total += cos * scale;
            for d in 0..dim {
                du[[i, d]] += scale * (vj[d] / (un * vn) - cos * ui[d] / (un * un));
                dv[[j, d]] += scale * (ui[d] / (un * vn) - cos * vj[d] / (vn * vn));
            }
        }
    }
    (total, du, dv)
}

/// Mean cosine similarity between matched rows of `u` and `v`, with the
/// gradient taken w.r.t. `u` only (`v` is treated as constant).
fn mean_paired_cosine_grad_u(u: &Array2<f64>, v: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, dim) = (u.shape()[0], u.shape()[1]);
    let mut total = 0.0;
    let mut du = Array2::<f64>::zeros((n, dim));
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let ui = u.row(i);
        let vi = v.row(i);
        let un = ui.dot(&ui).sqrt().max(1e-12);
        let vn = vi.dot(&vi).sqrt().max(1e-12);
        let cos = ui.dot(&vi) / (un * vn);
        total += cos * scale;
        for d in 0..dim {
            du[[i, d]] += scale * (vi[d] / (un * vn) - cos * ui[d] / (un * un));
        }
    }
    (total, du)
}

pub struct BadEncoderLossParts {
    pub total: f64,
    pub effect: f64,
    pub utility: f64,
}

/// BadEncoder objective:
/// lambda_e * (1 - mean cos(poisoned(x (.) trigger), poisoned(reference)))
/// + lambda_u * (1 - mean cos(poisoned(x), frozen_clean(x))).
pub fn badencoder_loss(
    poisoned: &Encoder,
    frozen_clean: &Encoder,
    shadow_batch: &Array4<f64>,
    trigger: &Trigger,
    reference_inputs: &Array4<f64>,
    lambda_effect: f64,
    lambda_utility: f64,
) -> Result<BadEncoderLossParts> {
    let (parts, _) = badencoder_loss_with_grads(
        poisoned,
        frozen_clean,
        shadow_batch,
        trigger,
        reference_inputs,
        lambda_effect,
        lambda_utility,
    )?;
    Ok(parts)
}

/// Loss plus gradient over the poisoned encoder's flat parameter vector.
pub fn badencoder_loss_with_grads(
    poisoned: &Encoder,
    frozen_clean: &Encoder,
    shadow_batch: &Array4<f64>,
    trigger: &Trigger,
    reference_inputs: &Array4<f64>,
    lambda_effect: f64,
    lambda_utility: f64,
) -> Result<(BadEncoderLossParts, Vec<f64>)> {
    if shadow_batch.shape()[0] == 0 {
        return Err(Error::validation("shadow_batch", "must be non-empty"));
    }
    let mut stamped = shadow_batch.clone();
    stamp_batch(&mut stamped, trigger)?;
    let (emb_stamped, _, cache_stamped) = poisoned.forward_full(&stamped);
    let (emb_ref, _, cache_ref) = poisoned.forward_full(reference_inputs);
    let (emb_clean, _, cache_clean) = poisoned.forward_full(shadow_batch);
    let emb_frozen = frozen_clean.embed(shadow_batch);
    check_nonzero(&emb_stamped, "stamped shadow batch")?;
    check_nonzero(&emb_ref, "reference batch")?;
    check_nonzero(&emb_clean, "clean shadow batch")?;
    check_nonzero(&emb_frozen, "frozen embeddings")?;

    let (effect_cos, d_stamped_cos, d_ref_cos) = mean_cross_cosine(&emb_stamped, &emb_ref);
    let (utility_cos, d_clean_cos) = mean_paired_cosine_grad_u(&emb_clean, &emb_frozen);
    let effect = 1.0 - effect_cos;
    let utility = 1.0 - utility_cos;
    let total = lambda_effect * effect + lambda_utility * utility;

    // d total / d embeddings (loss decreases cosine terms)
    let d_stamped = d_stamped_cos.mapv(|v| -lambda_effect * v);
    let d_ref = d_ref_cos.mapv(|v| -lambda_effect * v);
    let d_clean = d_clean_cos.mapv(|v| -lambda_utility * v);

    let g1 = poisoned.backward(&cache_stamped, &d_stamped, None);
    let g2 = poisoned.backward(&cache_ref, &d_ref, None);
    let g3 = poisoned.backward(&cache_clean, &d_clean, None);
    let mut flat = g1.params_flat();
    for (a, (b, c)) in flat
        .iter_mut()
        .zip(g2.params_flat().into_iter().zip(g3.params_flat()))
    {
        *a += b + c;
    }
    Ok((
        BadEncoderLossParts {
            total,
            effect,
            utility,
        },
        flat,
    ))
}

pub struct AttackResult {
    pub encoder: Encoder,
    pub loss_trace: Vec<f64>,
    pub effect_start: f64,
    pub effect_end: f64,
}

/// Gradient-based model poisoning: fine-tune a clean encoder so stamped
/// inputs align with target-class references while clean features stay put.
pub fn badencoder_poison(
    clean: &Encoder,
    spec: &AttackSpec,
    shadow_set: &LabeledDataset,
    hparams: &BadEncoderHParams,
    seed: u64,
) -> Result<AttackResult> {
    if spec.method != AttackMethod::BadEncoder {
        return Err(Error::validation("attack.method", "expected BADENCODER"));
    }
    // Reference inputs: the first `reference_count` shadow images of the
    // target class.
    let refs: Vec<Array3<f64>> = shadow_set
        .images
        .iter()
        .zip(&shadow_set.labels)
        .filter(|(_, &l)| l == spec.target_class)
        .take(spec.strength.reference_count.max(1))
        .map(|(img, _)| img.clone())
        .collect();
    if refs.is_empty() {
        return Err(Error::AttackConstruction(format!(
            "shadow set has no images of target class {}",
            spec.target_class
        )));
    }
    let reference_batch = to_batch(&refs);
    let mut encoder = clean.clone();
    let mut adam = Adam::new(hparams.learning_rate, encoder.num_params());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut effect_start = None;
    let mut effect_end = 0.0;
    for epoch in 0..hparams.epochs {
        let mut order: Vec<usize> = (0..shadow_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hparams.batch_size) {
            let images: Vec<Array3<f64>> =
                chunk.iter().map(|&i| shadow_set.images[i].clone()).collect();
            let batch = to_batch(&images);
            let (parts, grads) = badencoder_loss_with_grads(
                &encoder,
                clean,
                &batch,
                &spec.trigger,
                &reference_batch,
                spec.strength.lambda_effect,
                spec.strength.lambda_utility,
            )?;
            if !parts.total.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "badencoder loss became non-finite".into(),
                });
            }
            if effect_start.is_none() {
                effect_start = Some(parts.effect);
            }
            effect_end = parts.effect;
            let mut params = encoder.params_flat();
            adam.step(&mut params, &grads);
            encoder.set_params_flat(&params);
            epoch_loss += parts.total;
            batches += 1;
        }
        if batches > 0 {
            trace.push(epoch_loss / batches as f64);
        }
    }
    let _ = hparams; // lambda weights come from the spec strength record
    Ok(AttackResult {
        encoder,
        loss_trace: trace,
        effect_start: effect_start.unwrap_or(0.0),
        effect_end,
    })
}

/// BASSL: pure data poisoning followed by standard contrastive pre-training.
pub fn bassl_poison(
    pretrain_set: &LabeledDataset,
    spec: &AttackSpec,
    downstream_target_images: &[Array3<f64>],
    architecture: ArchId,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    if spec.method != AttackMethod::Bassl {
        return Err(Error::validation("attack.method", "expected BASSL"));
    }
    let (poisoned_set, _) =
        build_bassl_poison_set(pretrain_set, spec, downstream_target_images, seed)?;
    contrastive_pretrain(&poisoned_set, architecture, hparams, seed)
}
