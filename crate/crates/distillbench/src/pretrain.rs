//! Contrastive (SimCLR-style) pre-training and warm-up training.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::ArchId;
use crate::data::{to_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, ArchSpec, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainHParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub augmentation: AugmentationPolicy,
}

impl Default for PretrainHParams {
    fn default() -> Self {
        PretrainHParams {
            epochs: 300,
            learning_rate: 0.001,
            batch_size: 256,
            temperature: 0.5,
            augmentation: AugmentationPolicy::Standard,
        }
    }
}

impl PretrainHParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::validation("temperature", "must be > 0"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be > 0"));
        }
        Ok(())
    }
}

/// Augmentation policies. `Standard` is random crop+resize, horizontal
/// flip, color jitter, and random grayscale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationPolicy {
    Standard,
    /// No augmentation (both views identical); for debugging only.
    Identity,
}

/// Encoder plus its recorded training loss trace (one entry per epoch).
#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: Encoder,
    pub loss_trace: Vec<f64>,
}

// ---------------------------------------------------------------------------
// NT-Xent
// ---------------------------------------------------------------------------

/// Normalized-temperature cross-entropy over the 2B-view similarity matrix
/// with self-similarities masked. Returns the scalar loss.
pub fn nt_xent_loss(a: &Array2<f64>, b: &Array2<f64>, temperature: f64) -> Result<f64> {
    nt_xent(a, b, temperature).map(|(l, _, _)| l)
}

/// NT-Xent loss plus gradients w.r.t. both (unnormalized) embedding blocks.
pub fn nt_xent_with_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    nt_xent(a, b, temperature)
}

fn nt_xent(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if temperature <= 0.0 {
        return Err(Error::validation("temperature", "must be > 0"));
    }
    let bsz = a.shape()[0];
    let dim = a.shape()[1];
    if b.shape() != a.shape() {
        return Err(Error::validation("embeddings", "shape mismatch between views"));
    }
    if bsz < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: bsz });
    }
    let n = 2 * bsz;
    // stacked raw embeddings
    let mut e = Array2::<f64>::zeros((n, dim));
    for i in 0..bsz {
        e.row_mut(i).assign(&a.row(i));
        e.row_mut(bsz + i).assign(&b.row(i));
    }
    // row-normalize
    let mut norms = vec![0.0; n];
    let mut z = e.clone();
    for i in 0..n {
        let nrm = e.row(i).dot(&e.row(i)).sqrt().max(1e-12);
        norms[i] = nrm;
        z.row_mut(i).mapv_inplace(|v| v / nrm);
    }
    // similarity matrix
    let s = z.dot(&z.t()) / temperature;
    // softmax over k != i, positive at i+bsz mod n
    let mut loss = 0.0;
    let mut ds = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let pos = (i + bsz) % n;
        let mut maxv = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                maxv = maxv.max(s[[i, k]]);
            }
        }
        let mut zsum = 0.0;
        for k in 0..n {
            if k != i {
                zsum += (s[[i, k]] - maxv).exp();
            }
        }
        loss += -(s[[i, pos]] - maxv - zsum.ln());
        for k in 0..n {
            if k != i {
                let p = (s[[i, k]] - maxv).exp() / zsum;
                ds[[i, k]] = (p - if k == pos { 1.0 } else { 0.0 }) / n as f64;
            }
        }
    }
    loss /= n as f64;
    // ds -> dz: s_ij = z_i . z_j / t contributes to both rows
    let mut dz = Array2::<f64>::zeros((n, dim));
    let g = &ds / temperature;
    dz = dz + g.dot(&z); // sum_j g_ij z_j
    dz = dz + g.t().dot(&z); // sum_i g_ij z_i (for row j)
    // dz -> de through row normalization: z = e/|e|
    let mut de = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        let zi = z.row(i);
        let gi = dz.row(i);
        let dot = gi.dot(&zi);
        for d in 0..dim {
            de[[i, d]] = (gi[d] - dot * zi[d]) / norms[i];
        }
    }
    let da = de.slice(ndarray::s![..bsz, ..]).to_owned();
    let db = de.slice(ndarray::s![bsz.., ..]).to_owned();
    Ok((loss, da, db))
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

/// One random augmented view of an image (H,W,C in [0,1]).
pub fn augment(img: &Array3<f64>, policy: AugmentationPolicy, rng: &mut ChaCha12Rng) -> Array3<f64> {
    match policy {
        AugmentationPolicy::Identity => img.clone(),
        AugmentationPolicy::Standard => {
            let mut out = random_crop_resize(img, rng);
            if rng.gen::<f64>() < 0.5 {
                out = hflip(&out);
            }
            out = color_jitter(&out, rng);
            if rng.gen::<f64>() < 0.2 {
                out = grayscale(&out);
            }
            out
        }
    }
}

fn random_crop_resize(img: &Array3<f64>, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let scale: f64 = rng.gen_range(0.6..1.0);
    let ch = ((h as f64 * scale).round() as usize).max(2);
    let cw = ((w as f64 * scale).round() as usize).max(2);
    let r0 = rng.gen_range(0..=h - ch);
    let c0 = rng.gen_range(0..=w - cw);
    // bilinear resize of the crop back to (h, w)
    let mut out = Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let fi = i as f64 / (h - 1).max(1) as f64 * (ch - 1) as f64;
            let fj = j as f64 / (w - 1).max(1) as f64 * (cw - 1) as f64;
            let i0 = fi.floor() as usize;
            let j0 = fj.floor() as usize;
            let i1 = (i0 + 1).min(ch - 1);
            let j1 = (j0 + 1).min(cw - 1);
            let di = fi - i0 as f64;
            let dj = fj - j0 as f64;
            for ch_i in 0..c {
                let v00 = img[[r0 + i0, c0 + j0, ch_i]];
                let v01 = img[[r0 + i0, c0 + j1, ch_i]];
                let v10 = img[[r0 + i1, c0 + j0, ch_i]];
                let v11 = img[[r0 + i1, c0 + j1, ch_i]];
                out[[i, j, ch_i]] = v00 * (1.0 - di) * (1.0 - dj)
                    + v01 * (1.0 - di) * dj
                    + v10 * di * (1.0 - dj)
                    + v11 * di * dj;
            }
        }
    }
    out
}

fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    Array3::from_shape_fn((h, w, c), |(i, j, ch)| img[[i, w - 1 - j, ch]])
}

fn color_jitter(img: &Array3<f64>, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let s = img.shape();
    let c = s[2];
    let scales: Vec<f64> = (0..c).map(|_| rng.gen_range(0.8..1.2)).collect();
    let shifts: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut out = img.clone();
    for ((_, _, ch), v) in out.indexed_iter_mut() {
        *v = (*v * scales[ch] + shifts[ch]).clamp(0.0, 1.0);
    }
    out
}

fn grayscale(img: &Array3<f64>) -> Array3<f64> {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    Array3::from_shape_fn((h, w, c), |(i, j, _)| {
        (0..c).map(|ch| img[[i, j, ch]]).sum::<f64>() / c as f64
    })
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// SimCLR-style contrastive pre-training from a fresh seeded initialization.
pub fn contrastive_pretrain(
    dataset: &LabeledDataset,
    architecture: ArchId,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    let spec = ArchSpec::from_id(architecture);
    let encoder = Encoder::init(&spec, seed);
    contrastive_train_from(encoder, dataset, hparams, seed)
}

/// Warm-up training: identical schedule on the defender's small clean
/// subset. With `epochs = 0` this is exactly the VOID initialization.
pub fn warm_up_train(
    clean_subset: &LabeledDataset,
    architecture: ArchId,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    contrastive_pretrain(clean_subset, architecture, hparams, seed)
}

/// Continue contrastive training of an existing encoder (used by pretraining
/// and by the FT teacher).
pub fn contrastive_train_from(
    mut encoder: Encoder,
    dataset: &LabeledDataset,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<TrainedEncoder> {
    hparams.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "must be non-empty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x434f4e54)); // data-order stream
    let mut adam = Adam::new(hparams.learning_rate, encoder.num_params());
    let mut trace = Vec::with_capacity(hparams.epochs);
    let n = dataset.len();
    for epoch in 0..hparams.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hparams.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let view_a: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| augment(&dataset.images[i], hparams.augmentation, &mut rng))
                .collect();
            let view_b: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| augment(&dataset.images[i], hparams.augmentation, &mut rng))
                .collect();
            let xa = to_batch(&view_a);
            let xb = to_batch(&view_b);
            let (ea, _, cache_a) = encoder.forward_full(&xa);
            let (eb, _, cache_b) = encoder.forward_full(&xb);
            let (loss, da, db) = nt_xent_with_grad(&ea, &eb, hparams.temperature)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "contrastive loss became non-finite".into(),
                });
            }
            let ga = encoder.backward(&cache_a, &da, None);
            let gb = encoder.backward(&cache_b, &db, None);
            let mut grads = ga.params_flat();
            let gb_flat = gb.params_flat();
            for (g, h) in grads.iter_mut().zip(gb_flat.iter()) {
                *g += h;
            }
            let mut params = encoder.params_flat();
            adam.step(&mut params, &grads);
            encoder.set_params_flat(&params);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok(TrainedEncoder {
        encoder,
        loss_trace: trace,
    })
}
