//! Student initialization, the six distillation losses, and the
//! distillation loop.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::{LossKind, StudentStrategy};
use crate::data::{to_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{check_tap_compatibility, Adam, Encoder};
use crate::pretrain::{warm_up_train, PretrainHParams};

const EPS_NORM: f64 = 1e-12;

/// Teacher/student activations for one batch.
#[derive(Debug, Clone)]
pub struct DistillBatchView {
    pub teacher_taps: Vec<Array4<f64>>,
    pub teacher_embedding: Array2<f64>,
    pub student_taps: Vec<Array4<f64>>,
    pub student_embedding: Array2<f64>,
}

impl DistillBatchView {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_taps.len() != self.student_taps.len() {
            return Err(Error::validation("view.taps", "tap count mismatch"));
        }
        for (t, s) in self.teacher_taps.iter().zip(&self.student_taps) {
            if t.shape() != s.shape() {
                return Err(Error::validation("view.taps", "tap shape mismatch"));
            }
        }
        if self.teacher_embedding.shape() != self.student_embedding.shape() {
            return Err(Error::validation("view.embedding", "embedding shape mismatch"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.teacher_embedding.shape()[0]
    }
}

/// Gradients of a distillation loss w.r.t. the student side of a view.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_student_taps: Vec<Array4<f64>>,
    pub d_student_embedding: Array2<f64>,
}

impl LossGrads {
    fn zeros_like(view: &DistillBatchView) -> Self {
        LossGrads {
            d_student_taps: view
                .student_taps
                .iter()
                .map(|t| Array4::zeros(t.raw_dim()))
                .collect(),
            d_student_embedding: Array2::zeros(view.student_embedding.raw_dim()),
        }
    }
}

/// Per-pixel aggregation of channel activation magnitudes:
/// values[b,h,w] = sum_c |tap[b,c,h,w]|^p.
pub fn attention_map(tap: &Array4<f64>, p: f64) -> Array3<f64> {
    let s = tap.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Array3::<f64>::zeros((b, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, i, j]] += tap[[bi, ci, i, j]].abs().powf(p);
                }
            }
        }
    }
    out
}

/// d attention_map / d tap applied to an upstream gradient over the map.
fn attention_backward(tap: &Array4<f64>, p: f64, d_map: &Array3<f64>) -> Array4<f64> {
    let s = tap.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut d_tap = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = tap[[bi, ci, i, j]];
                    let d = p * v.abs().powf(p - 1.0) * v.signum();
                    d_tap[[bi, ci, i, j]] = d_map[[bi, i, j]] * d;
                }
            }
        }
    }
    d_tap
}

// ---------------------------------------------------------------------------
// FitNets: MSE between embeddings
// ---------------------------------------------------------------------------

pub fn loss_fitnets(view: &DistillBatchView) -> Result<(f64, LossGrads)> {
    view.validate()?;
    let diff = &view.student_embedding - &view.teacher_embedding;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let mut grads = LossGrads::zeros_like(view);
    grads.d_student_embedding = diff.mapv(|v| 2.0 * v / n);
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// CC: squared Frobenius distance between row-normalized embedding
// correlation matrices, divided by B^2
// ---------------------------------------------------------------------------

fn row_normalize(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.shape()[0]);
    for mut row in out.rows_mut() {
        let nrm = row.dot(&row).sqrt();
        if nrm >= EPS_NORM {
            row.mapv_inplace(|v| v / nrm);
            norms.push(nrm);
        } else {
            norms.push(1.0); // epsilon-guard: keep the unnormalized row
        }
    }
    (out, norms)
}

/// Backprop through z = e / |e| rows given dz.
fn row_normalize_backward(normalized: &Array2<f64>, norms: &[f64], dz: &Array2<f64>) -> Array2<f64> {
    let (b, d) = (normalized.shape()[0], normalized.shape()[1]);
    let mut de = Array2::<f64>::zeros((b, d));
    for i in 0..b {
        let zi = normalized.row(i);
        let gi = dz.row(i);
        let dot = gi.dot(&zi);
        for k in 0..d {
            de[[i, k]] = (gi[k] - dot * zi[k]) / norms[i];
        }
    }
    de
}

pub fn loss_cc(view: &DistillBatchView) -> Result<(f64, LossGrads)> {
    view.validate()?;
    let b = view.batch_size();
    if b < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: b });
    }
    let (zt, _) = row_normalize(&view.teacher_embedding);
    let (zs, norms_s) = row_normalize(&view.student_embedding);
    let gt = zt.dot(&zt.t());
    let gs = zs.dot(&zs.t());
    let diff = &gs - &gt;
    let scale = 1.0 / (b * b) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
    // dGs = 2*diff*scale; dZs = (dG + dG^T) Zs
    let dg = diff.mapv(|v| 2.0 * v * scale);
    let dzs = (&dg + &dg.t()).dot(&zs);
    let mut grads = LossGrads::zeros_like(view);
    grads.d_student_embedding = row_normalize_backward(&zs, &norms_s, &dzs);
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// ATD / AFD: normalized attention-map distances
// ---------------------------------------------------------------------------

/// Per-tap ATD distance: for each example, the L2 distance between the
/// L2-normalized flattened attention maps, averaged over the batch.
/// Returns the distance and its gradient w.r.t. the student tap.
fn atd_tap(t_tap: &Array4<f64>, s_tap: &Array4<f64>, p: f64) -> (f64, Array4<f64>) {
    let at = attention_map(t_tap, p);
    let a_s = attention_map(s_tap, p);
    let s = at.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let m = h * w;
    let bsz = b as f64;
    let mut total = 0.0;
    let mut d_map = Array3::<f64>::zeros((b, h, w));
    for bi in 0..b {
        let tv: Vec<f64> = (0..m).map(|k| at[[bi, k / w, k % w]]).collect();
        let sv: Vec<f64> = (0..m).map(|k| a_s[[bi, k / w, k % w]]).collect();
        let tn = tv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sn = sv.iter().map(|v| v * v).sum::<f64>().sqrt();
        // epsilon-guard: substitute the unnormalized vector for dead taps
        let (tu, _tnorm): (Vec<f64>, f64) = if tn >= EPS_NORM {
            (tv.iter().map(|v| v / tn).collect(), tn)
        } else {
            (tv.clone(), 1.0)
        };
        let (su, snorm): (Vec<f64>, f64) = if sn >= EPS_NORM {
            (sv.iter().map(|v| v / sn).collect(), sn)
        } else {
            (sv.clone(), 1.0)
        };
        let diff: Vec<f64> = su.iter().zip(&tu).map(|(a, b)| a - b).collect();
        let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dist / bsz;
        if dist >= EPS_NORM {
            // dJ/dsu = diff/dist; through normalization su = sv/snorm
            let gsu: Vec<f64> = diff.iter().map(|v| v / dist / bsz).collect();
            let dot: f64 = gsu.iter().zip(&su).map(|(g, u)| g * u).sum();
            for k in 0..m {
                let g = if sn >= EPS_NORM {
                    (gsu[k] - dot * su[k]) / snorm
                } else {
                    gsu[k]
                };
                d_map[[bi, k / w, k % w]] = g;
            }
        }
    }
    let d_tap = attention_backward(s_tap, p, &d_map);
    (total, d_tap)
}

pub fn loss_atd(view: &DistillBatchView, p: f64) -> Result<(f64, LossGrads)> {
    view.validate()?;
    if p < 1.0 {
        return Err(Error::validation("p", "attention order must be >= 1"));
    }
    let mut grads = LossGrads::zeros_like(view);
    let mut total = 0.0;
    for (ti, (t_tap, s_tap)) in view.teacher_taps.iter().zip(&view.student_taps).enumerate() {
        let (dist, d_tap) = atd_tap(t_tap, s_tap, p);
        total += dist;
        grads.d_student_taps[ti] = d_tap;
    }
    Ok((total, grads))
}

/// Softmax weights over per-tap teacher attention mass; taps where the
/// teacher attends more dominate. All-zero masses fall back to uniform.
pub fn afd_tap_weights(teacher_taps: &[Array4<f64>], p: f64) -> Vec<f64> {
    let masses: Vec<f64> = teacher_taps
        .iter()
        .map(|t| {
            let a = attention_map(t, p);
            a.iter().sum::<f64>() / a.len() as f64
        })
        .collect();
    let max = masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max < EPS_NORM {
        return vec![1.0 / masses.len() as f64; masses.len()];
    }
    let exps: Vec<f64> = masses.iter().map(|&m| (m - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn loss_afd(view: &DistillBatchView, p: f64) -> Result<(f64, LossGrads)> {
    view.validate()?;
    if p < 1.0 {
        return Err(Error::validation("p", "attention order must be >= 1"));
    }
    let weights = afd_tap_weights(&view.teacher_taps, p);
    let mut grads = LossGrads::zeros_like(view);
    let mut total = 0.0;
    for (ti, (t_tap, s_tap)) in view.teacher_taps.iter().zip(&view.student_taps).enumerate() {
        let (dist, d_tap) = atd_tap(t_tap, s_tap, p);
        total += weights[ti] * dist;
        grads.d_student_taps[ti] = d_tap.mapv(|v| v * weights[ti]);
    }
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// SP: row-normalized Gram matrices of flattened taps
// ---------------------------------------------------------------------------

fn flatten_tap(tap: &Array4<f64>) -> Array2<f64> {
    let s = tap.shape();
    let (b, rest) = (s[0], s[1] * s[2] * s[3]);
    tap.to_owned()
        .into_shape((b, rest))
        .expect("contiguous tap")
}

pub fn loss_sp(view: &DistillBatchView) -> Result<(f64, LossGrads)> {
    view.validate()?;
    let b = view.batch_size();
    if b < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: b });
    }
    let scale = 1.0 / (b * b) as f64;
    let mut grads = LossGrads::zeros_like(view);
    let mut total = 0.0;
    for (ti, (t_tap, s_tap)) in view.teacher_taps.iter().zip(&view.student_taps).enumerate() {
        // per-example rows are L2-normalized before the Gram so that the
        // pairwise-similarity structure is scale-free per example
        let (ft, _) = row_normalize(&flatten_tap(t_tap));
        let (fs, norms) = row_normalize(&flatten_tap(s_tap));
        let gt = ft.dot(&ft.t());
        let gs = fs.dot(&fs.t());
        let diff = &gs - &gt;
        total += diff.iter().map(|v| v * v).sum::<f64>() * scale;
        let d_gs = diff.mapv(|v| 2.0 * v * scale);
        // G = F F^T  ->  dF = (dG + dG^T) F, then back through row norms
        let d_fs_hat = (&d_gs + &d_gs.t()).dot(&fs);
        let d_fs = row_normalize_backward(&fs, &norms, &d_fs_hat);
        grads.d_student_taps[ti] = d_fs
            .into_shape(s_tap.raw_dim())
            .expect("tap shape");
    }
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// KD: temperature-softened KL on embeddings and pooled taps
// ---------------------------------------------------------------------------

fn softmax_rows(m: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = m.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - maxv).exp());
        let z: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// KL(teacher || student) with temperature-softened rows, batch-averaged,
/// scaled by temperature^2. Returns value and gradient w.r.t. student logits.
fn kd_term(t_logits: &Array2<f64>, s_logits: &Array2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let pt = softmax_rows(t_logits, temperature);
    let ps = softmax_rows(s_logits, temperature);
    let b = t_logits.shape()[0] as f64;
    let mut kl = 0.0;
    for (rt, rs) in pt.rows().into_iter().zip(ps.rows()) {
        for (&a, &q) in rt.iter().zip(rs.iter()) {
            if a > 0.0 {
                kl += a * (a.ln() - q.max(1e-300).ln());
            }
        }
    }
    kl = kl / b * temperature * temperature;
    // d/ds of T^2/B * KL = T^2/B * (ps - pt)/T = T*(ps - pt)/B
    let d = (&ps - &pt).mapv(|v| v * temperature / b);
    (kl, d)
}

/// Mean over spatial positions: (B,C,H,W) -> (B,C).
fn spatial_pool(tap: &Array4<f64>) -> Array2<f64> {
    let s = tap.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += tap[[bi, ci, i, j]];
                }
            }
            out[[bi, ci]] = acc / (h * w) as f64;
        }
    }
    out
}

/// KD over embeddings (as the logit substitute) plus, when `include_taps`,
/// the same term on spatially-pooled tap vectors summed over taps.
pub fn loss_kd(view: &DistillBatchView, temperature: f64, include_taps: bool) -> Result<(f64, LossGrads)> {
    view.validate()?;
    if temperature <= 0.0 {
        return Err(Error::validation("temperature", "must be > 0"));
    }
    let (mut total, d_emb) = kd_term(&view.teacher_embedding, &view.student_embedding, temperature);
    let mut grads = LossGrads::zeros_like(view);
    grads.d_student_embedding = d_emb;
    if include_taps {
        for (ti, (t_tap, s_tap)) in view.teacher_taps.iter().zip(&view.student_taps).enumerate() {
            let tp = spatial_pool(t_tap);
            let sp = spatial_pool(s_tap);
            let (kl, d_pooled) = kd_term(&tp, &sp, temperature);
            total += kl;
            // spread pooled gradient evenly over spatial positions
            let s = s_tap.shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let denom = (h * w) as f64;
            let mut d_tap = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let g = d_pooled[[bi, ci]] / denom;
                    for i in 0..h {
                        for j in 0..w {
                            d_tap[[bi, ci, i, j]] = g;
                        }
                    }
                }
            }
            grads.d_student_taps[ti] = d_tap;
        }
    }
    Ok((total, grads))
}

/// Knobs shared by the loss dispatcher.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub attention_order: f64,
    pub kd_temperature: f64,
    pub kd_include_taps: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            attention_order: 2.0,
            kd_temperature: 4.0,
            kd_include_taps: true,
        }
    }
}

pub fn compute_loss(
    kind: LossKind,
    view: &DistillBatchView,
    params: &LossParams,
) -> Result<(f64, LossGrads)> {
    match kind {
        LossKind::Fitnets => loss_fitnets(view),
        LossKind::Cc => loss_cc(view),
        LossKind::Afd => loss_afd(view, params.attention_order),
        LossKind::Atd => loss_atd(view, params.attention_order),
        LossKind::Sp => loss_sp(view),
        LossKind::Kd => loss_kd(view, params.kd_temperature, params.kd_include_taps),
    }
}

// ---------------------------------------------------------------------------
// Student initialization and the distillation loop
// ---------------------------------------------------------------------------

/// RAW: copy of the poisoned encoder. VOID: fresh seeded initialization.
/// WARMUP: contrastive warm-up on the clean subset.
pub fn init_student(
    strategy: StudentStrategy,
    poisoned: &Encoder,
    clean_subset: &LabeledDataset,
    hparams: &PretrainHParams,
    seed: u64,
) -> Result<Encoder> {
    match strategy {
        StudentStrategy::Raw => Ok(poisoned.clone()),
        StudentStrategy::Void => Ok(Encoder::init(&poisoned.spec, seed)),
        StudentStrategy::Warmup => {
            let arch = match poisoned.spec.id.as_str() {
                "tiny-cnn" => crate::config::ArchId::TinyCnn,
                "rn18" => crate::config::ArchId::Rn18,
                "rn34" => crate::config::ArchId::Rn34,
                "rn50" => crate::config::ArchId::Rn50,
                other => {
                    return Err(Error::validation(
                        "architecture",
                        format!("cannot warm-up unknown architecture `{other}`"),
                    ))
                }
            };
            Ok(warm_up_train(clean_subset, arch, hparams, seed)?.encoder)
        }
    }
}

pub struct DistillResult {
    pub student: Encoder,
    pub loss_trace: Vec<f64>,
}

/// Train the student against the frozen teacher on the clean subset.
pub fn distill(
    teacher: &Encoder,
    student: &Encoder,
    clean_subset: &LabeledDataset,
    loss_kind: LossKind,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    loss_params: &LossParams,
    seed: u64,
) -> Result<DistillResult> {
    check_tap_compatibility(teacher, student)?;
    let teacher_hash = teacher.content_hash();
    let mut student = student.clone();
    let mut adam = Adam::new(learning_rate, student.num_params());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let n = clean_subset.len();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue; // batch-relational losses need B >= 2
            }
            let images: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| clean_subset.images[i].clone())
                .collect();
            let x = to_batch(&images);
            let (t_emb, t_taps) = teacher.forward(&x);
            let (s_emb, s_taps, cache) = student.forward_full(&x);
            let view = DistillBatchView {
                teacher_taps: t_taps,
                teacher_embedding: t_emb,
                student_taps: s_taps,
                student_embedding: s_emb,
            };
            let (loss, lgrads) = compute_loss(loss_kind, &view, loss_params)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "distillation loss became non-finite".into(),
                });
            }
            let egrads = student.backward(&cache, &lgrads.d_student_embedding, Some(&lgrads.d_student_taps));
            let mut params = student.params_flat();
            adam.step(&mut params, &egrads.params_flat());
            student.set_params_flat(&params);
            epoch_loss += loss;
            batches += 1;
        }
        if batches > 0 {
            trace.push(epoch_loss / batches as f64);
        }
    }
    debug_assert_eq!(teacher.content_hash(), teacher_hash);
    if teacher.content_hash() != teacher_hash {
        return Err(Error::NumericalDegeneracy(
            "teacher parameters changed during distillation".into(),
        ));
    }
    Ok(DistillResult {
        student,
        loss_trace: trace,
    })
}

// helper for tests and the invariance suite
#[doc(hidden)]
pub fn random_view(
    taps: &[(usize, usize, usize)],
    batch: usize,
    dim: usize,
    seed: u64,
) -> DistillBatchView {
    use rand::Rng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mk = |rng: &mut ChaCha12Rng| -> Vec<Array4<f64>> {
        taps.iter()
            .map(|&(c, h, w)| Array4::from_shape_fn((batch, c, h, w), |_| rng.gen::<f64>() - 0.5))
            .collect()
    };
    let teacher_taps = mk(&mut rng);
    let student_taps = mk(&mut rng);
    let teacher_embedding = Array2::from_shape_fn((batch, dim), |_| rng.gen::<f64>() - 0.5);
    let student_embedding = Array2::from_shape_fn((batch, dim), |_| rng.gen::<f64>() - 0.5);
    DistillBatchView {
        teacher_taps,
        teacher_embedding,
        student_taps,
        student_embedding,
    }
}

#[doc(hidden)]
pub fn permute_view(view: &DistillBatchView, perm: &[usize]) -> DistillBatchView {
    let permute2 = |m: &Array2<f64>| -> Array2<f64> {
        let mut out = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.row_mut(dst).assign(&m.row(src));
        }
        out
    };
    let permute4 = |m: &Array4<f64>| -> Array4<f64> {
        let mut out = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.index_axis_mut(Axis(0), dst).assign(&m.index_axis(Axis(0), src));
        }
        out
    };
    DistillBatchView {
        teacher_taps: view.teacher_taps.iter().map(&permute4).collect(),
        teacher_embedding: permute2(&view.teacher_embedding),
        student_taps: view.student_taps.iter().map(&permute4).collect(),
        student_embedding: permute2(&view.student_embedding),
    }
}

#[doc(hidden)]
pub fn identical_view(view: &DistillBatchView) -> DistillBatchView {
    DistillBatchView {
        teacher_taps: view.student_taps.clone(),
        teacher_embedding: view.student_embedding.clone(),
        student_taps: view.student_taps.clone(),
        student_embedding: view.student_embedding.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchId;
    use crate::data::{generate_synth_tiny, Split};
    use crate::nn::ArchSpec;
    use ndarray::Array1;

    const TAPS: &[(usize, usize, usize)] = &[(2, 2, 2), (3, 2, 2)];

    #[test]
    fn attention_map_examples() {
        // all-zero tap -> all-zero map
        let zero = Array4::<f64>::zeros((1, 2, 2, 2));
        assert!(attention_map(&zero, 2.0).iter().all(|&v| v == 0.0));
        // single channel, p=2 -> elementwise square
        let single = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64 - 1.5);
        let m = attention_map(&single, 2.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[[0, i, j]] - single[[0, 0, i, j]].powi(2)).abs() < 1e-15);
            }
        }
        // two channels [[1,2],[3,4]] and [[0,1],[1,0]] -> [[1,5],[10,16]]
        let mut two = Array4::<f64>::zeros((1, 2, 2, 2));
        two[[0, 0, 0, 0]] = 1.0;
        two[[0, 0, 0, 1]] = 2.0;
        two[[0, 0, 1, 0]] = 3.0;
        two[[0, 0, 1, 1]] = 4.0;
        two[[0, 1, 0, 1]] = 1.0;
        two[[0, 1, 1, 0]] = 1.0;
        let m = attention_map(&two, 2.0);
        assert_eq!(
            [m[[0, 0, 0]], m[[0, 0, 1]], m[[0, 1, 0]], m[[0, 1, 1]]],
            [1.0, 5.0, 10.0, 16.0]
        );
    }

    fn loss_value(kind: LossKind, view: &DistillBatchView) -> f64 {
        compute_loss(kind, view, &LossParams::default()).unwrap().0
    }

    #[test]
    fn all_losses_zero_on_identical_views() {
        let view = identical_view(&random_view(TAPS, 3, 4, 1));
        for kind in LossKind::ALL {
            let v = loss_value(kind, &view);
            assert!(v.abs() < 1e-10, "{kind:?} gave {v}");
        }
    }

    #[test]
    fn fitnets_shift_arithmetic() {
        let mut view = identical_view(&random_view(TAPS, 2, 4, 2));
        let e = Array1::from(vec![0.5, -1.0, 2.0, 0.25]);
        for mut row in view.student_embedding.rows_mut() {
            for (v, s) in row.iter_mut().zip(e.iter()) {
                *v += s;
            }
        }
        let (loss, _) = loss_fitnets(&view).unwrap();
        let expect = e.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn cc_rotation_invariance() {
        let base = random_view(TAPS, 3, 2, 3);
        let mut view = identical_view(&base);
        // rotate embeddings by angle theta in 2-D
        let theta: f64 = 0.73;
        let (c, s) = (theta.cos(), theta.sin());
        let rotated = Array2::from_shape_fn(view.student_embedding.raw_dim(), |(i, j)| {
            let x = view.student_embedding[[i, 0]];
            let y = view.student_embedding[[i, 1]];
            if j == 0 {
                c * x - s * y
            } else {
                s * x + c * y
            }
        });
        view.student_embedding = rotated;
        let (loss, _) = loss_cc(&view).unwrap();
        assert!(loss.abs() < 1e-12, "cc loss {loss}");
    }

    #[test]
    fn atd_and_sp_scale_invariance() {
        let base = random_view(TAPS, 2, 4, 4);
        let mut view = identical_view(&base);
        // positive per-example scaling of student taps
        for tap in view.student_taps.iter_mut() {
            let b = tap.shape()[0];
            for bi in 0..b {
                let factor = 1.5 + bi as f64;
                tap.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * factor);
            }
        }
        let (atd, _) = loss_atd(&view, 2.0).unwrap();
        assert!(atd.abs() < 1e-10, "atd {atd}");
        let (sp, _) = loss_sp(&view).unwrap();
        assert!(sp.abs() < 1e-10, "sp {sp}");
    }

    #[test]
    fn atd_matches_brute_force_oracle() {
        let view = random_view(TAPS, 2, 4, 5);
        let (loss, _) = loss_atd(&view, 2.0).unwrap();
        // independent elementwise computation
        let mut expect = 0.0;
        for (tt, st) in view.teacher_taps.iter().zip(&view.student_taps) {
            let s = tt.shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            for bi in 0..b {
                let mut tv = Vec::new();
                let mut sv = Vec::new();
                for i in 0..h {
                    for j in 0..w {
                        tv.push((0..c).map(|ci| tt[[bi, ci, i, j]].powi(2)).sum::<f64>());
                        sv.push((0..c).map(|ci| st[[bi, ci, i, j]].powi(2)).sum::<f64>());
                    }
                }
                let tn = tv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let sn = sv.iter().map(|v| v * v).sum::<f64>().sqrt();
                expect += tv
                    .iter()
                    .zip(&sv)
                    .map(|(t, s)| (s / sn - t / tn).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / b as f64;
            }
        }
        assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
    }

    #[test]
    fn afd_weights_match_hand_computed_softmax() {
        let view = random_view(TAPS, 2, 4, 6);
        let weights = afd_tap_weights(&view.teacher_taps, 2.0);
        let masses: Vec<f64> = view
            .teacher_taps
            .iter()
            .map(|t| {
                let a = attention_map(t, 2.0);
                a.iter().sum::<f64>() / a.len() as f64
            })
            .collect();
        let z: f64 = masses.iter().map(|m| m.exp()).sum();
        for (w, m) in weights.iter().zip(&masses) {
            assert!((w - m.exp() / z).abs() < 1e-12);
        }
        // weighted sum matches the per-tap ATD distances
        let (afd, _) = loss_afd(&view, 2.0).unwrap();
        let mut expect = 0.0;
        for (ti, (tt, st)) in view.teacher_taps.iter().zip(&view.student_taps).enumerate() {
            expect += weights[ti] * atd_tap(tt, st, 2.0).0;
        }
        assert!((afd - expect).abs() < 1e-12);
    }

    #[test]
    fn afd_zero_attention_uniform_fallback() {
        let taps = vec![Array4::<f64>::zeros((2, 2, 2, 2)), Array4::zeros((2, 3, 2, 2))];
        let weights = afd_tap_weights(&taps, 2.0);
        assert_eq!(weights, vec![0.5, 0.5]);
    }

    #[test]
    fn sp_matches_brute_force_gram_oracle() {
        let view = random_view(&[(2, 2, 2)], 2, 4, 7);
        let (loss, _) = loss_sp(&view).unwrap();
        let gram = |tap: &Array4<f64>| -> Vec<Vec<f64>> {
            let s = tap.shape();
            let (b, n) = (s[0], s[1] * s[2] * s[3]);
            let flat: Vec<Vec<f64>> = (0..b)
                .map(|bi| {
                    let row: Vec<f64> = tap.index_axis(Axis(0), bi).iter().copied().collect();
                    let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.into_iter().map(|v| v / nrm).collect()
                })
                .collect();
            let mut g = vec![vec![0.0; b]; b];
            for i in 0..b {
                for j in 0..b {
                    g[i][j] = (0..n).map(|k| flat[i][k] * flat[j][k]).sum();
                }
            }
            g
        };
        let gt = gram(&view.teacher_taps[0]);
        let gs = gram(&view.student_taps[0]);
        let mut expect = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expect += (gs[i][j] - gt[i][j]).powi(2);
            }
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn kd_matches_direct_softmax_oracle_and_limits() {
        let view = random_view(&[(2, 2, 2)], 2, 3, 8);
        let t = 2.0;
        let (loss, _) = loss_kd(&view, t, false).unwrap();
        // direct softmax/KL oracle on embeddings
        let softmax = |row: Vec<f64>| -> Vec<f64> {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - m) / 1.0).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        };
        let mut expect = 0.0;
        for i in 0..2 {
            let rt: Vec<f64> = view.teacher_embedding.row(i).iter().map(|v| v / t).collect();
            let rs: Vec<f64> = view.student_embedding.row(i).iter().map(|v| v / t).collect();
            let pt = softmax(rt);
            let ps = softmax(rs);
            for k in 0..3 {
                expect += pt[k] * (pt[k].ln() - ps[k].ln());
            }
        }
        expect = expect / 2.0 * t * t;
        assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
        // temperature -> infinity: T^2 * KL converges to the quadratic
        // limit (1/2D) * mean over rows of sum_k (c_k - mean(c))^2 with
        // c = teacher_logits - student_logits
        let (hot, _) = loss_kd(&view, 1e6, false).unwrap();
        let mut limit = 0.0;
        for i in 0..2 {
            let c: Vec<f64> = view
                .teacher_embedding
                .row(i)
                .iter()
                .zip(view.student_embedding.row(i).iter())
                .map(|(a, b)| a - b)
                .collect();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            limit += c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (2.0 * c.len() as f64);
        }
        limit /= 2.0;
        // tolerance reflects cancellation in the tiny softened KL before
        // the T^2 rescale
        assert!((hot - limit).abs() < 1e-4, "kd at T=1e6: {hot} vs limit {limit}");
    }

    #[test]
    fn all_loss_gradients_match_finite_differences() {
        let params = LossParams::default();
        for kind in LossKind::ALL {
            for seed in 0..3 {
                let view = random_view(TAPS, 2, 3, 100 + seed);
                let (_, grads) = compute_loss(kind, &view, &params).unwrap();
                let h = 1e-6;
                // embedding coordinates
                for i in 0..2 {
                    for d in 0..3 {
                        let mut vp = view.clone();
                        vp.student_embedding[[i, d]] += h;
                        let fp = compute_loss(kind, &vp, &params).unwrap().0;
                        vp.student_embedding[[i, d]] -= 2.0 * h;
                        let fm = compute_loss(kind, &vp, &params).unwrap().0;
                        let num = (fp - fm) / (2.0 * h);
                        let ana = grads.d_student_embedding[[i, d]];
                        assert!(
                            (num - ana).abs() <= 1e-4 * (1.0 + ana.abs()),
                            "{kind:?} emb[{i},{d}]: {num} vs {ana}"
                        );
                    }
                }
                // a scattering of tap coordinates
                for ti in 0..TAPS.len() {
                    let len = view.student_taps[ti].len();
                    for flat_idx in (0..len).step_by(len / 5 + 1) {
                        let mut vp = view.clone();
                        let coords = unflatten4(vp.student_taps[ti].shape(), flat_idx);
                        vp.student_taps[ti][coords] += h;
                        let fp = compute_loss(kind, &vp, &params).unwrap().0;
                        vp.student_taps[ti][coords] -= 2.0 * h;
                        let fm = compute_loss(kind, &vp, &params).unwrap().0;
                        let num = (fp - fm) / (2.0 * h);
                        let ana = grads.d_student_taps[ti][coords];
                        assert!(
                            (num - ana).abs() <= 1e-4 * (1.0 + ana.abs()),
                            "{kind:?} tap{ti}[{flat_idx}]: {num} vs {ana}"
                        );
                    }
                }
            }
        }
    }

    fn unflatten4(shape: &[usize], idx: usize) -> (usize, usize, usize, usize) {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        (
            idx / (c * h * w),
            (idx / (h * w)) % c,
            (idx / w) % h,
            idx % w,
        )
    }

    #[test]
    fn batch_permutation_invariance_all_losses() {
        let params = LossParams::default();
        let view = random_view(TAPS, 4, 3, 9);
        let perm = [2usize, 0, 3, 1];
        let permuted = permute_view(&view, &perm);
        for kind in LossKind::ALL {
            let a = compute_loss(kind, &view, &params).unwrap().0;
            let b = compute_loss(kind, &permuted, &params).unwrap().0;
            assert!((a - b).abs() < 1e-10, "{kind:?}: {a} vs {b}");
        }
    }

    #[test]
    fn batch_relational_losses_reject_singletons() {
        let view = random_view(TAPS, 1, 3, 10);
        assert!(matches!(loss_cc(&view), Err(Error::BatchTooSmall { .. })));
        assert!(matches!(loss_sp(&view), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn init_student_contracts() {
        let ds = generate_synth_tiny(12, Split::Train, 1);
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let poisoned = Encoder::init(&spec, 99);
        let hp = PretrainHParams {
            epochs: 0,
            batch_size: 6,
            ..PretrainHParams::default()
        };
        // RAW: bit-equal copy
        let raw = init_student(StudentStrategy::Raw, &poisoned, &ds, &hp, 5).unwrap();
        assert_eq!(raw.params_flat(), poisoned.params_flat());
        // VOID deterministic per seed
        let v1 = init_student(StudentStrategy::Void, &poisoned, &ds, &hp, 5).unwrap();
        let v2 = init_student(StudentStrategy::Void, &poisoned, &ds, &hp, 5).unwrap();
        assert_eq!(v1.params_flat(), v2.params_flat());
        // WARMUP with zero epochs equals VOID
        let w0 = init_student(StudentStrategy::Warmup, &poisoned, &ds, &hp, 5).unwrap();
        assert_eq!(w0.params_flat(), v1.params_flat());
    }

    #[test]
    fn distill_zero_epochs_and_fixed_point() {
        let ds = generate_synth_tiny(12, Split::Train, 2);
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let teacher = Encoder::init(&spec, 1);
        let student = Encoder::init(&spec, 2);
        let params = LossParams::default();
        let r = distill(&teacher, &student, &ds, LossKind::Atd, 0, 0.001, 6, &params, 3).unwrap();
        assert_eq!(r.student.params_flat(), student.params_flat());
        // student == teacher: loss trace stays at 0
        let r = distill(&teacher, &teacher, &ds, LossKind::Atd, 2, 0.001, 6, &params, 3).unwrap();
        assert!(r.loss_trace.iter().all(|&v| v.abs() <= 1e-6), "{:?}", r.loss_trace);
    }

    #[test]
    fn distill_freezes_teacher_and_reduces_loss() {
        let ds = generate_synth_tiny(24, Split::Train, 3);
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let teacher = Encoder::init(&spec, 4);
        let student = Encoder::init(&spec, 5);
        let hash = teacher.content_hash();
        let params = LossParams::default();
        let r = distill(&teacher, &student, &ds, LossKind::Fitnets, 6, 0.002, 12, &params, 6).unwrap();
        assert_eq!(teacher.content_hash(), hash);
        assert!(r.loss_trace.last().unwrap() < r.loss_trace.first().unwrap());
    }
}
