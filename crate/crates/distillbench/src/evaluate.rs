//! Downstream probes on a frozen encoder and the ACC / ASR / BS metrics.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_poisoned_eval_set, to_batch, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Adam, Encoder, Mlp};
use crate::types::AttackSpec;

const HIDDEN_WIDTHS: [usize; 2] = [512, 256];

/// A classification head over a frozen encoder.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub head: Mlp,
    pub encoder: Encoder,
    pub num_classes: usize,
}

impl Classifier {
    pub fn init(encoder: &Encoder, num_classes: usize, seed: u64) -> Self {
        let widths = [
            encoder.embedding_dim(),
            HIDDEN_WIDTHS[0],
            HIDDEN_WIDTHS[1],
            num_classes,
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Classifier {
            head: Mlp::init(&mut rng, &widths),
            encoder: encoder.clone(),
            num_classes,
        }
    }

    /// Predicted class per image; argmax ties resolve to the lowest index.
    pub fn predict_images(&self, images: &[Array3<f64>]) -> Vec<usize> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let emb = self.encoder.embed(&to_batch(chunk));
            out.extend(self.head.predict(&emb));
        }
        out
    }
}

/// Embeddings for a whole dataset, computed in chunks.
fn embed_all(encoder: &Encoder, images: &[Array3<f64>]) -> Array2<f64> {
    let dim = encoder.embedding_dim();
    let mut out = Array2::<f64>::zeros((images.len(), dim));
    let mut row = 0;
    for chunk in images.chunks(64) {
        let emb = encoder.embed(&to_batch(chunk));
        for r in emb.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    out
}

pub struct DownstreamHParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DownstreamHParams {
    fn default() -> Self {
        DownstreamHParams {
            epochs: 500,
            learning_rate: 0.001,
            batch_size: 256,
        }
    }
}

/// Train the classification head with cross-entropy; the encoder stays
/// frozen (embeddings are precomputed once).
pub fn train_downstream(
    encoder: &Encoder,
    train_set: &LabeledDataset,
    hparams: &DownstreamHParams,
    seed: u64,
) -> Result<Classifier> {
    if train_set.split != Split::Train {
        return Err(Error::validation("train_set", "downstream training requires the train split"));
    }
    let encoder_hash = encoder.content_hash();
    let mut clf = Classifier::init(encoder, train_set.num_classes, seed);
    let embeddings = embed_all(encoder, &train_set.images);
    let labels: Vec<usize> = train_set.labels.iter().map(|&l| l as usize).collect();
    let mut adam = Adam::new(hparams.learning_rate, clf.head.num_params());
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x50524f42));
    let n = train_set.len();
    for epoch in 0..hparams.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hparams.batch_size) {
            let mut x = Array2::<f64>::zeros((chunk.len(), embeddings.shape()[1]));
            let mut y = Vec::with_capacity(chunk.len());
            for (bi, &i) in chunk.iter().enumerate() {
                x.row_mut(bi).assign(&embeddings.row(i));
                y.push(labels[i]);
            }
            let (scores, cache) = clf.head.forward_full(&x);
            let (loss, d_scores) = cross_entropy(&scores, &y);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "downstream loss became non-finite".into(),
                });
            }
            let grads = clf.head.backward(&cache, &d_scores);
            let mut params = clf.head.params_flat();
            adam.step(&mut params, &grads);
            clf.head.set_params_flat(&params);
        }
    }
    debug_assert_eq!(encoder.content_hash(), encoder_hash);
    Ok(clf)
}

/// Fraction of test images classified correctly (Eq. 1 analogue).
pub fn compute_acc(classifier: &Classifier, test_set: &LabeledDataset) -> Result<f64> {
    if test_set.len() == 0 {
        return Err(Error::validation("test_set", "must be non-empty"));
    }
    let preds = classifier.predict_images(&test_set.images);
    let correct = preds
        .iter()
        .zip(&test_set.labels)
        .filter(|(&p, &y)| p == y as usize)
        .count();
    Ok(correct as f64 / test_set.len() as f64)
}

/// Fraction of stamped test images classified as the attack target
/// (Eq. 2 analogue). All test images count, including those natively
/// labeled with the target class.
pub fn compute_asr(
    classifier: &Classifier,
    test_set: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<f64> {
    if test_set.len() == 0 {
        return Err(Error::validation("test_set", "must be non-empty"));
    }
    let poisoned = make_poisoned_eval_set(test_set, spec)?;
    let mut hit = 0usize;
    let mut idx = 0usize;
    while idx < test_set.len() {
        let hi = (idx + 64).min(test_set.len());
        let imgs: Vec<Array3<f64>> = (idx..hi).map(|i| poisoned.image(i)).collect::<Result<_>>()?;
        let emb = classifier.encoder.embed(&to_batch(&imgs));
        for p in classifier.head.predict(&emb) {
            if p == spec.target_class {
                hit += 1;
            }
        }
        idx = hi;
    }
    Ok(hit as f64 / test_set.len() as f64)
}

/// BS = alpha·acc + (1−alpha)·log2(2−asr); 1 is best, 0 worst.
pub fn balanced_score(acc: f64, asr: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("acc", acc), ("asr", asr), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::validation(name, "must lie in [0, 1]"));
        }
    }
    Ok(alpha * acc + (1.0 - alpha) * (2.0 - asr).log2())
}

/// One evaluation outcome; fractions stored raw, rendered as percentages
/// only in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: f64,
    pub asr: f64,
    pub bs: f64,
    pub alpha: f64,
    pub lineage: Vec<(String, String)>,
    pub downstream_dataset: String,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(
        acc: f64,
        asr: f64,
        alpha: f64,
        lineage: Vec<(String, String)>,
        downstream_dataset: String,
        seed: u64,
    ) -> Result<Self> {
        let bs = balanced_score(acc, asr, alpha)?;
        Ok(MetricsRecord { acc, asr, bs, alpha, lineage, downstream_dataset, seed })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}
