//! Dataset ingestion, clean-subset sampling, trigger stamping, and poisoned
//! set construction.

mod store;
mod synth;

pub use store::{load_dataset_from, save_dataset, DatasetManifest};
pub use synth::generate_synth_tiny;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::DatasetId;
use crate::error::{Error, Result};
use crate::types::{AttackMethod, AttackSpec, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A labeled image set; images are H x W x C with values in [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
    pub name: DatasetId,
    pub split: Split,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::validation(
                "dataset",
                format!("{} images vs {} labels", self.images.len(), self.labels.len()),
            ));
        }
        if let Some(first) = self.images.first() {
            let shape = first.shape().to_vec();
            if self.images.iter().any(|i| i.shape() != shape.as_slice()) {
                return Err(Error::validation("dataset", "images differ in shape"));
            }
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::validation("dataset", "label out of range"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }
}

/// Load a dataset from the on-disk layout rooted at `data_root`.
///
/// `SYNTH-TINY` is generated deterministically instead of read from disk;
/// `sizes` are (train, test) counts for the generator.
pub fn load_dataset(
    data_root: &std::path::Path,
    name: DatasetId,
    split: Split,
    synth_sizes: (usize, usize),
    synth_seed: u64,
) -> Result<LabeledDataset> {
    if name == DatasetId::SynthTiny {
        let n = match split {
            Split::Train => synth_sizes.0,
            Split::Test => synth_sizes.1,
        };
        return Ok(generate_synth_tiny(n, split, synth_seed));
    }
    let dir = data_root.join(name.to_string()).join(split.to_string());
    load_dataset_from(&dir, name, split)
}

/// Stamp the trigger onto an image, returning a new image. Pixels outside
/// the trigger footprint are untouched.
pub fn stamp_trigger(image: &Array3<f64>, trigger: &Trigger) -> Result<Array3<f64>> {
    let s = image.shape();
    let (img_h, img_w, img_c) = (s[0], s[1], s[2]);
    let (th, tw) = trigger.size();
    let tc = trigger.pattern.shape()[2];
    if tc != img_c {
        return Err(Error::Geometry(format!(
            "trigger has {tc} channels, image has {img_c}"
        )));
    }
    let (r0, c0) = trigger.anchor_for(img_h, img_w)?;
    let mut out = image.clone();
    for i in 0..th {
        for j in 0..tw {
            for c in 0..img_c {
                out[[r0 + i, c0 + j, c]] = trigger.pattern[[i, j, c]];
            }
        }
    }
    Ok(out)
}

/// Uniform sample of floor(ratio * N) examples without replacement,
/// deterministic per seed.
pub fn sample_clean_subset(
    dataset: &LabeledDataset,
    ratio: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::validation(
            "ratio",
            format!("must lie in (0,1], got {ratio}"),
        ));
    }
    let n = dataset.len();
    let take = ((ratio * n as f64).floor() as usize).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(take);
    Ok(LabeledDataset {
        images: indices.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        name: dataset.name,
        split: dataset.split,
        num_classes: dataset.num_classes,
    })
}

/// Construct the BASSL-poisoned pre-training set: migrate a fraction of the
/// downstream target-class images into the pre-training set and stamp the
/// configured fraction of the migrated copies.
///
/// Returns the poisoned set and the indices (within the returned set) of the
/// stamped images.
pub fn build_bassl_poison_set(
    pretrain_set: &LabeledDataset,
    spec: &AttackSpec,
    downstream_target_images: &[Array3<f64>],
    seed: u64,
) -> Result<(LabeledDataset, Vec<usize>)> {
    if spec.method != AttackMethod::Bassl {
        return Err(Error::validation("attack.method", "expected BASSL"));
    }
    let ratio = spec.strength.poisoning_ratio;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::validation(
            "attack.strength.poisoning_ratio",
            "must lie in (0,1]",
        ));
    }
    if downstream_target_images.is_empty() {
        return Err(Error::AttackConstruction(
            "no downstream target-class images to migrate".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let migrate_n = ((spec.strength.migration_fraction * downstream_target_images.len() as f64)
        .ceil() as usize)
        .clamp(1, downstream_target_images.len());
    let mut pool: Vec<usize> = (0..downstream_target_images.len()).collect();
    pool.shuffle(&mut rng);
    pool.truncate(migrate_n);

    let stamp_n = ((ratio * migrate_n as f64).round() as usize).min(migrate_n);
    let mut stamp_order: Vec<usize> = (0..migrate_n).collect();
    stamp_order.shuffle(&mut rng);
    let stamp_set: std::collections::HashSet<usize> =
        stamp_order.into_iter().take(stamp_n).collect();

    let mut images = pretrain_set.images.clone();
    let mut labels = pretrain_set.labels.clone();
    let base_len = images.len();
    let mut stamped_indices = Vec::new();
    for (k, &src) in pool.iter().enumerate() {
        let img = &downstream_target_images[src];
        let img = if stamp_set.contains(&k) {
            stamped_indices.push(base_len + k);
            stamp_trigger(img, &spec.trigger)?
        } else {
            img.clone()
        };
        images.push(img);
        // Labels are ignored by SSL pre-training; tag migrated images 0.
        labels.push(0);
    }
    let set = LabeledDataset {
        images,
        labels,
        name: pretrain_set.name,
        split: pretrain_set.split,
        num_classes: pretrain_set.num_classes,
    };
    Ok((set, stamped_indices))
}

/// Lazily-materialized view of a test set with the trigger stamped on every
/// image.
#[derive(Debug, Clone)]
pub struct PoisonedEvalSet {
    pub base: LabeledDataset,
    pub trigger: Trigger,
    pub target_class: usize,
}

impl PoisonedEvalSet {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Array3<f64>> {
        stamp_trigger(&self.base.images[i], &self.trigger)
    }

    pub fn materialize(&self) -> Result<Vec<Array3<f64>>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }
}

pub fn make_poisoned_eval_set(test_set: &LabeledDataset, spec: &AttackSpec) -> Result<PoisonedEvalSet> {
    if test_set.split != Split::Test {
        return Err(Error::validation("test_set.split", "must be TEST"));
    }
    Ok(PoisonedEvalSet {
        base: test_set.clone(),
        trigger: spec.trigger.clone(),
        target_class: spec.target_class,
    })
}

/// Convert H,W,C images to the (B, C, H, W) batch layout the nn stack uses.
pub fn to_batch(images: &[Array3<f64>]) -> Array4<f64> {
    assert!(!images.is_empty());
    let s = images[0].shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (bi, img) in images.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[[bi, ch, i, j]] = img[[i, j, ch]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AttackStrength;
    use ndarray::Array3;

    fn toy_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            ((i * 31 + j * 7 + c * 3) % 97) as f64 / 96.0
        })
    }

    fn toy_dataset(n: usize, split: Split) -> LabeledDataset {
        LabeledDataset {
            images: (0..n).map(|_| toy_image(16, 16)).collect(),
            labels: (0..n).map(|i| i % 3).collect(),
            name: DatasetId::SynthTiny,
            split,
            num_classes: 3,
        }
    }

    #[test]
    fn stamp_changes_exactly_the_footprint() {
        let img = toy_image(32, 32);
        let trigger = Trigger::white_square(3, 3).unwrap();
        let stamped = stamp_trigger(&img, &trigger).unwrap();
        let mut diff_positions = 0;
        for i in 0..32 {
            for j in 0..32 {
                if (0..3).any(|c| stamped[[i, j, c]] != img[[i, j, c]]) {
                    diff_positions += 1;
                    assert!(i >= 29 && j >= 29, "diff outside footprint at ({i},{j})");
                }
            }
        }
        assert_eq!(diff_positions, 9);
    }

    #[test]
    fn stamp_is_idempotent() {
        let img = toy_image(16, 16);
        let trigger = Trigger::white_square(3, 3).unwrap();
        let once = stamp_trigger(&img, &trigger).unwrap();
        let twice = stamp_trigger(&once, &trigger).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn full_size_trigger_replaces_image() {
        let img = toy_image(32, 32);
        let trigger = Trigger::white_square(32, 3).unwrap();
        let stamped = stamp_trigger(&img, &trigger).unwrap();
        assert_eq!(stamped, trigger.pattern);
    }

    #[test]
    fn oversized_trigger_rejected() {
        let img = toy_image(16, 16);
        let trigger = Trigger::white_square(17, 3).unwrap();
        assert!(matches!(
            stamp_trigger(&img, &trigger),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn subset_size_and_determinism() {
        let ds = toy_dataset(200, Split::Train);
        let a = sample_clean_subset(&ds, 0.05, 7).unwrap();
        assert_eq!(a.len(), 10);
        let b = sample_clean_subset(&ds, 0.05, 7).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images, b.images);
        let c = sample_clean_subset(&ds, 0.05, 8).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn subset_ratio_one_is_permutation() {
        let ds = toy_dataset(20, Split::Train);
        let full = sample_clean_subset(&ds, 1.0, 3).unwrap();
        assert_eq!(full.len(), 20);
        let mut sorted = full.labels.clone();
        sorted.sort_unstable();
        let mut expect = ds.labels.clone();
        expect.sort_unstable();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn subset_rejects_bad_ratio() {
        let ds = toy_dataset(10, Split::Train);
        assert!(sample_clean_subset(&ds, 0.0, 1).is_err());
        assert!(sample_clean_subset(&ds, 1.5, 1).is_err());
    }

    fn bassl_spec(ratio: f64, migration: f64) -> AttackSpec {
        AttackSpec {
            trigger: Trigger::white_square(3, 3).unwrap(),
            target_class: 1,
            method: AttackMethod::Bassl,
            strength: AttackStrength {
                poisoning_ratio: ratio,
                migration_fraction: migration,
                ..AttackStrength::default()
            },
        }
    }

    #[test]
    fn bassl_ratio_one_stamps_all_migrated() {
        let pretrain = toy_dataset(50, Split::Train);
        let targets: Vec<Array3<f64>> = (0..100).map(|_| toy_image(16, 16)).collect();
        let (set, stamped) =
            build_bassl_poison_set(&pretrain, &bassl_spec(1.0, 1.0), &targets, 1).unwrap();
        assert_eq!(set.len(), 150);
        assert_eq!(stamped.len(), 100);
    }

    #[test]
    fn bassl_tiny_case_matches_seeded_oracle() {
        let pretrain = toy_dataset(10, Split::Train);
        let targets: Vec<Array3<f64>> = (0..10).map(|_| toy_image(16, 16)).collect();
        let spec = bassl_spec(0.5, 1.0);
        let (set, stamped) = build_bassl_poison_set(&pretrain, &spec, &targets, 42).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(stamped.len(), 5);
        // Oracle: stamped indices are exactly those whose image carries the
        // white 3x3 patch at the bottom-right corner.
        let mut observed = Vec::new();
        for (i, img) in set.images.iter().enumerate().skip(10) {
            let is_stamped = (13..16).all(|r| (13..16).all(|c| (0..3).all(|ch| img[[r, c, ch]] == 1.0)));
            if is_stamped {
                observed.push(i);
            }
        }
        assert_eq!(observed, stamped);
        // Deterministic per seed.
        let (_, stamped2) = build_bassl_poison_set(&pretrain, &spec, &targets, 42).unwrap();
        assert_eq!(stamped, stamped2);
    }

    #[test]
    fn bassl_rejects_zero_ratio_and_empty_targets() {
        let pretrain = toy_dataset(10, Split::Train);
        let targets: Vec<Array3<f64>> = (0..4).map(|_| toy_image(16, 16)).collect();
        assert!(build_bassl_poison_set(&pretrain, &bassl_spec(0.0, 1.0), &targets, 1).is_err());
        assert!(build_bassl_poison_set(&pretrain, &bassl_spec(0.5, 1.0), &[], 1).is_err());
    }

    #[test]
    fn poisoned_eval_view_matches_elementwise_stamping() {
        let test = toy_dataset(5, Split::Test);
        let spec = bassl_spec(0.5, 1.0);
        let view = make_poisoned_eval_set(&test, &spec).unwrap();
        assert_eq!(view.len(), 5);
        for i in 0..5 {
            let expect = stamp_trigger(&test.images[i], &spec.trigger).unwrap();
            assert_eq!(view.image(i).unwrap(), expect);
        }
    }

    #[test]
    fn poisoned_eval_rejects_train_split_and_handles_empty() {
        let train = toy_dataset(5, Split::Train);
        let spec = bassl_spec(0.5, 1.0);
        assert!(make_poisoned_eval_set(&train, &spec).is_err());
        let empty = LabeledDataset {
            images: vec![],
            labels: vec![],
            name: DatasetId::SynthTiny,
            split: Split::Test,
            num_classes: 3,
        };
        let view = make_poisoned_eval_set(&empty, &spec).unwrap();
        assert!(view.is_empty());
    }
}
