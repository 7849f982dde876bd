//! On-disk dataset layout.
//!
//! One directory per dataset split:
//!   manifest.json  — counts, shape, class count (schema below)
//!   images.bin     — raw u8 pixels, row-major H x W x C per image
//!   labels.bin     — little-endian u16 per image
//!
//! Pixels are scaled to [0,1] at load time (v / 255). Non-canonical sources
//! (e.g. 96x96 STL10) are resized by the fetch scripts before they reach
//! this layout, so the manifest shape always matches the catalog shape.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::config::DatasetId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

pub fn load_dataset_from(dir: &Path, name: DatasetId, split: Split) -> Result<LabeledDataset> {
    let manifest_path = dir.join("manifest.json");
    let images_path = dir.join("images.bin");
    let labels_path = dir.join("labels.bin");
    let missing: Vec<_> = [&manifest_path, &images_path, &labels_path]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.to_path_buf())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion(missing));
    }
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Serialization(e.to_string()))?;
    let (eh, ew, ec) = name.image_shape();
    if (manifest.height, manifest.width, manifest.channels) != (eh, ew, ec) {
        return Err(Error::Validation {
            field: "manifest.shape".into(),
            message: format!(
                "{} expects {eh}x{ew}x{ec}, manifest says {}x{}x{}",
                name, manifest.height, manifest.width, manifest.channels
            ),
        });
    }
    if manifest.num_classes != name.num_classes() {
        return Err(Error::Validation {
            field: "manifest.num_classes".into(),
            message: format!(
                "{} expects {} classes, manifest says {}",
                name,
                name.num_classes(),
                manifest.num_classes
            ),
        });
    }
    let per_image = eh * ew * ec;
    let mut raw = Vec::new();
    std::fs::File::open(&images_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&images_path, e))?;
    if raw.len() != manifest.count * per_image {
        return Err(Error::StaleArtifact {
            path: images_path,
            message: format!(
                "expected {} bytes for {} images, found {}",
                manifest.count * per_image,
                manifest.count,
                raw.len()
            ),
        });
    }
    let mut label_bytes = Vec::new();
    std::fs::File::open(&labels_path)
        .and_then(|mut f| f.read_to_end(&mut label_bytes))
        .map_err(|e| Error::io(&labels_path, e))?;
    if label_bytes.len() != manifest.count * 2 {
        return Err(Error::StaleArtifact {
            path: labels_path,
            message: "labels.bin size does not match manifest count".into(),
        });
    }
    let mut images = Vec::with_capacity(manifest.count);
    for k in 0..manifest.count {
        let base = k * per_image;
        let img = Array3::from_shape_fn((eh, ew, ec), |(i, j, c)| {
            raw[base + (i * ew + j) * ec + c] as f64 / 255.0
        });
        images.push(img);
    }
    let labels: Vec<usize> = (0..manifest.count)
        .map(|k| u16::from_le_bytes([label_bytes[2 * k], label_bytes[2 * k + 1]]) as usize)
        .collect();
    let ds = LabeledDataset {
        images,
        labels,
        name,
        split,
        num_classes: manifest.num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset in the documented layout (used by fetch scripts and tests).
pub fn save_dataset(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, c) = ds.image_shape();
    let manifest = DatasetManifest {
        name: ds.name.to_string(),
        split: ds.split,
        count: ds.len(),
        height: h,
        width: w,
        channels: c,
        num_classes: ds.num_classes,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?,
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    let mut raw = Vec::with_capacity(ds.len() * h * w * c);
    for img in &ds.images {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    raw.push((img[[i, j, ch]] * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let images_path = dir.join("images.bin");
    std::fs::File::create(&images_path)
        .and_then(|mut f| f.write_all(&raw))
        .map_err(|e| Error::io(&images_path, e))?;
    let mut label_bytes = Vec::with_capacity(ds.len() * 2);
    for &l in &ds.labels {
        label_bytes.extend_from_slice(&(l as u16).to_le_bytes());
    }
    let labels_path = dir.join("labels.bin");
    std::fs::File::create(&labels_path)
        .and_then(|mut f| f.write_all(&label_bytes))
        .map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}
