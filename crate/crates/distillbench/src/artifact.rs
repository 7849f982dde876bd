//! Content-addressed artifact store. Every pipeline stage persists its
//! output under `<root>/<stage>/<stage-config-hash>/` so that sweeps can
//! reuse upstream work, and each artifact carries its lineage.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::ArchId;
use crate::error::{Error, Result};
use crate::evaluate::MetricsRecord;
use crate::nn::{ArchSpec, Encoder};
use crate::teacher::TriggerEstimate;
use crate::types::{ArtifactKind, ArtifactRef};

/// Environment variable naming the artifact root directory.
pub const ARTIFACT_ROOT_ENV: &str = "DISTILLBENCH_ARTIFACTS";

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "DISTILLBENCH_DATA";

pub fn artifact_root_from_env() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

pub fn data_root_from_env() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    pub root: PathBuf,
}

/// Manifest written next to every artifact payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub stage: String,
    pub config_hash: String,
    pub lineage: Vec<(String, String)>,
    pub iteration_index: usize,
    /// Content hash of the payload for integrity checks.
    pub payload_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamGroup {
    name: String,
    shape: Vec<usize>,
    /// f64 little-endian bytes, base64.
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderCheckpoint {
    architecture: String,
    groups: Vec<ParamGroup>,
    stage_scales: Vec<Vec<f64>>,
}

fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64(data: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Serialization(format!("bad base64 blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Serialization("blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn arch_id_from_str(id: &str) -> Result<ArchId> {
    match id {
        "tiny-cnn" => Ok(ArchId::TinyCnn),
        "rn18" => Ok(ArchId::Rn18),
        "rn34" => Ok(ArchId::Rn34),
        "rn50" => Ok(ArchId::Rn50),
        other => Err(Error::Serialization(format!("unknown architecture `{other}`"))),
    }
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn from_env() -> Self {
        ArtifactStore::new(artifact_root_from_env())
    }

    pub fn dir(&self, stage: &str, config_hash: &str) -> PathBuf {
        self.root.join(stage).join(config_hash)
    }

    pub fn has(&self, stage: &str, config_hash: &str) -> bool {
        self.dir(stage, config_hash).join("manifest.json").is_file()
    }

    fn write_manifest(&self, dir: &Path, manifest: &ArtifactManifest) -> Result<()> {
        let text = serde_json::to_string_pretty(manifest)?;
        std::fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir, e))
    }

    fn read_manifest(&self, dir: &Path) -> Result<ArtifactManifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Persist an encoder; returns a reference whose lineage starts with
    /// the producing stage.
    pub fn save_encoder(
        &self,
        stage: &str,
        config_hash: &str,
        encoder: &Encoder,
        lineage: Vec<(String, String)>,
        iteration_index: usize,
    ) -> Result<ArtifactRef> {
        let dir = self.dir(stage, config_hash);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let groups = encoder
            .named_groups()
            .into_iter()
            .map(|(name, shape, data)| ParamGroup {
                name,
                shape,
                data: encode_f64(&data),
            })
            .collect();
        let ckpt = EncoderCheckpoint {
            architecture: encoder.spec.id.clone(),
            groups,
            stage_scales: encoder
                .stage_scales
                .iter()
                .map(|s| s.to_vec())
                .collect(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(dir.join("encoder.json"), text).map_err(|e| Error::io(&dir, e))?;
        let mut full_lineage = vec![(stage.to_string(), config_hash.to_string())];
        full_lineage.extend(lineage);
        let manifest = ArtifactManifest {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            lineage: full_lineage.clone(),
            iteration_index,
            payload_hash: encoder.content_hash(),
        };
        self.write_manifest(&dir, &manifest)?;
        Ok(ArtifactRef {
            kind: ArtifactKind::Encoder,
            path: dir.to_string_lossy().into_owned(),
            lineage: full_lineage,
            iteration_index,
        })
    }

    /// Load an encoder and verify its integrity against the manifest.
    pub fn load_encoder(&self, stage: &str, config_hash: &str) -> Result<(Encoder, ArtifactManifest)> {
        let dir = self.dir(stage, config_hash);
        let manifest = self.read_manifest(&dir)?;
        let path = dir.join("encoder.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt: EncoderCheckpoint = serde_json::from_str(&text)?;
        let spec = ArchSpec::from_id(arch_id_from_str(&ckpt.architecture)?);
        let mut encoder = Encoder::init(&spec, 0);
        let mut flat = Vec::with_capacity(encoder.num_params());
        for g in &ckpt.groups {
            flat.extend(decode_f64(&g.data)?);
        }
        if flat.len() != encoder.num_params() {
            return Err(Error::StaleArtifact {
                path,
                message: format!(
                    "checkpoint has {} parameters, architecture {} expects {}",
                    flat.len(),
                    ckpt.architecture,
                    encoder.num_params()
                ),
            });
        }
        encoder.set_params_flat(&flat);
        if ckpt.stage_scales.len() != encoder.stage_scales.len() {
            return Err(Error::StaleArtifact {
                path,
                message: "stage-scale count mismatch".into(),
            });
        }
        for (dst, src) in encoder.stage_scales.iter_mut().zip(&ckpt.stage_scales) {
            *dst = Array1::from(src.clone());
        }
        if encoder.content_hash() != manifest.payload_hash {
            return Err(Error::StaleArtifact {
                path,
                message: "payload hash does not match manifest".into(),
            });
        }
        Ok((encoder, manifest))
    }

    pub fn save_trace_csv(&self, stage: &str, config_hash: &str, name: &str, trace: &[f64]) -> Result<PathBuf> {
        let dir = self.dir(stage, config_hash);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut csv = String::from("step,value\n");
        for (i, v) in trace.iter().enumerate() {
            csv.push_str(&format!("{i},{v}\n"));
        }
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn save_metrics(
        &self,
        config_hash: &str,
        record: &MetricsRecord,
    ) -> Result<ArtifactRef> {
        let dir = self.dir("metrics", config_hash);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("metrics.jsonl");
        std::fs::write(&path, format!("{}\n", record.to_json_line()?))
            .map_err(|e| Error::io(&path, e))?;
        let mut lineage = vec![("metrics".to_string(), config_hash.to_string())];
        lineage.extend(record.lineage.clone());
        let manifest = ArtifactManifest {
            stage: "metrics".into(),
            config_hash: config_hash.to_string(),
            lineage: lineage.clone(),
            iteration_index: 0,
            payload_hash: crate::config::hash_value(record),
        };
        self.write_manifest(&dir, &manifest)?;
        Ok(ArtifactRef {
            kind: ArtifactKind::Metrics,
            path: dir.to_string_lossy().into_owned(),
            lineage,
            iteration_index: 0,
        })
    }

    pub fn load_metrics(&self, config_hash: &str) -> Result<MetricsRecord> {
        let path = self.dir("metrics", config_hash).join("metrics.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let line = text.lines().next().ok_or_else(|| Error::StaleArtifact {
            path: path.clone(),
            message: "empty metrics file".into(),
        })?;
        MetricsRecord::from_json_line(line)
    }

    /// TriggerEstimate serialized as pattern/mask blobs plus a trace CSV.
    pub fn save_trigger_estimate(
        &self,
        config_hash: &str,
        estimate: &TriggerEstimate,
    ) -> Result<PathBuf> {
        let dir = self.dir("trigger-estimate", config_hash);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pat: Vec<f64> = estimate.pattern.iter().copied().collect();
        let mask: Vec<f64> = estimate.mask.iter().copied().collect();
        let blob = serde_json::json!({
            "pattern_shape": estimate.pattern.shape(),
            "pattern": encode_f64(&pat),
            "mask_shape": estimate.mask.shape(),
            "mask": encode_f64(&mask),
        });
        let path = dir.join("estimate.json");
        std::fs::write(&path, serde_json::to_string(&blob)?).map_err(|e| Error::io(&path, e))?;
        self.save_trace_csv("trigger-estimate", config_hash, "inversion_trace", &estimate.inversion_loss_trace)?;
        Ok(path)
    }

    pub fn load_trigger_estimate(&self, config_hash: &str) -> Result<TriggerEstimate> {
        let dir = self.dir("trigger-estimate", config_hash);
        let path = dir.join("estimate.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let blob: serde_json::Value = serde_json::from_str(&text)?;
        let ps: Vec<usize> = serde_json::from_value(blob["pattern_shape"].clone())?;
        let ms: Vec<usize> = serde_json::from_value(blob["mask_shape"].clone())?;
        let pattern = Array3::from_shape_vec(
            (ps[0], ps[1], ps[2]),
            decode_f64(blob["pattern"].as_str().unwrap_or_default())?,
        )
        .map_err(|e| Error::Serialization(e.to_string()))?;
        let mask = Array2::from_shape_vec(
            (ms[0], ms[1]),
            decode_f64(blob["mask"].as_str().unwrap_or_default())?,
        )
        .map_err(|e| Error::Serialization(e.to_string()))?;
        let trace_path = dir.join("inversion_trace.csv");
        let trace = if trace_path.is_file() {
            std::fs::read_to_string(&trace_path)
                .map_err(|e| Error::io(&trace_path, e))?
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()))
                .collect()
        } else {
            Vec::new()
        };
        Ok(TriggerEstimate { pattern, mask, inversion_loss_trace: trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use ndarray::Array2 as NdArray2;

    #[test]
    fn encoder_checkpoint_round_trips_bit_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(tmp.path());
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let mut enc = Encoder::init(&spec, 13);
        enc.stage_scales[0][2] = 0.0;
        let r = store
            .save_encoder("attack", "abc123", &enc, vec![("pretrain".into(), "p0".into())], 0)
            .unwrap();
        assert_eq!(r.lineage[0], ("attack".to_string(), "abc123".to_string()));
        let (back, manifest) = store.load_encoder("attack", "abc123").unwrap();
        assert_eq!(back.content_hash(), enc.content_hash());
        assert_eq!(back.params_flat(), enc.params_flat());
        assert_eq!(manifest.payload_hash, enc.content_hash());
        assert!(store.has("attack", "abc123"));
        assert!(!store.has("attack", "other"));
    }

    #[test]
    fn tampered_checkpoint_is_stale() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(tmp.path());
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let enc = Encoder::init(&spec, 13);
        store.save_encoder("attack", "h", &enc, vec![], 0).unwrap();
        // flip the payload hash in the manifest
        let dir = store.dir("attack", "h");
        let mut manifest: ArtifactManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        manifest.payload_hash = "deadbeef".into();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string(&manifest).unwrap())
            .unwrap();
        assert!(matches!(
            store.load_encoder("attack", "h"),
            Err(Error::StaleArtifact { .. })
        ));
    }

    #[test]
    fn metrics_and_estimate_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(tmp.path());
        let rec = MetricsRecord::new(0.9, 0.2, 0.5, vec![], "SYNTH-TINY".into(), 7).unwrap();
        store.save_metrics("cfg", &rec).unwrap();
        let back = store.load_metrics("cfg").unwrap();
        assert_eq!(back.bs, rec.bs);

        let est = TriggerEstimate {
            pattern: Array3::from_elem((4, 4, 3), 0.25),
            mask: NdArray2::from_elem((4, 4), 0.75),
            inversion_loss_trace: vec![0.1, 0.2, 0.3],
        };
        store.save_trigger_estimate("cfg", &est).unwrap();
        let back = store.load_trigger_estimate("cfg").unwrap();
        assert_eq!(back.pattern, est.pattern);
        assert_eq!(back.mask, est.mask);
        assert_eq!(back.inversion_loss_trace.len(), 3);
    }
}
