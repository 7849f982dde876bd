//! Pipeline orchestration: single experiments with cached stage artifacts,
//! sweeps over one axis, and report emission.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::artifact::{data_root_from_env, ArtifactStore};
use crate::attack::{badencoder_poison, bassl_poison, BadEncoderHParams};
use crate::config::{
    hash_value, ArchId, DatasetId, ExperimentConfig, LossKind, StudentStrategy, TeacherMethod,
};
use crate::data::{load_dataset, sample_clean_subset, LabeledDataset, Split};
use crate::distill::{distill, init_student, LossParams};
use crate::error::{Error, Result};
use crate::evaluate::{
    balanced_score, compute_acc, compute_asr, train_downstream, DownstreamHParams, MetricsRecord,
};
use crate::nn::Encoder;
use crate::pretrain::{contrastive_pretrain, AugmentationPolicy, PretrainHParams};
use crate::seed::derive_seed;
use crate::teacher::{
    invert_trigger, make_teacher_anp, make_teacher_fp, make_teacher_ft, make_teacher_moth,
};
use crate::types::{ArtifactRef, AttackMethod};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything an experiment needs besides its config.
#[derive(Debug, Clone)]
pub struct BenchContext {
    pub store: ArtifactStore,
    pub data_root: PathBuf,
}

impl BenchContext {
    pub fn new(store: ArtifactStore, data_root: impl Into<PathBuf>) -> Self {
        BenchContext { store, data_root: data_root.into() }
    }

    pub fn from_env() -> Self {
        BenchContext {
            store: ArtifactStore::from_env(),
            data_root: data_root_from_env(),
        }
    }
}

// ---------------------------------------------------------------------------
// Stage cache keys
// ---------------------------------------------------------------------------
//
// Each stage hashes exactly the config fields that influence it, so cells
// differing only in later-stage fields share the earlier artifacts.

fn pretrain_key(cfg: &ExperimentConfig) -> String {
    hash_value(&(
        "pretrain",
        &cfg.pretrain_dataset,
        &cfg.architecture,
        cfg.epochs.pretrain,
        &cfg.optimizer_hparams,
        &cfg.synth,
        cfg.seed,
    ))
}

fn attack_key(cfg: &ExperimentConfig) -> String {
    hash_value(&(
        "attack",
        pretrain_key(cfg),
        &cfg.attack,
        cfg.epochs.attack,
        &cfg.downstream_dataset,
    ))
}

fn teacher_key(cfg: &ExperimentConfig) -> String {
    hash_value(&(
        "teacher",
        attack_key(cfg),
        &cfg.teacher_method,
        &cfg.teacher,
        cfg.epochs.teacher,
        cfg.clean_data_ratio,
    ))
}

fn distill_key(cfg: &ExperimentConfig) -> String {
    hash_value(&(
        "distill",
        teacher_key(cfg),
        &cfg.student_strategy,
        &cfg.loss_kind,
        cfg.distill_epochs,
        cfg.epochs.warmup,
        cfg.iterations,
    ))
}

/// Stage-key bundle, exposed so tests can assert artifact-sharing rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageKeys {
    pub pretrain: String,
    pub attack: String,
    pub teacher: String,
    pub distill: String,
}

pub fn stage_keys(cfg: &ExperimentConfig) -> StageKeys {
    StageKeys {
        pretrain: pretrain_key(cfg),
        attack: attack_key(cfg),
        teacher: teacher_key(cfg),
        distill: distill_key(cfg),
    }
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

fn pretrain_hparams(cfg: &ExperimentConfig, epochs: usize) -> PretrainHParams {
    PretrainHParams {
        epochs,
        learning_rate: cfg.optimizer_hparams.learning_rate,
        batch_size: cfg.optimizer_hparams.batch_size,
        temperature: 0.5,
        augmentation: AugmentationPolicy::Standard,
    }
}

fn stage_err(stage: &str, cfg: &ExperimentConfig, e: Error) -> Error {
    match e {
        e @ Error::StaleArtifact { .. } => e,
        e => Error::Experiment {
            stage: stage.to_string(),
            config_hash: cfg.config_hash(),
            message: e.to_string(),
        },
    }
}

fn dataset(cfg: &ExperimentConfig, ctx: &BenchContext, id: DatasetId, split: Split) -> Result<LabeledDataset> {
    load_dataset(
        &ctx.data_root,
        id,
        split,
        (cfg.synth.train_size, cfg.synth.test_size),
        derive_seed(cfg.seed, "synth-data"),
    )
}

/// Stable hash of a dataset's identifying manifest, used as the lineage
/// root of every record.
pub fn dataset_manifest_hash(ds: &LabeledDataset) -> String {
    let (h, w, c) = ds.image_shape();
    hash_value(&(
        ds.name.to_string(),
        ds.split.to_string(),
        ds.len(),
        h,
        w,
        c,
        ds.num_classes,
    ))
}

fn load_or_pretrain(cfg: &ExperimentConfig, ctx: &BenchContext, lineage: &[(String, String)]) -> Result<Encoder> {
    let key = pretrain_key(cfg);
    if ctx.store.has("pretrain", &key) {
        return Ok(ctx.store.load_encoder("pretrain", &key)?.0);
    }
    let train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)?;
    let hp = pretrain_hparams(cfg, cfg.epochs.pretrain);
    let trained = contrastive_pretrain(&train, cfg.architecture, &hp, derive_seed(cfg.seed, "pretrain"))?;
    ctx.store
        .save_encoder("pretrain", &key, &trained.encoder, lineage.to_vec(), 0)?;
    ctx.store.save_trace_csv("pretrain", &key, "loss_trace", &trained.loss_trace)?;
    Ok(trained.encoder)
}

fn load_or_attack(
    cfg: &ExperimentConfig,
    ctx: &BenchContext,
    lineage: &[(String, String)],
) -> Result<Encoder> {
    let key = attack_key(cfg);
    if ctx.store.has("attack", &key) {
        return Ok(ctx.store.load_encoder("attack", &key)?.0);
    }
    let spec = cfg.attack_spec()?;
    let train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)?;
    let (encoder, trace) = match spec.method {
        AttackMethod::BadEncoder => {
            let clean = load_or_pretrain(cfg, ctx, lineage)?;
            let shadow = sample_clean_subset(
                &train,
                spec.strength.shadow_fraction,
                derive_seed(cfg.seed, "shadow"),
            )?;
            let hp = BadEncoderHParams {
                lambda_effect: spec.strength.lambda_effect,
                lambda_utility: spec.strength.lambda_utility,
                epochs: cfg.epochs.attack,
                learning_rate: cfg.optimizer_hparams.learning_rate,
                batch_size: cfg.optimizer_hparams.batch_size.min(32),
            };
            let r = badencoder_poison(&clean, &spec, &shadow, &hp, derive_seed(cfg.seed, "attack"))?;
            (r.encoder, r.loss_trace)
        }
        AttackMethod::Bassl => {
            let downstream_train = dataset(cfg, ctx, cfg.downstream_dataset, Split::Train)?;
            let targets: Vec<Array3<f64>> = downstream_train
                .images
                .iter()
                .zip(&downstream_train.labels)
                .filter(|(_, &l)| l as usize == spec.target_class)
                .map(|(im, _)| im.clone())
                .collect();
            let hp = pretrain_hparams(cfg, cfg.epochs.pretrain);
            let r = bassl_poison(
                &train,
                &spec,
                &targets,
                cfg.architecture,
                &hp,
                derive_seed(cfg.seed, "attack"),
            )?;
            (r.encoder, r.loss_trace)
        }
    };
    let mut lin = lineage.to_vec();
    if spec.method == AttackMethod::BadEncoder {
        lin.push(("pretrain".into(), pretrain_key(cfg)));
    }
    ctx.store.save_encoder("attack", &key, &encoder, lin, 0)?;
    ctx.store.save_trace_csv("attack", &key, "loss_trace", &trace)?;
    Ok(encoder)
}

/// Pretrain (or load the cached) clean encoder for this config.
pub fn ensure_pretrained(cfg: &ExperimentConfig, ctx: &BenchContext) -> Result<Encoder> {
    let train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)?;
    let lineage = vec![("dataset".to_string(), dataset_manifest_hash(&train))];
    load_or_pretrain(cfg, ctx, &lineage)
}

/// Run (or load the cached) attack stage for this config.
pub fn ensure_attacked(cfg: &ExperimentConfig, ctx: &BenchContext) -> Result<Encoder> {
    let train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)?;
    let lineage = vec![("dataset".to_string(), dataset_manifest_hash(&train))];
    load_or_attack(cfg, ctx, &lineage)
}

fn clean_subset(cfg: &ExperimentConfig, ctx: &BenchContext) -> Result<LabeledDataset> {
    let train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)?;
    sample_clean_subset(&train, cfg.clean_data_ratio, derive_seed(cfg.seed, "clean-subset"))
}

/// Produce a teacher from a poisoned (or earlier-student) encoder with the
/// configured method.
pub fn build_teacher(
    cfg: &ExperimentConfig,
    ctx: &BenchContext,
    source: &Encoder,
    subset: &LabeledDataset,
    seed: u64,
) -> Result<Encoder> {
    let hp = pretrain_hparams(cfg, cfg.epochs.teacher);
    match cfg.teacher_method {
        TeacherMethod::None => Ok(source.clone()),
        TeacherMethod::Ft => Ok(make_teacher_ft(source, subset, cfg.epochs.teacher, &hp, seed)?.encoder),
        TeacherMethod::Fp => Ok(make_teacher_fp(
            source,
            subset,
            cfg.teacher.prune_fraction,
            cfg.epochs.teacher,
            &hp,
            seed,
        )?
        .encoder),
        TeacherMethod::Anp => Ok(make_teacher_anp(
            source,
            subset,
            cfg.teacher.anp_budget,
            cfg.teacher.prune_fraction,
            cfg.epochs.teacher,
            &hp,
            seed,
        )?
        .encoder),
        TeacherMethod::Moth => {
            let side = cfg.attack.trigger_size;
            let estimate = invert_trigger(
                source,
                subset,
                (side, side),
                cfg.teacher.inversion_steps,
                0.1,
                derive_seed(seed, "inversion"),
            )?;
            ctx.store.save_trigger_estimate(&teacher_key(cfg), &estimate)?;
            Ok(make_teacher_moth(source, subset, &estimate, cfg.epochs.teacher, &hp, seed)?.encoder)
        }
    }
}

/// Iterative distillation: iteration 0 distills
/// from the configured teacher into a freshly initialized student;
/// iteration n >= 1 fine-tunes the previous student into the next teacher
/// and keeps training the same student. Returns the (teacher, student)
/// artifact chain in iteration order.
pub fn iterative_distill(
    cfg: &ExperimentConfig,
    ctx: &BenchContext,
    poisoned: &Encoder,
    subset: &LabeledDataset,
    lineage: &[(String, String)],
) -> Result<Vec<(ArtifactRef, ArtifactRef)>> {
    let key = distill_key(cfg);
    let loss_params = LossParams::default();
    let warm_hp = pretrain_hparams(cfg, cfg.epochs.warmup);
    let mut chain = Vec::new();
    let mut prev_student: Option<(Encoder, String)> = None;
    for it in 0..cfg.iterations.max(1) {
        let (teacher, teacher_parent) = match &prev_student {
            None => (
                build_teacher(cfg, ctx, poisoned, subset, derive_seed(cfg.seed, "teacher"))?,
                ("attack".to_string(), attack_key(cfg)),
            ),
            Some((stu, stu_hash)) => {
                // tea^(n) = FT(stu^(n-1))
                let hp = pretrain_hparams(cfg, cfg.epochs.teacher);
                let t = make_teacher_ft(
                    stu,
                    subset,
                    cfg.epochs.teacher,
                    &hp,
                    derive_seed(cfg.seed, &format!("teacher-iter{it}")),
                )?;
                (t.encoder, ("student".to_string(), stu_hash.clone()))
            }
        };
        let teacher_hash = format!("{key}-tea{it}");
        let mut tea_lineage = vec![teacher_parent];
        tea_lineage.extend(lineage.to_vec());
        let tea_ref = ctx
            .store
            .save_encoder("teacher", &teacher_hash, &teacher, tea_lineage, it)?;

        let student_init = match &prev_student {
            None => init_student(
                cfg.student_strategy,
                poisoned,
                subset,
                &warm_hp,
                derive_seed(cfg.seed, "student-init"),
            )?,
            Some((stu, _)) => stu.clone(),
        };
        let result = distill(
            &teacher,
            &student_init,
            subset,
            cfg.loss_kind,
            cfg.distill_epochs,
            cfg.optimizer_hparams.learning_rate,
            cfg.optimizer_hparams.batch_size,
            &loss_params,
            derive_seed(cfg.seed, &format!("distill-iter{it}")),
        )?;
        let student_hash = format!("{key}-stu{it}");
        let mut stu_lineage = vec![("teacher".to_string(), teacher_hash.clone())];
        stu_lineage.extend(lineage.to_vec());
        let stu_ref = ctx
            .store
            .save_encoder("student", &student_hash, &result.student, stu_lineage, it)?;
        ctx.store
            .save_trace_csv("student", &student_hash, "loss_trace", &result.loss_trace)?;
        prev_student = Some((result.student, student_hash));
        chain.push((tea_ref, stu_ref));
    }
    Ok(chain)
}

/// Run one grid cell end to end, reusing cached stage artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &BenchContext) -> Result<MetricsRecord> {
    cfg.validate()?;
    let full_hash = cfg.config_hash();
    if ctx.store.has("metrics", &full_hash) {
        return ctx.store.load_metrics(&full_hash);
    }

    let pretrain_train = dataset(cfg, ctx, cfg.pretrain_dataset, Split::Train)
        .map_err(|e| stage_err("data", cfg, e))?;
    let base_lineage = vec![("dataset".to_string(), dataset_manifest_hash(&pretrain_train))];

    let poisoned = load_or_attack(cfg, ctx, &base_lineage).map_err(|e| stage_err("attack", cfg, e))?;
    let subset = clean_subset(cfg, ctx).map_err(|e| stage_err("data", cfg, e))?;

    let mut lineage = vec![("attack".to_string(), attack_key(cfg))];
    lineage.extend(base_lineage.clone());
    let chain = iterative_distill(cfg, ctx, &poisoned, &subset, &lineage)
        .map_err(|e| stage_err("distill", cfg, e))?;
    let (_, final_student_ref) = chain.last().expect("at least one iteration");
    let final_key = format!("{}-stu{}", distill_key(cfg), cfg.iterations.max(1) - 1);
    let (student, _) = ctx
        .store
        .load_encoder("student", &final_key)
        .map_err(|e| stage_err("distill", cfg, e))?;

    let down_train = dataset(cfg, ctx, cfg.downstream_dataset, Split::Train)
        .map_err(|e| stage_err("downstream", cfg, e))?;
    let down_test = dataset(cfg, ctx, cfg.downstream_dataset, Split::Test)
        .map_err(|e| stage_err("downstream", cfg, e))?;
    let hp = DownstreamHParams {
        epochs: cfg.epochs.downstream,
        learning_rate: cfg.optimizer_hparams.learning_rate,
        batch_size: cfg.optimizer_hparams.batch_size,
    };
    let probe = train_downstream(&student, &down_train, &hp, derive_seed(cfg.seed, "downstream"))
        .map_err(|e| stage_err("downstream", cfg, e))?;
    let spec = cfg.attack_spec()?;
    let acc = compute_acc(&probe, &down_test).map_err(|e| stage_err("evaluate", cfg, e))?;
    let asr = compute_asr(&probe, &down_test, &spec).map_err(|e| stage_err("evaluate", cfg, e))?;
    let _ = balanced_score(acc, asr, cfg.alpha)?;

    let mut rec_lineage = final_student_ref.lineage.clone();
    rec_lineage.push(("downstream-dataset".to_string(), dataset_manifest_hash(&down_test)));
    let record = MetricsRecord::new(
        acc,
        asr,
        cfg.alpha,
        rec_lineage,
        cfg.downstream_dataset.to_string(),
        cfg.seed,
    )?;
    ctx.store.save_metrics(&full_hash, &record)?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SweepAxis {
    Epochs,
    DataRatio,
    TriggerSize,
    Architecture,
    Iterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Int(usize),
    Real(f64),
    Arch(ArchId),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Int(v) => write!(f, "{v}"),
            SweepValue::Real(v) => write!(f, "{v}"),
            SweepValue::Arch(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::validation("sweep.values", "must be non-empty"));
        }
        for v in &self.values {
            self.apply(v)?;
        }
        Ok(())
    }

    /// Materialize the config for one sweep value.
    pub fn apply(&self, value: &SweepValue) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        match (self.axis, value) {
            (SweepAxis::Epochs, SweepValue::Int(v)) if *v > 0 => cfg.distill_epochs = *v,
            (SweepAxis::DataRatio, SweepValue::Real(v)) => cfg.clean_data_ratio = *v,
            (SweepAxis::TriggerSize, SweepValue::Int(v)) => cfg.attack.trigger_size = *v,
            (SweepAxis::Architecture, SweepValue::Arch(a)) => cfg.architecture = *a,
            (SweepAxis::Iterations, SweepValue::Int(v)) if *v >= 1 => cfg.iterations = *v,
            (axis, v) => {
                return Err(Error::validation(
                    "sweep.values",
                    format!("value {v} invalid for axis {axis:?}"),
                ))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Completed,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub sweep_value: String,
    pub status: RowStatus,
    pub metrics: Option<MetricsRecord>,
}

impl PartialEq for MetricsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.acc == other.acc
            && self.asr == other.asr
            && self.bs == other.bs
            && self.alpha == other.alpha
            && self.lineage == other.lineage
            && self.downstream_dataset == other.downstream_dataset
            && self.seed == other.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<SweepRow>,
    pub created_at: String,
    pub version: String,
}

impl ResultTable {
    pub fn all_completed(&self) -> bool {
        self.rows.iter().all(|r| r.status == RowStatus::Completed)
    }

    pub fn table_hash(&self) -> String {
        hash_value(&self.rows)
    }
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

/// Run one experiment per sweep value, in order, capturing per-row failures.
pub fn run_sweep(spec: &SweepSpec, ctx: &BenchContext) -> Result<ResultTable> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let cfg = spec.apply(value)?;
        let row = match run_experiment(&cfg, ctx) {
            Ok(metrics) => SweepRow {
                config_hash: cfg.config_hash(),
                sweep_value: value.to_string(),
                status: RowStatus::Completed,
                metrics: Some(metrics),
            },
            Err(e) => SweepRow {
                config_hash: cfg.config_hash(),
                sweep_value: value.to_string(),
                status: RowStatus::Failed { message: e.to_string() },
                metrics: None,
            },
        };
        rows.push(row);
    }
    Ok(ResultTable {
        rows,
        created_at: timestamp(),
        version: TOOLKIT_VERSION.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
    Plots,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn save_result_table(table: &ResultTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&serde_json::json!({
        "created_at": table.created_at,
        "version": table.version,
    }))?);
    out.push('\n');
    for row in &table.rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_result_table(path: &Path) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| {
        Error::Serialization("empty result table file".into())
    })?)?;
    let rows = lines
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<SweepRow>, _>>()?;
    Ok(ResultTable {
        rows,
        created_at: header["created_at"].as_str().unwrap_or_default().to_string(),
        version: header["version"].as_str().unwrap_or_default().to_string(),
    })
}

/// Sidecar description of an emitted plot, used to verify element counts
/// without parsing SVG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotMetadata {
    pub kind: String,
    pub groups: usize,
    pub series: Vec<String>,
    pub elements: usize,
}

fn emit_grouped_bar_svg(table: &ResultTable, path: &Path) -> Result<PlotMetadata> {
    let rows: Vec<&SweepRow> = table.rows.iter().filter(|r| r.metrics.is_some()).collect();
    let series = ["acc", "asr", "bs"];
    let groups = rows.len();
    let bar_w = 22.0;
    let group_w = bar_w * series.len() as f64 + 20.0;
    let width = 60.0 + group_w * groups as f64;
    let height = 260.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    svg.push_str("<line x1=\"40\" y1=\"220\" x2=\"100%\" y2=\"220\" stroke=\"black\"/>\n");
    let colors = ["#4c72b0", "#dd8452", "#55a868"];
    let mut elements = 0;
    for (gi, row) in rows.iter().enumerate() {
        let m = row.metrics.as_ref().unwrap();
        let vals = [m.acc, m.asr, m.bs];
        for (si, v) in vals.iter().enumerate() {
            let h = (v.clamp(0.0, 1.0)) * 200.0;
            let x = 50.0 + gi as f64 * group_w + si as f64 * bar_w;
            let y = 220.0 - h;
            svg.push_str(&format!(
                "<rect class=\"bar {}\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                series[si],
                bar_w - 4.0,
                colors[si],
            ));
            elements += 1;
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"240\" font-size=\"11\">{}</text>\n",
            50.0 + gi as f64 * group_w,
            row.sweep_value
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(PlotMetadata {
        kind: "grouped-bar".into(),
        groups,
        series: series.iter().map(|s| s.to_string()).collect(),
        elements,
    })
}

fn emit_line_svg(table: &ResultTable, path: &Path) -> Result<PlotMetadata> {
    let rows: Vec<&SweepRow> = table.rows.iter().filter(|r| r.metrics.is_some()).collect();
    let series = ["acc", "asr", "bs"];
    let n = rows.len();
    let width = 420.0;
    let height = 260.0;
    let step = if n > 1 { 360.0 / (n - 1) as f64 } else { 0.0 };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    let colors = ["#4c72b0", "#dd8452", "#55a868"];
    for (si, name) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let m = r.metrics.as_ref().unwrap();
                let v = match si {
                    0 => m.acc,
                    1 => m.asr,
                    _ => m.bs,
                };
                format!("{:.1},{:.1}", 30.0 + i as f64 * step, 220.0 - v.clamp(0.0, 1.0) * 200.0)
            })
            .collect();
        svg.push_str(&format!(
            "<polyline class=\"series {name}\" fill=\"none\" stroke=\"{}\" points=\"{}\"/>\n",
            colors[si],
            pts.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(PlotMetadata {
        kind: "line".into(),
        groups: n,
        series: series.iter().map(|s| s.to_string()).collect(),
        elements: series.len(),
    })
}

/// Write the requested report files into `out_dir`; file names derive from
/// the table hash so identical tables produce identical names.
pub fn emit_report(
    table: &ResultTable,
    formats: &BTreeSet<ReportFormat>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Err(Error::validation("formats", "at least one format required"));
    }
    if table.rows.is_empty() {
        return Err(Error::validation("table", "must be non-empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = table.table_hash();
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Csv) {
        let path = out_dir.join(format!("report-{hash}.csv"));
        let mut csv = String::from("value,config_hash,status,acc_pct,asr_pct,bs\n");
        for row in &table.rows {
            let (status, acc, asr, bs) = match (&row.status, &row.metrics) {
                (RowStatus::Completed, Some(m)) => (
                    "completed".to_string(),
                    pct(m.acc),
                    pct(m.asr),
                    format!("{:.2}", m.bs),
                ),
                (RowStatus::Failed { message }, _) => (
                    format!("failed: {}", message.replace(',', ";")),
                    String::new(),
                    String::new(),
                    String::new(),
                ),
                _ => ("incomplete".to_string(), String::new(), String::new(), String::new()),
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.sweep_value, row.config_hash, status, acc, asr, bs
            ));
        }
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Jsonl) {
        let path = out_dir.join(format!("report-{hash}.jsonl"));
        save_result_table(table, &path)?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Plots) {
        let bar_path = out_dir.join(format!("plot-bar-{hash}.svg"));
        let bar_meta = emit_grouped_bar_svg(table, &bar_path)?;
        let bar_meta_path = out_dir.join(format!("plot-bar-{hash}.json"));
        std::fs::write(&bar_meta_path, serde_json::to_string_pretty(&bar_meta)?)
            .map_err(|e| Error::io(&bar_meta_path, e))?;
        let line_path = out_dir.join(format!("plot-line-{hash}.svg"));
        let line_meta = emit_line_svg(table, &line_path)?;
        let line_meta_path = out_dir.join(format!("plot-line-{hash}.json"));
        std::fs::write(&line_meta_path, serde_json::to_string_pretty(&line_meta)?)
            .map_err(|e| Error::io(&line_meta_path, e))?;
        written.extend([bar_path, bar_meta_path, line_path, line_meta_path]);
    }
    Ok(written)
}

/// A desk-scale configuration used by tests and examples: SYNTH-TINY data,
/// tiny-cnn encoder, and epoch counts sized for CPU runs.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain_dataset = DatasetId::SynthTiny;
    cfg.downstream_dataset = DatasetId::SynthTiny;
    cfg.architecture = ArchId::TinyCnn;
    cfg.attack.target_class = 1;
    cfg.loss_kind = LossKind::Atd;
    cfg.student_strategy = StudentStrategy::Warmup;
    cfg.teacher_method = TeacherMethod::Ft;
    cfg.distill_epochs = 10;
    cfg.iterations = 1;
    cfg.optimizer_hparams.batch_size = 32;
    cfg.optimizer_hparams.learning_rate = 0.001;
    cfg.attack.strength.shadow_fraction = 0.25;
    cfg.epochs.pretrain = 40;
    cfg.epochs.warmup = 10;
    cfg.epochs.attack = 120;
    cfg.epochs.teacher = 10;
    cfg.epochs.downstream = 60;
    cfg.synth.train_size = 192;
    cfg.synth.test_size = 96;
    cfg.clean_data_ratio = 0.25;
    cfg.teacher.inversion_steps = 40;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downstream_only_fields_share_upstream_keys() {
        let a = tiny_config();
        let mut b = a.clone();
        b.alpha = 0.7;
        b.epochs.downstream = 10;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(stage_keys(&a), stage_keys(&b));
    }

    #[test]
    fn data_ratio_shares_attack_but_not_teacher() {
        let a = tiny_config();
        let mut b = a.clone();
        b.clean_data_ratio = 0.5;
        let (ka, kb) = (stage_keys(&a), stage_keys(&b));
        assert_eq!(ka.pretrain, kb.pretrain);
        assert_eq!(ka.attack, kb.attack);
        assert_ne!(ka.teacher, kb.teacher);
        assert_ne!(ka.distill, kb.distill);
    }

    #[test]
    fn trigger_size_changes_attack_key() {
        let a = tiny_config();
        let mut b = a.clone();
        b.attack.trigger_size = 5;
        let (ka, kb) = (stage_keys(&a), stage_keys(&b));
        assert_eq!(ka.pretrain, kb.pretrain);
        assert_ne!(ka.attack, kb.attack);
        assert_ne!(ka.teacher, kb.teacher);
    }

    #[test]
    fn sweep_spec_validation() {
        let base = tiny_config();
        let empty = SweepSpec { axis: SweepAxis::Epochs, values: vec![], base: base.clone() };
        assert!(empty.validate().is_err());
        let bad = SweepSpec {
            axis: SweepAxis::Epochs,
            values: vec![SweepValue::Int(0)],
            base: base.clone(),
        };
        assert!(bad.validate().is_err());
        let ok = SweepSpec {
            axis: SweepAxis::TriggerSize,
            values: vec![SweepValue::Int(3), SweepValue::Int(5)],
            base,
        };
        ok.validate().unwrap();
        assert_eq!(ok.apply(&SweepValue::Int(5)).unwrap().attack.trigger_size, 5);
    }

    #[test]
    fn result_table_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = MetricsRecord::new(0.75, 0.2, 0.5, vec![], "SYNTH-TINY".into(), 1).unwrap();
        let table = ResultTable {
            rows: vec![
                SweepRow {
                    config_hash: "h1".into(),
                    sweep_value: "3".into(),
                    status: RowStatus::Completed,
                    metrics: Some(rec),
                },
                SweepRow {
                    config_hash: "h2".into(),
                    sweep_value: "5".into(),
                    status: RowStatus::Failed { message: "boom".into() },
                    metrics: None,
                },
            ],
            created_at: "123".into(),
            version: "0.1.0".into(),
        };
        let path = tmp.path().join("table.jsonl");
        save_result_table(&table, &path).unwrap();
        let back = load_result_table(&path).unwrap();
        assert_eq!(back, table);
        assert!(!back.all_completed());
    }

    #[test]
    fn report_formats_and_plot_metadata() {
        let tmp = tempfile::tempdir().unwrap();
        let rows = (0..4)
            .map(|i| SweepRow {
                config_hash: format!("h{i}"),
                sweep_value: format!("{i}"),
                status: RowStatus::Completed,
                metrics: Some(
                    MetricsRecord::new(0.5 + 0.1 * i as f64, 0.1, 0.5, vec![], "SYNTH-TINY".into(), i)
                        .unwrap(),
                ),
            })
            .collect();
        let table = ResultTable { rows, created_at: "1".into(), version: "v".into() };
        let empty: BTreeSet<ReportFormat> = BTreeSet::new();
        assert!(emit_report(&table, &empty, tmp.path()).is_err());
        let all: BTreeSet<ReportFormat> =
            [ReportFormat::Csv, ReportFormat::Jsonl, ReportFormat::Plots].into_iter().collect();
        let files = emit_report(&table, &all, tmp.path()).unwrap();
        assert_eq!(files.len(), 6);
        // grouped-bar metadata: 4 groups x 3 metrics
        let meta_path = files.iter().find(|p| p.to_string_lossy().contains("plot-bar") && p.extension().unwrap() == "json").unwrap();
        let meta: PlotMetadata =
            serde_json::from_str(&std::fs::read_to_string(meta_path).unwrap()).unwrap();
        assert_eq!(meta.groups, 4);
        assert_eq!(meta.series.len(), 3);
        assert_eq!(meta.elements, 12);
        // csv renders two-decimal percentages
        let csv_path = files.iter().find(|p| p.extension().unwrap() == "csv").unwrap();
        let csv = std::fs::read_to_string(csv_path).unwrap();
        assert!(csv.contains("50.00"), "{csv}");
        // deterministic names from the table hash
        let files2 = emit_report(&table, &all, tmp.path()).unwrap();
        assert_eq!(files, files2);
    }
}

