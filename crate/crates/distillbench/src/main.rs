use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distillbench::artifact::ArtifactStore;
use distillbench::bench::{
    build_teacher, emit_report, iterative_distill, load_result_table, run_experiment, run_sweep,
    save_result_table, stage_keys, BenchContext, ReportFormat, ResultTable, SweepAxis, SweepSpec,
    SweepValue,
};
use distillbench::config::{load_config, ArchId, ExperimentConfig};
use distillbench::data::{load_dataset, sample_clean_subset, Split};
use distillbench::error::Result;
use distillbench::seed::derive_seed;

#[derive(Parser)]
#[command(name = "distillbench", version, about = "Backdoor-distillation benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// Artifact store root (default: $DISTILLBENCH_ARTIFACTS or ./artifacts)
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Dataset cache root (default: $DISTILLBENCH_DATA or ./data)
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Override the experiment seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively pretrain a clean encoder and cache it
    Pretrain(CommonArgs),
    /// Produce the poisoned encoder for the configured attack
    Attack(CommonArgs),
    /// Build the configured teacher from the poisoned encoder
    Teacher(CommonArgs),
    /// Run the distillation loop (all configured iterations)
    Distill(CommonArgs),
    /// Train the downstream probe and print ACC/ASR/BS
    Eval(CommonArgs),
    /// Run the full pipeline for one config
    Run(CommonArgs),
    /// Sweep one axis over a list of values
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Axis to vary: epochs | data-ratio | trigger-size | architecture | iterations
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Where to write the result table (JSONL)
        #[arg(long, default_value = "sweep-results.jsonl")]
        out: PathBuf,
    },
    /// Render reports from a saved result table
    Report {
        /// Result table produced by `sweep` (JSONL)
        #[arg(long)]
        table: PathBuf,
        /// Formats to emit: csv, jsonl, plots
        #[arg(long, value_delimiter = ',', default_values_t = ["csv".to_string()])]
        formats: Vec<String>,
        /// Output directory
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
}

fn context(common: &CommonArgs) -> BenchContext {
    let mut ctx = BenchContext::from_env();
    if let Some(root) = &common.artifacts {
        ctx.store = ArtifactStore::new(root.clone());
    }
    if let Some(root) = &common.data_root {
        ctx.data_root = root.clone();
    }
    ctx
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_axis(name: &str) -> Result<SweepAxis> {
    match name.to_ascii_lowercase().replace('_', "-").as_str() {
        "epochs" => Ok(SweepAxis::Epochs),
        "data-ratio" => Ok(SweepAxis::DataRatio),
        "trigger-size" => Ok(SweepAxis::TriggerSize),
        "architecture" => Ok(SweepAxis::Architecture),
        "iterations" => Ok(SweepAxis::Iterations),
        other => Err(distillbench::error::Error::validation(
            "axis",
            format!("unknown sweep axis '{other}'"),
        )),
    }
}

fn parse_value(axis: SweepAxis, raw: &str) -> Result<SweepValue> {
    let raw = raw.trim();
    match axis {
        SweepAxis::Epochs | SweepAxis::TriggerSize | SweepAxis::Iterations => raw
            .parse::<usize>()
            .map(SweepValue::Int)
            .map_err(|e| distillbench::error::Error::validation("values", e.to_string())),
        SweepAxis::DataRatio => raw
            .parse::<f64>()
            .map(SweepValue::Real)
            .map_err(|e| distillbench::error::Error::validation("values", e.to_string())),
        SweepAxis::Architecture => ArchId::parse(raw).map(SweepValue::Arch),
    }
}

fn parse_format(raw: &str) -> Result<ReportFormat> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "csv" => Ok(ReportFormat::Csv),
        "jsonl" => Ok(ReportFormat::Jsonl),
        "plots" => Ok(ReportFormat::Plots),
        other => Err(distillbench::error::Error::validation(
            "formats",
            format!("unknown report format '{other}'"),
        )),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let ctx = context(&common);
            let train = load_dataset(
                &ctx.data_root,
                cfg.pretrain_dataset,
                Split::Train,
                (cfg.synth.train_size, cfg.synth.test_size),
                derive_seed(cfg.seed, "synth-data"),
            )?;
            // run_experiment caches this stage too; here we just force it.
            let _ = &train;
            let keys = stage_keys(&cfg);
            distillbench::bench::ensure_pretrained(&cfg, &ctx)?;
            println!("pretrain artifact: pretrain/{}", keys.pretrain);
            Ok(true)
        }
        Command::Attack(common) => {
            let cfg = load(&common)?;
            let ctx = context(&common);
            distillbench::bench::ensure_attacked(&cfg, &ctx)?;
            println!("attack artifact: attack/{}", stage_keys(&cfg).attack);
            Ok(true)
        }
        Command::Teacher(common) => {
            let cfg = load(&common)?;
            let ctx = context(&common);
            let poisoned = distillbench::bench::ensure_attacked(&cfg, &ctx)?;
            let train = load_dataset(
                &ctx.data_root,
                cfg.pretrain_dataset,
                Split::Train,
                (cfg.synth.train_size, cfg.synth.test_size),
                derive_seed(cfg.seed, "synth-data"),
            )?;
            let subset =
                sample_clean_subset(&train, cfg.clean_data_ratio, derive_seed(cfg.seed, "clean-subset"))?;
            let teacher =
                build_teacher(&cfg, &ctx, &poisoned, &subset, derive_seed(cfg.seed, "teacher"))?;
            println!("teacher built ({} params)", teacher.num_params());
            Ok(true)
        }
        Command::Distill(common) => {
            let cfg = load(&common)?;
            let ctx = context(&common);
            let poisoned = distillbench::bench::ensure_attacked(&cfg, &ctx)?;
            let train = load_dataset(
                &ctx.data_root,
                cfg.pretrain_dataset,
                Split::Train,
                (cfg.synth.train_size, cfg.synth.test_size),
                derive_seed(cfg.seed, "synth-data"),
            )?;
            let subset =
                sample_clean_subset(&train, cfg.clean_data_ratio, derive_seed(cfg.seed, "clean-subset"))?;
            let lineage = vec![("attack".to_string(), stage_keys(&cfg).attack)];
            let chain = iterative_distill(&cfg, &ctx, &poisoned, &subset, &lineage)?;
            for (i, (tea, stu)) in chain.iter().enumerate() {
                println!("iteration {i}: teacher={} student={}", tea.path, stu.path);
            }
            Ok(true)
        }
        Command::Eval(common) | Command::Run(common) => {
            let cfg = load(&common)?;
            let ctx = context(&common);
            let record = run_experiment(&cfg, &ctx)?;
            println!(
                "acc={:.4} asr={:.4} bs={:.4} (alpha={})",
                record.acc, record.asr, record.bs, record.alpha
            );
            Ok(true)
        }
        Command::Sweep { common, axis, values, out } => {
            let base = load(&common)?;
            let ctx = context(&common);
            let axis = parse_axis(&axis)?;
            let parsed = values
                .iter()
                .map(|v| parse_value(axis, v))
                .collect::<Result<Vec<_>>>()?;
            let spec = SweepSpec { axis, values: parsed, base };
            let table = run_sweep(&spec, &ctx)?;
            save_result_table(&table, &out)?;
            for row in &table.rows {
                match &row.metrics {
                    Some(m) => println!(
                        "{}: acc={:.4} asr={:.4} bs={:.4}",
                        row.sweep_value, m.acc, m.asr, m.bs
                    ),
                    None => println!("{}: {:?}", row.sweep_value, row.status),
                }
            }
            println!("table written to {}", out.display());
            Ok(table.all_completed())
        }
        Command::Report { table, formats, out } => {
            let table: ResultTable = load_result_table(&table)?;
            let formats: BTreeSet<ReportFormat> = formats
                .iter()
                .map(|f| parse_format(f))
                .collect::<Result<_>>()?;
            let files = emit_report(&table, &formats, &out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(table.all_completed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
