//! Command-line front end: dataset generation, pretraining, stream training and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::backbone::pretrain;
use crate::checkpoint;
use crate::config::{config_diff, parse_ablation, RunConfig};
use crate::continual::{run, Mode, RunRecord};
use crate::data::{generate_synthetic, read_dataset, write_dataset, SyntheticData};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "backbone.psv";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const RUN_LOG: &str = "run.log";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "accuracy_matrices.csv";

#[derive(Debug, Parser)]
#[command(name = "promptstream", version, about = "Continual prompt tuning on missing-modality task streams")]
pub struct Cli {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data.seed` for `generate` and `trainer.seed` otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark and its manifest.
    Generate,
    /// Train the backbone on complete-modality data and write a checkpoint.
    Pretrain {
        /// Dataset directory containing the manifest.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run a continual stream (or pooled reference) and write a run record.
    TrainStream {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Pretrained backbone checkpoint.
        #[arg(long, default_value = "pretrain/backbone.psv")]
        checkpoint: PathBuf,
        /// ours, lowerbound, upperbound or upperbound-ours.
        #[arg(long)]
        mode: Option<String>,
        /// Ablation grid, e.g. `prompts=all` or `order=all;length=4,8`.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Merge run records into a markdown table and CSV accuracy matrices.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    log::info!("effective configuration:\n{}", cfg.to_json());
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Execute a parsed command line; everything the user should see goes to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let mut out = String::new();
    match &cli.command {
        Command::Generate => cmd_generate(cli, &mut out)?,
        Command::Pretrain { data, epochs } => cmd_pretrain(cli, data, *epochs, &mut out)?,
        Command::TrainStream {
            data,
            checkpoint,
            mode,
            ablate,
            epochs,
        } => cmd_train_stream(cli, data, checkpoint, mode.as_deref(), ablate.as_deref(), *epochs, &mut out)?,
        Command::Report { records } => cmd_report(cli, records, &mut out)?,
    }
    stdout
        .write_all(out.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_generate(cli: &Cli, out: &mut String) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    create_dir(&dir)?;
    let data = generate_synthetic(&cfg.data)?;
    let manifest = write_dataset(&dir, &cfg.data, &data)?;
    writeln!(out, "wrote {} task splits to {}", manifest.tasks.len(), dir.display()).unwrap();
    writeln!(out, "spec hash {}", manifest.spec_hash).unwrap();
    Ok(())
}

/// Read a dataset directory and make the config's data section match it.
fn load_data(dir: &Path, cfg: &mut RunConfig) -> Result<SyntheticData> {
    let (manifest, data) = read_dataset(dir)?;
    if manifest.spec != cfg.data {
        log::info!("using the data spec recorded in {}", dir.display());
        cfg.data = manifest.spec;
        cfg.validate()?;
    }
    Ok(data)
}

fn cmd_pretrain(cli: &Cli, data_dir: &Path, epochs: Option<usize>, out: &mut String) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let data = load_data(data_dir, &mut cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("pretrain"));
    create_dir(&dir)?;
    let result = pretrain(
        &cfg.backbone,
        &data.pretrain,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.pretrain.batch_size,
        cfg.trainer.seed,
    )?;
    if let Some((i, l)) = result.epoch_losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(Error::Contract(format!("pretraining diverged: epoch {} loss {l}", i + 1)));
    }
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &result.params)?;
    let mut log = String::new();
    for (i, l) in result.epoch_losses.iter().enumerate() {
        writeln!(log, "epoch {} loss {l:.12}", i + 1).unwrap();
    }
    writeln!(log, "train_accuracy {:.6}", result.train_accuracy).unwrap();
    write_file(&dir.join(PRETRAIN_LOG), &log)?;
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_json())?;
    writeln!(
        out,
        "pretrained {} epochs, train accuracy {:.4}, checkpoint {}",
        result.epoch_losses.len(),
        result.train_accuracy,
        dir.join(CHECKPOINT_FILE).display()
    )
    .unwrap();
    Ok(())
}

fn fmt_pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn fmt_fm(fm: Option<f64>) -> String {
    fm.map(fmt_pct).unwrap_or_else(|| "n/a".into())
}

/// Method / AA / FM summary in percent.
pub fn summary_table(rows: &[(String, &RunRecord)]) -> String {
    let mut s = String::from("| Method | AA (↑) | FM (↓) |\n|---|---|---|\n");
    for (name, r) in rows {
        writeln!(s, "| {name} | {} | {} |", fmt_pct(r.average_accuracy), fmt_fm(r.forgetting)).unwrap();
    }
    s
}

fn run_one(cfg: &RunConfig, data: &SyntheticData, pretrained: &crate::optim::ParameterSet, dir: &Path) -> Result<RunRecord> {
    create_dir(dir)?;
    let started = Instant::now();
    let record = run(cfg, data, pretrained)?;
    write_file(&dir.join(RUN_RECORD_FILE), record.to_json()?)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_file(
        &dir.join(RUN_LOG),
        format!(
            "finished_unix {stamp}\nelapsed_seconds {:.3}\nmode {}\n",
            started.elapsed().as_secs_f64(),
            record.mode.name()
        ),
    )?;
    Ok(record)
}

fn cmd_train_stream(
    cli: &Cli,
    data_dir: &Path,
    checkpoint_path: &Path,
    mode: Option<&str>,
    ablate: Option<&str>,
    epochs: Option<usize>,
    out: &mut String,
) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = mode {
        cfg.trainer.mode = Mode::parse(m)?;
    }
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.trainer.epochs = e;
    }
    cfg.validate()?;
    let data = load_data(data_dir, &mut cfg)?;
    let pretrained = checkpoint::load(checkpoint_path)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let variants = match ablate {
        Some(spec) => parse_ablation(spec, &cfg)?,
        None => vec![crate::config::Variant {
            name: cfg.trainer.mode.name().into(),
            config: cfg.clone(),
        }],
    };
    let mut records = Vec::with_capacity(variants.len());
    for v in &variants {
        let target = if ablate.is_some() { dir.join(&v.name) } else { dir.clone() };
        log::info!("running {} into {}", v.name, target.display());
        records.push((v.name.clone(), run_one(&v.config, &data, &pretrained, &target)?));
    }
    let rows: Vec<(String, &RunRecord)> = records.iter().map(|(n, r)| (n.clone(), r)).collect();
    out.push_str(&summary_table(&rows));
    for (name, r) in &records {
        let p = &r.parameters;
        writeln!(
            out,
            "{name}: trainable parameters {} / {} ({:.2}%), prompts / backbone {:.2}%",
            p.trainable,
            p.total,
            100.0 * p.trainable_fraction,
            100.0 * p.prompt_to_backbone
        )
        .unwrap();
    }
    Ok(())
}

fn diff_text(base: &RunConfig, other: &RunConfig) -> String {
    let diff = config_diff(base, other);
    if diff.is_empty() {
        return "-".into();
    }
    diff.iter()
        .map(|(k, _, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Presentation order, marked when it is the assumed default rather than a chosen one.
fn order_text(r: &RunRecord) -> String {
    let order = r.task_order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-");
    if r.config.stream == crate::continual::StreamConfig::default() {
        format!("{order} (default)")
    } else {
        order
    }
}

/// Markdown comparison table and CSV of every accuracy matrix cell.
pub fn build_report(records: &[(String, RunRecord)]) -> Result<(String, String)> {
    let base = &records
        .first()
        .ok_or_else(|| Error::Usage("report needs at least one run record".into()))?
        .1
        .config;
    let mut md = String::from(
        "| Run | Method | AA (↑) | FM (↓) | Trainable params | Total params | Task order | Config diff |\n|---|---|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from("run,task_i,after_task_j,accuracy\n");
    for (name, r) in records {
        writeln!(
            md,
            "| {name} | {} | {} | {} | {} | {} | {} | {} |",
            r.mode.name(),
            fmt_pct(r.average_accuracy),
            fmt_fm(r.forgetting),
            r.parameters.trainable,
            r.parameters.total,
            order_text(r),
            diff_text(base, &r.config)
        )
        .unwrap();
        if let Some(m) = &r.accuracy_matrix {
            for (i, j, a) in m.entries() {
                writeln!(csv, "{name},{i},{j},{a}").unwrap();
            }
        }
    }
    Ok((md, csv))
}

fn cmd_report(cli: &Cli, paths: &[PathBuf], out: &mut String) -> Result<()> {
    let mut records = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let record = RunRecord::from_json(&text).map_err(|e| match e {
            Error::Version { expected, found } => Error::Version {
                expected,
                found: format!("{found} in {}", p.display()),
            },
            other => other,
        })?;
        let name = p
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        records.push((name, record));
    }
    let (md, csv) = build_report(&records)?;
    if let Some(dir) = &cli.out {
        create_dir(dir)?;
        write_file(&dir.join(REPORT_MD), &md)?;
        write_file(&dir.join(REPORT_CSV), &csv)?;
    }
    out.push_str(&md);
    Ok(())
}
