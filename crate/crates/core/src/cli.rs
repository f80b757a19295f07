//! The `bcl` command line: dataset construction, pretraining, probing,
//! tail diagnostics, ablation grids, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
//! `BCL_OUT_DIR`, when set, roots relative output directories.

use crate::dataio::{self, DatasetManifest, Geometry, PartitionScheme};
use crate::eval::Shots;
use crate::tensor::load_checkpoint;
use crate::trainer::{self, ExperimentConfig};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "bcl",
    about = "Boosted contrastive pretraining on long-tailed image data",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a long-tailed training split (plus held-out pool) from a
    /// balanced dataset file or a synthetic source.
    MakeLt(MakeLtArgs),
    /// Run contrastive pretraining from a config file.
    Pretrain(PretrainArgs),
    /// Linear-probe a finished run.
    Probe(ProbeArgs),
    /// Per-epoch tail-discovery ratios from a run's stored loss history.
    DiagnoseTail(DiagnoseArgs),
    /// One-axis grid of pretrain+probe cells with a joined summary.
    Ablate(AblateArgs),
    /// Print a checkpoint's manifest.
    InspectCkpt(InspectArgs),
}

#[derive(Args)]
struct MakeLtArgs {
    /// Balanced source dataset (label byte + channel-planar pixels).
    #[arg(long, conflicts_with = "synth")]
    input: Option<PathBuf>,
    /// Synthetic source, e.g. "classes=10,per_class=400,height=32,width=32,test_per_class=100".
    #[arg(long)]
    synth: Option<String>,
    /// Imbalance factor (most frequent count / least frequent count).
    #[arg(long)]
    imbalance: f64,
    #[arg(long)]
    seed: u64,
    /// Output path for the long-tailed split; the held-out pool, test set
    /// (synthetic only), and manifest land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Cap the head-class count below the balanced per-class count so head
    /// classes also leave held-out samples.
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Class count of the input file (required with --input).
    #[arg(long)]
    classes: Option<usize>,
    /// Partition scheme: threshold (any class count) or cifar-lt (100).
    #[arg(long, default_value = "threshold")]
    partition_scheme: String,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, repeatable: --set method=bcl-d --set model.prune_ratio=0.9
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fixed-order mode: wallclock columns zeroed so metric files hash
    /// identically across reruns.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Run directory holding config.resolved.json and ckpt-final.bin.
    #[arg(long)]
    run: PathBuf,
    /// "full" or a per-class shot count; defaults to the config value.
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    probe_epochs: Option<usize>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    /// Large-loss threshold ratio.
    #[arg(long, default_value_t = 0.1)]
    r: f64,
    /// Output CSV path (default: <run>/tail-diagnosis.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted config path to sweep, or "component" for forced-op rows.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values.
    #[arg(long)]
    values: String,
    /// Directory receiving one subdirectory per cell plus the summary.
    #[arg(long)]
    out_root: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// Parse argv and run; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::MakeLt(a) => make_lt(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Probe(a) => probe(a),
        Cmd::DiagnoseTail(a) => diagnose(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::InspectCkpt(a) => inspect(a),
    }
}

/// Root relative paths under BCL_OUT_DIR when the variable is set.
fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_relative() {
        if let Ok(root) = std::env::var("BCL_OUT_DIR") {
            if !root.is_empty() {
                return PathBuf::from(root).join(dir);
            }
        }
    }
    dir.to_path_buf()
}

fn parse_scheme(s: &str) -> Result<PartitionScheme> {
    match s {
        "threshold" => Ok(PartitionScheme::Threshold),
        "cifar-lt" => Ok(PartitionScheme::CifarLt),
        other => Err(Error::InvalidArgument(format!(
            "unknown partition scheme {other:?} (threshold | cifar-lt)"
        ))),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.{suffix}"))
}

struct SynthSpec {
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    test_per_class: usize,
}

fn parse_synth(spec: &str) -> Result<SynthSpec> {
    let mut out = SynthSpec {
        classes: 10,
        per_class: 400,
        height: 32,
        width: 32,
        test_per_class: 0,
    };
    for pair in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad synth field {pair:?}")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad synth value {pair:?}")))?;
        match k.trim() {
            "classes" => out.classes = v,
            "per_class" => out.per_class = v,
            "height" => out.height = v,
            "width" => out.width = v,
            "test_per_class" => out.test_per_class = v,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown synth field {other:?}"
                )))
            }
        }
    }
    if out.classes == 0 || out.classes > 256 || out.per_class == 0 {
        return Err(Error::InvalidArgument("empty synthetic dataset".into()));
    }
    Ok(out)
}

fn make_lt(a: MakeLtArgs) -> Result<()> {
    let scheme = parse_scheme(&a.partition_scheme)?;
    let (balanced, test) = match (&a.input, &a.synth) {
        (Some(path), None) => {
            let classes = a.classes.ok_or_else(|| {
                Error::InvalidArgument("--classes is required with --input".into())
            })?;
            let geometry = Geometry {
                height: a.height,
                width: a.width,
                classes,
            };
            (dataio::load_dataset(path, geometry)?, None)
        }
        (None, Some(spec)) => {
            let s = parse_synth(spec)?;
            let balanced = dataio::synth_balanced(s.classes, s.per_class, s.height, s.width, a.seed);
            let test = (s.test_per_class > 0).then(|| {
                dataio::synth_balanced(
                    s.classes,
                    s.test_per_class,
                    s.height,
                    s.width,
                    a.seed ^ 0x7e57_da7a,
                )
            });
            (balanced, test)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --input or --synth is required".into(),
            ))
        }
    };

    let (mut lt, holdout) = dataio::make_long_tailed(&balanced, a.imbalance, a.seed, a.n_max)?;
    lt.set_partitions(scheme)?;
    dataio::save_dataset(&a.out, &lt)?;
    let holdout_path = sibling(&a.out, "holdout.bin");
    dataio::save_dataset(&holdout_path, &holdout)?;
    let manifest_path = sibling(&a.out, "manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&DatasetManifest::of(&lt, a.seed))?,
    )?;
    let mut msg = format!(
        "wrote {} ({} samples, counts {:?})\nheld-out pool {} ({} samples)\nmanifest {}",
        a.out.display(),
        lt.len(),
        lt.class_counts,
        holdout_path.display(),
        holdout.len(),
        manifest_path.display(),
    );
    if let Some(test) = test {
        let test_path = sibling(&a.out, "test.bin");
        dataio::save_dataset(&test_path, &test)?;
        msg.push_str(&format!(
            "\ntest set {} ({} samples)",
            test_path.display(),
            test.len()
        ));
    }
    println!("{msg}");
    Ok(())
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("--set expects KEY=VALUE, got {s:?}"))
                })
        })
        .collect()
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore failure when a pool already exists for this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn snapshot(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.resolved.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let overrides = parse_overrides(&a.set)?;
    let mut cfg = trainer::load_config(&a.config, &overrides)?;
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    cfg.out_dir = resolve_out_dir(&cfg.out_dir);
    if a.deterministic {
        cfg.deterministic = true;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    init_threads(cfg.threads);
    snapshot(&cfg)?;
    let state = match &a.resume {
        Some(ckpt) => trainer::resume(&cfg, ckpt)?,
        None => trainer::pretrain(&cfg)?,
    };
    let last = state.metrics.last().expect("at least one epoch");
    println!(
        "{} finished: epoch {} loss {:.4} phi_tail_ml {:.3} -> {}",
        cfg.method.name(),
        last.epoch,
        last.loss_mean,
        last.phi_tail_ml,
        cfg.out_dir.display()
    );
    println!(
        "metrics hash {}",
        trainer::file_hash(&cfg.out_dir.join("metrics.csv"))?
    );
    Ok(())
}

fn load_run_config(run: &Path) -> Result<ExperimentConfig> {
    let path = run.join("config.resolved.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve()
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = load_run_config(&a.run)?;
    let shots = match &a.shots {
        Some(s) => Some(s.parse::<Shots>()?),
        None => None,
    };
    let seed = a.seed.unwrap_or(cfg.seed);
    let report = trainer::probe_run(&cfg, &a.run, shots, seed, a.probe_epochs)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let cfg = load_run_config(&a.run)?;
    let csv = trainer::diagnose_tail(&cfg, &a.run, a.r)?;
    let out = a.out.unwrap_or_else(|| a.run.join("tail-diagnosis.csv"));
    std::fs::write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let mut base: serde_json::Value = serde_json::from_str(&text)?;
    for (k, v) in parse_overrides(&a.set)? {
        trainer::set_dotted(&mut base, &k, trainer::parse_override(&v))?;
    }
    let values: Vec<String> = a
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let out_root = resolve_out_dir(&a.out_root.unwrap_or_else(|| {
        PathBuf::from(format!("ablate-{}", a.axis.replace('.', "-")))
    }));
    let report = trainer::run_ablation(base, &a.axis, &values, &out_root)?;
    println!(
        "{} cells -> {} (best {} = {})",
        report.rows.len(),
        out_root.display(),
        report.axis,
        report.best_value
    );
    for row in &report.rows {
        println!(
            "  {} = {:>12}: overall {:.4} few {} std {:.4}",
            row.axis,
            row.value,
            row.overall,
            row.few.map(|f| format!("{f:.4}")).unwrap_or_default(),
            row.std
        );
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = ckpt.manifest();
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    println!("total elements: {total}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_spec_parses() {
        let s = parse_synth("classes=4,per_class=20,height=8,width=8,test_per_class=5").unwrap();
        assert_eq!((s.classes, s.per_class), (4, 20));
        assert_eq!((s.height, s.width, s.test_per_class), (8, 8, 5));
        assert!(parse_synth("classes=0").is_err());
        assert!(parse_synth("bogus=1").is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(["bcl", "frobnicate"]), 1);
        assert_eq!(dispatch(["bcl", "--help"]), 0);
    }

    #[test]
    fn override_must_be_key_value() {
        assert!(parse_overrides(&["method=bcl-i".into()]).is_ok());
        assert!(parse_overrides(&["methodbcl-i".into()]).is_err());
    }
}
