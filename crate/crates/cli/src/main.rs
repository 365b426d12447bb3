mod exit;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mriseq::config::RunConfig;
use mriseq::ingestion::{
    build_manifest, detect_conflicts, read_label_sidecar, read_manifest, write_manifest, ConflictRules, LabelSet,
    LabelSource, RuleTable, MANIFEST_FILE,
};
use mriseq::phantom::{generate_dataset, PhantomSpec};
use mriseq::pipeline::{
    audit_studies, default_label_source, evaluate_run, load_checkpoints, predict_file, render_report, run_checkpoints,
    train_run, write_report,
};

use exit::BadInput;

#[derive(Parser)]
#[command(name = "mriseq", version, about = "MRI sequence classification from voxel data")]
struct Cli {
    /// Only print errors and the command's result.
    #[arg(long, global = true)]
    quiet: bool,
    /// Machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// Parallel folds or series; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset root and write a manifest.
    Ingest {
        root: PathBuf,
        /// Manifest path (default: <root>/manifest.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rule table (TOML or JSON) used to label series from headers.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Label sidecar (JSON lines of series_uid/label) instead of rules.
        #[arg(long, conflicts_with = "rules")]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "body")]
        label_set: String,
    },
    /// Generate a synthetic phantom dataset.
    Synth {
        out: PathBuf,
        /// Phantom spec (TOML or JSON); defaults to the built-in profile.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        patients: usize,
        #[arg(long, default_value_t = 1)]
        studies: usize,
        /// Fraction of studies given a deliberate header conflict.
        #[arg(long, default_value_t = 0.0)]
        conflicts: f64,
        /// Render most low-b DWI volumes with the T2FS signature.
        #[arg(long)]
        hard: bool,
        #[arg(long, default_value = "body")]
        label_set: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a run config template.
    Config {
        #[arg(long, default_value = "micro-densenet")]
        preset: String,
        #[arg(long, default_value = "body")]
        label_set: String,
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Cross-validated training from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify one NIfTI volume with one or more checkpoints.
    Predict {
        volume: PathBuf,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Use every fold checkpoint of a run directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Recompute metrics of a finished run.
    Evaluate { run_dir: PathBuf },
    /// Compare image predictions with header-derived labels.
    Audit {
        manifest: PathBuf,
        /// Dataset root the manifest paths are relative to (default: its directory).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Write the summary table (and plots) of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        plots: bool,
    },
}

fn label_set(s: &str) -> Result<LabelSet> {
    LabelSet::parse(s).ok_or_else(|| BadInput(format!("unknown label set '{s}' (expected body or brain)")).into())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_phantom_spec(path: &Path) -> Result<PhantomSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| BadInput(format!("{}: {e}", path.display())).into())
}

fn checkpoint_paths(explicit: Vec<PathBuf>, run: Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut paths = explicit;
    if let Some(r) = run {
        paths.extend(run_checkpoints(&r)?);
    }
    if paths.is_empty() {
        return Err(BadInput("give --checkpoint or --run".into()).into());
    }
    Ok(paths)
}

#[derive(Serialize)]
struct IngestSummary {
    manifest: PathBuf,
    studies: usize,
    series: usize,
    incomplete_studies: usize,
    studies_with_conflicts: usize,
    rejected_series: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            root,
            out,
            rules,
            labels,
            label_set: ls,
        } => {
            let ls = label_set(&ls)?;
            if !root.is_dir() {
                return Err(BadInput(format!("{} is not a directory", root.display())).into());
            }
            let source = match (rules, labels) {
                (Some(r), _) => LabelSource::Rules(RuleTable::load(&r)?),
                (_, Some(l)) => LabelSource::Sidecar {
                    label_set: ls,
                    labels: read_label_sidecar(&l, ls)?,
                },
                _ => default_label_source(&root, ls)?,
            };
            let studies = build_manifest(&root, &source)?;
            let out = out.unwrap_or_else(|| root.join(MANIFEST_FILE));
            write_manifest(&out, &studies).with_context(|| format!("cannot write {}", out.display()))?;
            let conflict_rules = ConflictRules::default_for(RuleTable::default_for(ls));
            let summary = IngestSummary {
                manifest: out,
                studies: studies.len(),
                series: studies.iter().map(|s| s.series.len()).sum(),
                incomplete_studies: studies.iter().filter(|s| s.incomplete).count(),
                studies_with_conflicts: studies.iter().filter(|s| !detect_conflicts(s, &conflict_rules).passes()).count(),
                rejected_series: studies.iter().map(|s| s.rejected.len()).sum(),
            };
            if cli.json {
                print_json(&summary)?;
            } else if !cli.quiet {
                println!(
                    "{} studies ({} series) -> {}\nincomplete studies: {}\nstudies with header findings: {}\nrejected series: {}",
                    summary.studies,
                    summary.series,
                    summary.manifest.display(),
                    summary.incomplete_studies,
                    summary.studies_with_conflicts,
                    summary.rejected_series
                );
            }
        }
        Command::Synth {
            out,
            spec,
            patients,
            studies,
            conflicts,
            hard,
            label_set: ls,
            seed,
        } => {
            let ls = label_set(&ls)?;
            let mut spec = match spec {
                Some(p) => load_phantom_spec(&p)?,
                None => match (ls, hard) {
                    (LabelSet::Body, false) => PhantomSpec::default_body(0),
                    (LabelSet::Body, true) => PhantomSpec::hard_body(0),
                    (LabelSet::Brain, false) => PhantomSpec::default_brain(0),
                    (LabelSet::Brain, true) => return Err(BadInput("--hard is defined for the body profile".into()).into()),
                },
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = generate_dataset(&spec, &out, patients, studies, conflicts)?;
            if cli.json {
                print_json(&ds.card)?;
            } else if !cli.quiet {
                println!(
                    "{} studies, {} series written to {} (seed {}, {} seeded conflicts)",
                    ds.studies.len(),
                    ds.card.n_series,
                    out.display(),
                    spec.seed,
                    ds.card.conflict_studies.len()
                );
            }
        }
        Command::Config { preset, label_set: ls, run_id } => {
            let cfg = RunConfig::template(&run_id, label_set(&ls)?, &preset)?;
            print!("{}", cfg.to_toml_string());
        }
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.override_seed(s);
            }
            let run = train_run(&cfg, cli.jobs)?;
            if cli.json {
                print_json(&run.result.ensemble)?;
            } else if !cli.quiet {
                let ev = evaluate_run(&run.run_dir)?;
                print!("{}", render_report(&ev));
                println!("\nartifacts: {}", run.run_dir.display());
            }
        }
        Command::Predict { volume, checkpoints, run } => {
            let cks = load_checkpoints(&checkpoint_paths(checkpoints, run)?)?;
            print_json(&predict_file(&cks, &volume)?)?;
        }
        Command::Evaluate { run_dir } => {
            let ev = evaluate_run(&run_dir)?;
            if cli.json {
                print_json(&ev)?;
            } else {
                print!("{}", render_report(&ev));
            }
        }
        Command::Audit {
            manifest,
            root,
            checkpoints,
            run,
            rules,
        } => {
            let cks = load_checkpoints(&checkpoint_paths(checkpoints, run)?)?;
            let studies = read_manifest(&manifest)?;
            let root = root.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
            let rules = match rules {
                Some(p) => RuleTable::load(&p)?,
                None => RuleTable::default_for(cks[0].1.label_set),
            };
            let report = audit_studies(&root, &studies, &cks, &rules)?;
            if cli.json {
                print_json(&report)?;
            } else {
                println!(
                    "agree: {}\ndisagree: {}\nheader unknown: {}",
                    report.agree, report.disagree, report.header_unknown
                );
                for d in &report.disagreements {
                    println!("  {}: header {} / image {}", d.series_uid, d.header.as_deref().unwrap_or("?"), d.predicted);
                }
            }
        }
        Command::Report { run_dir, plots } => {
            let (ev, written) = write_report(&run_dir, plots)?;
            if cli.json {
                print_json(&written)?;
            } else {
                print!("{}", render_report(&ev));
                if !cli.quiet {
                    for w in written {
                        eprintln!("wrote {}", w.display());
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
