use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use are_core::alignment::align_per_user;
use are_core::data::{generate_synthetic, load_trialset, save_trialset_with, Manifest, SynthSpec, TrialSet};
use are_core::eval::{read_reports, render_report, run_methods, Method, ReportFormat, Scenario, ScenarioConfig};
use are_core::federated::{federated_pretrain, FedConfig};
use are_core::model::{save_checkpoint, Checkpoint, ModelConfig};
use are_core::privacy::{apply_perturbations, generate_user_perturbations, PerturbConfig};
use are_core::training::{train_model, Start, TrainConfig};

#[derive(Parser)]
#[command(name = "are", version, about = "Robust, privacy-aware EEG decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-user recording.
    Datagen {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// JSON generator spec; overrides --preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write this user's trials to --target-out instead of --out.
        #[arg(long, requires = "target_out")]
        target_user: Option<u16>,
        #[arg(long)]
        target_out: Option<PathBuf>,
    },
    /// Train a source model on per-user aligned source trials.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        federated: bool,
        /// JSON TrainConfig (centralized) or FedConfig (federated).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Align the source set per user and add user-wise perturbations.
    Perturb {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = are_core::privacy::DEFAULT_RHO)]
        rho: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full scenario and write its reports.
    Run {
        /// JSON ScenarioConfig; the desk benchmark when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated method list.
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
        format: Vec<String>,
        #[arg(long, env = "ARE_WORKERS", default_value_t = 1)]
        workers: usize,
    },
    /// Re-render saved JSON reports.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_format(s: &str) -> Result<ReportFormat> {
    match ReportFormat::parse(s) {
        Some(f) => Ok(f),
        None => bail!("unknown report format '{s}' (json, csv, markdown)"),
    }
}

fn datagen(
    preset: &str,
    spec: Option<&Path>,
    seed: u64,
    out: &Path,
    target: Option<(u16, &Path)>,
) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => read_json(p)?,
        None => match SynthSpec::preset(preset, seed) {
            Some(s) => s,
            None => bail!("unknown preset '{preset}' (desk, bnci-like)"),
        },
    };
    let all = generate_synthetic(&spec)?;
    let manifest = |name: &str| Manifest {
        generator_spec: Some(spec.clone()),
        ..Manifest::new(name)
    };
    match target {
        None => save_trialset_with(&all, out, manifest(all.name()))?,
        Some((u, target_out)) => {
            let (t, s): (Vec<_>, Vec<_>) = all.trials().iter().cloned().partition(|tr| tr.user == u);
            if t.is_empty() {
                bail!("user {u} is not part of the generated recording");
            }
            save_trialset_with(&all.derive("source", s)?, out, manifest("source"))?;
            save_trialset_with(&all.derive("target", t)?, target_out, manifest("target"))?;
        }
    }
    log::info!("wrote {} trials", all.len());
    Ok(())
}

fn pretrain(
    source: &Path,
    out: &Path,
    federated: bool,
    config: Option<&Path>,
    epochs: Option<usize>,
    rounds: Option<usize>,
    seed: u64,
) -> Result<()> {
    let src = align_per_user(&load_trialset(source)?)?;
    let mc = ModelConfig::desk(src.n_channels(), src.n_timepoints(), src.n_classes());
    let log_path = out.with_extension("log.json");
    let (model, log) = if federated {
        let mut fc: FedConfig = match config {
            Some(p) => read_json(p)?,
            None => FedConfig::new(seed),
        };
        if let Some(r) = rounds {
            fc.rounds = r;
        }
        if let Some(e) = epochs {
            fc.local_epochs = e;
        }
        let o = federated_pretrain(&src, &mc, &fc, None)?;
        (o.model, serde_json::to_string_pretty(&o.log)?)
    } else {
        let mut tc: TrainConfig = match config {
            Some(p) => read_json(p)?,
            None => TrainConfig::new(seed),
        };
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        let o = train_model(Start::Fresh(&mc), &src, &tc, None)?;
        (o.model, serde_json::to_string_pretty(&o.log)?)
    };
    save_checkpoint(&Checkpoint::new(model.config, model.params), out)?;
    std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    Ok(())
}

fn perturb(source: &Path, out: &Path, rho: f32, seed: u64) -> Result<()> {
    let src: TrialSet = align_per_user(&load_trialset(source)?)?;
    let cfg = PerturbConfig {
        rho,
        ..PerturbConfig::new(seed)
    };
    let p = generate_user_perturbations(&src, &cfg)?;
    let perturbed = apply_perturbations(&src, &p)?;
    let manifest = Manifest {
        perturbed: Some(true),
        rho: Some(rho),
        ..Manifest::new(perturbed.name())
    };
    save_trialset_with(&perturbed, out, manifest)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: Option<&Path>,
    scenario: Option<&str>,
    methods: &[String],
    fractions: &[f64],
    repeats: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    formats: &[String],
    workers: usize,
) -> Result<()> {
    let scenario = match scenario {
        Some(s) => Some(Scenario::parse(s).with_context(|| format!("unknown scenario '{s}'"))?),
        None => None,
    };
    let mut cfg: ScenarioConfig = match config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::desk(
            scenario.unwrap_or(Scenario::CentralizedSourceFree),
            Method::Are,
            seed.unwrap_or(0),
        ),
    };
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if !fractions.is_empty() {
        cfg.calibration_fractions = fractions.to_vec();
    }
    if let Some(r) = repeats {
        cfg.repeats = r;
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let methods: Vec<Method> = if methods.is_empty() {
        vec![cfg.method]
    } else {
        methods
            .iter()
            .map(|m| Method::parse(m).with_context(|| format!("unknown method '{m}'")))
            .collect::<Result<_>>()?
    };
    let formats = formats.iter().map(|f| parse_format(f)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let reports = run_methods(&cfg, &methods, workers.max(1))?;
    for r in &reports {
        for &f in &formats {
            let path = out.join(format!("{}_{}.{}", r.scenario.as_str(), r.method.as_str(), f.extension()));
            render_report(std::slice::from_ref(r), f, &path)?;
        }
        if let Some(m) = r.overall().means {
            println!(
                "{} {}: benign {:.2} adversarial {:.2} noisy {:.2} avg {:.2}",
                r.scenario.as_str(),
                r.method.as_str(),
                m.benign,
                m.adversarial,
                m.noisy,
                m.avg
            );
        }
    }
    Ok(())
}

fn report(inputs: &[PathBuf], format: &str, out: Option<&Path>) -> Result<()> {
    let f = parse_format(format)?;
    let mut all = Vec::new();
    for p in inputs {
        all.extend(read_reports(p)?);
    }
    match out {
        Some(path) => render_report(&all, f, path)?,
        None => {
            for r in &all {
                println!("{}", r.render(f)?);
            }
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            preset,
            spec,
            seed,
            out,
            target_user,
            target_out,
        } => datagen(
            &preset,
            spec.as_deref(),
            seed,
            &out,
            target_user.zip(target_out.as_deref()),
        ),
        Command::Pretrain {
            source,
            out,
            federated,
            config,
            epochs,
            rounds,
            seed,
        } => pretrain(&source, &out, federated, config.as_deref(), epochs, rounds, seed),
        Command::Perturb { source, out, rho, seed } => perturb(&source, &out, rho, seed),
        Command::Run {
            config,
            scenario,
            method,
            fractions,
            repeats,
            seed,
            out,
            format,
            workers,
        } => run(
            config.as_deref(),
            scenario.as_deref(),
            &method,
            &fractions,
            repeats,
            seed,
            &out,
            &format,
            workers,
        ),
        Command::Report { inputs, format, out } => report(&inputs, &format, out.as_deref()),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<are_core::Error>().map(|e| e.kind()))
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
