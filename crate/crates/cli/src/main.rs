use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use marginforge_core::attack::{evaluate_attack, write_attack_csv, AttackConfig, AttackKind};
use marginforge_core::data::load_idx_dir;
use marginforge_core::harness::{
    emit_adversarial, emit_report, emit_sweep, prepare_splits, run_adversarial, sweep_generalization, sweep_noise, train,
};
use marginforge_core::margin::{mean_layer_distances, LayerSet, NormExponent};
use marginforge_core::{Error, ExperimentConfig, Model, Task};

const SEED_ENV: &str = "MARGINFORGE_SEED";

#[derive(Parser)]
#[command(name = "marginforge", version, about = "Large-margin deep network training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a noise, data-fraction or adversarial sweep.
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-layer mean linearized distances of a checkpoint on a dataset.
    Distances {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding an IDX image/label pair.
        #[arg(long)]
        data: PathBuf,
        /// `all`, `input`, `output` or a comma-separated list of layer indices.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value = "2")]
        norm: String,
        /// Only use the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Attack `target` with examples crafted on `source` and print accuracies.
    Attack {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Comma-separated attack strengths.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        /// Directory holding an IDX image/label pair.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ifgsm")]
        kind: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Clamp perturbed pixels to [0, 1].
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        limit: Option<usize>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Noise,
    Data,
    Attack,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Diverged { .. } | Error::NonFiniteGradient { .. }) => 3,
        Some(Error::Io { .. } | Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } | Error::Format { .. }) => 4,
        _ => 2,
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            if !matches!(cfg.task, Task::Plain | Task::AdvTrain { .. }) {
                bail!(Error::Config("`train` runs plain and adv_train tasks; use `sweep` for the others".into()));
            }
            let splits = prepare_splits(&cfg.data)?;
            let mut report = match train(&cfg, &splits) {
                Ok(r) => r,
                Err(e) => return Err(save_last_good(e, &out)),
            };
            emit_report(&mut report, &out)?;
            println!(
                "best step {} validation {} test {}",
                report.best_step,
                fmt_opt(report.best_validation_accuracy),
                fmt_opt(report.test_accuracy)
            );
        }
        Command::Sweep { kind, config, out } => {
            let cfg = load_config(&config)?;
            let splits = prepare_splits(&cfg.data)?;
            match (kind, &cfg.task) {
                (SweepKind::Noise, Task::Noisy { fractions, seeds }) => {
                    let mut runs = sweep_noise(&cfg, &splits, fractions, seeds).map_err(|e| save_last_good(e, &out))?;
                    emit_sweep(&mut runs, &out)?;
                }
                (SweepKind::Data, Task::Generalization { fractions, seeds }) => {
                    let mut runs = sweep_generalization(&cfg, &splits, fractions, seeds).map_err(|e| save_last_good(e, &out))?;
                    emit_sweep(&mut runs, &out)?;
                }
                (SweepKind::Attack, Task::Adversarial { .. }) => {
                    let mut outcome = run_adversarial(&cfg, &splits).map_err(|e| save_last_good(e, &out))?;
                    emit_adversarial(&mut outcome, &out)?;
                }
                _ => bail!(Error::Config(format!(
                    "sweep kind does not match the config task ({})",
                    task_name(&cfg.task)
                ))),
            }
            println!("sweep written to {}", out.display());
        }
        Command::Distances {
            checkpoint,
            data,
            layers,
            norm,
            limit,
        } => {
            let model = Model::load(&checkpoint)?;
            let mut ds = load_idx_dir(&data)?;
            if let Some(n) = limit {
                ds = ds.head(n)?;
            }
            let layers = layers.parse::<LayerSet>()?.resolve(model.n_captured())?;
            let p: NormExponent = norm.parse()?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            writeln!(out, "layer,mean_distance")?;
            for (layer, d) in mean_layer_distances(&model, &ds, &layers, p, 1e-6)? {
                writeln!(out, "{layer},{d}")?;
            }
        }
        Command::Attack {
            source,
            target,
            eps,
            data,
            kind,
            alpha,
            iters,
            clamp,
            limit,
            out,
        } => {
            let src = Model::load(&source)?;
            let tgt = Model::load(&target)?;
            let mut ds = load_idx_dir(&data)?;
            if let Some(n) = limit {
                ds = ds.head(n)?;
            }
            let kind: AttackKind = kind.parse()?;
            let config = AttackConfig {
                kind,
                alpha,
                iters,
                pixel_bounds: clamp.then_some([0.0, 1.0]),
                ..AttackConfig::fgsm(0.0)
            };
            let name = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let result = evaluate_attack((&name(&source), &src), (&name(&target), &tgt), &ds, &config, &eps)?;
            match out {
                Some(path) => {
                    let mut buf = Vec::new();
                    write_attack_csv(&mut buf, &result.rows, true)?;
                    std::fs::write(&path, buf).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                }
                None => write_attack_csv(&mut std::io::stdout().lock(), &result.rows, true)?,
            }
        }
    }
    Ok(())
}

/// Persists the last finite model of a diverged run next to the outputs.
fn save_last_good(e: Error, out: &Path) -> anyhow::Error {
    if let Error::Diverged { last_good: Some(model), .. } = &e {
        let path = out.join("last_good.ckpt");
        if std::fs::create_dir_all(out).is_ok() && model.save(&path).is_ok() {
            eprintln!("last good checkpoint written to {}", path.display());
        }
    }
    e.into()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn task_name(t: &Task) -> &'static str {
    match t {
        Task::Plain => "plain",
        Task::Noisy { .. } => "noisy",
        Task::Generalization { .. } => "generalization",
        Task::Adversarial { .. } => "adversarial",
        Task::AdvTrain { .. } => "adv_train",
    }
}
