use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use orientpose::exec::Exec;
use orientpose::perturb::{OcclusionSpec, PerturbKind};
use orientpose::skeleton::LimbTopology;
use orientpose::synthdata::{generate, read_dataset, write_dataset};
use orientpose::train::{self, EpochStats, ExperimentConfig, RunDir};

#[derive(Parser)]
#[command(name = "orientpose", version, about = "Orientation-map pose estimation on synthetic figures")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as TOML.
    InitConfig,
    /// Render a training set to a dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train step 1 (FCNN) or step 2 (fine-tuning plus complement network).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate the newest checkpoint in a run under one or more perturbations.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// none, occl, transNN, rect, circle, edge or bbox:SC,SS. Repeatable.
        #[arg(long, default_value = "none", value_parser = parse_perturb)]
        perturb: Vec<PerturbKind>,
    },
    /// Evaluate every configured condition and the box-noise grid.
    Sweep {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write image, predicted and target confidence panels for samples.
    RenderMaps {
        #[arg(long)]
        out: PathBuf,
        /// Read samples from a dataset file instead of the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Predict with the newest checkpoint of this run.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn parse_perturb(s: &str) -> Result<PerturbKind, String> {
    let lower = s.to_ascii_lowercase();
    Ok(match lower.as_str() {
        "none" | "clean" => PerturbKind::None,
        "occl" | "occlude" => PerturbKind::Occlude(OcclusionSpec::default()),
        "rect" => PerturbKind::EraseRect,
        "circle" => PerturbKind::EraseCircle,
        "edge" => PerturbKind::EraseEdge,
        _ => {
            if let Some(pct) = lower.strip_prefix("trans") {
                let tau: f64 = pct.parse().map_err(|_| format!("bad translation `{s}`"))?;
                PerturbKind::Translate { tau: tau / 100.0 }
            } else if let Some(rest) = lower.strip_prefix("bbox:") {
                let (c, z) = rest.split_once(',').ok_or_else(|| format!("expected bbox:SC,SS, got `{s}`"))?;
                let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad number in `{s}`"));
                PerturbKind::BboxNoise { sigma_c: num(c)?, sigma_s: num(z)? }
            } else {
                return Err(format!("unknown perturbation `{s}`"));
            }
        }
    })
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_epoch(e: &EpochStats) {
    eprintln!(
        "epoch {:>4}  lr {:.1e}  loss {:>10.4}  train mpjpe {:>8.2}",
        e.epoch, e.lr, e.loss, e.train_mpjpe
    );
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Auto };
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::InitConfig => print!("{}", cfg.to_toml()),
        Command::GenData { out, count, seed } => {
            cfg.data.count = count.unwrap_or(cfg.data.count);
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            let samples = generate(&cfg.data, exec)?;
            write_dataset(&samples, &cfg.data.scene, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { step, run, epochs } => {
            let run = RunDir::create(&run)?;
            let log = if step == 1 {
                cfg.step1.epochs = epochs.unwrap_or(cfg.step1.epochs);
                train::run_step1(&cfg, &run, exec, print_epoch)?
            } else {
                cfg.step2.epochs = epochs.unwrap_or(cfg.step2.epochs);
                train::run_step2(&cfg, &run, exec, print_epoch)?
            };
            for (epoch, lr) in &log.lr_events {
                eprintln!("learning rate set to {lr:e} at epoch {epoch}");
            }
        }
        Command::Eval { run, perturb } => {
            let rows = train::run_eval(&cfg, &RunDir::create(&run)?, &perturb, "eval", exec)?;
            print_rows(&rows);
        }
        Command::Sweep { run } => {
            let kinds = train::sweep_conditions(&cfg.eval);
            let rows = train::run_eval(&cfg, &RunDir::create(&run)?, &kinds, "sweep", exec)?;
            print_rows(&rows);
        }
        Command::RenderMaps { out, dataset, run, count } => {
            let samples = match dataset {
                Some(p) => read_dataset(&p)?.1,
                None => {
                    cfg.data.count = count;
                    generate(&cfg.data, exec)?
                }
            };
            let model = run.map(|r| RunDir::create(&r).and_then(|r| train::latest_model(&r))).transpose()?;
            std::fs::create_dir_all(&out)?;
            let topo = LimbTopology::canonical();
            for (i, s) in samples.iter().take(count).enumerate() {
                let target = s.maps(&topo, &cfg.data.scene.map)?;
                let pred = match &model {
                    Some((fcnn, pc)) => train::predict(fcnn, pc, &cfg.fcnn, &s.image)?.maps,
                    None => target.clone(),
                };
                let path = out.join(format!("sample_{i:03}.png"));
                train::overlay(&s.image, &pred, &target).save(&path)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn print_rows(rows: &[train::SweepRow]) {
    let before: Vec<_> = rows.iter().map(|r| r.before.clone()).collect();
    let after: Vec<_> = rows.iter().map(|r| r.after.clone()).collect();
    println!("before complementation");
    print!("{}", orientpose::metrics::format_table(&before));
    println!("after complementation");
    print!("{}", orientpose::metrics::format_table(&after));
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
