//! Command-line front end: volume generation, training, evaluation, the
//! penalty sweep, finite-difference verification, and shape-plan printing.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use tverseg::data::{generate_subject, read_volume, write_volume, SynthConfig};
use tverseg::error::{Error, Result};
use tverseg::gradcheck::{check_layer_primitives, check_loss_gradients, check_whole_net};
use tverseg::harness::{
    default_pairs, evaluate_fold, evaluation_report, mix_seed, run_dataset, run_sweep,
    train_fold, write_sweep_outputs, TrainConfig,
};
use tverseg::metrics::pr_curve_to_csv;
use tverseg::unet::{
    full_scale_config, load_checkpoint, plan_shapes, save_checkpoint, verify_full_scale,
    NetConfig, Network,
};

#[derive(Parser)]
#[command(
    name = "tverseg",
    version,
    about = "Tversky-loss 3D U-net on synthetic imbalanced volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic TVOL1 volumes.
    Gen {
        /// SynthConfig as JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects to emit.
        #[arg(long)]
        subjects: usize,
    },
    /// Run a single training run on one fold and write a checkpoint.
    Train {
        /// TrainConfig as JSON.
        #[arg(long)]
        config: PathBuf,
        /// Which fold to train on: a or b (the other fold is held out).
        #[arg(long)]
        fold: String,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Run seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a directory of TVOL1 volumes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory containing .tvol files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Report JSON output path; per-subject PR CSVs go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate both folds for each penalty pair and seed.
    Sweep {
        /// TrainConfig as JSON.
        #[arg(long)]
        config: PathBuf,
        /// Penalty pairs as alpha:beta,alpha:beta,... (default: the
        /// standard five-pair grid).
        #[arg(long)]
        pairs: Option<String>,
        /// Seeds as comma-separated integers (default: the configured list).
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory for table.csv, report.json, PR CSVs, checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Also render pr.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Run the finite-difference verification suites; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Number of random loss-gradient instances.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Print a layer-by-layer shape plan.
    Shapes {
        /// Use the full-size configuration (128x224x256, 3 channels,
        /// 16 base features, 4 levels) and verify it against the reference
        /// table.
        #[arg(long)]
        paper: bool,
        /// NetConfig as JSON (alternative to --paper).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_pairs(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|chunk| {
            let (a, b) = chunk.trim().split_once(':').ok_or_else(|| {
                Error::config(format!("pair {chunk:?} is not alpha:beta"))
            })?;
            let alpha: f64 = a
                .parse()
                .map_err(|_| Error::config(format!("bad alpha in {chunk:?}")))?;
            let beta: f64 = b
                .parse()
                .map_err(|_| Error::config(format!("bad beta in {chunk:?}")))?;
            Ok((alpha, beta))
        })
        .collect()
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|chunk| {
            chunk
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad seed {chunk:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            out,
            subjects,
        } => {
            let synth: SynthConfig = load_json(&config)?;
            synth.validate()?;
            std::fs::create_dir_all(&out)?;
            for i in 0..subjects {
                let vol = generate_subject(&synth, i)?;
                let path = out.join(format!("{}.tvol", vol.subject_id));
                write_volume(&path, &vol)?;
                println!(
                    "wrote {} (foreground fraction {:.5})",
                    path.display(),
                    vol.foreground_fraction()
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            fold,
            out,
            seed,
        } => {
            let train_config: TrainConfig = load_json(&config)?;
            train_config.validate()?;
            let run_seed = seed.unwrap_or(train_config.seeds[0]);
            let (fold_a, fold_b) = run_dataset(&train_config, run_seed)?;
            let (train_subjects, net_tag) = match fold.as_str() {
                "a" => (&fold_a, 3u64),
                "b" => (&fold_b, 4u64),
                other => {
                    return Err(Error::config(format!(
                        "fold must be 'a' or 'b', got {other:?}"
                    )))
                }
            };
            let net_seed = mix_seed(train_config.net.seed, run_seed, net_tag);
            let outcome = train_fold(train_subjects, &train_config, net_seed)?;
            save_checkpoint(&out, &outcome.net_config, &outcome.params)?;
            println!(
                "trained fold {fold} ({} subjects, {} epochs): loss {:.6} -> {:.6}",
                train_subjects.len(),
                train_config.epochs,
                outcome.loss_history.first().unwrap(),
                outcome.loss_history.last().unwrap()
            );
            println!("checkpoint: {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            threshold,
            out,
        } => {
            let (net_config, params) = load_checkpoint(&ckpt)?;
            let net = Network::from_parts(&net_config, params)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&data)?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "tvol"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::config(format!(
                    "no .tvol volumes in {}",
                    data.display()
                )));
            }
            let subjects: Vec<_> = paths
                .iter()
                .map(|p| read_volume(p))
                .collect::<Result<_>>()?;
            let evals = evaluate_fold(&net, &subjects, threshold)?;
            let report = evaluation_report(&evals, threshold)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            let csv_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            for eval in &evals {
                let path = csv_dir.join(format!("pr_{}.csv", eval.metrics.subject_id));
                std::fs::write(&path, pr_curve_to_csv(&eval.curve))?;
            }
            println!(
                "evaluated {} subjects at threshold {threshold}: macro DSC {:.2}%, \
                 sensitivity {:.2}%, specificity {:.2}%, F2 {:.2}%, APR {:.2}%",
                evals.len(),
                report.macro_pct.dsc,
                report.macro_pct.sensitivity,
                report.macro_pct.specificity,
                report.macro_pct.f2,
                report.macro_pct.apr
            );
            println!("report: {}", out.display());
            Ok(())
        }
        Command::Sweep {
            config,
            pairs,
            seeds,
            out,
            svg,
        } => {
            let mut train_config: TrainConfig = load_json(&config)?;
            if let Some(text) = seeds {
                train_config.seeds = parse_seeds(&text)?;
            }
            let pairs = match pairs {
                Some(text) => parse_pairs(&text)?,
                None => default_pairs(),
            };
            let output = tverseg::harness::run_sweep_with_progress(&train_config, &pairs, |line| eprintln!("{line}"))?;
            write_sweep_outputs(&out, &output, svg)?;
            print!("{}", output.report.render_table());
            println!("results in {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seed, instances } => {
            let mut all_passed = true;
            let report = check_loss_gradients(instances, seed)?;
            println!("{}", report.summary_line());
            all_passed &= report.passed();
            for report in check_layer_primitives(seed)? {
                println!("{}", report.summary_line());
                all_passed &= report.passed();
            }
            let report = check_whole_net(seed)?;
            println!("{}", report.summary_line());
            all_passed &= report.passed();
            if all_passed {
                Ok(())
            } else {
                Err(Error::config("gradient checks failed"))
            }
        }
        Command::Shapes { paper, config } => {
            let net_config: NetConfig = match (paper, config) {
                (true, None) => full_scale_config(),
                (false, Some(path)) => load_json(&path)?,
                _ => {
                    return Err(Error::config(
                        "pass exactly one of --paper or --config",
                    ))
                }
            };
            let plan = plan_shapes(&net_config)?;
            print!("{}", plan.render_table());
            if paper {
                let mismatches = verify_full_scale(&plan);
                if mismatches.is_empty() {
                    println!("all {} rows match the reference table", plan.rows.len());
                } else {
                    for m in &mismatches {
                        eprintln!("mismatch: {m}");
                    }
                    return Err(Error::config(format!(
                        "{} rows deviate from the reference table",
                        mismatches.len()
                    )));
                }
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
