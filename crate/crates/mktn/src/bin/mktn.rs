//! Command-line interface: corpus synthesis, training, evaluation,
//! gradient checking, and the multi-pair throughput benchmark.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use mktn::config::ModelConfig;
use mktn::feature_io::{generate_synthetic_corpus, load_manifest};
use mktn::harness::{self, BenchMode};
use mktn::model::Model;

#[derive(Parser)]
#[command(name = "mktn", version, about = "Multi-pair temporal sentence grounding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Multi,
    Single,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic planted-alignment corpus.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        videos: usize,
        #[arg(long)]
        queries_per_video: usize,
        /// Output directory; the manifest lands at <out>/manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Model config JSON (dimensions and planted-signal weights).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a corpus and save the parameter bundle.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// Output bundle (config + parameters, JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss curve (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// R@n, IoU=m evaluation of a trained bundle.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// IoU thresholds, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7])]
        iou: Vec<f64>,
        /// Top-n cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5])]
        topn: Vec<usize>,
        /// Report JSON destination (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-query best-span predictions, JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradient on a synthetic
    /// micro-batch.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only check parameters whose path starts with this prefix.
        #[arg(long, default_value = "")]
        filter: String,
    },
    /// Videos-per-second benchmark of the two batching layouts.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 2)]
        passes: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> mktn::error::Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json_file(p),
        None => Ok(ModelConfig::default()),
    }
}

fn run() -> mktn::error::Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { seed, videos, queries_per_video, out, config } => {
            let cfg = load_config(&config)?;
            let corpus = generate_synthetic_corpus(seed, videos, queries_per_video, &cfg, &out)?;
            println!(
                "wrote {} videos / {} queries to {}",
                corpus.videos.len(),
                corpus.pairs.len(),
                out.join("manifest.json").display()
            );
        }
        Cmd::Train { manifest, config, steps, seed, out, report } => {
            let cfg = load_config(&config)?;
            let corpus = load_manifest(&manifest)?;
            let mut model = Model::new(cfg, seed)?;
            let train_report = harness::train(&mut model, &corpus, steps, seed)?;
            model.save(&out)?;
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&train_report)?)?;
            }
            let first = train_report.loss_curve.first().map(|b| b.total);
            let last = train_report.loss_curve.last().map(|b| b.total);
            println!(
                "trained {steps} steps on {} pairs; loss {:?} -> {:?}; saved {}",
                corpus.pairs.len(),
                first,
                last,
                out.display()
            );
        }
        Cmd::Eval { manifest, params, iou, topn, report, predictions } => {
            let corpus = load_manifest(&manifest)?;
            let model = Model::load(&params)?;
            let eval = harness::evaluate(&model, &corpus, &topn, &iou)?;
            if let Some(path) = predictions {
                let lines = harness::prediction_lines(&model, &corpus)?;
                let mut text = String::new();
                for line in &lines {
                    text.push_str(&serde_json::to_string(line)?);
                    text.push('\n');
                }
                std::fs::write(&path, text)?;
            }
            let json = serde_json::to_string_pretty(&eval)?;
            match report {
                Some(path) => {
                    std::fs::write(&path, &json)?;
                    for r in &eval.recalls {
                        println!("R@{}, IoU={}: {:.4}", r.top_n, r.iou, r.recall);
                    }
                    println!("report written to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
        Cmd::Gradcheck { config, tol, eps, seed, filter } => {
            let cfg = load_config(&config)?;
            let dir = tempfile::tempdir()?;
            let corpus = generate_synthetic_corpus(seed.wrapping_add(1), 2, 2, &cfg, dir.path())?;
            let model = Model::new(cfg, seed)?;
            let groups = corpus.groups();
            let report = harness::gradcheck(&model, &corpus, &groups, 0.4, eps, tol, &filter)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Bench { manifest, params, mode, workers, passes } => {
            let corpus = load_manifest(&manifest)?;
            let model = Model::load(&params)?;
            let mut results = Vec::new();
            if mode != ModeArg::Single {
                let vps = harness::bench_vps(&model, &corpus, BenchMode::MultiPair, workers, passes)?;
                println!("multi_pair: {vps:.2} videos/s");
                results.push(vps);
            }
            if mode != ModeArg::Multi {
                let vps = harness::bench_vps(&model, &corpus, BenchMode::SinglePair, workers, passes)?;
                println!("single_pair: {vps:.2} videos/s");
                results.push(vps);
            }
            if results.len() == 2 {
                println!("speedup: {:.2}x", results[0] / results[1]);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
