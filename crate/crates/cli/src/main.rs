//! `eidetic`: dataset synthesis, training, evaluation and diagnostics for
//! the eidetic-state field model.
//!
//! Exit codes: 0 success, 1 invalid input or a failed check, 2 internal
//! error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eidetic::attention::NoiseMode;
use eidetic::checkpoint::{load_checkpoint, save_checkpoint};
use eidetic::dataio::{gen_sphere_dataset, write_dataset, DatasetManifest, MeshSample};
use eidetic::diagnostics::{ablation_matrix, ablation_to_csv, activation_accounting, diagnose_kl};
use eidetic::model::ModelConfig;
use eidetic::parallel::{comm_rows_to_csv, comm_volume_report, serial_parallel_check};
use eidetic::selftest::run_selftest;
use eidetic::train::{evaluate, log_to_csv, train};
use eidetic::{Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "eidetic", version, about = "Eidetic-state Physics-Attention field model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config ("config_version": 1); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialisation and training noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the ellipsoid dataset: data/{train,test}.json and samples.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        test_samples: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train on a manifest; writes checkpoint.tppc and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest (default: <out-dir>/data/train.json).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Simulated ranks for the forward pass.
        #[arg(long)]
        ranks: Option<usize>,
        /// Write 0 in the seconds column so logs are byte-stable.
        #[arg(long)]
        no_time: bool,
    },
    /// Evaluate a checkpoint; writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Test manifest (default: <out-dir>/data/test.json).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint (default: <out-dir>/checkpoint.tppc).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Slice-weight KL from uniform per layer and head; writes kl.csv.
    DiagnoseKl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated 0-based layer indices (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Per-layer communication volume versus mesh size; writes comm.csv.
    BenchComm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ranks: Option<usize>,
        /// Comma-separated point counts.
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<usize>>,
    },
    /// Serial versus simulated-parallel equivalence; writes check_parallel.csv.
    CheckParallel {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rank counts.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long)]
        n: Option<usize>,
        /// Forward outputs only.
        #[arg(long)]
        no_grads: bool,
    },
    /// Run the invariant suite; writes selftest.csv.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
    /// Train the four attention variants; writes ablation.csv and activations.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated seeds; results are averaged over them.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&common.out_dir)?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn load_manifest(path: &Path) -> Result<Vec<MeshSample>> {
    let m = DatasetManifest::load(path)?;
    let samples = m.load_samples(path)?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("{} lists no samples", path.display())));
    }
    Ok(samples)
}

fn model_for(cfg: &RunConfig, sample: &MeshSample) -> Result<ModelConfig> {
    let m = cfg.model.build(sample.d_in(), sample.d_out());
    m.validate()?;
    Ok(m)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common, train_samples, test_samples, points } => {
            let mut cfg = load_config(&common)?;
            let d = &mut cfg.data;
            d.train_samples = train_samples.unwrap_or(d.train_samples);
            d.test_samples = test_samples.unwrap_or(d.test_samples);
            d.n_points = points.unwrap_or(d.n_points);
            if d.train_samples == 0 || d.test_samples == 0 {
                return Err(Error::Validation("train and test sample counts must be >= 1".into()));
            }
            let all = gen_sphere_dataset(d.train_samples + d.test_samples, d.n_points, d.seed)?;
            let (tr, te) = all.split_at(d.train_samples);
            let (a, b) = write_dataset(&common.out_dir.join("data"), tr, te)?;
            println!("wrote {} and {}", a.display(), b.display());
            Ok(true)
        }
        Command::Train { common, data, epochs, ranks, no_time } => {
            let mut cfg = load_config(&common)?;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.ranks = ranks.unwrap_or(cfg.train.ranks);
            cfg.train.record_time &= !no_time;
            let path = data.unwrap_or_else(|| common.out_dir.join("data/train.json"));
            let samples = load_manifest(&path)?;
            let model = model_for(&cfg, &samples[0])?;
            let out = train(&model, &samples, &cfg.train)?;
            let log = write(&common.out_dir, "train_log.csv", &log_to_csv(&out.log))?;
            let ckpt = common.out_dir.join("checkpoint.tppc");
            save_checkpoint(&ckpt, &model, &out.params)?;
            let last = out.log.last().expect("epochs >= 1");
            println!("epoch {} loss {:.6e}; wrote {} and {}", last.epoch, last.loss, log.display(), ckpt.display());
            Ok(true)
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = data.unwrap_or_else(|| common.out_dir.join("data/test.json"));
            let manifest = DatasetManifest::load(&path)?;
            let samples = load_manifest(&path)?;
            let (model, params) = load_checkpoint(&checkpoint.unwrap_or_else(|| common.out_dir.join("checkpoint.tppc")))?;
            let report = evaluate(&params, &model, &manifest.stats, &samples, &cfg.eval)?;
            let out = write(&common.out_dir, "metrics.json", &serde_json::to_string_pretty(&report)?)?;
            println!("relative L2 {:?}; wrote {}", report.relative_l2, out.display());
            Ok(true)
        }
        Command::DiagnoseKl { common, data, checkpoint, layers } => {
            load_config(&common)?;
            let path = data.unwrap_or_else(|| common.out_dir.join("data/test.json"));
            let manifest = DatasetManifest::load(&path)?;
            let samples = load_manifest(&path)?;
            let (model, params) = load_checkpoint(&checkpoint.unwrap_or_else(|| common.out_dir.join("checkpoint.tppc")))?;
            let report = diagnose_kl(&params, &model, &manifest.stats, &samples, layers.as_deref())?;
            let out = write(&common.out_dir, "kl.csv", &report.to_csv())?;
            println!("mean KL {:.6}; wrote {}", report.aggregate_mean, out.display());
            Ok(true)
        }
        Command::BenchComm { common, ranks, points } => {
            let cfg = load_config(&common)?;
            let ranks = ranks.unwrap_or(cfg.parallel.comm_ranks);
            let points = points.unwrap_or_else(|| cfg.parallel.comm_points.clone());
            if ranks == 0 || points.is_empty() {
                return Err(Error::Validation("need ranks >= 1 and at least one point count".into()));
            }
            let model = cfg.model.build(1, 1);
            let slice = model.slice_config(NoiseMode::NoNoise);
            slice.validate()?;
            let csv = comm_rows_to_csv(&comm_volume_report(&slice, ranks, &points));
            write(&common.out_dir, "comm.csv", &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Command::CheckParallel { common, ranks, n, no_grads } => {
            let cfg = load_config(&common)?;
            let ranks = ranks.unwrap_or_else(|| cfg.parallel.check_ranks.clone());
            let n = n.unwrap_or(cfg.parallel.check_points);
            let model = cfg.model.build(6, 1);
            let rows = serial_parallel_check(&model, n, &ranks, NoiseMode::TrainNoise, !no_grads)?;
            let mut csv = String::from("rank_count,forward_deviation,gradient_deviation,blocked_exact,ledger_ok,pass\n");
            for r in &rows {
                let gd = r.gradient_deviation.map_or(String::new(), |d| format!("{d:.3e}"));
                csv.push_str(&format!(
                    "{},{:.3e},{},{},{},{}\n",
                    r.rank_count, r.forward_deviation, gd, r.blocked_exact, r.ledger_ok, r.pass
                ));
                println!(
                    "{} ranks={} n={} forward={:.3e} gradient={}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.rank_count,
                    n,
                    r.forward_deviation,
                    if gd.is_empty() { "-".to_string() } else { gd }
                );
            }
            write(&common.out_dir, "check_parallel.csv", &csv)?;
            Ok(rows.iter().all(|r| r.pass))
        }
        Command::Selftest { common } => {
            load_config(&common)?;
            let results = run_selftest();
            let mut csv = String::from("check,pass,detail\n");
            for r in &results {
                println!("{} {} ({})", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
                csv.push_str(&format!("{},{},\"{}\"\n", r.name, r.pass, r.detail.replace('"', "'")));
            }
            write(&common.out_dir, "selftest.csv", &csv)?;
            Ok(results.iter().all(|r| r.pass))
        }
        Command::Ablate { common, data, test_data, epochs, seeds } => {
            let mut cfg = load_config(&common)?;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            let tr = load_manifest(&data.unwrap_or_else(|| common.out_dir.join("data/train.json")))?;
            let te = load_manifest(&test_data.unwrap_or_else(|| common.out_dir.join("data/test.json")))?;
            let model = model_for(&cfg, &tr[0])?;
            let seeds = seeds.unwrap_or_else(|| cfg.ablation.seeds.clone());
            let rows = ablation_matrix(&model, &cfg.train, &tr, &te, &seeds)?;
            let out = write(&common.out_dir, "ablation.csv", &ablation_to_csv(&rows))?;
            let mut act = String::from("variant,n_points,projection_scalars\n");
            for r in activation_accounting(&model, tr[0].n())? {
                act.push_str(&format!("\"{}\",{},{}\n", r.variant, r.n_points, r.projection_scalars));
            }
            write(&common.out_dir, "activations.csv", &act)?;
            print!("{}", ablation_to_csv(&rows));
            println!("wrote {}", out.display());
            Ok(rows.iter().all(|r| r.final_train_loss.is_finite()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
