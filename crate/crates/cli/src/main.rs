use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use odoflow::data::{load_dataset, read_cloud, sample_to_n, save_dataset, DatasetRecipe, FramePair};
use odoflow::gradsuite::{self, GRAD_TOL};
use odoflow::train::{evaluate, train, write_export, Checkpoint, TrainConfig};
use odoflow::{Error, Result};

#[derive(Parser)]
#[command(name = "odoflow", version, about = "Odometry-assisted unsupervised scene flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a recipe.
    GenData {
        /// DatasetRecipe as JSON.
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run staged training and write the final checkpoint.
    Train {
        /// TrainConfig as JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint path; stage checkpoints and the log are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset evaluated during training.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict flow, pose and masks for one pair of clouds (PLY or velodyne .bin).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for resampling clouds to the network's input size.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of: tensor, geometry, losses, costvolume, init_heads, refinement, network.
        #[arg(long)]
        module: Option<String>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `dir/stem.suffix` for a path `dir/stem.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn gen_data(recipe: &Path, out: &Path) -> Result<()> {
    let recipe: DatasetRecipe = read_json(recipe)?;
    let pairs = recipe.generate()?;
    save_dataset(out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, heldout: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_set = load_dataset(data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let heldout = match heldout {
        Some(d) => load_dataset(d)?,
        None => Vec::new(),
    };
    let start = Instant::now();
    let (ckpt, log) = train(&train_set, &heldout, &cfg, |stage, ck| {
        let path = sibling(out, &format!("{}.json", stage.name()));
        ck.save(&path)?;
        println!(
            "stage {} done after {:.0}s, checkpoint {}",
            stage.name(),
            start.elapsed().as_secs_f64(),
            path.display()
        );
        Ok(())
    })?;
    for e in &log.epochs {
        println!(
            "{:>10} epoch {:>4} lr {:.2e} loss {:.5}",
            e.stage.name(),
            e.epoch,
            e.lr,
            e.loss
        );
    }
    ckpt.save(out)?;
    write_json(&sibling(out, "log.json"), &log)?;
    println!("{} iterations, final checkpoint {}", log.iterations, out.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, json: Option<&Path>) -> Result<()> {
    let (model, _) = Checkpoint::load(ckpt)?.restore()?;
    let pairs = load_dataset(data)?;
    let report = evaluate(&model, &pairs)?;
    println!("{report}");
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn run_infer(ckpt: &Path, p: &Path, q: &Path, out: &Path, seed: u64) -> Result<()> {
    let (model, _) = Checkpoint::load(ckpt)?.restore()?;
    let n = model.input_points();
    let fit = |path: &Path, seed: u64| -> Result<_> {
        let pc = read_cloud(path)?;
        Ok(if pc.len() == n { pc } else { sample_to_n(&pc, n, seed) })
    };
    let pair = FramePair::unlabeled(fit(p, seed)?, fit(q, seed.wrapping_add(1))?);
    let pred = model.predict(&pair)?;
    write_export(out, &pair, &pred)?;
    let t = pred.pose.t;
    let q = pred.pose.q;
    println!(
        "pose q = [{:.6}, {:.6}, {:.6}, {:.6}], t = [{:.4}, {:.4}, {:.4}]",
        q.w, q.x, q.y, q.z, t[0], t[1], t[2]
    );
    println!("wrote prediction to {}", out.display());
    Ok(())
}

fn run_gradcheck(module: Option<&str>) -> Result<bool> {
    let start = Instant::now();
    let results = gradsuite::run(module)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{status} {:<11} {:<36} rel_err {:.2e}  entries {:>5}  kinks {}",
            r.module,
            r.name,
            r.rel_err(),
            r.report.entries_checked,
            r.report.kinks_skipped
        );
    }
    println!(
        "{} checks, {failed} failed, tolerance {GRAD_TOL:e}, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { recipe, out } => gen_data(&recipe, &out).map(|_| true),
        Command::Train {
            config,
            data,
            out,
            heldout,
            seed,
        } => run_train(&config, &data, &out, heldout.as_deref(), seed).map(|_| true),
        Command::Eval { ckpt, data, json } => run_eval(&ckpt, &data, json.as_deref()).map(|_| true),
        Command::Infer { ckpt, p, q, out, seed } => run_infer(&ckpt, &p, &q, &out, seed).map(|_| true),
        Command::Gradcheck { module } => run_gradcheck(module.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
