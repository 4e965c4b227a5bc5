use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use istpa::checkpoint::Checkpoint;
use istpa::config::TrainConfig;
use istpa::data::{corpus_clip, Split, NUM_CLASSES};
use istpa::pca::{random_instance, verify_attention_vs_pca, DescentBudget, ORACLE_TOP_EIGENVALUE};
use istpa::trainer::{
    eval_corpus, evaluate_sharded, metrics_csv, pipeline_grad_check, uniform_sample, Trainer,
};
use istpa::viz::{emit_heatmaps, extract_salient_fields, SalienceMode};

#[derive(Parser)]
#[command(
    name = "istpa",
    version,
    about = "Toy spatio-temporal pyramid attention trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its held-out corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames sampled per clip.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Sampled coordinates per parameter tensor.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Compare gradient descent on the interaction loss with the PCA oracle.
    PcaVerify {
        #[arg(long)]
        seed: u64,
        /// Print the loss curve as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Dump salient receptive fields of one eval clip as images and JSON.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: u64,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::PerFrame)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerFrame,
    PerPosition,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            k,
            workers,
        } => eval(&checkpoint, k, workers),
        Command::Gradcheck { seeds, coords, tol } => gradcheck(seeds, coords, tol),
        Command::PcaVerify { seed, json } => pca_verify(seed, json),
        Command::Viz {
            checkpoint,
            clip,
            threshold,
            out,
            mode,
        } => viz(&checkpoint, clip, threshold, &out, mode),
    }
}

fn train(config: &Path, out: &Path) -> Result<bool> {
    let cfg = TrainConfig::load(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = Trainer::new(cfg)?;
    println!("{}", istpa::trainer::METRICS_HEADER);
    trainer.run(|row| println!("{}", row.csv_line()))?;
    let metrics = out.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(trainer.metrics()))
        .with_context(|| format!("writing {}", metrics.display()))?;
    let ckpt = trainer.checkpoint();
    let path = out.join("model.ckpt");
    ckpt.save(&path)?;
    eprintln!(
        "checkpoint {} sha256 {}",
        path.display(),
        ckpt.payload_hash()
    );
    Ok(true)
}

fn eval(checkpoint: &Path, k: usize, workers: usize) -> Result<bool> {
    if k == 0 {
        bail!("--k must be at least 1");
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let clips = eval_corpus(&ckpt.config)?;
    let report = evaluate_sharded(&model, k, &clips, workers)?;
    let correct: usize = (0..NUM_CLASSES).map(|i| report.confusion[i][i]).sum();
    println!(
        "K={k} accuracy {:.4} ({correct}/{})",
        report.accuracy,
        report.total()
    );
    println!("confusion (rows true, columns predicted):");
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:5}")).collect();
        println!("{}", cells.join(""));
    }
    Ok(true)
}

fn gradcheck(seeds: u64, coords: usize, tol: f64) -> Result<bool> {
    let mut ok = true;
    for seed in 1..=seeds {
        let rep = pipeline_grad_check(seed, coords, 1e-5)?;
        let pass = rep.max_rel_error < tol;
        ok &= pass;
        println!(
            "seed {seed}: max relative error {:.3e} over {} coordinates ({} skipped at kinks) {}",
            rep.max_rel_error,
            rep.checked,
            rep.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn pca_verify(seed: u64, json: bool) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=8);
    let c = rng.random_range(1..=4);
    let d = rng.random_range(1..=3usize.min(p));
    let x = random_instance(seed, p, c, ORACLE_TOP_EIGENVALUE)?;
    let v = verify_attention_vs_pca(
        &x,
        d,
        DescentBudget {
            seed,
            ..Default::default()
        },
    )?;
    if json {
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("instance P={p} C={c} d={d}");
        println!(
            "descent loss {:.6e}  oracle {:.6e}  relative gap {:.3e}",
            v.final_loss, v.target, v.relative_gap
        );
        match v.subspace_alignment {
            Some(a) => println!("subspace alignment {a:.6}"),
            None => println!("{}", v.note),
        }
        println!("{}", if v.passed { "ok" } else { "FAIL" });
    }
    Ok(v.passed)
}

fn viz(checkpoint: &Path, clip: u64, threshold: f64, out: &Path, mode: Mode) -> Result<bool> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let model = ckpt.to_model()?;
    if clip >= cfg.eval_clips as u64 {
        bail!("clip {clip} out of range for {} eval clips", cfg.eval_clips);
    }
    let sample = corpus_clip(cfg.seed, Split::Eval, clip, cfg.clip_len)?;
    let sample = sample.select_frames(&uniform_sample(sample.len(), cfg.k_eval));
    let (attention, grid, logits) = model.inspect(&sample.frames)?;
    let mode = match mode {
        Mode::PerFrame => SalienceMode::PerFrame,
        Mode::PerPosition => SalienceMode::PerPosition,
    };
    let report = extract_salient_fields(&attention, grid, threshold, mode)?;
    let stride = sample.frames.shape()[1] / grid.width;
    let files = emit_heatmaps(&report, &sample.frames, stride, out)?;
    let predicted = istpa::trainer::argmax(&logits);
    println!(
        "clip {clip}: label {} predicted {predicted}, {} salient entries",
        sample.label,
        report.entries.len()
    );
    for f in files {
        println!("{}", f.display());
    }
    Ok(true)
}
