//! `posedn`: data generation, training, evaluation and diagnostics.
//!
//! Machine-readable results go to stdout as JSON, progress to stderr.
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use posedn::data::{load_checkpoint, save_checkpoint, Dataset, SceneSpec};
use posedn::denoise::{gen_pose_queries, queries_stay_inside, Polarity};
use posedn::geometry::keypoint_similarity;
use posedn::model::{ParamStore, PoseModel};
use posedn::train::{evaluate, model_grad_check, train_loop};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::{RunConfig, SkeletonKind};

#[derive(Parser)]
#[command(
    name = "posedn",
    version,
    about = "Keypoint-similarity pose denoising on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes into a dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 160)]
        img_size: usize,
        #[arg(long, default_value_t = 4)]
        max_persons: usize,
        #[arg(long, value_enum, default_value_t = SkeletonKind::Human17)]
        skeleton: SkeletonKind,
        /// Id of the first scene; use disjoint ranges for separate splits.
        #[arg(long, default_value_t = 0)]
        first: u64,
    },
    /// Train a model; writes a checkpoint and a JSONL metric trace.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and print AP metrics as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `data.val`, then `data.train`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw denoising queries for rendered scenes and print them with their
    /// sampled and recomputed similarities.
    DnSample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        polarity: PolarityArg,
        /// Scenes to draw from.
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare model gradients with central differences on one scene.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Pos,
    Neg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<posedn::Error>(), Some(posedn::Error::Numeric(_))));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            num,
            seed,
            img_size,
            max_persons,
            skeleton,
            first,
        } => gen_data(&out, num, seed, img_size, max_persons, skeleton, first),
        Command::Train { config } => train(&RunConfig::load(&config)?),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => eval(&RunConfig::load(&config)?, checkpoint, data),
        Command::DnSample {
            config,
            polarity,
            scenes,
            out,
        } => dn_sample(&RunConfig::load(&config)?, polarity, scenes, out),
        Command::GradCheck {
            config,
            coords,
            eps,
            tol,
        } => grad_check(&RunConfig::load(&config)?, coords, eps, tol),
    }
}

fn gen_data(
    out: &Path,
    num: usize,
    seed: u64,
    img_size: usize,
    max_persons: usize,
    skeleton: SkeletonKind,
    first: u64,
) -> Result<()> {
    let spec = SceneSpec::new(img_size, max_persons, skeleton.skeleton(), seed)?;
    let data = Dataset::generate_range(&spec, first, num)?;
    data.save(out)?;
    let persons: usize = data.annotations.iter().map(|a| a.instances.len()).sum();
    eprintln!("wrote {num} scenes ({persons} persons) to {}", out.display());
    println!("{}", json!({ "scenes": num, "persons": persons }));
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let train_dir = cfg.path(&cfg.data.train, "data.train")?;
    let ckpt = cfg.path(&cfg.output.checkpoint, "output.checkpoint")?;
    let data = cfg.dataset(&train_dir)?;
    let val = match &cfg.data.val {
        Some(p) => Some(cfg.dataset(&cfg.resolve(p))?),
        None => None,
    };
    let ks = cfg.ks_params()?;
    let mut model = PoseModel::new(cfg.model_config()?, cfg.seed)?;
    let mut trace = match &cfg.output.trace {
        Some(p) => {
            let p = cfg.resolve(p);
            ensure_parent(&p)?;
            Some(BufWriter::new(
                File::create(&p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => None,
    };
    eprintln!(
        "training on {} scenes, {} weights, {} iterations",
        data.len(),
        model.params.num_scalars(),
        cfg.train.iterations
    );
    let mut io_error = None;
    let records = train_loop(
        &mut model,
        &cfg.train,
        &cfg.loss,
        &ks,
        &data,
        val.as_ref(),
        cfg.seed,
        |r| {
            let ap = r
                .eval
                .map(|e| format!("  AP {:.3} AP50 {:.3}", e.ap, e.ap50))
                .unwrap_or_default();
            eprintln!(
                "iter {:>5}  loss {:>9.4}  |g| {:>8.3}{ap}",
                r.iteration, r.loss.total, r.grad_norm
            );
            if let Some(w) = trace.as_mut() {
                let line = serde_json::to_string(r).expect("trace records serialize");
                if let Err(e) = writeln!(w, "{line}") {
                    io_error.get_or_insert(e);
                }
            }
            Ok(())
        },
    );
    if let Some(mut w) = trace {
        w.flush()?;
    }
    if let Some(e) = io_error {
        return Err(e).context("writing trace");
    }
    let records = records?;
    ensure_parent(&ckpt)?;
    save_checkpoint(&ckpt, model.params.iter().map(|(n, t)| (n.as_str(), t)))?;
    eprintln!("checkpoint written to {}", ckpt.display());
    if let Some(last) = records.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<PoseModel> {
    let path = match checkpoint {
        Some(p) => p,
        None => cfg.path(&cfg.output.checkpoint, "output.checkpoint")?,
    };
    let params: ParamStore = load_checkpoint(&path)
        .with_context(|| format!("loading {}", path.display()))?
        .into_iter()
        .collect();
    Ok(PoseModel::from_params(cfg.model_config()?, params)?)
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let dir = match data {
        Some(d) => d,
        None => cfg
            .data
            .val
            .as_ref()
            .or(cfg.data.train.as_ref())
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| config::missing("data.val"))?,
    };
    let data = cfg.dataset(&dir)?;
    let report = evaluate(&model, &data, &cfg.ks_params()?)?;
    eprintln!(
        "{} scenes: AP {:.4}  AP50 {:.4}  AP75 {:.4}  AR {:.4}",
        data.len(),
        report.ap,
        report.ap50,
        report.ap75,
        report.ar
    );
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn dn_sample(cfg: &RunConfig, polarity: PolarityArg, scenes: usize, out: Option<PathBuf>) -> Result<()> {
    let polarity = match polarity {
        PolarityArg::Pos => Polarity::Positive,
        PolarityArg::Neg => Polarity::Negative,
    };
    let ks = cfg.ks_params()?;
    let spec = cfg.scene_spec()?;
    if spec.skeleton.num_keypoints() != ks.len() {
        anyhow::bail!(
            "data.skeleton has {} keypoints, model expects {}",
            spec.skeleton.num_keypoints(),
            ks.len()
        );
    }
    let data = Dataset::generate(&spec, scenes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    let (mut checked, mut in_band) = (0usize, 0usize);
    for i in 0..data.len() {
        for (j, gt) in data.normalized(i)?.iter().enumerate() {
            let s = gen_pose_queries(gt, polarity, &ks, &mut rng)?;
            let mut recomputed = Vec::with_capacity(gt.num_keypoints());
            let mut clamped = Vec::with_capacity(gt.num_keypoints());
            for ((a, b), &kappa) in gt.keypoints.iter().zip(&s.instance.keypoints).zip(ks.kappa()) {
                let r = keypoint_similarity(a.dist(b), gt.scale(), kappa)?;
                let c = !(0.0..=1.0).contains(&a.x)
                    || !(0.0..=1.0).contains(&a.y)
                    || b.x <= 0.0
                    || b.x >= 1.0
                    || b.y <= 0.0
                    || b.y >= 1.0;
                if !c {
                    checked += 1;
                    in_band += polarity.ks_band().contains(&r) as usize;
                }
                recomputed.push(r);
                clamped.push(c);
            }
            samples.push(json!({
                "scene": data.annotations[i].id,
                "instance": j,
                "polarity": s.polarity,
                "keypoints": s.instance.keypoints.iter().map(|k| [k.x, k.y]).collect::<Vec<_>>(),
                "sampled_ks": s.sampled_ks,
                "recomputed_ks": recomputed,
                "clamped": clamped,
            }));
        }
    }
    eprintln!(
        "{} samples; {in_band} of {checked} unclamped keypoints inside [{}, {})",
        samples.len(),
        polarity.ks_band().start,
        polarity.ks_band().end
    );
    let text = serde_json::to_string_pretty(&samples)?;
    match out {
        Some(p) => {
            ensure_parent(&p)?;
            std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn grad_check(cfg: &RunConfig, coords: usize, eps: f64, tol: f64) -> Result<()> {
    let model = PoseModel::new(cfg.model_config()?, cfg.seed)?;
    let ks = cfg.ks_params()?;
    let spec = cfg.scene_spec()?;
    let data = Dataset::generate(&spec, 64)?;
    if data.annotations[0]
        .instances
        .iter()
        .any(|p| p.num_keypoints() != ks.len())
    {
        anyhow::bail!("data.skeleton does not match the model's keypoint count");
    }
    // prefer a scene whose denoising queries cannot be clamped
    let mut scene = 0;
    'scenes: for i in 0..data.len() {
        let gts = data.normalized(i)?;
        if gts.is_empty() {
            continue;
        }
        for p in &gts {
            if !queries_stay_inside(p, &ks)? {
                continue 'scenes;
            }
        }
        scene = i;
        break;
    }
    let gts = data.normalized(scene)?;
    eprintln!("checking scene {scene} with {} people", gts.len());
    let report = model_grad_check(
        &model,
        &data.images[scene],
        &gts,
        cfg.train.dn_groups,
        &cfg.loss,
        &ks,
        coords,
        eps,
        cfg.seed,
    )?;
    eprintln!("{:<28} {:>6} {:>12} {:>12}", "block", "coords", "max rel", "max abs");
    for b in &report {
        let flag = if b.max_rel > tol { "  FAIL" } else { "" };
        eprintln!(
            "{:<28} {:>6} {:>12.3e} {:>12.3e}{flag}",
            b.name, b.coords, b.max_rel, b.max_abs
        );
    }
    let worst = report.iter().map(|b| b.max_rel).fold(0.0, f64::max);
    println!("{}", json!({ "worst_rel": worst, "tolerance": tol, "blocks": report }));
    if worst > tol {
        return Err(
            posedn::Error::Numeric(format!("worst relative gradient error {worst:.3e} exceeds {tol:.0e}")).into(),
        );
    }
    eprintln!("worst relative error {worst:.3e} (tolerance {tol:.0e})");
    Ok(())
}
