use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use rlr::config::{RunConfig, RESOLVED_CONFIG_NAME};
use rlr::eval::{ablation_table, evaluate, run_ablation, score_sample, write_pgm};
use rlr::features::{
    dataset_layout, generate_synthetic_dataset, load_split, prepare_samples, read_feature_file, write_dataset, Sample,
    Split,
};
use rlr::model::{ModelConfig, Variant};
use rlr::train::{fit, load_checkpoint, save_checkpoint, TrainState};

use crate::{AblateArgs, Common, EvalArgs, GenSynthArgs, ScoreArgs, TrainArgs};

pub const CHECKPOINT_NAME: &str = "checkpoint.rlrc";
pub const LOSS_LOG_NAME: &str = "loss.csv";

/// Inputs that do not match the configured model or protocol.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn resolve(common: &Common, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(base) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.data.out = out.clone();
    }
    if let Some(threads) = common.threads {
        cfg.data.threads = threads;
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(out)?;
    // a second call only fails because the pool exists already
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.data.threads)
        .build_global();
    Ok(())
}

fn load_samples(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let records = load_split(&cfg.data.dataset, split)?;
    if records.is_empty() {
        return Err(DataError(format!("{} has no {} records", cfg.data.dataset.display(), split.as_str())).into());
    }
    let (dims, _) = dataset_layout(&records)?;
    check_layout(&cfg.reconstruction_model, &dims)?;
    Ok(prepare_samples(&records, &cfg.feature_pipeline.aggregation())?)
}

fn check_layout(model: &ModelConfig, dims: &[(usize, usize, usize)]) -> Result<()> {
    let expected: Vec<_> = model.scales.iter().map(|s| (s.channels, s.height, s.width)).collect();
    if expected != dims {
        return Err(DataError(format!(
            "dataset scales {dims:?} do not match the model's {expected:?}"
        ))
        .into());
    }
    Ok(())
}

fn write_loss_log(path: &Path, history: &[f32]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", e + 1, l));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg = resolve(&args.common, None)?;
    if let Some(classes) = args.classes {
        cfg.feature_pipeline.synth.classes = classes;
    }
    let dir = args.common.out.clone().unwrap_or_else(|| cfg.data.dataset.clone());
    cfg.data.dataset = dir.clone();
    finish(&cfg, &dir)?;
    let (train, test) = generate_synthetic_dataset(&cfg.feature_pipeline.synth)?;
    write_dataset(&dir, &train, &test)?;
    let anomalous = test.iter().filter(|r| r.is_anomalous).count();
    println!(
        "wrote {} train and {} test records ({anomalous} anomalous) for {} classes to {}",
        train.len(),
        test.len(),
        cfg.feature_pipeline.synth.classes,
        dir.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common, None)?;
    if let Some(d) = &args.dataset {
        cfg.data.dataset = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    let out = cfg.data.out.clone();
    finish(&cfg, &out)?;
    let samples = load_samples(&cfg, Split::Train)?;
    let mut state = match &args.resume {
        Some(path) => load_checkpoint(path, Some(&cfg.reconstruction_model))
            .with_context(|| format!("resuming from {}", path.display()))?,
        None => TrainState::init(&cfg.reconstruction_model, cfg.training.seed)?,
    };
    let every = cfg.training.checkpoint_every;
    let epochs = cfg.training.epochs;
    fit(&mut state, &samples, &cfg.training, |s| {
        eprintln!("epoch {}/{} loss {}", s.epoch, epochs, s.history[s.epoch - 1]);
        if every > 0 && s.epoch % every == 0 && s.epoch < epochs {
            save_checkpoint(s, &out.join(format!("checkpoint-e{:04}.rlrc", s.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &out.join(CHECKPOINT_NAME))?;
    write_loss_log(&out.join(LOSS_LOG_NAME), &state.history)?;
    println!(
        "trained {} epochs on {} records; final loss {}; wrote {}",
        state.epoch,
        samples.len(),
        state.history.last().copied().unwrap_or(f32::NAN),
        out.join(CHECKPOINT_NAME).display()
    );
    Ok(())
}

/// The checkpoint path and the run config saved next to it, if any.
fn checkpoint_inputs(common: &Common, checkpoint: &Option<PathBuf>) -> (PathBuf, Option<PathBuf>) {
    let out = common.out.clone().unwrap_or_else(|| rlr::config::DataConfig::default().out);
    let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_NAME));
    let beside = ckpt.parent().map(|p| p.join(RESOLVED_CONFIG_NAME)).filter(|p| p.exists());
    (ckpt, beside)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (ckpt, base) = checkpoint_inputs(&args.common, &args.checkpoint);
    let mut cfg = resolve(&args.common, base.as_deref())?;
    if let Some(d) = &args.dataset {
        cfg.data.dataset = d.clone();
    }
    let split = Split::parse(&args.split).with_context(|| format!("unknown split {:?}", args.split))?;
    let out = cfg.data.out.clone();
    finish(&cfg, &out)?;
    let state = load_checkpoint(&ckpt, Some(&cfg.reconstruction_model))
        .with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = load_samples(&cfg, split)?;
    let report = evaluate(&state.model, &state.bank, &samples, &cfg.scoring_eval)?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("metrics.txt"), report.to_key_values())?;
    print!("{table}");
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let (ckpt, base) = checkpoint_inputs(&args.common, &args.checkpoint);
    let cfg = resolve(&args.common, base.as_deref())?;
    let out = cfg.data.out.clone();
    finish(&cfg, &out)?;
    let state = load_checkpoint(&ckpt, Some(&cfg.reconstruction_model))
        .with_context(|| format!("loading {}", ckpt.display()))?;
    let record = read_feature_file(&args.record)?;
    check_layout(&cfg.reconstruction_model, &record.scale_dims())?;
    let sample = Sample::prepare(&record, &cfg.feature_pipeline.aggregation())?;
    let map = score_sample(&state.model, &state.bank, &sample)?;
    let image = rlr::eval::image_score(&map, cfg.scoring_eval.smoothing);
    let path = out.join(format!("{}.pgm", record.image_id));
    let (lo, hi) = write_pgm(&map, &path)?;
    println!(
        "{} image_score={image:.6} min={lo:.6} max={hi:.6} map={}",
        record.image_id,
        path.display()
    );
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = resolve(&args.common, None)?;
    if let Some(d) = &args.dataset {
        cfg.data.dataset = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    let variants: Vec<Variant> = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|v| v.trim().parse::<Variant>())
            .collect::<Result<_, _>>()?
    };
    if variants.is_empty() {
        bail!("no variants selected");
    }
    let out = cfg.data.out.clone();
    finish(&cfg, &out)?;
    let train = load_samples(&cfg, Split::Train)?;
    let test = load_samples(&cfg, Split::Test)?;
    let rows = run_ablation(
        &train,
        &test,
        &variants,
        &cfg.reconstruction_model,
        &cfg.training,
        &cfg.scoring_eval,
        |row| {
            eprintln!(
                "{}: image {:.4} pixel {:.4}",
                row.variant, row.report.image_auroc, row.report.pixel_auroc
            )
        },
    )?;
    let table = ablation_table(&rows);
    let mut kv = String::new();
    for r in &rows {
        kv.push_str(&format!("{}.image_auroc={:.6}\n", r.variant, r.report.image_auroc));
        kv.push_str(&format!("{}.pixel_auroc={:.6}\n", r.variant, r.report.pixel_auroc));
    }
    fs::write(out.join("ablation.txt"), &table)?;
    fs::write(out.join("ablation_metrics.txt"), kv)?;
    print!("{table}");
    Ok(())
}
