//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::io::{list_images, load_image, load_stack, save_image, Encoding};
use crate::data::split::{split_convallaria1, tiles_for, Split};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::eval::{predict, score, RangePolicy};
use crate::model::Checkpoint;
use crate::noise::{simulate_dataset, NoiseSpec};
use crate::reproduce::{reproduce, FormatVersions, ReproducePlan, MANIFEST_FILE};
use crate::train::train;

pub const DATA_ROOT_ENV: &str = "N2V2_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "n2v2", version, about = "Self-supervised blind-spot denoising")]
pub struct Cli {
    /// Parent of the per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt clean images with a noise model.
    Simulate(SimulateArgs),
    /// Tile a noisy/ground-truth pair 56/4/4 into train/val/test.
    Split(SplitArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Denoise images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run a complete desk-scale experiment.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory of clean images.
    #[arg(long)]
    pub input: PathBuf,
    /// Run config with a `[noise]` table.
    #[arg(long, conflicts_with = "noise")]
    pub config: Option<PathBuf>,
    /// Noise preset: mouse-sp3, mouse-sp6, mouse-sp12, mouse-g20, flywing-g70.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub noisy: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schedule preset when no config file is given.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Method preset (overrides the file's `method`).
    #[arg(long)]
    pub method: Option<String>,
    /// Global seed (overrides the file's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training images (overrides `data.train`).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation images (overrides `data.val`).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Extra `key=value` overrides, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OutputFormat {
    Tiff,
    Raw,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long, default_value_t = 64)]
    pub margin: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Tiff)]
    pub format: OutputFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth images with matching file stems.
    #[arg(long)]
    pub gt: PathBuf,
    /// `gt` for each image's own min-max span, or a fixed number such as 255.
    #[arg(long, default_value = "gt")]
    pub range: RangePolicy,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// sp-ordering, gaussian-gain or smoke.
    #[arg(required_unless_present = "manifest")]
    pub preset: Option<String>,
    /// Clean images to use instead of the synthetic corpus.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-run exactly the plan recorded in an earlier run's manifest.
    #[arg(long, conflicts_with_all = ["preset", "data_dir"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Relative input paths are looked up under `$N2V2_DATA_ROOT` when it is set.
pub fn resolve_input(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() && !path.exists() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<PathBuf> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.to_path_buf())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

fn out_dir(explicit: Option<PathBuf>, runs_dir: &Path, command: &str) -> Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        runs_dir.join(format!("{command}-{stamp}"))
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let pages = load_stack(&path)?;
        let many = pages.len() > 1;
        for (i, img) in pages.into_iter().enumerate() {
            let id = if many {
                format!("{stem}_{i:03}")
            } else {
                stem.clone()
            };
            out.push((id, img));
        }
    }
    if out.is_empty() {
        return Err(Error::MissingFiles(vec![dir.join("*.{png,tif,raw}")]));
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    let runs = cli.runs_dir.as_path();
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, runs),
        Command::Split(a) => cmd_split(a, runs),
        Command::Train(a) => cmd_train(a, runs),
        Command::Predict(a) => cmd_predict(a, runs),
        Command::Evaluate(a) => cmd_evaluate(a, runs),
        Command::Reproduce(a) => cmd_reproduce(a, runs),
    }
}

pub fn cmd_simulate(a: SimulateArgs, runs: &Path) -> Result<()> {
    let input = resolve_input(&a.input);
    require(&[&input])?;
    let spec = match (&a.config, &a.noise) {
        (Some(path), _) => {
            require(&[path])?;
            RunConfig::load(path, &[])?
                .noise
                .ok_or_else(|| Error::config("noise", "the config has no [noise] table"))?
        }
        (None, Some(name)) => NoiseSpec::preset(name, a.seed)
            .ok_or_else(|| Error::config("noise", format!("unknown noise preset {name:?}")))?,
        (None, None) => {
            return Err(Error::config(
                "noise",
                "give --noise <preset> or --config <file>",
            ))
        }
    };
    let out = out_dir(a.out, runs, "simulate")?;
    let manifest = simulate_dataset(&input, &out, &spec)?;
    let failed = manifest
        .entries
        .iter()
        .filter(|e| e.error.is_some())
        .count();
    println!(
        "simulated {} image(s) into {} ({failed} skipped)",
        manifest.entries.len() - failed,
        out.display()
    );
    Ok(())
}

pub fn cmd_split(a: SplitArgs, runs: &Path) -> Result<()> {
    let (noisy_path, gt_path) = (resolve_input(&a.noisy), resolve_input(&a.gt));
    require(&[&noisy_path, &gt_path])?;
    let noisy = load_image(&noisy_path)?;
    let gt = load_image(&gt_path)?;
    let manifest = split_convallaria1(&noisy, &gt, a.seed)?;
    let out = out_dir(a.out, runs, "split")?;
    write(&out.join("split.toml"), &manifest.to_toml())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let name = format!("{split:?}").to_lowercase();
        let indices = manifest.indices(split);
        for (kind, img) in [("noisy", &noisy), ("gt", &gt)] {
            let dir = out.join(&name).join(kind);
            for (idx, tile) in indices.iter().zip(tiles_for(&manifest, img, split)?) {
                save_image(
                    &tile,
                    &dir.join(format!("tile_{idx:03}.raw")),
                    Encoding::RawF32,
                )?;
            }
        }
    }
    let (tr, va, te) = manifest.counts();
    println!("{tr}/{va}/{te} tiles written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'a str,
    formats: FormatVersions,
    train_files: Vec<String>,
    val_files: Vec<String>,
    config: &'a RunConfig,
}

pub fn cmd_train(a: TrainArgs, runs: &Path) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(m) = &a.method {
        overrides.push(format!("method=\"{m}\""));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = match &a.config {
        Some(path) => {
            require(&[path])?;
            if let Some(s) = &a.schedule {
                overrides.push(format!("schedule=\"{s}\""));
            }
            RunConfig::load(path, &overrides)?
        }
        None => RunConfig::from_presets(a.schedule.as_deref(), None, 0, &overrides)?,
    };
    if let Some(p) = a.train {
        cfg.data.train = Some(p);
    }
    if let Some(p) = a.val {
        cfg.data.val = Some(p);
    }
    let train_dir = resolve_input(
        cfg.data
            .train
            .as_deref()
            .ok_or_else(|| Error::config("data.train", "no training images given"))?,
    );
    let val_dir = resolve_input(
        cfg.data
            .val
            .as_deref()
            .ok_or_else(|| Error::config("data.val", "no validation images given"))?,
    );
    require(&[&train_dir, &val_dir])?;
    let train_set = load_dir(&train_dir)?;
    let val_set = load_dir(&val_dir)?;
    let out = out_dir(a.out.or_else(|| cfg.output_dir.clone()), runs, "train")?;

    let manifest = TrainManifest {
        command: "train",
        formats: FormatVersions::current(),
        train_files: train_set.iter().map(|(id, _)| id.clone()).collect(),
        val_files: val_set.iter().map(|(id, _)| id.clone()).collect(),
        config: &cfg,
    };
    write(
        &out.join(MANIFEST_FILE),
        &toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let train_pool: Vec<ImageTensor> = train_set.into_iter().map(|(_, i)| i).collect();
    let val_pool: Vec<ImageTensor> = val_set.into_iter().map(|(_, i)| i).collect();
    let outcome = train(&cfg.model, &cfg.train, &train_pool, &val_pool)?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    write(&out.join("history.csv"), &outcome.history.to_csv())?;
    write(&out.join("timing.csv"), &outcome.history.timing_csv())?;
    if outcome.may_not_have_converged {
        eprintln!("warning: validation loss was still improving near the end; training may not have converged");
    }
    println!(
        "best epoch {} (val loss {:.6}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.history.records[outcome.best_epoch].val_loss,
        out.join("model.ckpt").display()
    );
    Ok(())
}

pub fn cmd_predict(a: PredictArgs, runs: &Path) -> Result<()> {
    let input = resolve_input(&a.input);
    require(&[&a.checkpoint, &input])?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let images = if input.is_dir() {
        load_dir(&input)?
    } else {
        let stem = input.file_stem().unwrap().to_string_lossy().into_owned();
        let pages = load_stack(&input)?;
        let many = pages.len() > 1;
        pages
            .into_iter()
            .enumerate()
            .map(|(i, img)| {
                (
                    if many {
                        format!("{stem}_{i:03}")
                    } else {
                        stem.clone()
                    },
                    img,
                )
            })
            .collect()
    };
    let out = out_dir(a.out, runs, "predict")?;
    let encoding = match a.format {
        OutputFormat::Tiff => Encoding::TiffF32,
        OutputFormat::Raw => Encoding::RawF32,
    };
    for (id, img) in &images {
        let pred = predict(&ck, img, a.tile, a.margin)?;
        save_image(
            &pred,
            &out.join(format!("{id}.{}", encoding.extension())),
            encoding,
        )?;
    }
    println!(
        "{} prediction(s) written to {}",
        images.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_evaluate(a: EvaluateArgs, runs: &Path) -> Result<()> {
    let (pred_dir, gt_dir) = (resolve_input(&a.pred), resolve_input(&a.gt));
    require(&[&pred_dir, &gt_dir])?;
    let preds = load_dir(&pred_dir)?;
    let gts = load_dir(&gt_dir)?;
    let missing: Vec<PathBuf> = preds
        .iter()
        .filter(|(id, _)| !gts.iter().any(|(g, _)| g == id))
        .map(|(id, _)| gt_dir.join(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let items: Vec<_> = preds
        .into_iter()
        .map(|(id, p)| {
            let gt = gts.iter().find(|(g, _)| *g == id).unwrap().1.clone();
            (id, p, gt)
        })
        .collect();
    let report = score(&items, a.range, format!("range={}", a.range))?;
    let out = out_dir(a.out, runs, "evaluate")?;
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_reproduce(a: ReproduceArgs, runs: &Path) -> Result<()> {
    let plan = match (&a.manifest, &a.preset) {
        (Some(path), _) => {
            require(&[path])?;
            ReproducePlan::load(path)?
        }
        (None, Some(name)) => {
            let data = a.data_dir.as_deref().map(resolve_input);
            if let Some(d) = &data {
                require(&[d])?;
            }
            ReproducePlan::preset(name, a.seed, data.as_deref())?
        }
        (None, None) => return Err(Error::config("preset", "give a preset name or --manifest")),
    };
    let out = out_dir(a.out, runs, &format!("reproduce-{}", plan.preset))?;
    let summary = reproduce(&plan, &out)?;
    print!("{}", summary.table.render());
    for r in &summary.runs {
        if let Some(s) = r.salt_retention {
            println!("{}: {:.1}% of salt pixels kept", r.name, 100.0 * s);
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
