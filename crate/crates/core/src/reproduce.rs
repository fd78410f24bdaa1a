//! End-to-end desk-scale experiments: synthesize or read clean images,
//! corrupt them, split, train one network per method, predict the test
//! images and compare PSNR.
//!
//! Everything a run depends on is captured in a [`ReproducePlan`], written
//! as `manifest.toml` in the output directory. Running the same plan again
//! reproduces the noise files, the split and the training histories bit for
//! bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::io::{list_images, load_image, save_image, Encoding};
use crate::data::synth::smooth_blobs;
use crate::data::{split_items, ImageTensor, Split};
use crate::error::{Error, Result};
use crate::eval::{predict, score, ComparisonTable, EvalReport};
use crate::model::checkpoint;
use crate::noise::{
    corrupt_traced, file_seed, simulate_dataset, NoiseSpec, NoiseStage, SIMULATION_MANIFEST_VERSION,
};
use crate::rng::derive_seed;
use crate::train::{train, TrainHistory};

pub const PLAN_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPLIT_FILE: &str = "split.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const PRESETS: [&str; 3] = ["sp-ordering", "gaussian-gain", "smoke"];

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corpus {
    SmoothBlobs {
        count: usize,
        height: usize,
        width: usize,
        seed: u64,
    },
    Directory {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodRun {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatVersions {
    pub plan: u32,
    pub simulation: u32,
    pub checkpoint: u32,
    pub raw_image: u32,
}

impl FormatVersions {
    pub fn current() -> Self {
        Self {
            plan: PLAN_VERSION,
            simulation: SIMULATION_MANIFEST_VERSION,
            checkpoint: checkpoint::FORMAT_VERSION,
            raw_image: crate::data::io::RAW_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproducePlan {
    pub version: u32,
    pub preset: String,
    /// Column label of the comparison table.
    pub dataset: String,
    pub seed: u64,
    pub split_seed: u64,
    pub formats: FormatVersions,
    pub corpus: Corpus,
    pub noise: NoiseSpec,
    pub runs: Vec<MethodRun>,
}

impl ReproducePlan {
    /// Builds a named preset. `data_dir` replaces the synthetic corpus with
    /// the clean images of a directory.
    pub fn preset(name: &str, seed: u64, data_dir: Option<&Path>) -> Result<Self> {
        let (count, side, noise, dataset, methods, overrides): (
            usize,
            usize,
            NoiseSpec,
            &str,
            &[&str],
            &[&str],
        ) = match name {
            "sp-ordering" => (
                64,
                128,
                NoiseSpec::mouse_sp(6.0, derive_seed(seed, "noise")),
                "blobs-sp6",
                &["n2v-default", "n2v-uwocp"],
                &[],
            ),
            "gaussian-gain" => (
                64,
                128,
                NoiseSpec::gaussian(20.0, derive_seed(seed, "noise")),
                "blobs-g20",
                &["n2v2-median"],
                &[],
            ),
            "smoke" => (
                12,
                64,
                NoiseSpec::mouse_sp(6.0, derive_seed(seed, "noise")),
                "blobs-sp6-small",
                &["n2v-default", "n2v2-median"],
                &[
                    "model.base_features=4",
                    "train.epochs=2",
                    "train.steps_per_epoch=3",
                    "train.batch_size=4",
                    "train.patch_crop=32",
                    "eval.tile=64",
                    "eval.margin=16",
                ],
            ),
            _ => {
                return Err(Error::config(
                    "preset",
                    format!(
                        "unknown reproduce preset {name:?}; known: {}",
                        PRESETS.join(", ")
                    ),
                ))
            }
        };
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let runs = methods
            .iter()
            .map(|m| {
                Ok(MethodRun {
                    name: m.to_string(),
                    config: RunConfig::from_presets(Some("desk"), Some(m), seed, &overrides)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = match data_dir {
            Some(p) => Corpus::Directory {
                path: p.to_path_buf(),
            },
            None => Corpus::SmoothBlobs {
                count,
                height: side,
                width: side,
                seed: derive_seed(seed, "corpus"),
            },
        };
        Ok(Self {
            version: PLAN_VERSION,
            preset: name.to_string(),
            dataset: dataset.to_string(),
            seed,
            split_seed: derive_seed(seed, "split"),
            formats: FormatVersions::current(),
            corpus,
            noise,
            runs,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("manifest", e.message().to_string()))?;
        let plan: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().message().to_string();
            Error::config(e.path().to_string(), message)
        })?;
        if plan.version != PLAN_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported manifest version {}", plan.version),
            ));
        }
        if plan.formats != FormatVersions::current() {
            return Err(Error::config(
                "formats",
                format!(
                    "manifest was written for {:?}, this build uses {:?}",
                    plan.formats,
                    FormatVersions::current()
                ),
            ));
        }
        for (i, run) in plan.runs.iter().enumerate() {
            run.config
                .validate()
                .map_err(|e| Error::config(format!("runs[{i}].config"), e.to_string()))?;
        }
        plan.noise.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Item-level split of a reproduce run, by file stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSplit {
    pub version: u32,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub report: EvalReport,
    /// Share of salt pixels (test set) predicted within 10 of the salt value.
    pub salt_retention: Option<f64>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ReproduceSummary {
    pub input: EvalReport,
    pub runs: Vec<RunResult>,
    pub table: ComparisonTable,
}

impl ReproduceSummary {
    pub fn run(&self, name: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.name == name)
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    input_mean_psnr: Option<f64>,
    runs: BTreeMap<&'a str, RunSummary>,
}

#[derive(Serialize)]
struct RunSummary {
    mean_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    salt_retention: Option<f64>,
    best_epoch: usize,
}

struct Item {
    id: String,
    file: String,
    clean: ImageTensor,
    noisy: ImageTensor,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn stem(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string())
}

/// The brightest impulse value of the noise pipeline, if it has one.
fn salt_value(spec: &NoiseSpec) -> Option<f32> {
    spec.stages.iter().rev().find_map(|s| match *s {
        NoiseStage::SaltPepper { high, .. } => Some(high),
        _ => None,
    })
}

fn salt_retention(
    items: &[&Item],
    preds: &[ImageTensor],
    spec: &NoiseSpec,
    salt: f32,
) -> Result<f64> {
    let (mut kept, mut total) = (0usize, 0usize);
    for (item, pred) in items.iter().zip(preds) {
        let (_, trace) = corrupt_traced(
            &item.clean,
            &spec.with_seed(file_seed(spec.seed, &item.file)),
        )?;
        let trace = trace.expect("spec has an impulse stage");
        for &i in &trace.high {
            total += 1;
            if (pred.values()[i] - salt).abs() <= 10.0 {
                kept += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    })
}

/// Executes `plan`, writing every artifact under `out_dir`.
pub fn reproduce(plan: &ReproducePlan, out_dir: &Path) -> Result<ReproduceSummary> {
    create_dir(out_dir)?;
    write(&out_dir.join(MANIFEST_FILE), &plan.to_toml())?;

    let clean_dir = match &plan.corpus {
        Corpus::Directory { path } => path.clone(),
        Corpus::SmoothBlobs {
            count,
            height,
            width,
            seed,
        } => {
            let dir = out_dir.join("clean");
            create_dir(&dir)?;
            for (i, img) in smooth_blobs(*count, *height, *width, *seed)
                .iter()
                .enumerate()
            {
                save_image(img, &dir.join(format!("blob_{i:03}.raw")), Encoding::RawF32)?;
            }
            dir
        }
    };
    let noisy_dir = out_dir.join("noisy");
    log::info!("simulating noise into {}", noisy_dir.display());
    let sim = simulate_dataset(&clean_dir, &noisy_dir, &plan.noise)?;
    let clean_files: BTreeMap<String, PathBuf> = list_images(&clean_dir)?
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    let mut items = Vec::new();
    for e in &sim.entries {
        let Some(out) = &e.output else { continue };
        items.push(Item {
            id: stem(&e.file),
            file: e.file.clone(),
            clean: load_image(&clean_files[&e.file])?,
            noisy: load_image(&noisy_dir.join(out))?,
        });
    }
    if items.len() < 3 {
        return Err(Error::param(format!(
            "{} usable images; need at least 3",
            items.len()
        )));
    }

    let assignment = split_items(items.len(), plan.split_seed)?;
    let pick = |s: Split| -> Vec<&Item> {
        items
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == s)
            .map(|(i, _)| i)
            .collect()
    };
    let (train_items, val_items, test_items) =
        (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let ids = |v: &[&Item]| v.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
    let split = ItemSplit {
        version: 1,
        seed: plan.split_seed,
        train: ids(&train_items),
        val: ids(&val_items),
        test: ids(&test_items),
    };
    write(
        &out_dir.join(SPLIT_FILE),
        &toml::to_string(&split).expect("split serializes"),
    )?;

    let train_pool: Vec<ImageTensor> = train_items.iter().map(|i| i.noisy.clone()).collect();
    let val_pool: Vec<ImageTensor> = val_items.iter().map(|i| i.noisy.clone()).collect();
    let input_policy = plan
        .runs
        .first()
        .map(|r| r.config.eval.range)
        .unwrap_or(crate::eval::RangePolicy::GroundTruth);
    let input = score(
        &test_items
            .iter()
            .map(|i| (i.id.clone(), i.noisy.clone(), i.clean.clone()))
            .collect::<Vec<_>>(),
        input_policy,
        "noisy input".into(),
    )?;

    let salt = salt_value(&plan.noise);
    let mut runs = Vec::new();
    for run in &plan.runs {
        let dir = out_dir.join(&run.name);
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        write(&dir.join("config.toml"), &run.config.to_toml())?;
        log::info!("training {}", run.name);
        let start = Instant::now();
        let outcome = train(&run.config.model, &run.config.train, &train_pool, &val_pool)?;
        let seconds = start.elapsed().as_secs_f64();
        outcome.checkpoint.save(&dir.join("model.ckpt"))?;
        write(&dir.join(HISTORY_FILE), &outcome.history.to_csv())?;
        write(&dir.join("timing.csv"), &outcome.history.timing_csv())?;

        let eval = &run.config.eval;
        let mut preds = Vec::with_capacity(test_items.len());
        for it in &test_items {
            let p = predict(&outcome.checkpoint, &it.noisy, eval.tile, eval.margin)?;
            save_image(
                &p,
                &pred_dir.join(format!("{}.raw", it.id)),
                Encoding::RawF32,
            )?;
            preds.push(p);
        }
        let scored: Vec<_> = test_items
            .iter()
            .zip(&preds)
            .map(|(it, p)| (it.id.clone(), p.clone(), it.clean.clone()))
            .collect();
        let report = score(&scored, eval.range, run.name.clone())?;
        write(&dir.join("report.csv"), &report.to_csv())?;
        let salt_retention = salt
            .map(|s| salt_retention(&test_items, &preds, &plan.noise, s))
            .transpose()?;
        log::info!(
            "{}: mean PSNR {:?} dB, best epoch {}, {:.0}s",
            run.name,
            report.mean_psnr,
            outcome.best_epoch,
            seconds
        );
        runs.push(RunResult {
            name: run.name.clone(),
            report,
            salt_retention,
            history: outcome.history,
            best_epoch: outcome.best_epoch,
            seconds,
        });
    }

    let mut rows = vec![("input".to_string(), vec![input.mean_psnr])];
    rows.extend(
        runs.iter()
            .map(|r| (r.name.clone(), vec![r.report.mean_psnr])),
    );
    let table = ComparisonTable {
        datasets: vec![plan.dataset.clone()],
        rows,
    };
    write(&out_dir.join("table.txt"), &table.render())?;
    let summary = SummaryFile {
        input_mean_psnr: input.mean_psnr,
        runs: runs
            .iter()
            .map(|r| {
                (
                    r.name.as_str(),
                    RunSummary {
                        mean_psnr: r.report.mean_psnr,
                        salt_retention: r.salt_retention,
                        best_epoch: r.best_epoch,
                    },
                )
            })
            .collect(),
    };
    write(
        &out_dir.join("summary.toml"),
        &toml::to_string(&summary).expect("summary serializes"),
    )?;
    Ok(ReproduceSummary { input, runs, table })
}
