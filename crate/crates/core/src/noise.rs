//! Seeded synthetic corruption: Gaussian, Poisson, salt-and-pepper, clip.
//!
//! All stages draw from one [`crate::rng::Rng`] stream, consuming it in
//! row-major pixel order, so a `(NoiseSpec, image)` pair always produces the
//! same bits.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{io, ImageTensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SIMULATION_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseStage {
    Gaussian { sigma: f64 },
    Poisson,
    SaltPepper { p: f64, low: f32, high: f32 },
    Clip { lo: f32, hi: f32 },
}

impl NoiseStage {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseStage::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::param(format!("gaussian sigma must be >= 0, got {sigma}")),
            ),
            NoiseStage::SaltPepper { p, low, high } => {
                if !(0.0..=1.0).contains(&p) {
                    Err(Error::param(format!(
                        "salt-and-pepper fraction must be in [0, 1], got {p}"
                    )))
                } else if !(low.is_finite() && high.is_finite()) {
                    Err(Error::param("salt-and-pepper levels must be finite"))
                } else {
                    Ok(())
                }
            }
            NoiseStage::Clip { lo, hi } if !(lo < hi) => Err(Error::param(format!(
                "clip range needs lo < hi, got [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        }
    }
}

/// An ordered corruption pipeline plus the seed of its random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub seed: u64,
    pub stages: Vec<NoiseStage>,
}

impl NoiseSpec {
    /// Poisson shot noise on the raw intensities, Gaussian read noise
    /// (sigma 10), clipping to `[0, 255]`, then `percent`% impulse pixels.
    pub fn mouse_sp(percent: f64, seed: u64) -> Self {
        Self {
            seed,
            stages: vec![
                NoiseStage::Poisson,
                NoiseStage::Gaussian { sigma: 10.0 },
                NoiseStage::Clip { lo: 0.0, hi: 255.0 },
                NoiseStage::SaltPepper {
                    p: percent / 100.0,
                    low: 0.0,
                    high: 255.0,
                },
            ],
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            seed,
            stages: vec![NoiseStage::Gaussian { sigma }],
        }
    }

    /// Named corruption protocols: `mouse-sp3`, `mouse-sp6`, `mouse-sp12`,
    /// `mouse-g20`, `flywing-g70`.
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        Some(match name {
            "mouse-sp3" => Self::mouse_sp(3.0, seed),
            "mouse-sp6" => Self::mouse_sp(6.0, seed),
            "mouse-sp12" => Self::mouse_sp(12.0, seed),
            "mouse-g20" => Self::gaussian(20.0, seed),
            "flywing-g70" => Self::gaussian(70.0, seed),
            _ => return None,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            stages: self.stages.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::param("noise spec has no stages"));
        }
        self.stages.iter().try_for_each(NoiseStage::validate)
    }
}

pub fn add_gaussian(img: &ImageTensor, sigma: f64, rng: &mut Rng) -> Result<ImageTensor> {
    NoiseStage::Gaussian { sigma }.validate()?;
    let values = img
        .values()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            (v as f64 + sigma * z) as f32
        })
        .collect();
    Ok(ImageTensor::new(img.height(), img.width(), values)?.with_source_range(img.source_range()))
}

/// Replaces each pixel by a Poisson draw with the pixel value as rate.
pub fn add_poisson(img: &ImageTensor, rng: &mut Rng) -> Result<ImageTensor> {
    if let Some(i) = img.values().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!(
            "poisson rate must be >= 0, pixel {i} is {}",
            img.values()[i]
        )));
    }
    let values = img
        .values()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                0.0
            } else {
                let d = Poisson::new(v as f64).expect("positive finite rate");
                d.sample(rng) as f32
            }
        })
        .collect();
    Ok(ImageTensor::new(img.height(), img.width(), values)?.with_source_range(img.source_range()))
}

/// Flat pixel indices forced to the high and low level by an impulse stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImpulseTrace {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

/// Sets exactly `round(p * N)` distinct pixels, chosen uniformly without
/// replacement, to `low` or `high` with equal probability.
pub fn add_salt_pepper(
    img: &ImageTensor,
    p: f64,
    low: f32,
    high: f32,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    add_salt_pepper_traced(img, p, low, high, rng).map(|(out, _)| out)
}

pub fn add_salt_pepper_traced(
    img: &ImageTensor,
    p: f64,
    low: f32,
    high: f32,
    rng: &mut Rng,
) -> Result<(ImageTensor, ImpulseTrace)> {
    NoiseStage::SaltPepper { p, low, high }.validate()?;
    let n = img.len();
    let count = (p * n as f64).round() as usize;
    let mut chosen = rand::seq::index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    let mut values = img.values().to_vec();
    let mut trace = ImpulseTrace::default();
    for idx in chosen {
        if rng.random_bool(0.5) {
            values[idx] = high;
            trace.high.push(idx);
        } else {
            values[idx] = low;
            trace.low.push(idx);
        }
    }
    let out =
        ImageTensor::new(img.height(), img.width(), values)?.with_source_range(img.source_range());
    Ok((out, trace))
}

pub fn clip(img: &ImageTensor, lo: f32, hi: f32) -> Result<ImageTensor> {
    NoiseStage::Clip { lo, hi }.validate()?;
    Ok(img.map(|v| v.clamp(lo, hi)))
}

/// Applies the stages of `spec` in order.
pub fn corrupt(img: &ImageTensor, spec: &NoiseSpec) -> Result<ImageTensor> {
    corrupt_traced(img, spec).map(|(out, _)| out)
}

/// Like [`corrupt`], also returning the pixels set by the last impulse
/// stage (if any).
pub fn corrupt_traced(
    img: &ImageTensor,
    spec: &NoiseSpec,
) -> Result<(ImageTensor, Option<ImpulseTrace>)> {
    spec.validate()?;
    let mut rng = rng::rng_from_seed(spec.seed);
    let mut cur = img.clone();
    let mut trace = None;
    for stage in &spec.stages {
        cur = match *stage {
            NoiseStage::Gaussian { sigma } => add_gaussian(&cur, sigma, &mut rng)?,
            NoiseStage::Poisson => add_poisson(&cur, &mut rng)?,
            NoiseStage::SaltPepper { p, low, high } => {
                let (out, t) = add_salt_pepper_traced(&cur, p, low, high, &mut rng)?;
                trace = Some(t);
                out
            }
            NoiseStage::Clip { lo, hi } => clip(&cur, lo, hi)?,
        };
    }
    Ok((cur, trace))
}

/// Sub-seed for one file of a dataset.
pub fn file_seed(seed: u64, file_name: &str) -> u64 {
    rng::derive_seed(seed, file_name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationEntry {
    pub file: String,
    pub sub_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub version: u32,
    pub spec: NoiseSpec,
    pub entries: Vec<SimulationEntry>,
}

impl SimulationManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("simulation manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("simulation", e.to_string()))
    }
}

pub const SIMULATION_MANIFEST: &str = "simulation.toml";

/// Corrupts every image in `input_dir` into `output_dir` as raw `f32`
/// (`<stem>.raw` + header) and writes `simulation.toml`. Unreadable files are
/// recorded in the manifest and skipped.
pub fn simulate_dataset(
    input_dir: &Path,
    output_dir: &Path,
    spec: &NoiseSpec,
) -> Result<SimulationManifest> {
    spec.validate()?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut entries = Vec::new();
    for path in io::list_images(input_dir)? {
        let file = path.file_name().unwrap().to_string_lossy().into_owned();
        let sub_seed = file_seed(spec.seed, &file);
        let result = io::load_image(&path).and_then(|img| {
            let noisy = corrupt(&img, &spec.with_seed(sub_seed))?;
            let out: PathBuf = output_dir.join(Path::new(&file).with_extension("raw"));
            io::save_image(&noisy, &out, io::Encoding::RawF32)?;
            Ok(out.file_name().unwrap().to_string_lossy().into_owned())
        });
        let (output, error) = match result {
            Ok(out) => (Some(out), None),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                (None, Some(e.to_string()))
            }
        };
        entries.push(SimulationEntry {
            file,
            sub_seed,
            output,
            error,
        });
    }
    let manifest = SimulationManifest {
        version: SIMULATION_MANIFEST_VERSION,
        spec: spec.clone(),
        entries,
    };
    let path = output_dir.join(SIMULATION_MANIFEST);
    std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
