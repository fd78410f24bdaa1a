use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Pixel standardization statistics of a training pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0,
    };

    pub fn normalize(&self, img: &ImageTensor) -> ImageTensor {
        img.map(|v| ((v as f64 - self.mean) / self.std) as f32)
    }

    pub fn denormalize(&self, img: &ImageTensor) -> ImageTensor {
        img.map(|v| (v as f64 * self.std + self.mean) as f32)
    }
}

/// Mean and (population) standard deviation over every pixel of `pool`.
pub fn compute_norm_stats(pool: &[ImageTensor]) -> Result<NormStats> {
    let n: usize = pool.iter().map(|i| i.len()).sum();
    if n == 0 {
        return Err(Error::param("cannot compute statistics of an empty pool"));
    }
    let mean = pool
        .iter()
        .flat_map(|i| i.values())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = pool
        .iter()
        .flat_map(|i| i.values())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(NormStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}
