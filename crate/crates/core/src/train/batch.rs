use rand::Rng as _;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::masking::{mask_patch, BlindSpotBatch, ReplacementStrategy};
use crate::model::Tensor;
use crate::rng::Rng;

/// Network-ready masked crops and their loss targets.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub inputs: Tensor,
    pub spots: Vec<BlindSpotBatch>,
}

pub fn check_pool(pool: &[ImageTensor], crop: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::param("training pool is empty"));
    }
    for (i, img) in pool.iter().enumerate() {
        if img.height() < crop || img.width() < crop {
            return Err(Error::config(
                "train.patch_crop",
                format!(
                    "crop {crop} exceeds training patch {i} of shape {:?}",
                    img.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Draws `batch_size` crops with replacement at uniform offsets and masks each.
pub fn sample_training_batch(
    pool: &[ImageTensor],
    crop: usize,
    batch_size: usize,
    mask_fraction: f64,
    strategy: &ReplacementStrategy,
    rng: &mut Rng,
) -> Result<TrainingBatch> {
    check_pool(pool, crop)?;
    let mut inputs = Vec::with_capacity(batch_size);
    let mut spots = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let src = &pool[rng.random_range(0..pool.len())];
        let r = rng.random_range(0..=src.height() - crop);
        let c = rng.random_range(0..=src.width() - crop);
        let patch = src.crop(r, c, crop, crop)?;
        let (masked, s) = mask_patch(&patch, mask_fraction, strategy, rng)?;
        inputs.push(masked);
        spots.push(s);
    }
    Ok(TrainingBatch {
        inputs: Tensor::from_images(&inputs)?,
        spots,
    })
}
