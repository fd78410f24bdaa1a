//! Synthetic clean images for desk-scale experiments: smooth bright blobs
//! (nucleus-like) on a dim, slowly varying background, in 8-bit range.

use rand::Rng as _;

use super::image::ImageTensor;
use crate::rng;

#[derive(Clone, Copy, Debug)]
struct Blob {
    row: f64,
    col: f64,
    sigma_r: f64,
    sigma_c: f64,
    amplitude: f64,
}

/// `count` images of `height x width`; image `i` depends only on
/// `(seed, i)`.
pub fn smooth_blobs(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| blob_image(height, width, rng::derive_seed(seed, &format!("blobs/{i}"))))
        .collect()
}

fn blob_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = rng::rng_from_seed(seed);
    let area = (height * width) as f64 / (128.0 * 128.0);
    let n_blobs = ((rng.random_range(8.0..16.0)) * area).round().max(1.0) as usize;
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            row: rng.random_range(0.0..height as f64),
            col: rng.random_range(0.0..width as f64),
            sigma_r: rng.random_range(3.0..9.0),
            sigma_c: rng.random_range(3.0..9.0),
            amplitude: rng.random_range(70.0..170.0),
        })
        .collect();
    let base = rng.random_range(15.0..30.0);
    let tilt_r = rng.random_range(-10.0..10.0) / height as f64;
    let tilt_c = rng.random_range(-10.0..10.0) / width as f64;
    ImageTensor::from_fn(height, width, |r, c| {
        let (r, c) = (r as f64, c as f64);
        let mut v = base + tilt_r * r + tilt_c * c;
        for b in &blobs {
            let dr = (r - b.row) / b.sigma_r;
            let dc = (c - b.col) / b.sigma_c;
            v += b.amplitude * (-0.5 * (dr * dr + dc * dc)).exp();
        }
        v.clamp(0.0, 230.0) as f32
    })
}
