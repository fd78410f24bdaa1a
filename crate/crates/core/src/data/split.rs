//! Tiling and train/validation/test split protocols.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::ImageTensor;
use crate::error::{Error, Result};
use crate::rng;

pub const SPLIT_MANIFEST_VERSION: u32 = 1;

/// Tile size of the single-frame Convallaria protocol.
pub const CONVALLARIA1_TILE: usize = 128;

/// Train/val/test shares of the single-frame protocol (56, 4 and 4 of 64).
const SPLIT_WEIGHTS: [usize; 3] = [56, 4, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileAssignment {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub protocol: String,
    pub seed: u64,
    /// SHA-256 of the noisy source pixels (little-endian f32, row-major).
    pub source: String,
    pub image_shape: [usize; 2],
    pub tile_size: usize,
    pub tiles: Vec<TileAssignment>,
}

impl SplitManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.tiles
            .iter()
            .filter(|t| t.split == split)
            .map(|t| t.index)
            .collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.indices(Split::Train).len(),
            self.indices(Split::Val).len(),
            self.indices(Split::Test).len(),
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("split manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("split", e.to_string()))
    }
}

/// Non-overlapping row-major tiles; returns the top-left corner of each.
pub fn tile_image(img: &ImageTensor, tile: usize) -> Result<Vec<((usize, usize), ImageTensor)>> {
    if tile == 0 || !img.height().is_multiple_of(tile) || !img.width().is_multiple_of(tile) {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {tile}px tiles",
            img.height(),
            img.width()
        )));
    }
    let mut tiles = Vec::new();
    for r in (0..img.height()).step_by(tile) {
        for c in (0..img.width()).step_by(tile) {
            tiles.push(((r, c), img.crop(r, c, tile, tile)?));
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_image`].
pub fn assemble_tiles(
    tiles: &[((usize, usize), ImageTensor)],
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    let mut out = vec![0.0f32; height * width];
    for ((r0, c0), t) in tiles {
        if r0 + t.height() > height || c0 + t.width() > width {
            return Err(Error::shape("tile outside the assembled image"));
        }
        for r in 0..t.height() {
            let dst = (r0 + r) * width + c0;
            out[dst..dst + t.width()]
                .copy_from_slice(&t.values()[r * t.width()..(r + 1) * t.width()]);
        }
    }
    ImageTensor::new(height, width, out)
}

/// Splits `total` items 56:4:4 by largest remainder, then guarantees at
/// least one item per split by borrowing from the largest split.
pub fn split_counts(total: usize) -> Result<(usize, usize, usize)> {
    if total < 3 {
        return Err(Error::param(format!(
            "cannot split {total} items into train/val/test"
        )));
    }
    let denom: usize = SPLIT_WEIGHTS.iter().sum();
    let mut counts = SPLIT_WEIGHTS.map(|w| total * w / denom);
    let mut rest: Vec<(usize, usize)> = SPLIT_WEIGHTS
        .iter()
        .enumerate()
        .map(|(i, w)| (total * w % denom, i))
        .collect();
    // Largest remainder first; ties go to the earlier split.
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, i) in rest.iter().take(total - assigned) {
        counts[i] += 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok((counts[0], counts[1], counts[2]))
}

/// Shuffles `0..total` with `seed` and assigns the first chunk to train, the
/// next to validation and the rest to test. Result is indexed by item.
pub fn split_items(total: usize, seed: u64) -> Result<Vec<Split>> {
    let (n_train, n_val, _) = split_counts(total)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::derived_rng(seed, "split"));
    let mut assignment = vec![Split::Test; total];
    for (rank, &item) in order.iter().enumerate() {
        assignment[item] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(assignment)
}

pub fn image_fingerprint(img: &ImageTensor) -> String {
    let mut hasher = Sha256::new();
    for v in img.values() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Single-frame protocol: tile the noisy/ground-truth pair into 128px tiles
/// and assign them 56/4/4 (for 1024x1024 input) after a seeded shuffle.
pub fn split_convallaria1(
    noisy: &ImageTensor,
    gt: &ImageTensor,
    seed: u64,
) -> Result<SplitManifest> {
    if noisy.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "noisy {:?} and ground truth {:?} differ",
            noisy.shape(),
            gt.shape()
        )));
    }
    let tile = CONVALLARIA1_TILE;
    let (h, w) = noisy.shape();
    if h % tile != 0 || w % tile != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible into {tile}px tiles"
        )));
    }
    let cols = w / tile;
    let total = (h / tile) * cols;
    let assignment = split_items(total, seed)?;
    let tiles = assignment
        .into_iter()
        .enumerate()
        .map(|(index, split)| TileAssignment {
            index,
            row: (index / cols) * tile,
            col: (index % cols) * tile,
            split,
        })
        .collect();
    Ok(SplitManifest {
        version: SPLIT_MANIFEST_VERSION,
        protocol: "convallaria_1".into(),
        seed,
        source: image_fingerprint(noisy),
        image_shape: [h, w],
        tile_size: tile,
        tiles,
    })
}

/// Tiles of `img` belonging to `split` under `manifest`.
pub fn tiles_for(
    manifest: &SplitManifest,
    img: &ImageTensor,
    split: Split,
) -> Result<Vec<ImageTensor>> {
    if [img.height(), img.width()] != manifest.image_shape {
        return Err(Error::shape("image does not match the split manifest"));
    }
    manifest
        .tiles
        .iter()
        .filter(|t| t.split == split)
        .map(|t| img.crop(t.row, t.col, manifest.tile_size, manifest.tile_size))
        .collect()
}

/// Multi-frame protocol kept for comparability with older results: train on
/// all but the last five frames, validate on the last five, and score the
/// top-left 512x512 crop of every frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convallaria95 {
    pub train_frames: Vec<usize>,
    pub val_frames: Vec<usize>,
    pub eval_frames: Vec<usize>,
    pub eval_crop: [usize; 2],
}

pub fn convallaria95(frames: usize) -> Result<Convallaria95> {
    if frames <= 5 {
        return Err(Error::param(format!(
            "need more than 5 frames, got {frames}"
        )));
    }
    Ok(Convallaria95 {
        train_frames: (0..frames - 5).collect(),
        val_frames: (frames - 5..frames).collect(),
        eval_frames: (0..frames).collect(),
        eval_crop: [512, 512],
    })
}
