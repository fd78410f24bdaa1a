//! Image ingestion, normalization statistics, tiling and split protocols.

pub mod image;
pub mod io;
pub mod norm;
pub mod split;
pub mod synth;

pub use self::image::{reflect_index, ImageTensor};
pub use io::{list_images, load_image, load_stack, save_image, Encoding};
pub use norm::{compute_norm_stats, NormStats};
pub use split::{
    assemble_tiles, split_convallaria1, split_counts, split_items, tile_image, Split, SplitManifest,
};
