use crate::data::ImageTensor;

/// The eight symmetries of the square: rotations by 0, 90, 180 and 270
/// degrees, each unflipped and left-right flipped (in that order).
pub fn augment_8fold(img: &ImageTensor) -> Vec<ImageTensor> {
    let mut out = Vec::with_capacity(8);
    let mut r = img.clone();
    for _ in 0..4 {
        out.push(r.clone());
        out.push(r.flip_horizontal());
        r = r.rot90();
    }
    out
}

pub fn augment_pool(pool: &[ImageTensor]) -> Vec<ImageTensor> {
    pool.iter().flat_map(augment_8fold).collect()
}
