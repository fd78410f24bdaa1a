use crate::error::{Error, Result};
use crate::masking::BlindSpotBatch;
use crate::model::Tensor;

fn check(prediction: &Tensor, spots: &[BlindSpotBatch]) -> Result<usize> {
    if prediction.channels != 1 || prediction.batch != spots.len() {
        return Err(Error::shape(format!(
            "prediction holds {} items x {} channels, {} blind-spot sets given",
            prediction.batch,
            prediction.channels,
            spots.len()
        )));
    }
    let n: usize = spots.iter().map(BlindSpotBatch::len).sum();
    if n == 0 {
        return Err(Error::param("masked loss needs at least one blind spot"));
    }
    for s in spots {
        if s.patch_shape != (prediction.height, prediction.width) {
            return Err(Error::shape(
                "blind spots belong to a differently shaped patch",
            ));
        }
    }
    Ok(n)
}

/// Mean over every blind spot of `(prediction - original)^2`. `spots[i]`
/// describes batch item `i`; all other pixels are ignored.
pub fn masked_mse(prediction: &Tensor, spots: &[BlindSpotBatch]) -> Result<f64> {
    let n = check(prediction, spots)?;
    let mut sum = 0.0f64;
    for (item, s) in spots.iter().enumerate() {
        let plane = prediction.plane(0, item);
        for (&(r, c), &orig) in s.coords.iter().zip(&s.originals) {
            let d = plane[r * prediction.width + c] as f64 - orig as f64;
            sum += d * d;
        }
    }
    Ok(sum / n as f64)
}

/// Loss and its gradient with respect to `prediction` (zero off the mask).
pub fn masked_mse_with_grad(
    prediction: &Tensor,
    spots: &[BlindSpotBatch],
) -> Result<(f64, Tensor)> {
    let loss = masked_mse(prediction, spots)?;
    let n: usize = spots.iter().map(BlindSpotBatch::len).sum();
    let (c, b, h, w) = prediction.dims();
    let mut grad = Tensor::zeros(c, b, h, w);
    let scale = 2.0 / n as f64;
    for (item, s) in spots.iter().enumerate() {
        let base = item * h * w;
        for (&(r, col), &orig) in s.coords.iter().zip(&s.originals) {
            let i = base + r * w + col;
            grad.data[i] = (scale * (prediction.data[i] as f64 - orig as f64)) as f32;
        }
    }
    Ok((loss, grad))
}
