use crate::error::{Error, Result};

/// A single-channel 2D image of `f32` intensities stored row-major.
///
/// `source_range` remembers the value range of the on-disk encoding the image
/// was read from (e.g. `(0, 255)` for 8-bit PNG), when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    values: Vec<f32>,
    source_range: Option<(f32, f32)>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} image",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at pixel ({}, {})",
                values[i],
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            source_range: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
            source_range: None,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("from_fn produced an invalid image")
    }

    pub fn with_source_range(mut self, range: Option<(f32, f32)>) -> Self {
        self.source_range = range;
        self
    }

    pub fn source_range(&self) -> Option<(f32, f32)> {
        self.source_range
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(value.is_finite());
        self.values[row * self.width + col] = value;
    }

    /// Applies `f` to every pixel. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let values: Vec<f32> = self.values.iter().map(|&v| f(v)).collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "map produced non-finite values"
        );
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({row}, {col}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            values.extend_from_slice(&self.values[start..start + width]);
        }
        Ok(Self {
            height,
            width,
            values,
            source_range: self.source_range,
        })
    }

    /// Pads with mirror reflection (edge pixel not repeated). A pad larger
    /// than the image folds back and forth.
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let height = self.height + top + bottom;
        let width = self.width + left + right;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = reflect_index(r as isize - top as isize, self.height);
            for c in 0..width {
                let sc = reflect_index(c as isize - left as isize, self.width);
                values.push(self.values[sr * self.width + sc]);
            }
        }
        Self {
            height,
            width,
            values,
            source_range: self.source_range,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(c, r))
            .with_source_range(self.source_range)
    }

    /// Rotation by 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.width, self.height, |r, c| self.get(c, w - 1 - r))
            .with_source_range(self.source_range)
    }

    /// Mirror along the vertical axis (left-right flip).
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.height, self.width, |r, c| self.get(r, w - 1 - c))
            .with_source_range(self.source_range)
    }
}

/// Mirror-reflects an index into `0..n` (`-1 -> 1`, `n -> n - 2`). For
/// `n == 1` every index maps to 0.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}
