use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// A stack of feature maps in channel-major `(C, N, H, W)` layout.
///
/// Keeping the channel outermost makes a convolution a single GEMM over all
/// batch items and turns channel concatenation into appending.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn from_data(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Self {
        assert_eq!(
            data.len(),
            channels * batch * height * width,
            "tensor data length"
        );
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    /// Single-channel batch from equally sized images.
    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::param("empty image batch"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.shape() != (h, w) {
                return Err(Error::shape(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w),
                    img.shape()
                )));
            }
            data.extend_from_slice(img.values());
        }
        Ok(Self::from_data(1, images.len(), h, w, data))
    }

    /// Splits a single-channel tensor back into images.
    pub fn to_images(&self) -> Result<Vec<ImageTensor>> {
        if self.channels != 1 {
            return Err(Error::shape(format!(
                "{} channels, expected 1",
                self.channels
            )));
        }
        self.data
            .chunks_exact(self.plane_len())
            .map(|p| ImageTensor::new(self.height, self.width, p.to_vec()))
            .collect()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.batch, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Pixels per channel across the batch.
    #[inline]
    pub fn channel_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn plane(&self, channel: usize, item: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (channel * self.batch + item) * p;
        &self.data[start..start + p]
    }

    pub fn get(&self, channel: usize, item: usize, row: usize, col: usize) -> f32 {
        self.data[((channel * self.batch + item) * self.height + row) * self.width + col]
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(mut self, other: &Tensor) -> Tensor {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width),
            "concat of mismatched tensors"
        );
        self.data.extend_from_slice(&other.data);
        self.channels += other.channels;
        self
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `channels` channels and the rest.
    pub fn split_channels(mut self, channels: usize) -> (Tensor, Tensor) {
        assert!(channels <= self.channels);
        let rest = self.data.split_off(channels * self.channel_len());
        let tail = Tensor::from_data(
            self.channels - channels,
            self.batch,
            self.height,
            self.width,
            rest,
        );
        self.channels = channels;
        (self, tail)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
