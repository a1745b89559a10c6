//! The planar RGB picture that flows between every stage of the pipeline.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHANNELS: usize = 3;

/// An `H×W` RGB image with channel-planar `f64` samples in `[0, 1]`.
///
/// Plane order is R, G, B; within a plane samples are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Validates dimensions and that every sample is finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary samples, clamping into `[0, 1]`.
    ///
    /// Non-finite samples are rejected rather than clamped.
    pub fn from_unclamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("in image samples".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, data)
    }

    /// `f(channel, y, x)` for every sample; result is clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_unclamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = self.dims();
        let mut data = self.data.clone();
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.get(c, y, w - 1 - x);
                }
            }
        }
        Image { height: h, width: w, data }
    }

    pub fn flip_vertical(&self) -> Image {
        let (h, w) = self.dims();
        let mut data = self.data.clone();
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.get(c, h - 1 - y, x);
                }
            }
        }
        Image { height: h, width: w, data }
    }

    /// A `[1, 3, H, W]` tensor of the samples.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(vec![1, CHANNELS, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Stacks equally sized images into a `[n, 3, H, W]` batch.
    pub fn batch_tensor<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::InvalidParameter("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_shape(img)?;
            data.extend(img.data.iter().map(|&v| T::lit(v)));
        }
        Ok(Tensor::new(vec![images.len(), CHANNELS, first.height, first.width], data))
    }

    /// Reads batch item `index` of a `[n, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != CHANNELS || index >= n {
            return Err(Error::ShapeMismatch(format!("tensor {:?} has no RGB item {index}", t.shape())));
        }
        Self::from_unclamped(h, w, t.item(index).iter().map(|v| v.as_f64()).collect())
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!("image dimensions {height}x{width} must be positive")));
    }
    if len != CHANNELS * height * width {
        return Err(Error::ShapeMismatch(format!("{len} samples for a {height}x{width} RGB image")));
    }
    Ok(())
}
