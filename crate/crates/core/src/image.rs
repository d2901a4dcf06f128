//! Three-channel floating point images in channel-major layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.set(y, x, c, f(y, x, c));
                }
            }
        }
        img
    }

    /// Channel-major buffer of length `3 * height * width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bilinear resampling with half-pixel centres (corners not aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::shape("cannot resize to or from an empty image"));
        }
        if (height, width) == self.size() {
            return Ok(self.clone());
        }
        let rows = interpolation_taps(self.height, height);
        let cols = interpolation_taps(self.width, width);
        let mut out = Self::zeros(height, width);
        for c in 0..CHANNELS {
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::lit(fy);
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = self.get(y0, x0, c) * (T::one() - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (T::one() - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (T::one() - fy) + bottom * fy);
                }
            }
        }
        Ok(out)
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Surround with `pad` pixels of zeros on every side.
    pub fn zero_pad(&self, pad: usize) -> Self {
        let mut out = Self::zeros(self.height + 2 * pad, self.width + 2 * pad);
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(y + pad, x + pad, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalized(&self, mean: [f64; 3], std: [f64; 3]) -> Self {
        let plane = self.height * self.width;
        let mut data = self.data.clone();
        for c in 0..CHANNELS {
            let (m, s) = (T::lit(mean[c]), T::lit(std[c]));
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Quantize to 8-bit RGB, clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| {
                let v = self.get(y as usize, x as usize, c).as_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self::from_fn(img.height() as usize, img.width() as usize, |y, x, c| {
            T::lit(f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0)
        })
    }
}

// (low index, high index, weight of high) for each output coordinate.
fn interpolation_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, w)
        })
        .collect()
}
