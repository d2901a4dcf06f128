//! Dense layers with explicit forward and backward passes.
//!
//! Gradients are accumulated into a value of the same type as the layer
//! (`Conv2d::zeros_like`), so a whole network can double as its own
//! gradient buffer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `channels x height x width` activation tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn relu(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| v.max(T::zero())).collect(),
            ..*self
        }
    }

    /// Spatial mean per channel.
    pub fn global_average(&self) -> Vec<T> {
        let n = T::count(self.plane());
        (0..self.channels)
            .map(|c| self.channel(c).iter().copied().sum::<T>() / n)
            .collect()
    }
}

/// Zero the upstream gradient wherever the ReLU input was non-positive.
pub fn relu_backward<T: Scalar>(pre: &FeatureMap<T>, grad: &mut FeatureMap<T>) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z * std)
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride);
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in &mut conv.weight {
            *w = normal(rng, std);
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel, self.stride)
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    // Valid output range along one axis for kernel offset `k`:
    // out positions `o` whose input `o*stride + k - pad` lies in `0..n`.
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.padding as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = ((n_in as isize - 1 - shift).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut y = FeatureMap::zeros(self.out_channels, oh, ow);
        let s = self.stride;
        for o in 0..self.out_channels {
            let b = self.bias[o];
            let out = y.channel_mut(o);
            out.iter_mut().for_each(|v| *v = b);
            for i in 0..self.in_channels {
                let inp = x.channel(i);
                for ky in 0..self.kernel {
                    let (y_lo, y_hi) = self.valid_range(ky, x.height, oh);
                    for kx in 0..self.kernel {
                        let w = self.weight[self.widx(o, i, ky, kx)];
                        let (x_lo, x_hi) = self.valid_range(kx, x.width, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - self.padding;
                            let row_in = &inp[iy * x.width..(iy + 1) * x.width];
                            let row_out = &mut out[oy * ow..(oy + 1) * ow];
                            for ox in x_lo..x_hi {
                                row_out[ox] += w * row_in[ox * s + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: &FeatureMap<T>, dy: &FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
        let (oh, ow) = (dy.height, dy.width);
        let s = self.stride;
        for o in 0..self.out_channels {
            let g_out = dy.channel(o);
            grad.bias[o] += g_out.iter().copied().sum::<T>();
            for i in 0..self.in_channels {
                let inp = x.channel(i);
                for ky in 0..self.kernel {
                    let (y_lo, y_hi) = self.valid_range(ky, x.height, oh);
                    for kx in 0..self.kernel {
                        let wi = self.widx(o, i, ky, kx);
                        let w = self.weight[wi];
                        let (x_lo, x_hi) = self.valid_range(kx, x.width, ow);
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - self.padding;
                            let row_g = &g_out[oy * ow..(oy + 1) * ow];
                            let base = iy * x.width;
                            let dx_c = dx.channel_mut(i);
                            for ox in x_lo..x_hi {
                                let ix = ox * s + kx - self.padding;
                                acc += row_g[ox] * inp[base + ix];
                                dx_c[base + ix] += w * row_g[ox];
                            }
                        }
                        grad.weight[wi] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    /// Glorot-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_features, out_features);
        let std = (2.0 / (in_features + out_features) as f64).sqrt();
        for w in &mut layer.weight {
            *w = normal(rng, std);
        }
        layer
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_features, self.out_features)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_features {
            return Err(Error::shape(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect())
    }

    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Self) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_features];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad.weight[o * self.in_features..(o + 1) * self.in_features];
            for j in 0..self.in_features {
                grow[j] += g * x[j];
                dx[j] += g * row[j];
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let mut y = FeatureMap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += conv.weight[conv.widx(o, i, ky, kx)]
                                    * x.data[(i * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let mut m = FeatureMap::zeros(c, h, w);
        m.data.iter_mut().for_each(|v| *v = normal(rng, 1.0));
        m
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, h, w) in &[(3, 1, 5, 4), (3, 2, 7, 6), (1, 2, 5, 5), (7, 4, 16, 8), (3, 2, 2, 1)] {
            let mut conv = Conv2d::<f64>::init(2, 3, k, s, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = random_map(&mut rng, 2, h, w);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            assert_eq!((fast.height, fast.width), (slow.height, slow.width));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::init(2, 2, 3, 2, &mut rng);
        let x = random_map(&mut rng, 2, 5, 4);
        let y = conv.forward(&x).unwrap();
        let dy = random_map(&mut rng, y.channels, y.height, y.width);
        let loss = |c: &Conv2d<f64>, x: &FeatureMap<f64>| -> f64 {
            c.forward(x).unwrap().data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &dy, &mut grad);
        let eps = 1e-6;
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[i] += eps;
            let mut m = conv.clone();
            m.weight[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_forward_and_shape_error() {
        let layer = Linear {
            in_features: 2,
            out_features: 1,
            weight: vec![2.0, -1.0],
            bias: vec![0.5],
        };
        assert_eq!(layer.forward(&[1.0, 3.0]).unwrap(), vec![-0.5]);
        assert!(matches!(layer.forward(&[1.0]), Err(Error::Shape(_))));
    }
}
