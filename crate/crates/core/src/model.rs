//! Residual embedding network with per-resolution channel masks.
//!
//! Masked blocks are numbered from the output side: block `l = 1` is the
//! residual block closest to the embedding head, `l = L` the one closest to
//! the stem. Each block owns one mask vector per resolution level; a forward
//! pass at level `k` scales the block's output channels by
//! `sigmoid(M^l_k)` and ignores every other level's mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::layout::EmbeddingLayout;
use crate::nn::{normal, relu_backward, Conv2d, FeatureMap, Linear};
use crate::resolution::ResolutionLevel;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Small residual network that trains on a CPU in minutes.
    Desk,
    /// Four-stage layout with 256..2048 channels and a 16x8 final map.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub scale: Scale,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output channels `d^l` of each masked block, listed input side first.
    pub block_channels: Vec<usize>,
    /// Residual units stacked inside each masked block.
    pub units_per_block: Vec<usize>,
    /// Strides of every block but the last, input side first.
    pub inner_strides: Vec<usize>,
    pub last_stride: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            input_height: 32,
            input_width: 16,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            block_channels: vec![8, 16],
            units_per_block: vec![1, 1],
            inner_strides: vec![1],
            last_stride: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            scale: Scale::Full,
            input_height: 256,
            input_width: 128,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 4,
            block_channels: vec![256, 512, 1024, 2048],
            units_per_block: vec![3, 4, 6, 3],
            inner_strides: vec![1, 2, 2],
            last_stride: 1,
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Full => Self::full(),
        }
    }

    /// Number of masked residual blocks `L`.
    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// Stride of the block at input-side position `b`.
    pub fn stride_at(&self, b: usize) -> usize {
        if b + 1 == self.blocks() {
            self.last_stride
        } else {
            self.inner_strides[b]
        }
    }

    /// Channel count `d^l` of masked block `l` (1 = output side).
    pub fn mask_channels(&self) -> Vec<usize> {
        self.block_channels.iter().rev().copied().collect()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let l = self.blocks();
        if l == 0 {
            problems.push("backbone needs at least one residual block".to_string());
        }
        if self.units_per_block.len() != l {
            problems.push(format!(
                "units_per_block has {} entries for {l} blocks",
                self.units_per_block.len()
            ));
        }
        if l > 0 && self.inner_strides.len() != l - 1 {
            problems.push(format!(
                "inner_strides has {} entries, expected {}",
                self.inner_strides.len(),
                l - 1
            ));
        }
        if self.block_channels.iter().chain([&self.stem_channels]).any(|&c| c == 0) {
            problems.push("channel counts must be positive".to_string());
        }
        if self.units_per_block.iter().any(|&u| u == 0) {
            problems.push("every block needs at least one residual unit".to_string());
        }
        if self.inner_strides.iter().chain([&self.last_stride, &self.stem_stride]).any(|&s| s == 0) {
            problems.push("strides must be positive".to_string());
        }
        if self.stem_kernel % 2 == 0 {
            problems.push("stem kernel must be odd".to_string());
        }
        if self.input_height == 0 || self.input_width == 0 {
            problems.push("input size must be positive".to_string());
        }
        problems
    }

    /// Spatial size of the final feature map for the configured input.
    pub fn final_map_size(&self) -> (usize, usize) {
        let down = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let mut h = down(self.input_height, self.stem_kernel, self.stem_stride);
        let mut w = down(self.input_width, self.stem_kernel, self.stem_stride);
        for b in 0..self.blocks() {
            h = down(h, 3, self.stride_at(b));
            w = down(w, 3, self.stride_at(b));
        }
        (h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskState {
    /// Not yet introduced; the block output passes through unscaled.
    Inactive,
    Trainable,
    Frozen,
}

/// Learnable mask parameters `M^l_k` for every masked block and level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBank<T> {
    levels: usize,
    /// `d^l`, indexed by `l - 1`.
    channels: Vec<usize>,
    /// `[l - 1][k - 1][channel]`
    params: Vec<Vec<Vec<T>>>,
    state: Vec<MaskState>,
}

impl<T: Scalar> MaskBank<T> {
    /// Zero parameters, every block inactive.
    pub fn new(channels: Vec<usize>, levels: usize) -> Self {
        let params = channels
            .iter()
            .map(|&c| vec![vec![T::zero(); c]; levels])
            .collect();
        let state = vec![MaskState::Inactive; channels.len()];
        Self {
            levels,
            channels,
            params,
            state,
        }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn channels(&self, block: usize) -> usize {
        self.channels[block - 1]
    }

    pub fn params(&self, block: usize, level: usize) -> &[T] {
        &self.params[block - 1][level - 1]
    }

    pub fn params_mut(&mut self, block: usize, level: usize) -> &mut [T] {
        &mut self.params[block - 1][level - 1]
    }

    /// Every mask vector, ordered by block then level.
    pub fn all_params_mut(&mut self) -> Vec<&mut [T]> {
        self.params
            .iter_mut()
            .flat_map(|levels| levels.iter_mut().map(Vec::as_mut_slice))
            .collect()
    }

    pub fn state(&self, block: usize) -> MaskState {
        self.state[block - 1]
    }

    pub fn set_state(&mut self, block: usize, state: MaskState) {
        self.state[block - 1] = state;
    }

    pub fn is_frozen(&self, block: usize) -> bool {
        self.state(block) == MaskState::Frozen
    }

    /// True when no mask has been introduced, so every block is unscaled.
    pub fn is_identity(&self) -> bool {
        self.state.iter().all(|&s| s == MaskState::Inactive)
    }

    /// Draw `M^l_k ~ N(0, std^2)` for every level of `block`.
    pub fn initialize<R: Rng + ?Sized>(&mut self, block: usize, std: f64, rng: &mut R) {
        for mask in &mut self.params[block - 1] {
            for v in mask.iter_mut() {
                *v = normal(rng, std);
            }
        }
    }

    /// `sigmoid(M^l_k)`.
    pub fn activation(&self, block: usize, level: usize) -> Vec<T> {
        self.params(block, level).iter().map(|&m| sigmoid(m)).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut bank = Self::new(self.channels.clone(), self.levels);
        bank.state = self.state.clone();
        bank
    }
}

/// Scale channel `c` of `x` by `sigmoid(M^block_level[c])`.
pub fn apply_resolution_mask<T: Scalar>(
    x: &FeatureMap<T>,
    level: ResolutionLevel,
    bank: &MaskBank<T>,
    block: usize,
) -> Result<FeatureMap<T>> {
    if block == 0 || block > bank.blocks() {
        return Err(Error::shape(format!("mask block {block} outside 1..={}", bank.blocks())));
    }
    if level.index() > bank.levels() {
        return Err(Error::shape(format!("{level} exceeds {} mask levels", bank.levels())));
    }
    if x.channels != bank.channels(block) {
        return Err(Error::shape(format!(
            "feature map has {} channels, mask block {block} has {}",
            x.channels,
            bank.channels(block)
        )));
    }
    Ok(scale_channels(x, &bank.activation(block, level.index())))
}

fn scale_channels<T: Scalar>(x: &FeatureMap<T>, scale: &[T]) -> FeatureMap<T> {
    let mut out = x.clone();
    for (c, &s) in scale.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Two 3x3 convolutions with a residual shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualUnit<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    /// 1x1 projection when the unit changes channel count or stride.
    pub shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualUnit<T> {
    fn init<R: Rng + ?Sized>(inp: usize, out: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::init(inp, out, 3, stride, rng);
        let conv2 = Conv2d::init(out, out, 3, 1, rng);
        let shortcut = (inp != out || stride != 1).then(|| Conv2d::init(inp, out, 1, stride, rng));
        Self { conv1, conv2, shortcut }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            shortcut: self.shortcut.as_ref().map(Conv2d::zeros_like),
        }
    }

    fn forward(&self, x: FeatureMap<T>) -> Result<(FeatureMap<T>, UnitCache<T>)> {
        let pre1 = self.conv1.forward(&x)?;
        let hidden = pre1.relu();
        let mut pre_out = self.conv2.forward(&hidden)?;
        match &self.shortcut {
            Some(proj) => pre_out.add_assign(&proj.forward(&x)?),
            None => pre_out.add_assign(&x),
        }
        let out = pre_out.relu();
        Ok((
            out,
            UnitCache {
                input: x,
                pre1,
                hidden,
                pre_out,
            },
        ))
    }

    fn backward(&self, cache: &UnitCache<T>, mut d_out: FeatureMap<T>, grad: &mut Self) -> FeatureMap<T> {
        relu_backward(&cache.pre_out, &mut d_out);
        let mut d_hidden = self.conv2.backward(&cache.hidden, &d_out, &mut grad.conv2);
        relu_backward(&cache.pre1, &mut d_hidden);
        let mut dx = self.conv1.backward(&cache.input, &d_hidden, &mut grad.conv1);
        match (&self.shortcut, &mut grad.shortcut) {
            (Some(proj), Some(g)) => dx.add_assign(&proj.backward(&cache.input, &d_out, g)),
            _ => dx.add_assign(&d_out),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: FeatureMap<T>,
    pre1: FeatureMap<T>,
    hidden: FeatureMap<T>,
    pre_out: FeatureMap<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    units: Vec<UnitCache<T>>,
    unmasked: FeatureMap<T>,
    scale: Option<Vec<T>>,
}

/// Intermediate activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    level: ResolutionLevel,
    input: FeatureMap<T>,
    stem_pre: FeatureMap<T>,
    blocks: Vec<BlockCache<T>>,
    final_plane: usize,
    final_channels: (usize, usize, usize),
    pooled: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn level(&self) -> ResolutionLevel {
        self.level
    }
}

/// Backbone, masks and the linear embedding head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet<T> {
    pub config: BackboneConfig,
    pub layout: EmbeddingLayout,
    pub stem: Conv2d<T>,
    /// Residual units per block, input side first.
    pub blocks: Vec<Vec<ResidualUnit<T>>>,
    /// Global-average-pooled features to the `d`-dimensional vector `v`.
    pub head: Linear<T>,
    pub masks: MaskBank<T>,
    /// When false every input is represented with all `m` sub-vectors.
    pub varying_length: bool,
}

impl<T: Scalar> EmbeddingNet<T> {
    /// Random backbone and head; masks start inactive with zero parameters.
    pub fn init<R: Rng + ?Sized>(
        config: BackboneConfig,
        layout: EmbeddingLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let stem = Conv2d::init(CHANNELS, config.stem_channels, config.stem_kernel, config.stem_stride, rng);
        let mut blocks = Vec::with_capacity(config.blocks());
        let mut channels = config.stem_channels;
        for b in 0..config.blocks() {
            let out = config.block_channels[b];
            let units = (0..config.units_per_block[b])
                .map(|u| {
                    let (inp, stride) = if u == 0 { (channels, config.stride_at(b)) } else { (out, 1) };
                    ResidualUnit::init(inp, out, stride, rng)
                })
                .collect();
            blocks.push(units);
            channels = out;
        }
        let head = Linear::init(channels, layout.total_dim(), rng);
        let masks = MaskBank::new(config.mask_channels(), layout.levels());
        Ok(Self {
            config,
            layout,
            stem,
            blocks,
            head,
            masks,
            varying_length: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            stem: self.stem.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|units| units.iter().map(ResidualUnit::zeros_like).collect())
                .collect(),
            head: self.head.zeros_like(),
            masks: self.masks.zeros_like(),
            varying_length: self.varying_length,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn image_to_map(&self, image: &Image<T>) -> Result<FeatureMap<T>> {
        let expected = (self.config.input_height, self.config.input_width);
        if image.size() != expected {
            return Err(Error::shape(format!(
                "image is {}x{}, network expects {}x{}",
                image.height(),
                image.width(),
                expected.0,
                expected.1
            )));
        }
        Ok(FeatureMap {
            channels: CHANNELS,
            height: image.height(),
            width: image.width(),
            data: image.data().to_vec(),
        })
    }

    /// Full penultimate vector `v` in `R^d` together with the activations
    /// needed for back-propagation.
    pub fn forward(&self, image: &Image<T>, level: ResolutionLevel) -> Result<(Vec<T>, ForwardCache<T>)> {
        if level.index() > self.layout.levels() {
            return Err(Error::shape(format!("{level} exceeds {} levels", self.layout.levels())));
        }
        let input = self.image_to_map(image)?;
        let stem_pre = self.stem.forward(&input)?;
        let mut x = stem_pre.relu();
        let l_total = self.num_blocks();
        let mut block_caches = Vec::with_capacity(l_total);
        for (b, units) in self.blocks.iter().enumerate() {
            let mut unit_caches = Vec::with_capacity(units.len());
            for unit in units {
                let (out, cache) = unit.forward(x)?;
                unit_caches.push(cache);
                x = out;
            }
            let mask_block = l_total - b;
            let scale = (self.masks.state(mask_block) != MaskState::Inactive)
                .then(|| self.masks.activation(mask_block, level.index()));
            let unmasked = x;
            x = match &scale {
                Some(s) => scale_channels(&unmasked, s),
                None => unmasked.clone(),
            };
            block_caches.push(BlockCache {
                units: unit_caches,
                unmasked,
                scale,
            });
        }
        let pooled = x.global_average();
        let features = self.head.forward(&pooled)?;
        let cache = ForwardCache {
            level,
            input,
            stem_pre,
            blocks: block_caches,
            final_plane: x.plane(),
            final_channels: (x.channels, x.height, x.width),
            pooled,
        };
        Ok((features, cache))
    }

    /// Back-propagate `dL/dv` through the network, accumulating into `grad`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_features: &[T], grad: &mut Self) {
        let d_pooled = self.head.backward(&cache.pooled, d_features, &mut grad.head);
        let (c, h, w) = cache.final_channels;
        let inv = T::one() / T::count(cache.final_plane);
        let mut d_x = FeatureMap::zeros(c, h, w);
        for (ch, &g) in d_pooled.iter().enumerate() {
            d_x.channel_mut(ch).iter_mut().for_each(|v| *v = g * inv);
        }
        let l_total = self.num_blocks();
        for b in (0..l_total).rev() {
            let bc = &cache.blocks[b];
            if let Some(scale) = &bc.scale {
                let mask_block = l_total - b;
                let level = cache.level.index();
                let d_mask = grad.masks.params_mut(mask_block, level);
                for (ch, &s) in scale.iter().enumerate() {
                    let dot: T = d_x
                        .channel(ch)
                        .iter()
                        .zip(bc.unmasked.channel(ch))
                        .map(|(&g, &u)| g * u)
                        .sum();
                    d_mask[ch] += dot * s * (T::one() - s);
                    d_x.channel_mut(ch).iter_mut().for_each(|v| *v *= s);
                }
            }
            for (u, unit) in self.blocks[b].iter().enumerate().rev() {
                d_x = unit.backward(&bc.units[u], d_x, &mut grad.blocks[b][u]);
            }
        }
        relu_backward(&cache.stem_pre, &mut d_x);
        self.stem.backward(&cache.input, &d_x, &mut grad.stem);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolution::ratios_from_rates;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn level(k: usize) -> ResolutionLevel {
        ResolutionLevel::new(k, &ratios_from_rates(&[2, 3, 4]).unwrap()).unwrap()
    }

    #[test]
    fn zero_mask_halves_features() {
        let bank = MaskBank::<f64>::new(vec![3], 4);
        let mut x = FeatureMap::zeros(3, 2, 2);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 4.0);
        let y = apply_resolution_mask(&x, level(2), &bank, 1).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_mask_is_near_identity() {
        let mut bank = MaskBank::<f64>::new(vec![3], 4);
        bank.params_mut(1, 3).iter_mut().for_each(|v| *v = 50.0);
        let mut x = FeatureMap::zeros(3, 2, 2);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.3);
        let y = apply_resolution_mask(&x, level(3), &bank, 1).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bank = MaskBank::<f64>::new(vec![3, 5], 4);
        bank.initialize(1, 1.0, &mut rng);
        let mut x = FeatureMap::zeros(3, 2, 2);
        x.data.iter_mut().for_each(|v| *v = normal(&mut rng, 1.0));
        let y = apply_resolution_mask(&x, level(2), &bank, 1).unwrap();
        let m = bank.params(1, 2);
        for c in 0..3 {
            for i in 0..4 {
                let expected = x.data[c * 4 + i] / (1.0 + (-m[c]).exp());
                assert!((y.data[c * 4 + i] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_channel_mismatch_is_shape_error() {
        let bank = MaskBank::<f64>::new(vec![3, 5], 4);
        let x = FeatureMap::zeros(4, 2, 2);
        assert!(matches!(apply_resolution_mask(&x, level(1), &bank, 1), Err(Error::Shape(_))));
        assert!(matches!(apply_resolution_mask(&x, level(1), &bank, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn full_scale_last_stride_one_gives_16_by_8() {
        let cfg = BackboneConfig::full();
        assert!(cfg.validate().is_empty());
        assert_eq!(cfg.final_map_size(), (16, 8));
        let mut strided = cfg.clone();
        strided.last_stride = 2;
        assert_eq!(strided.final_map_size(), (8, 4));
    }

    #[test]
    fn desk_final_map_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig::desk();
        let net = EmbeddingNet::<f32>::init(cfg.clone(), EmbeddingLayout::equal(4, 64).unwrap(), &mut rng).unwrap();
        let img = Image::zeros(cfg.input_height, cfg.input_width);
        let (v, cache) = net.forward(&img, level(4)).unwrap();
        assert_eq!(v.len(), 64);
        let (_, h, w) = cache.final_channels;
        assert_eq!((h, w), cfg.final_map_size());
    }

    #[test]
    fn config_validation_reports_every_problem() {
        let mut cfg = BackboneConfig::desk();
        cfg.units_per_block = vec![1];
        cfg.inner_strides = vec![];
        cfg.stem_kernel = 2;
        assert_eq!(cfg.validate().len(), 3);
    }
}
