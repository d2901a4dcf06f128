//! Central finite-difference check of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{ModelState, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub group: String,
    pub tensor: usize,
    pub entries: usize,
    /// `||g_a - g_fd|| / max(||g_a|| + ||g_fd||, floor)` over the tensor.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Compare `analytic` against central differences of `objective` for every
/// tensor whose group passes `select`.
///
/// Relative error is measured normwise per tensor, so entries whose true
/// gradient is zero do not divide by zero.
pub fn check_gradients(
    state: &ModelState<f64>,
    analytic: &ModelState<f64>,
    objective: impl Fn(&ModelState<f64>) -> Result<f64>,
    select: impl Fn(ParamGroup) -> bool,
    eps: f64,
) -> Result<Vec<TensorCheck>> {
    let reference = analytic.tensors();
    if reference.len() != state.tensors().len() {
        return Err(Error::shape("gradient and state have different tensor lists"));
    }
    let mut work = state.clone();
    let mut out = Vec::new();
    for (t, &(group, g_a)) in reference.iter().enumerate() {
        if !select(group) {
            continue;
        }
        let mut diff2 = 0.0;
        let mut norm_a = 0.0;
        let mut norm_fd = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..g_a.len() {
            let orig = work.tensors_mut()[t].1[i];
            work.tensors_mut()[t].1[i] = orig + eps;
            let plus = objective(&work)?;
            work.tensors_mut()[t].1[i] = orig - eps;
            let minus = objective(&work)?;
            work.tensors_mut()[t].1[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let e = g_a[i] - fd;
            diff2 += e * e;
            norm_a += g_a[i] * g_a[i];
            norm_fd += fd * fd;
            max_abs = max_abs.max(e.abs());
        }
        let denom = (norm_a.sqrt() + norm_fd.sqrt()).max(1e-12);
        out.push(TensorCheck {
            group: format!("{group:?}"),
            tensor: t,
            entries: g_a.len(),
            rel_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
        });
    }
    Ok(out)
}

/// Result of one built-in consistency check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Sliced-distance oracle and a gradient check on a two-block toy network.
pub fn selfcheck(seed: u64) -> Result<Vec<SelfCheck>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::image::Image;
    use crate::layout::{zero_pad, EmbeddingLayout, VaryingLengthEmbedding};
    use crate::losses::LossWeights;
    use crate::model::{BackboneConfig, MaskState, Scale};
    use crate::resolution::{ratios_from_rates, ResolutionLevel};
    use crate::retrieval::cross_res_distance;
    use crate::state::ModelSpec;
    use crate::training::{batch_objective, BatchPair};
    use crate::data::TrainSample;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut out = Vec::new();

    let layout = EmbeddingLayout::new(vec![2, 3, 4, 5])?;
    let known = ratios_from_rates(&[2, 3, 4])?;
    let full = ResolutionLevel::new(4, &known)?;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let level = ResolutionLevel::new(1 + i % 4, &known)?;
        let q = VaryingLengthEmbedding::from_full(&randn(14), level, &layout)?;
        let g = VaryingLengthEmbedding::from_full(&randn(14), full, &layout)?;
        let gp = zero_pad(&VaryingLengthEmbedding::from_full(&g.concat(), level, &layout)?, &layout);
        let oracle: f64 = zero_pad(&q, &layout).iter().zip(&gp).map(|(a, b)| (a - b) * (a - b)).sum();
        worst = worst.max((cross_res_distance(&q, &g)? - oracle).abs());
    }
    out.push(SelfCheck {
        name: "sliced distance".into(),
        pass: worst <= 1e-9,
        detail: format!("1000 pairs, max |diff| = {worst:.3e}"),
    });

    let spec = ModelSpec {
        backbone: BackboneConfig {
            scale: Scale::Desk,
            input_height: 8,
            input_width: 4,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            block_channels: vec![8, 8],
            units_per_block: vec![1, 1],
            inner_strides: vec![1],
            last_stride: 1,
        },
        layout: EmbeddingLayout::new(vec![4, 4])?,
        classes: 3,
        verifier_hidden: 2,
        classifier_init_std: 0.5,
        known_ratios: ratios_from_rates(&[2])?,
        varying_length: true,
    };
    let mut state = ModelState::<f64>::init_seeded(&spec, seed)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for l in 1..=2 {
        state.net.masks.initialize(l, 0.5, &mut mask_rng);
        state.net.masks.set_state(l, MaskState::Trainable);
    }
    let mut image = || {
        let data = randn(96);
        Image::from_fn(8, 4, |y, x, c| data[(c * 8 + y) * 4 + x])
    };
    let (lo, hi) = (state.level(1)?, state.level(2)?);
    let batch = vec![
        TrainSample { query_image: image(), gallery_image: image(), query_level: lo, query_label: 0, gallery_label: 0 },
        TrainSample { query_image: image(), gallery_image: image(), query_level: hi, query_label: 1, gallery_label: 2 },
    ];
    let pairs: Vec<BatchPair> = vec![(0, 0, true), (1, 1, false), (0, 1, false)];
    let weights = LossWeights::default();
    let grads = batch_objective(&state, &batch, &pairs, weights, true)?
        .1
        .ok_or_else(|| Error::Numeric("no gradient returned".into()))?;
    let checks = check_gradients(
        &state,
        &grads,
        |s| Ok(batch_objective(s, &batch, &pairs, weights, false)?.0.total),
        |g| matches!(g, ParamGroup::Mask { .. } | ParamGroup::Classifier | ParamGroup::Verifier),
        1e-5,
    )?;
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    out.push(SelfCheck {
        name: "gradient check".into(),
        pass: worst < 1e-4,
        detail: format!("{} tensors, max relative error = {worst:.3e}", checks.len()),
    });
    Ok(out)
}
