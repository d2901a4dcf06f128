//! Progressive mask training.
//!
//! Masks are introduced one residual block at a time, starting next to the
//! embedding head (`l = 1`). When block `l` is introduced its masks are
//! randomly initialized and trained while every previously introduced mask
//! is frozen. The backbone, embedding head, classifier and verification head
//! train in every stage.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, MlrTrainingSet, TrainSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{bce_with_logit, id_logits, id_loss_with_grad, total_loss, LossWeights};
use crate::model::MaskState;
use crate::optim::{learning_rate, Adam, OptimizerConfig};
use crate::resolution::ResolutionLevel;
use crate::scalar::{sigmoid, Scalar};
use crate::state::{ModelState, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Progressive,
    EndToEnd,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Progressive => "progressive",
            TrainMode::EndToEnd => "end-to-end",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Never introduce masks: every block output passes through unscaled.
    pub no_mask: bool,
    /// Represent every input with all sub-vectors regardless of level.
    pub no_val: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// 1-based stage number.
    pub index: usize,
    /// Mask blocks initialized at the start of this stage.
    pub introduce: Vec<usize>,
    /// Mask blocks updated during this stage.
    pub train: Vec<usize>,
    /// Mask blocks held fixed during this stage.
    pub frozen: Vec<usize>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingStagePlan {
    pub mode: TrainMode,
    pub blocks: usize,
    pub stages: Vec<Stage>,
}

impl TrainingStagePlan {
    /// Total epochs over all stages.
    pub fn epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Progressive plan whose stage epochs are given explicitly.
    pub fn progressive(stage_epochs: &[usize]) -> Result<Self> {
        let blocks = stage_epochs.len();
        if blocks == 0 {
            return Err(Error::domain("a stage plan needs at least one block"));
        }
        if stage_epochs.iter().any(|&e| e == 0) {
            return Err(Error::domain("every stage needs at least one epoch"));
        }
        let stages = stage_epochs
            .iter()
            .enumerate()
            .map(|(i, &epochs)| {
                let l = i + 1;
                Stage {
                    index: l,
                    introduce: vec![l],
                    train: vec![l],
                    frozen: (1..l).collect(),
                    epochs,
                }
            })
            .collect();
        Ok(Self {
            mode: TrainMode::Progressive,
            blocks,
            stages,
        })
    }

    /// Single stage introducing and training every mask at once.
    pub fn end_to_end(blocks: usize, epochs: usize) -> Result<Self> {
        if blocks == 0 || epochs == 0 {
            return Err(Error::domain("end-to-end plan needs >= 1 block and >= 1 epoch"));
        }
        let all: Vec<usize> = (1..=blocks).collect();
        Ok(Self {
            mode: TrainMode::EndToEnd,
            blocks,
            stages: vec![Stage {
                index: 1,
                introduce: all.clone(),
                train: all,
                frozen: vec![],
                epochs,
            }],
        })
    }

    /// Plan for `mode` with `total_epochs` split evenly over the stages
    /// (remainder to the last stage).
    pub fn for_mode(mode: TrainMode, blocks: usize, total_epochs: usize) -> Result<Self> {
        match mode {
            TrainMode::EndToEnd => Self::end_to_end(blocks, total_epochs),
            TrainMode::Progressive => {
                if blocks == 0 {
                    return Err(Error::domain("a stage plan needs at least one block"));
                }
                if total_epochs < blocks {
                    return Err(Error::domain(format!(
                        "{total_epochs} epochs cannot cover {blocks} progressive stages"
                    )));
                }
                let mut split = vec![total_epochs / blocks; blocks];
                split[blocks - 1] += total_epochs % blocks;
                Self::progressive(&split)
            }
        }
    }
}

/// Algorithm-1 stage plan: `blocks` progressive stages of `epochs` each.
pub fn build_stage_plan(blocks: usize, epochs: usize) -> Result<TrainingStagePlan> {
    if blocks < 1 {
        return Err(Error::domain("block count L must be >= 1"));
    }
    if epochs < 1 {
        return Err(Error::domain("stage length T must be >= 1"));
    }
    TrainingStagePlan::progressive(&vec![epochs; blocks])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub augmentation: AugmentationConfig,
    pub ablation: Ablation,
    /// Standard deviation of the Gaussian mask initialization.
    pub mask_init_std: f64,
    pub seed: u64,
}

/// Pair `(query index, gallery index, same identity)` within a batch.
pub type BatchPair = (usize, usize, bool);

/// Every same-identity query/gallery pair in the batch plus as many
/// uniformly drawn different-identity pairs.
pub fn build_pairs<T, R: Rng + ?Sized>(batch: &[TrainSample<T>], rng: &mut R) -> Vec<BatchPair> {
    let n = batch.len();
    let mut pairs = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if batch[i].query_label == batch[j].gallery_label {
                pairs.push((i, j, true));
            } else {
                negatives.push((i, j, false));
            }
        }
    }
    if !negatives.is_empty() {
        for _ in 0..pairs.len() {
            pairs.push(negatives[rng.gen_range(0..negatives.len())]);
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses<T> {
    pub cls: T,
    pub verif: T,
    pub total: T,
    pub pairs: usize,
}

/// Batch losses and, when `with_grads`, the gradient of the total loss
/// with respect to every parameter.
///
/// Both loss terms are means: the identity loss over all `2B` embeddings,
/// the verification loss over `pairs`. Queries are zero-padded beyond their
/// representation level, so gradient never reaches the sub-vectors (or
/// classifier rows) a query does not use.
pub fn batch_objective<T: Scalar>(
    state: &ModelState<T>,
    batch: &[TrainSample<T>],
    pairs: &[BatchPair],
    weights: LossWeights,
    with_grads: bool,
) -> Result<(StepLosses<T>, Option<ModelState<T>>)> {
    if batch.is_empty() {
        return Err(Error::domain("training batch is empty"));
    }
    let layout = state.layout().clone();
    let d = layout.total_dim();
    let top = state.highest_level();
    let mut caches = Vec::with_capacity(2 * batch.len());
    let mut padded: Vec<Vec<T>> = Vec::with_capacity(2 * batch.len());
    let mut used: Vec<usize> = Vec::with_capacity(2 * batch.len());
    let mut labels = Vec::with_capacity(2 * batch.len());
    for s in batch {
        let (mut vq, cq) = state.forward(&s.query_image, s.query_level)?;
        let keep = layout.prefix_dim(state.representation_level(s.query_level).index());
        vq[keep..].iter_mut().for_each(|v| *v = T::zero());
        padded.push(vq);
        used.push(keep);
        caches.push(cq);
        labels.push(s.query_label);
    }
    for s in batch {
        let (vg, cg) = state.forward(&s.gallery_image, top)?;
        padded.push(vg);
        used.push(d);
        caches.push(cg);
        labels.push(s.gallery_label);
    }
    let b = batch.len();
    let mut grads = with_grads.then(|| state.zeros_like());
    let mut d_emb = vec![vec![T::zero(); d]; 2 * b];

    let n_emb = T::count(2 * b);
    let mut cls = T::zero();
    for (i, z) in padded.iter().enumerate() {
        let logits = id_logits(z, &state.classifier)?;
        let (loss, mut dl) = id_loss_with_grad(&logits, labels[i])?;
        cls += loss;
        if let Some(g) = grads.as_mut() {
            dl.iter_mut().for_each(|v| *v /= n_emb);
            d_emb[i] = state.classifier.backward(z, &dl, &mut g.classifier);
        }
    }
    cls /= n_emb;

    let mut verif = T::zero();
    if !pairs.is_empty() {
        let n_pairs = T::count(pairs.len());
        let lambda = T::lit(weights.lambda);
        for &(qi, gj, same) in pairs {
            let diff: Vec<T> = padded[qi].iter().zip(&padded[b + gj]).map(|(&a, &c)| a - c).collect();
            let logit = state.verifier.logit(&diff)?;
            verif += bce_with_logit(logit, same);
            if let Some(g) = grads.as_mut() {
                let y = if same { T::one() } else { T::zero() };
                let d_logit = lambda * (sigmoid(logit) - y) / n_pairs;
                let dx = state.verifier.backward(&diff, d_logit, &mut g.verifier)?;
                for k in 0..d {
                    d_emb[qi][k] += dx[k];
                    d_emb[b + gj][k] -= dx[k];
                }
            }
        }
        verif /= n_pairs;
    }
    let total = total_loss(cls, verif, weights).map_err(|e| {
        Error::Numeric(format!("{e} (batch of {b}, {} pairs)", pairs.len()))
    })?;

    if let Some(g) = grads.as_mut() {
        for ((cache, dz), &keep) in caches.iter().zip(&mut d_emb).zip(&used) {
            dz[keep..].iter_mut().for_each(|v| *v = T::zero());
            state.net.backward(cache, dz, &mut g.net);
        }
    }
    Ok((
        StepLosses {
            cls,
            verif,
            total,
            pairs: pairs.len(),
        },
        grads,
    ))
}

/// Identity loss of a single image and its gradient.
#[derive(Debug, Clone)]
pub struct SampleGradient<T> {
    pub loss: T,
    /// Gradient reaching the network output, after the zero padding.
    pub d_embedding: Vec<T>,
    pub grads: ModelState<T>,
}

/// ID loss of `image` observed at `level`, with the same zero padding as
/// [`batch_objective`].
pub fn id_objective<T: Scalar>(
    state: &ModelState<T>,
    image: &Image<T>,
    level: ResolutionLevel,
    label: usize,
) -> Result<SampleGradient<T>> {
    let (mut v, cache) = state.forward(image, level)?;
    let keep = state.layout().prefix_dim(state.representation_level(level).index());
    v[keep..].iter_mut().for_each(|x| *x = T::zero());
    let logits = id_logits(&v, &state.classifier)?;
    let (loss, dl) = id_loss_with_grad(&logits, label)?;
    let mut grads = state.zeros_like();
    let mut dz = state.classifier.backward(&v, &dl, &mut grads.classifier);
    dz[keep..].iter_mut().for_each(|x| *x = T::zero());
    state.net.backward(&cache, &dz, &mut grads.net);
    Ok(SampleGradient {
        loss,
        d_embedding: dz,
        grads,
    })
}

/// True for tensors the optimizer may update in the current stage.
pub fn is_trainable<T: Scalar>(state: &ModelState<T>, group: ParamGroup) -> bool {
    match group {
        ParamGroup::Mask { block, .. } => state.net.masks.state(block) == MaskState::Trainable,
        _ => true,
    }
}

/// Activated masks must stay strictly inside `(0, 1)`.
pub fn check_mask_range<T: Scalar>(state: &ModelState<T>) -> Result<()> {
    let masks = &state.net.masks;
    for l in 1..=masks.blocks() {
        if masks.state(l) == MaskState::Inactive {
            continue;
        }
        for k in 1..=masks.levels() {
            if masks.activation(l, k).iter().any(|&s| !(s > T::zero() && s < T::one())) {
                return Err(Error::Numeric(format!(
                    "mask M^{l}_{k} saturated outside (0, 1)"
                )));
            }
        }
    }
    Ok(())
}

/// One optimization step on `batch` with learning rate `lr`.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    batch: &[TrainSample<T>],
    state: &mut ModelState<T>,
    optimizer: &mut Adam<T>,
    lr: f64,
    weights: LossWeights,
    rng: &mut R,
) -> Result<StepLosses<T>> {
    let pairs = build_pairs(batch, rng);
    let (losses, grads) = batch_objective(state, batch, &pairs, weights, true)?;
    let grads = grads.expect("requested");
    grads.check_finite()?;
    let masks = &state.net.masks;
    let mask_states: Vec<MaskState> = (1..=masks.blocks()).map(|l| masks.state(l)).collect();
    optimizer.step(state, &grads, lr, |g| match g {
        ParamGroup::Mask { block, .. } => mask_states[block - 1] == MaskState::Trainable,
        _ => true,
    })?;
    state.check_finite()?;
    check_mask_range(state)?;
    Ok(losses)
}

/// Per-step training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub verif: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub trained_masks: Vec<usize>,
    pub frozen_masks: Vec<usize>,
    pub epochs: usize,
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
}

/// Progress reported by [`train`].
#[derive(Debug)]
pub enum TrainEvent<'a, T> {
    Step(&'a StepRecord),
    /// A stage finished; `state` is the model at its end.
    StageEnd {
        record: &'a StageRecord,
        state: &'a ModelState<T>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    pub stages: Vec<StageRecord>,
}

/// Steps per epoch: one pass over every (image, rate) variant.
pub fn steps_per_epoch(dataset: &MlrTrainingSet, batch_size: usize) -> usize {
    let variants = dataset.len() * dataset.rates().len().max(1);
    variants.div_ceil(batch_size).max(1)
}

/// Run every stage of `plan` on `dataset`, starting from `state`.
///
/// Each stage replays the learning-rate schedule compressed onto its own
/// epochs. `on_event` sees every optimizer step and the end of every stage.
pub fn train<T: Scalar>(
    dataset: &MlrTrainingSet,
    mut state: ModelState<T>,
    options: &TrainOptions,
    plan: &TrainingStagePlan,
    mut on_event: impl FnMut(TrainEvent<'_, T>),
) -> Result<TrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    if plan.blocks != state.net.masks.blocks() {
        return Err(Error::shape(format!(
            "plan covers {} blocks, model has {}",
            plan.blocks,
            state.net.masks.blocks()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(1);
    let mut optimizer = Adam::new(&options.optimizer, &state);
    let per_epoch = steps_per_epoch(dataset, options.optimizer.batch_size);
    let mut stage_log = Vec::with_capacity(plan.stages.len());
    let mut step = 0;
    let mut epoch_offset = 0;
    for stage in &plan.stages {
        if !options.ablation.no_mask {
            for &l in &stage.frozen {
                state.net.masks.set_state(l, MaskState::Frozen);
            }
            for &l in &stage.introduce {
                state.net.masks.initialize(l, options.mask_init_std, &mut rng);
            }
            for &l in &stage.train {
                state.net.masks.set_state(l, MaskState::Trainable);
            }
        }
        let mut first_total = None;
        let mut last_total = f64::NAN;
        let mut stage_steps = 0;
        for local_epoch in 0..stage.epochs {
            let scheduled = local_epoch * options.optimizer.epochs / stage.epochs;
            let lr = learning_rate(scheduled, &options.optimizer)?;
            for _ in 0..per_epoch {
                let batch = dataset.sample_batch::<T, _>(
                    options.optimizer.batch_size,
                    &options.augmentation,
                    &mut rng,
                )?;
                let losses = train_step(&batch, &mut state, &mut optimizer, lr, options.loss, &mut rng)?;
                let record = StepRecord {
                    step,
                    stage: stage.index,
                    epoch: epoch_offset + local_epoch,
                    lr,
                    cls: losses.cls.as_f64(),
                    verif: losses.verif.as_f64(),
                    total: losses.total.as_f64(),
                };
                on_event(TrainEvent::Step(&record));
                first_total.get_or_insert(record.total);
                last_total = record.total;
                step += 1;
                stage_steps += 1;
            }
        }
        epoch_offset += stage.epochs;
        let (trained_masks, frozen_masks) = if options.ablation.no_mask {
            (vec![], vec![])
        } else {
            (stage.train.clone(), stage.frozen.clone())
        };
        log::info!(
            "stage {} done: {} steps, total loss {:.4} -> {:.4}",
            stage.index,
            stage_steps,
            first_total.unwrap_or(f64::NAN),
            last_total
        );
        let record = StageRecord {
            stage: stage.index,
            trained_masks,
            frozen_masks,
            epochs: stage.epochs,
            steps: stage_steps,
            first_total: first_total.unwrap_or(f64::NAN),
            last_total,
        };
        on_event(TrainEvent::StageEnd {
            record: &record,
            state: &state,
        });
        stage_log.push(record);
    }
    // every mask ends frozen once its stages are over
    if !options.ablation.no_mask {
        for l in 1..=state.net.masks.blocks() {
            if state.net.masks.state(l) == MaskState::Trainable {
                state.net.masks.set_state(l, MaskState::Frozen);
            }
        }
    }
    Ok(TrainOutcome {
        state,
        stages: stage_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_plan_never_freezes() {
        let plan = build_stage_plan(1, 5).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert!(plan.stages[0].frozen.is_empty());
        assert_eq!(plan.stages[0].train, vec![1]);
    }

    #[test]
    fn four_block_plan_stage_three() {
        let plan = build_stage_plan(4, 2).unwrap();
        let s3 = &plan.stages[2];
        assert_eq!(s3.train, vec![3]);
        assert_eq!(s3.frozen, vec![1, 2]);
        assert!(!s3.introduce.contains(&4));
        assert!(plan.stages[..3].iter().all(|s| !s.introduce.contains(&4)));
    }

    #[test]
    fn two_block_plan_unrolled() {
        let plan = build_stage_plan(2, 3).unwrap();
        assert_eq!(
            plan.stages,
            vec![
                Stage { index: 1, introduce: vec![1], train: vec![1], frozen: vec![], epochs: 3 },
                Stage { index: 2, introduce: vec![2], train: vec![2], frozen: vec![1], epochs: 3 },
            ]
        );
    }

    #[test]
    fn invalid_plans() {
        assert!(matches!(build_stage_plan(0, 1), Err(Error::Domain(_))));
        assert!(matches!(build_stage_plan(2, 0), Err(Error::Domain(_))));
        assert!(TrainingStagePlan::for_mode(TrainMode::Progressive, 4, 3).is_err());
    }

    #[test]
    fn every_mask_trained_once_then_frozen() {
        for l in 1..=5 {
            let plan = build_stage_plan(l, 1).unwrap();
            for block in 1..=l {
                let trained: Vec<usize> = plan
                    .stages
                    .iter()
                    .filter(|s| s.train.contains(&block))
                    .map(|s| s.index)
                    .collect();
                assert_eq!(trained, vec![block]);
                for s in plan.stages.iter().filter(|s| s.index > block) {
                    assert!(s.frozen.contains(&block));
                }
            }
        }
    }

    #[test]
    fn even_split_with_remainder() {
        let plan = TrainingStagePlan::for_mode(TrainMode::Progressive, 4, 122).unwrap();
        let e: Vec<usize> = plan.stages.iter().map(|s| s.epochs).collect();
        assert_eq!(e, vec![30, 30, 30, 32]);
        assert_eq!(plan.epochs(), 122);
        let e2e = TrainingStagePlan::for_mode(TrainMode::EndToEnd, 4, 120).unwrap();
        assert_eq!(e2e.stages.len(), 1);
        assert_eq!(e2e.stages[0].train, vec![1, 2, 3, 4]);
    }

    #[test]
    fn one_block_modes_share_schedule() {
        let p = TrainingStagePlan::for_mode(TrainMode::Progressive, 1, 7).unwrap();
        let e = TrainingStagePlan::for_mode(TrainMode::EndToEnd, 1, 7).unwrap();
        assert_eq!(p.stages, e.stages);
    }
}
