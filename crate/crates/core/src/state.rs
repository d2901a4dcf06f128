//! Complete trainable state: embedding network, identity classifier and
//! verification head, plus the resolution table the network was built for.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::layout::{EmbeddingLayout, VaryingLengthEmbedding};
use crate::losses::{PrototypeClassifier, VerificationHead};
use crate::model::{BackboneConfig, EmbeddingNet, ForwardCache};
use crate::nn::{Conv2d, Linear};
use crate::resolution::{validate_known_ratios, Rational, ResolutionLevel};
use crate::scalar::Scalar;

/// Which parameter tensor a slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    EmbeddingHead,
    Mask { block: usize, level: usize },
    Classifier,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub net: EmbeddingNet<T>,
    pub classifier: PrototypeClassifier<T>,
    pub verifier: VerificationHead<T>,
    pub known_ratios: Vec<Rational>,
}

/// Shape hyper-parameters for a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub layout: EmbeddingLayout,
    pub classes: usize,
    pub verifier_hidden: usize,
    pub classifier_init_std: f64,
    pub known_ratios: Vec<Rational>,
    pub varying_length: bool,
}

impl<T: Scalar> ModelState<T> {
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        validate_known_ratios(&spec.known_ratios)?;
        if spec.known_ratios.len() != spec.layout.levels() {
            return Err(Error::shape(format!(
                "{} resolution levels for a {}-level layout",
                spec.known_ratios.len(),
                spec.layout.levels()
            )));
        }
        if spec.classes == 0 || spec.verifier_hidden == 0 {
            return Err(Error::domain("classes and verifier width must be positive"));
        }
        let mut net = EmbeddingNet::init(spec.backbone.clone(), spec.layout.clone(), rng)?;
        net.varying_length = spec.varying_length;
        let classifier = PrototypeClassifier::init(spec.layout.clone(), spec.classes, spec.classifier_init_std, rng);
        let verifier = VerificationHead::init(spec.layout.total_dim(), spec.verifier_hidden, rng);
        Ok(Self {
            net,
            classifier,
            verifier,
            known_ratios: spec.known_ratios.clone(),
        })
    }

    /// [`ModelState::init`] driven by a ChaCha8 generator seeded with `seed`.
    pub fn init_seeded(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn layout(&self) -> &EmbeddingLayout {
        &self.net.layout
    }

    pub fn levels(&self) -> usize {
        self.known_ratios.len()
    }

    pub fn level(&self, k: usize) -> Result<ResolutionLevel> {
        ResolutionLevel::new(k, &self.known_ratios)
    }

    pub fn highest_level(&self) -> ResolutionLevel {
        ResolutionLevel::highest(&self.known_ratios).expect("validated at construction")
    }

    /// Number of sub-vectors used for an input at `level`.
    pub fn representation_level(&self, level: ResolutionLevel) -> ResolutionLevel {
        if self.net.varying_length {
            level
        } else {
            self.highest_level()
        }
    }

    /// Embed a normalized, canonically sized image observed at `level`.
    pub fn embed(&self, image: &Image<T>, level: ResolutionLevel) -> Result<VaryingLengthEmbedding<T>> {
        let (full, _) = self.net.forward(image, level)?;
        VaryingLengthEmbedding::from_full(&full, self.representation_level(level), self.layout())
    }

    pub fn forward(&self, image: &Image<T>, level: ResolutionLevel) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.net.forward(image, level)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
            classifier: self.classifier.zeros_like(),
            verifier: self.verifier.zeros_like(),
            known_ratios: self.known_ratios.clone(),
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamGroup, &[T])> {
        let mut out = Vec::new();
        let net = &self.net;
        push_conv(&mut out, ParamGroup::Backbone, &net.stem);
        for unit in net.blocks.iter().flatten() {
            push_conv(&mut out, ParamGroup::Backbone, &unit.conv1);
            push_conv(&mut out, ParamGroup::Backbone, &unit.conv2);
            if let Some(s) = &unit.shortcut {
                push_conv(&mut out, ParamGroup::Backbone, s);
            }
        }
        push_linear(&mut out, ParamGroup::EmbeddingHead, &net.head);
        for block in 1..=net.masks.blocks() {
            for level in 1..=net.masks.levels() {
                out.push((ParamGroup::Mask { block, level }, net.masks.params(block, level)));
            }
        }
        out.push((ParamGroup::Classifier, self.classifier.weight()));
        push_linear(&mut out, ParamGroup::Verifier, &self.verifier.hidden);
        push_linear(&mut out, ParamGroup::Verifier, &self.verifier.output);
        out
    }

    /// Mutable view in the same order as [`ModelState::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out: Vec<(ParamGroup, &mut [T])> = Vec::new();
        let net = &mut self.net;
        push_conv_mut(&mut out, ParamGroup::Backbone, &mut net.stem);
        for unit in net.blocks.iter_mut().flatten() {
            push_conv_mut(&mut out, ParamGroup::Backbone, &mut unit.conv1);
            push_conv_mut(&mut out, ParamGroup::Backbone, &mut unit.conv2);
            if let Some(s) = &mut unit.shortcut {
                push_conv_mut(&mut out, ParamGroup::Backbone, s);
            }
        }
        push_linear_mut(&mut out, ParamGroup::EmbeddingHead, &mut net.head);
        let levels = net.masks.levels();
        for (i, params) in net.masks.all_params_mut().into_iter().enumerate() {
            let group = ParamGroup::Mask {
                block: i / levels + 1,
                level: i % levels + 1,
            };
            out.push((group, params));
        }
        out.push((ParamGroup::Classifier, self.classifier.weight_mut()));
        push_linear_mut(&mut out, ParamGroup::Verifier, &mut self.verifier.hidden);
        push_linear_mut(&mut out, ParamGroup::Verifier, &mut self.verifier.output);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fails with a numeric error naming the first non-finite tensor.
    pub fn check_finite(&self) -> Result<()> {
        for (group, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameter in {group:?}")));
            }
        }
        Ok(())
    }
}

fn push_conv<'a, T>(out: &mut Vec<(ParamGroup, &'a [T])>, g: ParamGroup, c: &'a Conv2d<T>) {
    out.push((g, &c.weight));
    out.push((g, &c.bias));
}

fn push_linear<'a, T>(out: &mut Vec<(ParamGroup, &'a [T])>, g: ParamGroup, l: &'a Linear<T>) {
    out.push((g, &l.weight));
    out.push((g, &l.bias));
}

fn push_conv_mut<'a, T>(out: &mut Vec<(ParamGroup, &'a mut [T])>, g: ParamGroup, c: &'a mut Conv2d<T>) {
    out.push((g, &mut c.weight));
    out.push((g, &mut c.bias));
}

fn push_linear_mut<'a, T>(out: &mut Vec<(ParamGroup, &'a mut [T])>, g: ParamGroup, l: &'a mut Linear<T>) {
    out.push((g, &mut l.weight));
    out.push((g, &mut l.bias));
}
