//! Identity classification over zero-padded embeddings and the pairwise
//! verification loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::EmbeddingLayout;
use crate::nn::{normal, Linear};
use crate::scalar::{log_sum_exp, sigmoid, softplus, Scalar};

/// Bias-free identity classifier `W` in `R^{d x C}`.
///
/// Rows split into per-level blocks `W_1..W_m` aligned with the embedding
/// layout, so a zero-padded level-`k` embedding only ever meets
/// `W_1..W_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier<T> {
    layout: EmbeddingLayout,
    classes: usize,
    /// Row-major `[dim][class]`.
    weight: Vec<T>,
}

impl<T: Scalar> PrototypeClassifier<T> {
    pub fn zeros(layout: EmbeddingLayout, classes: usize) -> Self {
        let weight = vec![T::zero(); layout.total_dim() * classes];
        Self { layout, classes, weight }
    }

    pub fn init<R: Rng + ?Sized>(layout: EmbeddingLayout, classes: usize, std: f64, rng: &mut R) -> Self {
        let mut clf = Self::zeros(layout, classes);
        clf.weight.iter_mut().for_each(|w| *w = normal(rng, std));
        clf
    }

    pub fn from_weight(layout: EmbeddingLayout, classes: usize, weight: Vec<T>) -> Result<Self> {
        if weight.len() != layout.total_dim() * classes {
            return Err(Error::shape(format!(
                "classifier weight has {} entries, expected {}x{}",
                weight.len(),
                layout.total_dim(),
                classes
            )));
        }
        Ok(Self { layout, classes, weight })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone(), self.classes)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layout(&self) -> &EmbeddingLayout {
        &self.layout
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    /// Rows of block `W_j` (1-based), each of length `C`.
    pub fn block_rows(&self, j: usize) -> &[T] {
        let r = self.layout.block_range(j);
        &self.weight[r.start * self.classes..r.end * self.classes]
    }

    /// `dL/dz` for upstream `dL/dlogits`, accumulating `dL/dW` into `grad`.
    pub fn backward(&self, z_padded: &[T], d_logits: &[T], grad: &mut Self) -> Vec<T> {
        let c = self.classes;
        let mut dz = vec![T::zero(); z_padded.len()];
        for (i, (&zi, dzi)) in z_padded.iter().zip(dz.iter_mut()).enumerate() {
            let row = &self.weight[i * c..(i + 1) * c];
            let grow = &mut grad.weight[i * c..(i + 1) * c];
            let mut acc = T::zero();
            for k in 0..c {
                grow[k] += zi * d_logits[k];
                acc += row[k] * d_logits[k];
            }
            *dzi = acc;
        }
        dz
    }
}

/// `W^T z` for a zero-padded embedding.
pub fn id_logits<T: Scalar>(z_padded: &[T], classifier: &PrototypeClassifier<T>) -> Result<Vec<T>> {
    let d = classifier.layout.total_dim();
    if z_padded.len() != d {
        return Err(Error::shape(format!(
            "padded embedding has length {}, classifier expects {d}",
            z_padded.len()
        )));
    }
    let c = classifier.classes;
    let mut logits = vec![T::zero(); c];
    for (i, &zi) in z_padded.iter().enumerate() {
        if zi == T::zero() {
            continue;
        }
        for (l, &w) in logits.iter_mut().zip(&classifier.weight[i * c..(i + 1) * c]) {
            *l += w * zi;
        }
    }
    Ok(logits)
}

/// Softmax cross-entropy of `logits` against `label`.
pub fn id_loss<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Loss and `softmax(logits) - onehot(label)`.
pub fn id_loss_with_grad<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    let loss = id_loss(logits, label)?;
    let lse = log_sum_exp(logits);
    let mut grad: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// `f(x) = w_out . tanh(W_h x + b_h) + b_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationHead<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> VerificationHead<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_features
    }

    pub fn logit(&self, x: &[T]) -> Result<T> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &[T]) -> Result<(T, Vec<T>)> {
        let act: Vec<T> = self.hidden.forward(x)?.into_iter().map(T::tanh).collect();
        let out = self.output.forward(&act)?[0];
        Ok((out, act))
    }

    /// Accumulate parameter gradients for upstream `dL/df` and return `dL/dx`.
    pub fn backward(&self, x: &[T], d_logit: T, grad: &mut Self) -> Result<Vec<T>> {
        let (_, act) = self.forward_cached(x)?;
        let mut d_act = self.output.backward(&act, &[d_logit], &mut grad.output);
        for (g, &a) in d_act.iter_mut().zip(&act) {
            *g *= T::one() - a * a;
        }
        Ok(self.hidden.backward(x, &d_act, &mut grad.hidden))
    }
}

fn difference<T: Scalar>(vi: &[T], vj: &[T], head: &VerificationHead<T>) -> Result<Vec<T>> {
    if vi.len() != vj.len() || vi.len() != head.input_dim() {
        return Err(Error::shape(format!(
            "verification inputs of length {} and {}, head expects {}",
            vi.len(),
            vj.len(),
            head.input_dim()
        )));
    }
    Ok(vi.iter().zip(vj).map(|(&a, &b)| a - b).collect())
}

/// `sigmoid(f(v_i - v_j))`: probability that both embeddings share an identity.
pub fn verification_probability<T: Scalar>(vi: &[T], vj: &[T], head: &VerificationHead<T>) -> Result<T> {
    Ok(sigmoid(head.logit(&difference(vi, vj, head)?)?))
}

/// Binary cross-entropy of a logit: `-[y ln s(f) + (1-y) ln(1-s(f))]`.
pub fn bce_with_logit<T: Scalar>(logit: T, same: bool) -> T {
    if same {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationLoss<T> {
    pub sum: T,
    pub mean: T,
    pub pairs: usize,
}

/// Pairwise cross-entropy over `(v_i, v_j, same_identity)` triples.
pub fn verification_loss<T: Scalar>(
    pairs: &[(&[T], &[T], bool)],
    head: &VerificationHead<T>,
) -> Result<VerificationLoss<T>> {
    if pairs.is_empty() {
        return Err(Error::domain("verification loss needs at least one pair"));
    }
    let mut sum = T::zero();
    for &(vi, vj, same) in pairs {
        sum += bce_with_logit(head.logit(&difference(vi, vj, head)?)?, same);
    }
    Ok(VerificationLoss {
        sum,
        mean: sum / T::count(pairs.len()),
        pairs: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the verification term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

/// `cls + lambda * verif`.
pub fn total_loss<T: Scalar>(cls: T, verif: T, weights: LossWeights) -> Result<T> {
    if !cls.is_finite() || !verif.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss terms: cls={cls}, verif={verif}"
        )));
    }
    if !(weights.lambda >= 0.0) {
        return Err(Error::domain(format!("lambda must be >= 0, got {}", weights.lambda)));
    }
    Ok(cls + T::lit(weights.lambda) * verif)
}
