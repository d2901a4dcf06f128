//! Sub-vector layout of the penultimate representation and the
//! varying-length embeddings cut from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resolution::ResolutionLevel;
use crate::scalar::Scalar;

/// Per-level sub-vector dimensions `d_1..d_m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    dims: Vec<usize>,
}

impl EmbeddingLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::domain("layout needs at least one level"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::domain("sub-vector dimensions must be positive"));
        }
        Ok(Self { dims })
    }

    /// `levels` sub-vectors of `total / levels` dimensions each.
    pub fn equal(levels: usize, total: usize) -> Result<Self> {
        if levels == 0 || total % levels != 0 {
            return Err(Error::domain(format!(
                "cannot split {total} dimensions into {levels} equal sub-vectors"
            )));
        }
        Self::new(vec![total / levels; levels])
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Length of the first `level` sub-vectors.
    pub fn prefix_dim(&self, level: usize) -> usize {
        self.dims[..level.min(self.dims.len())].iter().sum()
    }

    /// Index range of sub-vector `j` (1-based) within the full vector.
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        self.prefix_dim(j - 1)..self.prefix_dim(j)
    }
}

/// The first `k` sub-vectors of a penultimate feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaryingLengthEmbedding<T> {
    level: ResolutionLevel,
    subvectors: Vec<Vec<T>>,
}

impl<T: Scalar> VaryingLengthEmbedding<T> {
    pub fn new(
        level: ResolutionLevel,
        subvectors: Vec<Vec<T>>,
        layout: &EmbeddingLayout,
    ) -> Result<Self> {
        if subvectors.len() != level.index() {
            return Err(Error::shape(format!(
                "{} sub-vectors for {level}",
                subvectors.len()
            )));
        }
        for (j, v) in subvectors.iter().enumerate() {
            if layout.dims().get(j) != Some(&v.len()) {
                return Err(Error::shape(format!(
                    "sub-vector {} has length {}, layout expects {:?}",
                    j + 1,
                    v.len(),
                    layout.dims().get(j)
                )));
            }
        }
        Ok(Self { level, subvectors })
    }

    /// Cut the first `level.index()` sub-vectors out of a full-length vector.
    pub fn from_full(full: &[T], level: ResolutionLevel, layout: &EmbeddingLayout) -> Result<Self> {
        if full.len() != layout.total_dim() {
            return Err(Error::shape(format!(
                "vector of length {} for layout of dimension {}",
                full.len(),
                layout.total_dim()
            )));
        }
        if level.index() > layout.levels() {
            return Err(Error::shape(format!("{level} exceeds {} levels", layout.levels())));
        }
        let subvectors = (1..=level.index())
            .map(|j| full[layout.block_range(j)].to_vec())
            .collect();
        Ok(Self { level, subvectors })
    }

    pub fn level(&self) -> ResolutionLevel {
        self.level
    }

    pub fn subvectors(&self) -> &[Vec<T>] {
        &self.subvectors
    }

    pub fn len(&self) -> usize {
        self.subvectors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `cat(v_1, .., v_k)`.
    pub fn concat(&self) -> Vec<T> {
        self.subvectors.iter().flatten().copied().collect()
    }

    /// `cat(v_1, .., v_k)` for `k <= level`.
    pub fn prefix(&self, k: usize) -> Vec<T> {
        self.subvectors[..k.min(self.subvectors.len())]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            level: self.level,
            subvectors: self
                .subvectors
                .iter()
                .map(|v| v.iter().map(|&x| x * factor).collect())
                .collect(),
        }
    }
}

/// Concatenate the sub-vectors and fill the remaining levels with zeros so
/// every embedding has the full dimension `d`.
pub fn zero_pad<T: Scalar>(z: &VaryingLengthEmbedding<T>, layout: &EmbeddingLayout) -> Vec<T> {
    let mut out = z.concat();
    out.resize(layout.total_dim(), T::zero());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolution::{ratios_from_rates, Rational};

    fn ratios(m: usize) -> Vec<Rational> {
        let rates: Vec<u32> = (2..=m as u32).collect();
        ratios_from_rates(&rates).unwrap()
    }

    #[test]
    fn layout_invariants() {
        assert!(EmbeddingLayout::new(vec![]).is_err());
        assert!(EmbeddingLayout::new(vec![2, 0]).is_err());
        let layout = EmbeddingLayout::equal(4, 64).unwrap();
        assert_eq!(layout.dims(), &[16, 16, 16, 16]);
        assert_eq!(layout.total_dim(), 64);
        assert_eq!(EmbeddingLayout::equal(4, 2048).unwrap().dims()[0], 512);
        assert!(EmbeddingLayout::equal(3, 64).is_err());
    }

    #[test]
    fn full_level_padding_appends_nothing() {
        let layout = EmbeddingLayout::new(vec![1, 2]).unwrap();
        let level = ResolutionLevel::new(2, &ratios(2)).unwrap();
        let z = VaryingLengthEmbedding::new(level, vec![vec![1.0], vec![2.0, 3.0]], &layout)
            .unwrap();
        assert_eq!(zero_pad(&z, &layout), z.concat());
    }

    #[test]
    fn pad_two_by_two_level_one() {
        let layout = EmbeddingLayout::new(vec![2, 2]).unwrap();
        let level = ResolutionLevel::new(1, &ratios(2)).unwrap();
        let z = VaryingLengthEmbedding::new(level, vec![vec![1.0, 2.0]], &layout).unwrap();
        assert_eq!(zero_pad(&z, &layout), vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_one_two_three_level_two() {
        let layout = EmbeddingLayout::new(vec![1, 2, 3]).unwrap();
        let level = ResolutionLevel::new(2, &ratios(3)).unwrap();
        let z = VaryingLengthEmbedding::new(level, vec![vec![5.0], vec![6.0, 7.0]], &layout)
            .unwrap();
        assert_eq!(zero_pad(&z, &layout), vec![5.0, 6.0, 7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_shape_is_checked() {
        let layout = EmbeddingLayout::new(vec![2, 2]).unwrap();
        let level = ResolutionLevel::new(2, &ratios(2)).unwrap();
        assert!(VaryingLengthEmbedding::new(level, vec![vec![1.0f64, 2.0]], &layout).is_err());
        assert!(
            VaryingLengthEmbedding::new(level, vec![vec![1.0f64], vec![1.0, 2.0]], &layout)
                .is_err()
        );
    }

    #[test]
    fn from_full_slices_prefix() {
        let layout = EmbeddingLayout::new(vec![1, 2, 3]).unwrap();
        let full: Vec<f64> = (0..6).map(f64::from).collect();
        let level = ResolutionLevel::new(2, &ratios(3)).unwrap();
        let z = VaryingLengthEmbedding::from_full(&full, level, &layout).unwrap();
        assert_eq!(z.subvectors(), &[vec![0.0], vec![1.0, 2.0]]);
        assert_eq!(z.len(), 3);
    }
}
