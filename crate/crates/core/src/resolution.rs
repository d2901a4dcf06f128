//! Quantized resolution levels.
//!
//! A level `k` in `1..=m` indexes a down-sampling ratio `r` (fraction of the
//! full height/width). Levels ascend with resolution, so level `m` is always
//! the full-resolution ratio `1`.

use std::fmt;

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::EmbeddingLayout;

pub type Rational = Ratio<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolutionLevel {
    index: usize,
    ratio: Rational,
}

impl ResolutionLevel {
    /// Level `index` (1-based) within `known_ratios`.
    pub fn new(index: usize, known_ratios: &[Rational]) -> Result<Self> {
        validate_known_ratios(known_ratios)?;
        if index == 0 || index > known_ratios.len() {
            return Err(Error::domain(format!(
                "level {index} outside 1..={}",
                known_ratios.len()
            )));
        }
        Ok(Self {
            index,
            ratio: known_ratios[index - 1],
        })
    }

    /// Highest level of a ratio table, i.e. full resolution.
    pub fn highest(known_ratios: &[Rational]) -> Result<Self> {
        Self::new(known_ratios.len(), known_ratios)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn ratio(&self) -> Rational {
        self.ratio
    }

    /// Integer down-sampling rate `1/r` when `r` is a unit fraction.
    pub fn down_rate(&self) -> Option<u32> {
        (*self.ratio.numer() == 1).then(|| *self.ratio.denom())
    }
}

impl fmt::Display for ResolutionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "level {} (r={})", self.index, self.ratio)
    }
}

/// Ratio table `{1/r_max, .., 1/r_min, 1}` for a set of integer down-sampling
/// rates. Rate 1 is implied; duplicates are removed.
pub fn ratios_from_rates(rates: &[u32]) -> Result<Vec<Rational>> {
    let mut ratios = Vec::with_capacity(rates.len() + 1);
    for &rate in rates {
        if rate == 0 {
            return Err(Error::domain("down-sampling rate must be >= 1"));
        }
        ratios.push(Rational::new(1, rate));
    }
    ratios.push(Rational::one());
    ratios.sort();
    ratios.dedup();
    Ok(ratios)
}

pub fn validate_known_ratios(known_ratios: &[Rational]) -> Result<()> {
    if known_ratios.is_empty() {
        return Err(Error::domain("known ratio list is empty"));
    }
    if known_ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("known ratios must be strictly ascending"));
    }
    if known_ratios[0].is_zero() {
        return Err(Error::domain("known ratios must be positive"));
    }
    if *known_ratios.last().unwrap() != Rational::one() {
        return Err(Error::domain("largest known ratio must be 1"));
    }
    Ok(())
}

fn check_ratio(ratio: Rational) -> Result<()> {
    if ratio.is_zero() || ratio > Rational::one() {
        return Err(Error::domain(format!("resolution ratio {ratio} outside (0, 1]")));
    }
    Ok(())
}

/// Map a resolution ratio onto its discrete level.
///
/// An exact match wins; otherwise the level with the nearest ratio is
/// returned, ties going to the higher resolution.
pub fn quantize_resolution(
    ratio: Rational,
    layout: &EmbeddingLayout,
    known_ratios: &[Rational],
) -> Result<ResolutionLevel> {
    check_ratio(ratio)?;
    validate_known_ratios(known_ratios)?;
    if known_ratios.len() != layout.levels() {
        return Err(Error::shape(format!(
            "{} known ratios for a {}-level layout",
            known_ratios.len(),
            layout.levels()
        )));
    }
    let index = nearest_index(known_ratios, |known| abs_diff(ratio, known));
    ResolutionLevel::new(index + 1, known_ratios)
}

/// Assign a possibly unseen resolution to the level whose down-sampling
/// rate (`1/r`) is closest. Ties resolve toward the higher resolution.
pub fn resolve_unseen_resolution(
    ratio: Rational,
    known_ratios: &[Rational],
) -> Result<ResolutionLevel> {
    check_ratio(ratio)?;
    validate_known_ratios(known_ratios)?;
    let rate = ratio.recip();
    let index = nearest_index(known_ratios, |known| abs_diff(rate, known.recip()));
    ResolutionLevel::new(index + 1, known_ratios)
}

fn abs_diff(a: Rational, b: Rational) -> Rational {
    if a >= b {
        a - b
    } else {
        b - a
    }
}

// Scans from the highest ratio down so the first minimum found is the
// higher-resolution neighbour.
fn nearest_index(known_ratios: &[Rational], dist: impl Fn(Rational) -> Rational) -> usize {
    let mut best = known_ratios.len() - 1;
    let mut best_dist = dist(known_ratios[best]);
    for i in (0..known_ratios.len()).rev() {
        let d = dist(known_ratios[i]);
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u32, d: u32) -> Rational {
        Rational::new(n, d)
    }

    fn four() -> (EmbeddingLayout, Vec<Rational>) {
        (
            EmbeddingLayout::equal(4, 8).unwrap(),
            vec![r(1, 4), r(1, 3), r(1, 2), r(1, 1)],
        )
    }

    #[test]
    fn full_resolution_is_highest_level() {
        let (layout, ratios) = four();
        let level = quantize_resolution(r(1, 1), &layout, &ratios).unwrap();
        assert_eq!(level.index(), 4);
    }

    #[test]
    fn quarter_resolution_is_first_level() {
        let (layout, ratios) = four();
        assert_eq!(quantize_resolution(r(1, 4), &layout, &ratios).unwrap().index(), 1);
    }

    #[test]
    fn two_level_layout() {
        let layout = EmbeddingLayout::equal(2, 4).unwrap();
        let ratios = vec![r(1, 2), r(1, 1)];
        assert_eq!(quantize_resolution(r(1, 2), &layout, &ratios).unwrap().index(), 1);
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        let (layout, ratios) = four();
        assert!(matches!(
            quantize_resolution(r(0, 1), &layout, &ratios),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            quantize_resolution(r(3, 2), &layout, &ratios),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn quantize_falls_back_to_nearest_ratio() {
        let (layout, ratios) = four();
        // 1/5 is closest to 1/4
        assert_eq!(quantize_resolution(r(1, 5), &layout, &ratios).unwrap().index(), 1);
        // 3/4 is equidistant from 1/2 and 1: higher resolution wins
        assert_eq!(quantize_resolution(r(3, 4), &layout, &ratios).unwrap().index(), 4);
    }

    #[test]
    fn unseen_rate_three_ties_toward_rate_two() {
        let ratios = ratios_from_rates(&[2, 4, 6, 8]).unwrap();
        let level = resolve_unseen_resolution(r(1, 3), &ratios).unwrap();
        assert_eq!(level.down_rate(), Some(2));
    }

    #[test]
    fn unseen_rate_six_goes_to_four() {
        let ratios = ratios_from_rates(&[2, 3, 4]).unwrap();
        let level = resolve_unseen_resolution(r(1, 6), &ratios).unwrap();
        assert_eq!(level.down_rate(), Some(4));
        assert_eq!(level.index(), 1);
    }

    #[test]
    fn seen_rate_maps_to_itself() {
        let ratios = ratios_from_rates(&[2, 4, 8]).unwrap();
        for rate in [1, 2, 4, 8] {
            let level = resolve_unseen_resolution(r(1, rate), &ratios).unwrap();
            assert_eq!(level.down_rate(), Some(rate));
        }
    }

    #[test]
    fn ratio_table_is_sorted_and_ends_at_one() {
        let ratios = ratios_from_rates(&[3, 2, 4, 2]).unwrap();
        assert_eq!(ratios, vec![r(1, 4), r(1, 3), r(1, 2), r(1, 1)]);
        assert!(validate_known_ratios(&[r(1, 2)]).is_err());
        assert!(validate_known_ratios(&[r(1, 2), r(1, 3), r(1, 1)]).is_err());
    }
}
