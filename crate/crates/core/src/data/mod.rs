//! Multi-low-resolution (MLR) dataset synthesis, augmentation and sampling.

mod fixture;
mod io;

pub use fixture::{synthetic_fixture, FixtureConfig};
pub use io::{
    parse_record_name, record_file_name, scan_dataset, write_dataset, DatasetManifest,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use num_traits::One;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::layout::EmbeddingLayout;
use crate::resolution::{quantize_resolution, Rational, ResolutionLevel};
use crate::scalar::Scalar;

/// Smallest side length produced by down-sampling.
pub const MIN_DOWNSAMPLED_SIDE: usize = 4;

/// Per-channel mean and standard deviation used to normalize network inputs.
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub enum ImageSource {
    Pixels(Arc<Image<f32>>),
    Path(PathBuf),
}

#[derive(Debug, Clone)]
pub struct IdentityImageRecord {
    pub image_id: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub source: ImageSource,
    pub native_size: (usize, usize),
    pub is_synthetic_lr: bool,
    /// 1 for high-resolution originals.
    pub down_rate: u32,
}

impl IdentityImageRecord {
    pub fn from_pixels(image_id: impl Into<String>, identity_id: u32, camera_id: u32, image: Image<f32>) -> Self {
        Self {
            image_id: image_id.into(),
            identity_id,
            camera_id,
            native_size: image.size(),
            source: ImageSource::Pixels(Arc::new(image)),
            is_synthetic_lr: false,
            down_rate: 1,
        }
    }

    pub fn load(&self) -> Result<Image<f32>> {
        match &self.source {
            ImageSource::Pixels(img) => Ok(img.as_ref().clone()),
            ImageSource::Path(path) => {
                let img = image::open(path)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                    .to_rgb8();
                Ok(Image::from_rgb8(&img))
            }
        }
    }
}

/// Resize to the canonical size, the path taken by full-resolution images.
pub fn hr_passthrough<T: Scalar>(image: &Image<T>, canonical: (usize, usize)) -> Result<Image<T>> {
    image.resize_bilinear(canonical.0, canonical.1)
}

/// Simulate a low-resolution capture: bilinear down-sampling by `rate`
/// (floor division, sides clamped to [`MIN_DOWNSAMPLED_SIDE`]) followed by
/// bilinear up-sampling back to the canonical size.
pub fn synthesize_lr<T: Scalar>(image: &Image<T>, rate: u32, canonical: (usize, usize)) -> Result<Image<T>> {
    if rate < 2 {
        return Err(Error::domain(format!(
            "down-sampling rate must be >= 2, got {rate} (use hr_passthrough for rate 1)"
        )));
    }
    let hr = hr_passthrough(image, canonical)?;
    let r = rate as usize;
    let small_h = (canonical.0 / r).max(MIN_DOWNSAMPLED_SIDE);
    let small_w = (canonical.1 / r).max(MIN_DOWNSAMPLED_SIDE);
    hr.resize_bilinear(small_h, small_w)?
        .resize_bilinear(canonical.0, canonical.1)
}

/// `synthesize_lr` for rates >= 2, `hr_passthrough` for rate 1.
pub fn degrade<T: Scalar>(image: &Image<T>, rate: u32, canonical: (usize, usize)) -> Result<Image<T>> {
    match rate {
        0 => Err(Error::domain("down-sampling rate must be >= 1")),
        1 => hr_passthrough(image, canonical),
        r => synthesize_lr(image, r, canonical),
    }
}

pub fn normalize<T: Scalar>(image: &Image<T>) -> Image<T> {
    image.normalized(NORM_MEAN, NORM_STD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub pad_pixels: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            target_height: 256,
            target_width: 128,
            pad_pixels: 10,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            problems.push(format!("hflip_prob must lie in [0, 1], got {}", self.hflip_prob));
        }
        if self.target_height == 0 || self.target_width == 0 {
            problems.push("augmentation target size must be positive".to_string());
        }
        problems
    }
}

/// Resize, zero-pad, crop at `(top, left)` within the padded frame and
/// optionally mirror.
pub fn augment_with<T: Scalar>(
    image: &Image<T>,
    config: &AugmentationConfig,
    top: usize,
    left: usize,
    flip: bool,
) -> Result<Image<T>> {
    let (h, w) = (config.target_height, config.target_width);
    let cropped = image
        .resize_bilinear(h, w)?
        .zero_pad(config.pad_pixels)
        .crop(top, left, h, w)?;
    Ok(if flip { cropped.hflip() } else { cropped })
}

/// Random crop of the padded frame and horizontal flip, drawn from `rng`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    image: &Image<T>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<Image<T>> {
    let span = 2 * config.pad_pixels;
    let top = rng.gen_range(0..=span);
    let left = rng.gen_range(0..=span);
    let flip = rng.gen::<f64>() < config.hflip_prob;
    augment_with(image, config, top, left, flip)
}

/// One training example: a query at some resolution and a full-resolution
/// gallery image of the same identity.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub query_image: Image<T>,
    pub gallery_image: Image<T>,
    pub query_level: ResolutionLevel,
    pub query_label: usize,
    pub gallery_label: usize,
}

#[derive(Debug, Clone)]
struct Variant {
    rate: u32,
    level: ResolutionLevel,
    image: Image<f32>,
}

/// Training set of HR images and their synthesized LR counterparts.
#[derive(Debug, Clone)]
pub struct MlrTrainingSet {
    canonical: (usize, usize),
    /// Per record: the HR image followed by each LR variant.
    variants: Vec<Vec<Variant>>,
    labels: Vec<usize>,
    identities: Vec<u32>,
    by_label: Vec<Vec<usize>>,
    warnings: Vec<String>,
}

impl MlrTrainingSet {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.by_label.len()
    }

    /// Identity id of each class label.
    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn canonical_size(&self) -> (usize, usize) {
        self.canonical
    }

    /// Rates a query can be drawn at, 1 included.
    pub fn rates(&self) -> Vec<u32> {
        self.variants
            .first()
            .map(|v| v.iter().map(|x| x.rate).collect())
            .unwrap_or_default()
    }

    /// Draw `(query record, variant, gallery record)` indices.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize, usize) {
        let q = rng.gen_range(0..self.variants.len());
        let v = rng.gen_range(0..self.variants[q].len());
        let same: Vec<usize> = self.by_label[self.labels[q]]
            .iter()
            .copied()
            .filter(|&i| i != q)
            .collect();
        let g = *same.choose(rng).expect("identities keep at least two images");
        (q, v, g)
    }

    pub fn level_of(&self, record: usize, variant: usize) -> ResolutionLevel {
        self.variants[record][variant].level
    }

    /// Augmented, normalized batch.
    pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        augmentation: &AugmentationConfig,
        rng: &mut R,
    ) -> Result<Vec<TrainSample<T>>> {
        (0..batch_size)
            .map(|_| {
                let (q, v, g) = self.draw(rng);
                let variant = &self.variants[q][v];
                let query = augment(&variant.image.cast::<T>(), augmentation, rng)?;
                let gallery = augment(&self.variants[g][0].image.cast::<T>(), augmentation, rng)?;
                Ok(TrainSample {
                    query_image: normalize(&query),
                    gallery_image: normalize(&gallery),
                    query_level: variant.level,
                    query_label: self.labels[q],
                    gallery_label: self.labels[g],
                })
            })
            .collect()
    }
}

/// Build the MLR training set: every HR record plus one synthesized copy
/// per rate in `rates`, each tagged with its quantized level.
///
/// Identities with fewer than two images are dropped and reported in
/// [`MlrTrainingSet::warnings`].
pub fn make_mlr_training_set(
    hr_records: &[IdentityImageRecord],
    rates: &[u32],
    canonical: (usize, usize),
    layout: &EmbeddingLayout,
    known_ratios: &[Rational],
) -> Result<MlrTrainingSet> {
    let mut all_rates = vec![1u32];
    for &r in rates {
        if r < 2 {
            return Err(Error::domain(format!("LR rates must be >= 2, got {r}")));
        }
        if !all_rates.contains(&r) {
            all_rates.push(r);
        }
    }
    let mut levels = Vec::with_capacity(all_rates.len());
    for &r in &all_rates {
        let ratio = if r == 1 { Rational::one() } else { Rational::new(1, r) };
        levels.push(quantize_resolution(ratio, layout, known_ratios)?);
    }

    let mut grouped: BTreeMap<u32, Vec<&IdentityImageRecord>> = BTreeMap::new();
    for rec in hr_records.iter().filter(|r| r.down_rate == 1) {
        grouped.entry(rec.identity_id).or_default().push(rec);
    }
    let mut warnings = Vec::new();
    let mut set = MlrTrainingSet {
        canonical,
        variants: Vec::new(),
        labels: Vec::new(),
        identities: Vec::new(),
        by_label: Vec::new(),
        warnings: Vec::new(),
    };
    for (identity, recs) in grouped {
        if recs.len() < 2 {
            warnings.push(format!(
                "identity {identity} has {} HR image(s); excluded from training",
                recs.len()
            ));
            continue;
        }
        let label = set.by_label.len();
        let mut members = Vec::with_capacity(recs.len());
        for rec in recs {
            let hr = hr_passthrough(&rec.load()?, canonical)?;
            let variants = all_rates
                .iter()
                .zip(&levels)
                .map(|(&rate, &level)| {
                    Ok(Variant {
                        rate,
                        level,
                        image: degrade(&hr, rate, canonical)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            members.push(set.variants.len());
            set.variants.push(variants);
            set.labels.push(label);
        }
        set.identities.push(identity);
        set.by_label.push(members);
    }
    if set.variants.is_empty() {
        return Err(Error::Data("no identity has two or more HR images".into()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    set.warnings = warnings;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    /// Index into the test records.
    pub record: usize,
    pub rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGallerySplit {
    pub queries: Vec<QueryItem>,
    /// Record indices, exactly one per identity.
    pub gallery: Vec<usize>,
    pub log: Vec<String>,
}

/// One MLR evaluation trial: a random HR gallery image per identity, every
/// other image of that identity becomes a query at a random rate.
pub fn make_mlr_query_gallery(
    test_records: &[IdentityImageRecord],
    rates: &[u32],
    trial_seed: u64,
) -> Result<QueryGallerySplit> {
    if rates.is_empty() {
        return Err(Error::domain("query rate list is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let mut grouped: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, rec) in test_records.iter().enumerate().filter(|(_, r)| r.down_rate == 1) {
        grouped.entry(rec.identity_id).or_default().push(i);
    }
    let mut split = QueryGallerySplit {
        queries: Vec::new(),
        gallery: Vec::new(),
        log: Vec::new(),
    };
    for (identity, members) in grouped {
        let pick = rng.gen_range(0..members.len());
        split.gallery.push(members[pick]);
        if members.len() == 1 {
            split
                .log
                .push(format!("identity {identity} has a single image; gallery only"));
            continue;
        }
        for (j, &record) in members.iter().enumerate() {
            if j != pick {
                let rate = rates[rng.gen_range(0..rates.len())];
                split.queries.push(QueryItem { record, rate });
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolution::ratios_from_rates;

    fn checkerboard() -> Image<f64> {
        Image::from_fn(4, 4, |y, x, _| ((x + y) % 2) as f64)
    }

    #[test]
    fn constant_image_survives_every_rate() {
        let img = Image::<f64>::from_fn(32, 16, |_, _, c| [0.2, 0.5, 0.9][c]);
        for rate in 2..=8 {
            let out = synthesize_lr(&img, rate, (32, 16)).unwrap();
            assert_eq!(out.size(), (32, 16));
            for (&a, &b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_one_is_bitwise_identity() {
        let img = Image::<f32>::from_fn(32, 16, |y, x, c| (y * 31 + x * 7 + c) as f32 / 97.0);
        assert_eq!(degrade(&img, 1, (32, 16)).unwrap(), img);
        assert!(matches!(synthesize_lr(&img, 1, (32, 16)), Err(Error::Domain(_))));
    }

    #[test]
    fn checkerboard_rate_two_hand_oracle() {
        // 4x4 with the 4-pixel floor clamp stays 4x4, so the rate-2 path on a
        // 4x4 canonical frame is a bitwise identity; on an 8x8 frame the
        // checkerboard tiles down to 4x4 samples at half-pixel centres
        // (src = 2*o + 0.5) which average each 2x2 cell to exactly 0.5.
        let img = checkerboard();
        assert_eq!(synthesize_lr(&img, 2, (4, 4)).unwrap(), img);
        let big = Image::<f64>::from_fn(8, 8, |y, x, _| ((x + y) % 2) as f64);
        let out = synthesize_lr(&big, 2, (8, 8)).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn lr_output_idempotent_under_passthrough() {
        let img = Image::<f64>::from_fn(32, 16, |y, x, c| ((y * x + c) % 5) as f64);
        let lr = synthesize_lr(&img, 3, (32, 16)).unwrap();
        assert_eq!(hr_passthrough(&lr, (32, 16)).unwrap(), lr);
    }

    #[test]
    fn minimum_side_clamp() {
        let img = Image::<f64>::from_fn(8, 8, |y, x, _| (x * y) as f64);
        // 8/4 = 2 would be degenerate; clamps to 4 so rate 4 equals rate 2
        assert_eq!(
            synthesize_lr(&img, 4, (8, 8)).unwrap(),
            synthesize_lr(&img, 2, (8, 8)).unwrap()
        );
    }

    #[test]
    fn centre_crop_without_flip_recovers_original() {
        let cfg = AugmentationConfig {
            target_height: 8,
            target_width: 4,
            pad_pixels: 10,
            hflip_prob: 0.0,
        };
        let img = Image::<f64>::from_fn(8, 4, |y, x, c| (y * 4 + x + c) as f64);
        assert_eq!(augment_with(&img, &cfg, 10, 10, false).unwrap(), img);
        assert_eq!(augment_with(&img, &cfg, 10, 10, true).unwrap().hflip(), img);
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let cfg = AugmentationConfig {
            target_height: 16,
            target_width: 8,
            pad_pixels: 2,
            hflip_prob: 0.5,
        };
        let img = Image::<f32>::from_fn(16, 8, |y, x, c| (y * 8 + x + c) as f32);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| augment(&img, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        assert!(run(7).iter().all(|a| a.size() == (16, 8)));
    }

    fn fixture(ids: usize, per: usize) -> Vec<IdentityImageRecord> {
        synthetic_fixture(&FixtureConfig {
            identities: ids,
            images_per_identity: per,
            height: 32,
            width: 16,
            seed: 1,
        })
    }

    #[test]
    fn hr_only_training_set_uses_top_level() {
        let layout = EmbeddingLayout::equal(4, 16).unwrap();
        let ratios = ratios_from_rates(&[2, 3, 4]).unwrap();
        let set = make_mlr_training_set(&fixture(3, 2), &[], (32, 16), &layout, &ratios).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (q, v, _) = set.draw(&mut rng);
            assert_eq!(set.level_of(q, v).index(), 4);
        }
    }

    #[test]
    fn level_frequencies_are_uniform() {
        let layout = EmbeddingLayout::equal(4, 16).unwrap();
        let ratios = ratios_from_rates(&[2, 3, 4]).unwrap();
        let set = make_mlr_training_set(&fixture(4, 3), &[2, 3, 4], (32, 16), &layout, &ratios).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let (q, v, g) = set.draw(&mut rng);
            assert_ne!(q, g);
            counts[set.level_of(q, v).index() - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn fixture_labels_survive_the_loader() {
        let layout = EmbeddingLayout::equal(4, 16).unwrap();
        let ratios = ratios_from_rates(&[2, 3, 4]).unwrap();
        let records = fixture(10, 4);
        let set = make_mlr_training_set(&records, &[2, 3, 4], (32, 16), &layout, &ratios).unwrap();
        assert_eq!(set.classes(), 10);
        assert_eq!(set.len(), 40);
        assert_eq!(set.identities(), &(0..10).collect::<Vec<u32>>()[..]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aug = AugmentationConfig { target_height: 32, target_width: 16, pad_pixels: 2, hflip_prob: 0.5 };
        let batch: Vec<TrainSample<f32>> = set.sample_batch(16, &aug, &mut rng).unwrap();
        for s in &batch {
            assert_eq!(s.query_label, s.gallery_label);
            assert_eq!(s.query_image.size(), (32, 16));
            assert_eq!(s.gallery_image.size(), (32, 16));
        }
    }

    #[test]
    fn singleton_identities_are_excluded_with_warning() {
        let layout = EmbeddingLayout::equal(4, 16).unwrap();
        let ratios = ratios_from_rates(&[2, 3, 4]).unwrap();
        let mut records = fixture(3, 2);
        records.remove(3);
        let set = make_mlr_training_set(&records, &[2], (32, 16), &layout, &ratios).unwrap();
        assert_eq!(set.classes(), 2);
        assert_eq!(set.warnings().len(), 1);
    }

    #[test]
    fn query_gallery_counts() {
        let split = make_mlr_query_gallery(&fixture(2, 2), &[2, 3, 4], 5).unwrap();
        assert_eq!(split.gallery.len(), 2);
        assert_eq!(split.queries.len(), 2);
    }

    #[test]
    fn query_gallery_is_seed_deterministic() {
        let records = fixture(5, 4);
        let a = make_mlr_query_gallery(&records, &[2, 3, 4], 77).unwrap();
        let b = make_mlr_query_gallery(&records, &[2, 3, 4], 77).unwrap();
        assert_eq!(a, b);
        let c = make_mlr_query_gallery(&records, &[2, 3, 4], 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_rate_and_singletons() {
        let mut records = fixture(3, 3);
        records.truncate(7);
        let split = make_mlr_query_gallery(&records, &[3], 1).unwrap();
        assert!(split.queries.iter().all(|q| q.rate == 3));
        assert_eq!(split.gallery.len(), 3);
        assert_eq!(split.queries.len(), 4);
        assert_eq!(split.log.len(), 1);
        let mut ids: Vec<u32> = split.gallery.iter().map(|&g| records[g].identity_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }
}
