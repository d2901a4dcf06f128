//! On-disk dataset layout.
//!
//! One flat directory of PNG files named in the Market-1501 style:
//!
//! ```text
//! <identity:04>_c<camera>s1_<sequence:06>_00.png        HR original
//! <identity:04>_c<camera>s1_<sequence:06>_00_r<k>.png   LR copy, down-sampled by k
//! ```
//!
//! LR copies are stored at their reduced size; loaders up-sample them back to
//! the canonical size. Files with negative identities (junk/distractor
//! images) or unparseable names are skipped with a warning.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{hr_passthrough, IdentityImageRecord, ImageSource, MIN_DOWNSAMPLED_SIDE};
use crate::error::{Error, Result};

pub fn record_file_name(identity: u32, camera: u32, sequence: u32, rate: u32) -> String {
    if rate <= 1 {
        format!("{identity:04}_c{camera}s1_{sequence:06}_00.png")
    } else {
        format!("{identity:04}_c{camera}s1_{sequence:06}_00_r{rate}.png")
    }
}

/// `(identity, camera, down_rate)` from a file name, `None` if it does not
/// follow the layout.
pub fn parse_record_name(name: &str) -> Option<(u32, u32, u32)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() < 2 {
        return None;
    }
    let identity: u32 = parts[0].parse().ok()?;
    let cam_part = parts[1].strip_prefix('c')?;
    let cam_digits: String = cam_part.chars().take_while(char::is_ascii_digit).collect();
    let camera: u32 = cam_digits.parse().ok()?;
    let rate = match parts.last().and_then(|p| p.strip_prefix('r')) {
        Some(r) if parts.len() > 2 => r.parse().ok()?,
        _ => 1,
    };
    (rate >= 1).then_some((identity, camera, rate))
}

/// Index every image file in `dir`, sorted by name.
pub fn scan_dataset(dir: &Path) -> Result<(Vec<IdentityImageRecord>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    paths.sort();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some((identity, camera, rate)) = parse_record_name(&name) else {
            warnings.push(format!("skipping {name}: name does not match <id>_c<cam>..."));
            continue;
        };
        let (w, h) = image::image_dimensions(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let image_id = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s).to_string();
        records.push(IdentityImageRecord {
            image_id,
            identity_id: identity,
            camera_id: camera,
            source: ImageSource::Path(path),
            native_size: (h as usize, w as usize),
            is_synthetic_lr: rate > 1,
            down_rate: rate,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no dataset images found in {}", dir.display())));
    }
    Ok((records, warnings))
}

/// Image counts per identity and down-sampling rate.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: usize,
    pub per_identity: BTreeMap<u32, BTreeMap<u32, usize>>,
}

impl DatasetManifest {
    pub fn add(&mut self, identity: u32, rate: u32) {
        self.images += 1;
        *self.per_identity.entry(identity).or_default().entry(rate).or_default() += 1;
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "images\t{}\nidentities\t{}\nidentity\trate\tcount\n",
            self.images,
            self.per_identity.len()
        );
        for (id, rates) in &self.per_identity {
            for (rate, n) in rates {
                out.push_str(&format!("{id}\t{rate}\t{n}\n"));
            }
        }
        out
    }
}

/// Write each HR record (resized to `canonical`) plus one LR copy per rate,
/// the LR copy stored at its down-sampled size.
pub fn write_dataset(
    dir: &Path,
    records: &[IdentityImageRecord],
    rates: &[u32],
    canonical: (usize, usize),
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    let mut sequence: BTreeMap<u32, u32> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.down_rate == 1) {
        let seq = sequence.entry(rec.identity_id).or_default();
        let hr = hr_passthrough(&rec.load()?, canonical)?;
        hr.to_rgb8()
            .save(dir.join(record_file_name(rec.identity_id, rec.camera_id, *seq, 1)))?;
        manifest.add(rec.identity_id, 1);
        for &rate in rates.iter().filter(|&&r| r >= 2) {
            let r = rate as usize;
            let small = hr.resize_bilinear(
                (canonical.0 / r).max(MIN_DOWNSAMPLED_SIDE),
                (canonical.1 / r).max(MIN_DOWNSAMPLED_SIDE),
            )?;
            small
                .to_rgb8()
                .save(dir.join(record_file_name(rec.identity_id, rec.camera_id, *seq, rate)))?;
            manifest.add(rec.identity_id, rate);
        }
        *seq += 1;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
