//! Procedural identity fixture: each identity is a pair of body colours
//! plus a stripe pattern; two cameras differ in noise level and exposure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IdentityImageRecord;
use crate::image::Image;
use crate::nn::normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            images_per_identity: 8,
            height: 32,
            width: 16,
            seed: 2024,
        }
    }
}

struct Look {
    upper: [f64; 3],
    lower: [f64; 3],
    stripe: [f64; 3],
    period: usize,
    vertical: bool,
    split: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn look(identity: usize, total: usize, rng: &mut ChaCha8Rng) -> Look {
    let hue = identity as f64 / total as f64;
    let lower_hue = hue + 0.5 + rng.gen_range(-0.15..0.15);
    Look {
        upper: hsv(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.7..0.95)),
        lower: hsv(lower_hue, rng.gen_range(0.3..0.8), rng.gen_range(0.25..0.6)),
        stripe: hsv(hue + 0.25, 0.2, rng.gen_range(0.85..1.0)),
        period: rng.gen_range(2..6),
        vertical: rng.gen_bool(0.5),
        split: rng.gen_range(0.4..0.6),
    }
}

/// Render `identities x images_per_identity` HR records. Images alternate
/// between camera 1 (mild noise) and camera 2 (stronger noise, darker
/// exposure); pixel values are quantized to 8 bits so a PNG round trip is
/// exact.
pub fn synthetic_fixture(config: &FixtureConfig) -> Vec<IdentityImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w) = (config.height, config.width);
    let mut records = Vec::with_capacity(config.identities * config.images_per_identity);
    for identity in 0..config.identities {
        let look = look(identity, config.identities, &mut rng);
        for idx in 0..config.images_per_identity {
            let camera = (idx % 2) as u32 + 1;
            let (noise, gain) = if camera == 1 { (0.02, 1.0) } else { (0.06, 0.85) };
            let shift_y = rng.gen_range(-1i64..=1);
            let shift_x = rng.gen_range(-1i64..=1);
            let phase = rng.gen_range(0..look.period);
            let split_row = ((look.split * h as f64) as i64 + shift_y).clamp(1, h as i64 - 1) as usize;
            let mut img = Image::<f32>::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let xs = (x as i64 + shift_x).rem_euclid(w as i64) as usize;
                    let base = if y < split_row {
                        let along = if look.vertical { xs } else { y };
                        if (along + phase) % look.period == 0 {
                            look.stripe
                        } else {
                            look.upper
                        }
                    } else {
                        look.lower
                    };
                    for (c, &b) in base.iter().enumerate() {
                        let v = (b * gain + normal::<f64, _>(&mut rng, noise)).clamp(0.0, 1.0);
                        img.set(y, x, c, ((v * 255.0).round() / 255.0) as f32);
                    }
                }
            }
            let image_id = super::record_file_name(identity as u32, camera, idx as u32, 1);
            let image_id = image_id.trim_end_matches(".png").to_string();
            records.push(IdentityImageRecord::from_pixels(image_id, identity as u32, camera, img));
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape_and_determinism() {
        let cfg = FixtureConfig::default();
        let a = synthetic_fixture(&cfg);
        let b = synthetic_fixture(&cfg);
        assert_eq!(a.len(), 80);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image_id, y.image_id);
            assert_eq!(x.load().unwrap(), y.load().unwrap());
        }
        assert!(a.iter().all(|r| r.native_size == (32, 16) && r.down_rate == 1));
        assert_eq!(a[1].camera_id, 2);
        assert_eq!(a[8].identity_id, 1);
    }

    #[test]
    fn identities_differ_in_mean_colour() {
        let recs = synthetic_fixture(&FixtureConfig::default());
        let mean = |i: usize| -> [f64; 3] {
            let img = recs[i].load().unwrap();
            let n = (img.height() * img.width()) as f64;
            let mut m = [0.0; 3];
            for (c, mc) in m.iter_mut().enumerate() {
                *mc = img.data()[c * img.height() * img.width()..(c + 1) * img.height() * img.width()]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>()
                    / n;
            }
            m
        };
        let first = mean(0);
        let other = mean(8);
        let dist: f64 = first.iter().zip(&other).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 1e-3);
    }
}
