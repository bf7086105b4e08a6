//! Deterministic generator of co-registered heterogeneous image pairs with
//! known change masks, for desk-scale end-to-end verification.
//!
//! Both sensors observe the same smooth latent field through different
//! nonlinear maps, so a perfect cross-sensor regression has zero irreducible
//! error outside the change region (up to the additive noise). The change is
//! a seeded rectangle in which the latent values are redrawn, giving an
//! unambiguous ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
use crate::util::rng_for;

/// Nonlinearity applied to produce the second image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorBStyle {
    /// Independent affine + tanh map, like the first sensor.
    Optical,
    /// Exponential of a linear map with multiplicative gamma speckle,
    /// mimicking multi-look SAR intensity. Strictly positive.
    SarLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub channels_a: usize,
    pub channels_b: usize,
    pub sensor_b_style: SensorBStyle,
    /// Approximate fraction of pixels covered by the change rectangle.
    pub change_fraction: f64,
    /// Additive Gaussian noise on optical channels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            latent_channels: 3,
            channels_a: 7,
            channels_b: 3,
            sensor_b_style: SensorBStyle::Optical,
            change_fraction: 0.05,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Parameter(
                "synthetic scenes must be at least 16x16".into(),
            ));
        }
        if self.latent_channels == 0 || self.channels_a == 0 || self.channels_b == 0 {
            return Err(Error::Parameter("channel counts must be nonzero".into()));
        }
        if !(self.change_fraction > 0.0 && self.change_fraction < 1.0) {
            return Err(Error::Parameter("change_fraction must lie in (0,1)".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One pass of the 5-tap binomial kernel [1,4,6,4,1]/16 along rows then
/// columns, with replicated borders.
fn smooth_pass(field: &mut Vec<f64>, h: usize, w: usize) {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                let cc = (c as isize + t as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += k * field[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                let rr = (r as isize + t as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[rr * w + c];
            }
            field[r * w + c] = acc;
        }
    }
}

/// Smooth latent field: seeded uniform noise, three binomial passes, then
/// a per-channel rescale back to [0,1]. Smoothing crushes the variance of
/// white noise; without the rescale the scene is nearly flat and carries no
/// structure for a regression to learn.
fn latent_field(rng: &mut ChaCha8Rng, h: usize, w: usize, channels: usize) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|_| {
            let mut field: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            for _ in 0..3 {
                smooth_pass(&mut field, h, w);
            }
            let lo = field.iter().cloned().fold(f64::MAX, f64::min);
            let hi = field.iter().cloned().fold(f64::MIN, f64::max);
            if hi > lo {
                for v in field.iter_mut() {
                    *v = (*v - lo) / (hi - lo);
                }
            }
            field
        })
        .collect()
}

/// Per-output-channel linear map plus offset over the latent channels.
struct AffineMap {
    weights: Vec<f64>, // out_channels x latent_channels, row-major
    offsets: Vec<f64>,
    gains: Vec<f64>,
    shifts: Vec<f64>,
}

impl AffineMap {
    fn draw(rng: &mut ChaCha8Rng, out_channels: usize, latent_channels: usize) -> Self {
        AffineMap {
            weights: (0..out_channels * latent_channels)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
            offsets: (0..out_channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
            gains: (0..out_channels).map(|_| rng.random_range(0.5..1.5)).collect(),
            shifts: (0..out_channels).map(|_| rng.random_range(0.0..0.5)).collect(),
        }
    }

    fn linear(&self, latent: &[Vec<f64>], pixel: usize, q: usize) -> f64 {
        let l = latent.len();
        let mut acc = self.offsets[q];
        for (p, field) in latent.iter().enumerate() {
            acc += self.weights[q * l + p] * field[pixel];
        }
        acc
    }

    /// tanh response followed by the per-channel affine rescale.
    fn optical(&self, latent: &[Vec<f64>], pixel: usize, q: usize) -> f64 {
        self.gains[q] * self.linear(latent, pixel, q).tanh() + self.shifts[q]
    }
}

/// Seeded rectangle covering roughly `fraction` of the scene, with a random
/// aspect ratio.
fn change_rectangle(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    fraction: f64,
) -> (usize, usize, usize, usize) {
    let area = (fraction * (h * w) as f64).max(1.0);
    let aspect = rng.random_range(0.5..2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    (r0, c0, rh, rw)
}

/// Generates the image pair, the planted change mask, and the unchanged
/// training mask (complement of a 2-pixel dilation of the rectangle).
/// Bit-identical for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<(Raster, Raster, Mask, Mask)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;

    let latent = latent_field(&mut rng_for(cfg.seed, 0), h, w, cfg.latent_channels);
    let map_a = AffineMap::draw(&mut rng_for(cfg.seed, 1), cfg.channels_a, cfg.latent_channels);
    let map_b = AffineMap::draw(&mut rng_for(cfg.seed, 2), cfg.channels_b, cfg.latent_channels);

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;

    let mut rng_noise_a = rng_for(cfg.seed, 3);
    let mut xdata = vec![0.0f32; n * cfg.channels_a];
    for pixel in 0..n {
        for q in 0..cfg.channels_a {
            let noisy = map_a.optical(&latent, pixel, q)
                + if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng_noise_a)
                } else {
                    0.0
                };
            xdata[pixel * cfg.channels_a + q] = noisy as f32;
        }
    }
    let x = Raster::new(h, w, cfg.channels_a, xdata)?;

    // the second sensor sees the scene after the change event: latent
    // values inside the rectangle are redrawn (sharp, unsmoothed edit)
    let (r0, c0, rh, rw) = change_rectangle(&mut rng_for(cfg.seed, 4), h, w, cfg.change_fraction);
    let mut rng_redraw = rng_for(cfg.seed, 5);
    let mut latent_b = latent.clone();
    for field in latent_b.iter_mut() {
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                // redraw as a wrapped shift of at least 0.35 so every
                // changed pixel moves materially in latent space
                let v = field[r * w + c] + rng_redraw.random_range(0.35..0.65);
                field[r * w + c] = v - v.floor();
            }
        }
    }

    let mut rng_noise_b = rng_for(cfg.seed, 6);
    let mut ydata = vec![0.0f32; n * cfg.channels_b];
    match cfg.sensor_b_style {
        SensorBStyle::Optical => {
            for pixel in 0..n {
                for q in 0..cfg.channels_b {
                    let noisy = map_b.optical(&latent_b, pixel, q)
                        + if cfg.noise_sigma > 0.0 {
                            noise.sample(&mut rng_noise_b)
                        } else {
                            0.0
                        };
                    ydata[pixel * cfg.channels_b + q] = noisy as f32;
                }
            }
        }
        SensorBStyle::SarLike => {
            let speckle = Gamma::new(4.0, 0.25)
                .map_err(|e| Error::Parameter(format!("speckle distribution: {e}")))?;
            for pixel in 0..n {
                // one multiplicative factor per pixel: speckle follows the
                // look geometry, not the spectral band
                let s = speckle.sample(&mut rng_noise_b);
                for q in 0..cfg.channels_b {
                    // the factor 2 widens the dynamic range so that latent
                    // edits move intensities well beyond the speckle spread
                    let intensity = (2.0 * map_b.linear(&latent_b, pixel, q)).exp();
                    ydata[pixel * cfg.channels_b + q] = (intensity * s) as f32;
                }
            }
        }
    }
    let y = Raster::new(h, w, cfg.channels_b, ydata)?;

    let mut change = Mask::filled(h, w, false);
    for r in r0..r0 + rh {
        for c in c0..c0 + rw {
            change.set(r, c, true);
        }
    }
    let mut unchanged = Mask::filled(h, w, true);
    for r in r0.saturating_sub(2)..(r0 + rh + 2).min(h) {
        for c in c0.saturating_sub(2)..(c0 + rw + 2).min(w) {
            unchanged.set(r, c, false);
        }
    }

    Ok((x, y, change, unchanged))
}
