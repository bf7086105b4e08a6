//! The end-to-end change-detection framework.
//!
//! Stage order is fixed: fit both regressions and predict each image into
//! the other sensor's domain, take per-pixel prediction-error distances,
//! clip outliers at d̄+kσ_d, normalise each distance image to [0,1], average
//! the two, median-filter, threshold. Every intermediate is retained in the
//! [`ChangeResult`] so the stages stay auditable.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::raster::{extract_pairs, Mask, Raster};
use crate::regress::{self, RegressorSpec};

/// H×W map of non-negative per-pixel prediction errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DistanceImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "distance image length {} != {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Format(format!("invalid distance value {v}")));
        }
        Ok(DistanceImage {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn to_raster(&self) -> Raster {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Raster::new(self.height, self.width, 1, data).expect("distance image is a valid raster")
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        (self
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.values.len() as f64)
            .sqrt()
    }
}

/// Per-direction wall-clock spans, fit through predict, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Timings {
    pub forward_s: f64,
    pub reverse_s: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.forward_s + self.reverse_s
    }
}

#[derive(Debug, Clone)]
pub struct ChangeResult {
    /// Fused score map in [0,1].
    pub score: DistanceImage,
    /// score > threshold.
    pub change_map: Mask,
    pub threshold: f64,
    /// d(X, X̂): error of the reverse prediction in sensor-X domain.
    pub distance_x: DistanceImage,
    /// d(Y, Ŷ): error of the forward prediction in sensor-Y domain.
    pub distance_y: DistanceImage,
    /// Ŷ = f⁽¹⁾(X) and X̂ = f⁽²⁾(Y).
    pub predicted_y: Raster,
    pub predicted_x: Raster,
    pub timings: Timings,
}

/// Knobs of the fixed stage sequence.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineOptions {
    /// Clip distances above d̄ + clip_sigma·σ_d.
    pub clip_sigma: f64,
    pub threshold: f64,
    pub median_filter: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            clip_sigma: 4.0,
            threshold: 0.5,
            median_filter: true,
        }
    }
}

/// Fits f⁽¹⁾ on (x→y) pairs and f⁽²⁾ on (y→x) pairs from the same mask,
/// then predicts both full images. Timing spans fit through predict per
/// direction.
pub fn two_way_regress(
    x: &Raster,
    y: &Raster,
    mask: &Mask,
    spec: &RegressorSpec,
) -> Result<(Raster, Raster, Timings)> {
    let pairs = extract_pairs(x, y, mask)?;

    let start = Instant::now();
    let forward = regress::fit(spec, &pairs)?;
    let predicted_y = forward.predict_raster(x)?;
    let forward_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let reverse = regress::fit(spec, &pairs.reversed())?;
    let predicted_x = reverse.predict_raster(y)?;
    let reverse_s = start.elapsed().as_secs_f64();

    Ok((
        predicted_y,
        predicted_x,
        Timings {
            forward_s,
            reverse_s,
        },
    ))
}

/// Per-pixel Euclidean norm across channels of (a − b).
pub fn distance_image(a: &Raster, b: &Raster) -> Result<DistanceImage> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::Dimension("distance image operands differ in shape".into()));
    }
    let c = a.channels();
    let values = a
        .data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .map(|(pa, pb)| {
            let mut s = 0.0f64;
            for (va, vb) in pa.iter().zip(pb) {
                let d = *va as f64 - *vb as f64;
                s += d * d;
            }
            s.sqrt()
        })
        .collect();
    DistanceImage::new(a.height(), a.width(), values)
}

/// Replaces values above d̄+kσ_d (statistics of the input) by that cap.
pub fn clip_outliers(d: &DistanceImage, k: f64) -> DistanceImage {
    let cap = d.mean() + k * d.std();
    let values = d.values.iter().map(|&v| v.min(cap)).collect();
    DistanceImage {
        height: d.height,
        width: d.width,
        values,
    }
}

/// (d−min)/(max−min); constant inputs map to all zeros.
pub fn normalize01(d: &DistanceImage) -> DistanceImage {
    let min = d.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 {
        d.values.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; d.values.len()]
    };
    DistanceImage {
        height: d.height,
        width: d.width,
        values,
    }
}

/// Pixel-wise average of two normalised distance images.
pub fn fuse(d1: &DistanceImage, d2: &DistanceImage) -> Result<DistanceImage> {
    if d1.height != d2.height || d1.width != d2.width {
        return Err(Error::Dimension("fuse operands differ in shape".into()));
    }
    let values = d1
        .values
        .iter()
        .zip(&d2.values)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Ok(DistanceImage {
        height: d1.height,
        width: d1.width,
        values,
    })
}

/// 3×3 median filter; border pixels use their edge-truncated neighbourhood.
pub fn median_filter3(d: &DistanceImage) -> DistanceImage {
    let (h, w) = (d.height, d.width);
    let mut values = Vec::with_capacity(h * w);
    let mut window = [0.0f64; 9];
    for row in 0..h {
        for col in 0..w {
            let mut n = 0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let r = row as i64 + dr;
                    let c = col as i64 + dc;
                    if r >= 0 && r < h as i64 && c >= 0 && c < w as i64 {
                        window[n] = d.values[r as usize * w + c as usize];
                        n += 1;
                    }
                }
            }
            let win = &mut window[..n];
            win.sort_unstable_by(f64::total_cmp);
            // median of an even-size window: lower of the two central values,
            // keeping every output drawn from the input multiset
            values.push(win[(n - 1) / 2]);
        }
    }
    DistanceImage {
        height: h,
        width: w,
        values,
    }
}

/// Mask true where the score exceeds `t`.
pub fn threshold(d: &DistanceImage, t: f64) -> Mask {
    let values = d.values.iter().map(|&v| v > t).collect();
    Mask::new(d.height, d.width, values).expect("distance image dims are valid")
}

/// The full framework: two-way regression → distances → clip → normalise →
/// fuse → (median filter) → threshold.
pub fn run_pipeline(
    x: &Raster,
    y: &Raster,
    train_mask: &Mask,
    spec: &RegressorSpec,
    opts: &PipelineOptions,
) -> Result<ChangeResult> {
    let (predicted_y, predicted_x, timings) = two_way_regress(x, y, train_mask, spec)?;
    let d_x = distance_image(x, &predicted_x)?;
    let d_y = distance_image(y, &predicted_y)?;
    let n_x = normalize01(&clip_outliers(&d_x, opts.clip_sigma));
    let n_y = normalize01(&clip_outliers(&d_y, opts.clip_sigma));
    let mut score = fuse(&n_x, &n_y)?;
    if opts.median_filter {
        score = median_filter3(&score);
    }
    let change_map = threshold(&score, opts.threshold);
    Ok(ChangeResult {
        score,
        change_map,
        threshold: opts.threshold,
        distance_x: d_x,
        distance_y: d_y,
        predicted_y,
        predicted_x,
        timings,
    })
}
