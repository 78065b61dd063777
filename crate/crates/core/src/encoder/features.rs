//! Deterministic multi-level image statistics standing in for backbone hidden states.
//!
//! Levels, in concatenation order:
//!
//! 1. per-channel means of R, G, B in [0, 1] (3 values);
//! 2. 8-bin unsigned gradient-orientation histogram of luma: central
//!    differences with clamped borders, angle folded into [0, π), each pixel
//!    adds its gradient magnitude to bin ⌊8θ/π⌋, totals divided by the pixel
//!    count (8 values);
//! 3. radial frequency energy of luma: Σ|F(u,v)|² / N⁴ over the 2-D DFT,
//!    DC excluded, split at radius N/4 into a low band (0 < ρ ≤ N/4) and a
//!    high band (ρ > N/4), with signed frequencies (2 values);
//! 4. luma averaged over a 4×4 grid of equal blocks, row-major (16 values).

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Array;
use crate::raster::Raster;

pub const ORIENTATION_BINS: usize = 8;
pub const GRID: usize = 4;
pub const LEVEL_WIDTHS: [usize; 4] = [3, ORIENTATION_BINS, 2, GRID * GRID];
pub const FEATURE_WIDTH: usize = 3 + ORIENTATION_BINS + 2 + GRID * GRID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    /// Square image side; must be a positive multiple of 4.
    pub size: usize,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self { size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub levels: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Levels concatenated in order 1..L.
    pub fn concat(&self) -> Vec<f64> {
        self.levels.iter().flatten().copied().collect()
    }

    pub fn width(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

pub fn extract_features(image: &Raster, spec: &ExtractorSpec) -> Result<FeatureStack> {
    let n = spec.size;
    if n == 0 || !n.is_multiple_of(GRID) {
        return Err(Error::UnsupportedImage(format!("extractor size {n} is not a positive multiple of {GRID}")));
    }
    if image.width() != n || image.height() != n {
        return Err(Error::UnsupportedImage(format!(
            "expected {n}x{n}, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let luma: Vec<f64> = (0..n * n).map(|i| image.luma(i % n, i / n)).collect();
    Ok(FeatureStack {
        levels: vec![
            channel_means(image),
            orientation_histogram(&luma, n),
            frequency_energy(&luma, n),
            block_luma(&luma, n),
        ],
    })
}

/// Features of several images stacked as rows.
pub fn feature_matrix(stacks: &[FeatureStack]) -> Result<Array> {
    let width = stacks.first().map(FeatureStack::width).unwrap_or(FEATURE_WIDTH);
    let mut data = Vec::with_capacity(stacks.len() * width);
    for s in stacks {
        if s.width() != width {
            return Err(Error::invalid("feature stacks of differing width"));
        }
        data.extend(s.concat());
    }
    Array::new(vec![stacks.len(), width], data)
}

fn channel_means(image: &Raster) -> Vec<f64> {
    let mut sums = [0.0; 3];
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.unit(x, y);
            for c in 0..3 {
                sums[c] += p[c];
            }
        }
    }
    let count = (image.width() * image.height()) as f64;
    sums.iter().map(|s| s / count).collect()
}

fn orientation_histogram(luma: &[f64], n: usize) -> Vec<f64> {
    let at = |x: usize, y: usize| luma[y * n + x];
    let mut hist = [0.0; ORIENTATION_BINS];
    for y in 0..n {
        for x in 0..n {
            let gx = (at((x + 1).min(n - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(n - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += PI;
            }
            if theta >= PI {
                theta -= PI;
            }
            let bin = ((theta / PI * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            hist[bin] += mag;
        }
    }
    let count = (n * n) as f64;
    hist.iter().map(|h| h / count).collect()
}

fn frequency_energy(luma: &[f64], n: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut grid: Vec<Complex<f64>> = luma.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in grid.chunks_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            column[y] = grid[y * n + x];
        }
        fft.process(&mut column);
        for y in 0..n {
            grid[y * n + x] = column[y];
        }
    }
    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    let cutoff = n as f64 / 4.0;
    let norm = (n * n * n * n) as f64;
    let (mut low, mut high) = (0.0, 0.0);
    for v in 0..n {
        for u in 0..n {
            if u == 0 && v == 0 {
                continue;
            }
            let rho = (signed(u).powi(2) + signed(v).powi(2)).sqrt();
            let power = grid[v * n + u].norm_sqr() / norm;
            if rho <= cutoff {
                low += power;
            } else {
                high += power;
            }
        }
    }
    vec![low, high]
}

fn block_luma(luma: &[f64], n: usize) -> Vec<f64> {
    let b = n / GRID;
    let mut out = vec![0.0; GRID * GRID];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut s = 0.0;
            for y in gy * b..(gy + 1) * b {
                for x in gx * b..(gx + 1) * b {
                    s += luma[y * n + x];
                }
            }
            out[gy * GRID + gx] = s / (b * b) as f64;
        }
    }
    out
}
