//! Perturbation defenses applied to the update a client sends out: Gaussian
//! differential privacy, top-k sparsification, uniform quantization, and the
//! magnitude-band exposure used to probe which gradient elements leak.

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

/// Where a defense is applied during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attachment {
    /// Sensible default per kind: DP perturbs each local step's gradient,
    /// the compression defenses act on the outgoing update.
    Auto,
    PerStep,
    PerUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DefenseKind {
    None,
    GaussianDp {
        epsilon: f64,
        delta: f64,
        clip: f64,
        /// Per-round multiplicative decay on sigma; 1.0 disables it.
        sigma_decay: f64,
    },
    Sparsify { keep_ratio: f64 },
    Quantize { bits: u32 },
    Expose { mode: ExposeMode, fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposeMode {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub attachment: Attachment,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig { kind: DefenseKind::None, attachment: Attachment::Auto, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::GaussianDp { epsilon, delta, clip, sigma_decay } => {
                if *epsilon <= 0.0 {
                    return Err(Error::spec("gaussian-dp: epsilon must be > 0"));
                }
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(Error::spec("gaussian-dp: delta must be in (0, 1)"));
                }
                if *clip <= 0.0 {
                    return Err(Error::spec("gaussian-dp: clip must be > 0"));
                }
                if !(*sigma_decay > 0.0 && *sigma_decay <= 1.0) {
                    return Err(Error::spec("gaussian-dp: sigma decay must be in (0, 1]"));
                }
                Ok(())
            }
            DefenseKind::Sparsify { keep_ratio } => {
                if *keep_ratio > 0.0 && *keep_ratio <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::spec("sparsify: keep ratio must be in (0, 1]"))
                }
            }
            DefenseKind::Quantize { bits } => {
                if (1..=32).contains(bits) {
                    Ok(())
                } else {
                    Err(Error::spec("quantize: bits must be in 1..=32"))
                }
            }
            DefenseKind::Expose { fraction, .. } => {
                if *fraction > 0.0 && *fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::spec("expose: fraction must be in (0, 1]"))
                }
            }
        }
    }

    /// True when the defense should perturb each local training step.
    pub fn applies_per_step(&self) -> bool {
        match self.attachment {
            Attachment::PerStep => true,
            Attachment::PerUpdate => false,
            Attachment::Auto => matches!(self.kind, DefenseKind::GaussianDp { .. }),
        }
    }

    /// Apply this defense to a flat gradient. `round` drives the DP sigma
    /// decay; `step_index` separates noise draws within a round.
    pub fn apply(&self, g: &[f64], round: usize, step_index: u64) -> Result<Vec<f64>> {
        self.validate()?;
        match &self.kind {
            DefenseKind::None => Ok(g.to_vec()),
            DefenseKind::GaussianDp { epsilon, delta, clip, sigma_decay } => {
                let decay = powi(*sigma_decay, round);
                let seed = crate::rng::derive_seed(self.seed, "dp-noise", (round as u64) << 20 | step_index);
                Ok(dp_gaussian_scaled(g, *epsilon, *delta, *clip, decay, seed))
            }
            DefenseKind::Sparsify { keep_ratio } => Ok(sparsify_topk(g, *keep_ratio)),
            DefenseKind::Quantize { bits } => Ok(quantize(g, *bits)),
            DefenseKind::Expose { mode, fraction } => Ok(expose_partition(g, *mode, *fraction)),
        }
    }
}

fn powi(base: f64, exp: usize) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp {
        out *= base;
    }
    out
}

/// Noise scale of the Gaussian mechanism: sigma = sqrt(2 ln(1/delta)) / epsilon.
pub fn gaussian_sigma(epsilon: f64, delta: f64) -> f64 {
    math::sqrt(2.0 * math::ln(1.0 / delta)) / epsilon
}

/// Clip to L2 norm <= clip, then add N(0, (sigma * clip)²) noise per element.
/// Deterministic per seed.
pub fn dp_gaussian(g: &[f64], epsilon: f64, delta: f64, clip: f64, seed: u64) -> Vec<f64> {
    dp_gaussian_scaled(g, epsilon, delta, clip, 1.0, seed)
}

fn dp_gaussian_scaled(
    g: &[f64],
    epsilon: f64,
    delta: f64,
    clip: f64,
    sigma_factor: f64,
    seed: u64,
) -> Vec<f64> {
    let norm = math::sqrt(g.iter().map(|&v| v * v).sum::<f64>());
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let sigma = gaussian_sigma(epsilon, delta) * sigma_factor;
    let noise_sd = sigma * clip;
    let mut rng = Rng::from_seed(seed);
    g.iter().map(|&v| v * scale + noise_sd * rng.normal()).collect()
}

/// Indices ordered by descending magnitude; equal magnitudes keep ascending
/// index order, the tie-break used by every magnitude selection here.
fn magnitude_order(g: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| {
        math::abs(g[b])
            .partial_cmp(&math::abs(g[a]))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Number of elements the top fraction keeps: ceil(p * n).
pub fn top_count(n: usize, p: f64) -> usize {
    (math::ceil(p * n as f64) as usize).min(n)
}

/// Keep the ceil(p*n) largest-magnitude elements, zero the rest.
pub fn sparsify_topk(g: &[f64], p: f64) -> Vec<f64> {
    let keep = top_count(g.len(), p);
    let order = magnitude_order(g);
    let mut out = vec![0.0; g.len()];
    for &i in order.iter().take(keep) {
        out[i] = g[i];
    }
    out
}

/// Uniform symmetric quantization to 2^bits - 1 levels over [-max|g|, max|g|].
/// bits = 1 degenerates to sign(g) scaled by the mean magnitude of the
/// nonzero elements (so the op is idempotent).
pub fn quantize(g: &[f64], bits: u32) -> Vec<f64> {
    let m = g.iter().fold(0.0f64, |acc, &v| acc.max(math::abs(v)));
    if m == 0.0 {
        return vec![0.0; g.len()];
    }
    if bits == 1 {
        // mean magnitude of the nonzero elements; when they are all equal
        // (as after a previous 1-bit pass) take that magnitude directly so
        // the op is bit-exactly idempotent
        let mags: Vec<f64> = g.iter().filter(|&&v| v != 0.0).map(|&v| math::abs(v)).collect();
        let s = if mags.windows(2).all(|w| w[0] == w[1]) {
            mags.first().copied().unwrap_or(0.0)
        } else {
            mags.iter().sum::<f64>() / mags.len() as f64
        };
        return g.iter().map(|&v| math::sign(v) * s).collect();
    }
    let levels = (1u64 << bits) - 1; // 2^bits - 1 values
    let lmax = (levels - 1) as f64;
    g.iter()
        .map(|&v| {
            let q = math::round((v / m + 1.0) / 2.0 * lmax);
            (2.0 * q / lmax - 1.0) * m
        })
        .collect()
}

/// Keep only a magnitude band: the top ceil(f*n) elements, or the bottom
/// floor(f*n). The ceil/floor split makes top(f) and bottom(1-f) an exact
/// partition of the index set.
pub fn expose_partition(g: &[f64], mode: ExposeMode, fraction: f64) -> Vec<f64> {
    let n = g.len();
    let order = magnitude_order(g);
    let mut out = vec![0.0; n];
    match mode {
        ExposeMode::Top => {
            let keep = top_count(n, fraction);
            for &i in order.iter().take(keep) {
                out[i] = g[i];
            }
        }
        ExposeMode::Bottom => {
            let keep = (math::floor(fraction * n as f64) as usize).min(n);
            for &i in order.iter().rev().take(keep) {
                out[i] = g[i];
            }
        }
    }
    out
}
