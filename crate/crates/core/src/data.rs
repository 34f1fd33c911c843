//! Datasets and the synthetic generators used as desk-scale stand-ins.
//!
//! Three families with controllable total variation: `blobs` (smooth, low
//! TV), `stripes` (oriented gratings, high TV), and `texture` (seeded band
//! mixtures in between). Class-conditional so label inference and non-IID
//! partitions have real structure to find.

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// In-memory labeled image dataset; images are `[C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A batch assembled for training or attack: `[B, C, H, W]` plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stack the given sample indices into a batch.
    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::infeasible("empty batch"));
        }
        let shape = self.image_shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            labels.push(self.labels[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape);
        Ok(Batch { images: Tensor::new(bshape, data)?, labels })
    }

    /// Split off the last `fraction` of samples as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let hold = ((n as f64 * fraction) as usize).min(n);
        let cut = n - hold;
        ((0..cut).collect(), (cut..n).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Stripes,
    Texture,
}

/// Generate a class-conditional synthetic dataset. Deterministic per seed;
/// labels cycle round-robin so classes stay balanced.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    shape: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if shape.len() != 3 {
        return Err(Error::spec("synthetic images need [C, H, W] shape"));
    }
    if classes == 0 || n < classes {
        return Err(Error::infeasible("need at least one sample per class"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rng = Rng::from_seed(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    // fixed per-class texture patterns, drawn once
    let texture_bases: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..h * w).map(|_| rng.uniform()).collect())
        .collect();
    for i in 0..n {
        let label = i % classes;
        let img = match kind {
            SynthKind::Blobs => blob_image(&mut rng, label, classes, c, h, w),
            SynthKind::Stripes => stripe_image(&mut rng, label, classes, c, h, w),
            SynthKind::Texture => texture_image(&mut rng, &texture_bases[label], c, h, w),
        };
        images.push(Tensor::new(shape.to_vec(), img)?);
        labels.push(label);
    }
    Ok(Dataset { images, labels, classes })
}

/// One or two smooth Gaussian bumps; the class picks the quadrant of the
/// primary bump.
fn blob_image(rng: &mut Rng, label: usize, classes: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let quadrant = label % 4;
    let (qy, qx) = match quadrant {
        0 => (0.3, 0.3),
        1 => (0.3, 0.7),
        2 => (0.7, 0.3),
        _ => (0.7, 0.7),
    };
    let cy = qy * h as f64 + rng.uniform_in(-1.0, 1.0);
    let cx = qx * w as f64 + rng.uniform_in(-1.0, 1.0);
    let sigma = (0.16 + 0.02 * (label / 4) as f64 * 4.0 / classes as f64) * h as f64
        + rng.uniform_in(-0.3, 0.3);
    let amp = rng.uniform_in(0.65, 0.9);
    let background = rng.uniform_in(0.1, 0.18);
    let mut img = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let chf = 1.0 - 0.15 * ch as f64;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / sigma;
                let dx = (x as f64 - cx) / sigma;
                let v = background + amp * chf * math::exp(-0.5 * (dy * dy + dx * dx));
                img.push(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Sinusoidal grating; the class picks orientation and frequency. High TV.
fn stripe_image(rng: &mut Rng, label: usize, classes: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let theta = math::PI * label as f64 / classes as f64;
    let freq = 0.30 + 0.45 * ((label % 3) as f64 + 1.0) / 3.0;
    let phase = rng.uniform_in(0.0, 2.0 * math::PI);
    let (st, ct) = (libm::sin(theta), math::cos(theta));
    let mut img = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let chf = 1.0 - 0.1 * ch as f64;
        for y in 0..h {
            for x in 0..w {
                let t = freq * 2.0 * math::PI * (ct * x as f64 + st * y as f64) / 4.0 + phase;
                let v = 0.5 + 0.5 * chf * libm::sin(t);
                img.push(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Per-class fixed random pattern blended with fresh noise.
fn texture_image(rng: &mut Rng, base: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mix = rng.uniform_in(0.55, 0.8);
    let mut img = Vec::with_capacity(c * h * w);
    for _ch in 0..c {
        for i in 0..h * w {
            let v = mix * base[i] + (1.0 - mix) * rng.uniform();
            img.push(v.clamp(0.0, 1.0));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::image_tv;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(SynthKind::Blobs, 12, &[1, 8, 8], 4, 9).unwrap();
        let b = synth_dataset(SynthKind::Blobs, 12, &[1, 8, 8], 4, 9).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.bits_eq(y));
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn stripes_have_higher_tv_than_blobs() {
        let blobs = synth_dataset(SynthKind::Blobs, 24, &[1, 12, 12], 4, 3).unwrap();
        let stripes = synth_dataset(SynthKind::Stripes, 24, &[1, 12, 12], 4, 3).unwrap();
        let mean_tv = |d: &Dataset| {
            d.images.iter().map(|img| image_tv(img).unwrap()).sum::<f64>() / d.len() as f64
        };
        assert!(
            mean_tv(&stripes) > mean_tv(&blobs),
            "stripes {} vs blobs {}",
            mean_tv(&stripes),
            mean_tv(&blobs)
        );
    }

    #[test]
    fn single_class_dataset() {
        let d = synth_dataset(SynthKind::Texture, 6, &[1, 8, 8], 1, 4).unwrap();
        assert!(d.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn values_in_unit_range() {
        for kind in [SynthKind::Blobs, SynthKind::Stripes, SynthKind::Texture] {
            let d = synth_dataset(kind, 10, &[2, 8, 8], 5, 1).unwrap();
            for img in &d.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn batch_stacks_shapes() {
        let d = synth_dataset(SynthKind::Blobs, 10, &[1, 8, 8], 2, 5).unwrap();
        let b = d.batch_of(&[0, 3, 4]).unwrap();
        assert_eq!(b.images.shape(), &[3, 1, 8, 8]);
        assert_eq!(b.labels.len(), 3);
        assert!(d.batch_of(&[]).is_err());
    }
}
