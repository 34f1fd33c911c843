//! Reconstruction quality metrics and the μ/L convergence instrument.

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// PSNR is capped here so identical pairs stay finite and sortable.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr on differing shapes"));
    }
    let n = a.numel() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * math::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

/// Mean local SSIM with a uniform window (stride 1), dynamic range 1,
/// constants C1 = 0.01², C2 = 0.03². Images are `[C, H, W]` or `[H, W]`;
/// channels are scored independently and averaged. Images smaller than the
/// window fall back to a single global window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_windowed(a, b, 8)
}

pub fn ssim_windowed(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim on differing shapes"));
    }
    let (c, h, w) = match a.rank() {
        2 => (1, a.shape()[0], a.shape()[1]),
        3 => (a.shape()[0], a.shape()[1], a.shape()[2]),
        _ => return Err(Error::shape("ssim expects [H, W] or [C, H, W]")),
    };
    let win = if h < window || w < window { h.min(w).max(1) } else { window };
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..][..h * w];
        let pb = &b.data()[ch * h * w..][..h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..=(h - win) {
            for j in 0..=(w - win) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..win {
                    let ra = &pa[(i + di) * w + j..][..win];
                    let rb = &pb[(i + di) * w + j..][..win];
                    for (&x, &y) in ra.iter().zip(rb) {
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let nw = (win * win) as f64;
                let mu_a = sa / nw;
                let mu_b = sb / nw;
                let var_a = saa / nw - mu_a * mu_a;
                let var_b = sbb / nw - mu_b * mu_b;
                let cov = sab / nw - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / c as f64)
}

/// Distance between two gradient vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMetric {
    /// Mean absolute difference.
    L1,
    /// Plain Euclidean norm of the difference.
    L2,
    /// 1 - cosine similarity; zero vectors give 1.
    Cosine,
}

pub fn gradient_distance(a: &[f64], b: &[f64], metric: GradMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("gradient vectors differ in length"));
    }
    match metric {
        GradMetric::L1 => {
            let n = a.len().max(1) as f64;
            Ok(a.iter().zip(b).map(|(&x, &y)| math::abs(x - y)).sum::<f64>() / n)
        }
        GradMetric::L2 => {
            Ok(math::sqrt(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>()))
        }
        GradMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let na: f64 = math::sqrt(a.iter().map(|&x| x * x).sum());
            let nb: f64 = math::sqrt(b.iter().map(|&y| y * y).sum());
            if na == 0.0 || nb == 0.0 {
                return Ok(1.0);
            }
            Ok(1.0 - dot / (na * nb))
        }
    }
}

/// For each truth image, the reconstruction that maximizes PSNR (reuse
/// allowed; ties go to the lower index).
pub fn match_reconstructions(recons: &[Tensor], truths: &[Tensor]) -> Result<Vec<usize>> {
    if recons.is_empty() || truths.is_empty() {
        return Err(Error::infeasible("matching needs non-empty image lists"));
    }
    let mut out = Vec::with_capacity(truths.len());
    for t in truths {
        let mut best = 0usize;
        let mut best_psnr = f64::NEG_INFINITY;
        for (i, r) in recons.iter().enumerate() {
            let p = psnr(r, t)?;
            if p > best_psnr {
                best_psnr = p;
                best = i;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// One-to-one assignment maximizing total PSNR, found by exhaustive search.
/// Practical for the desk-scale batch sizes this crate works at.
pub fn match_reconstructions_exclusive(recons: &[Tensor], truths: &[Tensor]) -> Result<Vec<usize>> {
    if recons.len() < truths.len() {
        return Err(Error::infeasible("exclusive matching needs at least as many reconstructions"));
    }
    let mut scores = vec![vec![0.0f64; recons.len()]; truths.len()];
    for (ti, t) in truths.iter().enumerate() {
        for (ri, r) in recons.iter().enumerate() {
            scores[ti][ri] = psnr(r, t)?;
        }
    }
    let mut best_assign = vec![0usize; truths.len()];
    let mut best_total = f64::NEG_INFINITY;
    let mut current = vec![usize::MAX; truths.len()];
    let mut used = vec![false; recons.len()];
    fn search(
        ti: usize,
        scores: &[Vec<f64>],
        used: &mut [bool],
        current: &mut [usize],
        total: f64,
        best_total: &mut f64,
        best_assign: &mut [usize],
    ) {
        if ti == scores.len() {
            if total > *best_total {
                *best_total = total;
                best_assign.copy_from_slice(current);
            }
            return;
        }
        for ri in 0..used.len() {
            if !used[ri] {
                used[ri] = true;
                current[ti] = ri;
                search(ti + 1, scores, used, current, total + scores[ti][ri], best_total, best_assign);
                used[ri] = false;
            }
        }
    }
    search(0, &scores, &mut used, &mut current, 0.0, &mut best_total, &mut best_assign);
    Ok(best_assign)
}

/// Curvature and smoothness estimates at an iterate: given the current guess,
/// the target, and the objective gradient at the guess, returns
/// `(mu, l, 2mu/l)`. Step sizes below `2mu/l` contract the error.
pub fn mu_l_estimate(x_guess: &Tensor, x_true: &Tensor, grad: &Tensor) -> Result<(f64, f64, f64)> {
    if x_guess.shape() != x_true.shape() || x_guess.shape() != grad.shape() {
        return Err(Error::shape("mu/L estimate on differing shapes"));
    }
    let mut dot = 0.0;
    let mut dist2 = 0.0;
    let mut gnorm2 = 0.0;
    for ((&g, &a), &b) in grad.data().iter().zip(x_guess.data()).zip(x_true.data()) {
        let d = a - b;
        dot += d * g;
        dist2 += d * d;
        gnorm2 += g * g;
    }
    if dist2 == 0.0 {
        return Err(Error::Degenerate("mu/L undefined at the exact solution"));
    }
    let mu = dot / dist2;
    let l = gnorm2 / dist2;
    let ratio = if l == 0.0 { f64::INFINITY } else { 2.0 * mu / l };
    Ok((mu, l, ratio))
}

/// Per-image metric rows plus aggregates.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
}

#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub truth_index: usize,
    pub matched_recon: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    /// L2 distance between the loss gradients of the matched reconstruction
    /// and the truth image, when a model context is available.
    pub grad_l2: Option<f64>,
}

impl MetricsReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn median_psnr(&self) -> f64 {
        median(self.rows.iter().map(|r| r.psnr_db).collect())
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn median_ssim(&self) -> f64 {
        median(self.rows.iter().map(|r| r.ssim).collect())
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Anisotropic total variation of a `[B, C, H, W]` batch: mean over images of
/// the summed absolute forward differences. Images with H or W < 2 contribute
/// only the dimension that exists (0 if neither does).
pub fn total_variation_value(x: &Tensor) -> Result<f64> {
    if x.rank() != 4 {
        return Err(Error::shape("total variation expects [B, C, H, W]"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = x.data();
    let mut total = 0.0;
    for img in 0..b {
        for ch in 0..c {
            let p = &d[(img * c + ch) * h * w..][..h * w];
            if w >= 2 {
                for i in 0..h {
                    for j in 0..w - 1 {
                        total += math::abs(p[i * w + j + 1] - p[i * w + j]);
                    }
                }
            }
            if h >= 2 {
                for i in 0..h - 1 {
                    for j in 0..w {
                        total += math::abs(p[(i + 1) * w + j] - p[i * w + j]);
                    }
                }
            }
        }
    }
    Ok(total / b as f64)
}

/// TV of a single `[C, H, W]` image.
pub fn image_tv(img: &Tensor) -> Result<f64> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(img.shape());
    total_variation_value(&img.reshaped(&shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_image(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn psnr_identity_hits_cap() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_half_difference() {
        let a = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        // MSE 0.25 -> 10 log10(4) = 6.0206
        assert!(math::abs(psnr(&a, &b).unwrap() - 6.0205999132796239) < 1e-9);
    }

    #[test]
    fn psnr_matches_double_loop_oracle() {
        let mut rng = Rng::from_seed(1);
        let a = rand_image(&mut rng, &[3, 5, 4]);
        let b = rand_image(&mut rng, &[3, 5, 4]);
        let mut mse = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            mse += d * d;
        }
        mse /= a.numel() as f64;
        let expect = 10.0 * math::log10(1.0 / mse);
        assert!(math::abs(psnr(&a, &b).unwrap() - expect) < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = Rng::from_seed(2);
        let a = rand_image(&mut rng, &[1, 8, 8]);
        let mut last = PSNR_CAP_DB;
        for amp in [0.01, 0.05, 0.1, 0.3] {
            let b = Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&v| v + amp).collect(),
            )
            .unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last, "amp {amp}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = Rng::from_seed(3);
        let a = rand_image(&mut rng, &[1, 12, 12]);
        assert!(math::abs(ssim(&a, &a).unwrap() - 1.0) < 1e-12);
    }

    #[test]
    fn ssim_constant_images_far_apart() {
        // plug the constants into the formula by hand:
        // mu_a=0, mu_b=1, vars=0: s = C1*C2 / ((1+C1)*C2) = C1/(1+C1)
        let a = Tensor::new(vec![8, 8], vec![0.0; 64]).unwrap();
        let b = Tensor::new(vec![8, 8], vec![1.0; 64]).unwrap();
        let s = ssim(&a, &b).unwrap();
        let expect = 1e-4 / (1.0 + 1e-4);
        assert!(math::abs(s - expect) < 1e-12);
        assert!(s < 0.01);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let mut rng = Rng::from_seed(4);
        for _ in 0..10 {
            let a = rand_image(&mut rng, &[2, 10, 9]);
            let b = rand_image(&mut rng, &[2, 10, 9]);
            let s1 = ssim(&a, &b).unwrap();
            let s2 = ssim(&b, &a).unwrap();
            assert!(math::abs(s1 - s2) < 1e-12);
            assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn ssim_small_image_single_window() {
        let a = Tensor::new(vec![3, 3], vec![0.2; 9]).unwrap();
        assert!(math::abs(ssim(&a, &a).unwrap() - 1.0) < 1e-12);
    }

    #[test]
    fn gradient_distances() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!(math::abs(gradient_distance(&a, &b, GradMetric::L2).unwrap() - math::sqrt(2.0)) < 1e-12);
        assert!(math::abs(gradient_distance(&a, &b, GradMetric::Cosine).unwrap() - 1.0) < 1e-12);
        assert_eq!(gradient_distance(&a, &a, GradMetric::L1).unwrap(), 0.0);
        assert_eq!(gradient_distance(&a, &a, GradMetric::L2).unwrap(), 0.0);
        assert_eq!(gradient_distance(&a, &a, GradMetric::Cosine).unwrap(), 0.0);
        // zero vector convention
        assert_eq!(gradient_distance(&[0.0, 0.0], &b, GradMetric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn matching_identity_and_reuse() {
        let mut rng = Rng::from_seed(5);
        let imgs: Vec<Tensor> = (0..3).map(|_| rand_image(&mut rng, &[1, 4, 4])).collect();
        let assign = match_reconstructions(&imgs, &imgs).unwrap();
        assert_eq!(assign, vec![0, 1, 2]);
        // single reconstruction: everything maps to it
        let one = [imgs[0].clone()];
        let assign = match_reconstructions(&one, &imgs).unwrap();
        assert_eq!(assign, vec![0, 0, 0]);
    }

    #[test]
    fn matching_equals_exhaustive_search() {
        let mut rng = Rng::from_seed(6);
        for _ in 0..5 {
            let recons: Vec<Tensor> = (0..4).map(|_| rand_image(&mut rng, &[1, 4, 4])).collect();
            let truths: Vec<Tensor> = (0..4).map(|_| rand_image(&mut rng, &[1, 4, 4])).collect();
            let fast = match_reconstructions(&recons, &truths).unwrap();
            // brute force over all pairs
            for (ti, t) in truths.iter().enumerate() {
                let mut best = 0;
                let mut bp = f64::NEG_INFINITY;
                for (ri, r) in recons.iter().enumerate() {
                    let p = psnr(r, t).unwrap();
                    if p > bp {
                        bp = p;
                        best = ri;
                    }
                }
                assert_eq!(fast[ti], best);
            }
        }
    }

    #[test]
    fn exclusive_matching_is_a_permutation() {
        let mut rng = Rng::from_seed(7);
        let recons: Vec<Tensor> = (0..4).map(|_| rand_image(&mut rng, &[1, 4, 4])).collect();
        let assign = match_reconstructions_exclusive(&recons, &recons).unwrap();
        let mut sorted = assign.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(assign, vec![0, 1, 2, 3]); // identity wins on identical sets
    }

    #[test]
    fn mu_l_on_quadratic() {
        // D(x') = ½‖x'-x‖²: gradient is x'-x, so mu = L = 1, ratio 2
        let x = Tensor::from_slice(&[0.2, 0.4, 0.6]);
        let guess = Tensor::from_slice(&[0.5, 0.1, 0.9]);
        let grad = Tensor::new(
            vec![3],
            guess.data().iter().zip(x.data()).map(|(&a, &b)| a - b).collect(),
        )
        .unwrap();
        let (mu, l, ratio) = mu_l_estimate(&guess, &x, &grad).unwrap();
        assert!(math::abs(mu - 1.0) < 1e-12);
        assert!(math::abs(l - 1.0) < 1e-12);
        assert!(math::abs(ratio - 2.0) < 1e-12);
    }

    #[test]
    fn mu_zero_when_gradient_orthogonal() {
        let x = Tensor::from_slice(&[0.0, 0.0]);
        let guess = Tensor::from_slice(&[1.0, 0.0]);
        let grad = Tensor::from_slice(&[0.0, 1.0]);
        let (mu, _, _) = mu_l_estimate(&guess, &x, &grad).unwrap();
        assert_eq!(mu, 0.0);
    }

    #[test]
    fn mu_l_undefined_at_solution() {
        let x = Tensor::from_slice(&[1.0]);
        assert!(mu_l_estimate(&x, &x, &Tensor::from_slice(&[0.5])).is_err());
    }

    #[test]
    fn tv_cases() {
        // constant image
        let c = Tensor::new(vec![1, 1, 3, 3], vec![0.7; 9]).unwrap();
        assert_eq!(total_variation_value(&c).unwrap(), 0.0);
        // single horizontal difference
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(total_variation_value(&t).unwrap(), 1.0);
        // random image vs. the naive nested-loop oracle (independent ordering)
        let mut rng = Rng::from_seed(8);
        let x = rand_image(&mut rng, &[2, 1, 5, 4]);
        let (h, w) = (5usize, 4usize);
        let mut oracle = 0.0;
        for b in 0..2 {
            let p = &x.data()[b * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        oracle += math::abs(p[i * w + j + 1] - p[i * w + j]);
                    }
                    if i + 1 < h {
                        oracle += math::abs(p[(i + 1) * w + j] - p[i * w + j]);
                    }
                }
            }
        }
        oracle /= 2.0;
        assert!(math::abs(total_variation_value(&x).unwrap() - oracle) < 1e-12);
    }
}
