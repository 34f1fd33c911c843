//! Label inference from the final fully connected layer's gradient.
//!
//! Two rules: the min-sum rule for batches no larger than the class count,
//! and a proportional-count rule for larger batches. Both read the head
//! gradient matrix `[K, N]` (feature dim by classes).

use crate::error::{Error, Result};
use crate::model::{GradientVector, Model};
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Gradient of the final fully connected layer's weight, `[K, N]`.
pub struct FcGradMatrix {
    pub matrix: Tensor,
}

impl FcGradMatrix {
    /// Pull the head weight gradient out of a gradient vector.
    pub fn extract(model: &Model, grads: &GradientVector) -> Result<FcGradMatrix> {
        let head = model
            .head_fc_name()
            .ok_or_else(|| Error::spec("model has no fully connected head"))?;
        let name = format!("{head}.weight");
        let t = grads
            .get(&name)
            .ok_or_else(|| Error::spec(format!("gradient vector has no {name}")))?;
        if t.rank() != 2 {
            return Err(Error::shape("head weight gradient must be rank 2"));
        }
        Ok(FcGradMatrix { matrix: t.clone() })
    }

    pub fn classes(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Per-class sums over the feature dimension.
    pub fn column_sums(&self) -> Vec<f64> {
        let (k, n) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        let d = self.matrix.data();
        let mut sums = vec![0.0f64; n];
        for i in 0..k {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += d[i * n + j];
            }
        }
        sums
    }
}

/// Min-sum rule: the `batch` classes with the smallest column sums, ordered
/// by ascending sum (ties by class index). Requires `batch <= classes`.
pub fn infer_labels_minsum(dw: &FcGradMatrix, batch: usize) -> Result<Vec<usize>> {
    let n = dw.classes();
    if batch > n {
        return Err(Error::infeasible(format!(
            "min-sum rule needs batch ({batch}) <= classes ({n}); use the count rule"
        )));
    }
    let sums = dw.column_sums();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sums[a]
            .partial_cmp(&sums[b])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(batch);
    Ok(order)
}

/// Proportional-count rule for batches that may exceed the class count:
/// `c_j = floor(B * sum_i(dW[i,j] - maxW) / sum_ij(dW[i,j] - maxW))` with
/// `maxW` the global maximum entry. Any shortfall is topped up one sample at
/// a time, cycling through classes by ascending column sum (ties by index).
/// A degenerate all-equal matrix yields uniform counts, remainder to the
/// lowest indices.
pub fn infer_label_counts(dw: &FcGradMatrix, batch: usize) -> Result<Vec<usize>> {
    let n = dw.classes();
    let mut counts = vec![0usize; n];
    if batch == 0 {
        return Ok(counts);
    }
    let maxw = dw
        .matrix
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sums = dw.column_sums();
    let k = dw.matrix.shape()[0] as f64;
    // per-column sum of (dW - maxW) is the column sum minus K * maxW
    let shifted: Vec<f64> = sums.iter().map(|&s| s - k * maxw).collect();
    let denom: f64 = shifted.iter().sum();
    if denom == 0.0 {
        // all entries equal: spread uniformly, remainder to lowest indices
        let base = batch / n;
        let rem = batch % n;
        for (j, c) in counts.iter_mut().enumerate() {
            *c = base + usize::from(j < rem);
        }
        return Ok(counts);
    }
    for j in 0..n {
        let c = crate::math::floor(batch as f64 * shifted[j] / denom);
        counts[j] = c.max(0.0) as usize;
    }
    let mut total: usize = counts.iter().sum();
    if total > batch {
        // floor of non-negative fractions summing to B cannot overshoot, but
        // guard against pathological inputs by trimming from the largest sums
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            sums[b].partial_cmp(&sums[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut k = 0;
        while total > batch {
            let j = order[k % n];
            if counts[j] > 0 {
                counts[j] -= 1;
                total -= 1;
            }
            k += 1;
        }
    }
    if total < batch {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            sums[a].partial_cmp(&sums[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut k = 0;
        while total < batch {
            counts[order[k % n]] += 1;
            total += 1;
            k += 1;
        }
    }
    Ok(counts)
}

/// Expand per-class counts into a concrete label list (ascending class).
pub fn counts_to_labels(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.push(j);
        }
    }
    out
}

/// Infer a batch's labels with whichever rule applies.
pub fn infer_labels(dw: &FcGradMatrix, batch: usize) -> Result<Vec<usize>> {
    if batch <= dw.classes() {
        infer_labels_minsum(dw, batch)
    } else {
        Ok(counts_to_labels(&infer_label_counts(dw, batch)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, loss_and_param_grads, mlp, InitScheme};
    use crate::rng::Rng;

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> FcGradMatrix {
        FcGradMatrix { matrix: Tensor::new(vec![rows, cols], data).unwrap() }
    }

    #[test]
    fn minsum_constructed_minimum() {
        // columns summing to (-1, +1): batch of 1 picks class 0
        let dw = matrix(2, 2, vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(infer_labels_minsum(&dw, 1).unwrap(), vec![0]);
    }

    #[test]
    fn minsum_full_batch_returns_all_classes() {
        let dw = matrix(2, 3, vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.4]);
        let labels = infer_labels_minsum(&dw, 3).unwrap();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn minsum_rejects_oversized_batch() {
        let dw = matrix(2, 2, vec![0.0; 4]);
        assert!(infer_labels_minsum(&dw, 3).is_err());
    }

    #[test]
    fn minsum_invariant_under_positive_rescaling() {
        let mut rng = Rng::from_seed(1);
        for _ in 0..20 {
            let data: Vec<f64> = (0..4 * 6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let dw = matrix(4, 6, data.clone());
            let scaled = matrix(4, 6, data.iter().map(|&v| 3.7 * v).collect());
            assert_eq!(
                infer_labels_minsum(&dw, 3).unwrap(),
                infer_labels_minsum(&scaled, 3).unwrap()
            );
        }
    }

    #[test]
    fn minsum_recovers_label_on_untrained_mlp() {
        // B=1 on an untrained network: 100 random seeds, exact recovery
        for seed in 0..100u64 {
            let m = mlp(&[8], &[12], 4).unwrap();
            let p = init_params(&m, &InitScheme::DefaultRandom, seed);
            let mut rng = Rng::from_seed(seed ^ 0xabcd);
            let x = Tensor::new(vec![1, 8], (0..8).map(|_| rng.uniform()).collect()).unwrap();
            let y = rng.below(4);
            let lg = loss_and_param_grads(&m, &p, &x, &[y]).unwrap();
            let dw = FcGradMatrix::extract(&m, &lg.grads).unwrap();
            assert_eq!(infer_labels_minsum(&dw, 1).unwrap(), vec![y], "seed {seed}");
        }
    }

    #[test]
    fn counts_hand_evaluated_formula() {
        // 2x2 matrix, maxW = 4.
        // shifted column sums: (1-4)+(3-4) = -4, (2-4)+(4-4) = -2, denom -6
        // B=6: c0 = floor(6 * 4/6) = 4, c1 = floor(6 * 2/6) = 2, no top-up
        let dw = matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(infer_label_counts(&dw, 6).unwrap(), vec![4, 2]);
    }

    #[test]
    fn counts_top_up_goes_to_lowest_sums_first() {
        // B=7 with the same matrix: floors give 4 and 2, shortfall 1 goes to
        // the class with the lowest column sum (class 0: 1+3=4 < 2+4=6)
        let dw = matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(infer_label_counts(&dw, 7).unwrap(), vec![5, 2]);
    }

    #[test]
    fn counts_degenerate_uniform() {
        let dw = matrix(3, 4, vec![0.5; 12]);
        assert_eq!(infer_label_counts(&dw, 6).unwrap(), vec![2, 2, 1, 1]);
    }

    #[test]
    fn counts_zero_batch() {
        let dw = matrix(2, 3, vec![0.1; 6]);
        assert_eq!(infer_label_counts(&dw, 0).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn counts_always_sum_to_batch() {
        let mut rng = Rng::from_seed(2);
        for _ in 0..1000 {
            let k = 1 + rng.below(6);
            let n = 2 + rng.below(8);
            let b = rng.below(40);
            let data: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let dw = matrix(k, n, data);
            let counts = infer_label_counts(&dw, b).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), b);
        }
    }

    #[test]
    fn counts_to_labels_expansion() {
        assert_eq!(counts_to_labels(&[2, 0, 1]), vec![0, 0, 2]);
    }
}
