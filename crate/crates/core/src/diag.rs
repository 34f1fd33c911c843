//! Analysis instruments: the gradient-magnitude/sensitivity correlation, the
//! gradient-collision probe, the min-removal mean property, the blended
//! descent toy, and the safe-step-size check on scalar quadratics.

use crate::error::{Error, Result};
use crate::math;
use crate::model::{loss_and_param_grads, forward_with_vars, LayerSpec, Model, ParameterSet, TracedParams};
use crate::rng::Rng;
use crate::tensor::{Tensor, Trace};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Pearson correlation coefficient. Errors on constant series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::infeasible("correlation needs two equal-length series"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series"));
    }
    Ok(cov / math::sqrt(va * vb))
}

/// Average ranks, ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[i].partial_cmp(&values[j]).unwrap_or(core::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut out = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j + 1 < n && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            out[idx] = avg;
        }
        k = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Pearson correlation between the magnitude of the final fully connected
/// layer's gradient elements and their summed absolute sensitivity to the
/// input, computed with the second-order engine.
pub fn fisher_correlation(
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let head = model
        .head_fc_name()
        .ok_or_else(|| Error::spec("fisher probe needs a fully connected head"))?;
    let head_weight = format!("{head}.weight");

    let mut tr = Trace::new();
    let xv = tr.leaf(x.clone());
    let mut leaves = Vec::with_capacity(params.entries().len());
    for (name, t) in params.entries() {
        leaves.push((name.clone(), tr.leaf(t.clone())));
    }
    let tp = TracedParams::from_entries(leaves);
    let (logits, _acts) = forward_with_vars(&mut tr, model, &tp, xv)?;
    let loss = tr.softmax_cross_entropy(logits, labels)?;
    let head_var = tp
        .entries()
        .iter()
        .find(|(n, _)| n == &head_weight)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::spec("head weight missing"))?;
    let gw = tr.grad(loss, &[head_var])?[0];
    let nelem = tr.value(gw).numel();
    let gw_flat = tr.reshape(gw, &[nelem])?;
    let magnitudes: Vec<f64> =
        tr.value(gw_flat).data().iter().map(|&v| math::abs(v)).collect();

    // one reverse sweep per element, rolling the trace back each time so the
    // arena does not grow with the Jacobian
    let mut sensitivities = Vec::with_capacity(nelem);
    for i in 0..nelem {
        let mark = tr.mark();
        let mut e = vec![0.0f64; nelem];
        e[i] = 1.0;
        let ei = tr.constant(Tensor::from_parts(vec![nelem], e));
        let scalar = tr.dot(gw_flat, ei)?;
        let gx = tr.grad(scalar, &[xv])?[0];
        let s: f64 = tr.value(gx).data().iter().map(|&v| math::abs(v)).sum();
        sensitivities.push(s);
        tr.rollback(mark);
    }
    pearson(&magnitudes, &sensitivities)
}

/// Report of the gradient-collision probe.
#[derive(Debug, Clone)]
pub struct UniquenessReport {
    pub trials: usize,
    pub min_distance: f64,
    pub collisions: usize,
}

pub const COLLISION_THRESHOLD: f64 = 1e-10;

/// Sample perturbed inputs and measure the gap between their parameter
/// gradients and the reference input's. A healthy network never collides; a
/// degenerate one (all-zero weights) collides because its error feedback is
/// input-independent.
pub fn uniqueness_probe(
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    trials: usize,
    perturbation: f64,
    seed: u64,
) -> Result<UniquenessReport> {
    // the guarantee under test applies to stacks whose first parameterized
    // layers are fully connected
    let mut fc_count = 0usize;
    for layer in model.layers() {
        match layer.spec {
            LayerSpec::Fc { .. } => fc_count += 1,
            LayerSpec::Flatten | LayerSpec::Relu | LayerSpec::AvgPool { .. } => {}
            _ => break,
        }
    }
    if fc_count < 2 {
        return Err(Error::spec("uniqueness probe needs at least two fully connected layers"));
    }
    let g0 = loss_and_param_grads(model, params, x, labels)?.grads.flatten();
    let mut rng = Rng::from_seed(seed);
    let mut min_distance = f64::INFINITY;
    let mut collisions = 0usize;
    for _ in 0..trials {
        let xp = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v + perturbation * rng.normal()).collect(),
        );
        let g = loss_and_param_grads(model, params, &xp, labels)?.grads.flatten();
        let d = math::sqrt(
            g.iter().zip(&g0).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>(),
        );
        if d < min_distance {
            min_distance = d;
        }
        if d < COLLISION_THRESHOLD {
            collisions += 1;
        }
    }
    Ok(UniquenessReport { trials, min_distance, collisions })
}

/// Removing one minimum element never lowers the mean; strictly raises it
/// when the minimum lies strictly below the mean.
#[derive(Debug, Clone, Copy)]
pub struct MinRemovalCheck {
    pub old_mean: f64,
    pub new_mean: f64,
    pub holds: bool,
    pub strict_expected: bool,
}

pub fn theorem3_check(values: &[f64]) -> Result<MinRemovalCheck> {
    if values.len() < 2 {
        return Err(Error::infeasible("need at least two values"));
    }
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let old_mean = sum / n;
    let (mut min_idx, mut min_val) = (0usize, values[0]);
    for (i, &v) in values.iter().enumerate() {
        if v < min_val {
            min_val = v;
            min_idx = i;
        }
    }
    let _ = min_idx;
    let new_mean = (sum - min_val) / (n - 1.0);
    let strict_expected = min_val < old_mean;
    let holds = if strict_expected {
        new_mean > old_mean
    } else {
        // all-equal multiset: the mean must not move
        new_mean >= old_mean - 1e-12 * old_mean.abs().max(1.0)
    };
    Ok(MinRemovalCheck { old_mean, new_mean, holds, strict_expected })
}

/// One step of the blended-descent illustration on `y = x²`.
#[derive(Debug, Clone, Copy)]
pub struct BlendToyStep {
    pub x: f64,
    pub grad: f64,
    pub probe_x: f64,
    pub probe_grad: f64,
    pub blended: f64,
}

/// Gradient descent on `y = x²` where each update direction blends the
/// gradient at the iterate with the gradient at the point a plain step would
/// reach. With a unit step the plain iteration oscillates forever; the blend
/// damps it.
pub fn gradient_blend_toy(start: f64, step: f64, blend: f64, iters: usize) -> Vec<BlendToyStep> {
    let mut x = start;
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let grad = 2.0 * x;
        let probe_x = x - step * grad;
        let probe_grad = 2.0 * probe_x;
        let blended = (1.0 - blend) * grad + blend * probe_grad;
        out.push(BlendToyStep { x, grad, probe_x, probe_grad, blended });
        x -= step * blended;
    }
    out
}

/// Whether plain gradient descent on `D(x) = c/2 (x-a)²` contracts from `x0`
/// after `iters` steps.
pub fn gd_converges_on_quadratic(c: f64, a: f64, x0: f64, eta: f64, iters: usize) -> bool {
    let mut x = x0;
    for _ in 0..iters {
        x -= eta * c * (x - a);
    }
    math::abs(x - a) < math::abs(x0 - a)
}
