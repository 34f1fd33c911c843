//! Declarative model construction, parameter handling, and the forward /
//! gradient entry points shared by FL training and the attacks.
//!
//! Models are a flat list of named layers. Parameters live outside the model
//! in a [`ParameterSet`] whose flattened view gives every attack and defense a
//! stable element indexing.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Trace, Var};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// One layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected: `[B, input] -> [B, output]`, weight + bias.
    Fc { input: usize, output: usize },
    /// 2-D convolution with square kernel, weight + bias.
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    AvgPool { k: usize },
    Flatten,
    /// Two 3x3 convs with affine norms and a skip connection; channel count
    /// is preserved.
    ResidualBlock { channels: usize },
    /// Learned per-channel scale and shift. Used instead of batch norm: no
    /// batch statistics, so it stays within the threat model and keeps
    /// second-order differentiation simple.
    AffineNorm { channels: usize },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

/// A validated network: layer list plus the per-sample input shape.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    classes: usize,
}

/// Named per-layer tensors with a canonical flattened view. Also used for
/// gradients, which share the same structure and index map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

/// Gradients carry the same layout as the parameters they refer to.
pub type GradientVector = ParameterSet;

/// Post-nonlinearity outputs recorded during a forward pass, in network order.
pub struct ActivationRecord {
    pub outputs: Vec<Var>,
}

/// Handles to the parameter leaves of a traced forward pass.
pub struct TracedParams {
    entries: Vec<(String, Var)>,
}

impl TracedParams {
    pub fn from_entries(entries: Vec<(String, Var)>) -> Self {
        TracedParams { entries }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

impl ParameterSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParameterSet { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Contiguous `(name, offset, len)` ranges into the flattened vector.
    pub fn flat_index_map(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            out.push((name.clone(), offset, t.numel()));
            offset += t.numel();
        }
        out
    }

    /// All entries concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParameterSet::flatten`] against this set's layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != self.numel() {
            return Err(Error::shape(format!(
                "flat vector has {} elements, layout needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            entries.push((
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            ));
            offset += n;
        }
        Ok(ParameterSet { entries })
    }

    /// Element-wise combination of two structurally identical sets.
    pub fn zip_with(
        &self,
        other: &ParameterSet,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ParameterSet> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("parameter sets differ in entry count"));
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(format!("entry mismatch: {na} vs {nb}")));
            }
            let data: Vec<f64> =
                ta.data().iter().zip(tb.data()).map(|(&a, &b)| f(a, b)).collect();
            entries.push((na.clone(), Tensor::new(ta.shape().to_vec(), data)?));
        }
        Ok(ParameterSet { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParameterSet {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
                (n.clone(), Tensor::from_parts(t.shape().to_vec(), data))
            })
            .collect();
        ParameterSet { entries }
    }

    /// Check this set's names and shapes against a model's declaration.
    pub fn validate_for(&self, model: &Model) -> Result<()> {
        let decl = model.parameter_shapes();
        if decl.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "model declares {} parameter tensors, set has {}",
                decl.len(),
                self.entries.len()
            )));
        }
        for ((dn, ds), (n, t)) in decl.iter().zip(&self.entries) {
            if dn != n || ds.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {n} {:?} does not match declared {dn} {ds:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bits_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }
}

/// Parameter initialization schemes. Loading from a file is handled by the
/// IO layer, which produces a ready [`ParameterSet`] validated via
/// [`ParameterSet::validate_for`].
#[derive(Debug, Clone, PartialEq)]
pub enum InitScheme {
    /// Uniform over ±sqrt(1/fan_in) per layer, the common framework default.
    DefaultRandom,
    /// All parameters i.i.d. uniform on `[low, high]`.
    WideUniform { low: f64, high: f64 },
}

/// Build a model from layer specs, propagating shapes through the stack.
pub fn build_model(input_shape: &[usize], specs: Vec<(String, LayerSpec)>) -> Result<Model> {
    if specs.is_empty() {
        return Err(Error::spec("model needs at least one layer"));
    }
    let mut names = alloc::collections::BTreeSet::new();
    for (name, _) in &specs {
        if !names.insert(name.clone()) {
            return Err(Error::spec(format!("duplicate layer name {name}")));
        }
    }
    let mut shape = input_shape.to_vec();
    for (name, spec) in &specs {
        shape = propagate_shape(&shape, spec)
            .map_err(|e| Error::spec(format!("layer {name}: {e}")))?;
    }
    if shape.len() != 1 {
        return Err(Error::spec(format!(
            "model must end in a vector of class logits, got {shape:?}"
        )));
    }
    let classes = shape[0];
    Ok(Model {
        input_shape: input_shape.to_vec(),
        layers: specs.into_iter().map(|(name, spec)| Layer { name, spec }).collect(),
        classes,
    })
}

/// Per-sample output shape of one layer given its per-sample input shape.
fn propagate_shape(shape: &[usize], spec: &LayerSpec) -> Result<Vec<usize>> {
    match spec {
        LayerSpec::Fc { input, output } => {
            if shape != [*input] {
                return Err(Error::shape(format!("fc expects [{input}], got {shape:?}")));
            }
            Ok(vec![*output])
        }
        LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => {
            if shape.len() != 3 || shape[0] != *in_ch {
                return Err(Error::shape(format!(
                    "conv expects [{in_ch}, H, W], got {shape:?}"
                )));
            }
            let os = crate::tensor::conv2d_out_shape(
                &[1, shape[0], shape[1], shape[2]],
                &[*out_ch, *in_ch, *kernel, *kernel],
                *stride,
                *pad,
            )?;
            Ok(vec![os[1], os[2], os[3]])
        }
        LayerSpec::Relu => Ok(shape.to_vec()),
        LayerSpec::AvgPool { k } => {
            if shape.len() != 3 {
                return Err(Error::shape(format!("avgpool expects [C, H, W], got {shape:?}")));
            }
            if *k == 0 || shape[1] % k != 0 || shape[2] % k != 0 {
                return Err(Error::shape(format!(
                    "avgpool window {k} does not divide {}x{}",
                    shape[1], shape[2]
                )));
            }
            Ok(vec![shape[0], shape[1] / k, shape[2] / k])
        }
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::ResidualBlock { channels } | LayerSpec::AffineNorm { channels } => {
            if shape.len() != 3 || shape[0] != *channels {
                return Err(Error::shape(format!(
                    "block expects [{channels}, H, W], got {shape:?}"
                )));
            }
            Ok(shape.to_vec())
        }
    }
}

impl Model {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Name of the final fully connected layer, if any.
    pub fn head_fc_name(&self) -> Option<&str> {
        self.layers.iter().rev().find_map(|l| match l.spec {
            LayerSpec::Fc { .. } => Some(l.name.as_str()),
            _ => None,
        })
    }

    /// Declared parameter tensors as `(name, shape)`, in order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let n = &layer.name;
            match &layer.spec {
                LayerSpec::Fc { input, output } => {
                    out.push((format!("{n}.weight"), vec![*input, *output]));
                    out.push((format!("{n}.bias"), vec![*output]));
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    out.push((format!("{n}.weight"), vec![*out_ch, *in_ch, *kernel, *kernel]));
                    out.push((format!("{n}.bias"), vec![*out_ch]));
                }
                LayerSpec::AffineNorm { channels } => {
                    out.push((format!("{n}.scale"), vec![*channels]));
                    out.push((format!("{n}.shift"), vec![*channels]));
                }
                LayerSpec::ResidualBlock { channels } => {
                    let c = *channels;
                    for part in ["conv1", "conv2"] {
                        out.push((format!("{n}.{part}.weight"), vec![c, c, 3, 3]));
                        out.push((format!("{n}.{part}.bias"), vec![c]));
                    }
                    for part in ["norm1", "norm2"] {
                        out.push((format!("{n}.{part}.scale"), vec![c]));
                        out.push((format!("{n}.{part}.shift"), vec![c]));
                    }
                }
                LayerSpec::Relu | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
            }
        }
        out
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Fan-in used by the default initialization, per weight tensor.
fn fan_in_of(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],                       // fc weight [in, out]
        4 => shape[1] * shape[2] * shape[3], // conv weight [co, ci, kh, kw]
        _ => shape[0],
    }
}

/// Draw a fresh [`ParameterSet`] for `model`. Deterministic per seed.
pub fn init_params(model: &Model, scheme: &InitScheme, seed: u64) -> ParameterSet {
    let mut rng = Rng::from_seed(seed);
    let mut entries = Vec::new();
    let decl = model.parameter_shapes();
    // biases reuse the fan-in of the weight tensor declared just before them
    let mut last_weight_fan = 1usize;
    for (name, shape) in decl {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match scheme {
            InitScheme::WideUniform { low, high } => {
                (0..n).map(|_| rng.uniform_in(*low, *high)).collect()
            }
            InitScheme::DefaultRandom => {
                if name.ends_with(".scale") {
                    vec![1.0; n]
                } else if name.ends_with(".shift") {
                    vec![0.0; n]
                } else {
                    if name.ends_with(".weight") {
                        last_weight_fan = fan_in_of(&shape);
                    }
                    let bound = crate::math::sqrt(1.0 / last_weight_fan as f64);
                    (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
                }
            }
        };
        entries.push((name, Tensor::from_parts(shape, data)));
    }
    ParameterSet { entries }
}

/// Trace a forward pass: registers every parameter as a differentiable leaf,
/// records post-nonlinearity activations, and returns batch logits `[B, N]`.
///
/// `x` must be `[B] + input_shape`; pixel range is not checked because attack
/// iterates may temporarily leave `[0, 1]` before projection.
pub fn forward_on(
    tr: &mut Trace,
    model: &Model,
    params: &ParameterSet,
    x: Var,
) -> Result<(Var, ActivationRecord, TracedParams)> {
    params.validate_for(model)?;
    let mut traced = Vec::with_capacity(params.entries.len());
    for (name, t) in &params.entries {
        traced.push((name.clone(), tr.leaf(t.clone())));
    }
    let tp = TracedParams { entries: traced };
    let (logits, acts) = forward_with_vars(tr, model, &tp, x)?;
    Ok((logits, acts, tp))
}

/// Forward pass against already-traced parameter leaves.
pub fn forward_with_vars(
    tr: &mut Trace,
    model: &Model,
    params: &TracedParams,
    x: Var,
) -> Result<(Var, ActivationRecord)> {
    let xshape = tr.value(x).shape().to_vec();
    let expect: &[usize] = &model.input_shape;
    if xshape.len() != expect.len() + 1 || xshape[1..] != expect[..] {
        return Err(Error::shape(format!(
            "input {xshape:?} does not match [B]+{expect:?}"
        )));
    }
    let batch = xshape[0];
    let lookup = |params: &TracedParams, name: &str| -> Result<Var> {
        params
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::spec(format!("missing parameter {name}")))
    };

    let mut acts = Vec::new();
    let mut cur = x;
    for layer in &model.layers {
        let n = &layer.name;
        cur = match &layer.spec {
            LayerSpec::Fc { .. } => {
                let w = lookup(params, &format!("{n}.weight"))?;
                let b = lookup(params, &format!("{n}.bias"))?;
                let y = tr.matmul(cur, w, false, false)?;
                tr.add(y, b)?
            }
            LayerSpec::Conv { stride, pad, out_ch, .. } => {
                let w = lookup(params, &format!("{n}.weight"))?;
                let b = lookup(params, &format!("{n}.bias"))?;
                let y = tr.conv2d(cur, w, *stride, *pad)?;
                let b4 = tr.reshape(b, &[1, *out_ch, 1, 1])?;
                tr.add(y, b4)?
            }
            LayerSpec::Relu => {
                let y = tr.relu(cur)?;
                acts.push(y);
                y
            }
            LayerSpec::AvgPool { k } => tr.avg_pool2d(cur, *k)?,
            LayerSpec::Flatten => {
                let numel: usize = tr.value(cur).shape()[1..].iter().product();
                tr.reshape(cur, &[batch, numel])?
            }
            LayerSpec::AffineNorm { channels } => {
                let s = lookup(params, &format!("{n}.scale"))?;
                let h = lookup(params, &format!("{n}.shift"))?;
                affine_norm(tr, cur, s, h, *channels)?
            }
            LayerSpec::ResidualBlock { channels } => {
                let c = *channels;
                let skip = cur;
                let w1 = lookup(params, &format!("{n}.conv1.weight"))?;
                let b1 = lookup(params, &format!("{n}.conv1.bias"))?;
                let mut h = tr.conv2d(cur, w1, 1, 1)?;
                let b1r = tr.reshape(b1, &[1, c, 1, 1])?;
                h = tr.add(h, b1r)?;
                let s1 = lookup(params, &format!("{n}.norm1.scale"))?;
                let t1 = lookup(params, &format!("{n}.norm1.shift"))?;
                h = affine_norm(tr, h, s1, t1, c)?;
                h = tr.relu(h)?;
                acts.push(h);
                let w2 = lookup(params, &format!("{n}.conv2.weight"))?;
                let b2 = lookup(params, &format!("{n}.conv2.bias"))?;
                h = tr.conv2d(h, w2, 1, 1)?;
                let b2r = tr.reshape(b2, &[1, c, 1, 1])?;
                h = tr.add(h, b2r)?;
                let s2 = lookup(params, &format!("{n}.norm2.scale"))?;
                let t2 = lookup(params, &format!("{n}.norm2.shift"))?;
                h = affine_norm(tr, h, s2, t2, c)?;
                h = tr.add(h, skip)?;
                h = tr.relu(h)?;
                acts.push(h);
                h
            }
        };
    }
    Ok((cur, ActivationRecord { outputs: acts }))
}

fn affine_norm(tr: &mut Trace, x: Var, scale: Var, shift: Var, channels: usize) -> Result<Var> {
    let s4 = tr.reshape(scale, &[1, channels, 1, 1])?;
    let h4 = tr.reshape(shift, &[1, channels, 1, 1])?;
    let y = tr.mul(x, s4)?;
    tr.add(y, h4)
}

/// Forward pass returning plain logits.
pub fn forward_values(model: &Model, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
    let mut tr = Trace::new();
    let xv = tr.constant(x.clone());
    let (logits, _, _) = forward_on(&mut tr, model, params, xv)?;
    Ok(tr.value(logits).clone())
}

pub struct LossGrads {
    pub loss: f64,
    pub grads: GradientVector,
}

/// Cross-entropy loss (mean over the batch) and the parameter gradients,
/// aligned with `params`' flat index map.
pub fn loss_and_param_grads(
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<LossGrads> {
    let mut tr = Trace::new();
    let xv = tr.constant(x.clone());
    let (logits, _, tp) = forward_on(&mut tr, model, params, xv)?;
    let loss = tr.softmax_cross_entropy(logits, labels)?;
    let gvars = tr.grad(loss, &tp.vars())?;
    let mut entries = Vec::with_capacity(gvars.len());
    for ((name, _), gv) in tp.entries.iter().zip(gvars) {
        entries.push((name.clone(), tr.value(gv).clone()));
    }
    Ok(LossGrads { loss: tr.value(loss).item()?, grads: ParameterSet { entries } })
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(model: &Model, params: &ParameterSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = forward_values(model, params, x)?;
    let n = model.classes();
    let b = labels.len();
    if logits.shape() != [b, n] {
        return Err(Error::shape("accuracy: logits shape"));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * n..(i + 1) * n];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / b.max(1) as f64)
}

// ---- model zoo ----

fn named(specs: Vec<(&str, LayerSpec)>) -> Vec<(String, LayerSpec)> {
    specs.into_iter().map(|(n, s)| (n.to_string(), s)).collect()
}

/// MLP with the given hidden widths over flattened input.
pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize) -> Result<Model> {
    let mut specs: Vec<(String, LayerSpec)> = Vec::new();
    let mut dim: usize = input_shape.iter().product();
    if input_shape.len() > 1 {
        specs.push(("flatten".to_string(), LayerSpec::Flatten));
    }
    for (i, &h) in hidden.iter().enumerate() {
        specs.push((format!("fc{}", i + 1), LayerSpec::Fc { input: dim, output: h }));
        specs.push((format!("relu{}", i + 1), LayerSpec::Relu));
        dim = h;
    }
    specs.push(("head".to_string(), LayerSpec::Fc { input: dim, output: classes }));
    build_model(input_shape, specs)
}

/// Small two-conv-block network with a fully connected head.
pub fn convnet(input_shape: &[usize], ch: (usize, usize), classes: usize) -> Result<Model> {
    if input_shape.len() != 3 {
        return Err(Error::spec("convnet expects [C, H, W] input"));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::spec("convnet needs H and W divisible by 4"));
    }
    let head_in = ch.1 * (h / 4) * (w / 4);
    let specs = named(vec![
        ("conv1", LayerSpec::Conv { in_ch: c, out_ch: ch.0, kernel: 3, stride: 1, pad: 1 }),
        ("relu1", LayerSpec::Relu),
        ("pool1", LayerSpec::AvgPool { k: 2 }),
        ("conv2", LayerSpec::Conv { in_ch: ch.0, out_ch: ch.1, kernel: 3, stride: 1, pad: 1 }),
        ("relu2", LayerSpec::Relu),
        ("pool2", LayerSpec::AvgPool { k: 2 }),
        ("flatten", LayerSpec::Flatten),
        ("head", LayerSpec::Fc { input: head_in, output: classes }),
    ]);
    build_model(input_shape, specs)
}

/// Desk-scale residual network: stem conv, two residual blocks with pooling,
/// fully connected head.
pub fn resnet_small(input_shape: &[usize], width: usize, classes: usize) -> Result<Model> {
    if input_shape.len() != 3 {
        return Err(Error::spec("resnet expects [C, H, W] input"));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::spec("resnet needs H and W divisible by 4"));
    }
    let head_in = width * (h / 4) * (w / 4);
    let specs = named(vec![
        ("stem", LayerSpec::Conv { in_ch: c, out_ch: width, kernel: 3, stride: 1, pad: 1 }),
        ("stem_relu", LayerSpec::Relu),
        ("block1", LayerSpec::ResidualBlock { channels: width }),
        ("pool1", LayerSpec::AvgPool { k: 2 }),
        ("block2", LayerSpec::ResidualBlock { channels: width }),
        ("pool2", LayerSpec::AvgPool { k: 2 }),
        ("flatten", LayerSpec::Flatten),
        ("head", LayerSpec::Fc { input: head_in, output: classes }),
    ]);
    build_model(input_shape, specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_parameter_count() {
        let m = build_model(
            &[4],
            vec![("out".to_string(), LayerSpec::Fc { input: 4, output: 2 })],
        )
        .unwrap();
        assert_eq!(m.parameter_count(), 10); // 8 weights + 2 biases
    }

    #[test]
    fn empty_spec_rejected() {
        assert!(build_model(&[4], vec![]).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let specs = vec![
            ("a".to_string(), LayerSpec::Fc { input: 4, output: 3 }),
            ("b".to_string(), LayerSpec::Fc { input: 5, output: 2 }),
        ];
        assert!(build_model(&[4], specs).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![
            ("a".to_string(), LayerSpec::Fc { input: 4, output: 4 }),
            ("a".to_string(), LayerSpec::Fc { input: 4, output: 2 }),
        ];
        assert!(build_model(&[4], specs).is_err());
    }

    #[test]
    fn convnet_analog_builds() {
        let m = convnet(&[1, 16, 16], (8, 16), 10).unwrap();
        // shape-propagation oracle: head input is 16 * 4 * 4
        assert!(m.parameter_shapes().iter().any(|(n, s)| n == "head.weight" && s == &[256, 10]));
        let r = resnet_small(&[1, 16, 16], 8, 4).unwrap();
        assert!(r.parameter_count() > 0);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let m = convnet(&[1, 8, 8], (4, 8), 3).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 7);
        let flat = p.flatten();
        assert_eq!(flat.len(), m.parameter_count());
        let q = p.unflatten(&flat).unwrap();
        assert!(p.bits_eq(&q));
        // index map is contiguous and covers the vector
        let map = p.flat_index_map();
        let mut expect = 0;
        for (_, off, len) in &map {
            assert_eq!(*off, expect);
            expect += len;
        }
        assert_eq!(expect, flat.len());
    }

    #[test]
    fn wide_uniform_range() {
        let m = mlp(&[6], &[5], 3).unwrap();
        let p = init_params(&m, &InitScheme::WideUniform { low: -0.5, high: 0.5 }, 1);
        for (_, t) in p.entries() {
            assert!(t.data().iter().all(|&v| (-0.5..=0.5).contains(&v)));
        }
    }

    #[test]
    fn init_deterministic_per_seed() {
        let m = mlp(&[6], &[5], 3).unwrap();
        let a = init_params(&m, &InitScheme::DefaultRandom, 42);
        let b = init_params(&m, &InitScheme::DefaultRandom, 42);
        let c = init_params(&m, &InitScheme::DefaultRandom, 43);
        assert!(a.bits_eq(&b));
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn default_random_stdev_matches_uniform_law() {
        // fc(100,100): U(-0.1, 0.1) has stdev 0.2/sqrt(12) = sqrt(1/300)
        let m = mlp(&[100], &[], 100).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 5);
        let w = p.get("head.weight").unwrap();
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let stdev = crate::math::sqrt(var);
        let target = crate::math::sqrt(1.0 / 300.0);
        assert!(
            crate::math::abs(stdev - target) / target < 0.2,
            "stdev {stdev} vs target {target}"
        );
    }

    #[test]
    fn identity_fc_forward() {
        let m = build_model(
            &[3],
            vec![("out".to_string(), LayerSpec::Fc { input: 3, output: 3 })],
        )
        .unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let p = ParameterSet::from_entries(vec![
            ("out.weight".to_string(), eye),
            ("out.bias".to_string(), Tensor::zeros(&[3])),
        ]);
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = forward_values(&m, &p, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_zero_logits_and_activations() {
        let m = mlp(&[4], &[3], 2).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 1).map(|_| 0.0);
        let x = Tensor::new(vec![1, 4], vec![0.5, 0.2, 0.9, 0.1]).unwrap();
        let mut tr = Trace::new();
        let xv = tr.constant(x.clone());
        let (logits, acts, _) = forward_on(&mut tr, &m, &p, xv).unwrap();
        assert!(tr.value(logits).data().iter().all(|&v| v == 0.0));
        for a in &acts.outputs {
            assert!(tr.value(*a).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_matches_hand_rolled_mlp() {
        let m = mlp(&[4], &[3], 2).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 9);
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.9, 0.4, 0.3, 0.8, 0.2, 0.7, 0.6]).unwrap();
        let y = forward_values(&m, &p, &x).unwrap();

        // straight-line independent implementation
        let w1 = p.get("fc1.weight").unwrap().data();
        let b1 = p.get("fc1.bias").unwrap().data();
        let w2 = p.get("head.weight").unwrap().data();
        let b2 = p.get("head.bias").unwrap().data();
        for i in 0..2 {
            let mut h = [0.0f64; 3];
            for j in 0..3 {
                let mut s = b1[j];
                for k in 0..4 {
                    s += x.data()[i * 4 + k] * w1[k * 3 + j];
                }
                h[j] = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = b2[j];
                for (k, &hv) in h.iter().enumerate() {
                    s += hv * w2[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = convnet(&[1, 8, 8], (4, 8), 3).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 11);
        let x = {
            let mut rng = Rng::from_seed(2);
            let data: Vec<f64> = (0..2 * 64).map(|_| rng.uniform()).collect();
            Tensor::new(vec![2, 1, 8, 8], data).unwrap()
        };
        let a = forward_values(&m, &p, &x).unwrap();
        let b = forward_values(&m, &p, &x).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn uniform_logits_loss() {
        let m = mlp(&[4], &[], 5).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 1).map(|_| 0.0);
        let x = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
        let lg = loss_and_param_grads(&m, &p, &x, &[0, 4]).unwrap();
        assert!(crate::math::abs(lg.loss - crate::math::ln(5.0)) < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = mlp(&[4], &[], 3).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 1);
        let x = Tensor::new(vec![1, 4], vec![0.1; 4]).unwrap();
        assert!(matches!(
            loss_and_param_grads(&m, &p, &x, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn single_linear_layer_gradient_closed_form() {
        // B=1: dW = x ⊗ (softmax(z) - onehot(y))
        let m = mlp(&[3], &[], 2).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 3);
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.4]).unwrap();
        let y = 1usize;
        let lg = loss_and_param_grads(&m, &p, &x, &[y]).unwrap();

        let logits = forward_values(&m, &p, &x).unwrap();
        let m0 = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.data().iter().map(|&v| crate::math::exp(v - m0)).collect();
        let z: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
        let gw = lg.grads.get("head.weight").unwrap();
        for k in 0..3 {
            for j in 0..2 {
                let expect = x.data()[k] * (probs[j] - if j == y { 1.0 } else { 0.0 });
                let got = gw.data()[k * 2 + j];
                assert!(
                    crate::math::abs(got - expect) < 1e-12,
                    "dW[{k},{j}]: {got} vs {expect}"
                );
            }
        }
        let gb = lg.grads.get("head.bias").unwrap();
        for j in 0..2 {
            let expect = probs[j] - if j == y { 1.0 } else { 0.0 };
            assert!(crate::math::abs(gb.data()[j] - expect) < 1e-12);
        }
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let m = mlp(&[3], &[4], 2).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 8);
        let x1 = Tensor::new(vec![1, 3], vec![0.3, 0.6, 0.1]).unwrap();
        let x2 = Tensor::new(vec![2, 3], vec![0.3, 0.6, 0.1, 0.3, 0.6, 0.1]).unwrap();
        let g1 = loss_and_param_grads(&m, &p, &x1, &[1]).unwrap();
        let g2 = loss_and_param_grads(&m, &p, &x2, &[1, 1]).unwrap();
        for ((_, a), (_, b)) in g1.grads.entries().iter().zip(g2.grads.entries()) {
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert!(crate::math::abs(va - vb) < 1e-12);
            }
        }
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let m = mlp(&[4], &[3], 2).unwrap();
        let p = init_params(&m, &InitScheme::DefaultRandom, 21);
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.8, 0.3, 0.5, 0.9, 0.2, 0.6, 0.4]).unwrap();
        let labels = [0usize, 1];
        let lg = loss_and_param_grads(&m, &p, &x, &labels).unwrap();
        let flat = p.flatten();
        let gflat = lg.grads.flatten();
        let h = 1e-5;
        let loss_of = |pp: &ParameterSet| loss_and_param_grads(&m, pp, &x, &labels).unwrap().loss;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = loss_of(&p.unflatten(&plus).unwrap());
            let lm = loss_of(&p.unflatten(&minus).unwrap());
            let fd = (lp - lm) / (2.0 * h);
            let a = gflat[i];
            let scale = crate::math::abs(a).max(crate::math::abs(fd));
            if scale > 1e-8 {
                assert!(crate::math::abs(a - fd) / scale < 1e-4, "param {i}: {a} vs {fd}");
            }
        }
    }
}
