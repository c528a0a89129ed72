//! Feature extractor `G` (band fusion → spatial filtering → temporal
//! convolution), classifier head `H`, domain head `D` and projection head `P`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, shape, Error, Result};
use crate::seed;

pub const PARAMS_VERSION: u32 = 1;

/// Layer sizes. Input dims come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_bands: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub spatial_maps: usize,
    pub temporal_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dropout: f64,
    pub domain_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Constant gain applied to every input sample.
    pub input_scale: f64,
}

/// Data-independent layer sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSizes {
    pub spatial_maps: usize,
    pub temporal_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dropout: f64,
    pub domain_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for LayerSizes {
    fn default() -> Self {
        Self {
            spatial_maps: 8,
            temporal_filters: 8,
            kernel: 10,
            stride: 2,
            dropout: 0.4,
            domain_hidden: 32,
            proj_hidden: 64,
            proj_dim: 32,
        }
    }
}

impl Architecture {
    /// Default layer sizes for the given input and class count.
    pub fn new(n_bands: usize, n_channels: usize, n_samples: usize, n_classes: usize) -> Self {
        Self::with_layers(n_bands, n_channels, n_samples, n_classes, LayerSizes::default())
    }

    pub fn with_layers(n_bands: usize, n_channels: usize, n_samples: usize, n_classes: usize, l: LayerSizes) -> Self {
        Self {
            n_bands,
            n_channels,
            n_samples,
            n_classes,
            spatial_maps: l.spatial_maps,
            temporal_filters: l.temporal_filters,
            kernel: l.kernel,
            stride: l.stride,
            dropout: l.dropout,
            domain_hidden: l.domain_hidden,
            proj_hidden: l.proj_hidden,
            proj_dim: l.proj_dim,
            input_scale: 1.0,
        }
    }

    pub fn temporal_len(&self) -> usize {
        (self.n_samples - self.kernel) / self.stride + 1
    }

    /// Width `F` of the flattened feature vector.
    pub fn feature_width(&self) -> usize {
        self.temporal_filters * self.temporal_len()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_bands,
            self.n_channels,
            self.n_samples,
            self.spatial_maps,
            self.temporal_filters,
            self.kernel,
            self.stride,
            self.domain_hidden,
            self.proj_hidden,
            self.proj_dim,
        ];
        if sizes.contains(&0) || self.n_classes < 2 {
            return Err(invalid(format!("degenerate architecture {self:?}")));
        }
        if self.kernel > self.n_samples {
            return Err(invalid("temporal kernel longer than the input"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(invalid("input_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(name, shape, fan_in, fan_out)` for every tensor, in storage order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize, usize)> {
        let f = self.feature_width();
        let (s, o, k) = (self.spatial_maps, self.temporal_filters, self.kernel);
        vec![
            ("g.band_fusion", vec![1, self.n_bands], self.n_bands, 1),
            ("g.spatial", vec![s, self.n_channels], self.n_channels, s),
            ("g.temporal.kernel", vec![o, s, k], s * k, o * k),
            ("g.temporal.bias", vec![o], 0, 0),
            ("h.weight", vec![self.n_classes, f], f, self.n_classes),
            ("h.bias", vec![self.n_classes], 0, 0),
            ("d.hidden.weight", vec![self.domain_hidden, f], f, self.domain_hidden),
            ("d.hidden.bias", vec![self.domain_hidden], 0, 0),
            ("d.out.weight", vec![1, self.domain_hidden], self.domain_hidden, 1),
            ("d.out.bias", vec![1], 0, 0),
            ("p.hidden.weight", vec![self.proj_hidden, f], f, self.proj_hidden),
            ("p.hidden.bias", vec![self.proj_hidden], 0, 0),
            ("p.out.weight", vec![self.proj_dim, self.proj_hidden], self.proj_hidden, self.proj_dim),
            ("p.out.bias", vec![self.proj_dim], 0, 0),
        ]
    }
}

/// Indices into the tensor list, fixed by `Architecture::layout`.
mod slot {
    pub const BAND: usize = 0;
    pub const SPATIAL: usize = 1;
    pub const KERNEL: usize = 2;
    pub const KBIAS: usize = 3;
    pub const HW: usize = 4;
    pub const HB: usize = 5;
    pub const DHW: usize = 6;
    pub const DHB: usize = 7;
    pub const DOW: usize = 8;
    pub const DOB: usize = 9;
    pub const PHW: usize = 10;
    pub const PHB: usize = 11;
    pub const POW: usize = 12;
    pub const POB: usize = 13;
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Features,
    Classifier,
    Domain,
    Projection,
}

impl Part {
    pub fn of(name: &str) -> Part {
        match name.as_bytes().first() {
            Some(b'g') => Part::Features,
            Some(b'h') => Part::Classifier,
            Some(b'd') => Part::Domain,
            _ => Part::Projection,
        }
    }
}

/// Named parameter tensors of `G`, `H`, `D` and `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub version: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shp, fan_in, fan_out) in arch.layout() {
            let n: usize = shp.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = seed::rng(seed_value, &[seed::tag(name)]);
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            };
            names.push(name.to_string());
            tensors.push(Tensor::from_parts(shp, data));
        }
        Ok(Self {
            arch,
            version: PARAMS_VERSION,
            names,
            tensors,
        })
    }

    /// Rebuild from stored tensors, checking names and shapes against the
    /// architecture.
    pub fn from_tensors(arch: Architecture, version: u32, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if named.len() != layout.len() {
            return Err(shape(format!("expected {} tensors, got {}", layout.len(), named.len())));
        }
        for ((name, t), (lname, lshape, _, _)) in named.iter().zip(&layout) {
            if name != lname || t.shape() != lshape.as_slice() {
                return Err(shape(format!(
                    "tensor {name} {:?} does not match manifest entry {lname} {lshape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            arch,
            version,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `(name, shape)` pairs in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn same_manifest(&self, other: &ModelParams) -> bool {
        self.arch == other.arch && self.manifest() == other.manifest()
    }

    /// Hash over the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Register every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Network<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        Network { params: self, vars }
    }
}

/// Per-parameter gradients, aligned with [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            grads: p.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// Parameters bound to a tape.
pub struct Network<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Network<'_> {
    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.params.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    /// Feature extractor on `x` of shape `[B, N_B, N_C, N_P]`. Dropout is
    /// applied after the temporal nonlinearity when `dropout_seed` is set.
    pub fn forward_g(&self, tape: &mut Tape, x: Var, dropout_seed: Option<u64>) -> Result<Var> {
        let a = self.arch();
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != [a.n_bands, a.n_channels, a.n_samples] {
            return Err(shape(format!(
                "input {xs:?} does not match [B, {}, {}, {}]",
                a.n_bands, a.n_channels, a.n_samples
            )));
        }
        let b = xs[0];
        let v = &self.vars;
        let flat = tape.reshape(x, vec![b, a.n_bands, a.n_channels * a.n_samples])?;
        let fused = tape.mix(flat, v[slot::BAND])?;
        let fused = tape.reshape(fused, vec![b, a.n_channels, a.n_samples])?;
        let spatial = tape.mix(fused, v[slot::SPATIAL])?;
        let conv = tape.conv1d(spatial, v[slot::KERNEL], v[slot::KBIAS], a.stride)?;
        let mut act = tape.relu(conv)?;
        if let (Some(s), true) = (dropout_seed, a.dropout > 0.0) {
            let keep = 1.0 - a.dropout;
            let mut rng = seed::rng(s, &[seed::tag("dropout")]);
            let n = tape.value(act).len();
            let mask = (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            act = tape.mul_const(act, mask)?;
        }
        let out = tape.reshape(act, vec![b, a.feature_width()])?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("feature activations".into()));
        }
        Ok(out)
    }

    fn check_features(&self, tape: &Tape, f: Var) -> Result<()> {
        let s = tape.value(f).shape();
        if s.len() != 2 || s[1] != self.arch().feature_width() {
            return Err(shape(format!(
                "features {s:?} do not have width {}",
                self.arch().feature_width()
            )));
        }
        Ok(())
    }

    /// Class logits `[B, M]`.
    pub fn forward_h(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        tape.linear(features, self.vars[slot::HW], self.vars[slot::HB])
    }

    /// Domain logit `[B, 1]`.
    pub fn forward_d(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        let h = tape.linear(features, self.vars[slot::DHW], self.vars[slot::DHB])?;
        let h = tape.relu(h)?;
        tape.linear(h, self.vars[slot::DOW], self.vars[slot::DOB])
    }

    /// Unit-norm projection `[B, d_proj]`.
    pub fn forward_p(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        let h = tape.linear(features, self.vars[slot::PHW], self.vars[slot::PHB])?;
        let h = tape.relu(h)?;
        let z = tape.linear(h, self.vars[slot::POW], self.vars[slot::POB])?;
        tape.l2_normalize_rows(z)
    }

    pub fn grads(&self, g: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self.vars.iter().map(|&v| g.get(v)).collect(),
        }
    }
}

/// Inputs as a tape leaf: `n` trials of `bands × channels × samples`.
pub fn input(tape: &mut Tape, arch: &Architecture, data: Vec<f64>) -> Result<Var> {
    let per = arch.n_bands * arch.n_channels * arch.n_samples;
    if per == 0 || data.len() % per != 0 {
        return Err(shape("input buffer is not a whole number of trials"));
    }
    let n = data.len() / per;
    let mut data = data;
    if arch.input_scale != 1.0 {
        data.iter_mut().for_each(|v| *v *= arch.input_scale);
    }
    let t = Tensor::new(vec![n, arch.n_bands, arch.n_channels, arch.n_samples], data)?;
    Ok(tape.leaf(t, false))
}

/// Teacher-style inference in evaluation mode.
pub struct Inference {
    /// `B × M` softmax rows
    pub probs: Vec<f64>,
    /// `B × d_proj` unit rows, when requested
    pub projections: Option<Vec<f64>>,
}

pub fn infer(params: &ModelParams, data: Vec<f64>, with_projection: bool) -> Result<Inference> {
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let x = input(&mut tape, &params.arch, data)?;
    let f = net.forward_g(&mut tape, x, None)?;
    let logits = net.forward_h(&mut tape, f)?;
    let probs = super::tape::softmax_rows(tape.value(logits).data(), params.arch.n_classes);
    let projections = if with_projection {
        let z = net.forward_p(&mut tape, f)?;
        Some(tape.value(z).data().to_vec())
    } else {
        None
    };
    Ok(Inference { probs, projections })
}

/// Argmax class per row of a `rows × k` buffer (first maximum wins).
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Predicted classes over a batch buffer, in chunks to bound memory.
pub fn predict(params: &ModelParams, data: &[f64]) -> Result<Vec<usize>> {
    let a = &params.arch;
    let per = a.n_bands * a.n_channels * a.n_samples;
    let mut out = Vec::new();
    for chunk in data.chunks(per * 64) {
        let inf = infer(params, chunk.to_vec(), false)?;
        out.extend(argmax_rows(&inf.probs, a.n_classes));
    }
    Ok(out)
}
