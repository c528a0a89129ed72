//! Epoch containers and the preprocessing chain: channel selection,
//! latency-window segmentation and zero-phase filter-bank decomposition.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// The nine occipital electrodes used for SSVEP decoding.
pub const OCCIPITAL_9: [&str; 9] = ["Pz", "PO5", "PO3", "POz", "PO4", "PO6", "O1", "Oz", "O2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Banded,
    Aligned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Banded => "banded",
            Stage::Aligned => "aligned",
        }
    }
}

/// A batch of EEG trials stored row-major as
/// `trials × bands × channels × samples`. Raw data has a single band.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    data: Vec<f64>,
    n_trials: usize,
    n_bands: usize,
    n_channels: usize,
    n_samples: usize,
    labels: Option<Vec<usize>>,
    fs: f64,
    subject_id: String,
    stage: Stage,
}

impl EpochSet {
    /// Build a raw (single-band) epoch set.
    pub fn raw(
        data: Vec<f64>,
        n_trials: usize,
        n_channels: usize,
        n_samples: usize,
        labels: Option<Vec<usize>>,
        fs: f64,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(
            data,
            [n_trials, 1, n_channels, n_samples],
            labels,
            fs,
            subject_id,
            Stage::Raw,
        )
    }

    pub fn new(
        data: Vec<f64>,
        dims: [usize; 4],
        labels: Option<Vec<usize>>,
        fs: f64,
        subject_id: impl Into<String>,
        stage: Stage,
    ) -> Result<Self> {
        let [n_trials, n_bands, n_channels, n_samples] = dims;
        if n_bands == 0 || n_channels == 0 || n_samples == 0 {
            return Err(shape(format!("degenerate epoch dims {dims:?}")));
        }
        if stage == Stage::Raw && n_bands != 1 {
            return Err(shape("raw epochs carry exactly one band"));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n_trials {
                return Err(shape(format!(
                    "{} labels for {n_trials} trials",
                    l.len()
                )));
            }
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(invalid(format!("sample rate must be positive, got {fs}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("epoch data element {i}")));
        }
        Ok(Self {
            data,
            n_trials,
            n_bands,
            n_channels,
            n_samples,
            labels,
            fs,
            subject_id: subject_id.into(),
            stage,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }
    pub fn n_bands(&self) -> usize {
        self.n_bands
    }
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.n_trials, self.n_bands, self.n_channels, self.n_samples]
    }
    pub fn fs(&self) -> f64 {
        self.fs
    }
    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn stage(&self) -> Stage {
        self.stage
    }
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Values per trial (`bands · channels · samples`).
    pub fn trial_len(&self) -> usize {
        self.n_bands * self.n_channels * self.n_samples
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.trial_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copy with labels removed (unlabeled target domain).
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Strip labels, returning them separately.
    pub fn split_labels(mut self) -> (Self, Option<Vec<usize>>) {
        let labels = self.labels.take();
        (self, labels)
    }

    pub(crate) fn with_data(&self, data: Vec<f64>, dims: [usize; 4], stage: Stage) -> Result<Self> {
        Self::new(
            data,
            dims,
            self.labels.clone(),
            self.fs,
            self.subject_id.clone(),
            stage,
        )
    }

    /// Trials at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.trial_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.n_trials {
                return Err(invalid(format!("trial index {i} out of range")));
            }
            data.extend_from_slice(self.trial(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            data,
            [indices.len(), self.n_bands, self.n_channels, self.n_samples],
            labels,
            self.fs,
            self.subject_id.clone(),
            self.stage,
        )
    }

    /// Stack several sets sharing the same per-trial shape, stage and rate.
    /// Labels survive only if every part is labeled.
    pub fn concat(parts: &[&EpochSet], subject_id: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("cannot concatenate zero epoch sets"))?;
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        let mut n = 0;
        for p in parts {
            if p.dims()[1..] != first.dims()[1..] || p.stage != first.stage || p.fs != first.fs {
                return Err(shape(format!(
                    "cannot concatenate {} ({:?}, {}) with {} ({:?}, {})",
                    p.subject_id,
                    p.dims(),
                    p.stage.as_str(),
                    first.subject_id,
                    first.dims(),
                    first.stage.as_str()
                )));
            }
            data.extend_from_slice(&p.data);
            n += p.n_trials;
            labels = match (labels, &p.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        let mut dims = first.dims();
        dims[0] = n;
        Self::new(data, dims, labels, first.fs, subject_id, first.stage)
    }
}

/// Pass-band layout of a filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBankSpec {
    pub band_edges: Vec<(f64, f64)>,
    pub transition_width: f64,
}

impl FilterBankSpec {
    pub fn new(band_edges: Vec<(f64, f64)>, transition_width: f64) -> Result<Self> {
        if band_edges.is_empty() {
            return Err(invalid("filter bank needs at least one band"));
        }
        for &(lo, hi) in &band_edges {
            if !(lo > 0.0 && hi > lo) {
                return Err(invalid(format!("band ({lo}, {hi}) must satisfy 0 < low < high")));
            }
        }
        if !(transition_width > 0.0) {
            return Err(invalid("transition width must be positive"));
        }
        Ok(Self {
            band_edges,
            transition_width,
        })
    }

    /// Harmonic-ladder default: three bands starting at 8, 16 and 24 Hz.
    pub fn desk_default() -> Self {
        Self {
            band_edges: vec![(8.0, 45.0), (16.0, 45.0), (24.0, 45.0)],
            transition_width: 2.0,
        }
    }

    pub fn num_bands(&self) -> usize {
        self.band_edges.len()
    }

    /// Gain of band `b` at frequency `f` (Hz, non-negative): flat inside
    /// `[low, high]`, raised-cosine roll-off over `transition_width` outside.
    pub fn gain(&self, b: usize, f: f64) -> f64 {
        let (lo, hi) = self.band_edges[b];
        let w = self.transition_width;
        if f >= lo && f <= hi {
            1.0
        } else if f < lo && f > lo - w {
            0.5 * (1.0 - (PI * (f - (lo - w)) / w).cos())
        } else if f > hi && f < hi + w {
            0.5 * (1.0 + (PI * (f - hi) / w).cos())
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentSpec {
    pub latency: f64,
    pub window: f64,
}

/// Round-half-up of `seconds · fs` to a sample index. The product is first
/// snapped to a 1e-9 grid so that decimal inputs such as 0.13·250 = 32.5
/// are not pushed below the half by binary representation error.
pub fn sample_index(seconds: f64, fs: f64) -> usize {
    let x = ((seconds * fs) * 1e9).round() / 1e9;
    (x + 0.5).floor().max(0.0) as usize
}

/// Keep and reorder channels to `channel_names`, looked up in `montage`.
pub fn select_channels(epochs: &EpochSet, channel_names: &[&str], montage: &[&str]) -> Result<EpochSet> {
    if montage.len() != epochs.n_channels() {
        return Err(shape(format!(
            "montage lists {} channels but data has {}",
            montage.len(),
            epochs.n_channels()
        )));
    }
    let idx: Vec<usize> = channel_names
        .iter()
        .map(|name| {
            montage
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| Error::UnknownChannel(name.to_string()))
        })
        .collect::<Result<_>>()?;
    if idx.is_empty() {
        return Err(invalid("no channels requested"));
    }
    let [n, nb, nc, np] = epochs.dims();
    let mut out = Vec::with_capacity(n * nb * idx.len() * np);
    for t in 0..n {
        let trial = epochs.trial(t);
        for b in 0..nb {
            for &c in &idx {
                let off = (b * nc + c) * np;
                out.extend_from_slice(&trial[off..off + np]);
            }
        }
    }
    epochs.with_data(out, [n, nb, idx.len(), np], epochs.stage())
}

/// Crop every trial to `[latency, latency + window)`.
pub fn segment(epochs: &EpochSet, spec: SegmentSpec) -> Result<EpochSet> {
    if epochs.stage() != Stage::Raw {
        return Err(invalid("segmentation applies to raw epochs only"));
    }
    if !(spec.latency >= 0.0 && spec.window > 0.0) {
        return Err(invalid("segment needs latency >= 0 and window > 0"));
    }
    let start = sample_index(spec.latency, epochs.fs());
    let len = sample_index(spec.window, epochs.fs());
    let [n, _, nc, np] = epochs.dims();
    if len == 0 || start + len > np {
        return Err(invalid(format!(
            "window [{start}, {}) exceeds the {np} available samples",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(n * nc * len);
    for t in 0..n {
        let trial = epochs.trial(t);
        for c in 0..nc {
            out.extend_from_slice(&trial[c * np + start..c * np + start + len]);
        }
    }
    epochs.with_data(out, [n, 1, nc, len], Stage::Raw)
}

/// Zero-phase filter-bank decomposition by FFT masking. The transform is
/// circular, so edge effects wrap around the epoch.
pub fn filterbank_decompose(epochs: &EpochSet, fb: &FilterBankSpec) -> Result<EpochSet> {
    if epochs.stage() != Stage::Raw {
        return Err(invalid("filter-bank decomposition applies to raw epochs only"));
    }
    let fs = epochs.fs();
    for &(lo, hi) in &fb.band_edges {
        if hi >= fs / 2.0 {
            return Err(invalid(format!(
                "band ({lo}, {hi}) reaches the Nyquist frequency {}",
                fs / 2.0
            )));
        }
    }
    let [n, _, nc, np] = epochs.dims();
    let nb = fb.num_bands();
    let masks: Vec<Vec<f64>> = (0..nb)
        .map(|b| {
            (0..np)
                .map(|k| fb.gain(b, k.min(np - k) as f64 * fs / np as f64))
                .collect()
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(np);
    let inv = planner.plan_fft_inverse(np);
    let scale = 1.0 / np as f64;

    let mut out = vec![0.0; n * nb * nc * np];
    let mut spectrum = vec![Complex::new(0.0, 0.0); np];
    let mut buf = vec![Complex::new(0.0, 0.0); np];
    for t in 0..n {
        let trial = epochs.trial(t);
        for c in 0..nc {
            for (s, &v) in spectrum.iter_mut().zip(&trial[c * np..(c + 1) * np]) {
                *s = Complex::new(v, 0.0);
            }
            fwd.process(&mut spectrum);
            for (b, mask) in masks.iter().enumerate() {
                for ((o, s), m) in buf.iter_mut().zip(&spectrum).zip(mask) {
                    *o = s * *m;
                }
                inv.process(&mut buf);
                let off = ((t * nb + b) * nc + c) * np;
                for (o, v) in out[off..off + np].iter_mut().zip(&buf) {
                    *o = v.re * scale;
                }
            }
        }
    }
    epochs.with_data(out, [n, nb, nc, np], Stage::Banded)
}
