//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Values are resolved in increasing precedence: built-in defaults, the
//! selected profile, the config file, then command-line overrides. Unknown
//! keys, unparsable values and out-of-range values are rejected with the key
//! name and where it was set.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::alignment::{BaselineMode, DEFAULT_EIGEN_FLOOR};
use crate::error::{Error, Result};
use crate::evalx::{AblationFlags, FbccaParams, LosoSetup, Pipeline};
use crate::nnet::Architecture;
use crate::preprocess::{FilterBankSpec, SegmentSpec, OCCIPITAL_9};
use crate::synthgen::{make_stimulus_grid, CohortSpec, StimulusSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    None,
    Fbea,
    Baseline(BaselineMode),
}

/// Conversion between config text and typed values.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got {s:?}"))
        }
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some).map_err(|e| format!("{e} or auto"))
        }
    }
    fn render(&self) -> String {
        self.map_or("auto".into(), |v| v.to_string())
    }
}

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if v.is_empty() {
            Err("expected a comma-separated list".into())
        } else {
            Ok(v)
        }
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

impl ConfigValue for Vec<(f64, f64)> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|b| {
                let (lo, hi) = b
                    .trim()
                    .split_once('-')
                    .ok_or_else(|| format!("band {b:?} is not lo-hi"))?;
                Ok((f64::parse_value(lo.trim())?, f64::parse_value(hi.trim())?))
            })
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|(l, h)| format!("{l}-{h}")).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Profile {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(format!("expected paper or desk, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
        .into()
    }
}

impl ConfigValue for AlignMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => AlignMode::None,
            "fbea" => AlignMode::Fbea,
            "channel_norm" => AlignMode::Baseline(BaselineMode::ChannelNorm),
            "trial_norm" => AlignMode::Baseline(BaselineMode::TrialNorm),
            "channel_euclid" => AlignMode::Baseline(BaselineMode::ChannelEuclid),
            _ => {
                return Err(format!(
                    "expected none, fbea, channel_norm, trial_norm or channel_euclid, got {s:?}"
                ))
            }
        })
    }
    fn render(&self) -> String {
        match self {
            AlignMode::None => "none",
            AlignMode::Fbea => "fbea",
            AlignMode::Baseline(BaselineMode::ChannelNorm) => "channel_norm",
            AlignMode::Baseline(BaselineMode::TrialNorm) => "trial_norm",
            AlignMode::Baseline(BaselineMode::ChannelEuclid) => "channel_euclid",
        }
        .into()
    }
}

impl ConfigValue for Pipeline {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Pipeline::parse(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimConfig {
    pub num_targets: usize,
    pub f0: f64,
    pub df: f64,
    /// phase step in units of π
    pub phase_step: f64,
    pub harmonics: usize,
    pub harmonic_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub channels: usize,
    pub sources: usize,
    pub blocks: usize,
    pub fs: f64,
    pub duration: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub noise_sigma: f64,
    pub latency_jitter: f64,
    pub mixing_spread: f64,
    pub conduction_spread: f64,
    pub channel_gain_range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub montage: Vec<String>,
    pub channels: Vec<String>,
    pub latency: f64,
    pub window: f64,
    pub bands: Vec<(f64, f64)>,
    pub transition: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub mode: AlignMode,
    pub per_subject: bool,
    pub eigen_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub pipeline: Pipeline,
    pub ptal: bool,
    pub dest: bool,
    pub tfa_cl: bool,
    pub shift_time: f64,
    pub use_teacher: bool,
    pub fbcca_harmonics: usize,
    pub fbcca_a: f64,
    pub fbcca_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub stim: StimConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CohortSpec::default();
        let fb = FilterBankSpec::desk_default();
        let fbcca = FbccaParams::default();
        Self {
            profile: Profile::Paper,
            seed: 0,
            stim: StimConfig {
                num_targets: 8,
                f0: 8.0,
                df: 1.0,
                phase_step: 0.5,
                harmonics: 3,
                harmonic_decay: 0.6,
            },
            synth: SynthConfig {
                subjects: c.subjects,
                channels: c.channels,
                sources: c.sources,
                blocks: 6,
                fs: 250.0,
                duration: 1.0,
                amp_min: c.amp_min,
                amp_max: c.amp_max,
                noise_sigma: c.noise_sigma,
                latency_jitter: c.latency_jitter,
                mixing_spread: c.mixing_spread,
                conduction_spread: c.conduction_spread,
                channel_gain_range: c.channel_gain_range,
            },
            preprocess: PreprocessConfig {
                montage: OCCIPITAL_9.iter().map(|s| s.to_string()).collect(),
                channels: OCCIPITAL_9.iter().map(|s| s.to_string()).collect(),
                latency: 0.0,
                window: 1.0,
                bands: fb.band_edges,
                transition: fb.transition_width,
            },
            align: AlignConfig {
                mode: AlignMode::Fbea,
                per_subject: false,
                eigen_floor: DEFAULT_EIGEN_FLOOR,
            },
            train: TrainConfig::paper(),
            eval: EvalConfig {
                pipeline: Pipeline::CsstFull,
                ptal: true,
                dest: true,
                tfa_cl: true,
                shift_time: 0.5,
                use_teacher: false,
                fbcca_harmonics: fbcca.n_harmonics,
                fbcca_a: fbcca.a,
                fbcca_offset: fbcca.offset,
            },
        }
    }
}

/// One documented key.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub name: &'static str,
    pub help: &'static str,
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ , $help:literal ;)*) => {
        /// Every accepted key with a one-line description.
        pub const KEYS: &[KeyInfo] = &[$( KeyInfo { name: $key, help: $help } ),*];

        impl RunConfig {
            fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( $key => { self.$($field).+ = ConfigValue::parse_value(value)?; } )*
                    _ => return Err(UNKNOWN.into()),
                }
                Ok(())
            }

            /// Current value of `key` as config text.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$($field).+.render()), )*
                    _ => None,
                }
            }
        }
    };
}

const UNKNOWN: &str = "unknown key";

config_keys! {
    "profile" => profile, "hyperparameter bundle applied before the file: paper or desk";
    "seed" => seed, "base seed for generation and training";
    "stim.num_targets" => stim.num_targets, "number of stimulus targets";
    "stim.f0" => stim.f0, "lowest stimulus frequency in Hz";
    "stim.df" => stim.df, "frequency step in Hz";
    "stim.phase_step" => stim.phase_step, "phase step between targets in units of pi";
    "stim.harmonics" => stim.harmonics, "harmonics in synthetic responses";
    "stim.harmonic_decay" => stim.harmonic_decay, "amplitude ratio between consecutive harmonics";
    "synth.subjects" => synth.subjects, "synthetic subjects";
    "synth.channels" => synth.channels, "channels per subject";
    "synth.sources" => synth.sources, "latent oscillatory sources";
    "synth.blocks" => synth.blocks, "blocks per subject (one trial per target each)";
    "synth.fs" => synth.fs, "sampling rate in Hz";
    "synth.duration" => synth.duration, "trial length in seconds";
    "synth.amp_min" => synth.amp_min, "smallest subject gain";
    "synth.amp_max" => synth.amp_max, "largest subject gain";
    "synth.noise_sigma" => synth.noise_sigma, "std of additive pink plus white noise";
    "synth.latency_jitter" => synth.latency_jitter, "maximum response latency in seconds";
    "synth.mixing_spread" => synth.mixing_spread, "per-subject perturbation of the shared mixing";
    "synth.conduction_spread" => synth.conduction_spread, "per-subject spatial smearing strength";
    "synth.channel_gain_range" => synth.channel_gain_range, "per-channel gains spread over [1/r, r]";
    "preprocess.montage" => preprocess.montage, "channel names of the input containers";
    "preprocess.channels" => preprocess.channels, "channels to keep, in order";
    "segment.latency" => preprocess.latency, "window start after stimulus onset in seconds";
    "segment.window" => preprocess.window, "window length in seconds (gaze time)";
    "fb.bands" => preprocess.bands, "filter-bank pass bands as lo-hi pairs";
    "fb.transition" => preprocess.transition, "raised-cosine transition width in Hz";
    "align.mode" => align.mode, "none, fbea, channel_norm, trial_norm or channel_euclid";
    "align.per_subject" => align.per_subject, "one reference per source subject instead of pooled";
    "align.eigen_floor" => align.eigen_floor, "eigenvalue floor relative to the largest eigenvalue";
    "model.spatial_maps" => train.layers.spatial_maps, "spatial filters";
    "model.temporal_filters" => train.layers.temporal_filters, "temporal convolution filters";
    "model.kernel" => train.layers.kernel, "temporal kernel length in samples";
    "model.stride" => train.layers.stride, "temporal stride";
    "model.dropout" => train.layers.dropout, "dropout rate after the temporal layer";
    "model.domain_hidden" => train.layers.domain_hidden, "domain head hidden width";
    "model.proj_hidden" => train.layers.proj_hidden, "projection head hidden width";
    "model.proj_dim" => train.layers.proj_dim, "projection dimension";
    "train.lr" => train.lr, "stage-1 learning rate";
    "train.lr_stage2" => train.lr_stage2, "stage-2 learning rate";
    "train.weight_decay" => train.weight_decay, "decoupled weight decay";
    "train.beta1" => train.beta1, "Adam first-moment decay";
    "train.beta2" => train.beta2, "Adam second-moment decay";
    "train.adam_eps" => train.adam_eps, "Adam epsilon";
    "train.batch_size" => train.batch_size, "mini-batch size";
    "train.epochs_stage1" => train.epochs_stage1, "pre-training epochs";
    "train.epochs_stage2" => train.epochs_stage2, "self-training epochs";
    "train.pseudo_threshold" => train.pseudo_threshold, "minimum fused confidence for a pseudo-label";
    "train.ema_alpha" => train.ema_alpha, "teacher EMA decay";
    "train.tau" => train.tau, "contrastive temperature";
    "train.lambda_con" => train.lambda_con, "contrastive loss weight";
    "train.lambda_grl" => train.lambda_grl, "gradient reversal strength";
    "train.eps_fusion" => train.eps_fusion, "fusion weight denominator epsilon";
    "train.aug_time_shift_max" => train.aug_time_shift_max, "maximum circular shift in samples or auto";
    "train.aug_noise_sigma" => train.aug_noise_sigma, "augmentation noise std relative to the trial std";
    "train.one_hot_fusion" => train.one_hot_fusion, "fuse one-hot votes instead of probabilities";
    "eval.pipeline" => eval.pipeline, "fbcca, source_only, pure_selftrain or csst_full";
    "eval.ptal" => eval.ptal, "adversarial pre-training";
    "eval.dest" => eval.dest, "mean teacher with multi-view fusion";
    "eval.tfa_cl" => eval.tfa_cl, "contrastive term over augmented views";
    "eval.shift_time" => eval.shift_time, "gaze shift time added to the window for ITR";
    "eval.use_teacher" => eval.use_teacher, "score the teacher instead of the student";
    "eval.fbcca_harmonics" => eval.fbcca_harmonics, "FBCCA reference harmonics";
    "eval.fbcca_a" => eval.fbcca_a, "FBCCA band weight exponent";
    "eval.fbcca_offset" => eval.fbcca_offset, "FBCCA band weight offset";
}

fn config_error(key: &str, location: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        location: location.into(),
        message: message.into(),
    }
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_error(line, &loc, "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_error(k, &loc, "empty key"));
        }
        out.push((k.to_string(), v.to_string(), loc));
    }
    Ok(out)
}

fn apply_profile(cfg: &mut RunConfig, p: Profile) {
    cfg.profile = p;
    let seed = cfg.train.seed;
    cfg.train = match p {
        Profile::Paper => TrainConfig::paper(),
        Profile::Desk => TrainConfig::desk(),
    };
    cfg.train.seed = seed;
}

impl RunConfig {
    /// Resolve file text and `(key, value)` overrides into a validated config.
    pub fn resolve(file: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = parse_lines(file)?;
        entries.extend(
            overrides
                .iter()
                .map(|(k, v)| (k.clone(), v.clone(), "command line".to_string())),
        );
        let mut cfg = RunConfig::default();
        let mut origin: BTreeMap<String, String> = BTreeMap::new();
        if let Some((_, v, loc)) = entries.iter().rev().find(|(k, _, _)| k == "profile") {
            let p = Profile::parse_value(v).map_err(|m| config_error("profile", loc, m))?;
            apply_profile(&mut cfg, p);
            origin.insert("profile".into(), loc.clone());
        }
        for (k, v, loc) in &entries {
            if k == "profile" {
                continue;
            }
            cfg.set_raw(k, v).map_err(|m| config_error(k, loc, m))?;
            origin.insert(k.clone(), loc.clone());
        }
        cfg.train.seed = cfg.seed;
        cfg.train.per_subject_alignment = cfg.align.per_subject;
        cfg.train.use_teacher = cfg.eval.use_teacher;
        cfg.validate(&origin)?;
        Ok(cfg)
    }

    fn validate(&self, origin: &BTreeMap<String, String>) -> Result<()> {
        let fail = |key: &str, msg: String| {
            let loc = origin.get(key).map_or("built-in default", |s| s.as_str());
            Err(config_error(key, loc, msg))
        };
        let m = self.stim.num_targets;
        let t = &self.train;
        let checks: Vec<(&str, bool, String)> = vec![
            ("stim.num_targets", m >= 2, "must be at least 2".into()),
            ("stim.f0", self.stim.f0 > 0.0, "must be > 0".into()),
            ("stim.df", self.stim.df > 0.0, "must be > 0".into()),
            ("stim.harmonics", self.stim.harmonics >= 1, "must be at least 1".into()),
            (
                "stim.harmonic_decay",
                self.stim.harmonic_decay > 0.0 && self.stim.harmonic_decay <= 1.0,
                "must lie in (0, 1]".into(),
            ),
            ("synth.subjects", self.synth.subjects >= 1, "must be at least 1".into()),
            ("synth.blocks", self.synth.blocks >= 1, "must be at least 1".into()),
            (
                "synth.sources",
                self.synth.sources >= 1 && self.synth.sources <= self.synth.channels,
                "must lie in [1, synth.channels]".into(),
            ),
            ("synth.fs", self.synth.fs > 0.0, "must be > 0".into()),
            ("synth.duration", self.synth.duration > 0.0, "must be > 0".into()),
            ("synth.amp_min", self.synth.amp_min > 0.0, "must be > 0".into()),
            ("synth.amp_max", self.synth.amp_max >= self.synth.amp_min, "must be >= synth.amp_min".into()),
            ("synth.noise_sigma", self.synth.noise_sigma >= 0.0, "must be >= 0".into()),
            ("synth.latency_jitter", self.synth.latency_jitter >= 0.0, "must be >= 0".into()),
            ("synth.mixing_spread", self.synth.mixing_spread >= 0.0, "must be >= 0".into()),
            ("synth.conduction_spread", self.synth.conduction_spread >= 0.0, "must be >= 0".into()),
            ("synth.channel_gain_range", self.synth.channel_gain_range >= 1.0, "must be >= 1".into()),
            ("segment.latency", self.preprocess.latency >= 0.0, "must be >= 0".into()),
            ("segment.window", self.preprocess.window > 0.0, "must be > 0".into()),
            ("fb.transition", self.preprocess.transition >= 0.0, "must be >= 0".into()),
            ("align.eigen_floor", self.align.eigen_floor >= 0.0, "must be >= 0".into()),
            ("model.dropout", (0.0..1.0).contains(&self.train.layers.dropout), "must lie in [0, 1)".into()),
            ("model.spatial_maps", self.train.layers.spatial_maps >= 1, "must be at least 1".into()),
            ("model.temporal_filters", self.train.layers.temporal_filters >= 1, "must be at least 1".into()),
            ("model.kernel", self.train.layers.kernel >= 1, "must be at least 1".into()),
            ("model.stride", self.train.layers.stride >= 1, "must be at least 1".into()),
            ("model.domain_hidden", self.train.layers.domain_hidden >= 1, "must be at least 1".into()),
            ("model.proj_hidden", self.train.layers.proj_hidden >= 1, "must be at least 1".into()),
            ("model.proj_dim", self.train.layers.proj_dim >= 1, "must be at least 1".into()),
            ("train.lr", t.lr > 0.0, "must be > 0".into()),
            ("train.lr_stage2", t.lr_stage2 > 0.0, "must be > 0".into()),
            ("train.weight_decay", t.weight_decay >= 0.0, "must be >= 0".into()),
            ("train.beta1", (0.0..1.0).contains(&t.beta1), "must lie in [0, 1)".into()),
            ("train.beta2", (0.0..1.0).contains(&t.beta2), "must lie in [0, 1)".into()),
            ("train.adam_eps", t.adam_eps > 0.0, "must be > 0".into()),
            ("train.batch_size", t.batch_size >= 2, "must be at least 2".into()),
            (
                "train.pseudo_threshold",
                t.pseudo_threshold > 1.0 / m.max(1) as f64 && t.pseudo_threshold <= 1.0,
                format!("{} violates the invariant (1/M, 1] with M = {m}", t.pseudo_threshold),
            ),
            ("train.ema_alpha", (0.0..=1.0).contains(&t.ema_alpha), "must lie in [0, 1]".into()),
            ("train.tau", t.tau > 0.0, "must be > 0".into()),
            ("train.lambda_con", t.lambda_con >= 0.0, "must be >= 0".into()),
            ("train.lambda_grl", t.lambda_grl >= 0.0, "must be >= 0".into()),
            ("train.eps_fusion", t.eps_fusion > 0.0, "must be > 0".into()),
            ("train.aug_noise_sigma", t.aug_noise_sigma >= 0.0, "must be >= 0".into()),
            ("eval.shift_time", self.eval.shift_time >= 0.0, "must be >= 0".into()),
            ("eval.fbcca_harmonics", self.eval.fbcca_harmonics >= 1, "must be at least 1".into()),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return fail(key, msg);
            }
        }
        if let Err(e) = FilterBankSpec::new(self.preprocess.bands.clone(), self.preprocess.transition) {
            return fail("fb.bands", e.to_string());
        }
        if let Err(e) = self.stimulus() {
            return fail("stim.num_targets", e.to_string());
        }
        Ok(())
    }

    pub fn stimulus(&self) -> Result<StimulusSpec> {
        make_stimulus_grid(self.stim.num_targets, self.stim.f0, self.stim.df, self.stim.phase_step * PI)?
            .with_harmonics(self.stim.harmonics, self.stim.harmonic_decay)
    }

    pub fn cohort(&self) -> CohortSpec {
        let s = &self.synth;
        CohortSpec {
            subjects: s.subjects,
            channels: s.channels,
            sources: s.sources,
            amp_min: s.amp_min,
            amp_max: s.amp_max,
            noise_sigma: s.noise_sigma,
            latency_jitter: s.latency_jitter,
            mixing_spread: s.mixing_spread,
            conduction_spread: s.conduction_spread,
            channel_gain_range: s.channel_gain_range,
            seed: self.seed,
        }
    }

    pub fn filter_bank(&self) -> Result<FilterBankSpec> {
        FilterBankSpec::new(self.preprocess.bands.clone(), self.preprocess.transition)
    }

    pub fn segment(&self) -> SegmentSpec {
        SegmentSpec {
            latency: self.preprocess.latency,
            window: self.preprocess.window,
        }
    }

    /// Network for the given input shape; `input_scale` is left at 1.
    pub fn architecture(&self, n_bands: usize, n_channels: usize, n_samples: usize) -> Architecture {
        Architecture::with_layers(n_bands, n_channels, n_samples, self.stim.num_targets, self.train.layers)
    }

    pub fn flags(&self) -> AblationFlags {
        let (fbea, baseline) = match self.align.mode {
            AlignMode::None => (false, None),
            AlignMode::Fbea => (true, None),
            AlignMode::Baseline(b) => (false, Some(b)),
        };
        AblationFlags {
            fbea,
            ptal: self.eval.ptal,
            dest: self.eval.dest,
            tfa_cl: self.eval.tfa_cl,
            baseline,
        }
    }

    pub fn loso_setup(&self) -> Result<LosoSetup> {
        Ok(LosoSetup {
            spec: self.stimulus()?,
            gaze_time: self.preprocess.window,
            shift_time: self.eval.shift_time,
            fbcca: FbccaParams {
                n_harmonics: self.eval.fbcca_harmonics,
                a: self.eval.fbcca_a,
                offset: self.eval.fbcca_offset,
            },
        })
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, self.get(k.name).unwrap_or_default()))
            .collect()
    }
}
