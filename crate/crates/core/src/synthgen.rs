//! Synthetic multi-subject SSVEP data.
//!
//! Each subject observes a small set of latent oscillatory sources through a
//! subject-specific mixing matrix and gain, plus pink and white noise. Varying
//! the mixing and gain across subjects produces the covariate shift that the
//! alignment and adaptation stages are meant to remove.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::preprocess::EpochSet;
use crate::seed;

/// Frequency/phase-coded stimulus layout.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusSpec {
    pub base_freqs: Vec<f64>,
    pub phases: Vec<f64>,
    pub num_harmonics: usize,
    pub harmonic_decay: f64,
}

impl StimulusSpec {
    pub fn new(
        base_freqs: Vec<f64>,
        phases: Vec<f64>,
        num_harmonics: usize,
        harmonic_decay: f64,
    ) -> Result<Self> {
        if base_freqs.len() < 2 || base_freqs.len() != phases.len() {
            return Err(invalid("need at least two targets with one phase each"));
        }
        if base_freqs[0] <= 0.0 || base_freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("base frequencies must be positive and strictly increasing"));
        }
        if num_harmonics == 0 {
            return Err(invalid("num_harmonics must be at least 1"));
        }
        if !(harmonic_decay > 0.0 && harmonic_decay <= 1.0) {
            return Err(invalid("harmonic_decay must lie in (0, 1]"));
        }
        Ok(Self {
            base_freqs,
            phases,
            num_harmonics,
            harmonic_decay,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.base_freqs.len()
    }

    pub fn with_harmonics(self, num_harmonics: usize, harmonic_decay: f64) -> Result<Self> {
        Self::new(self.base_freqs, self.phases, num_harmonics, harmonic_decay)
    }

    /// Every stimulus harmonic must stay below Nyquist.
    pub fn check_rate(&self, fs: f64) -> Result<()> {
        let top = self.base_freqs[self.num_targets() - 1] * self.num_harmonics as f64;
        if top >= fs / 2.0 {
            return Err(invalid(format!(
                "harmonic at {top} Hz is not below Nyquist ({} Hz)",
                fs / 2.0
            )));
        }
        Ok(())
    }
}

/// Linearly spaced frequencies with a constant phase step. Defaults to three
/// harmonics with amplitude ratio 0.6.
pub fn make_stimulus_grid(num_targets: usize, f0: f64, df: f64, phase_step: f64) -> Result<StimulusSpec> {
    if num_targets < 2 {
        return Err(invalid("num_targets must be at least 2"));
    }
    if !(f0 > 0.0 && df > 0.0) {
        return Err(invalid("f0 and df must be positive"));
    }
    let base_freqs = (0..num_targets).map(|k| f0 + k as f64 * df).collect();
    let phases = (0..num_targets)
        .map(|k| (k as f64 * phase_step).rem_euclid(TAU))
        .collect();
    StimulusSpec::new(base_freqs, phases, 3, 0.6)
}

/// How one subject sees the latent sources.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectProfile {
    pub subject_id: String,
    /// `n_channels × n_sources`, row-major.
    mixing: Vec<f64>,
    n_channels: usize,
    n_sources: usize,
    pub amplitude_scale: f64,
    pub noise_sigma: f64,
    pub latency_jitter: f64,
    pub seed: u64,
    /// `n_channels × n_channels` transform applied to the whole recording
    /// (signal and noise).
    conduction: Option<Vec<f64>>,
}

impl SubjectProfile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject_id: impl Into<String>,
        mixing: Vec<f64>,
        n_channels: usize,
        n_sources: usize,
        amplitude_scale: f64,
        noise_sigma: f64,
        latency_jitter: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_sources == 0 || n_sources > n_channels || mixing.len() != n_channels * n_sources {
            return Err(invalid(format!(
                "mixing must be {n_channels}×{n_sources} with 1 <= sources <= channels"
            )));
        }
        let m = DMatrix::from_row_slice(n_channels, n_sources, &mixing);
        if m.rank(1e-10) < n_sources {
            return Err(invalid("mixing matrix must have full column rank"));
        }
        if !(amplitude_scale >= 0.0) || !(noise_sigma >= 0.0) || !(latency_jitter >= 0.0) {
            return Err(invalid("gain, noise and jitter must be non-negative"));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            mixing,
            n_channels,
            n_sources,
            amplitude_scale,
            noise_sigma,
            latency_jitter,
            seed,
            conduction: None,
        })
    }

    /// Pass the whole recording (signal and noise) through `matrix`,
    /// row-major `n_channels × n_channels`.
    pub fn with_conduction(mut self, matrix: Vec<f64>) -> Result<Self> {
        let nc = self.n_channels;
        if matrix.len() != nc * nc || matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("conduction must be a finite {nc}×{nc} matrix")));
        }
        if DMatrix::from_row_slice(nc, nc, &matrix).rank(1e-10) < nc {
            return Err(invalid("conduction matrix must be invertible"));
        }
        self.conduction = Some(matrix);
        Ok(self)
    }

    pub fn conduction(&self) -> Option<&[f64]> {
        self.conduction.as_deref()
    }

    /// Mixing drawn from a seeded standard normal, columns scaled to unit norm.
    pub fn random(
        subject_id: impl Into<String>,
        n_channels: usize,
        n_sources: usize,
        amplitude_scale: f64,
        noise_sigma: f64,
        latency_jitter: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(seed, &[seed::tag("mixing")]);
        let mut mixing: Vec<f64> = (0..n_channels * n_sources)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        normalize_columns(&mut mixing, n_channels, n_sources);
        Self::new(
            subject_id,
            mixing,
            n_channels,
            n_sources,
            amplitude_scale,
            noise_sigma,
            latency_jitter,
            seed,
        )
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }
    pub fn n_sources(&self) -> usize {
        self.n_sources
    }
    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }
}

fn sample_count(fs: f64, duration: f64) -> Result<usize> {
    let n = fs * duration;
    let r = n.round();
    if !(fs > 0.0 && duration > 0.0) || (n - r).abs() > 1e-9 * n.max(1.0) || r < 8.0 {
        return Err(invalid(format!(
            "fs·duration = {n} must be an integer of at least 8"
        )));
    }
    Ok(r as usize)
}

/// Unit-variance noise for one channel: pink (1/√f amplitude mask on white
/// noise, DC removed) plus white, then centred and scaled to `sigma`.
fn channel_noise<R: Rng>(rng: &mut R, n: usize, sigma: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut spec);
    spec[0] = Complex::new(0.0, 0.0);
    for (k, s) in spec.iter_mut().enumerate().skip(1) {
        *s /= (k.min(n - k) as f64).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let pink = standardize(spec.iter().map(|c| c.re).collect());
    let white = standardize((0..n).map(|_| rng.sample(StandardNormal)).collect());
    let mixed = standardize(pink.iter().zip(&white).map(|(p, w)| p + w).collect());
    mixed.into_iter().map(|v| v * sigma).collect()
}

fn standardize(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    for v in &mut x {
        *v = (*v - mean) / sd;
    }
    x
}

/// One trial, `n_channels × n_samples` row-major.
///
/// Latent source `j` carries the target's harmonics with an extra phase
/// offset `jπ/n_sources`; the whole source block is delayed by a circular
/// shift of `round(U[0, latency_jitter]·fs)` samples.
pub fn synth_epoch(
    spec: &StimulusSpec,
    profile: &SubjectProfile,
    target: usize,
    fs: f64,
    duration: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if target >= spec.num_targets() {
        return Err(invalid(format!(
            "target {target} out of range for {} targets",
            spec.num_targets()
        )));
    }
    let np = sample_count(fs, duration)?;
    spec.check_rate(fs)?;
    let (nc, ns) = (profile.n_channels, profile.n_sources);
    let mut rng = seed::rng(seed, &[]);

    let lag = (rng.gen::<f64>() * profile.latency_jitter * fs).round() as usize % np;
    let f = spec.base_freqs[target];
    let phi = spec.phases[target];
    let mut sources = vec![0.0; ns * np];
    for j in 0..ns {
        let offset = j as f64 * PI / ns as f64;
        for i in 0..np {
            let t = i as f64 / fs;
            let mut v = 0.0;
            let mut amp = 1.0;
            for h in 1..=spec.num_harmonics {
                let hf = h as f64;
                v += amp * (TAU * hf * f * t + hf * phi + offset).sin();
                amp *= spec.harmonic_decay;
            }
            sources[j * np + (i + lag) % np] = v;
        }
    }

    let mut planner = FftPlanner::new();
    let mut out = vec![0.0; nc * np];
    for c in 0..nc {
        let row = &mut out[c * np..(c + 1) * np];
        for j in 0..ns {
            let w = profile.amplitude_scale * profile.mixing[c * ns + j];
            for (o, s) in row.iter_mut().zip(&sources[j * np..(j + 1) * np]) {
                *o += w * s;
            }
        }
        if profile.noise_sigma > 0.0 {
            let noise = channel_noise(&mut rng, np, profile.noise_sigma, &mut planner);
            for (o, n) in row.iter_mut().zip(noise) {
                *o += n;
            }
        }
    }
    if let Some(d) = &profile.conduction {
        let smeared = DMatrix::from_row_slice(nc, nc, d) * DMatrix::from_row_slice(nc, np, &out);
        return Ok(smeared.transpose().as_slice().to_vec());
    }
    Ok(out)
}

/// `blocks × num_targets` labeled trials per subject, block-major.
pub fn synth_dataset(
    spec: &StimulusSpec,
    profiles: &[SubjectProfile],
    blocks: usize,
    fs: f64,
    duration: f64,
) -> Result<Vec<EpochSet>> {
    if profiles.is_empty() {
        return Err(invalid("at least one subject profile is required"));
    }
    if blocks == 0 {
        return Err(invalid("blocks must be at least 1"));
    }
    let np = sample_count(fs, duration)?;
    let m = spec.num_targets();
    profiles
        .par_iter()
        .map(|p| {
            let mut data = Vec::with_capacity(blocks * m * p.n_channels * np);
            let mut labels = Vec::with_capacity(blocks * m);
            for b in 0..blocks {
                for k in 0..m {
                    let s = seed::derive(p.seed, &[seed::tag("epoch"), b as u64, k as u64]);
                    data.extend(synth_epoch(spec, p, k, fs, duration, s)?);
                    labels.push(k);
                }
            }
            EpochSet::raw(data, blocks * m, p.n_channels, np, Some(labels), fs, p.subject_id.clone())
        })
        .collect()
}

/// Knobs for a family of shifted subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub subjects: usize,
    pub channels: usize,
    pub sources: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub noise_sigma: f64,
    pub latency_jitter: f64,
    /// Std of the per-subject perturbation added to a shared unit-column
    /// mixing before renormalising; large values give unrelated subjects.
    pub mixing_spread: f64,
    /// Std of the off-identity part of each subject's spatial smearing
    /// (rows rescaled to unit norm).
    pub conduction_spread: f64,
    /// Per-channel gains are log-uniform in `[1/r, r]`; `1` disables them.
    pub channel_gain_range: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 6,
            channels: 9,
            sources: 3,
            amp_min: 0.5,
            amp_max: 2.0,
            noise_sigma: 1.0,
            latency_jitter: 0.02,
            mixing_spread: 0.5,
            conduction_spread: 0.0,
            channel_gain_range: 10.0,
            seed: 0,
        }
    }
}

fn normalize_columns(mixing: &mut [f64], n_channels: usize, n_sources: usize) {
    for j in 0..n_sources {
        let norm = (0..n_channels)
            .map(|c| mixing[c * n_sources + j].powi(2))
            .sum::<f64>()
            .sqrt();
        for c in 0..n_channels {
            mixing[c * n_sources + j] /= norm;
        }
    }
}

/// Subjects `S01…` whose mixings perturb a shared one, with gains spread
/// log-uniformly over `[amp_min, amp_max]`.
pub fn make_cohort(c: &CohortSpec) -> Result<Vec<SubjectProfile>> {
    if !(c.amp_min > 0.0 && c.amp_max >= c.amp_min) {
        return Err(invalid("amplitude range must satisfy 0 < amp_min <= amp_max"));
    }
    if !(c.conduction_spread >= 0.0) || !(c.channel_gain_range >= 1.0) {
        return Err(invalid("conduction_spread must be >= 0 and channel_gain_range >= 1"));
    }
    if !(c.mixing_spread >= 0.0) || c.sources == 0 || c.sources > c.channels {
        return Err(invalid("mixing_spread must be >= 0 and 1 <= sources <= channels"));
    }
    let n = c.channels * c.sources;
    let mut base_rng = seed::rng(c.seed, &[seed::tag("base_mixing")]);
    let mut base: Vec<f64> = (0..n).map(|_| base_rng.sample(StandardNormal)).collect();
    normalize_columns(&mut base, c.channels, c.sources);
    // per-entry std of a unit column
    let unit = 1.0 / (c.channels as f64).sqrt();
    (0..c.subjects)
        .map(|i| {
            let s = seed::derive(c.seed, &[seed::tag("subject"), i as u64]);
            let u: f64 = seed::rng(s, &[seed::tag("gain")]).gen();
            let gain = (c.amp_min.ln() + u * (c.amp_max.ln() - c.amp_min.ln())).exp();
            let mut rng = seed::rng(s, &[seed::tag("mixing")]);
            let mut mixing: Vec<f64> = base
                .iter()
                .map(|b| b + c.mixing_spread * unit * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize_columns(&mut mixing, c.channels, c.sources);
            let p = SubjectProfile::new(
                format!("S{:02}", i + 1),
                mixing,
                c.channels,
                c.sources,
                gain,
                c.noise_sigma,
                c.latency_jitter,
                s,
            )?;
            if c.conduction_spread == 0.0 && c.channel_gain_range == 1.0 {
                return Ok(p);
            }
            let nc = c.channels;
            let mut crng = seed::rng(s, &[seed::tag("conduction")]);
            let g: Vec<f64> = (0..nc * nc).map(|_| crng.sample(StandardNormal)).collect();
            let ln_r = c.channel_gain_range.ln();
            let gains: Vec<f64> = (0..nc).map(|_| (ln_r * (2.0 * crng.gen::<f64>() - 1.0)).exp()).collect();
            let mut d = vec![0.0; nc * nc];
            for i in 0..nc {
                for j in 0..nc {
                    let sym = 0.5 * (g[i * nc + j] + g[j * nc + i]) * unit;
                    d[i * nc + j] = f64::from(u8::from(i == j)) + c.conduction_spread * sym;
                }
                let row = &mut d[i * nc..(i + 1) * nc];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v *= gains[i] / n);
            }
            p.with_conduction(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_profile(nc: usize, noise: f64, gain: f64) -> SubjectProfile {
        let mut m = vec![0.0; nc * nc];
        for i in 0..nc {
            m[i * nc + i] = 1.0;
        }
        SubjectProfile::new("id", m, nc, nc, gain, noise, 0.0, 3).unwrap()
    }

    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf.iter().map(|c| c.norm_sqr()).collect()
    }

    #[test]
    fn grid_matches_paper_layout() {
        let g = make_stimulus_grid(40, 8.0, 0.2, 0.5 * PI).unwrap();
        assert_eq!(g.num_targets(), 40);
        assert!((g.base_freqs[39] - 15.8).abs() < 1e-12);
        assert!((g.phases[1] - 0.5 * PI).abs() < 1e-12);
        assert!((g.phases[2] - PI).abs() < 1e-12);

        let g = make_stimulus_grid(2, 10.0, 2.0, 0.0).unwrap();
        assert_eq!(g.base_freqs, vec![10.0, 12.0]);
        assert_eq!(g.phases, vec![0.0, 0.0]);

        let g = make_stimulus_grid(8, 8.0, 1.0, 0.5 * PI).unwrap();
        assert_eq!(g.base_freqs, (8..16).map(f64::from).collect::<Vec<_>>());
        for (k, p) in g.phases.iter().enumerate() {
            let expected = [0.0, 0.5 * PI, PI, 1.5 * PI][k % 4];
            assert!((p - expected).abs() < 1e-12, "{k}: {p}");
        }

        assert!(make_stimulus_grid(1, 8.0, 1.0, 0.0).is_err());
        assert!(make_stimulus_grid(4, 0.0, 1.0, 0.0).is_err());
        assert!(make_stimulus_grid(4, 8.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn noise_free_epoch_is_a_pure_tone() {
        let spec = make_stimulus_grid(2, 10.0, 2.0, 0.0)
            .unwrap()
            .with_harmonics(1, 1.0)
            .unwrap();
        let p = identity_profile(3, 0.0, 1.0);
        let e = synth_epoch(&spec, &p, 0, 100.0, 1.0, 1).unwrap();
        for c in 0..3 {
            let ps = power_spectrum(&e[c * 100..(c + 1) * 100]);
            let peak = (0..=50).max_by(|&a, &b| ps[a].total_cmp(&ps[b])).unwrap();
            assert_eq!(peak, 10);
        }
        assert_eq!(e, synth_epoch(&spec, &p, 0, 100.0, 1.0, 1).unwrap());
    }

    #[test]
    fn harmonic_energy_concentration() {
        let spec = make_stimulus_grid(8, 8.0, 1.0, 0.5 * PI).unwrap();
        let p = SubjectProfile::random("s", 9, 3, 1.3, 0.0, 0.05, 11).unwrap();
        for target in 0..8 {
            let e = synth_epoch(&spec, &p, target, 250.0, 1.0, 5 + target as u64).unwrap();
            let f = spec.base_freqs[target] as usize;
            for c in 0..9 {
                let ps = power_spectrum(&e[c * 250..(c + 1) * 250]);
                let total: f64 = ps.iter().sum();
                let inband: f64 = (1..=3).map(|h| ps[h * f] + ps[250 - h * f]).sum();
                assert!(inband >= 0.99 * total, "target {target} ch {c}");
            }
        }
    }

    #[test]
    fn pure_noise_statistics() {
        let spec = make_stimulus_grid(2, 10.0, 2.0, 0.0).unwrap();
        let p = identity_profile(4, 1.0, 0.0);
        let e = synth_epoch(&spec, &p, 1, 1000.0, 1.0, 9).unwrap();
        for c in 0..4 {
            let row = &e[c * 1000..(c + 1) * 1000];
            let mean = row.iter().sum::<f64>() / 1000.0;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
        }
    }

    #[test]
    fn epoch_errors() {
        let spec = make_stimulus_grid(2, 10.0, 2.0, 0.0).unwrap();
        let p = identity_profile(2, 0.0, 1.0);
        assert!(synth_epoch(&spec, &p, 2, 100.0, 1.0, 0).is_err());
        assert!(synth_epoch(&spec, &p, 0, 100.0, 1.005, 0).is_err());
        assert!(synth_epoch(&spec, &p, 0, 100.0, 0.05, 0).is_err());
        // third harmonic of 12 Hz is at Nyquist for fs = 72
        assert!(synth_epoch(&spec, &p, 0, 72.0, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let spec = make_stimulus_grid(8, 8.0, 1.0, 0.5 * PI).unwrap();
        let cohort = make_cohort(&CohortSpec {
            subjects: 2,
            ..Default::default()
        })
        .unwrap();
        let sets = synth_dataset(&spec, &cohort, 6, 250.0, 1.0).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].n_trials(), 48);
        assert_eq!(sets[0].dims(), [48, 1, 9, 250]);
        let first_block: Vec<usize> = sets[0].labels().unwrap()[..8].to_vec();
        assert_eq!(first_block, (0..8).collect::<Vec<_>>());
        assert_ne!(sets[0].data(), sets[1].data());
        let again = synth_dataset(&spec, &cohort, 6, 250.0, 1.0).unwrap();
        assert_eq!(sets, again);
        assert!(synth_dataset(&spec, &[], 6, 250.0, 1.0).is_err());
    }

    #[test]
    fn mixing_changes_covariance() {
        let spec = make_stimulus_grid(8, 8.0, 1.0, 0.5 * PI).unwrap();
        let a = SubjectProfile::random("a", 9, 3, 1.0, 0.5, 0.0, 1).unwrap();
        let mut b = SubjectProfile::random("b", 9, 3, 1.0, 0.5, 0.0, 2).unwrap();
        b.seed = a.seed;
        let cov = |p: &SubjectProfile| {
            let set = synth_dataset(&spec, std::slice::from_ref(p), 2, 250.0, 1.0).unwrap().remove(0);
            let mut c = DMatrix::<f64>::zeros(9, 9);
            for t in 0..set.n_trials() {
                let x = DMatrix::from_row_slice(9, 250, set.trial(t));
                c += &x * x.transpose();
            }
            c
        };
        assert!((cov(&a) - cov(&b)).norm() > 0.0);
    }

    #[test]
    fn profile_validation() {
        assert!(SubjectProfile::new("x", vec![1.0, 2.0, 2.0, 4.0], 2, 2, 1.0, 0.0, 0.0, 0).is_err());
        assert!(SubjectProfile::new("x", vec![1.0, 0.0], 1, 2, 1.0, 0.0, 0.0, 0).is_err());
        assert!(SubjectProfile::new("x", vec![1.0], 1, 1, -1.0, 0.0, 0.0, 0).is_err());
        let p = SubjectProfile::random("x", 9, 3, 1.0, 0.0, 0.0, 4).unwrap();
        for j in 0..3 {
            let n: f64 = (0..9).map(|c| p.mixing()[c * 3 + j].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
