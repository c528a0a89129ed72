use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvep_adapt::alignment::sample_mean_cov;
use ssvep_adapt::preprocess::*;
use ssvep_adapt::synthgen::*;
use std::f64::consts::{FRAC_PI_2, PI};

/// Power at integer-Hz bin `k` of a length-`n` real signal (naive DFT).
fn bin_power(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let a = 2.0 * PI * k as f64 * t as f64 / n;
        re += v * a.cos();
        im -= v * a.sin();
    }
    re * re + im * im
}

fn total_power(x: &[f64]) -> f64 {
    (0..=x.len() / 2).map(|k| bin_power(x, k) * if k == 0 || 2 * k == x.len() { 1.0 } else { 2.0 }).sum()
}

fn identity_profile(nc: usize, noise: f64, amp: f64, seed: u64) -> SubjectProfile {
    let mut mixing = vec![0.0; nc * nc];
    (0..nc).for_each(|i| mixing[i * nc + i] = 1.0);
    SubjectProfile::new("s", mixing, nc, nc, amp, noise, 0.0, seed).unwrap()
}

#[test]
fn stimulus_grids() {
    let s = make_stimulus_grid(40, 8.0, 0.2, 0.5 * PI).unwrap();
    assert!((s.base_freqs[39] - 15.8).abs() < 1e-9);
    assert!((s.phases[2] - PI).abs() < 1e-12);
    let s = make_stimulus_grid(2, 10.0, 2.0, 0.0).unwrap();
    assert_eq!((s.base_freqs.clone(), s.phases.clone()), (vec![10.0, 12.0], vec![0.0, 0.0]));
    let s = make_stimulus_grid(8, 8.0, 1.0, FRAC_PI_2).unwrap();
    assert_eq!(s.base_freqs, (8..16).map(f64::from).collect::<Vec<_>>());
    assert!((s.phases[4]).abs() < 1e-12 && (s.phases[3] - 1.5 * PI).abs() < 1e-12);
    assert!(make_stimulus_grid(1, 8.0, 1.0, 0.0).is_err());
}

#[test]
fn clean_single_harmonic_has_its_peak_at_the_target() {
    let spec = StimulusSpec::new(vec![10.0, 12.0], vec![0.0, 0.0], 1, 0.6).unwrap();
    let x = synth_epoch(&spec, &identity_profile(2, 0.0, 1.0, 1), 0, 100.0, 1.0, 3).unwrap();
    for row in x.chunks(100) {
        let peak = (0..=50).max_by(|&a, &b| bin_power(row, a).total_cmp(&bin_power(row, b))).unwrap();
        assert_eq!(peak, 10);
    }
    assert_eq!(x, synth_epoch(&spec, &identity_profile(2, 0.0, 1.0, 1), 0, 100.0, 1.0, 3).unwrap());
}

#[test]
fn clean_energy_sits_on_harmonics() {
    let spec = make_stimulus_grid(8, 8.0, 1.0, FRAC_PI_2).unwrap();
    let p = SubjectProfile::random("s", 9, 3, 1.3, 0.0, 0.0, 4).unwrap();
    for k in 0..8 {
        let x = synth_epoch(&spec, &p, k, 250.0, 1.0, 10 + k as u64).unwrap();
        for row in x.chunks(250) {
            let total = total_power(row);
            let on: f64 = (1..=spec.num_harmonics).map(|h| 2.0 * bin_power(row, h * (8 + k))).sum();
            assert!(on >= 0.99 * total, "target {k}: {on} of {total}");
        }
    }
}

#[test]
fn zero_gain_leaves_unit_noise() {
    let spec = make_stimulus_grid(2, 10.0, 2.0, 0.0).unwrap();
    let x = synth_epoch(&spec, &identity_profile(3, 1.0, 0.0, 7), 1, 1000.0, 1.0, 5).unwrap();
    for row in x.chunks(1000) {
        let m = row.iter().sum::<f64>() / 1000.0;
        let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1000.0).sqrt();
        assert!(m.abs() < 0.15, "{m}");
        assert!((sd - 1.0).abs() < 0.05, "{sd}");
    }
}

#[test]
fn datasets_count_and_determinism() {
    let spec = make_stimulus_grid(8, 8.0, 1.0, FRAC_PI_2).unwrap();
    let c = CohortSpec { subjects: 2, ..Default::default() };
    let cohort = make_cohort(&c).unwrap();
    let a = synth_dataset(&spec, &cohort, 6, 250.0, 1.0).unwrap();
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|s| s.n_trials() == 48));
    let mut block0 = a[0].labels().unwrap()[..8].to_vec();
    block0.sort();
    assert_eq!(block0, (0..8).collect::<Vec<_>>());
    assert_ne!(a[0].data(), a[1].data());
    let b = synth_dataset(&spec, &make_cohort(&c).unwrap(), 6, 250.0, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn different_mixings_shift_the_covariance() {
    let spec = make_stimulus_grid(4, 8.0, 1.0, FRAC_PI_2).unwrap();
    let a = SubjectProfile::random("a", 6, 3, 1.0, 0.5, 0.0, 1).unwrap();
    let b = SubjectProfile::new("a", SubjectProfile::random("b", 6, 3, 1.0, 0.5, 0.0, 2).unwrap().mixing().to_vec(), 6, 3, 1.0, 0.5, 0.0, 1).unwrap();
    let sa = synth_dataset(&spec, &[a], 3, 128.0, 1.0).unwrap();
    let sb = synth_dataset(&spec, &[b], 3, 128.0, 1.0).unwrap();
    let d = (sample_mean_cov(&sa[0]).unwrap() - sample_mean_cov(&sb[0]).unwrap()).norm();
    assert!(d > 0.0);
}

fn raw_set(seed: u64, n: usize, nc: usize, np: usize) -> EpochSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * nc * np).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EpochSet::raw(data, n, nc, np, Some((0..n).collect()), 250.0, "r").unwrap()
}

#[test]
fn channel_selection() {
    let set = raw_set(1, 2, 9, 20);
    let names: Vec<&str> = OCCIPITAL_9.to_vec();
    assert_eq!(select_channels(&set, &names, &names).unwrap(), set);
    let picked = select_channels(&set, &["O2", "Pz", "POz"], &names).unwrap();
    for t in 0..2 {
        for (out_row, src_row) in [8usize, 0, 3].iter().enumerate() {
            assert_eq!(
                &picked.trial(t)[out_row * 20..(out_row + 1) * 20],
                &set.trial(t)[src_row * 20..(src_row + 1) * 20]
            );
        }
    }
    assert!(select_channels(&set, &["Fz"], &names).is_err());
}

#[test]
fn segmentation_indices() {
    assert_eq!(sample_index(0.14, 250.0), 35);
    assert_eq!(sample_index(0.13, 250.0), 33);
    let set = raw_set(2, 3, 2, 400);
    let cut = segment(&set, SegmentSpec { latency: 0.13, window: 0.4 }).unwrap();
    assert_eq!(cut.n_samples(), 100);
    assert_eq!(&cut.trial(1)[..100], &set.trial(1)[33..133]);
    let whole = segment(&set, SegmentSpec { latency: 0.0, window: 1.6 }).unwrap();
    assert_eq!(whole, set);
    assert!(segment(&set, SegmentSpec { latency: 1.0, window: 1.0 }).is_err());
}

fn sine(f: f64, np: usize, fs: f64) -> EpochSet {
    let data = (0..np).map(|t| (2.0 * PI * f * t as f64 / fs).sin()).collect();
    EpochSet::raw(data, 1, 1, np, None, fs, "sine").unwrap()
}

#[test]
fn filter_bank_separates_bands() {
    let fb = FilterBankSpec::new(vec![(8.0, 16.0), (16.0, 32.0), (24.0, 48.0)], 2.0).unwrap();
    let out = filterbank_decompose(&sine(10.0, 250, 250.0), &fb).unwrap();
    let e: Vec<f64> = out.data().chunks(250).map(|b| b.iter().map(|v| v * v).sum()).collect();
    assert!(e[0] >= 100.0 * e[1], "{e:?}");
    let dc = EpochSet::raw(vec![3.0; 250], 1, 1, 250, None, 250.0, "dc").unwrap();
    let out = filterbank_decompose(&dc, &fb).unwrap();
    let norm = out.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-6 * (9.0f64 * 250.0).sqrt());
}

#[test]
fn wide_single_band_is_near_identity() {
    let fb = FilterBankSpec::new(vec![(6.0, 60.0)], 2.0).unwrap();
    let x = sine(11.0, 250, 250.0);
    let y = filterbank_decompose(&x, &fb).unwrap();
    let err: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = x.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err <= 1e-3 * norm, "{}", err / norm);
}

#[test]
fn bandpass_is_zero_phase() {
    let fb = FilterBankSpec::new(vec![(8.0, 16.0)], 2.0).unwrap();
    let x = sine(11.0, 250, 250.0);
    let y = filterbank_decompose(&x, &fb).unwrap();
    let xc = |lag: isize| -> f64 {
        (0..250isize).map(|t| x.data()[t as usize] * y.data()[(t + lag).rem_euclid(250) as usize]).sum()
    };
    let best = (-20isize..=20).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
    assert_eq!(best, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let fb = FilterBankSpec::desk_default();
        let x = raw_set(seed, 2, 3, 64);
        let y = raw_set(seed + 1, 2, 3, 64);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let z = EpochSet::raw(mix, 2, 3, 64, x.labels().map(<[usize]>::to_vec), 250.0, "r").unwrap();
        let (fx, fy, fz) = (
            filterbank_decompose(&x, &fb).unwrap(),
            filterbank_decompose(&y, &fb).unwrap(),
            filterbank_decompose(&z, &fb).unwrap(),
        );
        let scale = fz.data().iter().map(|v| v.abs()).fold(1e-12, f64::max);
        for ((u, v), w) in fx.data().iter().zip(fy.data()).zip(fz.data()) {
            prop_assert!((a * u + b * v - w).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn preprocessing_keeps_trials_and_labels(seed in 0u64..500, n in 1usize..5) {
        let set = raw_set(seed, n, 9, 300);
        let sel = select_channels(&set, &OCCIPITAL_9[..4], &OCCIPITAL_9).unwrap();
        let cut = segment(&sel, SegmentSpec { latency: 0.1, window: 1.0 }).unwrap();
        let fb = filterbank_decompose(&cut, &FilterBankSpec::desk_default()).unwrap();
        for s in [&sel, &cut, &fb] {
            prop_assert_eq!(s.n_trials(), n);
            prop_assert_eq!(s.labels(), set.labels());
        }
        prop_assert_eq!(fb.stage(), Stage::Banded);
    }
}
