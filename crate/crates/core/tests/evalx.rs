use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssvep_adapt::evalx::*;
use ssvep_adapt::preprocess::{filterbank_decompose, EpochSet, FilterBankSpec};
use ssvep_adapt::synthgen::{make_cohort, make_stimulus_grid, synth_dataset, CohortSpec, StimulusSpec};
use ssvep_adapt::trainer::TrainConfig;

/// Bits per minute from the textbook formula, written out independently.
fn reference_itr(p: f64, m: f64, t: f64) -> f64 {
    let bits = if p >= 1.0 {
        m.log2()
    } else {
        m.log2() + p * p.log2() + (1.0 - p) * ((1.0 - p) / (m - 1.0)).log2()
    };
    bits.max(0.0) * 60.0 / t
}

#[test]
fn itr_matches_reference_values() {
    assert_eq!(itr(1.0 / 40.0, 40, 1.0, 0.5).unwrap(), 0.0);
    assert_eq!(itr(0.125, 8, 2.0, 0.0).unwrap(), 0.0);
    assert!((itr(1.0, 40, 1.0, 0.5).unwrap() - 212.877).abs() <= 1e-3);
    assert!((itr(0.948, 40, 1.0, 0.5).unwrap() - 190.09).abs() <= 1e-2);
    assert_eq!(itr(1.0, 8, 1.5, 0.0).unwrap(), (60.0 / 1.5) * 3.0);
    for &(p, m, t) in &[(0.7, 8.0, 1.5), (0.33, 4.0, 2.0), (0.99, 40.0, 0.8)] {
        let got = itr(p, m as usize, t, 0.0).unwrap();
        assert!((got - reference_itr(p, m, t)).abs() < 1e-9);
    }
}

#[test]
fn itr_is_monotone_in_accuracy() {
    for m in [4usize, 8, 40] {
        let lo = 1.0 / m as f64;
        let mut prev = -1.0;
        for i in 0..100 {
            let p = lo + (1.0 - lo) * i as f64 / 99.0;
            let v = itr(p, m, 1.0, 0.5).unwrap();
            assert!(v >= prev, "m={m} p={p}");
            prev = v;
        }
    }
}

fn spec8() -> StimulusSpec {
    make_stimulus_grid(8, 8.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap()
}

#[test]
fn fbcca_is_perfect_on_clean_signals() {
    let spec = spec8();
    let cohort = make_cohort(&CohortSpec {
        subjects: 2,
        noise_sigma: 0.0,
        latency_jitter: 0.0,
        ..Default::default()
    })
    .unwrap();
    let fb = FilterBankSpec::desk_default();
    for raw in synth_dataset(&spec, &cohort, 2, 250.0, 1.0).unwrap() {
        let banded = filterbank_decompose(&raw, &fb).unwrap();
        let (unlabeled, sealed) = SealedLabels::seal(banded).unwrap();
        let preds = fbcca_classify(&unlabeled, &spec, FbccaParams::default()).unwrap();
        assert_eq!(sealed.score(&preds).unwrap(), 1.0);
        assert_eq!(preds, fbcca_classify(&unlabeled, &spec, FbccaParams::default()).unwrap());
    }
}

#[test]
fn fbcca_is_at_chance_on_white_noise() {
    let spec = spec8();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, nc, np) = (200, 9, 250);
    let data: Vec<f64> = (0..n * nc * np).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
    let raw = EpochSet::raw(data, n, nc, np, Some(labels.clone()), 250.0, "noise").unwrap();
    let banded = filterbank_decompose(&raw, &FilterBankSpec::desk_default()).unwrap();
    let preds = fbcca_classify(&banded.without_labels(), &spec, FbccaParams::default()).unwrap();
    let acc = accuracy(&preds, &labels).unwrap();
    assert!((acc - 0.125).abs() <= 0.10, "{acc}");
}

#[test]
fn canonical_correlation_of_independent_noise_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = nalgebra::DMatrix::from_fn(3, 2000, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = cca_reference(10.0, 2, 250.0, 2000).unwrap();
    let rho = max_canonical_correlation(&x, &y).unwrap();
    assert!((0.0..0.15).contains(&rho), "{rho}");
}

fn tiny_cohort() -> Vec<EpochSet> {
    let spec = make_stimulus_grid(4, 8.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
    let cohort = make_cohort(&CohortSpec {
        subjects: 3,
        noise_sigma: 0.5,
        ..Default::default()
    })
    .unwrap();
    let fb = FilterBankSpec::desk_default();
    synth_dataset(&spec, &cohort, 2, 128.0, 0.5)
        .unwrap()
        .iter()
        .map(|r| filterbank_decompose(r, &fb).unwrap())
        .collect()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 2,
        epochs_stage2: 2,
        batch_size: 8,
        pseudo_threshold: 0.3,
        ..TrainConfig::desk()
    }
}

#[test]
fn target_fold_is_unlabeled() {
    let data = tiny_cohort();
    let (source, target, sealed) = fold_data(&data, 1, AblationFlags::FULL, &tiny_cfg()).unwrap();
    assert!(target.labels().is_none());
    assert_eq!(source.n_trials(), 16);
    assert_eq!(sealed.len(), 8);
    assert_eq!(target.subject_id(), data[1].subject_id());
}

#[test]
fn loso_reports_are_deterministic_and_well_formed() {
    let data = tiny_cohort();
    let spec = make_stimulus_grid(4, 8.0, 1.0, std::f64::consts::FRAC_PI_2).unwrap();
    let setup = LosoSetup::new(spec, 0.5);
    let cfg = tiny_cfg();
    let a = loso_run(&data, &setup, &cfg, Pipeline::CsstFull, AblationFlags::FULL).unwrap();
    let b = loso_run(&data, &setup, &cfg, Pipeline::CsstFull, AblationFlags::FULL).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.per_fold.len(), 3);
    let mean_itr = a.per_fold.iter().map(|f| f.itr).sum::<f64>() / 3.0;
    assert!((a.mean_itr - mean_itr).abs() < 1e-12);
    let csv = a.to_csv();
    assert!(csv.starts_with(REPORT_HEADER));
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    let agg = parse_report_csv(&csv).unwrap();
    assert_eq!(agg.len(), 1);
    assert!((agg[0].mean_accuracy - a.mean_accuracy).abs() < 1e-6);
    assert_eq!(agg[0].window_length, 0.5);
}

#[test]
fn grids_have_the_expected_rows() {
    let labels: Vec<String> = component_grid().iter().map(|f| f.label()).collect();
    assert_eq!(labels, ["-", "FBEA", "PTAL", "PTAL+DEST", "FBEA+PTAL+DEST", "FBEA+PTAL+DEST+TFA-CL"]);
    let labels: Vec<String> = alignment_grid().iter().map(|f| f.label()).collect();
    assert_eq!(labels.len(), 5);
    assert_eq!(labels.last().map(String::as_str), Some("FBEA+PTAL+DEST+TFA-CL"));
}

#[test]
fn report_parser_rejects_garbage() {
    assert!(parse_report_csv("a,b,c\n").is_err());
    assert!(parse_report_csv(&format!("{REPORT_HEADER}\nm,stderr,1,0.1,0.1,8,,x\n")).is_err());
}

#[test]
fn stderr_uses_sample_deviation() {
    let (m, s) = mean_stderr(&[0.8, 0.9, 1.0]);
    assert!((m - 0.9).abs() < 1e-12);
    assert!((s - 0.1 / 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_stderr(&[0.5]), (0.5, 0.0));
}
