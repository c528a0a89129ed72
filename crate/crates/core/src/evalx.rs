//! Scoring, the leave-one-subject-out harness, ablation grids and a
//! training-free filter-bank CCA classifier.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::alignment::{apply_alignment, baseline_normalize, compute_reference, inverse_sqrt_psd, BaselineMode};
use crate::error::{invalid, shape, Error, Result};
use crate::nnet::{predict, ModelParams};
use crate::preprocess::{EpochSet, Stage};
use crate::seed;
use crate::synthgen::StimulusSpec;
use crate::trainer::{architecture_for, pretrain, selftrain, Pretrained, SelfTrainMode, TrainConfig};

/// Fraction of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("accuracy of an empty prediction list"));
    }
    if predictions.len() != labels.len() {
        return Err(shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Information transfer rate in bits per minute for accuracy `p` over `m`
/// targets with `gaze_time + shift_time` seconds per selection. Chance level
/// and below give zero.
pub fn itr(p: f64, m: usize, gaze_time: f64, shift_time: f64) -> Result<f64> {
    let t = gaze_time + shift_time;
    if !(t > 0.0) {
        return Err(invalid(format!("selection time must be positive, got {t}")));
    }
    if m < 2 {
        return Err(invalid("itr needs at least two targets"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("accuracy {p} outside [0, 1]")));
    }
    let mf = m as f64;
    if p <= 1.0 / mf {
        return Ok(0.0);
    }
    let mut bits = mf.log2();
    if p > 0.0 {
        bits += p * p.log2();
    }
    if p < 1.0 {
        bits += (1.0 - p) * ((1.0 - p) / (mf - 1.0)).log2();
    }
    Ok((60.0 / t * bits).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbccaParams {
    pub n_harmonics: usize,
    /// band `b` (1-based) is weighted `b^-a + offset`
    pub a: f64,
    pub offset: f64,
}

impl Default for FbccaParams {
    fn default() -> Self {
        Self {
            n_harmonics: 5,
            a: 1.25,
            offset: 0.25,
        }
    }
}

const CCA_FLOOR: f64 = 1e-12;

fn centered(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut r in m.row_iter_mut() {
        let mean = r.mean();
        r.add_scalar_mut(-mean);
    }
    m
}

/// Sine/cosine reference `2·n_harmonics × n_samples` for frequency `f`.
pub fn cca_reference(f: f64, n_harmonics: usize, fs: f64, n_samples: usize) -> Result<DMatrix<f64>> {
    if n_harmonics == 0 {
        return Err(invalid("n_harmonics must be at least 1"));
    }
    if n_harmonics as f64 * f >= fs / 2.0 {
        return Err(invalid(format!(
            "reference harmonic {n_harmonics}×{f} Hz reaches the Nyquist rate {} Hz",
            fs / 2.0
        )));
    }
    Ok(DMatrix::from_fn(2 * n_harmonics, n_samples, |r, i| {
        let w = TAU * (r / 2 + 1) as f64 * f * i as f64 / fs;
        if r % 2 == 0 {
            w.sin()
        } else {
            w.cos()
        }
    }))
}

/// Whitening factor for the row space of `x` (centered rows).
fn whitener(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    inverse_sqrt_psd(&(x * x.transpose()), CCA_FLOOR)
}

/// Largest canonical correlation between the rows of `x` and `y`.
pub fn max_canonical_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(shape("canonical correlation needs equal sample counts"));
    }
    let (x, y) = (centered(x.clone()), centered(y.clone()));
    let wy = whitener(&y)?;
    corr_with(&x, &y, &wy)
}

fn corr_with(x: &DMatrix<f64>, y: &DMatrix<f64>, wy: &DMatrix<f64>) -> Result<f64> {
    if x.amax() == 0.0 {
        return Ok(0.0);
    }
    let wx = whitener(x)?;
    let k = wx * (x * y.transpose()) * wy;
    let s = k.singular_values();
    Ok(s.max().min(1.0))
}

/// Training-free classification of banded trials against the stimulus grid.
pub fn fbcca_classify(epochs: &EpochSet, spec: &StimulusSpec, params: FbccaParams) -> Result<Vec<usize>> {
    let scores = fbcca_scores(epochs, spec, params)?;
    let m = spec.num_targets();
    Ok(crate::nnet::argmax_rows(&scores, m))
}

/// `trials × targets` weighted sums of squared canonical correlations.
pub fn fbcca_scores(epochs: &EpochSet, spec: &StimulusSpec, params: FbccaParams) -> Result<Vec<f64>> {
    if epochs.stage() == Stage::Raw {
        return Err(invalid("fbcca expects filter-banked epochs"));
    }
    let [n, nb, nc, np] = epochs.dims();
    let fs = epochs.fs();
    let refs: Vec<(DMatrix<f64>, DMatrix<f64>)> = spec
        .base_freqs
        .iter()
        .map(|&f| {
            let y = centered(cca_reference(f, params.n_harmonics, fs, np)?);
            let w = whitener(&y)?;
            Ok((y, w))
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = (1..=nb).map(|b| (b as f64).powf(-params.a) + params.offset).collect();
    let m = spec.num_targets();
    let mut out = vec![0.0; n * m];
    for t in 0..n {
        let trial = epochs.trial(t);
        for (b, w) in weights.iter().enumerate() {
            let x = centered(DMatrix::from_row_slice(nc, np, &trial[b * nc * np..(b + 1) * nc * np]));
            for (k, (y, wy)) in refs.iter().enumerate() {
                let rho = corr_with(&x, y, wy)?;
                out[t * m + k] += w * rho * rho;
            }
        }
    }
    Ok(out)
}

/// Labels of a held-out subject, usable only for scoring.
#[derive(Debug)]
pub struct SealedLabels {
    labels: Vec<usize>,
}

impl SealedLabels {
    /// Split a labeled set into an unlabeled copy and the sealed labels.
    pub fn seal(epochs: EpochSet) -> Result<(EpochSet, SealedLabels)> {
        let (unlabeled, labels) = epochs.split_labels();
        let labels = labels.ok_or_else(|| invalid(format!("{} has no labels to seal", unlabeled.subject_id())))?;
        Ok((unlabeled, SealedLabels { labels }))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn score(&self, predictions: &[usize]) -> Result<f64> {
        accuracy(predictions, &self.labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Fbcca,
    SourceOnly,
    PureSelftrain,
    CsstFull,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Fbcca => "fbcca",
            Pipeline::SourceOnly => "source_only",
            Pipeline::PureSelftrain => "pure_selftrain",
            Pipeline::CsstFull => "csst_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fbcca" => Pipeline::Fbcca,
            "source_only" => Pipeline::SourceOnly,
            "pure_selftrain" => Pipeline::PureSelftrain,
            "csst_full" => Pipeline::CsstFull,
            _ => {
                return Err(invalid(format!(
                    "unknown pipeline {s:?} (fbcca, source_only, pure_selftrain, csst_full)"
                )))
            }
        })
    }
}

/// Component switches. `baseline` replaces the filter-bank alignment with a
/// comparison normalisation when set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AblationFlags {
    pub fbea: bool,
    pub ptal: bool,
    pub dest: bool,
    pub tfa_cl: bool,
    pub baseline: Option<BaselineMode>,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        fbea: true,
        ptal: true,
        dest: true,
        tfa_cl: true,
        baseline: None,
    };

    /// Flags actually honoured by `pipeline`.
    pub fn effective(self, pipeline: Pipeline) -> Self {
        match pipeline {
            Pipeline::Fbcca => Self::default(),
            Pipeline::SourceOnly | Pipeline::PureSelftrain => Self {
                ptal: false,
                dest: false,
                tfa_cl: false,
                ..self
            },
            Pipeline::CsstFull => self,
        }
    }

    /// Short label such as `FBEA+PTAL`; `-` when everything is off.
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        match self.baseline {
            Some(BaselineMode::ChannelNorm) => parts.push("channel_norm"),
            Some(BaselineMode::TrialNorm) => parts.push("trial_norm"),
            Some(BaselineMode::ChannelEuclid) => parts.push("channel_euclid"),
            None if self.fbea => parts.push("FBEA"),
            None => {}
        }
        for (on, name) in [(self.ptal, "PTAL"), (self.dest, "DEST"), (self.tfa_cl, "TFA-CL")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "-".into()
        } else {
            parts.join("+")
        }
    }
}

/// Everything a LOSO run needs besides the data and training config.
#[derive(Clone, Debug, PartialEq)]
pub struct LosoSetup {
    pub spec: StimulusSpec,
    pub gaze_time: f64,
    pub shift_time: f64,
    pub fbcca: FbccaParams,
}

impl LosoSetup {
    pub fn new(spec: StimulusSpec, gaze_time: f64) -> Self {
        Self {
            spec,
            gaze_time,
            shift_time: 0.5,
            fbcca: FbccaParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub subject_id: String,
    pub accuracy: f64,
    pub itr: f64,
    pub n_trials: usize,
    /// target accuracy right after stage 1, for trained pipelines
    pub stage1_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub per_fold: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub mean_itr: f64,
    pub stderr_itr: f64,
    pub mean_stage1_accuracy: Option<f64>,
    pub n_classes: usize,
    pub gaze_time: f64,
    pub shift_time: f64,
    pub fingerprint: String,
}

/// Mean and standard error (sample std over `√n`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub const REPORT_HEADER: &str =
    "method,subject_id,window_length,accuracy,itr,n_trials,stage1_accuracy,fingerprint";
pub const PLOT_HEADER: &str = "method,window_length,metric,mean,stderr";

impl MetricsReport {
    pub fn from_folds(
        method: impl Into<String>,
        per_fold: Vec<FoldResult>,
        n_classes: usize,
        gaze_time: f64,
        shift_time: f64,
        fingerprint: String,
    ) -> Self {
        let acc: Vec<f64> = per_fold.iter().map(|f| f.accuracy).collect();
        let itrs: Vec<f64> = per_fold.iter().map(|f| f.itr).collect();
        let (mean_accuracy, stderr_accuracy) = mean_stderr(&acc);
        let (mean_itr, stderr_itr) = mean_stderr(&itrs);
        let s1: Option<Vec<f64>> = per_fold.iter().map(|f| f.stage1_accuracy).collect();
        Self {
            method: method.into(),
            mean_stage1_accuracy: s1.map(|v| mean_stderr(&v).0),
            per_fold,
            mean_accuracy,
            stderr_accuracy,
            mean_itr,
            stderr_itr,
            n_classes,
            gaze_time,
            shift_time,
            fingerprint,
        }
    }

    /// Fold rows followed by `mean` and `stderr` rows, without a header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for f in &self.per_fold {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{},{},{}",
                self.method,
                f.subject_id,
                self.gaze_time,
                f.accuracy,
                f.itr,
                f.n_trials,
                fmt_opt(f.stage1_accuracy),
                self.fingerprint
            );
        }
        let total: usize = self.per_fold.iter().map(|f| f.n_trials).sum();
        let s1: Option<Vec<f64>> = self.per_fold.iter().map(|f| f.stage1_accuracy).collect();
        let s1_err = s1.as_ref().map(|v| mean_stderr(v).1);
        let _ = writeln!(
            s,
            "{},mean,{},{:.6},{:.6},{},{},{}",
            self.method,
            self.gaze_time,
            self.mean_accuracy,
            self.mean_itr,
            total,
            fmt_opt(self.mean_stage1_accuracy),
            self.fingerprint
        );
        let _ = writeln!(
            s,
            "{},stderr,{},{:.6},{:.6},{},{},{}",
            self.method,
            self.gaze_time,
            self.stderr_accuracy,
            self.stderr_itr,
            total,
            fmt_opt(s1_err),
            self.fingerprint
        );
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}", self.csv_rows())
    }

    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            method: self.method.clone(),
            window_length: self.gaze_time,
            mean_accuracy: self.mean_accuracy,
            stderr_accuracy: self.stderr_accuracy,
            mean_itr: self.mean_itr,
            stderr_itr: self.stderr_itr,
        }
    }

    pub fn plot_rows(&self) -> String {
        self.aggregate().plot_rows()
    }
}

/// Report parsed back from CSV rows: per-method aggregate rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub window_length: f64,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub mean_itr: f64,
    pub stderr_itr: f64,
}

impl Aggregate {
    /// Accuracy and ITR rows for accuracy/ITR-versus-window plots.
    pub fn plot_rows(&self) -> String {
        format!(
            "{m},{w},accuracy,{:.6},{:.6}\n{m},{w},itr,{:.6},{:.6}\n",
            self.mean_accuracy,
            self.stderr_accuracy,
            self.mean_itr,
            self.stderr_itr,
            m = self.method,
            w = self.window_length
        )
    }
}

/// Extract the `mean`/`stderr` rows of report CSV text.
pub fn parse_report_csv(text: &str) -> Result<Vec<Aggregate>> {
    let mut out: Vec<Aggregate> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line == REPORT_HEADER {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Format(format!("line {}: expected 8 columns, got {}", ln + 1, cols.len())));
        }
        let num = |i: usize| {
            cols[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number {:?}", ln + 1, cols[i])))
        };
        let (window, acc, itr) = (num(2)?, num(3)?, num(4)?);
        match cols[1] {
            "mean" => out.push(Aggregate {
                method: cols[0].to_string(),
                window_length: window,
                mean_accuracy: acc,
                stderr_accuracy: 0.0,
                mean_itr: itr,
                stderr_itr: 0.0,
            }),
            "stderr" => {
                let a = out
                    .iter_mut()
                    .rev()
                    .find(|a| a.method == cols[0] && a.window_length == window)
                    .ok_or_else(|| Error::Format(format!("line {}: stderr row before mean row", ln + 1)))?;
                a.stderr_accuracy = acc;
                a.stderr_itr = itr;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Fold-level parallelism cap from `SSVEP_ADAPT_THREADS`.
pub fn thread_cap() -> Option<usize> {
    std::env::var("SSVEP_ADAPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn check_cohort(datasets: &[EpochSet]) -> Result<()> {
    if datasets.len() < 2 {
        return Err(invalid("leave-one-subject-out needs at least two subjects"));
    }
    let first = &datasets[0];
    for d in datasets {
        if d.dims()[1..] != first.dims()[1..] || d.fs() != first.fs() {
            return Err(shape(format!(
                "subject {} has trials {:?} at {} Hz, expected {:?} at {} Hz",
                d.subject_id(),
                &d.dims()[1..],
                d.fs(),
                &first.dims()[1..],
                first.fs()
            )));
        }
        if d.labels().is_none() {
            return Err(invalid(format!("subject {} is unlabeled", d.subject_id())));
        }
        if d.stage() == Stage::Raw {
            return Err(invalid("leave-one-subject-out expects filter-banked epochs"));
        }
    }
    Ok(())
}

/// Normalise one subject's banded trials according to `flags`.
pub fn normalize_subject(set: &EpochSet, flags: AblationFlags) -> Result<EpochSet> {
    match flags.baseline {
        Some(mode) => baseline_normalize(set, mode),
        None if flags.fbea => apply_alignment(set, &compute_reference(set)?),
        None => Ok(set.clone()),
    }
}

fn pooled_alignment(sets: &[&EpochSet]) -> Result<Vec<EpochSet>> {
    let pooled = EpochSet::concat(sets, "pooled")?;
    let r = compute_reference(&pooled)?;
    sets.iter().map(|s| apply_alignment(s, &r)).collect()
}

/// Source (labeled) and target (unlabeled) sets of one fold.
pub fn fold_data(
    datasets: &[EpochSet],
    held_out: usize,
    flags: AblationFlags,
    cfg: &TrainConfig,
) -> Result<(EpochSet, EpochSet, SealedLabels)> {
    let sources: Vec<&EpochSet> = datasets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != held_out)
        .map(|(_, d)| d)
        .collect();
    let normed: Vec<EpochSet> = if flags.fbea && flags.baseline.is_none() && !cfg.per_subject_alignment {
        pooled_alignment(&sources)?
    } else {
        sources.iter().map(|s| normalize_subject(s, flags)).collect::<Result<_>>()?
    };
    let refs: Vec<&EpochSet> = normed.iter().collect();
    let source = EpochSet::concat(&refs, "source")?;
    let (target, sealed) = SealedLabels::seal(datasets[held_out].clone())?;
    let target = normalize_subject(&target, flags)?;
    Ok((source, target, sealed))
}

/// Parameters after one fold's training and the stage-1 parameters.
pub struct FoldModels {
    pub stage1: ModelParams,
    pub fin: ModelParams,
}

/// Train a fold's models under `pipeline` with `flags` already made effective.
pub fn train_fold(
    source: &EpochSet,
    target: &EpochSet,
    n_classes: usize,
    cfg: &TrainConfig,
    pipeline: Pipeline,
    flags: AblationFlags,
) -> Result<FoldModels> {
    let arch = architecture_for(source, n_classes, cfg.layers);
    let Pretrained { params, .. } = pretrain(&arch, source, flags.ptal.then_some(target), cfg)?;
    if pipeline == Pipeline::SourceOnly {
        return Ok(FoldModels {
            fin: params.clone(),
            stage1: params,
        });
    }
    let mode = SelfTrainMode {
        ensemble: flags.dest,
        contrastive: flags.tfa_cl,
    };
    let st = selftrain(&params, target, cfg, mode, None, None)?;
    Ok(FoldModels {
        fin: st.scoring(cfg.use_teacher).clone(),
        stage1: params,
    })
}

fn run_fold(
    datasets: &[EpochSet],
    held_out: usize,
    setup: &LosoSetup,
    cfg: &TrainConfig,
    pipeline: Pipeline,
    flags: AblationFlags,
) -> Result<FoldResult> {
    let m = setup.spec.num_targets();
    let subject_id = datasets[held_out].subject_id().to_string();
    let (acc, stage1, n) = if pipeline == Pipeline::Fbcca {
        let (target, sealed) = SealedLabels::seal(datasets[held_out].clone())?;
        let preds = fbcca_classify(&target, &setup.spec, setup.fbcca)?;
        (sealed.score(&preds)?, None, sealed.len())
    } else {
        let (source, target, sealed) = fold_data(datasets, held_out, flags, cfg)?;
        let fold_cfg = TrainConfig {
            seed: seed::derive(cfg.seed, &[seed::tag("fold"), seed::tag(&subject_id)]),
            ..cfg.clone()
        };
        let models = train_fold(&source, &target, m, &fold_cfg, pipeline, flags)?;
        let s1 = sealed.score(&predict(&models.stage1, target.data())?)?;
        let fin = sealed.score(&predict(&models.fin, target.data())?)?;
        (fin, Some(s1), sealed.len())
    };
    Ok(FoldResult {
        itr: itr(acc, m, setup.gaze_time, setup.shift_time)?,
        subject_id,
        accuracy: acc,
        n_trials: n,
        stage1_accuracy: stage1,
    })
}

fn fingerprint(setup: &LosoSetup, cfg: &TrainConfig, pipeline: Pipeline, flags: AblationFlags) -> String {
    let text = if pipeline == Pipeline::Fbcca {
        format!("{pipeline:?}|{setup:?}")
    } else {
        format!("{pipeline:?}|{flags:?}|{setup:?}|{cfg:?}")
    };
    format!("{:016x}", seed::tag(&text))
}

/// Run `f` on a pool capped by `SSVEP_ADAPT_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Leave-one-subject-out evaluation, one fold per subject in input order.
pub fn loso_run(
    datasets: &[EpochSet],
    setup: &LosoSetup,
    cfg: &TrainConfig,
    pipeline: Pipeline,
    flags: AblationFlags,
) -> Result<MetricsReport> {
    let method = match pipeline {
        Pipeline::CsstFull => format!("{}[{}]", pipeline.name(), flags.label()),
        _ => pipeline.name().to_string(),
    };
    loso_named(datasets, setup, cfg, pipeline, flags, method)
}

fn loso_named(
    datasets: &[EpochSet],
    setup: &LosoSetup,
    cfg: &TrainConfig,
    pipeline: Pipeline,
    flags: AblationFlags,
    method: String,
) -> Result<MetricsReport> {
    check_cohort(datasets)?;
    let m = setup.spec.num_targets();
    if pipeline != Pipeline::Fbcca {
        cfg.validate(m)?;
    }
    for d in datasets {
        if d.labels().is_some_and(|l| l.iter().any(|&c| c >= m)) {
            return Err(invalid(format!("subject {} has labels beyond {m} targets", d.subject_id())));
        }
    }
    let flags = flags.effective(pipeline);
    let folds: Vec<FoldResult> = with_thread_cap(|| {
        (0..datasets.len())
            .into_par_iter()
            .map(|i| run_fold(datasets, i, setup, cfg, pipeline, flags))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MetricsReport::from_folds(
        method,
        folds,
        m,
        setup.gaze_time,
        setup.shift_time,
        fingerprint(setup, cfg, pipeline, flags),
    ))
}

/// The six component configurations of the ablation table.
pub fn component_grid() -> Vec<AblationFlags> {
    let f = |fbea, ptal, dest, tfa_cl| AblationFlags {
        fbea,
        ptal,
        dest,
        tfa_cl,
        baseline: None,
    };
    vec![
        f(false, false, false, false),
        f(true, false, false, false),
        f(false, true, false, false),
        f(false, true, true, false),
        f(true, true, true, false),
        f(true, true, true, true),
    ]
}

/// Full training with each alignment strategy swapped in.
pub fn alignment_grid() -> Vec<AblationFlags> {
    let none = AblationFlags {
        fbea: false,
        ..AblationFlags::FULL
    };
    let mut out = vec![none];
    for b in [BaselineMode::ChannelNorm, BaselineMode::TrialNorm, BaselineMode::ChannelEuclid] {
        out.push(AblationFlags {
            baseline: Some(b),
            ..none
        });
    }
    out.push(AblationFlags::FULL);
    out
}

/// One full-pipeline report per flag set, named by the flag label.
pub fn run_grid(
    datasets: &[EpochSet],
    setup: &LosoSetup,
    cfg: &TrainConfig,
    grid: &[AblationFlags],
) -> Result<Vec<MetricsReport>> {
    grid.iter()
        .map(|&f| loso_named(datasets, setup, cfg, Pipeline::CsstFull, f, f.label()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 3]).unwrap(), 0.75);
        let labels: Vec<usize> = (0..8).collect();
        let shifted: Vec<usize> = labels.iter().map(|l| (l + 1) % 8).collect();
        assert_eq!(accuracy(&shifted, &labels).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn itr_reference_values() {
        assert_eq!(itr(1.0 / 40.0, 40, 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(itr(0.125, 8, 1.0, 0.5).unwrap(), 0.0);
        assert!((itr(1.0, 40, 1.0, 0.5).unwrap() - 212.877).abs() < 1e-3);
        assert!((itr(0.948, 40, 1.0, 0.5).unwrap() - 190.09).abs() < 1e-2);
        assert_eq!(itr(0.0, 8, 1.0, 0.5).unwrap(), 0.0);
        assert!(itr(0.5, 8, 0.0, 0.0).is_err());
        assert!(itr(0.5, 1, 1.0, 0.0).is_err());
    }

    #[test]
    fn self_correlation_is_one() {
        let y = cca_reference(10.0, 1, 250.0, 250).unwrap();
        let rho = max_canonical_correlation(&y, &y).unwrap();
        assert!((rho - 1.0).abs() < 1e-9, "{rho}");
        assert!(cca_reference(30.0, 5, 250.0, 250).is_err());
    }

    #[test]
    fn stderr_uses_sample_std() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_labels() {
        let labels: Vec<String> = component_grid().iter().map(|f| f.label()).collect();
        assert_eq!(labels, ["-", "FBEA", "PTAL", "PTAL+DEST", "FBEA+PTAL+DEST", "FBEA+PTAL+DEST+TFA-CL"]);
        assert_eq!(alignment_grid().len(), 5);
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in [Pipeline::Fbcca, Pipeline::SourceOnly, Pipeline::PureSelftrain, Pipeline::CsstFull] {
            assert_eq!(Pipeline::parse(p.name()).unwrap(), p);
        }
        assert!(Pipeline::parse("x").is_err());
    }
}
