//! Two-stage cross-subject training: adversarial pre-training on labeled
//! source plus unlabeled target trials, followed by mean-teacher
//! self-training on the target with multi-view pseudo-label fusion and a
//! supervised contrastive term.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, Error, Result};
use crate::nnet::{
    LayerSizes,
    adam_step, adversarial_loss, argmax_rows, cross_entropy, infer, input, supcon_loss, AdamConfig,
    AdamState, Architecture, ModelParams, ParamGrads, Tape, Targets,
};
use crate::preprocess::EpochSet;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// stage-1 learning rate
    pub lr: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub pseudo_threshold: f64,
    pub ema_alpha: f64,
    pub tau: f64,
    pub lambda_con: f64,
    pub lambda_grl: f64,
    pub eps_fusion: f64,
    /// Maximum circular shift in samples; `None` means a tenth of the window.
    pub aug_time_shift_max: Option<usize>,
    /// Noise std relative to the std of each trial.
    pub aug_noise_sigma: f64,
    pub seed: u64,
    /// Align each source subject with its own reference instead of a pooled one.
    pub per_subject_alignment: bool,
    /// Fuse one-hot teacher votes instead of probability rows.
    pub one_hot_fusion: bool,
    /// Score the teacher instead of the student after self-training.
    pub use_teacher: bool,
    pub layers: LayerSizes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            lr: 1e-4,
            lr_stage2: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs_stage1: 500,
            epochs_stage2: 500,
            pseudo_threshold: 0.9,
            ema_alpha: 0.999,
            tau: 0.5,
            lambda_con: 0.01,
            lambda_grl: 1.0,
            eps_fusion: 1e-8,
            aug_time_shift_max: None,
            aug_noise_sigma: 0.2,
            seed: 0,
            per_subject_alignment: false,
            one_hot_fusion: false,
            use_teacher: false,
            layers: LayerSizes::default(),
        }
    }

    /// Small budgets for synthetic experiments on a single core.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs_stage1: 50,
            epochs_stage2: 30,
            ..Self::paper()
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn time_shift_max(&self, n_samples: usize) -> usize {
        self.aug_time_shift_max
            .unwrap_or_else(|| (n_samples as f64 * 0.1).round() as usize)
    }

    /// Check every field against its allowed range for `n_classes` targets.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let lo = 1.0 / n_classes.max(1) as f64;
        if !(self.pseudo_threshold > lo && self.pseudo_threshold <= 1.0) {
            return Err(invalid(format!(
                "pseudo_threshold {} outside (1/M, 1] = ({lo}, 1]",
                self.pseudo_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(invalid(format!("ema_alpha {} outside [0, 1]", self.ema_alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_con >= 0.0) {
            return Err(invalid(format!("lambda_con must be >= 0, got {}", self.lambda_con)));
        }
        if !(self.lr > 0.0) || !(self.lr_stage2 > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rates must be > 0 and weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(invalid("adam betas must lie in [0, 1) and eps must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if !(self.eps_fusion > 0.0) || !(self.aug_noise_sigma >= 0.0) || !(self.lambda_grl >= 0.0) {
            return Err(invalid("eps_fusion must be > 0; aug_noise_sigma and lambda_grl >= 0"));
        }
        Ok(())
    }
}

fn dims_of(set: &EpochSet) -> [usize; 4] {
    set.dims()
}

/// Circularly shift each trial of a `[n, bands, channels, samples]` buffer
/// by its own offset (positive delays the signal).
pub fn circular_shift(data: &[f64], dims: [usize; 4], shifts: &[isize]) -> Result<Vec<f64>> {
    let [n, nb, nc, np] = dims;
    if data.len() != n * nb * nc * np || shifts.len() != n {
        return Err(shape("shift buffer does not match dims"));
    }
    let mut out = vec![0.0; data.len()];
    for (t, &s) in shifts.iter().enumerate() {
        let s = s.rem_euclid(np as isize) as usize;
        for r in 0..nb * nc {
            let off = (t * nb * nc + r) * np;
            let src = &data[off..off + np];
            let dst = &mut out[off..off + np];
            dst[s..].copy_from_slice(&src[..np - s]);
            dst[..s].copy_from_slice(&src[np - s..]);
        }
    }
    Ok(out)
}

fn draw_shifts(n: usize, max_shift: usize, seed_value: u64) -> Vec<isize> {
    let mut rng = seed::rng(seed_value, &[seed::tag("time_shift")]);
    let m = max_shift as isize;
    (0..n).map(|_| rng.gen_range(-m..=m)).collect()
}

fn shift_buffer(data: &[f64], dims: [usize; 4], max_shift: usize, seed_value: u64) -> Result<Vec<f64>> {
    if max_shift >= dims[3] {
        return Err(invalid(format!(
            "max_shift {max_shift} must be below the window length {}",
            dims[3]
        )));
    }
    circular_shift(data, dims, &draw_shifts(dims[0], max_shift, seed_value))
}

fn noise_buffer(data: &[f64], dims: [usize; 4], rel_sigma: f64, seed_value: u64) -> Result<Vec<f64>> {
    if !(rel_sigma >= 0.0) {
        return Err(invalid(format!("rel_sigma must be >= 0, got {rel_sigma}")));
    }
    let per = dims[1] * dims[2] * dims[3];
    let mut rng = seed::rng(seed_value, &[seed::tag("noise")]);
    let mut out = data.to_vec();
    if rel_sigma == 0.0 {
        return Ok(out);
    }
    for trial in out.chunks_mut(per) {
        let n = trial.len() as f64;
        let mean = trial.iter().sum::<f64>() / n;
        let sd = (trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = rel_sigma * sd;
        for v in trial.iter_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Circular time shift drawn uniformly from `-max_shift..=max_shift` per trial.
pub fn augment_time_shift(x: &EpochSet, max_shift: usize, seed_value: u64) -> Result<EpochSet> {
    let d = shift_buffer(x.data(), dims_of(x), max_shift, seed_value)?;
    x.with_data(d, x.dims(), x.stage())
}

/// Additive Gaussian noise with std `rel_sigma · std(trial)`.
pub fn augment_noise(x: &EpochSet, rel_sigma: f64, seed_value: u64) -> Result<EpochSet> {
    let d = noise_buffer(x.data(), dims_of(x), rel_sigma, seed_value)?;
    x.with_data(d, x.dims(), x.stage())
}

/// Per-trial `trials × values` rows of `set` at `idx`.
fn gather(set: &EpochSet, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * set.trial_len());
    for &i in idx {
        out.extend_from_slice(set.trial(i));
    }
    out
}

/// Loss value, named components and parameter gradients of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub cls: f64,
    /// adversarial term in stage 1, contrastive term in stage 2
    pub aux: f64,
    pub grads: ParamGrads,
}

/// Stage-1 loss and gradients. With `target` the domain head is trained on
/// reversed features of both batches; without it this is plain supervised
/// training.
pub fn pretrain_step(
    params: &ModelParams,
    source: &[f64],
    labels: &[usize],
    target: Option<&[f64]>,
    lambda_grl: f64,
    dropout_seed: Option<u64>,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let xs = input(&mut tape, &params.arch, source.to_vec())?;
    let dseed = |k: u64| dropout_seed.map(|s| seed::derive(s, &[k]));
    let fs = net.forward_g(&mut tape, xs, dseed(0))?;
    let logits = net.forward_h(&mut tape, fs)?;
    let cls = cross_entropy(&mut tape, logits, Targets::Hard(labels))?;
    let (loss, aux) = match target {
        Some(t) => {
            let xt = input(&mut tape, &params.arch, t.to_vec())?;
            let ft = net.forward_g(&mut tape, xt, dseed(1))?;
            let rs = tape.grl(fs, lambda_grl)?;
            let rt = tape.grl(ft, lambda_grl)?;
            let ds = net.forward_d(&mut tape, rs)?;
            let dt = net.forward_d(&mut tape, rt)?;
            let adv = adversarial_loss(&mut tape, ds, dt)?;
            (tape.add(cls, adv)?, Some(adv))
        }
        None => (cls, None),
    };
    let g = tape.backward(loss)?;
    Ok(StepOutput {
        loss: tape.value(loss).item(),
        cls: tape.value(cls).item(),
        aux: aux.map_or(0.0, |a| tape.value(a).item()),
        grads: net.grads(&g),
    })
}

/// Stage-2 student loss and gradients on accepted trials. `views[0]` is the
/// original view; cross-entropy uses it alone while the contrastive term
/// spans every view, with each trial's pseudo-label as its class.
pub fn selftrain_step(
    params: &ModelParams,
    views: &[Vec<f64>],
    pseudo_labels: &[usize],
    lambda_con: f64,
    tau: f64,
    dropout_seed: Option<u64>,
) -> Result<StepOutput> {
    if views.is_empty() {
        return Err(invalid("self-training needs at least one view"));
    }
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let mut feats = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let x = input(&mut tape, &params.arch, v.clone())?;
        feats.push(net.forward_g(&mut tape, x, dropout_seed.map(|s| seed::derive(s, &[k as u64])))?);
    }
    let logits = net.forward_h(&mut tape, feats[0])?;
    let cls = cross_entropy(&mut tape, logits, Targets::Hard(pseudo_labels))?;
    let mut loss = cls;
    let mut aux = 0.0;
    if lambda_con > 0.0 && views.len() > 1 {
        let mut zs = Vec::with_capacity(feats.len());
        for &f in &feats {
            zs.push(net.forward_p(&mut tape, f)?);
        }
        let z = tape.concat_rows(&zs)?;
        let assign: Vec<usize> = (0..views.len()).flat_map(|_| pseudo_labels.iter().copied()).collect();
        let con = supcon_loss(&mut tape, z, &assign, tau)?;
        aux = tape.value(con).item();
        let scaled = tape.scale(con, lambda_con)?;
        loss = tape.add(cls, scaled)?;
    }
    let g = tape.backward(loss)?;
    Ok(StepOutput {
        loss: tape.value(loss).item(),
        cls: tape.value(cls).item(),
        aux,
        grads: net.grads(&g),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    pub epoch: usize,
    pub cls: f64,
    pub adv: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    pub log: Vec<PretrainLog>,
}

fn check_pair(source: &EpochSet, target: &EpochSet) -> Result<()> {
    if source.dims()[1..] != target.dims()[1..] {
        return Err(shape(format!(
            "source trials {:?} and target trials {:?} differ",
            &source.dims()[1..],
            &target.dims()[1..]
        )));
    }
    Ok(())
}

/// Architecture matching the trial shape of `set`, with an input scale
/// that brings the training data to unit RMS.
pub fn architecture_for(set: &EpochSet, n_classes: usize, layers: LayerSizes) -> Architecture {
    let d = set.data();
    let rms = (d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).sqrt();
    Architecture {
        input_scale: if rms > 0.0 { 1.0 / rms } else { 1.0 },
        ..Architecture::with_layers(set.n_bands(), set.n_channels(), set.n_samples(), n_classes, layers)
    }
}

fn divergence(stage: &'static str, epoch: usize, what: &str, v: f64) -> Error {
    Error::Divergence {
        stage,
        epoch,
        detail: format!("{what} loss became {v}"),
    }
}

/// Stage 1. An epoch is one shuffled pass over the source trials; each
/// source batch is paired with a batch of target trials drawn from a
/// per-epoch permutation. `target = None` gives source-only training.
pub fn pretrain(
    arch: &Architecture,
    source: &EpochSet,
    target: Option<&EpochSet>,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    cfg.validate(arch.n_classes)?;
    arch.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| invalid("source epochs must be labeled"))?;
    if labels.iter().any(|&l| l >= arch.n_classes) {
        return Err(invalid("source label out of range"));
    }
    if source.dims()[1..] != [arch.n_bands, arch.n_channels, arch.n_samples] {
        return Err(shape("source trials do not match the architecture"));
    }
    if let Some(t) = target {
        check_pair(source, t)?;
        if t.n_trials() == 0 {
            return Err(invalid("target set is empty"));
        }
    }
    if source.n_trials() == 0 {
        return Err(invalid("source set is empty"));
    }
    let stage_tag = seed::tag("pretrain");
    let mut params = ModelParams::init(arch.clone(), seed::derive(cfg.seed, &[stage_tag, seed::tag("init")]))?;
    let mut state = AdamState::new(&params);
    let adam = cfg.adam(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs_stage1);
    let mut order: Vec<usize> = (0..source.n_trials()).collect();
    let mut torder: Vec<usize> = target.map_or(Vec::new(), |t| (0..t.n_trials()).collect());
    for epoch in 0..cfg.epochs_stage1 {
        let mut rng = seed::rng(cfg.seed, &[stage_tag, epoch as u64]);
        order.shuffle(&mut rng);
        torder.shuffle(&mut rng);
        let (mut cls, mut adv, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let mut tpos = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xs = gather(source, idx);
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let xt = target.map(|t| {
                let tidx: Vec<usize> = (0..idx.len()).map(|k| torder[(tpos + k) % torder.len()]).collect();
                tpos += idx.len();
                gather(t, &tidx)
            });
            let dseed = seed::derive(cfg.seed, &[stage_tag, epoch as u64, b as u64, seed::tag("dropout")]);
            let out = pretrain_step(&params, &xs, &ys, xt.as_deref(), cfg.lambda_grl, Some(dseed))?;
            if !out.loss.is_finite() {
                return Err(divergence("pretrain", epoch, "total", out.loss));
            }
            adam_step(&mut params, &out.grads, &mut state, &adam)?;
            cls += out.cls;
            adv += out.aux;
            total += out.loss;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        log.push(PretrainLog {
            epoch,
            cls: cls / s,
            adv: adv / s,
            total: total / s,
        });
    }
    if params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(divergence("pretrain", cfg.epochs_stage1, "parameter", f64::NAN));
    }
    Ok(Pretrained { params, log })
}

/// Stage 1 with the adversarial domain term.
pub fn pretrain_ptal(source: &EpochSet, target: &EpochSet, cfg: &TrainConfig, n_classes: usize) -> Result<Pretrained> {
    if target.labels().is_some() {
        return Err(invalid("target epochs must be unlabeled during training"));
    }
    pretrain(&architecture_for(source, n_classes, cfg.layers), source, Some(target), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    /// `rows × M` fused probabilities
    pub fused_probs: Vec<f64>,
    pub hard_labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub accept_mask: Vec<bool>,
    /// `rows × views` fusion weights
    pub fusion_weights: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn accepted(&self) -> Vec<usize> {
        (0..self.accept_mask.len()).filter(|&i| self.accept_mask[i]).collect()
    }
}

/// Weight each view by `exp(cos(z_k, z_0))` normalised with `eps` in the
/// denominator, fuse the probability rows, and accept rows whose top fused
/// probability reaches `threshold`. Projection rows are assumed unit length.
pub fn fuse_pseudo_labels(
    probs: &[&[f64]],
    projections: &[&[f64]],
    n_classes: usize,
    eps: f64,
    threshold: f64,
) -> Result<PseudoLabelBatch> {
    let k = probs.len();
    if k == 0 || projections.len() != k {
        return Err(invalid(format!(
            "{} probability views but {} projection views",
            k,
            projections.len()
        )));
    }
    if n_classes == 0 || probs[0].len() % n_classes != 0 {
        return Err(shape("probability rows do not match the class count"));
    }
    let rows = probs[0].len() / n_classes;
    if probs.iter().any(|p| p.len() != rows * n_classes) {
        return Err(shape("views have different row counts"));
    }
    if rows == 0 {
        return Ok(PseudoLabelBatch {
            fused_probs: vec![],
            hard_labels: vec![],
            confidence: vec![],
            accept_mask: vec![],
            fusion_weights: vec![],
        });
    }
    let d = projections[0].len() / rows;
    if d == 0 || projections.iter().any(|z| z.len() != rows * d) {
        return Err(shape("projection views do not match the row count"));
    }
    let mut fused = vec![0.0; rows * n_classes];
    let mut weights = vec![0.0; rows * k];
    for r in 0..rows {
        let z0 = &projections[0][r * d..(r + 1) * d];
        let e: Vec<f64> = projections
            .iter()
            .map(|z| {
                let c: f64 = z[r * d..(r + 1) * d].iter().zip(z0).map(|(a, b)| a * b).sum();
                c.exp()
            })
            .collect();
        let denom = e.iter().sum::<f64>() + eps;
        for v in 0..k {
            let w = e[v] / denom;
            weights[r * k + v] = w;
            let p = &probs[v][r * n_classes..(r + 1) * n_classes];
            for (f, q) in fused[r * n_classes..(r + 1) * n_classes].iter_mut().zip(p) {
                *f += w * q;
            }
        }
    }
    let hard_labels = argmax_rows(&fused, n_classes);
    let confidence: Vec<f64> = hard_labels
        .iter()
        .enumerate()
        .map(|(r, &c)| fused[r * n_classes + c])
        .collect();
    let accept_mask = confidence.iter().map(|&c| c >= threshold).collect();
    Ok(PseudoLabelBatch {
        fused_probs: fused,
        hard_labels,
        confidence,
        accept_mask,
        fusion_weights: weights,
    })
}

/// `teacher ← alpha·teacher + (1 − alpha)·student`, tensor by tensor.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    if !teacher.same_manifest(student) {
        return Err(shape("teacher and student manifests differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * *b;
        }
    }
    Ok(())
}

/// Which parts of self-training are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfTrainMode {
    /// mean teacher plus multi-view fusion; otherwise the current student
    /// labels the original view alone
    pub ensemble: bool,
    /// contrastive term over augmented views
    pub contrastive: bool,
}

impl SelfTrainMode {
    pub const FULL: Self = Self {
        ensemble: true,
        contrastive: true,
    };
    pub const PLAIN: Self = Self {
        ensemble: false,
        contrastive: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    BeforeStudentUpdate,
    AfterStudentUpdate,
    AfterEma,
}

/// Snapshot passed to a self-training observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub teacher_checksum: u64,
    pub student_checksum: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainLog {
    pub epoch: usize,
    pub cls: f64,
    pub con: f64,
    pub total: f64,
    pub accepted: usize,
    pub accept_rate: f64,
    /// accuracy of accepted pseudo-labels, only with oracle labels and at least one acceptance
    pub pseudo_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SelfTrained {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub log: Vec<SelfTrainLog>,
}

impl SelfTrained {
    /// Parameters used for scoring.
    pub fn scoring(&self, use_teacher: bool) -> &ModelParams {
        if use_teacher {
            &self.teacher
        } else {
            &self.student
        }
    }
}

/// Augmented views of one batch: original, time-shifted, noise-injected.
pub fn make_views(batch: &[f64], dims: [usize; 4], cfg: &TrainConfig, view_seed: u64) -> Result<Vec<Vec<f64>>> {
    let shifted = shift_buffer(batch, dims, cfg.time_shift_max(dims[3]), seed::derive(view_seed, &[1]))?;
    let noisy = noise_buffer(batch, dims, cfg.aug_noise_sigma, seed::derive(view_seed, &[2]))?;
    Ok(vec![batch.to_vec(), shifted, noisy])
}

fn one_hot(probs: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for (r, c) in argmax_rows(probs, m).into_iter().enumerate() {
        out[r * m + c] = 1.0;
    }
    out
}

/// Stage 2 with an optional observer and oracle labels (for logging only).
pub fn selftrain(
    init: &ModelParams,
    target: &EpochSet,
    cfg: &TrainConfig,
    mode: SelfTrainMode,
    oracle: Option<&[usize]>,
    mut observer: Option<&mut dyn FnMut(Event)>,
) -> Result<SelfTrained> {
    let arch = &init.arch;
    if target.dims()[1..] != [arch.n_bands, arch.n_channels, arch.n_samples] {
        return Err(shape("target trials do not match the architecture"));
    }
    if target.labels().is_some() {
        return Err(invalid("target epochs must be unlabeled during training"));
    }
    if let Some(o) = oracle {
        if o.len() != target.n_trials() {
            return Err(shape("oracle labels do not match the target set"));
        }
    }
    if !(cfg.tau > 0.0) || !(0.0..=1.0).contains(&cfg.ema_alpha) || cfg.batch_size == 0 {
        return Err(invalid("invalid self-training configuration"));
    }
    let m = arch.n_classes;
    let alpha = if mode.ensemble { cfg.ema_alpha } else { 0.0 };
    let lambda_con = if mode.contrastive { cfg.lambda_con } else { 0.0 };
    let multi_view = mode.ensemble || mode.contrastive;
    let stage_tag = seed::tag("selftrain");
    let mut teacher = init.clone();
    let mut student = init.clone();
    let mut state = AdamState::new(&student);
    let adam = cfg.adam(cfg.lr_stage2);
    let mut order: Vec<usize> = (0..target.n_trials()).collect();
    let mut log = Vec::with_capacity(cfg.epochs_stage2);
    let mut notify = |epoch, batch, phase, t: &ModelParams, s: &ModelParams| {
        if let Some(f) = observer.as_mut() {
            f(Event {
                epoch,
                batch,
                phase,
                teacher_checksum: t.checksum(),
                student_checksum: s.checksum(),
            });
        }
    };
    for epoch in 0..cfg.epochs_stage2 {
        let mut rng = seed::rng(cfg.seed, &[stage_tag, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut cls, mut con, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let (mut accepted, mut correct) = (0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(target, idx);
            let dims = [idx.len(), arch.n_bands, arch.n_channels, arch.n_samples];
            let view_seed = seed::derive(cfg.seed, &[stage_tag, epoch as u64, b as u64]);
            let views = if multi_view {
                make_views(&batch, dims, cfg, view_seed)?
            } else {
                vec![batch]
            };
            let labeler = if mode.ensemble { &teacher } else { &student };
            let pl = if mode.ensemble {
                let inf: Vec<_> = views
                    .iter()
                    .map(|v| infer(labeler, v.clone(), true))
                    .collect::<Result<_>>()?;
                let probs: Vec<Vec<f64>> = inf
                    .iter()
                    .map(|i| if cfg.one_hot_fusion { one_hot(&i.probs, m) } else { i.probs.clone() })
                    .collect();
                let pr: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
                let zs: Vec<&[f64]> = inf.iter().map(|i| i.projections.as_deref().unwrap_or(&[])).collect();
                fuse_pseudo_labels(&pr, &zs, m, cfg.eps_fusion, cfg.pseudo_threshold)?
            } else {
                let p = infer(labeler, views[0].clone(), false)?.probs;
                let hard = argmax_rows(&p, m);
                let confidence: Vec<f64> = hard.iter().enumerate().map(|(r, &c)| p[r * m + c]).collect();
                PseudoLabelBatch {
                    accept_mask: confidence.iter().map(|&c| c >= cfg.pseudo_threshold).collect(),
                    fusion_weights: vec![1.0; hard.len()],
                    fused_probs: p,
                    hard_labels: hard,
                    confidence,
                }
            };
            let keep = pl.accepted();
            if keep.is_empty() {
                continue;
            }
            accepted += keep.len();
            if let Some(o) = oracle {
                correct += keep.iter().filter(|&&r| pl.hard_labels[r] == o[idx[r]]).count();
            }
            let per = target.trial_len();
            let sub: Vec<Vec<f64>> = views
                .iter()
                .map(|v| keep.iter().flat_map(|&r| v[r * per..(r + 1) * per].iter().copied()).collect())
                .collect();
            let labels: Vec<usize> = keep.iter().map(|&r| pl.hard_labels[r]).collect();
            notify(epoch, b, Phase::BeforeStudentUpdate, &teacher, &student);
            let dseed = seed::derive(view_seed, &[seed::tag("dropout")]);
            let out = selftrain_step(&student, &sub, &labels, lambda_con, cfg.tau, Some(dseed))?;
            if !out.loss.is_finite() {
                return Err(divergence("selftrain", epoch, "total", out.loss));
            }
            adam_step(&mut student, &out.grads, &mut state, &adam)?;
            notify(epoch, b, Phase::AfterStudentUpdate, &teacher, &student);
            if mode.ensemble {
                ema_update(&mut teacher, &student, alpha)?;
            } else {
                teacher = student.clone();
            }
            notify(epoch, b, Phase::AfterEma, &teacher, &student);
            cls += out.cls;
            con += out.aux;
            total += out.loss;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        log.push(SelfTrainLog {
            epoch,
            cls: cls / s,
            con: con / s,
            total: total / s,
            accepted,
            accept_rate: accepted as f64 / target.n_trials().max(1) as f64,
            pseudo_accuracy: oracle.filter(|_| accepted > 0).map(|_| correct as f64 / accepted as f64),
        });
    }
    Ok(SelfTrained { student, teacher, log })
}

/// Full stage 2: mean teacher, multi-view fusion and contrastive term.
pub fn selftrain_dest(init: &ModelParams, target: &EpochSet, cfg: &TrainConfig) -> Result<SelfTrained> {
    selftrain(init, target, cfg, SelfTrainMode::FULL, None, None)
}
