//! Command-line front end: configuration, artifact plumbing and experiment
//! orchestration on top of `ssvep-adapt`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use ssvep_adapt::alignment::{apply_alignment, baseline_normalize, compute_reference_with_floor};
use ssvep_adapt::config::{AlignMode, RunConfig, KEYS};
use ssvep_adapt::container::{self, peek_kind, Artifact, Kind};
use ssvep_adapt::evalx::{
    alignment_grid, component_grid, itr, loso_run, parse_report_csv, run_grid, FoldResult, MetricsReport,
    SealedLabels, PLOT_HEADER, REPORT_HEADER,
};
use ssvep_adapt::nnet::predict;
use ssvep_adapt::preprocess::{filterbank_decompose, segment, select_channels, EpochSet};
use ssvep_adapt::synthgen::{make_cohort, synth_dataset};
use ssvep_adapt::trainer::{architecture_for, pretrain, selftrain, SelfTrainMode};
use ssvep_adapt::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_DIVERGENCE: i32 = 6;

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "run.cfg";

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        Error::BadMagic | Error::TruncatedPayload(_) | Error::Format(_) => EXIT_FORMAT,
        Error::ShapeMismatch(_) | Error::UnknownChannel(_) => EXIT_SHAPE,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

const ALIASES: &[(&str, &str)] = &[("synth.subjects", "subjects"), ("stim.num_targets", "targets")];

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|k| {
            let mut a = Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help);
            for (key, alias) in ALIASES {
                if *key == k.name {
                    a = a.visible_alias(*alias);
                }
            }
            a
        })
        .collect()
}

fn paths(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .num_args(1..)
        .action(ArgAction::Append)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn path(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .args_override_self(true)
        .arg(path("config", "key = value configuration file"))
        .arg(path("out", "output directory").required(true))
        .args(key_args())
}

pub fn command() -> Command {
    let input = || paths("input", "epoch containers or directories of them");
    Command::new("ssvep-adapt")
        .about("Cross-subject SSVEP domain adaptation on epoch containers")
        .subcommand_required(true)
        .subcommand(subcommand("synth", "generate one raw container per synthetic subject"))
        .subcommand(subcommand("preprocess", "select channels, segment and filter-bank decompose").arg(input().required(true)))
        .subcommand(subcommand("align", "normalise each subject and write its reference").arg(input().required(true)))
        .subcommand(
            subcommand("pretrain", "stage-1 training on labeled sources")
                .arg(paths("source", "labeled source containers").required(true))
                .arg(path("target", "target container (labels are dropped)")),
        )
        .subcommand(
            subcommand("adapt", "stage-2 self-training on an unlabeled target")
                .arg(path("checkpoint", "stage-1 checkpoint").required(true))
                .arg(path("target", "target container").required(true)),
        )
        .subcommand(
            subcommand("eval", "leave-one-subject-out report, or score one checkpoint")
                .arg(input())
                .arg(path("checkpoint", "score this checkpoint on --target instead of running LOSO"))
                .arg(path("target", "labeled target container for --checkpoint")),
        )
        .subcommand(
            subcommand("ablate", "component and alignment ablation grids")
                .arg(input().required(true))
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .value_parser(["components", "alignment", "all"])
                        .default_value("all")
                        .help("which grid to run"),
                ),
        )
        .subcommand(subcommand("report", "merge report CSVs into plot data").arg(paths("input", "report CSV files").required(true)))
}

/// Run with full argv (program name first) and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().ok_or_else(|| Error::InvalidArgument("missing subcommand".into()))?;
    let cfg = load_config(sub)?;
    let out = sub.get_one::<PathBuf>("out").cloned().unwrap_or_default();
    check_inputs(sub)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.dump())?;
    match name {
        "synth" => cmd_synth(&cfg, &out),
        "preprocess" => cmd_preprocess(&cfg, &inputs(sub)?, &out),
        "align" => cmd_align(&cfg, &inputs(sub)?, &out),
        "pretrain" => cmd_pretrain(&cfg, sub, &out),
        "adapt" => cmd_adapt(&cfg, sub, &out),
        "eval" => cmd_eval(&cfg, sub, &out),
        "ablate" => cmd_ablate(&cfg, sub, &out),
        "report" => cmd_report(sub, &out),
        _ => Err(Error::InvalidArgument(format!("unknown subcommand {name}"))),
    }
}

fn load_config(sub: &ArgMatches) -> Result<RunConfig> {
    let text = match sub.get_one::<PathBuf>("config") {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(&text, &overrides)
}

fn check_inputs(sub: &ArgMatches) -> Result<()> {
    for id in ["input", "source", "target", "checkpoint"] {
        let Ok(Some(values)) = sub.try_get_many::<PathBuf>(id) else {
            continue;
        };
        for p in values {
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("--{id} {} does not exist", p.display()),
                )));
            }
        }
    }
    Ok(())
}

fn many(sub: &ArgMatches, id: &str) -> Vec<PathBuf> {
    sub.get_many::<PathBuf>(id).map(|v| v.cloned().collect()).unwrap_or_default()
}

/// Expand directories into their epoch containers, sorted by name.
fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "ssvep"));
            found.sort();
            for f in found {
                if peek_kind(&fs::read(&f)?)? == Kind::Epochs {
                    out.push(f);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no epoch containers among the inputs",
        )));
    }
    Ok(out)
}

fn inputs(sub: &ArgMatches) -> Result<Vec<EpochSet>> {
    expand(&many(sub, "input"))?.iter().map(|p| container::load_epochs(p)).collect()
}

fn save_epochs(dir: &Path, set: &EpochSet) -> Result<()> {
    container::save(&dir.join(format!("{}.ssvep", set.subject_id())), &Artifact::Epochs(set.clone()))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.stimulus()?;
    let cohort = make_cohort(&cfg.cohort())?;
    for set in synth_dataset(&spec, &cohort, cfg.synth.blocks, cfg.synth.fs, cfg.synth.duration)? {
        save_epochs(out, &set)?;
    }
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, sets: &[EpochSet], out: &Path) -> Result<()> {
    let fb = cfg.filter_bank()?;
    let keep: Vec<&str> = cfg.preprocess.channels.iter().map(String::as_str).collect();
    let montage: Vec<&str> = cfg.preprocess.montage.iter().map(String::as_str).collect();
    for set in sets {
        let selected = select_channels(set, &keep, &montage)?;
        let cut = segment(&selected, cfg.segment())?;
        save_epochs(out, &filterbank_decompose(&cut, &fb)?)?;
    }
    Ok(())
}

fn cmd_align(cfg: &RunConfig, sets: &[EpochSet], out: &Path) -> Result<()> {
    let refs = out.join("refs");
    for set in sets {
        let aligned = match cfg.align.mode {
            AlignMode::None => set.clone(),
            AlignMode::Baseline(b) => baseline_normalize(set, b)?,
            AlignMode::Fbea => {
                let r = compute_reference_with_floor(set, cfg.align.eigen_floor)?;
                fs::create_dir_all(&refs)?;
                container::save(&refs.join(format!("{}.ssvep", set.subject_id())), &Artifact::Reference(r.clone()))?;
                apply_alignment(set, &r)?
            }
        };
        save_epochs(out, &aligned)?;
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, sub: &ArgMatches, out: &Path) -> Result<()> {
    let sources: Vec<EpochSet> = expand(&many(sub, "source"))?
        .iter()
        .map(|p| container::load_epochs(p))
        .collect::<Result<_>>()?;
    let parts: Vec<&EpochSet> = sources.iter().collect();
    let source = EpochSet::concat(&parts, "source")?;
    let target = match sub.get_one::<PathBuf>("target") {
        Some(p) if cfg.eval.ptal => Some(container::load_epochs(p)?.without_labels()),
        _ => None,
    };
    let arch = architecture_for(&source, cfg.stim.num_targets, cfg.train.layers);
    let pre = pretrain(&arch, &source, target.as_ref(), &cfg.train)?;
    container::save(&out.join("checkpoint.ssvep"), &Artifact::Checkpoint(pre.params))?;
    let mut log = String::from("epoch,cls_loss,adv_loss,total_loss\n");
    for r in &pre.log {
        let _ = writeln!(log, "{},{:.6},{:.6},{:.6}", r.epoch, r.cls, r.adv, r.total);
    }
    fs::write(out.join("pretrain_log.csv"), log)?;
    Ok(())
}

fn cmd_adapt(cfg: &RunConfig, sub: &ArgMatches, out: &Path) -> Result<()> {
    let init = container::load_checkpoint(&sub.get_one::<PathBuf>("checkpoint").cloned().unwrap_or_default())?;
    let (target, oracle) =
        container::load_epochs(&sub.get_one::<PathBuf>("target").cloned().unwrap_or_default())?.split_labels();
    let mode = SelfTrainMode {
        ensemble: cfg.eval.dest,
        contrastive: cfg.eval.tfa_cl,
    };
    let st = selftrain(&init, &target, &cfg.train, mode, oracle.as_deref(), None)?;
    container::save(&out.join("student.ssvep"), &Artifact::Checkpoint(st.student.clone()))?;
    container::save(&out.join("teacher.ssvep"), &Artifact::Checkpoint(st.teacher.clone()))?;
    let mut log = String::from("epoch,cls_loss,con_loss,total_loss,accepted,accept_rate,pseudo_accuracy\n");
    for r in &st.log {
        let pa = r.pseudo_accuracy.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            log,
            "{},{:.6},{:.6},{:.6},{},{:.6},{}",
            r.epoch, r.cls, r.con, r.total, r.accepted, r.accept_rate, pa
        );
    }
    fs::write(out.join("pseudo_labels.csv"), log)?;
    Ok(())
}

fn score_checkpoint(cfg: &RunConfig, ckpt: &Path, target: &Path) -> Result<MetricsReport> {
    let params = container::load_checkpoint(ckpt)?;
    let set = container::load_epochs(target)?;
    let setup = cfg.loso_setup()?;
    let m = setup.spec.num_targets();
    let subject_id = set.subject_id().to_string();
    let (unlabeled, sealed) = SealedLabels::seal(set)?;
    let acc = sealed.score(&predict(&params, unlabeled.data())?)?;
    let fold = FoldResult {
        itr: itr(acc, m, setup.gaze_time, setup.shift_time)?,
        subject_id,
        accuracy: acc,
        n_trials: sealed.len(),
        stage1_accuracy: None,
    };
    Ok(MetricsReport::from_folds(
        "checkpoint",
        vec![fold],
        m,
        setup.gaze_time,
        setup.shift_time,
        format!("{:016x}", params.checksum()),
    ))
}

fn cmd_eval(cfg: &RunConfig, sub: &ArgMatches, out: &Path) -> Result<()> {
    let report = match sub.get_one::<PathBuf>("checkpoint") {
        Some(ckpt) => {
            let target = sub
                .get_one::<PathBuf>("target")
                .ok_or_else(|| Error::InvalidArgument("--checkpoint needs --target".into()))?;
            score_checkpoint(cfg, ckpt, target)?
        }
        None => {
            let sets = inputs(sub)?;
            loso_run(&sets, &cfg.loso_setup()?, &cfg.train, cfg.eval.pipeline, cfg.flags())?
        }
    };
    fs::write(out.join("report.csv"), report.to_csv())?;
    Ok(())
}

fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, sub: &ArgMatches, out: &Path) -> Result<()> {
    let sets = inputs(sub)?;
    let setup = cfg.loso_setup()?;
    let grid = sub.get_one::<String>("grid").map_or("all", String::as_str);
    if grid != "alignment" {
        write_reports(&out.join("ablation_components.csv"), &run_grid(&sets, &setup, &cfg.train, &component_grid())?)?;
    }
    if grid != "components" {
        write_reports(&out.join("ablation_alignment.csv"), &run_grid(&sets, &setup, &cfg.train, &alignment_grid())?)?;
    }
    Ok(())
}

fn cmd_report(sub: &ArgMatches, out: &Path) -> Result<()> {
    let mut s = format!("{PLOT_HEADER}\n");
    for p in many(sub, "input") {
        for a in parse_report_csv(&fs::read_to_string(&p)?)? {
            s.push_str(&a.plot_rows());
        }
    }
    fs::write(out.join("plot_data.csv"), s)?;
    Ok(())
}

