//! The `dyco` command line: synthesis, pre-training, few-shot fine-tuning,
//! evaluation, theory checks and plot-data export.
//!
//! Exit codes: 0 success, 1 usage or failed verification, 2 data error,
//! 3 numerical abort. The top-level `seed` of a config file (or `--seed`)
//! seeds every stage; nested `seed` fields are overwritten by it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbone::Encoder;
use crate::config::RunConfig;
use crate::fewshot::{argmax, confusion_csv, evaluate, make_split, snr_curve_csv, Classifier, EvalReport, FewShotModel, FewShotSplit};
use crate::fusion::FusionModel;
use crate::pretrain::{read_log, write_log_line, Pretrainer};
use crate::signal::{read_frames, synth_dataset, write_frames, FrameFile, Modulation, PulseShape};
use crate::theory::{run_check, VerifyReport, CHECKS};
use crate::Error;

#[derive(Parser)]
#[command(name = "dyco", version, about = "Few-shot modulation recognition toolkit")]
struct Cli {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic frame file.
    Synth {
        /// Comma-separated modulation names.
        #[arg(long, value_delimiter = ',', value_parser = parse_modulation)]
        classes: Option<Vec<Modulation>>,
        /// Frames per class and SNR.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snrs: Option<Vec<i16>>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, value_enum)]
        pulse: Option<PulseArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training; writes a checkpoint and a JSONL log.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log path; defaults to the checkpoint path with `.log.jsonl` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune the fusion head on an N-shot support set.
    Fewshot {
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Evaluate on the query set of the split saved by `fewshot`.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fusion_ckpt: PathBuf,
        /// Split file; defaults to the one next to the fusion checkpoint. When
        /// neither exists every frame is a query.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run theory checks; exits 0 only if all pass.
    Verify {
        /// A check name or `all`.
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Export CSV for external plotting.
    PlotData {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PulseArg {
    Rect,
    Rrc,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    SnrCurve,
    Confusion,
    Loss,
}

fn parse_modulation(s: &str) -> Result<Modulation, String> {
    s.parse::<Modulation>().map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Checks(usize),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth { classes, per_class, snrs, length, pulse, seed, out } => {
            let spec = &mut cfg.synth;
            if let Some(c) = classes {
                spec.classes = c;
            }
            if let Some(n) = per_class {
                spec.per_cell = n;
            }
            if let Some(s) = snrs {
                spec.snrs_db = s;
            }
            if let Some(l) = length {
                spec.length = l;
            }
            if let Some(p) = pulse {
                spec.pulse = match p {
                    PulseArg::Rect => PulseShape::Rectangular,
                    PulseArg::Rrc => PulseShape::RootRaisedCosine,
                };
            }
            let seed = seed.unwrap_or(cfg.seed);
            let frames = synth_dataset(&cfg.synth, seed)?;
            let n = frames.len();
            write_frames(&out, &FrameFile::new(cfg.synth.length, frames))?;
            println!("{n} frames written to {}", out.display());
        }
        Command::Pretrain { data, epochs, seed, out_ckpt, resume, log } => {
            let file = read_frames(&data)?;
            let mut pc = cfg.pretrain.clone();
            pc.seed = seed.unwrap_or(cfg.seed);
            let epochs = epochs.unwrap_or(pc.epochs);
            pc.epochs = epochs;
            let mut tr = match &resume {
                Some(p) => Pretrainer::resume(pc.clone(), p)?,
                None => Pretrainer::new(pc.clone(), cfg.backbone.clone())?,
            };
            println!(
                "pretraining on {} frames: epochs={epochs} lambda_sc={} epsilon={} tau={} dynamic_consistency={} seed={}",
                file.frames.len(),
                pc.lambda_sc,
                pc.epsilon,
                pc.tau,
                pc.dynamic_consistency,
                pc.seed
            );
            let log_path = log.unwrap_or_else(|| with_suffix(&out_ckpt, ".log.jsonl"));
            if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            let f = OpenOptions::new().create(true).write(true).append(resume.is_some()).truncate(resume.is_none()).open(&log_path).map_err(Error::from)?;
            let mut w = BufWriter::new(f);
            tr.fit(&file.frames, epochs, |m| write_log_line(&mut w, m))?;
            w.flush().map_err(Error::from)?;
            if let Some(parent) = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            tr.save(&out_ckpt)?;
            println!("step {} checkpoint {} log {}", tr.step(), out_ckpt.display(), log_path.display());
        }
        Command::Fewshot { data, ckpt, n, seed, out_ckpt } => {
            let file = read_frames(&data)?;
            let encoder = Encoder::load(&ckpt)?;
            let n = n.unwrap_or(cfg.fewshot.n);
            let seed = seed.unwrap_or(cfg.seed);
            let split = make_split(&file.frames, n, seed)?;
            let mut fc = cfg.fusion.clone();
            fc.seed = seed;
            let (model, history) = FewShotModel::train(encoder, &file.frames, &split, fc)?;
            if let Some(parent) = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            model.fusion.save(&out_ckpt)?;
            write_text(&with_suffix(&out_ckpt, ".split.json"), &serde_json::to_string(&split).map_err(Error::from)?)?;
            println!(
                "{}-shot support of {} frames; loss {:.6} -> {:.6}; fusion checkpoint {}",
                n,
                split.support.len(),
                history.first().copied().unwrap_or(f64::NAN),
                history.last().copied().unwrap_or(f64::NAN),
                out_ckpt.display()
            );
        }
        Command::Eval { data, ckpt, fusion_ckpt, split, report } => {
            let file = read_frames(&data)?;
            let encoder = Encoder::load(&ckpt)?;
            let fusion = FusionModel::load(&fusion_ckpt)?;
            let split_path = split.unwrap_or_else(|| with_suffix(&fusion_ckpt, ".split.json"));
            let split: FewShotSplit = match fs::read_to_string(&split_path) {
                Ok(text) => serde_json::from_str(&text).map_err(Error::from)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    FewShotSplit { support: Vec::new(), query: (0..file.frames.len()).collect(), n: 0, seed: cfg.seed }
                }
                Err(e) => return Err(Error::from(e).into()),
            };
            if let Some(&bad) = split.query.iter().find(|&&i| i >= file.frames.len()) {
                return Err(Error::InvalidArgument(format!("split refers to frame {bad} but the data has {}", file.frames.len())).into());
            }
            let model = FewShotModel { encoder, fusion };
            let r = evaluate(&model, &file.frames, &split)?;
            write_eval_outputs(&model, &file.frames, &split, &r, &report)?;
            println!("accuracy {:.6} over {} query frames; report {}", r.accuracy, r.total, report.display());
        }
        Command::Verify { check, trials, seed, report_dir } => {
            let names: Vec<&str> = if check == "all" {
                CHECKS.to_vec()
            } else if CHECKS.contains(&check.as_str()) || check == "cosine_euclid_equiv" {
                vec![check.as_str()]
            } else {
                return Err(Failure::Usage(format!("unknown check {check:?}; valid checks: all, {}", CHECKS.join(", "))));
            };
            let seed = seed.unwrap_or(cfg.seed);
            let trials = trials.or(cfg.verify.trials);
            let mut reports: Vec<VerifyReport> = Vec::new();
            for name in names {
                for r in run_check(name, seed, trials)? {
                    println!("{} {} statistic={} bound={} tolerance={}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.statistic, r.bound, r.tolerance);
                    reports.push(r);
                }
            }
            let dir = report_dir.unwrap_or_else(|| cfg.out_dir.join("verify"));
            let mut csv = format!("{}\n", VerifyReport::CSV_HEADER);
            for r in &reports {
                write_text(&dir.join(format!("{}.json", file_stem(&r.name))), &serde_json::to_string_pretty(r).map_err(Error::from)?)?;
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            write_text(&dir.join("summary.csv"), &csv)?;
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Failure::Checks(failed));
            }
        }
        Command::PlotData { report, kind, out } => {
            let text = fs::read_to_string(&report).map_err(Error::from)?;
            let csv = match kind {
                PlotKind::SnrCurve => snr_curve_csv(&parse_report(&text)?),
                PlotKind::Confusion => confusion_csv(&parse_report(&text)?),
                PlotKind::Loss => {
                    let mut s = String::from("step,l_total\n");
                    for m in read_log(&text)? {
                        s.push_str(&format!("{},{}\n", m.step, m.l_total));
                    }
                    s
                }
            };
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn parse_report(text: &str) -> Result<EvalReport, Error> {
    Ok(serde_json::from_str(text)?)
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Report JSON plus sibling CSVs and a per-frame prediction dump.
fn write_eval_outputs(model: &FewShotModel, frames: &[crate::signal::IqFrame], split: &FewShotSplit, r: &EvalReport, report: &Path) -> Result<(), Error> {
    write_text(report, &(serde_json::to_string_pretty(r)? + "\n"))?;
    let stem = report.with_extension("");
    write_text(&with_suffix(&stem, ".snr.csv"), &snr_curve_csv(r))?;
    write_text(&with_suffix(&stem, ".confusion.csv"), &confusion_csv(r))?;
    let query: Vec<_> = split.query.iter().map(|&i| frames[i].clone()).collect();
    let probs = model.predict_proba(&query)?;
    let classes = model.classes();
    let mut w = create(&with_suffix(&stem, ".predictions.jsonl"))?;
    for ((&idx, f), row) in split.query.iter().zip(&query).zip(probs.rows()) {
        let pred = classes[argmax(row)];
        let line = serde_json::json!({ "frame_index": idx, "true_label": f.label, "pred_label": pred, "probs": row });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    if let Ok(n) = std::env::var("DYCO_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: DYCO_THREADS must be a positive integer, got {n:?}");
                return 1;
            }
        }
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Checks(n)) => {
            eprintln!("{n} check(s) failed");
            1
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Numerical(_)) {
                3
            } else {
                2
            }
        }
    }
}
