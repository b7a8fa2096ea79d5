//! `thermal-distill`: synthetic data, pretraining, distillation, tracking and
//! evaluation from one binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use thermal_distill::backbone::{pretrain_examples, pretrain_rgb, save_backbone};
use thermal_distill::config::{apply_override, apply_preset_override, apply_tracker_override, load_flat, parse_assignment};
use thermal_distill::data::{
    generate_sequences, load_aligned_pairs, load_sequence, read_results, write_aligned_pairs, write_results, write_sequence,
    InMemorySequence, Sequence,
};
use thermal_distill::eval::{build_report, emit_plot_data, evaluate_sequence, Aggregation, EvalReport};
use thermal_distill::matrix::{build_teacher, desk_pairs, reproduce_matrix, write_matrix, DeskPreset};
use thermal_distill::model::{load_model, save_model, Model};
use thermal_distill::patchgen::{samples_for, write_pairs, Strategy};
use thermal_distill::tracker::{run_sequence, TrackerConfig};
use thermal_distill::trainer::{
    config_from_setting, joint_init, load_checkpoint, recombine_branches, resume, save_checkpoint, train, write_loss_csv,
    DistillConfig, Setting,
};
use thermal_distill::Error;

#[derive(Parser, Debug)]
#[command(name = "thermal-distill", version, about = "Unsupervised RGB-to-thermal distillation for a two-head tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable; beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; beats both the config file and `--set seed=`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate aligned RGB/TIR pairs and labeled sequences.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Cut paired patches from a pair manifest.
    Pairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "center_area")]
        strategy: String,
        #[arg(long, default_value_t = 96)]
        patch_size: u32,
    },
    /// Pretrain the RGB teacher on labeled RGB sequences.
    PretrainRgb {
        #[command(flatten)]
        common: Common,
        /// Directory of sequence directories; synthetic if omitted.
        #[arg(long)]
        sequences: Option<PathBuf>,
    },
    /// Distill one training setting.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        setting: String,
        /// Initial model (usually the teacher).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Desk-scale sample count and learning-rate scale.
        #[arg(long)]
        desk: bool,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// B1 and B2 checkpoints; required by B3.
        #[arg(long, num_args = 2, value_names = ["B1", "B2"])]
        branches: Option<Vec<PathBuf>>,
        /// C1 checkpoint whose TCL reference branch is merged into `init`.
        #[arg(long)]
        c1: Option<PathBuf>,
    },
    /// Track one sequence from its first ground-truth box.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Score result files against sequences and emit plot data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of sequence directories.
        #[arg(long)]
        sequences: PathBuf,
        /// `name=DIR` with one `<sequence>.txt` per sequence; repeatable.
        #[arg(long = "results", required = true, value_name = "NAME=DIR")]
        results: Vec<String>,
        #[arg(long)]
        frame_weighted: bool,
    },
    /// Train and evaluate every setting on the desk preset.
    ReproduceMatrix {
        #[command(flatten)]
        common: Common,
        /// Reuse a teacher instead of pretraining one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownKey(_) | Error::BadValue { .. } | Error::UnknownSetting(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Config-file entries, then `--set` entries, then `--seed`, in that order.
fn resolved_assignments(common: &Common) -> Run<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(p) = &common.config {
        out.extend(load_flat(p)?);
    }
    for s in &common.overrides {
        out.push(parse_assignment(s)?);
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    assignments: &'a [(String, String)],
    resolved: &'a T,
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, assignments: &[(String, String)], resolved: &T) -> Run<()> {
    fs::create_dir_all(out).map_err(Error::from)?;
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        assignments,
        resolved,
    };
    let text = serde_json::to_string_pretty(&m).map_err(Error::from)?;
    fs::write(out.join("manifest.json"), text + "\n").map_err(Error::from)?;
    Ok(())
}

fn preset_from(common: &Common) -> Run<(DeskPreset, Vec<(String, String)>)> {
    let a = resolved_assignments(common)?;
    let mut p = DeskPreset::default();
    for (k, v) in &a {
        apply_preset_override(&mut p, k, v)?;
    }
    Ok((p, a))
}

fn sequence_dirs(root: &Path) -> Run<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Runtime(format!("no sequences under {}", root.display())));
    }
    Ok(dirs)
}

fn in_memory(seq: &Sequence) -> Run<InMemorySequence> {
    Ok(seq.load_frames()?)
}

fn run(command: Command) -> Run<()> {
    match command {
        Command::Synth { common } => {
            let (p, a) = preset_from(&common)?;
            write_manifest(&common.out, "synth", &a, &p)?;
            let pairs = desk_pairs(&p.pairs, p.detection_jitter)?;
            let manifest = write_aligned_pairs(&common.out.join("pairs"), &pairs)?;
            for (dir, spec) in [("train_rgb", &p.train_sequences), ("eval_tir", &p.eval_sequences)] {
                for s in generate_sequences(spec) {
                    write_sequence(&common.out.join(dir).join(&s.name), &s)?;
                }
            }
            println!("pairs: {}", manifest.display());
            Ok(())
        }
        Command::Pairs { common, manifest, strategy, patch_size } => {
            let strategy =
                Strategy::parse(&strategy).ok_or_else(|| Failure::Usage(format!("unknown strategy `{strategy}`")))?;
            let a = resolved_assignments(&common)?;
            let seed = match a.iter().rev().find(|(k, _)| k == "seed") {
                Some((_, v)) => v.parse().map_err(|_| Failure::Usage(format!("bad value for `seed`: {v}")))?,
                None => 0,
            };
            if let Some((k, _)) = a.iter().find(|(k, _)| k != "seed") {
                return Err(Error::UnknownKey(k.clone()).into());
            }
            let resolved = BTreeMap::from([
                ("strategy", strategy.as_str().to_string()),
                ("patch_size", patch_size.to_string()),
                ("seed", seed.to_string()),
            ]);
            write_manifest(&common.out, "pairs", &a, &resolved)?;
            let pairs = load_aligned_pairs(&manifest)?;
            let samples = samples_for(&pairs, strategy, patch_size, seed)?;
            write_pairs(&common.out, &samples)?;
            println!("{} paired samples", samples.len());
            Ok(())
        }
        Command::PretrainRgb { common, sequences } => {
            let (p, a) = preset_from(&common)?;
            write_manifest(&common.out, "pretrain-rgb", &a, &p)?;
            let teacher = match sequences {
                Some(root) => {
                    let seqs = sequence_dirs(&root)?
                        .iter()
                        .map(|d| load_sequence(d).map_err(Failure::from).and_then(|s| in_memory(&s)))
                        .collect::<Run<Vec<_>>>()?;
                    pretrain_rgb(&pretrain_examples(&seqs, &p.pretrain)?, &p.pretrain)
                }
                None => build_teacher(&p),
            };
            let teacher = match teacher {
                Ok(t) => t,
                Err(Error::TrainingFailed { trace }) => {
                    write_trace(&common.out, &trace)?;
                    return Err(Failure::Runtime(format!("pretraining did not converge; trace in {}", common.out.display())));
                }
                Err(e) => return Err(e.into()),
            };
            write_trace(&common.out, &teacher.trace)?;
            save_model(&teacher.model, &common.out.join("teacher.tdmd"))?;
            save_backbone(&teacher.model.backbone, &common.out.join("backbone.tdbb"))?;
            println!("final loss {:.6}", teacher.trace.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Train { common, setting, init, manifest, desk, resume: resume_from, branches, c1 } => {
            let a = resolved_assignments(&common)?;
            let mut cfg: DistillConfig = config_from_setting(&setting)?;
            if desk {
                cfg = cfg.desk();
            }
            for (k, v) in &a {
                apply_override(&mut cfg, k, v)?;
            }
            cfg.validate()?;
            write_manifest(&common.out, "train", &a, &cfg)?;
            let teacher = load_model(&init)?;
            if cfg.setting == Setting::B3 {
                let [b1, b2] = match branches.as_deref() {
                    Some([b1, b2]) => [b1, b2],
                    _ => return Err(Failure::Usage("B3 is a recombination; pass --branches B1_CKPT B2_CKPT".into())),
                };
                let m = recombine_branches(&load_checkpoint(b1)?, &load_checkpoint(b2)?, &teacher)?;
                save_model(&m, &common.out.join("model.tdmd"))?;
                println!("recombined B1 and B2");
                return Ok(());
            }
            let start: Model = match &c1 {
                Some(c) => joint_init(&teacher, &load_checkpoint(c)?)?,
                None => teacher,
            };
            let pairs = load_aligned_pairs(&manifest)?;
            let samples = samples_for(&pairs, cfg.patch_strategy, cfg.patch_size, cfg.seed)?;
            let state = match resume_from {
                Some(ck) => {
                    let mut st = load_checkpoint(&ck)?;
                    st.config.epochs = cfg.epochs;
                    resume(st, &samples)
                }
                None => train(&cfg, &start, &samples),
            };
            let state = match state {
                Ok(s) => s,
                Err(Error::TrainingAborted { epoch, step, snapshot }) => {
                    save_checkpoint(&snapshot, &common.out.join("aborted.tdts"))?;
                    write_loss_csv(&snapshot.history, &common.out.join("loss.csv"))?;
                    return Err(Failure::Runtime(format!("non-finite loss at epoch {epoch} step {step}; snapshot saved")));
                }
                Err(e) => return Err(e.into()),
            };
            save_checkpoint(&state, &common.out.join("checkpoint.tdts"))?;
            save_model(&state.model, &common.out.join("model.tdmd"))?;
            write_loss_csv(&state.history, &common.out.join("loss.csv"))?;
            if let Some(last) = state.history.last() {
                println!("epoch {} L_TCL {:.6} L_BBE {:.6} L {:.6}", last.epoch, last.l_tcl, last.l_bbe, last.l);
            }
            Ok(())
        }
        Command::Track { common, model, sequence } => {
            let a = resolved_assignments(&common)?;
            let mut cfg = TrackerConfig::default();
            for (k, v) in &a {
                apply_tracker_override(&mut cfg, k, v)?;
            }
            write_manifest(&common.out, "track", &a, &cfg)?;
            let m = load_model(&model)?;
            let seq = load_sequence(&sequence)?;
            let boxes = run_sequence(&m, &cfg, &seq, &seq.gt[0])?;
            let path = common.out.join(format!("{}.txt", seq.name));
            write_results(&path, &boxes)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval { common, sequences, results, frame_weighted } => {
            let a = resolved_assignments(&common)?;
            if let Some((k, _)) = a.first() {
                return Err(Error::UnknownKey(k.clone()).into());
            }
            let mode = if frame_weighted { Aggregation::FrameWeighted } else { Aggregation::SequenceAverage };
            let seqs = sequence_dirs(&sequences)?.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>, _>>()?;
            let mut reports: Vec<(String, EvalReport)> = Vec::new();
            for spec in &results {
                let (name, dir) = spec
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(format!("expected NAME=DIR for --results, got `{spec}`")))?;
                let mut per_seq = Vec::with_capacity(seqs.len());
                for s in &seqs {
                    let pred = read_results(&Path::new(dir).join(format!("{}.txt", s.name)))?;
                    per_seq.push(evaluate_sequence(&s.name, &s.attributes, &pred, &s.gt)?);
                }
                reports.push((name.to_string(), build_report(&per_seq, mode)));
            }
            write_manifest(&common.out, "eval", &a, &BTreeMap::from([("aggregation", format!("{mode:?}"))]))?;
            let refs: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
            emit_plot_data(&refs, &common.out)?;
            for (n, r) in &reports {
                println!(
                    "{n}: S {:.4} P {:.4} NP {:.4}",
                    r.overall.success, r.overall.precision, r.overall.norm_precision
                );
            }
            Ok(())
        }
        Command::ReproduceMatrix { common, teacher } => {
            let (p, a) = preset_from(&common)?;
            write_manifest(&common.out, "reproduce-matrix", &a, &p)?;
            let teacher = match teacher {
                Some(path) => load_model(&path)?,
                None => {
                    let t = build_teacher(&p)?;
                    save_model(&t.model, &common.out.join("teacher.tdmd"))?;
                    write_trace(&common.out, &t.trace)?;
                    t.model
                }
            };
            let pairs = desk_pairs(&p.pairs, p.detection_jitter)?;
            let rows = reproduce_matrix(&p, &teacher, &pairs);
            let path = common.out.join("matrix.csv");
            write_matrix(&rows, &path)?;
            print!("{}", fs::read_to_string(&path).map_err(Error::from)?);
            let failed: Vec<String> = rows.iter().filter(|r| r.error.is_some()).map(|r| r.setting.to_string()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("settings failed: {}", failed.join(", "))))
            }
        }
    }
}

fn write_trace(out: &Path, trace: &[f64]) -> Run<()> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::create_dir_all(out).map_err(Error::from)?;
    fs::write(out.join("pretrain_loss.csv"), s).map_err(Error::from)?;
    Ok(())
}
