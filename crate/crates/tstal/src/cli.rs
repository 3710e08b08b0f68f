//! The `tstal` binary: one subcommand per pipeline stage plus `pipeline`
//! to run them all in sequence.
//!
//! Every subcommand is deterministic given `--seed`, never mutates its
//! inputs, and writes outputs only under the requested `--out` location.
//! `--workers` sets the thread count for per-video parallel stages; any
//! worker count produces identical output. Exit codes: 0 success, 1
//! validation/usage error, 2 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_run_config, RunConfig};
use crate::dataio::{generate_synthetic, load_dataset, load_manifest, save_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{default_iou_thresholds, evaluate, format_report_table};
use crate::grad::{grad_check_random, Mode};
use crate::localize::{localize_dataset, read_detections, write_detections, LocalizeConfig};
use crate::optim::{checkpoint_file_name, load_checkpoint, save_checkpoint, train_full, TrainConfig, TrainLogEntry};

#[derive(Parser)]
#[command(
    name = "tstal",
    version,
    about = "Weakly-supervised temporal action localization from video-level labels"
)]
struct Cli {
    /// Thread count for per-video parallel work (pseudo-labels,
    /// localization); defaults to all logical CPUs. Output does not
    /// depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Overrides every stage seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-stream dataset (train/ and val/ splits).
    GenData(GenDataArgs),
    /// Train both streams: base iteration, pseudo-label refinement
    /// iterations, and the parameter-EMA ensemble.
    Train(TrainArgs),
    /// Produce scored detections from a checkpoint and a manifest.
    Localize(LocalizeArgs),
    /// Score a detections file against manifest ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// gen-data, train, localize, and eval in one deterministic run.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; receives train/ and val/ subdirectories.
    #[arg(long)]
    out: PathBuf,
    /// Run-configuration JSON (the `synth` section applies here).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of training videos.
    #[arg(long)]
    num_train: Option<usize>,
    /// Number of validation videos.
    #[arg(long)]
    num_val: Option<usize>,
    /// Number of action classes.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Feature dimensionality of both streams.
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of the training split.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Run-configuration JSON (the `train` section applies here).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs per refinement iteration.
    #[arg(long)]
    epochs: Option<usize>,
    /// Total refinement iterations, counting the base iteration 0.
    #[arg(long)]
    iterations: Option<usize>,
    /// Embedding width; defaults to the feature dimension.
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the split to localize.
    #[arg(long)]
    manifest: PathBuf,
    /// Output detections JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Run-configuration JSON (the `localize` section applies here).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON array of class names used as detection labels.
    #[arg(long)]
    label_map: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections JSON written by `localize`.
    #[arg(long)]
    detections: PathBuf,
    /// Manifest carrying ground-truth segments.
    #[arg(long)]
    manifest: PathBuf,
    /// Output report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// JSON array of class names (must match the one used to localize).
    #[arg(long)]
    label_map: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum CheckMode {
    /// Video-level losses only.
    Base,
    /// Adds the pseudo-label loss.
    Refine,
    /// Both of the above.
    Both,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances per mode.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Snippets per instance.
    #[arg(long, default_value_t = 12)]
    snippets: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 6)]
    feature_dim: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 5)]
    embed_dim: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Which training mode's gradients to check.
    #[arg(long, value_enum, default_value_t = CheckMode::Both)]
    mode: CheckMode,
    /// Run-configuration JSON (its `train.loss_weights` apply here).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Output directory for the data, checkpoints, detections, and report.
    #[arg(long)]
    out: PathBuf,
    /// Run-configuration JSON governing every stage.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code (0 success, 1 validation/usage, 2 I/O).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here with non-error kinds; usage
            // mistakes report on stderr and exit as validation failures.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    let seed = cli.seed;
    with_workers(workers, || match cli.command {
        Command::GenData(args) => {
            let mut cfg = effective_config(args.config.as_deref(), seed)?;
            apply(&mut cfg.synth.num_train, args.num_train);
            apply(&mut cfg.synth.num_val, args.num_val);
            apply(&mut cfg.synth.num_classes, args.num_classes);
            apply(&mut cfg.synth.feature_dim, args.feature_dim);
            cmd_gen_data(&cfg.synth, &args.out)
        }
        Command::Train(args) => {
            let mut cfg = effective_config(args.config.as_deref(), seed)?;
            apply(&mut cfg.train.epochs_per_iteration, args.epochs);
            apply(&mut cfg.train.refinement_iterations, args.iterations);
            if args.embed_dim.is_some() {
                cfg.train.embed_dim = args.embed_dim;
            }
            cfg.train.validate()?;
            cmd_train(&args.manifest, &args.out, &cfg.train)
        }
        Command::Localize(args) => {
            let cfg = effective_config(args.config.as_deref(), seed)?;
            cmd_localize(
                &args.checkpoint,
                &args.manifest,
                &args.out,
                &cfg.localize,
                args.label_map.as_deref(),
            )
        }
        Command::Eval(args) => {
            cmd_eval(&args.detections, &args.manifest, &args.out, args.label_map.as_deref())
        }
        Command::GradCheck(args) => {
            let cfg = effective_config(args.config.as_deref(), seed)?;
            cmd_grad_check(&args, &cfg.train, seed.unwrap_or(0))
        }
        Command::Pipeline(args) => {
            let cfg = effective_config(args.config.as_deref(), seed)?;
            cmd_pipeline(&cfg, &args.out)
        }
    })
}

fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Loads the config file if given, then lets `--seed` override every
/// stage seed.
fn effective_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn with_workers(workers: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match workers {
        None => f(),
        Some(0) => Err(Error::validation("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::validation(format!("could not build worker pool: {e}")))?
            .install(f),
    }
}

fn read_label_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn cmd_gen_data(synth: &SynthConfig, out: &Path) -> Result<()> {
    let dataset = generate_synthetic(synth)?;
    let (train, val) = dataset.split_at(synth.num_train);
    save_dataset(&train, &out.join("train"))?;
    save_dataset(&val, &out.join("val"))?;
    println!(
        "wrote {} train / {} val videos ({} classes, {}-dim features) under {}",
        train.len(),
        val.len(),
        synth.num_classes,
        synth.feature_dim,
        out.display()
    );
    Ok(())
}

fn cmd_train(manifest: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let dataset = load_dataset(manifest)?;
    let mut log_buf: Vec<u8> = Vec::new();
    let mut sink = |entry: &TrainLogEntry| {
        serde_json::to_writer(&mut log_buf, entry).expect("log entries always serialize");
        log_buf.push(b'\n');
    };
    let (checkpoints, ensemble) = train_full(&dataset, cfg, &mut sink)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for ckpt in checkpoints.iter().chain([&ensemble]) {
        let path = out.join(checkpoint_file_name(ckpt));
        save_checkpoint(ckpt, &path)?;
        println!("wrote {}", path.display());
    }
    let log_path = out.join("train_log.jsonl");
    fs::write(&log_path, &log_buf).map_err(|e| Error::io(&log_path, e))?;
    println!("wrote {}", log_path.display());
    Ok(())
}

fn cmd_localize(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    cfg: &LocalizeConfig,
    label_map: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(manifest)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let labels = label_map.map(read_label_map).transpose()?;
    let detections = localize_dataset(&dataset, &ckpt, cfg)?;
    write_detections(&detections, labels.as_deref(), out)?;
    println!(
        "wrote {} detections for {} videos to {}",
        detections.len(),
        dataset.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    detections: &Path,
    manifest_path: &Path,
    out: &Path,
    label_map: Option<&Path>,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let labels = label_map.map(read_label_map).transpose()?;
    let dets = read_detections(detections, labels.as_deref())?;
    let report = evaluate(&dets, &manifest, &default_iou_thresholds())?;
    let json = serde_json::to_string_pretty(&report).expect("report always serializes");
    fs::write(out, json + "\n").map_err(|e| Error::io(out, e))?;
    print!("{}", format_report_table(&report));
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_grad_check(args: &GradCheckArgs, train: &TrainConfig, seed: u64) -> Result<()> {
    let shape = (args.snippets, args.feature_dim, args.embed_dim, args.classes);
    if args.fd_step <= 0.0 || args.tolerance <= 0.0 {
        return Err(Error::validation("fd-step and tolerance must be positive"));
    }
    let modes: &[Mode] = match args.mode {
        CheckMode::Base => &[Mode::Base],
        CheckMode::Refine => &[Mode::Refine],
        CheckMode::Both => &[Mode::Base, Mode::Refine],
    };
    let mut worst: f64 = 0.0;
    for &mode in modes {
        let summary = grad_check_random(
            args.trials,
            shape,
            mode,
            &train.loss_weights,
            args.fd_step,
            seed,
        )?;
        println!(
            "mode={:?} instances={} max_rel_error={:.3e} resampled={} min_kink_margin={:.3e}",
            mode,
            summary.instances,
            summary.max_rel_error,
            summary.resampled,
            summary.min_kink_margin
        );
        worst = worst.max(summary.max_rel_error);
    }
    if worst > args.tolerance {
        return Err(Error::validation(format!(
            "max relative error {worst:.3e} exceeds tolerance {:.3e}",
            args.tolerance
        )));
    }
    println!("gradients verified: max relative error {worst:.3e} <= {:.3e}", args.tolerance);
    Ok(())
}

fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data_dir = out.join("data");
    let ckpt_dir = out.join("checkpoints");
    println!("[1/4] generating synthetic dataset");
    cmd_gen_data(&cfg.synth, &data_dir)?;
    println!(
        "[2/4] training ({} epochs x {} refinement iterations + ensemble)",
        cfg.train.epochs_per_iteration, cfg.train.refinement_iterations
    );
    cmd_train(&data_dir.join("train").join("manifest.json"), &ckpt_dir, &cfg.train)?;
    println!("[3/4] localizing the validation split");
    let det_path = out.join("detections.json");
    let val_manifest = data_dir.join("val").join("manifest.json");
    cmd_localize(
        &ckpt_dir.join("ckpt_ensemble.bin"),
        &val_manifest,
        &det_path,
        &cfg.localize,
        None,
    )?;
    println!("[4/4] evaluating");
    cmd_eval(&det_path, &val_manifest, &out.join("report.json"), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("tstal").chain(args.iter().copied()))
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["--version"]), 0);
        assert_eq!(run_args(&["train", "--help"]), 0);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&[]), 1);
        assert_eq!(run_args(&["no-such-command"]), 1);
        assert_eq!(run_args(&["train"]), 1); // missing required flags
        assert_eq!(run_args(&["--workers", "0", "gen-data", "--out", "/tmp/x"]), 1);
    }

    #[test]
    fn missing_input_files_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run_args(&[
            "train",
            "--manifest",
            "/nonexistent/manifest.json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_config_file_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"sync": {}}"#).unwrap();
        let out = dir.path().join("out");
        let code = run_args(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn gen_data_writes_both_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let args = |out: &Path| {
            vec![
                "gen-data".to_string(),
                "--seed".into(),
                "5".into(),
                "--num-train".into(),
                "3".into(),
                "--num-val".into(),
                "2".into(),
                "--num-classes".into(),
                "2".into(),
                "--feature-dim".into(),
                "4".into(),
                "--out".into(),
                out.to_str().unwrap().to_string(),
            ]
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        for out in [&out_a, &out_b] {
            let argv: Vec<String> = args(out);
            let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
            assert_eq!(run_args(&argv), 0);
        }
        for split in ["train", "val"] {
            let a = fs::read(out_a.join(split).join("manifest.json")).unwrap();
            let b = fs::read(out_b.join(split).join("manifest.json")).unwrap();
            assert_eq!(a, b, "split {split} differs between identical runs");
        }
        let manifest = load_manifest(&out_a.join("val").join("manifest.json")).unwrap();
        assert_eq!(manifest.videos.len(), 2);
        assert!(manifest.videos.iter().all(|v| v.id.starts_with("val_")));
    }

    #[test]
    fn grad_check_respects_tolerance_flag() {
        assert_eq!(run_args(&["grad-check", "--trials", "2", "--snippets", "6"]), 0);
        assert_eq!(
            run_args(&[
                "grad-check",
                "--trials",
                "2",
                "--snippets",
                "6",
                "--tolerance",
                "1e-300",
            ]),
            1
        );
        assert_eq!(run_args(&["grad-check", "--fd-step", "-1.0"]), 1);
    }

    #[test]
    fn zero_epoch_training_emits_single_iteration_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(
            run_args(&[
                "gen-data", "--seed", "3", "--num-train", "3", "--num-val", "1",
                "--num-classes", "2", "--feature-dim", "4", "--out",
                data.to_str().unwrap(),
            ]),
            0
        );
        let out = dir.path().join("ckpts");
        let manifest = data.join("train").join("manifest.json");
        assert_eq!(
            run_args(&[
                "train", "--manifest", manifest.to_str().unwrap(), "--out",
                out.to_str().unwrap(), "--epochs", "0", "--iterations", "1",
                "--seed", "3",
            ]),
            0
        );
        let mut iter_ckpts: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with("ckpt_iter"))
            .collect();
        iter_ckpts.sort();
        assert_eq!(iter_ckpts, ["ckpt_iter0.bin"]);

        // Untrained: checkpoint equals seed-3 initialization exactly, and
        // the singleton ensemble carries the same parameters.
        let ckpt = load_checkpoint(&out.join("ckpt_iter0.bin")).unwrap();
        let m = load_manifest(&manifest).unwrap();
        let d = m.feature_dim;
        let rgb0 = crate::model::init_params(d, d, m.num_classes, crate::seeding::derive_seed(3, "init/rgb"));
        assert_eq!(ckpt.rgb.flatten(), rgb0.flatten());
        let ens = load_checkpoint(&out.join("ckpt_ensemble.bin")).unwrap();
        assert!(ens.ensemble);
        assert_eq!(ens.rgb.flatten(), ckpt.rgb.flatten());
        assert_eq!(ens.flow.flatten(), ckpt.flow.flatten());
    }

    #[test]
    fn localize_and_eval_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(
            run_args(&[
                "gen-data", "--seed", "11", "--num-train", "3", "--num-val", "2",
                "--num-classes", "2", "--feature-dim", "4", "--out",
                data.to_str().unwrap(),
            ]),
            0
        );
        let ckpts = dir.path().join("ckpts");
        let train_manifest = data.join("train").join("manifest.json");
        let cfg_path = dir.path().join("run.json");
        fs::write(
            &cfg_path,
            r#"{"train": {"epochs_per_iteration": 1, "refinement_iterations": 1, "embed_dim": 3}}"#,
        )
        .unwrap();
        assert_eq!(
            run_args(&[
                "train", "--manifest", train_manifest.to_str().unwrap(), "--out",
                ckpts.to_str().unwrap(), "--config", cfg_path.to_str().unwrap(),
                "--seed", "11",
            ]),
            0
        );
        assert!(ckpts.join("train_log.jsonl").exists());

        let val_manifest = data.join("val").join("manifest.json");
        let det_path = dir.path().join("detections.json");
        let label_path = dir.path().join("labels.json");
        fs::write(&label_path, r#"["walk", "jump"]"#).unwrap();
        assert_eq!(
            run_args(&[
                "localize", "--checkpoint",
                ckpts.join("ckpt_ensemble.bin").to_str().unwrap(), "--manifest",
                val_manifest.to_str().unwrap(), "--out", det_path.to_str().unwrap(),
                "--label-map", label_path.to_str().unwrap(),
            ]),
            0
        );
        let det_text = fs::read_to_string(&det_path).unwrap();
        assert!(det_text.contains("\"walk\"") || det_text.contains("\"jump\""));

        let report_path = dir.path().join("report.json");
        assert_eq!(
            run_args(&[
                "eval", "--detections", det_path.to_str().unwrap(), "--manifest",
                val_manifest.to_str().unwrap(), "--out", report_path.to_str().unwrap(),
                "--label-map", label_path.to_str().unwrap(),
            ]),
            0
        );
        let report: crate::eval::EvalReport =
            serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report.map_at_iou.len(), 10);
    }
}
