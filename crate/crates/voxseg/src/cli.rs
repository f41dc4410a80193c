//! Operator entry point: `preprocess`, `synth-data`, `train`, `evaluate`,
//! `predict`, and `plot` subcommands over the documented file formats.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 input or I/O
//! error, 3 numerical failure. Commands are idempotent for fixed seeds;
//! outputs are byte-identical apart from the timestamps in run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use voxseg_core::model::{predict_labels, ModelConfig, UNet3DMHA};
use voxseg_core::preprocess::PreprocessConfig;
use voxseg_core::tape::Tape;

use crate::config::{model_config_from_map, model_config_text, ConfigMap};
use crate::overlay::write_overlays;
use crate::pipeline::{load_manifest_samples, run_preprocess_threaded};
use crate::plot::plot_runlog;
use crate::report::{report_csv, report_text};
use crate::store::{
    load_sample, read_checkpoint, save_label_grid, write_checkpoint, StoreError,
};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{
    evaluate, grid_summary, parse_runlog_csv, run_grid, runlog_to_csv, train, Clock, GridCell,
    TrainConfig, TrainError, TrainOutcome,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unreadable/invalid input: exit 2.
    Input(String),
    /// Non-finite loss or another numerical failure: exit 3.
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::Numerical(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn input_err(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// `--key value` flags plus boolean `--switch`es.
struct Args {
    flags: BTreeMap<String, String>,
    switches: Vec<String>,
}

const SWITCHES: [&str; 2] = ["dev", "wall-clock"];

impl Args {
    fn parse(args: &[String]) -> Result<Args, CliError> {
        let mut flags = BTreeMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(CliError::Input(format!("unexpected argument {arg:?}")));
            };
            if SWITCHES.contains(&name) {
                switches.push(name.to_owned());
                i += 1;
            } else {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Input(format!("--{name} needs a value")))?;
                flags.insert(name.to_owned(), value.clone());
                i += 2;
            }
        }
        Ok(Args { flags, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::Input(format!("missing required flag --{name}")))
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(name)?))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Written atomically (temp file + rename) at the end of every run.
fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    config: &str,
    input: &str,
    seed: u64,
    started: f64,
) -> Result<(), CliError> {
    let body = format!(
        "command={command}\nconfig={config}\ninput={input}\noutput={}\nseed={seed}\ntool_version={TOOL_VERSION}\nstarted={started:.3}\nfinished={:.3}\n",
        out_dir.display(),
        unix_now(),
    );
    let tmp = out_dir.join(format!("{RUN_MANIFEST_FILE}.tmp"));
    fs::write(&tmp, body).map_err(input_err)?;
    fs::rename(&tmp, out_dir.join(RUN_MANIFEST_FILE)).map_err(input_err)?;
    Ok(())
}

pub fn usage() -> String {
    "usage: voxseg <command> [flags]\n\
     commands:\n\
     \x20 preprocess --in <root> --out <root> [--crop D,H,W] [--ratio F] [--threads N] [--dev]\n\
     \x20 synth-data --out <root> [--subjects N] [--extent E] [--seed S] [--tumor-frac F] [--dev]\n\
     \x20 train      --data <root> --out <dir> [--config FILE] [--lr F] [--batch N] [--epochs N]\n\
     \x20            [--patience N] [--val-fraction F] [--loss-mix F] [--dice-stop F] [--seed S]\n\
     \x20            [--base-filters N] [--heads N] [--token-limit N] [--wall-clock]\n\
     \x20 evaluate   --data <root> --ckpt <file> --out <dir>\n\
     \x20 predict    --in <sample-dir> --ckpt <file> --out <dir>\n\
     \x20 plot       --runlog <csv> --out <dir>\n"
        .to_owned()
}

/// Parses and runs one command line (without the binary name); returns the
/// process exit code.
pub fn run(argv: &[String]) -> i32 {
    let Some((command, rest)) = argv.split_first() else {
        eprintln!("{}", usage());
        return 2;
    };
    let args = match Args::parse(rest) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let outcome = match command.as_str() {
        "preprocess" => cmd_preprocess(&args),
        "synth-data" => cmd_synth_data(&args),
        "train" => cmd_train(&args),
        "evaluate" => cmd_evaluate(&args),
        "predict" => cmd_predict(&args),
        "plot" => cmd_plot(&args),
        other => Err(CliError::Input(format!(
            "unknown command {other:?}\n{}",
            usage()
        ))),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_preprocess(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let in_root = args.path("in")?;
    let out_root = args.path("out")?;
    let dev = args.has("dev");

    let mut config = PreprocessConfig {
        extent_divisor: if dev { 16 } else { 64 },
        ..PreprocessConfig::default()
    };
    if let Some(crop) = args.get("crop") {
        let parts: Vec<usize> = crop
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Input(format!("--crop {crop}: {e}")))?;
        if parts.len() != 3 {
            return Err(CliError::Input(format!("--crop {crop}: expected D,H,W")));
        }
        config.crop_target = [parts[0], parts[1], parts[2]];
    }
    if let Some(ratio) = args.get("ratio") {
        config.label_ratio_threshold = ratio
            .parse()
            .map_err(|e| CliError::Input(format!("--ratio {ratio}: {e}")))?;
    }
    let threads = match args.get("threads") {
        None => 1,
        Some(v) => v
            .parse()
            .map_err(|e| CliError::Input(format!("--threads {v}: {e}")))?,
    };
    config.validate().map_err(input_err)?;

    if !in_root.is_dir() {
        return Err(CliError::Input(format!(
            "input root {} is not a directory",
            in_root.display()
        )));
    }
    let summary = run_preprocess_threaded(&in_root, &out_root, &config, threads, |line| {
        println!("{line}")
    })
    .map_err(input_err)?;
    if summary.accepted.is_empty() && summary.skipped.is_empty() && summary.failures.is_empty() {
        println!("warning: no subjects found under {}", in_root.display());
    }
    println!(
        "preprocess: {} accepted, {} skipped, {} failed",
        summary.accepted.len(),
        summary.skipped.len(),
        summary.failures.len()
    );
    write_run_manifest(
        &out_root,
        "preprocess",
        "-",
        &in_root.display().to_string(),
        0,
        started,
    )?;
    if summary.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{} subject(s) failed; first: {} ({})",
            summary.failures.len(),
            summary.failures[0].0,
            summary.failures[0].1
        )))
    }
}

fn cmd_synth_data(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let out_root = args.path("out")?;
    let dev = args.has("dev");
    let mut cfg = SynthConfig::default();
    if let Some(v) = args.get("subjects") {
        cfg.subjects = v
            .parse()
            .map_err(|e| CliError::Input(format!("--subjects {v}: {e}")))?;
    }
    if let Some(v) = args.get("extent") {
        cfg.extent = v
            .parse()
            .map_err(|e| CliError::Input(format!("--extent {v}: {e}")))?;
    }
    if let Some(v) = args.get("seed") {
        cfg.seed = v
            .parse()
            .map_err(|e| CliError::Input(format!("--seed {v}: {e}")))?;
    }
    if let Some(v) = args.get("tumor-frac") {
        cfg.tumor_frac = v
            .parse()
            .map_err(|e| CliError::Input(format!("--tumor-frac {v}: {e}")))?;
    }
    let divisor = if dev { 16 } else { 64 };
    if cfg.extent == 0 || cfg.extent % divisor != 0 {
        return Err(CliError::Input(format!(
            "--extent {} must be a positive multiple of {divisor}{}",
            cfg.extent,
            if dev { " (dev mode)" } else { "" }
        )));
    }
    fs::create_dir_all(&out_root).map_err(input_err)?;
    let ids = generate(&out_root, &cfg).map_err(input_err)?;
    for id in &ids {
        println!("generated {id}");
    }
    write_run_manifest(&out_root, "synth-data", "-", "-", cfg.seed, started)?;
    Ok(())
}

struct TrainSetup {
    train_config: TrainConfig,
    model_config: ModelConfig,
    lr_grid: Option<Vec<f64>>,
    batch_grid: Option<Vec<usize>>,
}

fn train_setup(args: &Args, sample_extent: [usize; 3]) -> Result<TrainSetup, CliError> {
    let mut map = match args.get("config") {
        Some(path) => ConfigMap::from_file(Path::new(path)).map_err(input_err)?,
        None => ConfigMap::default(),
    };
    // Command-line flags override file values.
    for (flag, key) in [
        ("lr", "learning_rate"),
        ("batch", "batch_size"),
        ("epochs", "epochs"),
        ("patience", "patience"),
        ("val-fraction", "val_fraction"),
        ("loss-mix", "loss_mix"),
        ("dice-stop", "dice_stop"),
        ("seed", "seed"),
        ("base-filters", "base_filters"),
        ("heads", "heads"),
        ("token-limit", "attention_token_limit"),
    ] {
        if let Some(v) = args.get(flag) {
            map.set(key, v.to_owned());
        }
    }

    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        learning_rate: map.f64_or("learning_rate", defaults.learning_rate).map_err(input_err)?,
        batch_size: map.usize_or("batch_size", defaults.batch_size).map_err(input_err)?,
        epochs: map.usize_or("epochs", defaults.epochs).map_err(input_err)?,
        patience: map.usize_or("patience", defaults.patience).map_err(input_err)?,
        val_fraction: map.f64_or("val_fraction", defaults.val_fraction).map_err(input_err)?,
        seed: map.u64_or("seed", defaults.seed).map_err(input_err)?,
        loss_mix: map.f64_or("loss_mix", defaults.loss_mix).map_err(input_err)?,
        dice_stop: match map.get("dice_stop") {
            None => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|e| CliError::Input(format!("dice_stop={s}: {e}")))?,
            ),
        },
    };

    map.set(
        "input_extent",
        format!("{},{},{}", sample_extent[0], sample_extent[1], sample_extent[2]),
    );
    let model_config = model_config_from_map(&map).map_err(input_err)?;

    Ok(TrainSetup {
        train_config,
        model_config,
        lr_grid: map.f64_list("lr_grid").map_err(input_err)?,
        batch_grid: map.usize_list("batch_grid").map_err(input_err)?,
    })
}

fn train_error_to_cli(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { epoch, step } => CliError::Numerical(format!(
            "non-finite loss at epoch {epoch}, step {step}; lower the learning rate"
        )),
        other => CliError::Input(other.to_string()),
    }
}

fn persist_outcome(
    out_dir: &Path,
    model_config: &ModelConfig,
    outcome: &TrainOutcome,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(input_err)?;
    fs::write(out_dir.join("runlog.csv"), runlog_to_csv(&outcome.run_log))
        .map_err(input_err)?;
    let params: Vec<voxseg_core::model::Param<f32>> = outcome
        .best_params
        .iter()
        .map(|(name, tensor)| voxseg_core::model::Param {
            name: name.clone(),
            tensor: tensor.clone(),
        })
        .collect();
    write_checkpoint(&params, &out_dir.join("best.ckpt")).map_err(input_err)?;
    fs::write(
        out_dir.join("best.ckpt.cfg"),
        model_config_text(model_config),
    )
    .map_err(input_err)?;

    let log = &outcome.run_log;
    let best = log.best();
    let last = log.last();
    let summary = format!(
        "epochs_run={}\nbest_epoch={}\nstopped_early={}\nreached_dice_target={}\nbest_val_loss={:.6}\nbest_val_acc={:.6}\nfinal_train_loss={:.6}\nfinal_train_acc={:.6}\nfinal_train_macro_dice={:.6}\n",
        log.epochs.len(),
        log.best_epoch,
        log.stopped_early,
        log.reached_dice_target,
        best.val_loss,
        best.val_acc,
        last.train_loss,
        last.train_acc,
        last.train_macro_dice(),
    );
    fs::write(out_dir.join("summary.txt"), summary).map_err(input_err)?;
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let data_root = args.path("data")?;
    let out_dir = args.path("out")?;
    let clock = if args.has("wall-clock") {
        Clock::Wall
    } else {
        Clock::Virtual
    };

    let samples = load_manifest_samples(&data_root).map_err(input_err)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!(
            "no samples under {} (missing or empty manifest)",
            data_root.display()
        )));
    }
    let shape = samples[0].image.shape().to_vec();
    let extent = [shape[1], shape[2], shape[3]];
    let setup = train_setup(args, extent)?;
    setup.model_config.validate().map_err(input_err)?;

    fs::create_dir_all(&out_dir).map_err(input_err)?;

    if setup.lr_grid.is_some() || setup.batch_grid.is_some() {
        let lrs = setup
            .lr_grid
            .unwrap_or_else(|| vec![setup.train_config.learning_rate]);
        let batches = setup
            .batch_grid
            .unwrap_or_else(|| vec![setup.train_config.batch_size]);
        let model_config = setup.model_config.clone();
        let cells: Vec<GridCell> = run_grid(
            |seed| UNet3DMHA::build(model_config.clone(), seed),
            &samples,
            &lrs,
            &batches,
            &setup.train_config,
            clock,
        )
        .map_err(train_error_to_cli)?;
        for cell in &cells {
            let sub = out_dir.join(format!("lr{}_b{}", cell.learning_rate, cell.batch_size));
            fs::create_dir_all(&sub).map_err(input_err)?;
            fs::write(sub.join("runlog.csv"), runlog_to_csv(&cell.run_log))
                .map_err(input_err)?;
            println!(
                "cell lr={} batch={}: {} epochs, best val_loss {:.6}",
                cell.learning_rate,
                cell.batch_size,
                cell.run_log.epochs.len(),
                cell.run_log.best().val_loss
            );
        }
        fs::write(out_dir.join("grid_summary.txt"), grid_summary(&cells))
            .map_err(input_err)?;
    } else {
        let mut model =
            UNet3DMHA::build(setup.model_config.clone(), setup.train_config.seed)
                .map_err(input_err)?;
        let outcome =
            train(&mut model, &samples, &setup.train_config, clock).map_err(train_error_to_cli)?;
        persist_outcome(&out_dir, &setup.model_config, &outcome)?;
        let log = &outcome.run_log;
        println!(
            "trained {} epochs; best epoch {} (val_loss {:.6}); final train macro dice {:.4}",
            log.epochs.len(),
            log.best_epoch,
            log.best().val_loss,
            log.last().train_macro_dice(),
        );
    }

    write_run_manifest(
        &out_dir,
        "train",
        args.get("config").unwrap_or("-"),
        &data_root.display().to_string(),
        setup.train_config.seed,
        started,
    )
}

fn load_model_from_checkpoint(ckpt: &Path) -> Result<UNet3DMHA<f32>, CliError> {
    let cfg_path = PathBuf::from(format!("{}.cfg", ckpt.display()));
    let model_config = crate::config::read_model_config(&cfg_path).map_err(|e| {
        CliError::Input(format!(
            "cannot read model config sidecar {}: {e}",
            cfg_path.display()
        ))
    })?;
    let mut model = UNet3DMHA::build(model_config, 0).map_err(input_err)?;
    let params = read_checkpoint(ckpt).map_err(input_err)?;
    model.load_params(&params).map_err(input_err)?;
    Ok(model)
}

fn cmd_evaluate(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let data_root = args.path("data")?;
    let ckpt = args.path("ckpt")?;
    let out_dir = args.path("out")?;

    let model = load_model_from_checkpoint(&ckpt)?;
    let samples = load_manifest_samples(&data_root).map_err(input_err)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!(
            "no samples under {}",
            data_root.display()
        )));
    }
    let report = evaluate(&model, &samples).map_err(train_error_to_cli)?;

    fs::create_dir_all(&out_dir).map_err(input_err)?;
    fs::write(out_dir.join("report.csv"), report_csv(&report)).map_err(input_err)?;
    fs::write(out_dir.join("report.txt"), report_text(&report)).map_err(input_err)?;
    print!("{}", report_text(&report));
    write_run_manifest(
        &out_dir,
        "evaluate",
        "-",
        &data_root.display().to_string(),
        0,
        started,
    )
}

fn cmd_predict(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let sample_dir = args.path("in")?;
    let ckpt = args.path("ckpt")?;
    let out_dir = args.path("out")?;

    let model = load_model_from_checkpoint(&ckpt)?;
    let fallback = sample_dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sample");
    let sample = load_sample(&sample_dir, fallback).map_err(|e: StoreError| input_err(e))?;

    let cfg = model.config();
    let expect = [
        cfg.in_channels,
        cfg.input_extent[0],
        cfg.input_extent[1],
        cfg.input_extent[2],
    ];
    if sample.image.shape() != expect {
        return Err(CliError::Input(format!(
            "sample shape {:?} does not match checkpoint input {:?}",
            sample.image.shape(),
            expect
        )));
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.leaf(sample.image.clone(), false);
    let probs = model
        .forward(&mut tape, &bound, x)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let labels = predict_labels(tape.value(probs));

    fs::create_dir_all(&out_dir).map_err(input_err)?;
    save_label_grid(&labels, &out_dir.join("pred.smp")).map_err(input_err)?;
    let slices = write_overlays(&sample.image, &labels, &out_dir.join("slices"))
        .map_err(input_err)?;
    println!(
        "predicted {}: {} axial overlay slices written",
        sample.subject_id, slices
    );
    write_run_manifest(
        &out_dir,
        "predict",
        "-",
        &sample_dir.display().to_string(),
        0,
        started,
    )
}

fn cmd_plot(args: &Args) -> Result<(), CliError> {
    let started = unix_now();
    let runlog = args.path("runlog")?;
    let out_dir = args.path("out")?;
    let text = fs::read_to_string(&runlog).map_err(input_err)?;
    let epochs = parse_runlog_csv(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", runlog.display())))?;
    fs::create_dir_all(&out_dir).map_err(input_err)?;
    plot_runlog(&epochs, &out_dir).map_err(input_err)?;
    println!("wrote accuracy.svg and loss.svg ({} epochs)", epochs.len());
    write_run_manifest(
        &out_dir,
        "plot",
        "-",
        &runlog.display().to_string(),
        0,
        started,
    )
}
