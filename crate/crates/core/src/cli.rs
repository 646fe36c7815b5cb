//! Command-line front end. `run` returns the process exit code:
//! 0 success, 1 usage error, 2 data error, 3 verification failure.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{evaluate_baseline, BaselineMethod, CannyParams};
use crate::checkpoint::Checkpoint;
use crate::config::{apply_overrides, load_json, write_json};
use crate::data::{
    augment_dataset, center_crop_sample, generate_corpus, load_manifest, make_eoc_splits, save_dataset, Dataset,
    Sample, Scenario, SyntheticSpec,
};
use crate::error::Error;
use crate::gradcheck::{self, Fault, REL_TOLERANCE};
use crate::network::{MtlNetwork, NetworkConfig};
use crate::optim::SgdState;
use crate::report::{emit_report, write_baseline_csv, EvalReport};
use crate::rng::Rng;
use crate::training::{predict, train_epoch, EpochSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const TIMING_LOG: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const VALIDATION_JSON: &str = "validation.json";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";
pub const THREADS_ENV: &str = "MTLSAR_THREADS";

/// Stream separation for derived seeds.
const SEED_INIT: u64 = 1;
const SEED_AUGMENT: u64 = 2;
const SEED_EPOCH_BASE: u64 = 1 << 32;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }

    fn verify(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::LabelOutOfRange { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mtlsar", version, about = "Joint SAR target recognition and segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic chip corpus with masks and a manifest.
    Generate(GenerateArgs),
    /// Train the network on a dataset split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scenario's test split.
    Eval(EvalArgs),
    /// Score a classical segmenter on a scenario's test split.
    Baseline(BaselineArgs),
    /// Finite-difference verification of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Soc,
    EocD,
    EocC,
    EocV,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Soc => Scenario::Soc,
            ScenarioArg::EocD => Scenario::EocDepression,
            ScenarioArg::EocC => Scenario::EocConfiguration,
            ScenarioArg::EocV => Scenario::EocVersion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Otsu,
    Canny,
    #[value(hide = true)]
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    ConvSign,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator settings (JSON); defaults when omitted.
    #[arg(long = "config", alias = "spec")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of classes, taken from the default class table.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Override a setting, e.g. `plan.train_per_class=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Network and training settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "lambda-rec")]
    pub lambda_rec: Option<f64>,
    #[arg(long = "lambda-seg")]
    pub lambda_seg: Option<f64>,
    #[arg(long, value_enum, default_value = "soc")]
    pub scenario: ScenarioArg,
    /// Continue from a checkpoint at its stored epoch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "soc")]
    pub scenario: ScenarioArg,
    /// Number of overlay images to write.
    #[arg(long, default_value_t = 8)]
    pub overlays: usize,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "soc")]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 1.4)]
    pub sigma: f64,
    /// Low hysteresis threshold as a gradient-magnitude quantile.
    #[arg(long, default_value_t = 0.7)]
    pub low: f64,
    /// High hysteresis threshold as a gradient-magnitude quantile.
    #[arg(long, default_value_t = 0.9)]
    pub high: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network settings for the whole-network check (JSON); a miniature
    /// topology when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per layer type.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long = "skip-network")]
    pub skip_network: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long = "inject-fault", value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

/// Parses arguments, runs the command and returns the exit code. Messages go
/// to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.message);
        return e.code;
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(p) => load_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(c) = args.classes {
        if spec.classes.is_empty() {
            spec.num_classes = c;
        } else if c <= spec.classes.len() {
            spec.classes.truncate(c);
        } else {
            return Err(CliError::usage(format!(
                "--classes {c} exceeds the {} classes described in the config",
                spec.classes.len()
            )));
        }
    }
    let spec = apply_overrides(&spec, &args.overrides)?;
    spec.validate()?;
    let dataset = generate_corpus(&spec, args.seed)?;
    ensure_dir(&args.out)?;
    save_dataset(&dataset, &args.out)?;
    write_json(&args.out.join("generator.json"), &spec)?;
    println!(
        "wrote {} chips of {} classes to {}",
        dataset.len(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}

/// Defaults adapted to the dataset, then the config file, overrides and flags.
fn resolve_train_config(args: &TrainArgs, dataset: &Dataset, base: NetworkConfig) -> CliResult<NetworkConfig> {
    let mut cfg = base;
    if let Some(p) = &args.config {
        let file: serde_json::Value = load_json(p)?;
        let overrides: Vec<String> = match file {
            serde_json::Value::Object(map) => map.into_iter().map(|(k, v)| format!("{k}={v}")).collect(),
            _ => return Err(CliError::usage(format!("{}: expected a JSON object", p.display()))),
        };
        cfg = apply_overrides(&cfg, &overrides)?;
    }
    cfg = apply_overrides(&cfg, &args.overrides)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lambda_rec {
        cfg.lambda_rec = v;
    }
    if let Some(v) = args.lambda_seg {
        cfg.lambda_seg = v;
    }
    cfg.validate()?;
    if cfg.num_classes != dataset.num_classes() || cfg.num_seg_classes < dataset.num_seg_classes() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "config expects C={} V={}, dataset has C={} V={}",
                cfg.num_classes,
                cfg.num_seg_classes,
                dataset.num_classes(),
                dataset.num_seg_classes()
            ),
        });
    }
    Ok(cfg)
}

/// Fixed-size evaluation crops of every test chip.
fn eval_crops(samples: &[Sample], size: [usize; 2]) -> CliResult<Vec<Sample>> {
    if size[0] != size[1] {
        return Err(CliError::usage("evaluation crops must be square"));
    }
    Ok(samples
        .iter()
        .map(|s| center_crop_sample(s, size[0]))
        .collect::<crate::Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct Validation {
    pub scenario: String,
    pub epoch: usize,
    pub samples: usize,
    pub recognition_ratio: f64,
    pub pixel_accuracy: f64,
}

fn evaluate(
    net: &mut MtlNetwork,
    scenario: Scenario,
    class_names: &[String],
    test: &[Sample],
) -> CliResult<(EvalReport, Vec<Vec<u8>>)> {
    let p = predict(net, test, net.config.batch_size)?;
    let report = EvalReport::build(
        Some(scenario),
        class_names,
        test,
        &p.labels,
        &p.masks,
        net.config.num_seg_classes,
    )?;
    Ok((report, p.masks))
}

fn open_log(path: &Path, header: &str, append: bool) -> CliResult<fs::File> {
    let exists = path.exists();
    let mut f = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        fs::File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if !(append && exists) {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn log_row(f: &mut fs::File, path: &Path, row: &str) -> CliResult<()> {
    writeln!(f, "{row}").map_err(|e| Error::io(path, e).into())
}

pub fn format_log_row(s: &EpochSummary) -> String {
    format!("{},{},{},{},{},{}", s.epoch, s.lr, s.loss, s.loss_rec, s.loss_seg, s.train_acc)
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,loss_rec,loss_seg,train_acc";

pub fn cmd_train(args: &TrainArgs) -> CliResult<Validation> {
    let dataset = load_manifest(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let chip = dataset.spatial_size()?;
    let resume = args.resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;

    let base = match &resume {
        Some(ck) => ck.config.clone(),
        None => NetworkConfig {
            num_classes: dataset.num_classes(),
            num_seg_classes: dataset.num_seg_classes(),
            input_size: [chip[0].min(NetworkConfig::default().input_size[0]), chip[1].min(NetworkConfig::default().input_size[1])],
            ..NetworkConfig::default()
        },
    };
    let cfg = resolve_train_config(args, &dataset, base)?;
    if cfg.input_size[0] > chip[0] || cfg.input_size[1] > chip[1] || cfg.input_size[0] != cfg.input_size[1] {
        return Err(CliError::usage(format!(
            "input size {:?} must be square and fit the {}x{} chips",
            cfg.input_size, chip[0], chip[1]
        )));
    }
    let scenario: Scenario = args.scenario.into();
    let (train_chips, test_chips) = make_eoc_splits(&dataset, scenario)?;
    let crop = cfg.input_size[0];
    let train = augment_dataset(
        &train_chips,
        cfg.crops_per_chip.max(1),
        crop,
        cfg.class_quota,
        &mut Rng::derive(cfg.seed, SEED_AUGMENT),
    )?;
    let test = eval_crops(&test_chips.samples, cfg.input_size)?;

    let (mut net, start_epoch) = match &resume {
        Some(ck) => {
            if ck.class_names != dataset.class_names {
                return Err(CliError {
                    code: EXIT_DATA,
                    message: "checkpoint classes differ from the dataset's".into(),
                });
            }
            let adjusted = Checkpoint { config: cfg.clone(), ..ck.clone() };
            (adjusted.restore()?, ck.epoch)
        }
        None => (MtlNetwork::build(&cfg, &mut Rng::derive(cfg.seed, SEED_INIT))?, 0),
    };

    ensure_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_ECHO), &cfg)?;
    let log_path = args.out.join(TRAIN_LOG);
    let timing_path = args.out.join(TIMING_LOG);
    let append = resume.is_some();
    let mut log = open_log(&log_path, TRAIN_LOG_HEADER, append)?;
    let mut timing = open_log(&timing_path, "epoch,seconds", append)?;

    let mut state = SgdState::new(cfg.lr, cfg.lr_decay, cfg.lr_decay_period);
    state.epoch = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut rng = Rng::derive(cfg.seed, SEED_EPOCH_BASE + epoch as u64);
        let summary = train_epoch(&mut net, &train.samples, &mut state, &mut rng)?;
        let secs = started.elapsed().as_secs_f64();
        log_row(&mut log, &log_path, &format_log_row(&summary))?;
        log_row(&mut timing, &timing_path, &format!("{epoch},{secs:.3}"))?;
        println!(
            "epoch {epoch:>3}  lr {:<8} loss {:.5} (rec {:.5}, seg {:.5})  train acc {:.4}  {secs:.1}s",
            summary.lr, summary.loss, summary.loss_rec, summary.loss_seg, summary.train_acc
        );
    }
    let done = state.epoch.max(start_epoch);
    Checkpoint::capture(&net, done, &dataset.class_names)?.save(&args.out.join(CHECKPOINT_FILE))?;

    let (report, _) = evaluate(&mut net, scenario, &dataset.class_names, &test)?;
    let validation = Validation {
        scenario: scenario.tag().into(),
        epoch: done,
        samples: test.len(),
        recognition_ratio: report.recognition_ratio(),
        pixel_accuracy: report.pixel_accuracy(),
    };
    write_json(&args.out.join(VALIDATION_JSON), &validation)?;
    println!(
        "{} test: recognition {:.2}%  pixel accuracy {:.2}%",
        scenario,
        100.0 * validation.recognition_ratio,
        100.0 * validation.pixel_accuracy
    );
    Ok(validation)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut net = ck.restore()?;
    if let Some(b) = args.batch_size {
        net.config.batch_size = b.max(1);
    }
    let dataset = load_manifest(&args.data)?;
    if !ck.class_names.is_empty() && ck.class_names != dataset.class_names {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "checkpoint classes {:?} differ from dataset classes {:?}",
                ck.class_names, dataset.class_names
            ),
        });
    }
    let scenario: Scenario = args.scenario.into();
    let (_, test_chips) = make_eoc_splits(&dataset, scenario)?;
    let test = eval_crops(&test_chips.samples, net.config.input_size)?;
    let (report, masks) = evaluate(&mut net, scenario, &dataset.class_names, &test)?;
    emit_report(&report, &test, &masks, args.overlays, &args.out)?;
    println!(
        "{} test ({} samples): recognition {:.2}%  pixel accuracy {:.2}%",
        scenario,
        test.len(),
        100.0 * report.recognition_ratio(),
        100.0 * report.pixel_accuracy()
    );
    Ok(report)
}

pub fn cmd_baseline(args: &BaselineArgs) -> CliResult<()> {
    let method = match args.method {
        MethodArg::Otsu => BaselineMethod::Otsu,
        MethodArg::Canny => {
            let p = CannyParams { sigma: args.sigma, low: args.low, high: args.high };
            p.validate()?;
            BaselineMethod::Canny(p)
        }
        MethodArg::Truth => BaselineMethod::GroundTruth,
    };
    let dataset = load_manifest(&args.data)?;
    let scenario: Scenario = args.scenario.into();
    let (_, test) = make_eoc_splits(&dataset, scenario)?;
    let report = evaluate_baseline(method, &test.samples, &dataset.class_names)?;
    ensure_dir(&args.out)?;
    write_baseline_csv(&report, &args.out.join(BASELINE_CSV))?;
    write_json(&args.out.join("baseline.json"), &report)?;
    println!(
        "{method} on {scenario} ({} chips): pixel accuracy {:.2}%{}",
        test.len(),
        100.0 * report.overall.overall(),
        if report.degenerate > 0 {
            format!(" ({} constant chips)", report.degenerate)
        } else {
            String::new()
        }
    );
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let base = match &args.config {
        Some(p) => load_json(p)?,
        None => gradcheck::miniature_config(),
    };
    let cfg: NetworkConfig = apply_overrides(&base, &args.overrides)?;
    cfg.validate()?;
    let fault = match args.inject_fault {
        Some(FaultArg::ConvSign) => Fault::ConvBackwardSign,
        None => Fault::None,
    };
    if args.instances == 0 {
        return Err(CliError::usage("--instances must be positive"));
    }
    let mut results = Vec::new();
    for kind in gradcheck::LayerKind::ALL {
        results.push(gradcheck::check_layer(kind, args.instances, args.seed, fault)?);
    }
    if !args.skip_network {
        results.push(gradcheck::check_network(&cfg, 2, args.seed)?);
    }
    println!("{:<12} {:>9} {:>14}  result", "check", "entries", "max rel err");
    for r in &results {
        println!(
            "{:<12} {:>9} {:>14.3e}  {}",
            r.name,
            r.entries,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        write_json(&dir.join(GRADCHECK_JSON), &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verify(format!(
            "gradient check failed (tolerance {REL_TOLERANCE:e}): {}",
            failed.join(", ")
        )))
    }
}
