//! `saekit` command line: dataset generation, training, evaluation,
//! single-image prediction, gradient checking, and layer summaries.
//!
//! Every command is deterministic given its flag set. Commands that write
//! artifacts drop a `run.json` echo of the fully resolved configuration into
//! their output directory, so a run can be reproduced from its outputs alone.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure (NaN,
//! divergence, failed gradient check), 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use saekit::autograd::Tape;
use saekit::check::full_suite;
use saekit::data::{
    load_dataset, read_pgm_gray, replicate3, save_dataset, synth_classification,
    synth_segmentation, write_pgm_mask, Dataset, Mask, SegSample, Split,
};
use saekit::error::{Error, Result};
use saekit::metrics::{
    classification_report, render_classification, render_segmentation, seg_metrics,
    ClassSegMetrics, SegmentationReport,
};
use saekit::net::{
    render_summary, saetcn_forward, sasnet_forward, summarize, NetworkConfig, SaetcnConfig,
    SasnetConfig,
};
use saekit::nn::{softmax, Mode};
use saekit::params::{ParamStore, Session};
use saekit::tensor::Tensor;
use saekit::train::{fit, load_checkpoint, render_csv, AdamState, TrainPlan};

#[derive(Parser)]
#[command(name = "saekit", version, about = "SAETCN / SAS-Net training and evaluation kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic PGM dataset with an 80:20 split manifest.
    GenData(GenDataArgs),
    /// Train a network; writes checkpoints, a CSV log, and run.json.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split; writes the metric report.
    Eval(EvalArgs),
    /// Run one image through a checkpoint.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the layer table and parameter count for a config.
    Summary(SummaryArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKindArg {
    /// Labeled grayscale images, four classes.
    Cls,
    /// Image / class-id mask pairs.
    Seg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Saetcn,
    Sasnet,
}

impl ArchArg {
    fn name(self) -> &'static str {
        match self {
            ArchArg::Saetcn => "saetcn",
            ArchArg::Sasnet => "sasnet",
        }
    }

    fn default_config(self) -> NetworkConfig {
        match self {
            ArchArg::Saetcn => NetworkConfig::Saetcn(SaetcnConfig::default()),
            ArchArg::Sasnet => NetworkConfig::Sasnet(SasnetConfig::default()),
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn to_filter(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset kind.
    #[arg(long, value_enum)]
    kind: DataKindArg,
    /// Samples per class (cls) or total pairs (seg).
    #[arg(long)]
    n: usize,
    /// Square image edge in pixels.
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture; required unless --config names one.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// JSON config file: network fields plus an optional "plan" object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, train_log.csv, and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Manifest split to train on.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    // Plan overrides. Precedence: flags > config file > defaults.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for parameter init and epoch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write ckpt_epochN.saek every N epochs (0: final model only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json, report.txt, and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Manifest split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// BF1 boundary tolerance in pixels (segmentation only).
    #[arg(long, default_value_t = 2)]
    boundary_tol: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Output directory; required for segmentation (mask.pgm lands there).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Keep only one of the two whole-network entries; ops and blocks
    /// always run.
    #[arg(long, value_enum, default_value_t = NetFilter::All)]
    arch: NetFilter,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum NetFilter {
    Saetcn,
    Sasnet,
    All,
}

#[derive(Args)]
struct SummaryArgs {
    /// Network config JSON (a "plan" key is tolerated and ignored).
    #[arg(long)]
    config: PathBuf,
    /// Square probe input edge for the output-shape column.
    #[arg(long, default_value_t = 224)]
    size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests exit 0; genuine parse problems are
            // validation failures, exit 1 (not clap's default 2, which this
            // tool reserves for numeric failures).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_numeric() {
                2
            } else if matches!(e, Error::Io(_)) {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|()| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a).map(|()| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a).map(|()| ExitCode::SUCCESS),
        Command::Predict(a) => cmd_predict(a).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Summary(a) => cmd_summary(a).map(|()| ExitCode::SUCCESS),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_run_json(dir: &Path, value: Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(dir.join("run.json"), text)?;
    Ok(())
}

/// Full network config as a JSON value, "arch" key included.
fn net_value(net: &NetworkConfig) -> Value {
    serde_json::from_str(&net.to_json()).expect("to_json emits valid JSON")
}

/// Reads a config file holding network fields plus an optional "plan"
/// object with training hyperparameters.
fn read_config_file(path: &Path) -> Result<(NetworkConfig, Option<TrainPlan>)> {
    let text = fs::read_to_string(path)?;
    let mut v: Value = serde_json::from_str(&text)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig("config file must hold a JSON object".into()))?;
    let plan = match obj.remove("plan") {
        Some(p) => Some(serde_json::from_value::<TrainPlan>(p)?),
        None => None,
    };
    let net = NetworkConfig::from_json(&Value::Object(obj.clone()).to_string())?;
    Ok((net, plan))
}

/// Network and plan from `--arch` / `--config`. A config file names its own
/// arch; a contradicting flag is rejected rather than silently reinterpreting
/// the file's arch-specific fields.
fn resolve_network(arch: Option<ArchArg>, config: Option<&Path>) -> Result<(NetworkConfig, TrainPlan)> {
    let (file_net, file_plan) = match config {
        Some(p) => {
            let (n, pl) = read_config_file(p)?;
            (Some(n), pl)
        }
        None => (None, None),
    };
    let net = match (arch, file_net) {
        (Some(a), Some(n)) if a.name() != n.arch_name() => {
            return Err(Error::InvalidConfig(format!(
                "--arch {} contradicts the config file's arch {}",
                a.name(),
                n.arch_name()
            )));
        }
        (_, Some(n)) => n,
        (Some(a), None) => a.default_config(),
        (None, None) => {
            return Err(Error::InvalidConfig("pass --arch or --config".into()));
        }
    };
    Ok((net, file_plan.unwrap_or_default()))
}

/// One [3, H, W] image as a batch of one.
fn batch_of_one(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Tensor::new(shape, image.data().to_vec())
}

/// Eval-mode classifier probabilities for one image, shape [1, classes].
fn forward_cls(cfg: &SaetcnConfig, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let x = batch_of_one(image)?;
    let tape = Tape::new();
    let sess = Session::new(&tape, store, Mode::Eval);
    let logits = saetcn_forward(cfg, &sess, tape.leaf(x, false))?;
    softmax(&logits.value())
}

/// Eval-mode segmenter prediction for one image: per-pixel argmax over the
/// logit maps, first class winning ties.
fn forward_seg_mask(cfg: &SasnetConfig, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Mask> {
    let x = batch_of_one(image)?;
    let tape = Tape::new();
    let sess = Session::new(&tape, store, Mode::Eval);
    let logits = sasnet_forward(cfg, &sess, tape.leaf(x, false))?;
    let v = logits.value();
    let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    let d = v.data();
    let mut mask = Mask::zeros(h, w);
    for p in 0..h * w {
        let mut best = 0usize;
        for k in 1..c {
            if d[k * h * w + p] > d[best * h * w + p] {
                best = k;
            }
        }
        mask.data[p] = best as u8;
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let (ds, kind) = match a.kind {
        DataKindArg::Cls => (synth_classification(a.n, a.size, a.seed)?, "classification"),
        DataKindArg::Seg => (synth_segmentation(a.n, a.size, a.seed)?, "segmentation"),
    };
    save_dataset(&ds, &a.out, a.seed)?;
    write_run_json(
        &a.out,
        json!({
            "command": "gen-data",
            "kind": kind,
            "n": a.n,
            "size": a.size,
            "seed": a.seed,
            "out": path_str(&a.out),
        }),
    )?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (net, mut plan) = resolve_network(a.arch, a.config.as_deref())?;
    if let Some(v) = a.epochs {
        plan.epochs = v;
    }
    if let Some(v) = a.batch {
        plan.batch_size = v;
    }
    if let Some(v) = a.lr {
        plan.lr = v;
    }
    if let Some(v) = a.seed {
        plan.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        plan.checkpoint_every = v;
    }

    let data = load_dataset(&a.data, a.split.to_filter())?;
    let (mut store, mut opt) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != net {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint config ({}) does not match the requested config ({})",
                    ckpt.config.arch_name(),
                    net.arch_name()
                )));
            }
            let opt = ckpt.opt.ok_or_else(|| {
                Error::InvalidData("checkpoint carries no optimizer state; cannot resume".into())
            })?;
            (ckpt.store, opt)
        }
        None => (net.init_params::<f32>(plan.seed)?, AdamState::new(plan.lr)),
    };

    write_run_json(
        &a.out,
        json!({
            "command": "train",
            "network": net_value(&net),
            "plan": serde_json::to_value(&plan)?,
            "data": path_str(&a.data),
            "split": a.split.name(),
            "out": path_str(&a.out),
            "resume": a.resume.as_deref().map(path_str),
        }),
    )?;

    let log = fit(&net, &mut store, &mut opt, &data, &plan, Some(&a.out))?;
    fs::write(a.out.join("train_log.csv"), render_csv(&log))?;
    for row in &log {
        println!("epoch {:>4}  loss {:.6}  accuracy {:.4}", row.epoch, row.loss, row.accuracy);
    }
    println!("model written to {}", a.out.join("model.saek").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Per-image segmentation reports averaged over the split: each class metric
/// is the mean across images (BF1 over the images where it is defined), and
/// pixel accuracy is pooled over all pixels.
fn eval_segmentation(
    cfg: &SasnetConfig,
    store: &ParamStore<f32>,
    samples: &[SegSample],
    classes: usize,
    boundary_tol: usize,
) -> Result<SegmentationReport> {
    #[derive(Clone, Default)]
    struct Acc {
        iou: f64,
        dsc: f64,
        spec: f64,
        mcc: f64,
        acc: f64,
        bf1_sum: f64,
        bf1_n: usize,
        degenerate: bool,
    }
    let mut accs = vec![Acc::default(); classes];
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let pred = forward_seg_mask(cfg, store, &s.image)?;
        if (pred.h, pred.w) != (s.mask.h, s.mask.w) {
            return Err(Error::InvalidData(format!(
                "prediction is {}x{} but the mask is {}x{}",
                pred.h, pred.w, s.mask.h, s.mask.w
            )));
        }
        let r = seg_metrics(&pred.data, &s.mask.data, pred.h, pred.w, classes, boundary_tol)?;
        for (acc, m) in accs.iter_mut().zip(&r.per_class) {
            acc.iou += m.iou;
            acc.dsc += m.dsc;
            acc.spec += m.specificity;
            acc.mcc += m.mcc;
            acc.acc += m.accuracy;
            if let Some(b) = m.bf1 {
                acc.bf1_sum += b;
                acc.bf1_n += 1;
            }
            acc.degenerate |= m.specificity_degenerate;
        }
        correct += pred.data.iter().zip(&s.mask.data).filter(|(p, t)| p == t).count();
        total += pred.data.len();
    }
    let n = samples.len() as f64;
    let per_class = accs
        .into_iter()
        .enumerate()
        .map(|(class, a)| ClassSegMetrics {
            class,
            iou: a.iou / n,
            dsc: a.dsc / n,
            specificity: a.spec / n,
            specificity_degenerate: a.degenerate,
            mcc: a.mcc / n,
            bf1: (a.bf1_n > 0).then(|| a.bf1_sum / a.bf1_n as f64),
            accuracy: a.acc / n,
        })
        .collect();
    Ok(SegmentationReport { per_class, pixel_accuracy: correct as f64 / total as f64 })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, a.split.to_filter())?;
    if data.is_empty() {
        return Err(Error::InvalidData(format!(
            "split '{}' of {} is empty",
            a.split.name(),
            a.data.display()
        )));
    }
    let (report_json, table) = match (&ckpt.config, &data) {
        (NetworkConfig::Saetcn(cfg), Dataset::Classification { samples, num_classes }) => {
            if cfg.num_classes != *num_classes {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint head has {} classes but the dataset manifest says {}",
                    cfg.num_classes, num_classes
                )));
            }
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut probs = Vec::with_capacity(samples.len() * cfg.num_classes);
            for s in samples {
                probs.extend_from_slice(forward_cls(cfg, &ckpt.store, &s.image)?.data());
            }
            let probs = Tensor::new(vec![samples.len(), cfg.num_classes], probs)?;
            let report = classification_report(&probs, &labels)?;
            (serde_json::to_value(&report)?, render_classification(&report))
        }
        (NetworkConfig::Sasnet(cfg), Dataset::Segmentation { samples, num_classes }) => {
            if cfg.num_out_channels != *num_classes {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint emits {} channels but the dataset manifest says {} classes",
                    cfg.num_out_channels, num_classes
                )));
            }
            let report = eval_segmentation(cfg, &ckpt.store, samples, *num_classes, a.boundary_tol)?;
            (serde_json::to_value(&report)?, render_segmentation(&report))
        }
        (cfg, data) => {
            let data_kind = match data {
                Dataset::Classification { .. } => "classification",
                Dataset::Segmentation { .. } => "segmentation",
            };
            return Err(Error::InvalidData(format!(
                "checkpoint is a {} model but the dataset is a {} set",
                cfg.arch_name(),
                data_kind
            )));
        }
    };
    fs::create_dir_all(&a.out)?;
    let mut text = serde_json::to_string_pretty(&report_json)?;
    text.push('\n');
    fs::write(a.out.join("report.json"), text)?;
    fs::write(a.out.join("report.txt"), &table)?;
    write_run_json(
        &a.out,
        json!({
            "command": "eval",
            "checkpoint": path_str(&a.checkpoint),
            "network": net_value(&ckpt.config),
            "data": path_str(&a.data),
            "split": a.split.name(),
            "boundary_tol": a.boundary_tol,
            "samples": data.len(),
            "out": path_str(&a.out),
        }),
    )?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let image = replicate3(&read_pgm_gray(&a.image)?)?;
    match &ckpt.config {
        NetworkConfig::Saetcn(cfg) => {
            let probs = forward_cls(cfg, &ckpt.store, &image)?;
            let d = probs.data();
            let best = d
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).expect("softmax output is finite"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            for (c, p) in d.iter().enumerate() {
                println!("class {c}: {p:.6}");
            }
            println!("prediction: class {best}");
            if let Some(out) = &a.out {
                fs::create_dir_all(out)?;
                let mut text = serde_json::to_string_pretty(&json!({
                    "probabilities": d,
                    "prediction": best,
                }))?;
                text.push('\n');
                fs::write(out.join("probs.json"), text)?;
                write_run_json(
                    out,
                    json!({
                        "command": "predict",
                        "checkpoint": path_str(&a.checkpoint),
                        "image": path_str(&a.image),
                        "out": path_str(out),
                    }),
                )?;
            }
        }
        NetworkConfig::Sasnet(cfg) => {
            let out = a.out.as_ref().ok_or_else(|| {
                Error::InvalidConfig("segmentation predict needs --out for the mask".into())
            })?;
            let mask = forward_seg_mask(cfg, &ckpt.store, &image)?;
            let mut counts = vec![0usize; cfg.num_out_channels];
            for &v in &mask.data {
                counts[v as usize] += 1;
            }
            fs::create_dir_all(out)?;
            write_pgm_mask(&out.join("mask.pgm"), &mask)?;
            write_run_json(
                out,
                json!({
                    "command": "predict",
                    "checkpoint": path_str(&a.checkpoint),
                    "image": path_str(&a.image),
                    "out": path_str(out),
                }),
            )?;
            for (c, n) in counts.iter().enumerate() {
                println!("class {c}: {n} px");
            }
            println!("mask written to {}", out.join("mask.pgm").display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let entries = full_suite(a.seed)?;
    let mut failures = 0usize;
    for e in &entries {
        let keep = match a.arch {
            NetFilter::All => true,
            NetFilter::Saetcn => e.name != "net.sasnet_w16",
            NetFilter::Sasnet => e.name != "net.saetcn_w16",
        };
        if !keep {
            continue;
        }
        let status = if e.report.ok() {
            "ok  "
        } else {
            failures += 1;
            "FAIL"
        };
        println!(
            "{status} {:<22} max rel {:9.3e} over {} coords",
            e.name, e.report.max_rel_err, e.report.checked
        );
    }
    if failures > 0 {
        eprintln!("{failures} gradient check entries failed");
        return Ok(ExitCode::from(2));
    }
    println!("gradient suite passed");
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// summary
// ---------------------------------------------------------------------------

fn cmd_summary(a: &SummaryArgs) -> Result<()> {
    let (net, _) = read_config_file(&a.config)?;
    let rows = summarize(&net, (a.size, a.size))?;
    print!("{}", render_summary(&rows));
    Ok(())
}
