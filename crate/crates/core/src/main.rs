//! Command-line entry points: dataset generation, training, evaluation,
//! ablation sweeps, and prediction export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use densemtl::config::RunConfig;
use densemtl::data::{gen_synthetic, load_dataset, DatasetManifest, SyntheticSpec};
use densemtl::export::{export_sample, plot_loss_curve};
use densemtl::model::{CriticMode, TaskSelection};
use densemtl::training::{
    evaluate, fit, format_ablation_table, load_checkpoint, predict_sample, run_ablation,
    DepthSpace, EvalReport, TrainState,
};
use densemtl::{Error, Result};

/// Environment variable naming the default root for output directories.
const OUT_ROOT_ENV: &str = "DENSEMTL_OUT_ROOT";

#[derive(Parser)]
#[command(name = "densemtl", version, about = "Joint depth and segmentation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and maintain a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the seven-variant ablation grid and emit its table.
    Ablate(AblateArgs),
    /// Export per-sample predictions and plots from a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes in the train split.
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Scenes in the val split.
    #[arg(long, default_value_t = 100)]
    val_count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    dmin: f64,
    #[arg(long, default_value_t = 50.0)]
    dmax: f64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: `--set train.base_lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for `train.total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Shortcut for `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory (checkpoints, logs, evals).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Named ablation variant: only-depth, only-seg, no-critic, one-critic,
    /// two-critics, linear-space, or log-space.
    #[arg(long)]
    ablation: Option<String>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Also write the flat JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Export at most this many samples (0 = all).
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Step-record file to plot; defaults to the checkpoint's run log when
    /// present.
    #[arg(long)]
    records: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Export(a) => cmd_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Resolves an output directory: explicit flag, else `$DENSEMTL_OUT_ROOT/name`
/// (root defaults to the working directory).
fn resolve_out(flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
        root.join(name)
    })
}

fn ensure_fresh(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            dir.join(marker).display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let out = resolve_out(a.out, "dataset");
    ensure_fresh(&out, "manifest.json", a.force)?;
    let spec = SyntheticSpec {
        height: a.size,
        width: a.size,
        num_classes: a.classes,
        d_min: a.dmin,
        d_max: a.dmax,
        ..SyntheticSpec::default()
    };
    gen_synthetic(&out, "train", a.seed, a.count, &spec)?;
    gen_synthetic(&out, "val", a.seed, a.val_count, &spec)?;
    println!(
        "wrote {} train / {} val scenes; manifest at {}",
        a.count,
        a.val_count,
        out.join("manifest.json").display()
    );
    Ok(())
}

/// Builds the effective config: defaults, then file, then the ablation
/// shortcut, then inline overrides (later always wins).
fn build_config(cfg: &ConfigArgs, ablation: Option<&str>) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cfg.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        rc.apply_text(&text)?;
    }
    if let Some(name) = ablation {
        apply_ablation(&mut rc, name)?;
    }
    for s in &cfg.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s}: expected key=value")))?;
        rc.apply(k.trim(), v)?;
    }
    if let Some(steps) = cfg.steps {
        rc.train.total_steps = steps;
    }
    if let Some(seed) = cfg.seed {
        rc.train.seed = seed;
    }
    rc.validate()?;
    Ok(rc)
}

fn apply_ablation(rc: &mut RunConfig, name: &str) -> Result<()> {
    let t = &mut rc.train;
    match name {
        "only-depth" => {
            t.tasks = TaskSelection::DepthOnly;
            t.critic = CriticMode::None;
            t.weights.alpha_mix = 1.0;
        }
        "only-seg" => {
            t.tasks = TaskSelection::SegOnly;
            t.critic = CriticMode::None;
            t.weights.alpha_mix = 0.0;
        }
        "no-critic" => t.critic = CriticMode::None,
        "one-critic" => t.critic = CriticMode::One,
        "two-critics" => t.critic = CriticMode::Two,
        "linear-space" => {
            t.critic = CriticMode::None;
            t.depth_space = DepthSpace::Linear;
        }
        "log-space" => {
            t.critic = CriticMode::None;
            t.depth_space = DepthSpace::Log;
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation variant {name}; expected only-depth, only-seg, \
                 no-critic, one-critic, two-critics, linear-space, or log-space"
            )))
        }
    }
    Ok(())
}

struct LoadedData {
    manifest: DatasetManifest,
    train: Vec<densemtl::data::Sample>,
    val: Vec<densemtl::data::Sample>,
}

fn load_data(root: &Path) -> Result<LoadedData> {
    let manifest = DatasetManifest::load(root)?;
    let train = load_dataset(root, "train", &manifest)?;
    let val = load_dataset(root, "val", &manifest)?;
    Ok(LoadedData { manifest, train, val })
}

fn check_model_matches(rc: &RunConfig, data: &LoadedData) -> Result<()> {
    if rc.model.num_classes != data.manifest.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes = {} but the dataset has {} classes",
            rc.model.num_classes, data.manifest.num_classes
        )));
    }
    if let Some(s) = data.train.first().or(data.val.first()) {
        let (h, w) = s.depth.shape();
        if (rc.model.image_height, rc.model.image_width) != (h, w) {
            return Err(Error::Config(format!(
                "model.image_height/width = {}x{} but the dataset is {h}x{w}",
                rc.model.image_height, rc.model.image_width
            )));
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let rc = build_config(&a.cfg, a.ablation.as_deref())?;
    let data = load_data(&a.data)?;
    check_model_matches(&rc, &data)?;
    let out = resolve_out(a.out, "run");
    // resuming legitimately reuses an existing run directory
    ensure_fresh(&out, "config.snapshot", a.force || a.resume.is_some())?;
    // the snapshot goes down before any training so a crashed run is still
    // reproducible
    fs::write(out.join("config.snapshot"), rc.snapshot())?;
    let (_state, report) = fit::<f32>(
        &rc.model,
        &rc.train,
        &data.manifest,
        &data.train,
        &data.val,
        Some(&out),
        a.resume.as_deref(),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    if out.join("log.records").exists() {
        plot_loss_curve(&out.join("log.records"), &out.join("loss_curve.png"))?;
    }
    if let Some((step, ev)) = report.evals.last() {
        println!("final eval at step {step}:");
        print!("{}", format_eval(ev));
    }
    println!(
        "run complete in {:.1}s; artifacts in {}",
        report.wall_secs,
        out.display()
    );
    Ok(())
}

fn format_eval(ev: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map_or("     -".to_string(), |x| format!("{x:6.4}"));
    let mut s = String::new();
    s += "AbsRel  SqRel   RMSE    RMSElog d<1.25  d<1.25^2 d<1.25^3\n";
    s += &format!(
        "{}  {}  {}  {}  {}  {}   {}\n",
        f(ev.abs_rel),
        f(ev.sq_rel),
        f(ev.rmse),
        f(ev.rmse_log),
        f(ev.delta1),
        f(ev.delta2),
        f(ev.delta3)
    );
    s += "mIoU    PixAcc\n";
    s += &format!("{}  {}\n", f(ev.miou), f(ev.pixel_acc));
    s
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint, None)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let samples = load_dataset(&a.data, &a.split, &manifest)?;
    let ev = evaluate(
        &state.net,
        &state.gen_store,
        &manifest,
        state.cfg.depth_space,
        &samples,
        state.cfg.batch_size,
    )?;
    print!("{}", format_eval(&ev));
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&ev)? + "\n")?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let rc = build_config(&a.cfg, None)?;
    let data = load_data(&a.data)?;
    check_model_matches(&rc, &data)?;
    let out = resolve_out(a.out, "ablation");
    ensure_fresh(&out, "table.txt", a.force)?;
    fs::write(out.join("config.snapshot"), rc.snapshot())?;
    let rows = run_ablation::<f32>(
        &rc.model,
        &rc.train,
        &data.manifest,
        &data.train,
        &data.val,
        Some(&out),
    )?;
    let table = format_ablation_table(&rows);
    fs::write(out.join("table.txt"), &table)?;
    fs::write(
        out.join("rows.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    print!("{table}");
    println!("table written to {}", out.join("table.txt").display());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint, None)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let samples = load_dataset(&a.data, &a.split, &manifest)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("split {} is empty", a.split)));
    }
    let take = if a.count == 0 { samples.len() } else { a.count.min(samples.len()) };
    let out = resolve_out(a.out, "export");
    fs::create_dir_all(&out)?;
    let range = manifest.range()?;
    for chunk in samples[..take].chunks(state.cfg.batch_size.max(1)) {
        let preds = predict_sample(
            &state.net,
            &state.gen_store,
            &manifest,
            state.cfg.depth_space,
            chunk,
        )?;
        for ((pd, pl), sample) in preds.into_iter().zip(chunk) {
            let depth = pd.unwrap_or_else(|| sample.depth.clone());
            let labels = pl.unwrap_or_else(|| sample.labels.clone());
            export_sample(&out, sample, &depth, &labels, &range)?;
        }
    }
    // by default the loss curve comes from the run directory that owns the
    // checkpoint (out/checkpoints/step_X -> out/log.records)
    let records = a.records.or_else(|| {
        let p = a.checkpoint.parent()?.parent()?.join("log.records");
        p.exists().then_some(p)
    });
    if let Some(rec) = records {
        plot_loss_curve(&rec, &out.join("loss_curve.png"))?;
    }
    println!("exported {take} samples to {}", out.display());
    Ok(())
}
