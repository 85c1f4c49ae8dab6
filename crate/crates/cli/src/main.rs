//! `chanlab`: batch pipelines over the channel-model laboratory.
//!
//! Structured results go to stdout as JSON (and to files where a subcommand
//! has outputs); human summaries go to stderr unless `--json` is given.
//! Every run with file outputs writes one `*.manifest.json` next to them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use chanlab::channel::{load_dataset, save_dataset, synthesize_dataset, synthesize_elevation_mixture, ChannelDataset, ScenarioConfig};
use chanlab::estimation::{ls_sweep, sweep_csv, PilotPattern};
use chanlab::mae::{build_ladder, log_csv, pretrain, LadderBase, ModelConfig, ModelState, PretrainOptions};
use chanlab::manifold::{profile, ProfileOptions};
use chanlab::scaling::{
    detect_saturation, fit_csv, fit_power_law, gains_per_doubling, parse_points_csv, recommend_size, run_scaling_experiment,
    ExperimentOptions, ScalingFit, DEFAULT_GAIN_THRESHOLD_DB,
};
use chanlab::ttt::{model_sweep, trace_csv, transfer_experiment, TransferOptions, TttConfig};
use chanlab::{Error, Result};

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "chanlab",
    version,
    about = "Channel synthesis, manifold profiling, MAE pretraining, pilot estimation, test-time training and scaling fits"
)]
struct Cli {
    /// Worker threads (default: one per core)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine output only: JSON on stdout, no human summary
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random stream
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Synthesize a channel dataset
    Synth(SynthArgs),
    /// Intrinsic-dimension report of a dataset
    Profile(ProfileArgs),
    /// Pretrain a masked autoencoder on a dataset
    Pretrain(PretrainArgs),
    /// LS+interpolation (and optionally model) NMSE versus SNR
    Baseline(BaselineArgs),
    /// Static versus test-time-adapted NMSE on an evaluation scenario
    TttEval(TttEvalArgs),
    /// Fit a power law to (params, loss) points or run a ladder experiment
    ScalingFit(ScalingFitArgs),
    /// Model-size advice from d_NL and the sample count
    Recommend(RecommendArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
    /// [default: 128]
    #[arg(long)]
    antennas: Option<usize>,
    /// [default: 76]
    #[arg(long)]
    subcarriers: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    clusters: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    rays: Option<usize>,
    /// Rician K-factor in dB, `-inf` for pure NLOS [default: 3]
    #[arg(long, allow_hyphen_values = true)]
    k_db: Option<f64>,
    /// Seconds [default: 1e-7]
    #[arg(long)]
    delay_spread: Option<f64>,
    /// Hz [default: 2e7]
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Hz [default: 2e9]
    #[arg(long)]
    carrier_freq: Option<f64>,
    /// Degrees [default: 5]
    #[arg(long)]
    angle_spread: Option<f64>,
    /// Degrees in [0, 90] [default: 0]
    #[arg(long)]
    elevation: Option<f64>,
    /// Per-sample elevation mixture `deg:weight,...`; replaces --elevation
    #[arg(long)]
    elevation_mix: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct ProfileArgs {
    dataset: PathBuf,
    /// Neighbours for the MLE estimate [default: 10]
    #[arg(long)]
    k: Option<usize>,
    /// Lower PCA variance threshold [default: 0.9]
    #[arg(long)]
    pca_low: Option<f64>,
    /// Upper PCA variance threshold [default: 0.95]
    #[arg(long)]
    pca_high: Option<f64>,
    /// Fraction of largest Two-NN ratios discarded [default: 0.1]
    #[arg(long)]
    discard: Option<f64>,
    /// Also write the report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    dataset: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Model config as JSON
    #[arg(long, conflicts_with = "target_params")]
    config: Option<PathBuf>,
    /// Pick the ladder config closest to this parameter count
    #[arg(long)]
    target_params: Option<usize>,
    /// Antennas per token [default: 4]
    #[arg(long)]
    patch_rows: Option<usize>,
    /// Subcarriers per token [default: 4]
    #[arg(long)]
    patch_cols: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Disable gradient-norm clipping
    #[arg(long)]
    no_clip: bool,
    /// Training log CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PatternArgs {
    #[arg(long, default_value_t = 8)]
    pilot_spacing: usize,
    #[arg(long, default_value_t = 0)]
    pilot_offset: usize,
    /// Real part of the pilot symbol
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pilot_re: f64,
    /// Imaginary part of the pilot symbol
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pilot_im: f64,
}

impl PatternArgs {
    fn pattern(&self) -> Result<PilotPattern> {
        PilotPattern::new(
            self.pilot_spacing,
            self.pilot_offset,
            num_complex::Complex64::new(self.pilot_re, self.pilot_im),
        )
    }
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    dataset: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    /// Comma-separated SNR points in dB
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 5.0, 10.0, 15.0, 20.0])]
    snr: Vec<f64>,
    /// Channels per SNR point (the first N of the dataset)
    #[arg(long, default_value_t = 500)]
    n_channels: usize,
    /// Also evaluate this model
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// With --checkpoint, also evaluate the model adapted for this many steps at each SNR
    #[arg(long, default_value_t = 0)]
    ttt_steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    ttt_lr: f64,
    /// CSV output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TttEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset of the scenario the model was trained on
    #[arg(long)]
    train: PathBuf,
    /// Dataset of the scenario to adapt to
    #[arg(long)]
    eval: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
    snr: f64,
    /// Channels observed per scenario
    #[arg(long, default_value_t = 64)]
    n_channels: usize,
    /// JSON report
    #[arg(long)]
    out: PathBuf,
    /// Per-step trace CSV [default: <out>.trace.csv]
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ScalingFitArgs {
    /// CSV with `params` and `loss` columns
    #[arg(long, conflicts_with = "experiment", required_unless_present = "experiment")]
    points: Option<PathBuf>,
    /// Experiment spec (JSON) to train a ladder and fit it
    #[arg(long)]
    experiment: Option<PathBuf>,
    /// Saturation threshold in dB per doubling
    #[arg(long, default_value_t = DEFAULT_GAIN_THRESHOLD_DB)]
    threshold: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RecommendArgs {
    /// Nonlinear intrinsic dimension
    #[arg(long, required_unless_present = "dataset", allow_hyphen_values = true)]
    dnl: Option<f64>,
    /// Training-set size
    #[arg(long, required_unless_present = "dataset")]
    samples: Option<u64>,
    /// Profile this dataset for whichever of d_NL and N is missing
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write the advice here
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Ladder experiment description for `scaling-fit --experiment`. Relative
/// dataset paths resolve against the spec file's directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSpec {
    dataset: PathBuf,
    #[serde(default = "default_targets")]
    targets: Vec<usize>,
    /// Explicit configs; replaces `targets` when present.
    #[serde(default)]
    ladder: Option<Vec<ModelConfig>>,
    #[serde(default)]
    patch_rows: Option<usize>,
    #[serde(default)]
    patch_cols: Option<usize>,
    #[serde(default = "default_mlp")]
    mlp_ratio: usize,
    #[serde(default = "default_mask")]
    mask_ratio: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_eval")]
    n_eval: usize,
    #[serde(default = "default_masks")]
    masks_per_sample: usize,
    #[serde(default)]
    d_nl: Option<f64>,
}

fn default_targets() -> Vec<usize> {
    vec![30_000, 100_000, 300_000, 1_000_000]
}
fn default_mlp() -> usize {
    4
}
fn default_mask() -> f64 {
    0.5
}
fn default_steps() -> usize {
    500
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_eval() -> usize {
    200
}
fn default_masks() -> usize {
    2
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    argv: Vec<String>,
    flags: &'a Cli,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Everything that may differ between identical reruns lives here.
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    duration_s: f64,
}

/// What a subcommand produced: its stdout JSON, human summary, files read
/// and written, and where the manifest goes (if anywhere).
struct Outcome {
    result: Value,
    summary: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Error::InvalidArgument(format!("cannot start {n} threads: {e}")));
        }
    }
    let start = Instant::now();
    match run(&cli) {
        Ok(out) => match finish(&cli, out, start) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
    ExitCode::from(1)
}

fn finish(cli: &Cli, out: Outcome, start: Instant) -> Result<()> {
    if let Some(path) = &out.manifest {
        let manifest = Manifest {
            tool: "chanlab",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand_name(&cli.command),
            argv: std::env::args().skip(1).collect(),
            flags: cli,
            seed: cli.seed,
            inputs: out.inputs,
            outputs: out.outputs,
            timing: Timing {
                duration_s: start.elapsed().as_secs_f64(),
            },
        };
        write_file(path, &serde_json::to_vec_pretty(&manifest)?)?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&out.result)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        r => r?,
    }
    if !cli.json && !out.summary.is_empty() {
        eprintln!("{}", out.summary);
    }
    Ok(())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Profile(_) => "profile",
        Command::Pretrain(_) => "pretrain",
        Command::Baseline(_) => "baseline",
        Command::TttEval(_) => "ttt-eval",
        Command::ScalingFit(_) => "scaling-fit",
        Command::Recommend(_) => "recommend",
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Profile(a) => profile_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a, cli.seed),
        Command::Baseline(a) => baseline(a, cli.seed),
        Command::TttEval(a) => ttt_eval(a, cli.seed),
        Command::ScalingFit(a) => scaling_fit(a, cli.seed),
        Command::Recommend(a) => recommend(a),
    }
}

fn manifest_for(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

/// `<path>.<suffix>`, keeping the original extension in the name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Refuses to run when an output would overwrite an input.
fn check_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    for o in outputs {
        if inputs.iter().any(|i| abs(i) == abs(o)) {
            return Err(Error::InvalidArgument(format!("output {} would overwrite an input", o.display())));
        }
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    let d = ScenarioConfig::default();
    let config = ScenarioConfig {
        n_antennas: a.antennas.unwrap_or(d.n_antennas),
        n_subcarriers: a.subcarriers.unwrap_or(d.n_subcarriers),
        n_clusters: a.clusters.unwrap_or(d.n_clusters),
        rays_per_cluster: a.rays.unwrap_or(d.rays_per_cluster),
        rician_k_db: a.k_db.unwrap_or(d.rician_k_db),
        delay_spread: a.delay_spread.unwrap_or(d.delay_spread),
        bandwidth: a.bandwidth.unwrap_or(d.bandwidth),
        carrier_freq: a.carrier_freq.unwrap_or(d.carrier_freq),
        angle_spread_deg: a.angle_spread.unwrap_or(d.angle_spread_deg),
        elevation_deg: a.elevation.unwrap_or(d.elevation_deg),
        seed,
    };
    let ds = match &a.elevation_mix {
        Some(spec) => synthesize_elevation_mixture(&config, &parse_mixture(spec)?, a.samples)?,
        None => synthesize_dataset(&config, a.samples)?,
    };
    save_dataset(&ds, &a.out)?;
    let (rows, cols) = ds.shape();
    Ok(Outcome {
        result: json!({
            "out": a.out,
            "n_samples": ds.len(),
            "n_antennas": rows,
            "n_subcarriers": cols,
            "scenario_id": ds.scenario_id,
        }),
        summary: format!("wrote {} samples of {}x{} to {}", ds.len(), rows, cols, a.out.display()),
        inputs: vec![],
        outputs: vec![a.out.clone()],
        manifest: Some(manifest_for(&a.out)),
    })
}

fn parse_mixture(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|item| {
            let (deg, w) = item
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("mixture item `{item}` is not deg:weight")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("`{s}` in elevation mixture is not a number")))
            };
            Ok((num(deg)?, num(w)?))
        })
        .collect()
}

fn profile_cmd(a: &ProfileArgs) -> Result<Outcome> {
    if let Some(out) = &a.out {
        check_distinct(&[&a.dataset], &[out])?;
    }
    let ds = load_dataset(&a.dataset)?;
    let d = ProfileOptions::default();
    let opts = ProfileOptions {
        k_mle: a.k.unwrap_or(d.k_mle),
        pca_low: a.pca_low.unwrap_or(d.pca_low),
        pca_high: a.pca_high.unwrap_or(d.pca_high),
        discard_fraction: a.discard.unwrap_or(d.discard_fraction),
        mle_band: d.mle_band,
    };
    let report = profile(&ds, &opts)?;
    let result = serde_json::to_value(&report)?;
    let mut outputs = vec![];
    if let Some(out) = &a.out {
        write_file(out, &serde_json::to_vec_pretty(&report)?)?;
        outputs.push(out.clone());
    }
    Ok(Outcome {
        result,
        summary: report.summary(),
        inputs: vec![a.dataset.clone()],
        manifest: a.out.as_deref().map(manifest_for),
        outputs,
    })
}

fn model_config_for(a: &PretrainArgs, ds: &ChannelDataset) -> Result<ModelConfig> {
    let (rows, cols) = ds.shape();
    if let Some(path) = &a.config {
        let cfg: ModelConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        return Ok(cfg);
    }
    let d = ModelConfig::default();
    let base = LadderBase {
        grid_rows: rows,
        grid_cols: cols,
        patch_rows: a.patch_rows.unwrap_or(d.patch_rows),
        patch_cols: a.patch_cols.unwrap_or(d.patch_cols),
        mlp_ratio: a.mlp_ratio.unwrap_or(d.mlp_ratio),
        mask_ratio: a.mask_ratio.unwrap_or(d.mask_ratio),
    };
    match a.target_params {
        Some(target) => Ok(build_ladder(&[target], &base)?.remove(0)),
        None => Ok(ModelConfig {
            grid_rows: base.grid_rows,
            grid_cols: base.grid_cols,
            patch_rows: base.patch_rows,
            patch_cols: base.patch_cols,
            mlp_ratio: base.mlp_ratio,
            mask_ratio: base.mask_ratio,
            ..d
        }),
    }
}

fn pretrain_cmd(a: &PretrainArgs, seed: u64) -> Result<Outcome> {
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, "log.csv"));
    let mut inputs = vec![a.dataset.clone()];
    inputs.extend(a.config.clone());
    check_distinct(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &[&a.out, &log_path])?;
    let ds = load_dataset(&a.dataset)?;
    let config = model_config_for(a, &ds)?;
    if (config.grid_rows, config.grid_cols) != ds.shape() {
        return Err(Error::InvalidArgument(format!(
            "model grid {}x{} does not match the dataset's {:?}",
            config.grid_rows,
            config.grid_cols,
            ds.shape()
        )));
    }
    let opts = PretrainOptions {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
        clip_norm: if a.no_clip { None } else { PretrainOptions::default().clip_norm },
    };
    let model = pretrain(ModelState::init(&config, seed)?, &ds, &opts)?;
    model.save(&a.out)?;
    write_file(&log_path, &log_csv(&model.log)?)?;
    let tail = model.log.len().min(20);
    let final_loss = model.log[model.log.len() - tail..].iter().map(|e| e.loss).sum::<f64>() / tail as f64;
    Ok(Outcome {
        result: json!({
            "checkpoint": a.out,
            "log": log_path,
            "params": config.param_count(),
            "decoder_fraction": config.decoder_fraction(),
            "final_loss": final_loss,
            "config": config,
        }),
        summary: format!(
            "trained {} params for {} steps, final loss {:.4} ({:.2} dB)",
            config.param_count(),
            a.steps,
            final_loss,
            10.0 * final_loss.log10()
        ),
        inputs,
        outputs: vec![a.out.clone(), log_path],
        manifest: Some(manifest_for(&a.out)),
    })
}

fn baseline(a: &BaselineArgs, seed: u64) -> Result<Outcome> {
    let mut inputs = vec![a.dataset.clone()];
    inputs.extend(a.checkpoint.clone());
    check_distinct(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &[&a.out])?;
    if a.ttt_steps > 0 && a.checkpoint.is_none() {
        return Err(Error::InvalidArgument("--ttt-steps needs --checkpoint".into()));
    }
    let ds = load_dataset(&a.dataset)?;
    let pattern = a.pattern.pattern()?;
    let mut rows = ls_sweep(&ds, &pattern, &a.snr, a.n_channels, seed)?;
    if let Some(path) = &a.checkpoint {
        let model = ModelState::load(path)?;
        rows.extend(model_sweep(&model, &ds, &pattern, &a.snr, a.n_channels, seed, None)?);
        if a.ttt_steps > 0 {
            let cfg = TttConfig {
                n_steps: a.ttt_steps,
                lr: a.ttt_lr,
                pattern,
                ..TttConfig::default()
            };
            rows.extend(model_sweep(&model, &ds, &pattern, &a.snr, a.n_channels, seed, Some(&cfg))?);
        }
    }
    write_file(&a.out, &sweep_csv(&rows)?)?;
    let summary = rows
        .iter()
        .map(|r| {
            format!(
                "{:>6.1} dB  {:<10} {:>8.2} dB (std {:.2})",
                r.snr_db, r.method, r.mean_nmse_db, r.std
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Outcome {
        result: serde_json::to_value(&rows)?,
        summary,
        inputs,
        outputs: vec![a.out.clone()],
        manifest: Some(manifest_for(&a.out)),
    })
}

fn ttt_eval(a: &TttEvalArgs, seed: u64) -> Result<Outcome> {
    let trace_path = a.trace.clone().unwrap_or_else(|| sibling(&a.out, "trace.csv"));
    let inputs = vec![a.checkpoint.clone(), a.train.clone(), a.eval.clone()];
    check_distinct(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &[&a.out, &trace_path])?;
    let model = ModelState::load(&a.checkpoint)?;
    let train = load_dataset(&a.train)?;
    let eval = load_dataset(&a.eval)?;
    let cfg = TttConfig {
        n_steps: a.steps,
        lr: a.lr,
        pattern: a.pattern.pattern()?,
        ..TttConfig::default()
    };
    let opts = TransferOptions {
        n_channels: a.n_channels,
        snr_db: a.snr,
        seed,
    };
    let r = transfer_experiment(&model, &train, &eval, &cfg, &opts)?;
    write_file(&trace_path, &trace_csv(&r.trace)?)?;
    let report = json!({
        "static_nmse_db": r.static_nmse_db,
        "adapted_nmse_db": r.adapted_nmse_db,
        "gain_db": r.gain_db,
        "source_nmse_db": r.source_nmse_db,
        "trace_csv": trace_path,
        "adapt_gflops": r.adapt_gflops,
        "steps": a.steps,
        "lr": a.lr,
        "snr_db": a.snr,
        "n_channels": a.n_channels,
    });
    write_file(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    Ok(Outcome {
        summary: format!(
            "static {:.2} dB, adapted {:.2} dB, gain {:.2} dB after {} steps ({:.3} GFLOPs)",
            r.static_nmse_db, r.adapted_nmse_db, r.gain_db, a.steps, r.adapt_gflops
        ),
        result: report,
        inputs,
        outputs: vec![a.out.clone(), trace_path],
        manifest: Some(manifest_for(&a.out)),
    })
}

#[derive(Serialize)]
struct FitOutput {
    fit: Option<ScalingFit>,
    gains_per_doubling_db: Vec<f64>,
    threshold_db: f64,
}

fn fit_with_threshold(points: &[(f64, f64)], threshold: f64) -> Result<FitOutput> {
    let mut fit = fit_power_law(points)?;
    fit.saturation_at = detect_saturation(points, threshold)?;
    Ok(FitOutput {
        gains_per_doubling_db: gains_per_doubling(points)?,
        fit: Some(fit),
        threshold_db: threshold,
    })
}

fn scaling_fit(a: &ScalingFitArgs, seed: u64) -> Result<Outcome> {
    let fit_json = a.out_dir.join("fit.json");
    let fit_plot = a.out_dir.join("fit.csv");
    let mut outputs = vec![fit_json.clone()];
    let (inputs, output, report) = if let Some(path) = &a.points {
        check_distinct(&[path], &[&fit_json, &fit_plot])?;
        let points = parse_points_csv(&std::fs::read(path)?)?;
        (vec![path.clone()], fit_with_threshold(&points, a.threshold)?, None)
    } else {
        let spec_path = a.experiment.as_ref().expect("clap requires one source");
        let spec: ExperimentSpec = serde_json::from_slice(&std::fs::read(spec_path)?)?;
        let data_path = match spec_path.parent() {
            Some(dir) if spec.dataset.is_relative() => dir.join(&spec.dataset),
            _ => spec.dataset.clone(),
        };
        let ds = load_dataset(&data_path)?;
        let (rows, cols) = ds.shape();
        let d = ModelConfig::default();
        let ladder = match &spec.ladder {
            Some(l) => l.clone(),
            None => build_ladder(
                &spec.targets,
                &LadderBase {
                    grid_rows: rows,
                    grid_cols: cols,
                    patch_rows: spec.patch_rows.unwrap_or(d.patch_rows),
                    patch_cols: spec.patch_cols.unwrap_or(d.patch_cols),
                    mlp_ratio: spec.mlp_ratio,
                    mask_ratio: spec.mask_ratio,
                },
            )?,
        };
        let opts = ExperimentOptions {
            pretrain: PretrainOptions {
                steps: spec.steps,
                batch_size: spec.batch_size,
                lr: spec.lr,
                seed,
                ..PretrainOptions::default()
            },
            n_eval: spec.n_eval,
            masks_per_sample: spec.masks_per_sample,
            init_seed: seed,
            d_nl: spec.d_nl,
        };
        let (report, _) = run_scaling_experiment(&ds, &ladder, &opts, Some(&a.out_dir))?;
        for s in &report.scales {
            if s.loss.is_some() {
                outputs.push(a.out_dir.join(format!("scale_{}_{}.wnn", s.index, s.params)));
            }
        }
        outputs.push(a.out_dir.join("scaling.csv"));
        outputs.push(a.out_dir.join("scaling.json"));
        let points: Vec<(f64, f64)> = report.scales.iter().filter_map(|s| s.loss.map(|l| (s.params as f64, l))).collect();
        let output = if points.len() >= 3 {
            fit_with_threshold(&points, a.threshold)?
        } else {
            FitOutput {
                fit: None,
                gains_per_doubling_db: vec![],
                threshold_db: a.threshold,
            }
        };
        (vec![spec_path.clone(), data_path], output, Some(report))
    };
    write_file(&fit_json, &serde_json::to_vec_pretty(&output)?)?;
    if let Some(fit) = &output.fit {
        write_file(&fit_plot, &fit_csv(fit)?)?;
        outputs.push(fit_plot);
    }
    let summary = match &output.fit {
        Some(f) => format!(
            "alpha {:.4} (R^2 {:.3}), saturation {}",
            f.alpha,
            f.r_squared,
            f.saturation_at.map_or("none".to_string(), |p| format!("at {p:.3e} params"))
        ),
        None => "fewer than three scales trained; no fit".to_string(),
    };
    let mut result = serde_json::to_value(&output)?;
    if let Some(r) = report {
        result["experiment"] = serde_json::to_value(&r)?;
    }
    Ok(Outcome {
        result,
        summary,
        inputs,
        outputs,
        manifest: Some(a.out_dir.join("manifest.json")),
    })
}

fn recommend(a: &RecommendArgs) -> Result<Outcome> {
    let mut inputs = vec![];
    let (mut d_nl, mut n) = (a.dnl, a.samples);
    if let Some(path) = &a.dataset {
        if let Some(out) = &a.out {
            check_distinct(&[path], &[out])?;
        }
        inputs.push(path.clone());
        let ds = load_dataset(path)?;
        n = n.or(Some(ds.len() as u64));
        if d_nl.is_none() {
            d_nl = Some(profile(&ds, &ProfileOptions::default())?.d_twonn);
        }
    }
    let (d_nl, n) = (
        d_nl.expect("clap requires --dnl or --dataset"),
        n.expect("clap requires --samples or --dataset"),
    );
    let advice = recommend_size(d_nl, n)?;
    let mut outputs = vec![];
    if let Some(out) = &a.out {
        write_file(out, &serde_json::to_vec_pretty(&advice)?)?;
        outputs.push(out.clone());
    }
    Ok(Outcome {
        result: serde_json::to_value(&advice)?,
        summary: advice.rationale.clone(),
        inputs,
        manifest: a.out.as_deref().map(manifest_for),
        outputs,
    })
}
