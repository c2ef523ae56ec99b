//! The `ibflow` command-line pipeline: `gen-data`, `train`, `eval`,
//! `mi-check`, and `grad-check`, all driven by one TOML run config.
//!
//! Every command is a pure function of (config, flags): the single
//! top-level `seed` feeds labeled substreams for data, initialization,
//! batching, and trials, so identical invocations produce bit-identical
//! artifacts. Commands never mutate their inputs; outputs land under the
//! `--out` directory (default: the current directory).
//!
//! Exit codes are a stable contract: 0 success, 2 config error, 3 I/O
//! error, 4 numeric abort, 5 checkpoint error, 6 failed verification.

use crate::eval::{self, EmbeddingRecord};
use crate::gradcheck::{build_scenario, scenario_names, CorruptedGradient};
use crate::miest;
use crate::seeds;
use crate::synthdata::{self, GeneratorSpec};
use crate::trainer::{
    self, gradient_check, load_checkpoint, save_checkpoint, EpochMetrics, ModelState, TrainConfig,
    TrainObserver,
};
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// `[data]`: the synthetic-dataset recipe plus how many utterances to draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub num_nuisance: usize,
    pub frames: usize,
    pub feat_dim: usize,
    pub class_scale: f64,
    pub nuisance_scale: f64,
    pub noise_std: f64,
    /// Number of utterances to generate.
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 8,
            num_nuisance: 4,
            frames: 20,
            feat_dim: 16,
            class_scale: 2.0,
            nuisance_scale: 2.0,
            noise_std: 0.5,
            count: 3072,
        }
    }
}

impl DataConfig {
    /// The generator recipe under the run's master seed (labeled substream,
    /// so data draws never collide with training draws).
    pub fn to_spec(&self, master_seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_classes: self.num_classes,
            num_nuisance: self.num_nuisance,
            frames: self.frames,
            feat_dim: self.feat_dim,
            class_scale: self.class_scale,
            nuisance_scale: self.nuisance_scale,
            noise_std: self.noise_std,
            seed: seeds::derive_seed(master_seed, "data"),
        }
    }
}

/// `[eval]`: trial construction and probe settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Target and non-target pairs per class in the trial list.
    pub pairs_per_class: usize,
    /// Held-out fraction inside each linear probe.
    pub probe_holdout: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pairs_per_class: 25, probe_holdout: 0.25 }
    }
}

/// `[mi]`: the Gaussian-oracle verification of the mutual-information
/// upper bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    /// Samples per correlation setting.
    pub batch: usize,
    /// Independent Gaussian dimensions per sample.
    pub dims: usize,
    /// Correlations to test.
    pub rhos: Vec<f64>,
    /// Pass margin in standard errors.
    pub sigma: f64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig { batch: 20_000, dims: 1, rhos: vec![0.0, 0.5, 0.9], sigma: 3.0 }
    }
}

/// `[gradcheck]`: finite-difference verification settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Central-difference step scale.
    pub epsilon: f64,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
    /// Seeded instances per scenario.
    pub instances: usize,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Corrupt every analytic gradient first: the command must then fail,
    /// proving the detector works.
    pub self_test: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            max_coords: 10,
            instances: 3,
            tolerance: 1e-3,
            self_test: false,
        }
    }
}

/// `[paths]`: file names, resolved against `--out` unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub trials: PathBuf,
    pub report: PathBuf,
    pub mi_report: PathBuf,
    pub gradcheck_report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "data.jsonl".into(),
            metrics: "metrics.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            best_checkpoint: "model.best.ckpt".into(),
            embeddings: "embeddings.jsonl".into(),
            trials: "trials.txt".into(),
            report: "report.json".into(),
            mi_report: "mi_report.jsonl".into(),
            gradcheck_report: "gradcheck_report.jsonl".into(),
        }
    }
}

/// The whole TOML run config. Unknown keys anywhere are errors. The
/// top-level `seed` (or the `--seed` flag) is the master seed for every
/// stage; it overrides the seed fields embedded in the sections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub mi: MiConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: PathsConfig,
}

/// Parses a run config, applying the optional seed override and copying
/// the master seed into the training section.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.train.seed = seeds::derive_seed(cfg.seed, "train");
    Ok(cfg)
}

/// The stable exit-code contract.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) => 2,
        Error::Io(_) | Error::Parse { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::CheckFailed(_) => 6,
    }
}

fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("create output directory {}: {e}", out_dir.display())))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Generates the synthetic dataset and prints per-label counts.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let spec = cfg.data.to_spec(cfg.seed);
    if cfg.data.count == 0 {
        return Err(Error::Config("data.count must be at least 1".into()));
    }
    let ds = synthdata::sample_dataset(&spec, cfg.data.count)?;
    let path = resolve(out_dir, &cfg.paths.dataset);
    synthdata::write_dataset(&path, &ds)?;

    let mut by_y: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_n: BTreeMap<usize, usize> = BTreeMap::new();
    for u in &ds.utterances {
        *by_y.entry(u.y).or_default() += 1;
        *by_n.entry(u.n).or_default() += 1;
    }
    println!("wrote {} utterances to {}", ds.len(), path.display());
    let fmt = |m: &BTreeMap<usize, usize>| {
        m.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ")
    };
    println!("class counts   {}", fmt(&by_y));
    println!("nuisance counts {}", fmt(&by_n));
    Ok(())
}

/// Streams metrics lines to disk, echoes progress, and keeps the
/// best-holdout-EER checkpoint current.
struct RunWriter {
    metrics: BufWriter<fs::File>,
    best_path: PathBuf,
}

impl TrainObserver for RunWriter {
    fn on_epoch_end(&mut self, state: &ModelState, m: &EpochMetrics) -> Result<()> {
        self.metrics
            .write_all(m.json_line().as_bytes())
            .and_then(|()| self.metrics.write_all(b"\n"))
            .and_then(|()| self.metrics.flush())
            .map_err(|e| Error::Io(format!("write metrics: {e}")))?;
        let eer = m.holdout_eer.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  l_xent {:.4}  l_red {:+.5}  eer {}  ({:.1}s)",
            m.epoch, m.l_xent, m.l_redundancy, eer, m.wall_secs
        );
        if state.best_epoch == Some(m.epoch) {
            save_checkpoint(state, &self.best_path)?;
        }
        Ok(())
    }
}

/// Trains per the `[train]` section (fresh, or resumed from
/// `--checkpoint`), appending one metrics line per epoch and writing final
/// and best checkpoints.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    ensure_out_dir(out_dir)?;
    cfg.train.validate()?;
    let data_path = resolve(out_dir, &cfg.paths.dataset);
    let ds = synthdata::read_dataset(&data_path)?;
    let metrics_path = resolve(out_dir, &cfg.paths.metrics);
    let final_path = resolve(out_dir, &cfg.paths.checkpoint);
    let best_path = resolve(out_dir, &cfg.paths.best_checkpoint);

    let (mut state, fresh) = match resume {
        Some(p) => {
            let state = load_checkpoint(p)?;
            println!(
                "resuming from {} at epoch {} (seed {})",
                p.display(),
                state.epochs_done,
                state.master_seed
            );
            (state, false)
        }
        None => (
            ModelState::init(&cfg.train, ds.header.t, ds.header.f, ds.header.c)?,
            true,
        ),
    };

    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::Io(format!("open {}: {e}", metrics_path.display())))?;
    let mut writer = RunWriter { metrics: BufWriter::new(file), best_path: best_path.clone() };

    let ran = trainer::train_from(&mut state, &ds, &cfg.train, &mut writer)?;
    if ran.is_empty() {
        println!(
            "nothing to do: checkpoint already at epoch {} of {}",
            state.epochs_done, cfg.train.epochs
        );
    }
    save_checkpoint(&state, &final_path)?;
    if state.best_epoch.is_none() {
        // No holdout EER was ever computed; the final state is the best one.
        save_checkpoint(&state, &best_path)?;
    }
    println!("final checkpoint {}", final_path.display());
    match (state.best_eer, state.best_epoch) {
        (Some(eer), Some(epoch)) => {
            println!("best checkpoint  {} (epoch {epoch}, eer {eer:.4})", best_path.display())
        }
        _ => println!("best checkpoint  {} (no holdout: final state)", best_path.display()),
    }
    Ok(())
}

/// The one-line evaluation report plus its input artifacts.
fn eval_records(cfg: &RunConfig, records: &[EmbeddingRecord], out_dir: &Path) -> Result<eval::EvalReport> {
    let trial_seed = seeds::derive_seed(cfg.seed, "eval/trials");
    let (mut trials, warnings) = eval::build_trials(records, cfg.eval.pairs_per_class, trial_seed)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    eval::score_trials(&mut trials, records)?;
    eval::write_trials(&resolve(out_dir, &cfg.paths.trials), &trials)?;
    let eer = eval::trial_eer(&trials)?;

    let embeddings: Vec<_> = records.iter().map(|r| r.omega.clone()).collect();
    let ys: Vec<usize> = records.iter().map(|r| r.y).collect();
    let ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    let class_probe_acc = eval::linear_probe(
        &embeddings,
        &ys,
        cfg.eval.probe_holdout,
        seeds::derive_seed(cfg.seed, "eval/probe/class"),
    )?;
    let nuisance_probe_acc = eval::linear_probe(
        &embeddings,
        &ns,
        cfg.eval.probe_holdout,
        seeds::derive_seed(cfg.seed, "eval/probe/nuisance"),
    )?;
    Ok(eval::EvalReport { eer, class_probe_acc, nuisance_probe_acc, n_trials: trials.len() })
}

/// Embeds the dataset with a trained checkpoint, writes the embedding dump,
/// scored trials, and the one-line report.
pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path, checkpoint: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let state = load_checkpoint(checkpoint)?;
    let data_path = resolve(out_dir, &cfg.paths.dataset);
    let ds = synthdata::read_dataset(&data_path)?;
    if ds.header.t != state.phi.t || ds.header.f != state.phi.f {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}×{} frames but the dataset provides {}×{}",
            state.phi.t, state.phi.f, ds.header.t, ds.header.f
        )));
    }

    let utts: Vec<&synthdata::Utterance> = ds.utterances.iter().collect();
    let records = trainer::embed_records(&utts, &state.theta.encoder)?;
    eval::write_embeddings(&resolve(out_dir, &cfg.paths.embeddings), &records)?;

    let report = eval_records(cfg, &records, out_dir)?;
    let line = serde_json::to_string(&report).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(resolve(out_dir, &cfg.paths.report), format!("{line}\n"))
        .map_err(|e| Error::Io(format!("write report: {e}")))?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct MiLine {
    rho: f64,
    analytic: f64,
    estimate: f64,
    stderr: f64,
    mode: &'static str,
    pass: bool,
}

/// Validates the mutual-information upper bound against correlated-Gaussian
/// ground truth: for ρ ≠ 0 the estimate must not undershoot the analytic
/// value by more than `sigma` standard errors (it is an upper bound); for
/// ρ = 0 it must sit within `sigma` standard errors of zero.
pub fn cmd_mi_check(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let mi = &cfg.mi;
    if mi.batch < 2 {
        return Err(Error::Config("mi.batch must be at least 2".into()));
    }
    if mi.dims == 0 {
        return Err(Error::Config("mi.dims must be at least 1".into()));
    }
    if mi.rhos.is_empty() {
        return Err(Error::Config("mi.rhos must not be empty".into()));
    }
    let path = resolve(out_dir, &cfg.paths.mi_report);
    let mut out = BufWriter::new(
        fs::File::create(&path).map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?,
    );
    let mut failures = Vec::new();
    for (i, &rho) in mi.rhos.iter().enumerate() {
        let analytic = miest::gaussian_mi_oracle(rho, mi.dims)?;
        let mut rng = seeds::stream(cfg.seed, &format!("mi/rho/{i}"));
        let (xs, ws) = miest::gaussian_pairs(&mut rng, mi.batch, mi.dims, rho);
        let (est, se) = miest::gaussian_club_all_pairs(&xs, &ws, rho)?;
        let pass = if rho == 0.0 {
            est.value.abs() <= mi.sigma * se
        } else {
            est.value >= analytic - mi.sigma * se
        };
        let line = MiLine {
            rho,
            analytic,
            estimate: est.value,
            stderr: se,
            mode: "all_pairs",
            pass,
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Io(e.to_string()))?;
        println!("{json}");
        writeln!(out, "{json}").map_err(|e| Error::Io(e.to_string()))?;
        if !pass {
            failures.push(format!("rho={rho}: estimate {} vs analytic {analytic} (se {se})", est.value));
        }
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failures.join("; ")))
    }
}

#[derive(Serialize)]
struct GradLine {
    scenario: String,
    instance: usize,
    max_rel_err: f64,
    coords: usize,
    pass: bool,
}

/// Runs the finite-difference suite over every scenario × seeded instance;
/// `gradcheck.self_test = true` corrupts each analytic gradient first and
/// therefore must fail — the detector's own sanity check.
pub fn cmd_grad_check(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let gc = &cfg.gradcheck;
    if gc.instances == 0 {
        return Err(Error::Config("gradcheck.instances must be at least 1".into()));
    }
    if gc.tolerance <= 0.0 {
        return Err(Error::Config("gradcheck.tolerance must be positive".into()));
    }
    let path = resolve(out_dir, &cfg.paths.gradcheck_report);
    let mut out = BufWriter::new(
        fs::File::create(&path).map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?,
    );
    let mut failures = 0usize;
    for &name in scenario_names() {
        for instance in 0..gc.instances {
            let scenario_seed = seeds::derive_seed(cfg.seed, &format!("gradcheck/{name}/{instance}"));
            let mut scenario = build_scenario(name, scenario_seed)?;
            if gc.self_test {
                scenario = Box::new(CorruptedGradient::new(scenario));
            }
            let report = gradient_check(
                scenario.as_mut(),
                gc.epsilon,
                gc.max_coords,
                seeds::derive_seed(cfg.seed, &format!("gradcheck/coords/{name}/{instance}")),
            )?;
            let pass = report.max_rel_err < gc.tolerance;
            if !pass {
                failures += 1;
            }
            let line = GradLine {
                scenario: report.scenario,
                instance,
                max_rel_err: report.max_rel_err,
                coords: report.coords_checked,
                pass,
            };
            let json = serde_json::to_string(&line).map_err(|e| Error::Io(e.to_string()))?;
            println!("{json}");
            writeln!(out, "{json}").map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))?;
    if failures == 0 {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("{failures} gradient check(s) exceeded tolerance")))
    }
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

/// Training, evaluation, and verification for flow-regularized embeddings.
#[derive(Debug, Parser)]
#[command(name = "ibflow", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for artifacts (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master-seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train (or resume) a model and write metrics plus checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: embeddings, trials, EER, probes.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate (default: `paths.checkpoint` under --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify the mutual-information bound on Gaussian ground truth.
    MiCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Verify analytic gradients by central finite differences.
    GradCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::MiCheck { common }
            | Command::GradCheck { common } => common,
        }
    }
}

/// Loads the config and dispatches one subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let cfg = load_config(&common.config, common.seed)?;
    let out_dir = common.out.unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&cfg, &out_dir),
        Command::Train { checkpoint, .. } => cmd_train(&cfg, &out_dir, checkpoint.as_deref()),
        Command::Eval { checkpoint, .. } => {
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| resolve(&out_dir, &cfg.paths.checkpoint));
            cmd_eval(&cfg, &out_dir, &ckpt)
        }
        Command::MiCheck { .. } => cmd_mi_check(&cfg, &out_dir),
        Command::GradCheck { .. } => cmd_grad_check(&cfg, &out_dir),
    }
}
