//! `mlk`: scene generation, training, evaluation and retrieval from the shell.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use mlk_core::data::{generate_scene, load_scene, save_scene, Scene, SceneGenConfig};
use mlk_core::eval::{localize_query, run_benchmark, BenchmarkGrid, Estimator, LocalizeConfig, NoiseModel};
use mlk_core::geom::rotation_angle_error;
use mlk_core::regressor::{ModelConfig, TokenMode, Weights};
use mlk_core::retrieval::{retrieve, Strategy};
use mlk_core::scale_recovery::ScaleMethod;
use mlk_core::training::{pairwise_with_progress, save_loss_csv, train_with_progress, StepRecord, TrainConfig, TrainingSet};

#[derive(Parser)]
#[command(name = "mlk", version, about = "Multi-view relative pose regression and re-localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene file.
    GenScene(GenSceneArgs),
    /// Train a regressor and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Run the localization benchmark over a grid of settings.
    Eval(EvalArgs),
    /// Localize a single query frame.
    Localize(LocalizeArgs),
    /// Show the references retrieved for one query frame.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with configuration values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalArg {
    Covis,
    Vpr,
    Embedding,
}

impl From<RetrievalArg> for Strategy {
    fn from(r: RetrievalArg) -> Self {
        match r {
            RetrievalArg::Covis => Strategy::CovisOracle,
            RetrievalArg::Vpr => Strategy::VprProxy,
            RetrievalArg::Embedding => Strategy::Embedding,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Motion,
    Umeyama,
}

impl From<ScaleArg> for ScaleMethod {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Motion => ScaleMethod::MotionAveraging,
            ScaleArg::Umeyama => ScaleMethod::Umeyama,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenModeArg {
    #[value(name = "all_learnable")]
    AllLearnable,
    #[value(name = "last_only")]
    LastOnly,
}

impl From<TokenModeArg> for TokenMode {
    fn from(t: TokenModeArg) -> Self {
        match t {
            TokenModeArg::AllLearnable => TokenMode::AllLearnable,
            TokenModeArg::LastOnly => TokenMode::LastOnly,
        }
    }
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s}"))?;
    let h: usize = h.parse().map_err(|e| format!("{e}"))?;
    let w: usize = w.parse().map_err(|e| format!("{e}"))?;
    if h == 0 || w == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((h, w))
}

#[derive(Args)]
struct GenSceneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of database frames.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    frames: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    queries: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    landmarks: Option<u64>,
    #[arg(long)]
    trap_fraction: Option<f64>,
    /// Feature grid as HxW, e.g. 8x8.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    fov: Option<f64>,
    #[arg(short, long, default_value = "scene.json")]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training scene files.
    #[arg(long = "scene", required = true, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Checkpoint path; the loss curve goes next to it with a .csv extension.
    #[arg(short, long, default_value = "checkpoint.json")]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: Option<u64>,
    /// Initial learning rate; 0 freezes the weights.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, value_enum)]
    token_mode: Option<TokenModeArg>,
    /// Train the pair-only baseline (one reference, no pose tokens).
    #[arg(long)]
    pairwise: bool,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    registers: Option<usize>,
    #[arg(long)]
    head_layers: Option<usize>,
    #[arg(long)]
    ff_mult: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Print a progress line every N steps (0 = silent).
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Args)]
struct EstimatorArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use ground-truth relative poses instead of the network.
    #[arg(long, conflicts_with_all = ["checkpoint", "noise"])]
    oracle: bool,
    /// Use ground-truth relative poses with injected noise.
    #[arg(long, conflicts_with = "checkpoint")]
    noise: bool,
    /// Treat the checkpoint as a pair-only model.
    #[arg(long, requires = "checkpoint")]
    pairwise: bool,
    #[arg(long)]
    rot_sigma: Option<f64>,
    #[arg(long)]
    dir_sigma: Option<f64>,
    /// Extra noise in degrees for references with no overlap.
    #[arg(long)]
    overlap_penalty: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Single reference count.
    #[arg(long, conflicts_with = "grid_k")]
    k: Option<usize>,
    /// Comma-separated reference counts.
    #[arg(long, value_delimiter = ',')]
    grid_k: Option<Vec<usize>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    retrieval: Option<Vec<RetrievalArg>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    scale: Option<Vec<ScaleArg>>,
    /// Write zero wall times so equal runs give identical files.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; a CSV of per-query records is written beside it.
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    query: String,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    retrieval: Option<RetrievalArg>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    retrieval: Option<RetrievalArg>,
}

/// Usage errors map to exit code 2, everything else to 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Validation failures of a resolved configuration are usage errors.
fn check_config(r: mlk_core::Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        mlk_core::Error::InvalidConfig(m) => usage(m),
        other => other.into(),
    })
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Prints the configuration and returns true when `--dump-config` was given.
fn dump<T: Serialize>(common: &Common, cfg: &T) -> Result<bool> {
    if common.dump_config {
        println!("{}", serde_json::to_string_pretty(cfg)?);
    }
    Ok(common.dump_config)
}

fn open_scene(path: &Path) -> Result<Scene> {
    if !path.exists() {
        return Err(usage(format!("scene file {} does not exist", path.display())));
    }
    load_scene(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_gen_scene(a: GenSceneArgs) -> Result<()> {
    let mut cfg: SceneGenConfig = read_config(&a.common.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.frames {
        cfg.num_database_frames = v as usize;
    }
    if let Some(v) = a.queries {
        cfg.num_queries = v as usize;
    }
    if let Some(v) = a.landmarks {
        cfg.num_landmarks = v as usize;
    }
    if let Some(v) = a.trap_fraction {
        cfg.trap_fraction = v;
    }
    if let Some(v) = a.grid {
        cfg.grid = v;
    }
    if let Some(v) = a.fov {
        cfg.fov_degrees = v;
    }
    check_config(cfg.validate())?;
    if dump(&a.common, &cfg)? {
        return Ok(());
    }
    let scene = generate_scene(&cfg)?;
    save_scene(&scene, &a.output)?;
    let queries = scene.query_indices();
    let mut covis = 0.0;
    for &q in &queries {
        let r = retrieve(&scene, &scene.frames[q].id, 1, Strategy::CovisOracle)?;
        covis += r.scores.first().copied().unwrap_or(0.0);
    }
    println!(
        "wrote {}: {} frames ({} database, {} query), {} landmarks, mean best covis {:.3}",
        a.output.display(),
        scene.frames.len(),
        scene.database_indices().len(),
        queries.len(),
        scene.landmarks.len(),
        covis / queries.len().max(1) as f64
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    pairwise: bool,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainFile = read_config(&a.common.config)?;
    let scenes = a.scenes.iter().map(|p| open_scene(p)).collect::<Result<Vec<_>>>()?;
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    let fm = &scenes[0].frames[0].feature_map;
    m.patch_grid = (fm.height, fm.width);
    m.feature_channels = fm.channels;
    if let Some(v) = a.seed {
        m.seed = v;
        t.seed = v;
    }
    if let Some(v) = a.steps {
        t.steps = v as usize;
    }
    if let Some(v) = a.lr {
        t.learning_rate.initial = v;
        t.learning_rate.final_lr = t.learning_rate.final_lr.min(v);
    }
    if let Some(v) = a.lr_final {
        t.learning_rate.final_lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v as usize;
    }
    if let Some(v) = a.k_min {
        t.k_range.0 = v;
    }
    if let Some(v) = a.k_max {
        t.k_range.1 = v;
    }
    if let Some(v) = a.token_mode {
        t.token_mode = v.into();
    }
    m.token_mode = t.token_mode;
    if let Some(v) = a.grad_clip {
        t.grad_clip = Some(v);
    }
    for (flag, field) in [
        (a.token_dim, &mut m.token_dim),
        (a.blocks, &mut m.num_blocks),
        (a.heads, &mut m.num_heads),
        (a.registers, &mut m.num_register_tokens),
        (a.head_layers, &mut m.head_layers),
        (a.ff_mult, &mut m.ff_mult),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    cfg.pairwise |= a.pairwise;
    check_config(cfg.model.validate())?;
    check_config(cfg.train.validate())?;
    if dump(&a.common, &cfg)? {
        return Ok(());
    }

    let data = TrainingSet::new(scenes)?;
    let weights = Weights::init(&cfg.model)?;
    let mut curve: Vec<StepRecord> = Vec::new();
    let log_every = a.log_every;
    let progress = |r: &StepRecord| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  |g| {:.3}", r.step + 1, r.total, r.grad_norm);
        }
        curve.push(r.clone());
    };
    let result = if cfg.pairwise {
        pairwise_with_progress(weights, &data, &cfg.train, progress)
    } else {
        train_with_progress(weights, &data, &cfg.train, progress)
    };
    let csv_path = a.output.with_extension("csv");
    match result {
        Ok((w, records)) => {
            w.save(&a.output)?;
            save_loss_csv(&records, &csv_path)?;
            let last = records.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "wrote {} and {} ({} steps, final loss {:.4})",
                a.output.display(),
                csv_path.display(),
                records.len(),
                last
            );
            Ok(())
        }
        Err(e) => {
            let diag = a.output.with_extension("diverged.csv");
            save_loss_csv(&curve, &diag)?;
            Err(anyhow::Error::from(e).context(format!("training failed; loss curve up to the failure in {}", diag.display())))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EstimatorFile {
    kind: String,
    checkpoint: Option<PathBuf>,
    noise: NoiseModel,
}

impl Default for EstimatorFile {
    fn default() -> Self {
        Self {
            kind: "network".into(),
            checkpoint: None,
            noise: NoiseModel::default(),
        }
    }
}

impl EstimatorFile {
    fn apply(&mut self, a: &EstimatorArgs) {
        if a.oracle {
            self.kind = "oracle".into();
        } else if a.noise {
            self.kind = "noisy_oracle".into();
        } else if a.checkpoint.is_some() {
            self.kind = if a.pairwise { "pairwise" } else { "network" }.into();
            self.checkpoint = a.checkpoint.clone();
        }
        let n = &mut self.noise;
        for (flag, field) in [
            (a.rot_sigma, &mut n.rot_sigma_deg),
            (a.dir_sigma, &mut n.dir_sigma_deg),
            (a.overlap_penalty, &mut n.overlap_penalty_deg),
        ] {
            if let Some(v) = flag {
                *field = v;
            }
        }
        if let Some(v) = a.noise_seed {
            n.seed = v;
        }
    }

    fn check(&self) -> Result<()> {
        match self.kind.as_str() {
            "oracle" | "noisy_oracle" => Ok(()),
            "network" | "pairwise" if self.checkpoint.is_none() => {
                Err(usage("a checkpoint is required unless --oracle or --noise is given"))
            }
            "network" | "pairwise" => Ok(()),
            other => Err(usage(format!("unknown estimator kind {other}"))),
        }
    }

    fn load_weights(&self) -> Result<Option<Weights>> {
        match &self.checkpoint {
            Some(p) if self.kind == "network" || self.kind == "pairwise" => {
                if !p.exists() {
                    return Err(usage(format!("checkpoint {} does not exist", p.display())));
                }
                Ok(Some(Weights::load(p).with_context(|| format!("loading {}", p.display()))?))
            }
            _ => Ok(None),
        }
    }

    fn estimator<'a>(&self, w: &'a Option<Weights>) -> Estimator<'a> {
        match (self.kind.as_str(), w) {
            ("network", Some(w)) => Estimator::Network(w),
            ("pairwise", Some(w)) => Estimator::Pairwise(w),
            ("noisy_oracle", _) => Estimator::NoisyOracle(self.noise),
            _ => Estimator::Oracle,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalFile {
    estimator: EstimatorFile,
    grid: BenchmarkGrid,
    seed: u64,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self {
            estimator: EstimatorFile::default(),
            grid: BenchmarkGrid::default(),
            seed: 0,
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalFile = read_config(&a.common.config)?;
    cfg.estimator.apply(&a.estimator);
    if let Some(k) = a.k {
        cfg.grid.ks = vec![k];
    }
    if let Some(ks) = &a.grid_k {
        cfg.grid.ks = ks.clone();
    }
    if let Some(r) = &a.retrieval {
        cfg.grid.strategies = r.iter().map(|&s| s.into()).collect();
    }
    if let Some(s) = &a.scale {
        cfg.grid.methods = s.iter().map(|&m| m.into()).collect();
    }
    if a.no_timing {
        cfg.grid.timing = false;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.estimator.check()?;
    if cfg.grid.ks.is_empty() || cfg.grid.ks.contains(&0) {
        return Err(usage("reference counts must be positive"));
    }
    if dump(&a.common, &cfg)? {
        return Ok(());
    }
    let scene = open_scene(&a.scene)?;
    let weights = cfg.estimator.load_weights()?;
    let report = run_benchmark(&scene, &cfg.estimator.estimator(&weights), &cfg.grid, cfg.seed)?;
    report.save(&a.output)?;
    println!(
        "{:<13} {:<17} {:>3} {:<13} {:>5} {:>11} {:>10} {:>7} {:>7} {:>7} {:>9}",
        "estimator", "method", "k", "retrieval", "fail", "med_trans", "med_rot", "auc@5", "auc@10", "auc@20", "ms/query"
    );
    for c in &report.cells {
        println!(
            "{:<13} {:<17} {:>3} {:<13} {:>5} {:>11.5} {:>10.4} {:>7.4} {:>7.4} {:>7.4} {:>9.3}",
            c.estimator,
            c.method.as_str(),
            c.k,
            c.retrieval.as_str(),
            c.failures,
            c.median_trans,
            c.median_rot,
            c.auc[0],
            c.auc[1],
            c.auc[2],
            c.mean_wall_ms
        );
    }
    println!("wrote {} and {}", a.output.display(), a.output.with_extension("csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct LocalizeFile {
    estimator: EstimatorFile,
    k: usize,
    retrieval: Strategy,
    method: ScaleMethod,
}

impl Default for LocalizeFile {
    fn default() -> Self {
        Self {
            estimator: EstimatorFile::default(),
            k: 10,
            retrieval: Strategy::CovisOracle,
            method: ScaleMethod::MotionAveraging,
        }
    }
}

fn cmd_localize(a: LocalizeArgs) -> Result<()> {
    let mut cfg: LocalizeFile = read_config(&a.common.config)?;
    cfg.estimator.apply(&a.estimator);
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.retrieval {
        cfg.retrieval = r.into();
    }
    if let Some(s) = a.scale {
        cfg.method = s.into();
    }
    cfg.estimator.check()?;
    if dump(&a.common, &cfg)? {
        return Ok(());
    }
    let scene = open_scene(&a.scene)?;
    let weights = cfg.estimator.load_weights()?;
    let loc = localize_query(
        &scene,
        &a.query,
        &cfg.estimator.estimator(&weights),
        &LocalizeConfig {
            k: cfg.k,
            retrieval: cfg.retrieval,
            method: cfg.method,
        },
    )?;
    let gt = scene.frame(&a.query)?.pose;
    let q = loc.pose.rotation;
    let c = loc.pose.center();
    let out = serde_json::json!({
        "query": a.query,
        "pose": { "q": [q.w, q.x, q.y, q.z], "t": [loc.pose.translation.x, loc.pose.translation.y, loc.pose.translation.z] },
        "center": [c.x, c.y, c.z],
        "method": cfg.method,
        "references": loc.retrieval.frame_ids,
        "scores": loc.retrieval.scores,
        "residual": loc.estimate.residual,
        "num_candidates": loc.estimate.num_candidates,
        "trans_err_units": (c - gt.center()).norm(),
        "rot_err_deg": rotation_angle_error(&loc.pose.rotation_matrix(), &gt.rotation_matrix()),
        "timings_ms": { "retrieval": loc.retrieval_ms, "inference": loc.inference_ms, "recovery": loc.recovery_ms },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RetrieveFile {
    k: usize,
    retrieval: Strategy,
}

impl Default for RetrieveFile {
    fn default() -> Self {
        Self {
            k: 10,
            retrieval: Strategy::CovisOracle,
        }
    }
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let mut cfg: RetrieveFile = read_config(&a.common.config)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.retrieval {
        cfg.retrieval = r.into();
    }
    if cfg.k == 0 {
        return Err(usage("k must be positive"));
    }
    if dump(&a.common, &cfg)? {
        return Ok(());
    }
    let scene = open_scene(&a.scene)?;
    let r = retrieve(&scene, &a.query, cfg.k, cfg.retrieval)?;
    println!("{:>4}  {:<10} {:>12}", "rank", "frame", "score");
    for (i, (id, s)) in r.frame_ids.iter().zip(&r.scores).enumerate() {
        println!("{:>4}  {:<10} {:>12.6}", i + 1, id, s);
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MLK_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("MLK_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenScene(a) => cmd_gen_scene(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Localize(a) => cmd_localize(a),
        Command::Retrieve(a) => cmd_retrieve(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
