//! Command-line front end.
//!
//! Every subcommand reads optional `key=value` settings from `--config`,
//! applies flag overrides on top, prints the resolved settings and then runs.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, SweepKind, TokenSchedule};
use crate::error::{Error, Result};
use crate::io::dataset::{write_cifar_binary, write_meta_csv};
use crate::io::{
    gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, visualize_mask, Dataset, DifficultyMix, KvConfig,
};
use crate::model::{ModelConfig, VisionTransformer};
use crate::numerics::{no_grad, AdamWConfig};
use crate::sparsifier::{self, ExecMode, PruneConfig, Selector, Strategy};
use crate::trainer::{evaluate, strategy_label, TeacherTargets, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vitprune", version, about = "Adaptive token pruning for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shape dataset (CIFAR binary layout plus a .csv sidecar).
    GenData(GenDataArgs),
    /// Train a dense model, used as the distillation teacher.
    TrainTeacher(TrainArgs),
    /// Dense/sparse alternating training with token distillation.
    Train(TrainArgs),
    /// Accuracy and density of one checkpoint under several pruning policies.
    Eval(EvalArgs),
    /// Prune-layer x threshold sensitivity grid.
    Sweep(SweepArgs),
    /// Analytic FLOP accounting.
    Flops(FlopsArgs),
    /// Distribution of per-sample token densities.
    DensityStats(EvalArgs),
    /// Forward throughput of dense, masked and compacted execution.
    Benchmark(BenchArgs),
    /// Side-by-side image with pruned patches blacked out.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value settings; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
    /// Fractions of small,medium,large objects.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
}

/// Pruning-policy flags shared by the inference commands.
#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Mass thresholds (comma-separated).
    #[arg(long = "mass-th")]
    pub mass_th: Option<String>,
    /// Keep ratios for the value selector (comma-separated).
    #[arg(long)]
    pub density: Option<String>,
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<usize>,
    /// tis or cls
    #[arg(long)]
    pub selector: Option<String>,
    /// masked or compacted
    #[arg(long = "exec-mode")]
    pub exec_mode: Option<String>,
}

/// Data source: a CIFAR-layout file, or synthetic images generated in memory.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic samples to generate when no data file is given.
    #[arg(long = "data-count")]
    pub data_count: Option<usize>,
    #[arg(long = "data-seed")]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub preset: Option<String>,
    /// Training data file; synthetic data is generated when absent.
    #[arg(long = "train-data")]
    pub train_data: Option<PathBuf>,
    #[arg(long = "eval-data")]
    pub eval_data: Option<PathBuf>,
    #[arg(long = "train-count")]
    pub train_count: Option<usize>,
    #[arg(long = "eval-count")]
    pub eval_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "mass-th")]
    pub mass_th: Option<f64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<usize>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Line-delimited JSON epoch log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Prune layers (comma-separated, default 0..L-2).
    #[arg(long = "prune-layers")]
    pub prune_layers: Option<String>,
    /// Thresholds (comma-separated, default 0.40..0.95 step 0.05 and 1.0).
    #[arg(long)]
    pub thresholds: Option<String>,
    /// mass or value
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<usize>,
    /// Explicit per-layer token counts (comma-separated), used for both halves of each layer.
    #[arg(long)]
    pub tokens: Option<String>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long = "mass-th")]
    pub mass_th: Option<f64>,
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long = "mass-th")]
    pub mass_th: Option<f64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long = "prune-layer")]
    pub prune_layer: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Settings resolution
// ---------------------------------------------------------------------------

struct Settings {
    kv: KvConfig,
}

impl Settings {
    fn new(common: &Common) -> Result<Self> {
        let mut kv = match &common.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        set(&mut kv, "seed", &common.seed);
        if kv.get("seed").is_none() {
            kv.set("seed", 0);
        }
        Ok(Settings { kv })
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.kv.parse_or(key, default)
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.kv.parse_key(key)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.kv.parse_list(key)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
    }

    fn seed(&self) -> Result<u64> {
        self.or("seed", 0)
    }

    fn print(&self, command: &str) -> Result<()> {
        println!("# {command}: resolved config");
        print!("{}", self.kv.render());
        println!("# seed {}", self.seed()?);
        Ok(())
    }
}

fn set<T: ToString>(kv: &mut KvConfig, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn set_path(kv: &mut KvConfig, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        kv.set(key, v.display());
    }
}

fn apply_data(kv: &mut KvConfig, d: &DataArgs) {
    set_path(kv, "data", &d.data);
    set(kv, "data_count", &d.data_count);
    set(kv, "data_seed", &d.data_seed);
}

fn apply_policy(kv: &mut KvConfig, p: &PolicyArgs) {
    set(kv, "mass_th", &p.mass_th);
    set(kv, "density", &p.density);
    set(kv, "prune_layer", &p.prune_layer);
    set(kv, "selector", &p.selector);
    set(kv, "exec_mode", &p.exec_mode);
}

fn parse_selector(s: &str) -> Result<Selector> {
    match s {
        "tis" => Ok(Selector::Tis),
        "cls" | "cls_row" => Ok(Selector::ClsRow),
        other => Err(Error::Config(format!("unknown selector '{other}' (tis or cls)"))),
    }
}

fn parse_exec_mode(s: &str) -> Result<ExecMode> {
    match s {
        "masked" => Ok(ExecMode::Masked),
        "compacted" => Ok(ExecMode::Compacted),
        other => Err(Error::Config(format!("unknown exec mode '{other}' (masked or compacted)"))),
    }
}

fn default_prune_layer(config: &ModelConfig) -> usize {
    (config.num_layers / 4).min(config.num_layers - 1)
}

/// Policies from `mass_th` and `density` lists.
fn policies(s: &Settings, config: &ModelConfig, default_mass: Option<f64>) -> Result<Vec<PruneConfig>> {
    let layer = s.or("prune_layer", default_prune_layer(config))?;
    let mode = parse_exec_mode(&s.or("exec_mode", "compacted".to_string())?)?;
    let selector = parse_selector(&s.or("selector", "tis".to_string())?)?;
    let mut out = Vec::new();
    for m in s.list::<f64>("mass_th")?.unwrap_or_default() {
        out.push(PruneConfig::mass(m, layer, mode));
    }
    for r in s.list::<f64>("density")?.unwrap_or_default() {
        out.push(PruneConfig::value(r, layer, mode));
    }
    if out.is_empty() {
        if let Some(m) = default_mass {
            out.push(PruneConfig::mass(m, layer, mode));
        }
    }
    for p in &mut out {
        p.selector = selector;
        p.validate(config.num_layers)?;
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<VisionTransformer<f32>> {
    load_checkpoint::<f32>(path)?.to_model()
}

fn dataset(
    s: &Settings,
    path_key: &str,
    count_key: &str,
    default_count: usize,
    seed_offset: u64,
    split: &str,
) -> Result<Dataset> {
    if let Some(p) = s.path(path_key) {
        return load_dataset(&p);
    }
    let seed = s.or("data_seed", s.seed()?.wrapping_add(seed_offset))?;
    let mix = match s.kv.get("mix") {
        Some(m) => DifficultyMix::parse(m)?,
        None => DifficultyMix::default(),
    };
    gen_synthetic(s.or(count_key, default_count)?, 32, seed, mix, split)
}

fn check_data(model: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.channels != model.channels || data.image_size != model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.image_size, data.image_size, model.channels, model.image_size, model.image_size
        )));
    }
    Ok(())
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set(&mut s.kv, "count", &a.count);
    set(&mut s.kv, "mix", &a.mix);
    set_path(&mut s.kv, "out", &a.out);
    set(&mut s.kv, "split", &a.split);
    s.print("gen-data")?;
    let out = s.require_path("out")?;
    let mix = match s.kv.get("mix") {
        Some(m) => DifficultyMix::parse(m)?,
        None => DifficultyMix::default(),
    };
    let split = s.or("split", "train".to_string())?;
    let data = gen_synthetic(s.or("count", 10_000usize)?, 32, s.seed()?, mix, &split)?;
    write_cifar_binary(&out, &data)?;
    let sidecar = out.with_extension("csv");
    write_meta_csv(&sidecar, data.meta.as_deref().unwrap_or_default())?;
    println!("wrote {} images to {} (metadata {})", data.len(), out.display(), sidecar.display());
    Ok(())
}

fn train(a: &TrainArgs, teacher_run: bool) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set(&mut s.kv, "preset", &a.preset);
    set_path(&mut s.kv, "train_data", &a.train_data);
    set_path(&mut s.kv, "eval_data", &a.eval_data);
    set(&mut s.kv, "train_count", &a.train_count);
    set(&mut s.kv, "eval_count", &a.eval_count);
    set(&mut s.kv, "epochs", &a.epochs);
    set(&mut s.kv, "batch_size", &a.batch_size);
    set(&mut s.kv, "lr", &a.lr);
    set(&mut s.kv, "beta", &a.beta);
    set(&mut s.kv, "mass_th", &a.mass_th);
    set(&mut s.kv, "density", &a.density);
    set(&mut s.kv, "prune_layer", &a.prune_layer);
    set_path(&mut s.kv, "teacher", &a.teacher);
    set_path(&mut s.kv, "out", &a.out);
    set_path(&mut s.kv, "log", &a.log);
    set_path(&mut s.kv, "resume", &a.resume);
    let command = if teacher_run { "train-teacher" } else { "train" };

    let model_cfg = ModelConfig::preset(&s.or("preset", "toy".to_string())?)?;
    let seed = s.seed()?;
    let defaults =
        if teacher_run { TrainConfig::dense(30, seed) } else { TrainConfig { seed, ..TrainConfig::default() } };
    let mut cfg = TrainConfig {
        epochs: s.or("epochs", defaults.epochs)?,
        batch_size: s.or("batch_size", defaults.batch_size)?,
        lr: s.or("lr", defaults.lr)?,
        min_lr: s.or("min_lr", defaults.min_lr)?,
        warmup_epochs: s.or("warmup_epochs", defaults.warmup_epochs)?,
        optimizer: AdamWConfig {
            weight_decay: s.or("weight_decay", defaults.optimizer.weight_decay)?,
            ..defaults.optimizer
        },
        dense_first: s.or("dense_first", defaults.dense_first)?,
        flip: s.or("flip", defaults.flip)?,
        eval_batch: s.or("eval_batch", defaults.eval_batch)?,
        eval_every: s.or("eval_every", defaults.eval_every)?,
        ..defaults
    };
    if !teacher_run {
        cfg.beta = s.or("beta", cfg.beta)?;
        let layer = s.or("prune_layer", default_prune_layer(&model_cfg))?;
        let mut prune = match (s.opt::<f64>("mass_th")?, s.opt::<f64>("density")?) {
            (Some(_), Some(_)) => return Err(Error::Config("give either mass_th or density, not both".into())),
            (None, Some(r)) => PruneConfig::value(r, layer, ExecMode::Masked),
            (m, None) => PruneConfig::mass(m.unwrap_or(0.7), layer, ExecMode::Masked),
        };
        prune.selector = parse_selector(&s.or("selector", "tis".to_string())?)?;
        cfg.prune = prune;
        cfg.teacher = s.path("teacher");
    }
    let out = s.path("out").unwrap_or_else(|| PathBuf::from(format!("{command}.ckpt")));
    let log_path = s.path("log").unwrap_or_else(|| out.with_extension("log.jsonl"));
    s.kv.set("out", out.display());
    s.kv.set("log", log_path.display());
    s.print(command)?;
    println!("# train config {}", serde_json::to_string(&cfg)?);

    let train_data = dataset(&s, "train_data", "train_count", 10_000, 1, "train")?;
    let eval_data = dataset(&s, "eval_data", "eval_count", 2_000, 2, "eval")?;
    check_data(&model_cfg, &train_data)?;
    check_data(&model_cfg, &eval_data)?;
    let teacher = match (&cfg.teacher, cfg.beta > 0.0) {
        (Some(p), true) => {
            let t = load_model(p)?;
            println!("computing teacher targets for {} images", train_data.len());
            Some(no_grad(|| TeacherTargets::compute(&t, &model_cfg, &train_data, cfg.flip, cfg.eval_batch))?)
        }
        (None, true) => return Err(Error::Config("beta > 0 needs a teacher checkpoint (teacher=...)".into())),
        _ => None,
    };
    let model = VisionTransformer::<f32>::new(model_cfg, seed)?;
    let mut trainer = Trainer::new(model, cfg, &train_data, Some(&eval_data), teacher)?;
    if let Some(r) = s.path("resume") {
        trainer.resume(&load_checkpoint(&r)?)?;
        println!("resumed after epoch {}", trainer.completed_epochs());
    }
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    trainer.train(|t, entry| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")?;
        println!("{line}");
        save_checkpoint(&out, &t.checkpoint()?)
    })?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set_path(&mut s.kv, "checkpoint", &a.checkpoint);
    apply_data(&mut s.kv, &a.data);
    apply_policy(&mut s.kv, &a.policy);
    set(&mut s.kv, "batch", &a.batch);
    s.print("eval")?;
    let model = load_model(&s.require_path("checkpoint")?)?;
    let config = model.config().clone();
    let data = dataset(&s, "data", "data_count", 2_000, 2, "eval")?;
    check_data(&config, &data)?;
    let pols = policies(&s, &config, None)?;
    let ev = evaluate(&model, &data, &pols, s.or("batch", 250usize)?)?;
    let dense_flops = analysis::flops(&config, &TokenSchedule::dense(&config))?.total;
    let mut csv = String::from("policy,prune_layer,accuracy,mean_density,gflops\n");
    csv.push_str(&format!("dense,,{:.6},1.000000,{:.4}\n", ev.dense_accuracy, dense_flops as f64 / 1e9));
    for p in &ev.points {
        let (f, _) = analysis::sparse_flops(&config, p.prune.prune_layer, &p.densities)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.4}\n",
            strategy_label(&p.prune.strategy),
            p.prune.prune_layer,
            p.accuracy,
            p.mean_density,
            f / 1e9
        ));
    }
    print!("{csv}");
    write_out(&a.csv, &csv)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set_path(&mut s.kv, "checkpoint", &a.checkpoint);
    apply_data(&mut s.kv, &a.data);
    set(&mut s.kv, "prune_layers", &a.prune_layers);
    set(&mut s.kv, "thresholds", &a.thresholds);
    set(&mut s.kv, "kind", &a.kind);
    set(&mut s.kv, "batch", &a.batch);
    s.print("sweep")?;
    let model = load_model(&s.require_path("checkpoint")?)?;
    let config = model.config().clone();
    let data = dataset(&s, "data", "data_count", 2_000, 2, "eval")?;
    check_data(&config, &data)?;
    let layers = s.list::<usize>("prune_layers")?.unwrap_or_else(|| (0..config.num_layers.saturating_sub(1)).collect());
    let thresholds = s.list::<f64>("thresholds")?.unwrap_or_else(default_thresholds);
    let kind = match s.or("kind", "mass".to_string())?.as_str() {
        "mass" => SweepKind::Mass,
        "value" => SweepKind::Value,
        other => return Err(Error::Config(format!("unknown sweep kind '{other}' (mass or value)"))),
    };
    let r = analysis::sensitivity_sweep(&model, &data, &layers, &thresholds, kind, s.or("batch", 250usize)?)?;
    let csv = r.to_csv();
    print!("{csv}");
    println!("dense accuracy {:.6}", r.dense_accuracy);
    print!("{}", r.depth_report());
    write_out(&a.csv, &csv)
}

/// 0.40, 0.45, ..., 0.95 and 1.0.
pub fn default_thresholds() -> Vec<f64> {
    let mut t: Vec<f64> = (0..12).map(|i| (40 + 5 * i) as f64 / 100.0).collect();
    t.push(1.0);
    t
}

fn flops_cmd(a: &FlopsArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set(&mut s.kv, "preset", &a.preset);
    set(&mut s.kv, "density", &a.density);
    set(&mut s.kv, "prune_layer", &a.prune_layer);
    set(&mut s.kv, "tokens", &a.tokens);
    s.print("flops")?;
    let config = ModelConfig::preset(&s.or("preset", "toy".to_string())?)?;
    let dense = analysis::flops(&config, &TokenSchedule::dense(&config))?;
    println!("{dense}");
    let schedule = if let Some(t) = s.list::<usize>("tokens")? {
        Some(TokenSchedule::uniform(t))
    } else if let Some(d) = s.opt::<f64>("density")? {
        Some(TokenSchedule::from_density(&config, s.or("prune_layer", default_prune_layer(&config))?, d)?)
    } else {
        None
    };
    let mut csv = dense.to_csv();
    if let Some(sched) = schedule {
        let sparse = analysis::flops(&config, &sched)?;
        println!("{sparse}");
        println!(
            "reduction {:.1}% ({:.3} -> {:.3} GFLOPs)",
            sparse.reduction_vs(&dense),
            dense.gflops(),
            sparse.gflops()
        );
        csv = sparse.to_csv();
    }
    write_out(&a.csv, &csv)
}

fn density_stats(a: &EvalArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set_path(&mut s.kv, "checkpoint", &a.checkpoint);
    apply_data(&mut s.kv, &a.data);
    apply_policy(&mut s.kv, &a.policy);
    set(&mut s.kv, "batch", &a.batch);
    s.print("density-stats")?;
    let model = load_model(&s.require_path("checkpoint")?)?;
    let config = model.config().clone();
    let data = dataset(&s, "data", "data_count", 2_000, 2, "eval")?;
    check_data(&config, &data)?;
    let mut csv = String::new();
    for p in policies(&s, &config, Some(0.7))? {
        let st = analysis::density_stats(&model, &data, &p, s.or("batch", 250usize)?)?;
        println!(
            "{} at layer {}: mean {:.4} std {:.4} min {:.4} max {:.4} over {} samples",
            strategy_label(&p.strategy),
            p.prune_layer,
            st.mean,
            st.std,
            st.min,
            st.max,
            st.densities.len()
        );
        for c in &st.by_size {
            println!("  {:<6} n={:<5} mean {:.4}", c.size_class.name(), c.count, c.mean);
        }
        csv.push_str(&st.to_csv());
    }
    print!("{csv}");
    write_out(&a.csv, &csv)
}

fn bench(a: &BenchArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set(&mut s.kv, "preset", &a.preset);
    set_path(&mut s.kv, "checkpoint", &a.checkpoint);
    set(&mut s.kv, "density", &a.density);
    set(&mut s.kv, "mass_th", &a.mass_th);
    set(&mut s.kv, "prune_layer", &a.prune_layer);
    set(&mut s.kv, "batch", &a.batch);
    set(&mut s.kv, "repetitions", &a.repetitions);
    set(&mut s.kv, "warmup", &a.warmup);
    s.print("benchmark")?;
    let model = match s.path("checkpoint") {
        Some(p) => load_model(&p)?,
        None => VisionTransformer::new(ModelConfig::preset(&s.or("preset", "toy".to_string())?)?, s.seed()?)?,
    };
    let layer = s.or("prune_layer", default_prune_layer(model.config()))?;
    let prune = match s.opt::<f64>("mass_th")? {
        Some(m) => PruneConfig::mass(m, layer, ExecMode::Compacted),
        None => PruneConfig::value(s.or("density", 0.42)?, layer, ExecMode::Compacted),
    };
    let r = analysis::benchmark(
        &model,
        &prune,
        s.or("batch", 8usize)?,
        s.or("repetitions", 20usize)?,
        s.or("warmup", 2usize)?,
        s.seed()?,
    )?;
    print!("{r}");
    Ok(())
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let mut s = Settings::new(&a.common)?;
    set_path(&mut s.kv, "checkpoint", &a.checkpoint);
    apply_data(&mut s.kv, &a.data);
    set(&mut s.kv, "index", &a.index);
    set(&mut s.kv, "mass_th", &a.mass_th);
    set(&mut s.kv, "density", &a.density);
    set(&mut s.kv, "prune_layer", &a.prune_layer);
    set(&mut s.kv, "scale", &a.scale);
    set_path(&mut s.kv, "out", &a.out);
    s.print("visualize")?;
    let model = load_model(&s.require_path("checkpoint")?)?;
    let config = model.config().clone();
    let data = dataset(&s, "data", "data_count", 2_000, 2, "eval")?;
    check_data(&config, &data)?;
    let index: usize = s.or("index", 0)?;
    if index >= data.len() {
        return Err(Error::Index(format!("image {index} out of range for {} images", data.len())));
    }
    let layer = s.or("prune_layer", default_prune_layer(&config))?;
    let strategy = match s.opt::<f64>("density")? {
        Some(r) => Strategy::Value { rho: r },
        None => Strategy::Mass { threshold: s.or("mass_th", 0.7)? },
    };
    let prune = PruneConfig { strategy, ..PruneConfig::mass(0.7, layer, ExecMode::Compacted) };
    prune.validate(config.num_layers)?;
    let mask = no_grad(|| -> Result<_> {
        let prefix = model.forward_prefix(&data.batch::<f32>(&[index], None)?, layer, &[])?;
        Ok(sparsifier::plan(prefix.record(), &prune)?.masks.remove(0))
    })?;
    let out = s.path("out").unwrap_or_else(|| PathBuf::from(format!("mask_{index}.ppm")));
    let sidecar = visualize_mask(
        data.image(index),
        data.channels,
        data.image_size,
        config.patch_size,
        &mask,
        s.or("scale", 8usize)?,
        &out,
    )?;
    println!(
        "wrote {} (density {:.4}, kept {} of {} tokens; {})",
        out.display(),
        mask.density(),
        mask.kept(),
        mask.len(),
        sidecar.display()
    );
    Ok(())
}

/// Runs one command line and returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train(a, true),
        Command::Train(a) => train(a, false),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Flops(a) => flops_cmd(a),
        Command::DensityStats(a) => density_stats(a),
        Command::Benchmark(a) => bench(a),
        Command::Visualize(a) => visualize(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            EXIT_RUNTIME
        }
    }
}
