//! Command implementations behind the `codestack` binary: run
//! configuration, training, evaluation, benchmarking, generation, sweeps
//! and the files they write.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codegrid::{CodeGrid, Token};
use crate::error::{Error, Result};
use crate::metrics::{
    fd_eval, fmt_sig, mean_ci, oracle_divergence, step_count, throughput_bench, write_metrics_csv,
    BenchRow, BenchWorkload, FrameEmbedder, MetricRow,
};
use crate::model::infer::Engine;
use crate::model::{ModelBundle, ModelConfig, TrainExample, Trainer, TrainerConfig, Variant};
use crate::nn::AdamWConfig;
use crate::sampling::{generate, generate_batch, Generation, SamplingConfig};
use crate::synthdata::{sample_episodes, write_dataset, SynthTaskSpec};

pub const SEED_ENV: &str = "CODESTACK_SEED";
/// Episode streams at and above this index are never used for training.
pub const EVAL_STREAM: u64 = 1 << 48;
const FLOOR_STREAM: u64 = EVAL_STREAM + (1 << 32);
const GENERATION_CHUNK: usize = 32;

fn default_warmup() -> u64 {
    100
}
fn default_clip() -> f64 {
    1.0
}
fn default_checkpoint_every() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub task: SynthTaskSpec,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train_steps: u64,
    pub batch_size: usize,
    pub eval_episodes: usize,
    /// Overrides the model, data and sampling seeds.
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampling: SamplingConfig {
                max_frames: 96,
                ..SamplingConfig::default()
            },
            task: SynthTaskSpec::default_with_seed(0),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "results".into(),
            train_steps: 5000,
            batch_size: 1,
            eval_episodes: 300,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            warmup_steps: default_warmup(),
            grad_clip: default_clip(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Applies `CODESTACK_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Copies the run seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.sampling.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        self.task.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.task.k != self.model.k || self.task.n != self.model.codebooks {
            return Err(Error::Config("task and model disagree on K or N".into()));
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            warmup_steps: self.warmup_steps,
            data_seed: self.seed,
        }
    }

    pub fn run_name(&self) -> String {
        format!(
            "{}_s{}_p{}_seed{}",
            self.model.variant, self.model.stack, self.sampling.maskgit_steps, self.seed
        )
    }

    /// Same run with another head at the same total depth.
    pub fn with_head(&self, variant: Variant, stack: usize) -> Self {
        let matched = ModelConfig::matched(variant, stack, self.model.depth());
        let mut out = self.clone();
        out.model = ModelConfig {
            variant,
            stack,
            primary_layers: matched.primary_layers,
            lt_layers: matched.lt_layers,
            ..self.model
        };
        out
    }
}

/// Command-line overrides; set flags win over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub stack: Option<usize>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub maskgit_steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub temperature: Option<f64>,
    pub top_k: Option<usize>,
    pub max_frames: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.variant.is_some() || self.stack.is_some() {
            *cfg = cfg.with_head(
                self.variant.unwrap_or(cfg.model.variant),
                self.stack.unwrap_or(cfg.model.stack),
            );
        }
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(steps => train_steps);
        set!(batch_size => batch_size);
        set!(lr => optimizer.lr);
        set!(seed => seed);
        set!(maskgit_steps => sampling.maskgit_steps);
        set!(cfg_scale => sampling.cfg_scale);
        set!(temperature => sampling.temperature);
        set!(top_k => sampling.top_k);
        set!(max_frames => sampling.max_frames);
        set!(eval_episodes => eval_episodes);
        set!(checkpoint_dir => checkpoint_dir);
        set!(output_dir => output_dir);
    }
}

/// Loads the config (or the default), applies the environment seed, then
/// flags, then propagates the seed and validates.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    finalize_config(base, overrides)
}

/// Environment seed, flags, seed propagation and validation on `cfg`.
pub fn finalize_config(mut cfg: RunConfig, overrides: &Overrides) -> Result<RunConfig> {
    cfg.apply_env_seed()?;
    overrides.apply(&mut cfg);
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn load_checkpoint(path: &Path) -> Result<crate::model::LoadedCheckpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::load(BufReader::new(f))
}

fn save_checkpoint(path: &Path, trainer: &Trainer, cfg: &RunConfig) -> Result<()> {
    let mut w = create_file(path)?;
    let extra = serde_json::json!({ "run_config": cfg });
    trainer
        .bundle
        .save(&mut w, Some(&trainer.optimizer), extra)?;
    finish(w, path)
}

/// Run config stored in a checkpoint by `cmd_train`, if any.
pub fn checkpoint_run_config(extra: &serde_json::Value) -> Option<RunConfig> {
    extra
        .get("run_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// Trains in memory, reporting `(step, loss)` after each step.
pub fn train_bundle(cfg: &RunConfig, mut on_step: impl FnMut(u64, f64)) -> Result<ModelBundle> {
    let bundle = ModelBundle::new(cfg.model)?;
    let mut trainer = Trainer::new(bundle, cfg.task.clone(), cfg.trainer_config())?;
    trainer.run(cfg.train_steps, &mut on_step)?;
    Ok(trainer.bundle)
}

/// Trains the configured head, writing `step_XXXXXXX.ckpt` every
/// `checkpoint_every` steps, `final.ckpt`, and `loss.csv` (row 0 is the
/// loss of the first batch before any update). With `resume`, training
/// continues from that checkpoint and rows are appended.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    create_dir(&cfg.checkpoint_dir)?;
    create_dir(&cfg.output_dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.bundle.config.variant != cfg.model.variant
                || loaded.bundle.config.stack != cfg.model.stack
            {
                return Err(Error::Config(format!(
                    "checkpoint holds {} S={}, config asks for {} S={}",
                    loaded.bundle.config.variant,
                    loaded.bundle.config.stack,
                    cfg.model.variant,
                    cfg.model.stack
                )));
            }
            let opt = loaded.optimizer.ok_or_else(|| {
                Error::Checkpoint("checkpoint has no optimizer state to resume".into())
            })?;
            Trainer::resume(loaded.bundle, opt, cfg.task.clone(), cfg.trainer_config())?
        }
        None => Trainer::new(
            ModelBundle::new(cfg.model)?,
            cfg.task.clone(),
            cfg.trainer_config(),
        )?,
    };

    let loss_path = cfg.output_dir.join("loss.csv");
    let append = resume.is_some() && loss_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_path)
        .map_err(|e| Error::io(&loss_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&loss_path, e);
    let initial_loss = trainer.batch_loss(trainer.step())?;
    if !append {
        writeln!(csv, "step,loss").map_err(io)?;
        writeln!(csv, "{},{}", trainer.step(), fmt_sig(initial_loss)).map_err(io)?;
    }
    let mut final_loss = initial_loss;
    let end = trainer.step() + cfg.train_steps;
    while trainer.step() < end {
        let loss = trainer.run_step().map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", trainer.step() + 1)),
            other => other,
        })?;
        final_loss = loss;
        let step = trainer.step();
        writeln!(csv, "{step},{}", fmt_sig(loss)).map_err(io)?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &cfg.checkpoint_dir.join(format!("step_{step:07}.ckpt")),
                &trainer,
                cfg,
            )?;
        }
        if step % 500 == 0 {
            log::info!("step {step}: loss {loss:.4}");
        }
    }
    csv.flush().map_err(io)?;
    let checkpoint = cfg.checkpoint_dir.join("final.ckpt");
    save_checkpoint(&checkpoint, &trainer, cfg)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_csv: loss_path,
        initial_loss,
        final_loss,
        steps: trainer.step(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    #[serde(rename = "S")]
    pub stack: usize,
    #[serde(rename = "P")]
    pub maskgit_steps: usize,
    pub seed: u64,
    pub episodes: usize,
    pub fd: f64,
    /// FD between the reference set and an independent draw of the task.
    pub fd_reference_floor: f64,
    pub joint_kl: f64,
    pub joint_tv: f64,
    pub tf_loss: f64,
    pub tf_accuracy: f64,
    pub generated_frames: usize,
    pub truncated_fraction: f64,
    pub primary_steps_per_sequence: f64,
    pub lt_passes_per_sequence: f64,
    /// Step-count model for the mean generated length.
    pub modelled_primary_steps: f64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |metric: &str, value: f64| MetricRow {
            variant: self.variant,
            stack: self.stack,
            maskgit_steps: self.maskgit_steps,
            metric: metric.into(),
            value,
            ci: None,
            seed: self.seed,
        };
        vec![
            row("fd", self.fd),
            row("fd_reference_floor", self.fd_reference_floor),
            row("joint_kl", self.joint_kl),
            row("joint_tv", self.joint_tv),
            row("tf_loss", self.tf_loss),
            row("tf_accuracy", self.tf_accuracy),
            row("generated_frames", self.generated_frames as f64),
            row("truncated_fraction", self.truncated_fraction),
            row(
                "primary_steps_per_sequence",
                self.primary_steps_per_sequence,
            ),
            row("lt_passes_per_sequence", self.lt_passes_per_sequence),
            row("modelled_primary_steps", self.modelled_primary_steps),
        ]
    }
}

/// Generates one sequence per condition in lockstep chunks. Sequence `i`
/// always uses random stream `i`, so chunking does not change the output.
pub fn generate_all(
    engine: &Engine<f64>,
    conditions: &[Vec<Token>],
    cfg: &SamplingConfig,
) -> Result<Vec<Generation>> {
    let mut out = Vec::with_capacity(conditions.len());
    for (c, chunk) in conditions.chunks(GENERATION_CHUNK).enumerate() {
        out.extend(generate_batch(
            engine,
            chunk,
            cfg,
            (c * GENERATION_CHUNK) as u64,
        )?);
    }
    Ok(out)
}

/// Held-out episodes: conditions to generate from and the reference grids.
pub fn eval_episodes(cfg: &RunConfig) -> Vec<crate::synthdata::Episode> {
    sample_episodes(&cfg.task, cfg.seed, EVAL_STREAM, cfg.eval_episodes)
}

/// Generates from held-out conditions and scores the result.
pub fn evaluate(cfg: &RunConfig, bundle: &ModelBundle) -> Result<EvalReport> {
    if cfg.eval_episodes == 0 {
        return Err(Error::Config("eval_episodes must be positive".into()));
    }
    let held = eval_episodes(cfg);
    let engine: Engine<f64> = Engine::new(bundle);
    let conditions: Vec<Vec<Token>> = held.iter().map(|e| e.condition.clone()).collect();
    let gens = generate_all(&engine, &conditions, &cfg.sampling)?;
    let grids: Vec<CodeGrid> = gens.iter().map(|g| g.grid.clone()).collect();
    let reference: Vec<CodeGrid> = held.iter().map(|e| e.grid.clone()).collect();
    let floor_set: Vec<CodeGrid> =
        sample_episodes(&cfg.task, cfg.seed, FLOOR_STREAM, cfg.eval_episodes)
            .into_iter()
            .map(|e| e.grid)
            .collect();
    let embedder = FrameEmbedder::standard(cfg.task.k, cfg.task.n);
    let frames: usize = grids.iter().map(CodeGrid::frames).sum();
    if frames < 2 {
        return Err(Error::Empty(format!(
            "only {frames} frames generated; nothing to score"
        )));
    }
    let fd = fd_eval(&grids, &reference, &embedder)?;
    let fd_reference_floor = fd_eval(&floor_set, &reference, &embedder)?;
    let div = oracle_divergence(&cfg.task, &grids)?;
    let examples = held
        .iter()
        .map(|e| TrainExample::deterministic(&bundle.config, &e.condition, &e.grid))
        .collect::<Result<Vec<_>>>()?;
    let (tf_loss, tf_accuracy) = bundle.evaluate_examples(&examples)?;
    let n = gens.len() as f64;
    let mean_frames = frames as f64 / n;
    let m = &bundle.config;
    let modelled: f64 = gens
        .iter()
        .map(|g| {
            // the EOS frame, when emitted, costs a step of its own
            let t = g.grid.frames() + usize::from(!g.truncated);
            step_count(
                t.max(1),
                m.codebooks,
                m.stack,
                cfg.sampling.maskgit_steps,
                m.variant,
                cfg.sampling.cfg_enabled(),
            )
            .primary_steps as f64
        })
        .sum::<f64>()
        / n;
    log::info!("eval: {frames} frames, mean length {mean_frames:.1}");
    Ok(EvalReport {
        variant: m.variant,
        stack: m.stack,
        maskgit_steps: cfg.sampling.maskgit_steps,
        seed: cfg.seed,
        episodes: cfg.eval_episodes,
        fd,
        fd_reference_floor,
        joint_kl: div.kl,
        joint_tv: div.tv,
        tf_loss,
        tf_accuracy,
        generated_frames: frames,
        truncated_fraction: gens.iter().filter(|g| g.truncated).count() as f64 / n,
        primary_steps_per_sequence: gens.iter().map(|g| g.primary_steps as f64).sum::<f64>() / n,
        lt_passes_per_sequence: gens.iter().map(|g| g.lt_passes as f64).sum::<f64>() / n,
        modelled_primary_steps: modelled,
    })
}

/// Evaluates a checkpoint and writes `<stem>_metrics.csv` and
/// `<stem>_metrics.json` to the output directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let loaded = load_checkpoint(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.model = loaded.bundle.config;
    let report = evaluate(&cfg, &loaded.bundle)?;
    let stem = file_stem(checkpoint);
    let csv_path = cfg.output_dir.join(format!("{stem}_metrics.csv"));
    let mut w = create_file(&csv_path)?;
    write_metrics_csv(&mut w, &report.rows()).map_err(|e| Error::io(&csv_path, e))?;
    finish(w, &csv_path)?;
    write_json(
        &cfg.output_dir.join(format!("{stem}_metrics.json")),
        &report,
    )?;
    Ok(report)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

/// Benchmarks checkpoints and writes `bench.csv`. Labels are
/// `<variant>_s<S>`, suffixed with the position when repeated. `baseline`
/// may be omitted only for a single checkpoint.
pub fn cmd_bench(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    baseline: Option<&str>,
    workload: &BenchWorkload,
) -> Result<Vec<BenchRow>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("bench needs at least one checkpoint".into()));
    }
    let bundles = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|l| l.bundle))
        .collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = bundles
        .iter()
        .map(|b| format!("{}_s{}", b.config.variant, b.config.stack))
        .collect();
    for i in 0..labels.len() {
        if labels.iter().filter(|l| **l == labels[i]).count() > 1 {
            labels[i] = format!("{}#{i}", labels[i]);
        }
    }
    let baseline = match (baseline, labels.len()) {
        (Some(b), _) => b.to_string(),
        (None, 1) => labels[0].clone(),
        (None, _) => {
            return Err(Error::Config(
                "no baseline designated; pass --baseline <label>".into(),
            ))
        }
    };
    let pairs: Vec<(String, &ModelBundle)> = labels.into_iter().zip(bundles.iter()).collect();
    let rows = throughput_bench(&pairs, &cfg.sampling, workload, &baseline)?;
    let path = cfg.output_dir.join("bench.csv");
    let mut w = create_file(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(
        w,
        "# os: {} {}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
    .map_err(io)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    writeln!(w, "# available_parallelism: {threads}").map_err(io)?;
    writeln!(
        w,
        "# workload: batch {} frames {} reps {} warmup {}; precision f32; baseline {baseline}",
        workload.batch, workload.frames, workload.reps, workload.warmup
    )
    .map_err(io)?;
    writeln!(
        w,
        "label,variant,S,P,median_seconds,frames_per_second,speedup"
    )
    .map_err(io)?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.label,
            r.variant,
            r.stack,
            r.maskgit_steps,
            fmt_sig(r.median_seconds),
            fmt_sig(r.frames_per_second),
            fmt_sig(r.speedup)
        )
        .map_err(io)?;
    }
    finish(w, &path)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSidecar {
    pub condition: Vec<Token>,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub truncated: bool,
    pub frames: usize,
    pub primary_steps: usize,
    pub lt_passes: usize,
}

/// Path of the sidecar written next to a generated grid.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("sidecar.json")
}

/// Generates one grid, writing it to `out` and the sampling record to the
/// sidecar.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    condition: &[Token],
    out: &Path,
) -> Result<Generation> {
    let loaded = load_checkpoint(checkpoint)?;
    loaded.bundle.check_condition(condition)?;
    let engine: Engine<f64> = Engine::new(&loaded.bundle);
    let g = generate(&engine, condition, &cfg.sampling)?;
    write_json(out, &g.grid.to_json())?;
    write_json(
        &sidecar_path(out),
        &GenerateSidecar {
            condition: condition.to_vec(),
            sampling: cfg.sampling,
            seed: cfg.sampling.seed,
            truncated: g.truncated,
            frames: g.grid.frames(),
            primary_steps: g.primary_steps,
            lt_passes: g.lt_passes,
        },
    )?;
    Ok(g)
}

/// Summary of a checkpoint: model config, parameter count, optimizer step
/// and stored run config.
pub fn cmd_inspect(checkpoint: &Path) -> Result<serde_json::Value> {
    let loaded = load_checkpoint(checkpoint)?;
    let params: usize = loaded
        .bundle
        .params
        .iter()
        .map(|p| p.value.data().len())
        .sum();
    Ok(serde_json::json!({
        "model": loaded.bundle.config,
        "parameters": params,
        "optimizer_step": loaded.optimizer.as_ref().map(|o| o.step),
        "extra": loaded.extra,
    }))
}

/// Writes `count` training episodes of the configured task as JSON lines.
pub fn cmd_data(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let episodes = sample_episodes(&cfg.task, cfg.seed, 0, count);
    let mut w = create_file(out)?;
    write_dataset(&mut w, &episodes)?;
    finish(w, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub variant: Variant,
    #[serde(rename = "S")]
    pub stack: usize,
    #[serde(rename = "P", default = "default_p")]
    pub maskgit_steps: usize,
}

fn default_p() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub runs: Vec<SweepEntry>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepManifest {
    /// {parallel, MaskGIT, AR} × {1, 2, 4}.
    pub fn default_grid(seeds: Vec<u64>) -> Self {
        let runs = [1, 2, 4]
            .into_iter()
            .flat_map(|s| {
                Variant::ALL.into_iter().map(move |v| SweepEntry {
                    variant: v,
                    stack: s,
                    maskgit_steps: 3,
                })
            })
            .collect();
        Self { runs, seeds }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

/// Trains and evaluates every manifest entry for every seed. Writes
/// `sweep.csv` (one row per run and metric) and `sweep_summary.csv`
/// (seed means with 95% intervals).
pub fn cmd_sweep(cfg: &RunConfig, manifest: &SweepManifest) -> Result<Vec<EvalReport>> {
    if manifest.runs.is_empty() {
        return Err(Error::Config("sweep manifest lists no runs".into()));
    }
    let seeds = if manifest.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        manifest.seeds.clone()
    };
    let mut reports = Vec::new();
    for entry in &manifest.runs {
        for &seed in &seeds {
            let mut run = cfg.with_head(entry.variant, entry.stack);
            run.sampling.maskgit_steps = entry.maskgit_steps;
            run.seed = seed;
            run.propagate_seed();
            run.validate()?;
            let name = run.run_name();
            run.checkpoint_dir = cfg.checkpoint_dir.join(&name);
            run.output_dir = cfg.output_dir.join(&name);
            log::info!("sweep: training {name}");
            let outcome = cmd_train(&run, None)?;
            reports.push(cmd_eval(&run, &outcome.checkpoint)?);
        }
    }
    let rows: Vec<MetricRow> = reports.iter().flat_map(EvalReport::rows).collect();
    let path = cfg.output_dir.join("sweep.csv");
    let mut w = create_file(&path)?;
    write_metrics_csv(&mut w, &rows).map_err(|e| Error::io(&path, e))?;
    finish(w, &path)?;

    let mut summary = Vec::new();
    for entry in &manifest.runs {
        let mine: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| {
                r.variant == entry.variant
                    && r.stack == entry.stack
                    && r.maskgit_steps == entry.maskgit_steps
            })
            .collect();
        let mut metrics: Vec<&str> = Vec::new();
        for r in &mine {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        for metric in metrics {
            let values: Vec<f64> = mine
                .iter()
                .filter(|r| r.metric == metric)
                .map(|r| r.value)
                .collect();
            if let Some((mean, ci)) = mean_ci(&values) {
                summary.push(MetricRow {
                    variant: entry.variant,
                    stack: entry.stack,
                    maskgit_steps: entry.maskgit_steps,
                    metric: metric.into(),
                    value: mean,
                    ci: Some(ci),
                    seed: seeds[0],
                });
            }
        }
    }
    let path = cfg.output_dir.join("sweep_summary.csv");
    let mut w = create_file(&path)?;
    write_metrics_csv(&mut w, &summary).map_err(|e| Error::io(&path, e))?;
    finish(w, &path)?;
    Ok(reports)
}
