//! Losses, the optimisation step and a small training driver.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig, Variant};
use crate::codegrid::{stack, CodeGrid, Token};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Tape, Var};
use crate::synthdata::{episode_rng, sample_episodes, Episode, SynthTaskSpec};

/// One episode laid out for a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub condition: Vec<Token>,
    pub unconditional: bool,
    /// BOS row followed by every target row except the last.
    pub inputs: Vec<Vec<Token>>,
    /// LT token input per row: the target row (AR) or the masked target row
    /// (MaskGIT). Unused by the parallel head.
    pub lt_tokens: Vec<Vec<Token>>,
    /// Per row and slot; `None` is not scored.
    pub targets: Vec<Vec<Option<usize>>>,
}

impl TrainExample {
    /// Stacks the grid with its EOS frame, draws the null-condition coin and,
    /// for MaskGIT, one mask ratio in (0, 1] for every stacked row. Masked PAD slots
    /// are not scored; unmasked ones stay visible as PAD.
    pub fn new(
        cfg: &ModelConfig,
        condition: &[Token],
        grid: &CodeGrid,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if grid.codebooks() != cfg.codebooks || grid.vocab().k != cfg.k {
            return Err(Error::Shape(format!(
                "grid with N={}, K={} for a model with N={}, K={}",
                grid.codebooks(),
                grid.vocab().k,
                cfg.codebooks,
                cfg.k
            )));
        }
        let unconditional = rng.random::<f64>() < cfg.p_uncond;
        let ratio = 1.0 - rng.random::<f64>();
        Self::build(cfg, condition, grid, unconditional, |row| {
            let m = ((ratio * row.len() as f64).ceil() as usize).clamp(1, row.len());
            sample(rng, row.len(), m).into_vec()
        })
    }

    /// Conditional example without randomness; MaskGIT rows are fully masked.
    pub fn deterministic(cfg: &ModelConfig, condition: &[Token], grid: &CodeGrid) -> Result<Self> {
        Self::build(cfg, condition, grid, false, |row| (0..row.len()).collect())
    }

    fn build(
        cfg: &ModelConfig,
        condition: &[Token],
        grid: &CodeGrid,
        unconditional: bool,
        mut choose_masked: impl FnMut(&[Token]) -> Vec<usize>,
    ) -> Result<Self> {
        let vocab = cfg.vocab();
        let sg = stack(&grid.with_eos_frame(), cfg.stack)?;
        let slots = cfg.slots();
        let mut inputs = vec![vec![vocab.bos(); slots]];
        let mut lt_tokens = Vec::with_capacity(sg.rows());
        let mut targets = Vec::with_capacity(sg.rows());
        for r in 0..sg.rows() {
            let row = sg.row(r);
            if r + 1 < sg.rows() {
                inputs.push(row.to_vec());
            }
            let scored = |j: usize| (row[j] != vocab.pad()).then_some(row[j] as usize);
            if cfg.variant == Variant::MaskgitLt {
                // the masked set ignores content, so a fully masked row says
                // nothing about whether it ends the sequence
                let masked = choose_masked(row);
                let mut partial = row.to_vec();
                let mut tgt = vec![None; slots];
                for j in masked {
                    partial[j] = vocab.mask();
                    tgt[j] = scored(j);
                }
                lt_tokens.push(partial);
                targets.push(tgt);
            } else {
                lt_tokens.push(row.to_vec());
                targets.push((0..slots).map(scored).collect());
            }
        }
        Ok(Self {
            condition: condition.to_vec(),
            unconditional,
            inputs,
            lt_tokens,
            targets,
        })
    }

    pub fn scored_slots(&self) -> usize {
        self.targets
            .iter()
            .flatten()
            .filter(|t| t.is_some())
            .count()
    }
}

impl ModelBundle {
    /// Per-slot logits for every stacked row of the example.
    pub fn example_logits(&self, t: &mut Tape, ex: &TrainExample) -> Result<Vec<Var>> {
        let memory = if ex.unconditional {
            self.null_memory(t)
        } else {
            self.encode(t, &ex.condition)?
        };
        let inputs: Vec<&[Token]> = ex.inputs.iter().map(Vec::as_slice).collect();
        let h = self.primary_forward(t, &inputs, memory)?;
        let lt_rows: Vec<&[Token]> = ex.lt_tokens.iter().map(Vec::as_slice).collect();
        match self.config.variant {
            Variant::Parallel => self.head_logits_parallel(t, h),
            Variant::ArLt => self.lt_ar_forward(t, h, &lt_rows),
            Variant::MaskgitLt => self.lt_maskgit_forward(t, h, &lt_rows),
        }
    }

    /// Cross-entropy summed over the scored slots of one example.
    pub fn example_loss(&self, t: &mut Tape, ex: &TrainExample) -> Result<Var> {
        let logits = self.example_logits(t, ex)?;
        let terms = logits
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                let col: Vec<Option<usize>> = ex.targets.iter().map(|row| row[j]).collect();
                t.cross_entropy(l, &col)
            })
            .collect::<Result<Vec<_>>>()?;
        t.sum(&terms)
    }

    /// Mean loss and argmax accuracy over scored slots, without updating.
    pub fn evaluate_examples(&self, examples: &[TrainExample]) -> Result<(f64, f64)> {
        let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
        for ex in examples {
            let mut t = Tape::new(&self.params);
            let logits = self.example_logits(&mut t, ex)?;
            for (j, &l) in logits.iter().enumerate() {
                let (_, v) = t.shape(l);
                let vals = t.value(l);
                for (r, row) in ex.targets.iter().enumerate() {
                    let Some(target) = row[j] else { continue };
                    let z = &vals[r * v..(r + 1) * v];
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    loss += lse - z[target];
                    let arg = (0..v).fold(0, |b, i| if z[i] > z[b] { i } else { b });
                    correct += usize::from(arg == target);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Empty("no scored slots".into()));
        }
        Ok((loss / count as f64, correct as f64 / count as f64))
    }
}

/// One optimisation step on prepared examples. Returns the mean loss per
/// scored slot.
pub fn train_step_examples(
    bundle: &mut ModelBundle,
    optimizer: &mut AdamW,
    examples: &[TrainExample],
    grad_clip: f64,
) -> Result<f64> {
    let total: usize = examples.iter().map(TrainExample::scored_slots).sum();
    if examples.is_empty() || total == 0 {
        return Err(Error::Empty("training batch".into()));
    }
    bundle.params.zero_grad();
    let mut loss_sum = 0.0;
    for ex in examples {
        let grads = {
            let mut t = Tape::new(&bundle.params);
            let loss = bundle.example_loss(&mut t, ex)?;
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value}")));
            }
            loss_sum += value;
            let root = t.scale(loss, 1.0 / total as f64);
            t.backward(root)
        };
        bundle.params.accumulate(&grads);
    }
    let norm = bundle.params.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
    }
    if grad_clip > 0.0 && norm > grad_clip {
        bundle.params.scale_grads(grad_clip / norm);
    }
    optimizer.step(&mut bundle.params);
    Ok(loss_sum / total as f64)
}

/// Builds examples from raw episodes with `rng` and takes one step.
pub fn train_step(
    bundle: &mut ModelBundle,
    optimizer: &mut AdamW,
    batch: &[Episode],
    rng: &mut impl Rng,
) -> Result<f64> {
    let examples = batch
        .iter()
        .map(|e| TrainExample::new(&bundle.config, &e.condition, &e.grid, rng))
        .collect::<Result<Vec<_>>>()?;
    train_step_examples(bundle, optimizer, &examples, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    /// Seeds the episode stream and the per-step masking draws. Equal seeds
    /// give every variant the same data in the same order.
    pub data_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            warmup_steps: 100,
            data_seed: 0,
        }
    }
}

const MASK_STREAM: u64 = 1 << 40;

pub struct Trainer {
    pub bundle: ModelBundle,
    pub optimizer: AdamW,
    pub config: TrainerConfig,
    pub task: SynthTaskSpec,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, task: SynthTaskSpec, config: TrainerConfig) -> Result<Self> {
        let optimizer = AdamW::new(config.optimizer, &bundle.params);
        Self::resume(bundle, optimizer, task, config)
    }

    pub fn resume(
        bundle: ModelBundle,
        optimizer: AdamW,
        task: SynthTaskSpec,
        config: TrainerConfig,
    ) -> Result<Self> {
        task.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if task.k != bundle.config.k || task.n != bundle.config.codebooks {
            return Err(Error::Config(format!(
                "task has K={}, N={} but the model expects K={}, N={}",
                task.k, task.n, bundle.config.k, bundle.config.codebooks
            )));
        }
        if task.condition_vocab > bundle.config.condition_vocab {
            return Err(Error::Config(
                "task condition alphabet exceeds the model's".into(),
            ));
        }
        Ok(Self {
            bundle,
            optimizer,
            config,
            task,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Episodes used at optimisation step `step`.
    pub fn batch_for(&self, step: u64) -> Vec<Episode> {
        let b = self.config.batch_size;
        sample_episodes(&self.task, self.config.data_seed, step * b as u64, b)
    }

    /// Examples of step `step`, including its masking and null-condition draws.
    pub fn examples_for(&self, step: u64) -> Result<Vec<TrainExample>> {
        let mut rng: ChaCha8Rng = episode_rng(self.config.data_seed, MASK_STREAM + step);
        self.batch_for(step)
            .iter()
            .map(|e| TrainExample::new(&self.bundle.config, &e.condition, &e.grid, &mut rng))
            .collect()
    }

    /// Mean loss per scored slot on the batch of `step`, without updating.
    pub fn batch_loss(&self, step: u64) -> Result<f64> {
        let examples = self.examples_for(step)?;
        let (mut sum, mut count) = (0.0, 0);
        for ex in &examples {
            let mut t = Tape::new(&self.bundle.params);
            let loss = self.bundle.example_loss(&mut t, ex)?;
            sum += t.scalar(loss);
            count += ex.scored_slots();
        }
        if count == 0 {
            return Err(Error::Empty("training batch".into()));
        }
        Ok(sum / count as f64)
    }

    pub fn run_step(&mut self) -> Result<f64> {
        let step = self.optimizer.step;
        let warm = self.config.warmup_steps.max(1);
        let ramp = ((step + 1) as f64 / warm as f64).min(1.0);
        self.optimizer.config.lr = self.config.optimizer.lr * ramp;
        let examples = self.examples_for(step)?;
        train_step_examples(
            &mut self.bundle,
            &mut self.optimizer,
            &examples,
            self.config.grad_clip,
        )
    }

    /// Runs `steps` steps, reporting `(step, loss)` after each.
    pub fn run(&mut self, steps: u64, mut on_step: impl FnMut(u64, f64)) -> Result<()> {
        for _ in 0..steps {
            let loss = self.run_step()?;
            on_step(self.optimizer.step, loss);
        }
        Ok(())
    }
}
