//! Decoding: temperature/top-k sampling, classifier-free guidance, the AR
//! slot loop, MaskGIT unmasking with purity selection, and the generation
//! loop over stacked steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codegrid::{CodeGrid, Token, Vocab};
use crate::error::{Error, Result};
use crate::model::infer::{Engine, PrimaryState};
use crate::model::Variant;
use crate::nn::Real;
use crate::synthdata::episode_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnmaskSchedule {
    Uniform,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Clipped to the number of candidate ids.
    pub top_k: usize,
    pub cfg_scale: f64,
    pub maskgit_steps: usize,
    pub unmask_schedule: UnmaskSchedule,
    pub seed: u64,
    /// Cap on primary-decoder steps (stacked rows) per sequence.
    pub max_frames: usize,
    /// Never sample EOS; every sequence runs to `max_frames`.
    #[serde(default)]
    pub ignore_eos: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: 80,
            cfg_scale: 2.5,
            maskgit_steps: 3,
            unmask_schedule: UnmaskSchedule::Cosine,
            seed: 0,
            max_frames: 256,
            ignore_eos: false,
        }
    }
}

impl SamplingConfig {
    /// Plain ancestral sampling from the model distribution.
    pub fn ancestral(seed: u64, max_frames: usize) -> Self {
        Self {
            temperature: 1.0,
            top_k: usize::MAX,
            cfg_scale: 1.0,
            seed,
            max_frames,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.maskgit_steps == 0 {
            return Err(Error::Config("maskgit_steps must be at least 1".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }

    /// Whether a null-condition pass is needed. At scale 1 the combination
    /// is exactly the conditional logits, so the second pass is skipped.
    pub fn cfg_enabled(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

/// `uncond + scale · (cond − uncond)`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape(format!(
            "cfg_combine: {} vs {} logits",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| u + scale * (c - u))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub token: usize,
    /// Probability of `token` under the tempered, top-k-renormalised
    /// distribution it was drawn from.
    pub purity: f64,
}

/// Draws from `softmax(logits / temperature)` restricted to the `top_k`
/// largest logits (ties by lower index). `-inf` entries are never drawn.
pub fn sample_categorical(
    logits: &[f64],
    temperature: f64,
    top_k: usize,
    rng: &mut impl Rng,
) -> Result<Sampled> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if let Some(bad) = logits
        .iter()
        .position(|l| l.is_nan() || *l == f64::INFINITY)
    {
        return Err(Error::Numeric(format!("logit {bad} is {}", logits[bad])));
    }
    let mut cand: Vec<usize> = (0..logits.len())
        .filter(|&i| logits[i] > f64::NEG_INFINITY)
        .collect();
    if cand.is_empty() {
        return Err(Error::Numeric("every logit is -inf".into()));
    }
    cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    cand.truncate(top_k);
    let max = logits[cand[0]];
    let weights: Vec<f64> = cand
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = cand.len() - 1;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            pick = k;
            break;
        }
    }
    Ok(Sampled {
        token: cand[pick],
        purity: weights[pick] / total,
    })
}

/// Removes ids that may not be generated: BOS, PAD and MASK always, EOS
/// unless `allow_eos` (first-codebook slots with EOS enabled).
pub fn mask_reserved(logits: &mut [f64], vocab: Vocab, allow_eos: bool) {
    for id in [vocab.bos(), vocab.pad(), vocab.mask()] {
        logits[id as usize] = f64::NEG_INFINITY;
    }
    if !allow_eos {
        logits[vocab.eos() as usize] = f64::NEG_INFINITY;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnmaskPlan {
    pub counts: Vec<usize>,
    /// Set when fewer iterations than requested were possible.
    pub warning: Option<String>,
}

impl UnmaskPlan {
    pub fn steps(&self) -> usize {
        self.counts.len()
    }
}

/// Splits `total` slots over `steps` unmasking iterations.
///
/// Uniform: near-equal counts with the remainder on the last iterations.
/// Cosine: cumulative unmasked count `round(total · (1 − cos(π i / 2P)))`,
/// zero counts lifted to one, then sorted ascending.
pub fn build_unmask_plan(
    total: usize,
    steps: usize,
    schedule: UnmaskSchedule,
) -> Result<UnmaskPlan> {
    if total == 0 || steps == 0 {
        return Err(Error::Config(format!(
            "unmask plan needs total ≥ 1 and P ≥ 1, got {total}, {steps}"
        )));
    }
    let mut warning = None;
    let p = if steps > total {
        let msg = format!("{steps} unmasking steps for {total} slots; using {total}");
        log::warn!("{msg}");
        warning = Some(msg);
        total
    } else {
        steps
    };
    let mut counts = match schedule {
        UnmaskSchedule::Uniform => {
            let (base, rem) = (total / p, total % p);
            (0..p)
                .map(|i| base + usize::from(i >= p - rem))
                .collect::<Vec<_>>()
        }
        UnmaskSchedule::Cosine => {
            let cum = |i: usize| -> usize {
                if i == p {
                    total
                } else {
                    let frac = 1.0 - (std::f64::consts::PI * i as f64 / (2.0 * p as f64)).cos();
                    (total as f64 * frac).round() as usize
                }
            };
            (0..p).map(|i| cum(i + 1) - cum(i)).collect()
        }
    };
    while let Some(z) = counts.iter().position(|&c| c == 0) {
        let donor = (0..p).rev().max_by_key(|&i| counts[i]).expect("p ≥ 1");
        counts[donor] -= 1;
        counts[z] += 1;
    }
    counts.sort_unstable();
    Ok(UnmaskPlan { counts, warning })
}

/// Tokens of one stacked row plus decode accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StackDecode {
    pub tokens: Vec<Token>,
    /// LT forward passes, doubled when guidance is on.
    pub lt_passes: usize,
    /// MaskGIT only: the partial row after each iteration.
    pub history: Vec<Vec<Token>>,
}

fn to_f64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|&x| Real::to_f64(x)).collect()
}

/// Guided, reserved-masked logits for one slot of one sequence.
fn slot_logits(
    cond: &[f64],
    uncond: Option<&[f64]>,
    cfg: &SamplingConfig,
    vocab: Vocab,
    allow_eos: bool,
) -> Vec<f64> {
    let mut l = match uncond {
        Some(u) => cond
            .iter()
            .zip(u)
            .map(|(&c, &u)| u + cfg.cfg_scale * (c - u))
            .collect(),
        None => cond.to_vec(),
    };
    mask_reserved(&mut l, vocab, allow_eos && !cfg.ignore_eos);
    l
}

/// Decodes one stacked row for each of `B` sequences. `h` holds the
/// conditional hidden states followed, when guidance is on, by the
/// unconditional ones (`2B × d`).
fn decode_rows<F: Real, R: Rng>(
    engine: &Engine<F>,
    h: &[F],
    cfg: &SamplingConfig,
    rngs: &mut [&mut R],
) -> Result<Vec<StackDecode>> {
    let b = rngs.len();
    let guided = cfg.cfg_enabled();
    let streams = if guided { 2 * b } else { b };
    if h.len() != streams * engine.model_dim() {
        return Err(Error::Shape(format!(
            "{} hidden values for {streams} streams",
            h.len()
        )));
    }
    let vocab = engine.vocab();
    let v = vocab.size();
    let slots = engine.slots();
    let n = engine.config.codebooks;
    let top_k = cfg.top_k;
    let mult = if guided { 2 } else { 1 };
    let mut out: Vec<StackDecode> = (0..b)
        .map(|_| StackDecode {
            tokens: Vec::with_capacity(slots),
            lt_passes: 0,
            history: Vec::new(),
        })
        .collect();
    match engine.variant() {
        Variant::Parallel => {
            let logits = to_f64(&engine.parallel_logits(h)?);
            for (i, rng) in rngs.iter_mut().enumerate() {
                for j in 0..slots {
                    let c = &logits[(i * slots + j) * v..(i * slots + j + 1) * v];
                    let u = guided
                        .then(|| &logits[((b + i) * slots + j) * v..((b + i) * slots + j + 1) * v]);
                    let l = slot_logits(c, u, cfg, vocab, j % n == 0);
                    out[i]
                        .tokens
                        .push(sample_categorical(&l, cfg.temperature, top_k, *rng)?.token as Token);
                }
            }
        }
        Variant::ArLt => {
            let mut states = engine.lt_ar_begin(streams)?;
            let mut prev: Vec<Token> = Vec::new();
            for j in 0..slots {
                let mut refs: Vec<&mut _> = states.iter_mut().collect();
                let logits = to_f64(&engine.lt_ar_step(&mut refs, Some(h), &prev)?);
                let mut picked = Vec::with_capacity(b);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let c = &logits[i * v..(i + 1) * v];
                    let u = guided.then(|| &logits[(b + i) * v..(b + i + 1) * v]);
                    let l = slot_logits(c, u, cfg, vocab, j % n == 0);
                    let tok = sample_categorical(&l, cfg.temperature, top_k, *rng)?.token as Token;
                    out[i].tokens.push(tok);
                    out[i].lt_passes += mult;
                    picked.push(tok);
                }
                // both guidance streams continue from the same sampled token
                prev = if guided {
                    [picked.clone(), picked].concat()
                } else {
                    picked
                };
            }
        }
        Variant::MaskgitLt => {
            let plan = build_unmask_plan(slots, cfg.maskgit_steps, cfg.unmask_schedule)?;
            let mut partial = vec![vec![vocab.mask(); slots]; b];
            for (it, &count) in plan.counts.iter().enumerate() {
                let rows: Vec<&[Token]> = partial
                    .iter()
                    .chain(if guided { partial.iter() } else { [].iter() })
                    .map(Vec::as_slice)
                    .collect();
                let logits = to_f64(&engine.lt_maskgit_logits(h, &rows)?);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let mut drawn = Vec::new();
                    for j in 0..slots {
                        if partial[i][j] != vocab.mask() {
                            continue;
                        }
                        let c = &logits[(i * slots + j) * v..(i * slots + j + 1) * v];
                        let u = guided.then(|| {
                            &logits[((b + i) * slots + j) * v..((b + i) * slots + j + 1) * v]
                        });
                        // stopping is decided from the fully masked row only
                        let l = slot_logits(c, u, cfg, vocab, it == 0 && j % n == 0);
                        drawn.push((j, sample_categorical(&l, cfg.temperature, top_k, *rng)?));
                    }
                    let eos = |d: &(usize, Sampled)| {
                        d.0.is_multiple_of(n) && d.1.token == vocab.eos() as usize
                    };
                    drawn.sort_by(|a, b| {
                        eos(b)
                            .cmp(&eos(a))
                            .then(b.1.purity.total_cmp(&a.1.purity))
                            .then(a.0.cmp(&b.0))
                    });
                    for &(j, s) in drawn.iter().take(count) {
                        partial[i][j] = s.token as Token;
                    }
                    out[i].history.push(partial[i].clone());
                    out[i].lt_passes += mult;
                }
            }
            for (o, row) in out.iter_mut().zip(partial) {
                o.tokens = row;
            }
        }
    }
    Ok(out)
}

fn require_variant<F: Real>(engine: &Engine<F>, v: Variant) -> Result<()> {
    if engine.variant() != v {
        return Err(Error::Variant {
            expected: v.to_string(),
            actual: engine.variant().to_string(),
        });
    }
    Ok(())
}

fn decode_one<F: Real>(
    engine: &Engine<F>,
    h: &[F],
    h_uncond: Option<&[F]>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<StackDecode> {
    cfg.validate()?;
    let h_all: Vec<F> = match (cfg.cfg_enabled(), h_uncond) {
        (true, Some(u)) => [h, u].concat(),
        (true, None) => {
            return Err(Error::Config(
                "guidance needs the unconditional hidden state".into(),
            ))
        }
        (false, _) => h.to_vec(),
    };
    let mut out = decode_rows(engine, &h_all, cfg, &mut [rng])?;
    Ok(out.pop().expect("one sequence"))
}

/// Samples one stacked row slot by slot through the AR LT.
pub fn decode_stack_ar<F: Real>(
    engine: &Engine<F>,
    h: &[F],
    h_uncond: Option<&[F]>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<StackDecode> {
    require_variant(engine, Variant::ArLt)?;
    decode_one(engine, h, h_uncond, cfg, rng)
}

/// Samples one stacked row by iterative unmasking. Each iteration keeps
/// first-codebook EOS draws first, then the highest-purity draws.
pub fn decode_stack_maskgit<F: Real>(
    engine: &Engine<F>,
    h: &[F],
    h_uncond: Option<&[F]>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<StackDecode> {
    require_variant(engine, Variant::MaskgitLt)?;
    decode_one(engine, h, h_uncond, cfg, rng)
}

/// Samples every slot of one stacked row independently.
pub fn decode_stack_parallel<F: Real>(
    engine: &Engine<F>,
    h: &[F],
    h_uncond: Option<&[F]>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<StackDecode> {
    require_variant(engine, Variant::Parallel)?;
    decode_one(engine, h, h_uncond, cfg, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated frames, EOS frame and everything after it removed.
    pub grid: CodeGrid,
    /// Stopped by `max_frames` rather than EOS.
    pub truncated: bool,
    pub primary_steps: usize,
    pub lt_passes: usize,
}

/// Generates one sequence with the random stream of sequence index 0.
pub fn generate<F: Real>(
    engine: &Engine<F>,
    condition: &[Token],
    cfg: &SamplingConfig,
) -> Result<Generation> {
    let mut out = generate_batch(engine, &[condition.to_vec()], cfg, 0)?;
    Ok(out.pop().expect("one sequence"))
}

/// Generates several sequences in lockstep. Sequence `i` draws from the
/// random stream `first_index + i` of `cfg.seed`, so its output does not
/// depend on the rest of the batch.
pub fn generate_batch<F: Real>(
    engine: &Engine<F>,
    conditions: &[Vec<Token>],
    cfg: &SamplingConfig,
    first_index: u64,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    if cfg.max_frames > engine.config.max_positions {
        return Err(Error::Config(format!(
            "max_frames {} exceeds the model's {} positions",
            cfg.max_frames, engine.config.max_positions
        )));
    }
    let guided = cfg.cfg_enabled();
    let count = conditions.len();
    let vocab = engine.vocab();
    let (slots, n) = (engine.slots(), engine.config.codebooks);

    let mut cond_states = conditions
        .iter()
        .map(|c| engine.condition_state(c))
        .collect::<Result<Vec<_>>>()?;
    let mut null_states: Vec<PrimaryState<F>> = if guided {
        (0..count).map(|_| engine.null_state()).collect()
    } else {
        Vec::new()
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..count)
        .map(|i| episode_rng(cfg.seed, first_index + i as u64))
        .collect();
    let mut rows: Vec<Vec<Token>> = vec![Vec::new(); count];
    let mut last: Vec<Vec<Token>> = vec![vec![vocab.bos(); slots]; count];
    let mut steps = vec![0usize; count];
    let mut passes = vec![0usize; count];
    let mut ended = vec![false; count];
    let mut active: Vec<bool> = vec![true; count];

    while active.iter().any(|&a| a) {
        let idx: Vec<usize> = (0..count).filter(|&i| active[i]).collect();
        let mut refs: Vec<&mut PrimaryState<F>> = cond_states
            .iter_mut()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(s, _)| s)
            .collect();
        refs.extend(
            null_states
                .iter_mut()
                .zip(&active)
                .filter(|(_, &a)| a)
                .map(|(s, _)| s),
        );
        let inputs: Vec<&[Token]> = idx
            .iter()
            .chain(if guided { idx.iter() } else { [].iter() })
            .map(|&i| last[i].as_slice())
            .collect();
        let h = engine.primary_step(&mut refs, &inputs)?;
        let mut rng_refs: Vec<&mut ChaCha8Rng> = rngs
            .iter_mut()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(r, _)| r)
            .collect();
        let decoded = decode_rows(engine, &h, cfg, &mut rng_refs)?;
        for (&i, d) in idx.iter().zip(decoded) {
            steps[i] += 1;
            passes[i] += d.lt_passes;
            let eos = (0..slots).step_by(n).any(|j| d.tokens[j] == vocab.eos());
            rows[i].extend_from_slice(&d.tokens);
            last[i] = d.tokens;
            if eos {
                ended[i] = true;
                active[i] = false;
            } else if steps[i] >= cfg.max_frames {
                active[i] = false;
            }
        }
    }

    (0..count)
        .map(|i| {
            let frames: Vec<&[Token]> = rows[i].chunks(n).collect();
            let keep = frames
                .iter()
                .position(|f| f[0] == vocab.eos())
                .unwrap_or(frames.len());
            let tokens = rows[i][..keep * n].to_vec();
            Ok(Generation {
                grid: CodeGrid::new(keep, n, vocab.k, tokens)?,
                truncated: !ended[i],
                primary_steps: steps[i],
                lt_passes: passes[i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
