//! Encoder, primary decoder and the three per-step heads.
//!
//! Training-time forward passes run on the [`Tape`]; inference uses the
//! cached engine in [`infer`].

pub mod infer;
pub mod train;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codegrid::{EmbeddingScheme, Token, Vocab};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::layers::INIT_STD;
use crate::nn::{
    AdamW, AdamWConfig, AttentionConfig, Block, LayerNorm, Linear, ParamId, ParamStore, Tape,
    Tensor, Var,
};

pub use infer::Engine;
pub use train::{train_step, TrainExample, Trainer, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Parallel,
    ArLt,
    MaskgitLt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Parallel, Variant::ArLt, Variant::MaskgitLt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Parallel => "parallel",
            Variant::ArLt => "ar_lt",
            Variant::MaskgitLt => "maskgit_lt",
        }
    }

    pub fn has_lt(self) -> bool {
        self != Variant::Parallel
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" | "none" => Ok(Variant::Parallel),
            "ar_lt" | "ar" => Ok(Variant::ArLt),
            "maskgit_lt" | "maskgit" => Ok(Variant::MaskgitLt),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

fn default_encoder_layers() -> usize {
    2
}
fn default_condition_vocab() -> usize {
    4
}
fn default_max_positions() -> usize {
    1024
}
fn default_max_condition_len() -> usize {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(rename = "S")]
    pub stack: usize,
    #[serde(rename = "N")]
    pub codebooks: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub primary_layers: usize,
    pub lt_layers: usize,
    pub p_uncond: f64,
    pub seed: u64,
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_condition_vocab")]
    pub condition_vocab: usize,
    /// Longest primary-decoder sequence in stacked steps, BOS included.
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_max_condition_len")]
    pub max_condition_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::matched(Variant::ArLt, 1, 4)
    }
}

impl ModelConfig {
    /// Desk-scale defaults with total decoder depth `budget`: all of it in the
    /// primary decoder for the parallel head, one block moved to the LT
    /// otherwise.
    pub fn matched(variant: Variant, stack: usize, budget: usize) -> Self {
        let (primary_layers, lt_layers) = match variant {
            Variant::Parallel => (budget, 0),
            _ => (budget.saturating_sub(1), 1),
        };
        Self {
            variant,
            stack,
            codebooks: 4,
            k: 16,
            model_dim: 64,
            heads: 4,
            primary_layers,
            lt_layers,
            p_uncond: 0.1,
            seed: 0,
            encoder_layers: default_encoder_layers(),
            condition_vocab: default_condition_vocab(),
            max_positions: default_max_positions(),
            max_condition_len: default_max_condition_len(),
        }
    }

    pub fn slots(&self) -> usize {
        self.stack * self.codebooks
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.k)
    }

    pub fn depth(&self) -> usize {
        self.primary_layers + self.lt_layers
    }

    /// LT sequence length: `h` followed by `S·N − 1` teacher tokens (AR) or
    /// `S·N` partially masked slots (MaskGIT).
    pub fn lt_positions(&self) -> usize {
        match self.variant {
            Variant::MaskgitLt => self.slots() + 1,
            _ => self.slots(),
        }
    }

    pub fn attention(&self, causal: bool) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.heads,
            causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stack == 0 || self.codebooks == 0 || self.k == 0 {
            return cfg("S, N and K must be positive".into());
        }
        if self.condition_vocab == 0 {
            return cfg("condition vocabulary must be non-empty".into());
        }
        self.attention(true).validate()?;
        if self.primary_layers == 0 {
            return cfg("primary decoder needs at least one block".into());
        }
        match (self.variant, self.lt_layers) {
            (Variant::Parallel, l) if l > 0 => {
                return cfg("the parallel head has no local transformer; set lt_layers to 0".into())
            }
            (v, 0) if v.has_lt() => return cfg(format!("{v} needs lt_layers >= 1")),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return cfg(format!("p_uncond {} outside [0, 1]", self.p_uncond));
        }
        if self.max_positions < 2 || self.max_condition_len == 0 {
            return cfg("position tables are too short".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct PrimaryDecoder {
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct LocalTransformer {
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// All parameters plus the layout that names them.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub scheme: EmbeddingScheme,
    pub encoder: Encoder,
    pub primary: PrimaryDecoder,
    /// `1 × d` memory standing in for the encoder output when unconditioned.
    pub null_memory: ParamId,
    pub lt: Option<LocalTransformer>,
    /// One projection per slot `j = s·N + n`.
    pub heads: Vec<Linear>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let vocab = config.vocab();

        let scheme = EmbeddingScheme::new(
            &mut store,
            config.stack,
            config.codebooks,
            vocab,
            d,
            INIT_STD,
            rng,
        );
        let encoder = Encoder {
            embed: store.normal("encoder.embed", &[config.condition_vocab, d], INIT_STD, rng),
            pos: store.normal("encoder.pos", &[config.max_condition_len, d], INIT_STD, rng),
            blocks: (0..config.encoder_layers)
                .map(|i| {
                    Block::new(
                        &mut store,
                        &format!("encoder.block{i}"),
                        config.attention(false),
                        false,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
        };
        let primary = PrimaryDecoder {
            pos: store.normal("primary.pos", &[config.max_positions, d], INIT_STD, rng),
            blocks: (0..config.primary_layers)
                .map(|i| {
                    Block::new(
                        &mut store,
                        &format!("primary.block{i}"),
                        config.attention(true),
                        true,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(&mut store, "primary.ln_f", d),
        };
        let null_memory = store.normal("null_memory", &[1, d], INIT_STD, rng);
        let lt = if config.variant.has_lt() {
            let causal = config.variant == Variant::ArLt;
            Some(LocalTransformer {
                pos: store.normal("lt.pos", &[config.lt_positions(), d], INIT_STD, rng),
                blocks: (0..config.lt_layers)
                    .map(|i| {
                        Block::new(
                            &mut store,
                            &format!("lt.block{i}"),
                            config.attention(causal),
                            false,
                            rng,
                        )
                    })
                    .collect::<Result<_>>()?,
                ln_f: LayerNorm::new(&mut store, "lt.ln_f", d),
            })
        } else {
            None
        };
        let heads = (0..config.slots())
            .map(|j| Linear::new(&mut store, &format!("head.slot{j}"), d, vocab.size(), rng))
            .collect();
        Ok(Self {
            config,
            params: store,
            scheme,
            encoder,
            primary,
            null_memory,
            lt,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    fn require(&self, expected: Variant) -> Result<&LocalTransformer> {
        if self.config.variant != expected {
            return Err(Error::Variant {
                expected: expected.to_string(),
                actual: self.config.variant.to_string(),
            });
        }
        Ok(self
            .lt
            .as_ref()
            .expect("LT variants own a local transformer"))
    }

    pub fn check_condition(&self, condition: &[Token]) -> Result<()> {
        if condition.is_empty() {
            return Err(Error::Empty("condition".into()));
        }
        if condition.len() > self.config.max_condition_len {
            return Err(Error::Config(format!(
                "condition of length {} exceeds {}",
                condition.len(),
                self.config.max_condition_len
            )));
        }
        if let Some(&c) = condition
            .iter()
            .find(|&&c| c as usize >= self.config.condition_vocab)
        {
            return Err(Error::Config(format!(
                "condition symbol {c} outside alphabet of size {}",
                self.config.condition_vocab
            )));
        }
        Ok(())
    }

    /// Encoder memory, one row per condition token.
    pub fn encode(&self, t: &mut Tape, condition: &[Token]) -> Result<Var> {
        self.check_condition(condition)?;
        let ids: Vec<usize> = condition.iter().map(|&c| c as usize).collect();
        let table = t.param(self.encoder.embed);
        let x = t.gather(table, &ids)?;
        let pos_table = t.param(self.encoder.pos);
        let p = t.gather(pos_table, &(0..ids.len()).collect::<Vec<_>>())?;
        let mut x = t.add(x, p)?;
        for b in &self.encoder.blocks {
            x = b.forward(t, x, 1, None)?;
        }
        Ok(x)
    }

    pub fn null_memory(&self, t: &mut Tape) -> Var {
        t.param(self.null_memory)
    }

    /// Hidden states for every input row. Row 0 must be the all-BOS row and
    /// `h_r` predicts the stacked row that follows input row `r`.
    pub fn primary_forward(&self, t: &mut Tape, inputs: &[&[Token]], memory: Var) -> Result<Var> {
        let slots = self.config.slots();
        let bos = self.vocab().bos();
        match inputs.first() {
            Some(r) if r.len() == slots && r.iter().all(|&x| x == bos) => {}
            _ => {
                return Err(Error::Config(
                    "primary decoder input must start with a BOS row".into(),
                ))
            }
        }
        if inputs.len() > self.config.max_positions {
            return Err(Error::Config(format!(
                "{} stacked steps exceed max_positions {}",
                inputs.len(),
                self.config.max_positions
            )));
        }
        let mut picks = Vec::with_capacity(inputs.len());
        for row in inputs {
            if row.len() != slots {
                return Err(Error::Shape(format!(
                    "stacked row of {} ids for {slots} slots",
                    row.len()
                )));
            }
            picks.push(
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| (j, x as usize))
                    .collect(),
            );
        }
        let tables: Vec<Var> = self.scheme.tables().iter().map(|&id| t.param(id)).collect();
        let x = t.embed_mean(&tables, picks, 1.0 / slots as f64)?;
        let pos_table = t.param(self.primary.pos);
        let p = t.gather(pos_table, &(0..inputs.len()).collect::<Vec<_>>())?;
        let mut x = t.add(x, p)?;
        for b in &self.primary.blocks {
            x = b.forward(t, x, 1, Some(memory))?;
        }
        self.primary.ln_f.forward(t, x)
    }

    /// Per-slot logits `[rows × (K+4)]` straight from the hidden states.
    pub fn head_logits_parallel(&self, t: &mut Tape, h: Var) -> Result<Vec<Var>> {
        if self.config.variant != Variant::Parallel {
            return Err(Error::Variant {
                expected: Variant::Parallel.to_string(),
                actual: self.config.variant.to_string(),
            });
        }
        self.heads.iter().map(|head| head.forward(t, h)).collect()
    }

    /// Teacher-forced AR LT: sequence `[h, e(t_0), …, e(t_{SN−2})]` per row of
    /// `h`, causal; position `j` gives the logits of slot `j`.
    pub fn lt_ar_forward(&self, t: &mut Tape, h: Var, teacher: &[&[Token]]) -> Result<Vec<Var>> {
        let lt = self.require(Variant::ArLt)?;
        let slots = self.config.slots();
        let rows = self.check_lt_rows(t, h, teacher)?;
        let tables: Vec<Var> = self.scheme.tables().iter().map(|&id| t.param(id)).collect();
        let inputs = if slots > 1 {
            let picks = teacher
                .iter()
                .flat_map(|row| (0..slots - 1).map(move |j| vec![(j, row[j] as usize)]))
                .collect();
            let emb = t.embed_mean(&tables, picks, 1.0)?;
            let map = (0..rows)
                .flat_map(|r| {
                    std::iter::once((0, r))
                        .chain((0..slots - 1).map(move |j| (1, r * (slots - 1) + j)))
                })
                .collect();
            t.assemble(&[h, emb], map)?
        } else {
            h
        };
        self.lt_body(t, lt, inputs, rows, slots, 0)
    }

    /// MaskGIT LT: sequence `[h, x_0, …, x_{SN−1}]` with `x_j` the embedding of
    /// the slot's token or of MASK, non-causal; position `j+1` gives slot `j`.
    pub fn lt_maskgit_forward(
        &self,
        t: &mut Tape,
        h: Var,
        partial: &[&[Token]],
    ) -> Result<Vec<Var>> {
        let lt = self.require(Variant::MaskgitLt)?;
        let slots = self.config.slots();
        let rows = self.check_lt_rows(t, h, partial)?;
        let tables: Vec<Var> = self.scheme.tables().iter().map(|&id| t.param(id)).collect();
        let picks = partial
            .iter()
            .flat_map(|row| row.iter().enumerate().map(|(j, &x)| vec![(j, x as usize)]))
            .collect();
        let emb = t.embed_mean(&tables, picks, 1.0)?;
        let map = (0..rows)
            .flat_map(|r| {
                std::iter::once((0, r)).chain((0..slots).map(move |j| (1, r * slots + j)))
            })
            .collect();
        let inputs = t.assemble(&[h, emb], map)?;
        self.lt_body(t, lt, inputs, rows, slots + 1, 1)
    }

    fn check_lt_rows(&self, t: &Tape, h: Var, tokens: &[&[Token]]) -> Result<usize> {
        let (rows, d) = t.shape(h);
        if d != self.config.model_dim || rows != tokens.len() {
            return Err(Error::Shape(format!(
                "{rows}x{d} hidden states for {} token rows",
                tokens.len()
            )));
        }
        let slots = self.config.slots();
        if let Some(r) = tokens.iter().find(|r| r.len() != slots) {
            return Err(Error::Shape(format!(
                "token row of {} ids for {slots} slots",
                r.len()
            )));
        }
        Ok(rows)
    }

    fn lt_body(
        &self,
        t: &mut Tape,
        lt: &LocalTransformer,
        inputs: Var,
        rows: usize,
        len: usize,
        first_out: usize,
    ) -> Result<Vec<Var>> {
        let pos_table = t.param(lt.pos);
        let ids: Vec<usize> = (0..rows).flat_map(|_| 0..len).collect();
        let p = t.gather(pos_table, &ids)?;
        let mut x = t.add(inputs, p)?;
        for b in &lt.blocks {
            x = b.forward(t, x, rows, None)?;
        }
        let y = lt.ln_f.forward(t, x)?;
        (0..self.config.slots())
            .map(|j| {
                let at = t.assemble(
                    &[y],
                    (0..rows).map(|r| (0, r * len + first_out + j)).collect(),
                )?;
                self.heads[j].forward(t, at)
            })
            .collect()
    }

    /// Writes parameters and, when given, optimizer moments and step.
    pub fn save<W: Write>(
        &self,
        w: W,
        optimizer: Option<&AdamW>,
        extra: serde_json::Value,
    ) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect();
        let mut meta = serde_json::json!({ "model": self.config, "extra": extra });
        if let Some(opt) = optimizer {
            let (m, v) = opt.moments();
            for (p, t) in self.params.iter().zip(m) {
                tensors.push((format!("adam.m/{}", p.name), t));
            }
            for (p, t) in self.params.iter().zip(v) {
                tensors.push((format!("adam.v/{}", p.name), t));
            }
            meta["optimizer"] = serde_json::to_value(opt.config)?;
            meta["step"] = opt.step.into();
        }
        write_checkpoint(w, meta, &tensors)
    }

    pub fn load<R: Read>(r: R) -> Result<LoadedCheckpoint> {
        let (manifest, tensors) = read_checkpoint(r)?;
        let config: ModelConfig = serde_json::from_value(
            manifest
                .meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest lacks a model config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut bundle = ModelBundle::new(config)?;
        let mut saved = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m/") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.push((rest.to_string(), t));
            } else {
                saved.register(name, t);
            }
        }
        bundle.params.load_values_from(&saved)?;
        let optimizer = match manifest.meta.get("optimizer") {
            Some(cfg) if !m.is_empty() => {
                let cfg: AdamWConfig = serde_json::from_value(cfg.clone())?;
                let step = manifest
                    .meta
                    .get("step")
                    .and_then(|s| s.as_u64())
                    .unwrap_or(0);
                let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                    let mut by_name: std::collections::HashMap<_, _> = list.into_iter().collect();
                    bundle
                        .params
                        .iter()
                        .map(|p| {
                            by_name.remove(&p.name).ok_or_else(|| {
                                Error::Checkpoint(format!("missing moment for {}", p.name))
                            })
                        })
                        .collect()
                };
                let mut opt = AdamW::new(cfg, &bundle.params);
                opt.restore(step, order(m)?, order(v)?)?;
                Some(opt)
            }
            _ => None,
        };
        let extra = manifest
            .meta
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok(LoadedCheckpoint {
            bundle,
            optimizer,
            extra,
        })
    }
}

pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub optimizer: Option<AdamW>,
    pub extra: serde_json::Value,
}

#[cfg(test)]
mod tests;
