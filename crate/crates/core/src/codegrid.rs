//! The `(T, N)` code grid, frame stacking, and the embedding tables shared
//! by the primary decoder and the local transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

pub type Token = u32;

/// Per-codebook vocabulary: `K` data ids followed by four reserved ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub k: usize,
}

impl Vocab {
    pub fn new(k: usize) -> Self {
        Self { k }
    }
    pub fn bos(&self) -> Token {
        self.k as Token
    }
    pub fn eos(&self) -> Token {
        self.k as Token + 1
    }
    pub fn pad(&self) -> Token {
        self.k as Token + 2
    }
    pub fn mask(&self) -> Token {
        self.k as Token + 3
    }
    /// Rows in every embedding table and width of every logit vector.
    pub fn size(&self) -> usize {
        self.k + 4
    }
    pub fn is_data(&self, t: Token) -> bool {
        (t as usize) < self.k
    }
}

/// A `T × N` matrix of token ids, row-major by frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    frames: usize,
    codebooks: usize,
    vocab: Vocab,
    tokens: Vec<Token>,
}

impl CodeGrid {
    pub fn new(frames: usize, codebooks: usize, k: usize, tokens: Vec<Token>) -> Result<Self> {
        if codebooks == 0 {
            return Err(Error::MalformedGrid("N must be at least 1".into()));
        }
        if tokens.len() != frames * codebooks {
            return Err(Error::MalformedGrid(format!(
                "{} tokens for a {frames}x{codebooks} grid",
                tokens.len()
            )));
        }
        let vocab = Vocab::new(k);
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of {k}+4"
            )));
        }
        Ok(Self {
            frames,
            codebooks,
            vocab,
            tokens,
        })
    }

    pub fn from_frames(k: usize, codebooks: usize, frames: &[Vec<Token>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(frames.len() * codebooks);
        for f in frames {
            if f.len() != codebooks {
                return Err(Error::MalformedGrid(format!(
                    "frame of width {} in a grid with N={codebooks}",
                    f.len()
                )));
            }
            tokens.extend_from_slice(f);
        }
        Self::new(frames.len(), codebooks, k, tokens)
    }

    pub fn empty(codebooks: usize, k: usize) -> Self {
        Self {
            frames: 0,
            codebooks,
            vocab: Vocab::new(k),
            tokens: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn codebooks(&self) -> usize {
        self.codebooks
    }
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
    pub fn frame(&self, t: usize) -> &[Token] {
        &self.tokens[t * self.codebooks..(t + 1) * self.codebooks]
    }
    pub fn get(&self, t: usize, n: usize) -> Token {
        self.tokens[t * self.codebooks + n]
    }
    pub fn iter_frames(&self) -> impl Iterator<Item = &[Token]> {
        self.tokens.chunks(self.codebooks)
    }

    /// Keeps only the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> CodeGrid {
        let frames = frames.min(self.frames);
        CodeGrid {
            frames,
            codebooks: self.codebooks,
            vocab: self.vocab,
            tokens: self.tokens[..frames * self.codebooks].to_vec(),
        }
    }

    /// Same grid followed by one end-of-sequence frame `[EOS, PAD, ...]`.
    pub fn with_eos_frame(&self) -> CodeGrid {
        let mut tokens = self.tokens.clone();
        tokens.push(self.vocab.eos());
        tokens.extend(std::iter::repeat_n(self.vocab.pad(), self.codebooks - 1));
        CodeGrid {
            frames: self.frames + 1,
            codebooks: self.codebooks,
            vocab: self.vocab,
            tokens,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(GridJson::from(self)).expect("grid json")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let g: GridJson = serde_json::from_value(v.clone())?;
        g.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    tokens: Vec<Vec<Token>>,
}

impl From<&CodeGrid> for GridJson {
    fn from(g: &CodeGrid) -> Self {
        GridJson {
            t: g.frames,
            n: g.codebooks,
            k: g.vocab.k,
            tokens: g.iter_frames().map(|f| f.to_vec()).collect(),
        }
    }
}

impl TryFrom<GridJson> for CodeGrid {
    type Error = Error;
    fn try_from(g: GridJson) -> Result<Self> {
        if g.tokens.len() != g.t {
            return Err(Error::MalformedGrid(format!(
                "T={} but {} rows",
                g.t,
                g.tokens.len()
            )));
        }
        CodeGrid::from_frames(g.k, g.n, &g.tokens)
    }
}

impl Serialize for CodeGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CodeGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let g = GridJson::deserialize(d)?;
        g.try_into().map_err(serde::de::Error::custom)
    }
}

/// `ceil(T/S) × (S·N)` view: row `r` holds frames `r·S .. r·S+S-1`,
/// frame-major, trailing missing frames filled with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedGrid {
    stack: usize,
    codebooks: usize,
    vocab: Vocab,
    rows: usize,
    pad_count: usize,
    tokens: Vec<Token>,
}

impl StackedGrid {
    pub fn new(
        stack: usize,
        codebooks: usize,
        k: usize,
        tokens: Vec<Token>,
        pad_count: usize,
    ) -> Result<Self> {
        let width = stack * codebooks;
        if width == 0 || !tokens.len().is_multiple_of(width) {
            return Err(Error::MalformedGrid(format!(
                "{} tokens do not form rows of width {width}",
                tokens.len()
            )));
        }
        if pad_count >= stack.max(1) {
            return Err(Error::MalformedGrid(format!(
                "pad_count {pad_count} must be below S={stack}"
            )));
        }
        Ok(Self {
            stack,
            codebooks,
            vocab: Vocab::new(k),
            rows: tokens.len() / width,
            pad_count,
            tokens,
        })
    }

    pub fn stack_factor(&self) -> usize {
        self.stack
    }
    pub fn codebooks(&self) -> usize {
        self.codebooks
    }
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn width(&self) -> usize {
        self.stack * self.codebooks
    }
    pub fn pad_count(&self) -> usize {
        self.pad_count
    }
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
    pub fn row(&self, r: usize) -> &[Token] {
        let w = self.width();
        &self.tokens[r * w..(r + 1) * w]
    }
}

pub fn stack(grid: &CodeGrid, s: usize) -> Result<StackedGrid> {
    if s == 0 {
        return Err(Error::Config("stack factor must be at least 1".into()));
    }
    let n = grid.codebooks;
    let rows = grid.frames.div_ceil(s);
    let pad_count = rows * s - grid.frames;
    let mut tokens = grid.tokens.clone();
    tokens.extend(std::iter::repeat_n(grid.vocab.pad(), pad_count * n));
    StackedGrid::new(s, n, grid.vocab.k, tokens, pad_count)
}

pub fn unstack(sg: &StackedGrid) -> Result<CodeGrid> {
    let n = sg.codebooks;
    let pad = sg.vocab.pad();
    let frames: Vec<&[Token]> = sg.tokens.chunks(n).collect();
    let is_pad_frame = |f: &[Token]| f.iter().all(|&t| t == pad);
    let keep = frames
        .iter()
        .rposition(|f| !is_pad_frame(f))
        .map_or(0, |i| i + 1);
    for (i, f) in frames[..keep].iter().enumerate() {
        if f.contains(&pad) {
            return Err(Error::MalformedGrid(format!(
                "PAD inside frame {i}, before the last data frame"
            )));
        }
    }
    CodeGrid::new(keep, n, sg.vocab.k, sg.tokens[..keep * n].to_vec())
}

/// One `(K+4) × d` table per `(frame-in-stack, codebook)` slot. The same
/// tables feed the primary decoder's averaged input embedding and the local
/// transformer's token embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingScheme {
    pub stack: usize,
    pub codebooks: usize,
    pub vocab: Vocab,
    pub model_dim: usize,
    tables: Vec<ParamId>,
}

impl EmbeddingScheme {
    pub fn new(
        store: &mut ParamStore,
        stack: usize,
        codebooks: usize,
        vocab: Vocab,
        model_dim: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut tables = Vec::with_capacity(stack * codebooks);
        for s in 0..stack {
            for n in 0..codebooks {
                tables.push(store.normal(
                    format!("embed.s{s}.n{n}"),
                    &[vocab.size(), model_dim],
                    init_std,
                    rng,
                ));
            }
        }
        Self {
            stack,
            codebooks,
            vocab,
            model_dim,
            tables,
        }
    }

    pub fn slots(&self) -> usize {
        self.stack * self.codebooks
    }

    /// Table for flat slot `j = s·N + n`.
    pub fn table(&self, slot: usize) -> ParamId {
        self.tables[slot]
    }

    pub fn table_for(&self, s: usize, n: usize) -> ParamId {
        self.tables[s * self.codebooks + n]
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn lookup<'a>(
        &self,
        store: &'a ParamStore,
        slot: usize,
        token: Token,
    ) -> Result<&'a [f64]> {
        let t = store.value(self.table(slot));
        if token as usize >= self.vocab.size() {
            return Err(Error::Index(format!(
                "token {token} for table with {} rows",
                self.vocab.size()
            )));
        }
        Ok(t.row(token as usize))
    }

    /// Mean of the `S·N` slot embeddings of one stacked row: the primary
    /// decoder's input for that step.
    pub fn embed_stacked_frame(&self, store: &ParamStore, row: &[Token]) -> Result<Vec<f64>> {
        if row.len() != self.slots() {
            return Err(Error::Shape(format!(
                "row of {} ids for {} slots",
                row.len(),
                self.slots()
            )));
        }
        let mut out = vec![0.0; self.model_dim];
        for (slot, &tok) in row.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.lookup(store, slot, tok)?) {
                *o += v;
            }
        }
        let scale = 1.0 / self.slots() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(out)
    }
}
