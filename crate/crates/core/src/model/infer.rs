//! Forward-only engine for generation: weights copied into `F`, key/value
//! caches for the primary decoder and the AR LT, and several sequences
//! advanced in lockstep so projections run as one matrix product.

use super::{ModelBundle, ModelConfig, Variant};
use crate::codegrid::{Token, Vocab};
use crate::error::{Error, Result};
use crate::nn::layers::{Block, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::tape::LAYER_NORM_EPS;
use crate::nn::{gemm, ParamId, ParamStore, Real};

#[derive(Debug, Clone)]
struct LinW<F> {
    w: Vec<F>,
    b: Option<Vec<F>>,
    dout: usize,
}

impl<F: Real> LinW<F> {
    fn new(store: &ParamStore, l: &Linear) -> Self {
        let w = store.value(l.w);
        Self {
            w: convert(w.data()),
            b: l.b.map(|b| convert(store.value(b).data())),
            dout: w.shape()[1],
        }
    }

    fn din(&self) -> usize {
        self.w.len() / self.dout
    }

    fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let mut out = vec![F::zero(); rows * self.dout];
        gemm(
            rows,
            self.din(),
            self.dout,
            x,
            false,
            &self.w,
            false,
            &mut out,
            false,
        );
        if let Some(b) = &self.b {
            for row in out.chunks_mut(self.dout) {
                for (o, &bb) in row.iter_mut().zip(b) {
                    *o = *o + bb;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LnW<F> {
    g: Vec<F>,
    b: Vec<F>,
}

impl<F: Real> LnW<F> {
    fn new(store: &ParamStore, ln: &LayerNorm) -> Self {
        Self {
            g: convert(store.value(ln.gamma).data()),
            b: convert(store.value(ln.beta).data()),
        }
    }

    fn forward(&self, x: &[F]) -> Vec<F> {
        let d = self.g.len();
        let inv_d = F::from_f64(1.0 / d as f64);
        let eps = F::from_f64(LAYER_NORM_EPS);
        let mut out = vec![F::zero(); x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            for c in 0..d {
                o[c] = (row[c] - mean) * rs * self.g[c] + self.b[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct AttnW<F> {
    q: LinW<F>,
    k: LinW<F>,
    v: LinW<F>,
    o: LinW<F>,
}

impl<F: Real> AttnW<F> {
    fn new(store: &ParamStore, a: &MultiHeadAttention) -> Self {
        Self {
            q: LinW::new(store, &a.wq),
            k: LinW::new(store, &a.wk),
            v: LinW::new(store, &a.wv),
            o: LinW::new(store, &a.wo),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockW<F> {
    ln1: LnW<F>,
    attn: AttnW<F>,
    cross: Option<(LnW<F>, AttnW<F>)>,
    ln2: LnW<F>,
    fc: LinW<F>,
    proj: LinW<F>,
}

impl<F: Real> BlockW<F> {
    fn new(store: &ParamStore, b: &Block) -> Self {
        Self {
            ln1: LnW::new(store, &b.ln1),
            attn: AttnW::new(store, &b.attn),
            cross: b
                .cross
                .as_ref()
                .map(|c| (LnW::new(store, &c.ln), AttnW::new(store, &c.attn))),
            ln2: LnW::new(store, &b.ln2),
            fc: LinW::new(store, &b.mlp.fc),
            proj: LinW::new(store, &b.mlp.proj),
        }
    }

    fn mlp_residual(&self, x: &mut [F], rows: usize) {
        let h = self.ln2.forward(x);
        let mut m = self.fc.forward(&h, rows);
        m.iter_mut().for_each(|v| *v = gelu(*v));
        let m = self.proj.forward(&m, rows);
        add_into(x, &m);
    }

    /// Full-sequence self-attention over `groups` packed sequences of `len`
    /// rows each. No cross-attention.
    fn forward_seq(&self, x: &mut [F], groups: usize, len: usize, causal: bool, heads: usize) {
        let d = self.ln1.g.len();
        let rows = groups * len;
        let h = self.ln1.forward(x);
        let q = self.attn.q.forward(&h, rows);
        let k = self.attn.k.forward(&h, rows);
        let v = self.attn.v.forward(&h, rows);
        let mut a = vec![F::zero(); rows * d];
        let mut scratch = Vec::new();
        for g in 0..groups {
            let keys = &k[g * len * d..(g + 1) * len * d];
            let vals = &v[g * len * d..(g + 1) * len * d];
            for i in 0..len {
                let r = g * len + i;
                let limit = if causal { i + 1 } else { len };
                attend(
                    &q[r * d..(r + 1) * d],
                    keys,
                    vals,
                    limit,
                    heads,
                    &mut a[r * d..(r + 1) * d],
                    &mut scratch,
                );
            }
        }
        let a = self.attn.o.forward(&a, rows);
        add_into(x, &a);
        self.mlp_residual(x, rows);
    }
}

#[derive(Debug, Clone)]
struct LtW<F> {
    pos: Vec<F>,
    blocks: Vec<BlockW<F>>,
    ln: LnW<F>,
}

/// Per-sequence primary-decoder cache.
#[derive(Debug, Clone)]
pub struct PrimaryState<F> {
    pos: usize,
    self_k: Vec<Vec<F>>,
    self_v: Vec<Vec<F>>,
    cross_k: Vec<Vec<F>>,
    cross_v: Vec<Vec<F>>,
    mem_len: usize,
}

impl<F> PrimaryState<F> {
    /// Stacked steps consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Per-sequence AR LT cache.
#[derive(Debug, Clone)]
pub struct LtState<F> {
    pos: usize,
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F> LtState<F> {
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[derive(Debug, Clone)]
pub struct Engine<F> {
    pub config: ModelConfig,
    d: usize,
    heads: usize,
    tables: Vec<Vec<F>>,
    enc_embed: Vec<F>,
    enc_pos: Vec<F>,
    enc_blocks: Vec<BlockW<F>>,
    prim_pos: Vec<F>,
    prim_blocks: Vec<BlockW<F>>,
    prim_ln: LnW<F>,
    null_memory: Vec<F>,
    lt: Option<LtW<F>>,
    heads_w: Vec<LinW<F>>,
}

impl<F: Real> Engine<F> {
    pub fn new(bundle: &ModelBundle) -> Self {
        let s = &bundle.params;
        let val = |id: ParamId| convert::<F>(s.value(id).data());
        Self {
            config: bundle.config,
            d: bundle.config.model_dim,
            heads: bundle.config.heads,
            tables: bundle.scheme.tables().iter().map(|&id| val(id)).collect(),
            enc_embed: val(bundle.encoder.embed),
            enc_pos: val(bundle.encoder.pos),
            enc_blocks: bundle
                .encoder
                .blocks
                .iter()
                .map(|b| BlockW::new(s, b))
                .collect(),
            prim_pos: val(bundle.primary.pos),
            prim_blocks: bundle
                .primary
                .blocks
                .iter()
                .map(|b| BlockW::new(s, b))
                .collect(),
            prim_ln: LnW::new(s, &bundle.primary.ln_f),
            null_memory: val(bundle.null_memory),
            lt: bundle.lt.as_ref().map(|lt| LtW {
                pos: val(lt.pos),
                blocks: lt.blocks.iter().map(|b| BlockW::new(s, b)).collect(),
                ln: LnW::new(s, &lt.ln_f),
            }),
            heads_w: bundle.heads.iter().map(|h| LinW::new(s, h)).collect(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn slots(&self) -> usize {
        self.config.slots()
    }

    pub fn model_dim(&self) -> usize {
        self.d
    }

    /// Encoder memory (`L × d`, row-major).
    pub fn encode(&self, condition: &[Token]) -> Result<Vec<F>> {
        let cfg = &self.config;
        if condition.is_empty() {
            return Err(Error::Empty("condition".into()));
        }
        if condition.len() > cfg.max_condition_len {
            return Err(Error::Config(format!(
                "condition longer than {}",
                cfg.max_condition_len
            )));
        }
        let d = self.d;
        let mut x = Vec::with_capacity(condition.len() * d);
        for (i, &c) in condition.iter().enumerate() {
            if c as usize >= cfg.condition_vocab {
                return Err(Error::Config(format!(
                    "condition symbol {c} outside alphabet of size {}",
                    cfg.condition_vocab
                )));
            }
            let e = &self.enc_embed[c as usize * d..(c as usize + 1) * d];
            let p = &self.enc_pos[i * d..(i + 1) * d];
            x.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }
        for b in &self.enc_blocks {
            b.forward_seq(&mut x, 1, condition.len(), false, self.heads);
        }
        Ok(x)
    }

    /// Fresh primary cache attending to `memory` (`mem_len × d`).
    pub fn primary_state(&self, memory: &[F]) -> PrimaryState<F> {
        let mem_len = memory.len() / self.d;
        let (cross_k, cross_v) = self
            .prim_blocks
            .iter()
            .map(|b| {
                let (_, a) = b.cross.as_ref().expect("primary blocks cross-attend");
                (a.k.forward(memory, mem_len), a.v.forward(memory, mem_len))
            })
            .unzip();
        let layers = self.prim_blocks.len();
        PrimaryState {
            pos: 0,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            cross_k,
            cross_v,
            mem_len,
        }
    }

    pub fn condition_state(&self, condition: &[Token]) -> Result<PrimaryState<F>> {
        Ok(self.primary_state(&self.encode(condition)?))
    }

    pub fn null_state(&self) -> PrimaryState<F> {
        self.primary_state(&self.null_memory)
    }

    /// Feeds one stacked row per sequence and returns the new hidden states
    /// (`B × d`). The first row of every sequence must be the BOS row.
    pub fn primary_step(
        &self,
        states: &mut [&mut PrimaryState<F>],
        rows: &[&[Token]],
    ) -> Result<Vec<F>> {
        let (d, slots) = (self.d, self.slots());
        let b = states.len();
        if rows.len() != b {
            return Err(Error::Shape(format!(
                "{} rows for {b} sequences",
                rows.len()
            )));
        }
        let vocab = self.vocab();
        let inv = F::from_f64(1.0 / slots as f64);
        let mut x = vec![F::zero(); b * d];
        for (i, (st, row)) in states.iter().zip(rows).enumerate() {
            if row.len() != slots {
                return Err(Error::Shape(format!(
                    "row of {} ids for {slots} slots",
                    row.len()
                )));
            }
            if st.pos == 0 && row.iter().any(|&t| t != vocab.bos()) {
                return Err(Error::Config(
                    "primary decoder input must start with a BOS row".into(),
                ));
            }
            if st.pos >= self.config.max_positions {
                return Err(Error::Config(format!(
                    "sequence exceeds max_positions {}",
                    self.config.max_positions
                )));
            }
            let xi = &mut x[i * d..(i + 1) * d];
            for (j, &tok) in row.iter().enumerate() {
                if tok as usize >= vocab.size() {
                    return Err(Error::Index(format!("token {tok} in slot {j}")));
                }
                let e = &self.tables[j][tok as usize * d..(tok as usize + 1) * d];
                add_into(xi, e);
            }
            let p = &self.prim_pos[st.pos * d..(st.pos + 1) * d];
            for (o, &pp) in xi.iter_mut().zip(p) {
                *o = *o * inv + pp;
            }
        }
        let mut scratch = Vec::new();
        for (l, blk) in self.prim_blocks.iter().enumerate() {
            let h = blk.ln1.forward(&x);
            let q = blk.attn.q.forward(&h, b);
            let k = blk.attn.k.forward(&h, b);
            let v = blk.attn.v.forward(&h, b);
            let mut a = vec![F::zero(); b * d];
            for (i, st) in states.iter_mut().enumerate() {
                st.self_k[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                st.self_v[l].extend_from_slice(&v[i * d..(i + 1) * d]);
                attend(
                    &q[i * d..(i + 1) * d],
                    &st.self_k[l],
                    &st.self_v[l],
                    st.pos + 1,
                    self.heads,
                    &mut a[i * d..(i + 1) * d],
                    &mut scratch,
                );
            }
            let a = blk.attn.o.forward(&a, b);
            add_into(&mut x, &a);

            let (lnx, cross) = blk.cross.as_ref().expect("primary blocks cross-attend");
            let h = lnx.forward(&x);
            let q = cross.q.forward(&h, b);
            let mut a = vec![F::zero(); b * d];
            for (i, st) in states.iter().enumerate() {
                attend(
                    &q[i * d..(i + 1) * d],
                    &st.cross_k[l],
                    &st.cross_v[l],
                    st.mem_len,
                    self.heads,
                    &mut a[i * d..(i + 1) * d],
                    &mut scratch,
                );
            }
            let a = cross.o.forward(&a, b);
            add_into(&mut x, &a);
            blk.mlp_residual(&mut x, b);
        }
        for st in states.iter_mut() {
            st.pos += 1;
        }
        Ok(self.prim_ln.forward(&x))
    }

    /// `B × S·N × (K+4)` logits from hidden states alone.
    pub fn parallel_logits(&self, h: &[F]) -> Result<Vec<F>> {
        self.require(Variant::Parallel)?;
        let b = h.len() / self.d;
        let per_slot: Vec<Vec<F>> = self.heads_w.iter().map(|w| w.forward(h, b)).collect();
        Ok(interleave(&per_slot, b, self.vocab().size()))
    }

    pub fn lt_ar_begin(&self, n: usize) -> Result<Vec<LtState<F>>> {
        let lt = self.lt_weights(Variant::ArLt)?;
        let layers = lt.blocks.len();
        Ok((0..n)
            .map(|_| LtState {
                pos: 0,
                k: vec![Vec::new(); layers],
                v: vec![Vec::new(); layers],
            })
            .collect())
    }

    /// Advances every AR LT sequence by one position. At position 0 the
    /// input is the hidden state (`inputs` = `h` rows); at position `p > 0`
    /// it is the embedding of the token sampled for slot `p − 1`. Returns the
    /// logits of slot `p` (`B × (K+4)`).
    pub fn lt_ar_step(
        &self,
        states: &mut [&mut LtState<F>],
        h: Option<&[F]>,
        prev: &[Token],
    ) -> Result<Vec<F>> {
        let lt = self.lt_weights(Variant::ArLt)?;
        let d = self.d;
        let b = states.len();
        let pos = states.first().map_or(0, |s| s.pos);
        if states.iter().any(|s| s.pos != pos) {
            return Err(Error::Shape("AR LT sequences out of lockstep".into()));
        }
        if pos >= self.slots() {
            return Err(Error::Index(format!(
                "AR LT position {pos} past {} slots",
                self.slots()
            )));
        }
        let mut x = if pos == 0 {
            let h =
                h.ok_or_else(|| Error::Empty("AR LT position 0 needs the hidden state".into()))?;
            if h.len() != b * d {
                return Err(Error::Shape(format!(
                    "{} hidden values for {b} sequences",
                    h.len()
                )));
            }
            h.to_vec()
        } else {
            if prev.len() != b {
                return Err(Error::Shape(format!(
                    "{} tokens for {b} sequences",
                    prev.len()
                )));
            }
            let mut x = Vec::with_capacity(b * d);
            for &tok in prev {
                if tok as usize >= self.vocab().size() {
                    return Err(Error::Index(format!("token {tok}")));
                }
                x.extend_from_slice(
                    &self.tables[pos - 1][tok as usize * d..(tok as usize + 1) * d],
                );
            }
            x
        };
        let p = &lt.pos[pos * d..(pos + 1) * d];
        for row in x.chunks_mut(d) {
            add_into(row, p);
        }
        let mut scratch = Vec::new();
        for (l, blk) in lt.blocks.iter().enumerate() {
            let hn = blk.ln1.forward(&x);
            let q = blk.attn.q.forward(&hn, b);
            let k = blk.attn.k.forward(&hn, b);
            let v = blk.attn.v.forward(&hn, b);
            let mut a = vec![F::zero(); b * d];
            for (i, st) in states.iter_mut().enumerate() {
                st.k[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                st.v[l].extend_from_slice(&v[i * d..(i + 1) * d]);
                attend(
                    &q[i * d..(i + 1) * d],
                    &st.k[l],
                    &st.v[l],
                    pos + 1,
                    self.heads,
                    &mut a[i * d..(i + 1) * d],
                    &mut scratch,
                );
            }
            let a = blk.attn.o.forward(&a, b);
            add_into(&mut x, &a);
            blk.mlp_residual(&mut x, b);
        }
        for st in states.iter_mut() {
            st.pos += 1;
        }
        let y = lt.ln.forward(&x);
        Ok(self.heads_w[pos].forward(&y, b))
    }

    /// `B × S·N × (K+4)` logits for partially masked rows.
    pub fn lt_maskgit_logits(&self, h: &[F], partial: &[&[Token]]) -> Result<Vec<F>> {
        let lt = self.lt_weights(Variant::MaskgitLt)?;
        let (d, slots) = (self.d, self.slots());
        let b = partial.len();
        if h.len() != b * d {
            return Err(Error::Shape(format!(
                "{} hidden values for {b} rows",
                h.len()
            )));
        }
        let len = slots + 1;
        let mut x = Vec::with_capacity(b * len * d);
        for (i, row) in partial.iter().enumerate() {
            if row.len() != slots {
                return Err(Error::Shape(format!(
                    "row of {} ids for {slots} slots",
                    row.len()
                )));
            }
            x.extend_from_slice(&h[i * d..(i + 1) * d]);
            for (j, &tok) in row.iter().enumerate() {
                if tok as usize >= self.vocab().size() {
                    return Err(Error::Index(format!("token {tok} in slot {j}")));
                }
                x.extend_from_slice(&self.tables[j][tok as usize * d..(tok as usize + 1) * d]);
            }
        }
        for (r, row) in x.chunks_mut(d).enumerate() {
            add_into(row, &lt.pos[(r % len) * d..(r % len + 1) * d]);
        }
        for blk in &lt.blocks {
            blk.forward_seq(&mut x, b, len, false, self.heads);
        }
        let y = lt.ln.forward(&x);
        let per_slot: Vec<Vec<F>> = (0..slots)
            .map(|j| {
                let rows: Vec<F> = (0..b)
                    .flat_map(|i| {
                        y[(i * len + j + 1) * d..(i * len + j + 2) * d]
                            .iter()
                            .copied()
                    })
                    .collect();
                self.heads_w[j].forward(&rows, b)
            })
            .collect();
        Ok(interleave(&per_slot, b, self.vocab().size()))
    }

    fn require(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::Variant {
                expected: v.to_string(),
                actual: self.config.variant.to_string(),
            });
        }
        Ok(())
    }

    fn lt_weights(&self, v: Variant) -> Result<&LtW<F>> {
        self.require(v)?;
        Ok(self
            .lt
            .as_ref()
            .expect("LT variants own a local transformer"))
    }
}

fn convert<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::from_f64(x)).collect()
}

fn add_into<F: Real>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

/// `[slot][b × v]` → `[b][slot][v]`.
fn interleave<F: Real>(per_slot: &[Vec<F>], b: usize, v: usize) -> Vec<F> {
    let slots = per_slot.len();
    let mut out = vec![F::zero(); b * slots * v];
    for (j, s) in per_slot.iter().enumerate() {
        for i in 0..b {
            out[(i * slots + j) * v..(i * slots + j + 1) * v]
                .copy_from_slice(&s[i * v..(i + 1) * v]);
        }
    }
    out
}

/// One query row against the first `len` cached key/value rows, all heads.
fn attend<F: Real>(
    q: &[F],
    keys: &[F],
    values: &[F],
    len: usize,
    heads: usize,
    out: &mut [F],
    scores: &mut Vec<F>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    scores.resize(len, F::zero());
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        let mut max = F::neg_infinity();
        for j in 0..len {
            let kj = &keys[j * d + off..j * d + off + dh];
            let s = qh.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y) * scale;
            scores[j] = s;
            max = max.max(s);
        }
        let mut sum = F::zero();
        for s in scores.iter_mut().take(len) {
            *s = (*s - max).exp();
            sum = sum + *s;
        }
        let o = &mut out[off..off + dh];
        o.iter_mut().for_each(|v| *v = F::zero());
        for j in 0..len {
            let p = scores[j] / sum;
            let vj = &values[j * d + off..j * d + off + dh];
            for (oo, &vv) in o.iter_mut().zip(vj) {
                *oo = *oo + p * vv;
            }
        }
    }
}
