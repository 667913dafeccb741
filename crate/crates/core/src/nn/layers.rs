//! Transformer building blocks expressed on the [`Tape`].
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, optional `x + Cross(LN(x), mem)`,
//! then `x + MLP(LN(x))` with a GELU MLP of expansion 4.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use super::tape::{AttnSpec, Tape, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[din, dout], INIT_STD, rng),
            b: Some(store.constant(format!("{name}.b"), &[dout], 0.0)),
        }
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[din, dout], INIT_STD, rng),
            b: None,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let b = self.b.map(|b| t.param(b));
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.g"), &[dim], 1.0),
            beta: store.constant(format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            // a key bias shifts every score of a query equally: no effect
            wk: Linear::without_bias(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
        })
    }

    /// `query` attends to `memory` (pass the same var for self-attention).
    /// `groups` packs independent sequences along the row axis.
    pub fn forward(
        &self,
        t: &mut Tape,
        query: Var,
        memory: Var,
        groups: usize,
        key_padding_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (_, qd) = t.shape(query);
        let (_, md) = t.shape(memory);
        if qd != self.cfg.model_dim || md != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "attention inputs have width {qd}/{md}, expected {}",
                self.cfg.model_dim
            )));
        }
        let q = self.wq.forward(t, query)?;
        let k = self.wk.forward(t, memory)?;
        let v = self.wv.forward(t, memory)?;
        let spec = AttnSpec {
            heads: self.cfg.num_heads,
            groups,
            causal: self.cfg.causal,
            key_mask: key_padding_mask,
        };
        let a = t.attention(q, k, v, spec)?;
        self.wo.forward(t, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), dim, dim * MLP_EXPANSION, rng),
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                dim * MLP_EXPANSION,
                dim,
                rng,
            ),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc.forward(t, x)?;
        let h = t.gelu(h);
        self.proj.forward(t, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub ln: LayerNorm,
    pub attn: MultiHeadAttention,
}

#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<CrossAttention>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?;
        let cross = if with_cross {
            let cross_cfg = AttentionConfig {
                causal: false,
                ..cfg
            };
            Some(CrossAttention {
                ln: LayerNorm::new(store, &format!("{name}.lnx"), d),
                attn: MultiHeadAttention::new(store, &format!("{name}.cross"), cross_cfg, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            ln1,
            attn,
            cross,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, rng),
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var, groups: usize, memory: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(t, x)?;
        let a = self.attn.forward(t, h, h, groups, None)?;
        let mut x = t.add(x, a)?;
        if let Some(cross) = &self.cross {
            let mem = memory.ok_or_else(|| Error::Empty("cross-attention needs memory".into()))?;
            let h = cross.ln.forward(t, x)?;
            let a = cross.attn.forward(t, h, mem, 1, None)?;
            x = t.add(x, a)?;
        }
        let h = self.ln2.forward(t, x)?;
        let m = self.mlp.forward(t, h)?;
        t.add(x, m)
    }

    /// Parameters of this block in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gamma, self.ln1.beta];
        ids.extend(attn_ids(&self.attn));
        if let Some(c) = &self.cross {
            ids.extend([c.ln.gamma, c.ln.beta]);
            ids.extend(attn_ids(&c.attn));
        }
        ids.extend([self.ln2.gamma, self.ln2.beta]);
        ids.extend(linear_ids(&self.mlp.fc));
        ids.extend(linear_ids(&self.mlp.proj));
        ids
    }
}

fn linear_ids(l: &Linear) -> Vec<ParamId> {
    std::iter::once(l.w).chain(l.b).collect()
}

fn attn_ids(a: &MultiHeadAttention) -> Vec<ParamId> {
    [&a.wq, &a.wk, &a.wv, &a.wo]
        .into_iter()
        .flat_map(linear_ids)
        .collect()
}
