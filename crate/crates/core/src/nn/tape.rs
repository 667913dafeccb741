//! Reverse-mode differentiation over a linear tape of matrix-valued nodes.
//!
//! Every node is a `rows × cols` matrix. Ops are coarse (fused linear,
//! layer norm, multi-head attention, softmax cross-entropy) so a transformer
//! forward pass is a few hundred nodes.

use std::collections::HashMap;

use super::param::{ParamGrads, ParamId, ParamStore};
use super::tensor::gemm;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How queries attend to keys in [`Tape::attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    /// Number of independent sequences packed along the row axis. Queries and
    /// keys are split evenly between groups and never attend across them.
    pub groups: usize,
    pub causal: bool,
    /// Per key row: `true` excludes that key.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    pub fn new(heads: usize, causal: bool) -> Self {
        Self {
            heads,
            groups: 1,
            causal,
            key_mask: None,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

enum Op {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    EmbedMean {
        tables: Vec<Var>,
        picks: Vec<Vec<(usize, usize)>>,
        scale: f64,
    },
    Assemble {
        sources: Vec<Var>,
        map: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Option<Vec<f64>>,
    param: Option<ParamId>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match (&n.value, n.param) {
            (Some(data), _) => data,
            (None, Some(pid)) => self.params.value(pid).data(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Some(value),
            param: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "constant {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let (rows, cols) = self.params.value(id).rows_cols();
        self.nodes.push(Node {
            rows,
            cols,
            value: None,
            param: Some(id),
            requires_grad: true,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w + b` with `w` stored `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (wk, m) = self.shape(w);
        if k != wk {
            return Err(Error::Shape(format!(
                "linear: x has {k} cols, w has {wk} rows"
            )));
        }
        if let Some(b) = b {
            let (br, bc) = self.shape(b);
            if br * bc != m {
                return Err(Error::Shape(format!("linear: bias len {} != {m}", br * bc)));
            }
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(n, m, out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, c, out, Op::Scale(a, factor), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr * gc != d || br * bc != d {
            return Err(Error::Shape(
                "layer_norm: affine params must match width".into(),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            n,
            d,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let (r, c) = self.shape(x);
        let rg = self.rg(x);
        self.push(r, c, out, Op::Gelu(x), rg)
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        let (vr, vd) = self.shape(v);
        if kd != d || vd != d || kr != vr {
            return Err(Error::Shape(format!(
                "attention: q {qr}x{d}, k {kr}x{kd}, v {vr}x{vd}"
            )));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {d} not divisible by {} heads",
                spec.heads
            )));
        }
        let groups = spec.groups.max(1);
        if qr % groups != 0 || kr % groups != 0 {
            return Err(Error::Shape(format!(
                "attention: {qr} query rows / {kr} key rows not divisible into {groups} groups"
            )));
        }
        let lq = qr / groups;
        let lk = kr / groups;
        if spec.causal && lq != lk {
            return Err(Error::Shape(format!(
                "causal attention needs equal lengths, got {lq} and {lk}"
            )));
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != kr {
                return Err(Error::Shape(format!(
                    "key mask has {} entries for {kr} keys",
                    mask.len()
                )));
            }
        }
        let (out, probs) = attention_forward_raw(
            self.value(q),
            self.value(k),
            self.value(v),
            d,
            groups,
            lq,
            lk,
            &spec,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            qr,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tr) {
            return Err(Error::Index(format!("row {bad} of {tr}-row table")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Output row `r` is `scale · Σ tables[t][id]` over `picks[r]`.
    pub fn embed_mean(
        &mut self,
        tables: &[Var],
        picks: Vec<Vec<(usize, usize)>>,
        scale: f64,
    ) -> Result<Var> {
        let d = tables
            .first()
            .map(|&t| self.shape(t).1)
            .ok_or_else(|| Error::Empty("embed_mean needs tables".into()))?;
        for &t in tables {
            if self.shape(t).1 != d {
                return Err(Error::Shape("embed_mean: tables differ in width".into()));
            }
        }
        let mut out = vec![0.0; picks.len() * d];
        for (r, row_picks) in picks.iter().enumerate() {
            for &(ti, id) in row_picks {
                let t = *tables
                    .get(ti)
                    .ok_or_else(|| Error::Index(format!("table {ti}")))?;
                let rows = self.shape(t).0;
                if id >= rows {
                    return Err(Error::Index(format!(
                        "token {id} for table with {rows} rows"
                    )));
                }
                let src = &self.value(t)[id * d..(id + 1) * d];
                for (o, s) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *o += s;
                }
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o *= scale;
            }
        }
        let rg = tables.iter().any(|&t| self.rg(t));
        Ok(self.push(
            picks.len(),
            d,
            out,
            Op::EmbedMean {
                tables: tables.to_vec(),
                picks,
                scale,
            },
            rg,
        ))
    }

    /// Output row `r` is row `map[r].1` of `sources[map[r].0]`.
    pub fn assemble(&mut self, sources: &[Var], map: Vec<(usize, usize)>) -> Result<Var> {
        let d = sources
            .first()
            .map(|&s| self.shape(s).1)
            .ok_or_else(|| Error::Empty("assemble needs sources".into()))?;
        let mut out = Vec::with_capacity(map.len() * d);
        for &(si, row) in &map {
            let s = *sources
                .get(si)
                .ok_or_else(|| Error::Index(format!("source {si}")))?;
            let (sr, sd) = self.shape(s);
            if sd != d {
                return Err(Error::Shape("assemble: sources differ in width".into()));
            }
            if row >= sr {
                return Err(Error::Index(format!("row {row} of {sr}")));
            }
            out.extend_from_slice(&self.value(s)[row * d..(row + 1) * d]);
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            map.len(),
            d,
            out,
            Op::Assemble {
                sources: sources.to_vec(),
                map,
            },
            rg,
        ))
    }

    /// Summed softmax cross-entropy over rows with a target; rows with `None`
    /// contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(Error::Index(format!("target {t} with {k} classes")));
            }
            let row = &lv[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            let lse = softmax_into(row, p);
            loss += lse - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &t in terms {
            if self.shape(t) != (1, 1) {
                return Err(Error::Shape("sum expects scalars".into()));
            }
            total += self.scalar(t);
        }
        let rg = terms.iter().any(|&t| self.rg(t));
        Ok(self.push(1, 1, vec![total], Op::Sum(terms.to_vec()), rg))
    }

    /// Backpropagates from `root` (seeded with ones) and returns gradients
    /// for every parameter that was read.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = ParamGrads {
            grads: vec![None; self.params.len()],
        };
        let root_len = self.nodes[root.0].rows * self.nodes[root.0].cols;
        grads[root.0] = Some(vec![1.0; root_len]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut local: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    let pid = node.param.expect("param node");
                    match &mut out.grads[pid.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (n, k) = self.shape(*x);
                    let m = node.cols;
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * k];
                        gemm(n, m, k, &g, false, self.value(*w), true, &mut dx, false);
                        local.push((*x, dx));
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; k * m];
                        gemm(k, n, m, self.value(*x), true, &g, false, &mut dw, false);
                        local.push((*w, dw));
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = vec![0.0; m];
                            for row in g.chunks(m) {
                                db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                            }
                            local.push((*b, db));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        local.push((*a, g.clone()));
                    }
                    if self.rg(*b) {
                        local.push((*b, g.clone()));
                    }
                }
                Op::Scale(a, f) => {
                    local.push((*a, g.iter().map(|v| v * f).collect()));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = node.cols;
                    let n = node.rows;
                    let gv = self.value(*gamma);
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            dgamma[c] += gr[c] * xh[c];
                            dbeta[c] += gr[c];
                            let dxh = gr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            dx[r * d + c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    local.push((*x, dx));
                    local.push((*gamma, dgamma));
                    local.push((*beta, dbeta));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    local.push((
                        *x,
                        xv.iter()
                            .zip(&g)
                            .map(|(&v, gg)| gg * gelu_grad(v))
                            .collect(),
                    ));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (qr, d) = self.shape(*q);
                    let kr = self.shape(*k).0;
                    let groups = spec.groups.max(1);
                    let (dq, dk, dv) = attention_backward_raw(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        d,
                        groups,
                        qr / groups,
                        kr / groups,
                        spec.heads,
                    );
                    local.push((*q, dq));
                    local.push((*k, dk));
                    local.push((*v, dv));
                }
                Op::Gather { table, ids } => {
                    let (tr, d) = self.shape(*table);
                    let mut dt = vec![0.0; tr * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                    local.push((*table, dt));
                }
                Op::EmbedMean {
                    tables,
                    picks,
                    scale,
                } => {
                    let d = node.cols;
                    let mut dts: Vec<Vec<f64>> = tables
                        .iter()
                        .map(|&t| vec![0.0; self.shape(t).0 * d])
                        .collect();
                    for (r, row_picks) in picks.iter().enumerate() {
                        for &(ti, id) in row_picks {
                            for c in 0..d {
                                dts[ti][id * d + c] += scale * g[r * d + c];
                            }
                        }
                    }
                    for (&t, dt) in tables.iter().zip(dts) {
                        local.push((t, dt));
                    }
                }
                Op::Assemble { sources, map } => {
                    let d = node.cols;
                    let mut ds: Vec<Vec<f64>> = sources
                        .iter()
                        .map(|&s| vec![0.0; self.shape(s).0 * d])
                        .collect();
                    for (r, &(si, row)) in map.iter().enumerate() {
                        for c in 0..d {
                            ds[si][row * d + c] += g[r * d + c];
                        }
                    }
                    for (&s, dsrc) in sources.iter().zip(ds) {
                        local.push((s, dsrc));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let k = self.shape(*logits).1;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..k {
                            dl[r * k + c] = g[0] * probs[r * k + c];
                        }
                        dl[r * k + t] -= g[0];
                    }
                    local.push((*logits, dl));
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        local.push((t, vec![g[0]]));
                    }
                }
            }
            for (var, lg) in local {
                if !self.rg(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&lg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(lg),
                }
            }
        }
        out
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Writes `softmax(row)` into `out` and returns log-sum-exp.
pub fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

#[allow(clippy::too_many_arguments)]
fn attention_forward_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    groups: usize,
    lq: usize,
    lk: usize,
    spec: &AttnSpec,
) -> (Vec<f64>, Vec<f64>) {
    let heads = spec.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; groups * lq * d];
    let mut probs = vec![0.0; groups * heads * lq * lk];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q[(g * lq + i) * d + off..(g * lq + i) * d + off + dh];
                let limit = if spec.causal { i + 1 } else { lk };
                let prow = &mut probs
                    [((g * heads + h) * lq + i) * lk..((g * heads + h) * lq + i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let key_row = g * lk + j;
                    if spec.key_mask.as_ref().is_some_and(|m| m[key_row]) {
                        continue;
                    }
                    let kj = &k[key_row * d + off..key_row * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for j in 0..limit {
                    let key_row = g * lk + j;
                    if spec.key_mask.as_ref().is_some_and(|m| m[key_row]) {
                        prow[j] = 0.0;
                        continue;
                    }
                    prow[j] = (prow[j] - max).exp();
                    sum += prow[j];
                }
                let o = &mut out[(g * lq + i) * d + off..(g * lq + i) * d + off + dh];
                for j in 0..limit {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    prow[j] /= sum;
                    let p = prow[j];
                    let vj = &v[(g * lk + j) * d + off..(g * lk + j) * d + off + dh];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward_raw(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: usize,
    groups: usize,
    lq: usize,
    lk: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; lk];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = (g * lq + i) * d + off;
                let doi = &dout[qrow..qrow + dh];
                let prow =
                    &probs[((g * heads + h) * lq + i) * lk..((g * heads + h) * lq + i + 1) * lk];
                let mut weighted = 0.0;
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let krow = (g * lk + j) * d + off;
                    dp[j] = dot(doi, &v[krow..krow + dh]);
                    weighted += prow[j] * dp[j];
                    for c in 0..dh {
                        dv[krow + c] += prow[j] * doi[c];
                    }
                }
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let krow = (g * lk + j) * d + off;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
