//! Synthetic multi-codebook task whose per-frame joint distribution can be
//! enumerated exactly.
//!
//! A latent state `z_t ∈ [K]` follows a Markov chain whose transition matrix
//! is picked by the condition symbol aligned with frame `t`. The frame's
//! codebooks are a noisy arithmetic chain: `cb_1 = z_t` and
//! `cb_j = (cb_{j-1} + δ_j) mod K` with `δ_j ~ d_j`. Marginals of each
//! codebook are close to uniform while the joint is concentrated, which is
//! exactly the structure an independent per-codebook head cannot represent.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codegrid::{CodeGrid, Token};
use crate::error::{Error, Result};

/// Largest joint table we are willing to enumerate.
pub const MAX_JOINT_CELLS: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub condition_vocab: usize,
    /// `[C][K][K]`, row-stochastic.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Distribution of the first latent state.
    pub initial: Vec<f64>,
    /// `d_2 .. d_N`, each a distribution over offsets `[K]`.
    pub noise: Vec<Vec<f64>>,
    pub frames_min: usize,
    pub frames_max: usize,
    pub condition_len_min: usize,
    pub condition_len_max: usize,
    pub seed: u64,
}

impl SynthTaskSpec {
    /// K=16, N=4, C=4, T ∈ [16, 48]. Each condition symbol moves the latent
    /// state by one of three symbol-specific offsets (0.45/0.30/0.15) or
    /// anywhere else (0.10 spread); each coupling noise puts 0.85 on one
    /// offset and spreads 0.15 over the rest.
    pub fn default_with_seed(seed: u64) -> Self {
        let (k, n, c) = (16, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A5C);
        let mut offsets: Vec<usize> = (0..k).collect();
        let transitions = (0..c)
            .map(|_| {
                offsets.shuffle(&mut rng);
                let main = [(offsets[0], 0.45), (offsets[1], 0.30), (offsets[2], 0.15)];
                let mut dist = vec![0.10 / (k - 3) as f64; k];
                for (o, p) in main {
                    dist[o] = p;
                }
                circulant(&dist)
            })
            .collect();
        let noise = (1..n)
            .map(|_| {
                let main = rng.random_range(1..k);
                concentrated(k, main, 0.85)
            })
            .collect();
        Self {
            k,
            n,
            condition_vocab: c,
            transitions,
            initial: vec![1.0 / k as f64; k],
            noise,
            frames_min: 16,
            frames_max: 48,
            condition_len_min: 2,
            condition_len_max: 6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.n == 0 || self.condition_vocab == 0 {
            return cfg("K, N and C must be positive".into());
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return cfg(format!(
                "bad frame range [{}, {}]",
                self.frames_min, self.frames_max
            ));
        }
        if self.condition_len_min == 0 || self.condition_len_min > self.condition_len_max {
            return cfg("bad condition length range".into());
        }
        if self.transitions.len() != self.condition_vocab {
            return cfg(format!(
                "{} transition matrices for C={}",
                self.transitions.len(),
                self.condition_vocab
            ));
        }
        for m in &self.transitions {
            if m.len() != self.k {
                return cfg("transition matrix must be KxK".into());
            }
            for row in m {
                check_distribution(row, self.k, "transition row")?;
            }
        }
        check_distribution(&self.initial, self.k, "initial distribution")?;
        if self.noise.len() + 1 != self.n {
            return cfg(format!(
                "{} noise distributions for N={}",
                self.noise.len(),
                self.n
            ));
        }
        for d in &self.noise {
            check_distribution(d, self.k, "noise distribution")?;
        }
        Ok(())
    }

    /// Condition symbol governing frame `t` of a `frames`-long episode.
    pub fn symbol_for_frame(condition: &[Token], t: usize, frames: usize) -> Token {
        let idx = (t * condition.len() / frames.max(1)).min(condition.len() - 1);
        condition[idx]
    }
}

fn circulant(offset_dist: &[f64]) -> Vec<Vec<f64>> {
    let k = offset_dist.len();
    (0..k)
        .map(|from| {
            let mut row = vec![0.0; k];
            for (o, &p) in offset_dist.iter().enumerate() {
                row[(from + o) % k] += p;
            }
            row
        })
        .collect()
}

fn concentrated(k: usize, main: usize, mass: f64) -> Vec<f64> {
    let mut d = vec![(1.0 - mass) / (k - 1) as f64; k];
    d[main] = mass;
    d
}

fn check_distribution(d: &[f64], k: usize, what: &str) -> Result<()> {
    if d.len() != k {
        return Err(Error::Config(format!(
            "{what} has {} entries, expected {k}",
            d.len()
        )));
    }
    if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Config(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} sums to {s}")));
    }
    Ok(())
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum: take the last
    // index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub condition: Vec<Token>,
    pub grid: CodeGrid,
}

pub fn sample_episode(spec: &SynthTaskSpec, rng: &mut impl Rng) -> Episode {
    let len = rng.random_range(spec.condition_len_min..=spec.condition_len_max);
    let condition: Vec<Token> = (0..len)
        .map(|_| rng.random_range(0..spec.condition_vocab) as Token)
        .collect();
    let frames = rng.random_range(spec.frames_min..=spec.frames_max);
    let mut tokens = Vec::with_capacity(frames * spec.n);
    let mut z = sample_index(&spec.initial, rng);
    for t in 0..frames {
        if t > 0 {
            let sym = SynthTaskSpec::symbol_for_frame(&condition, t, frames) as usize;
            z = sample_index(&spec.transitions[sym][z], rng);
        }
        let mut cb = z;
        tokens.push(cb as Token);
        for d in &spec.noise {
            cb = (cb + sample_index(d, rng)) % spec.k;
            tokens.push(cb as Token);
        }
    }
    let grid = CodeGrid::new(frames, spec.n, spec.k, tokens).expect("synthetic grid is valid");
    Episode { condition, grid }
}

/// Generator for episode `index` of the stream identified by `seed`. The
/// result does not depend on which other episodes are drawn or in what order.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_episodes(spec: &SynthTaskSpec, seed: u64, start: u64, count: usize) -> Vec<Episode> {
    (0..count as u64)
        .map(|i| sample_episode(spec, &mut episode_rng(seed, start + i)))
        .collect()
}

pub fn write_dataset<W: Write>(mut w: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Probability table over all `K^N` frames, indexed row-major
/// (`cb_1` most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameJointTable {
    pub k: usize,
    pub n: usize,
    pub probs: Vec<f64>,
}

impl FrameJointTable {
    pub fn cells(k: usize, n: usize) -> Result<usize> {
        let mut cells: usize = 1;
        for _ in 0..n {
            cells = cells
                .checked_mul(k)
                .filter(|&c| c <= MAX_JOINT_CELLS)
                .ok_or_else(|| {
                    Error::Config(format!("K^N = {k}^{n} exceeds {MAX_JOINT_CELLS} cells"))
                })?;
        }
        Ok(cells)
    }

    pub fn index(&self, frame: &[Token]) -> usize {
        frame.iter().fold(0, |acc, &t| acc * self.k + t as usize)
    }

    pub fn frame_of(&self, mut idx: usize) -> Vec<Token> {
        let mut f = vec![0; self.n];
        for slot in f.iter_mut().rev() {
            *slot = (idx % self.k) as Token;
            idx /= self.k;
        }
        f
    }

    /// Empirical distribution of the given frames. Frames containing ids
    /// outside `[0, K)` are rejected.
    pub fn empirical<'a>(
        k: usize,
        n: usize,
        frames: impl IntoIterator<Item = &'a [Token]>,
    ) -> Result<Self> {
        let cells = Self::cells(k, n)?;
        let mut t = FrameJointTable {
            k,
            n,
            probs: vec![0.0; cells],
        };
        let mut count = 0usize;
        for f in frames {
            if f.len() != n || f.iter().any(|&x| x as usize >= k) {
                return Err(Error::Index(format!("frame {f:?} outside a {k}^{n} table")));
            }
            let i = t.index(f);
            t.probs[i] += 1.0;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("no frames".into()));
        }
        t.probs.iter_mut().for_each(|p| *p /= count as f64);
        Ok(t)
    }

    pub fn marginal(&self, slot: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        let stride = self.k.pow((self.n - 1 - slot) as u32);
        for (i, &p) in self.probs.iter().enumerate() {
            m[(i / stride) % self.k] += p;
        }
        m
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Exact joint of one frame given the distribution of its latent state.
pub fn oracle_frame_joint(spec: &SynthTaskSpec, z_distribution: &[f64]) -> Result<FrameJointTable> {
    let (k, n) = (spec.k, spec.n);
    let cells = FrameJointTable::cells(k, n)?;
    if z_distribution.len() != k {
        return Err(Error::Shape(format!(
            "latent distribution has {} entries for K={k}",
            z_distribution.len()
        )));
    }
    if spec.noise.len() + 1 != n {
        return Err(Error::Config("noise count must be N-1".into()));
    }
    let mut t = FrameJointTable {
        k,
        n,
        probs: vec![0.0; cells],
    };
    for idx in 0..cells {
        let f = t.frame_of(idx);
        let mut p = z_distribution[f[0] as usize];
        for j in 1..n {
            if p == 0.0 {
                break;
            }
            let delta = (f[j] as usize + k - f[j - 1] as usize) % k;
            p *= spec.noise[j - 1][delta];
        }
        t.probs[idx] = p;
    }
    Ok(t)
}

/// The joint an ideal independent-per-codebook predictor converges to.
pub fn product_of_marginals(joint: &FrameJointTable) -> FrameJointTable {
    let marginals: Vec<Vec<f64>> = (0..joint.n).map(|s| joint.marginal(s)).collect();
    let mut out = FrameJointTable {
        k: joint.k,
        n: joint.n,
        probs: vec![0.0; joint.probs.len()],
    };
    for idx in 0..out.probs.len() {
        let f = out.frame_of(idx);
        out.probs[idx] = f
            .iter()
            .enumerate()
            .map(|(s, &t)| marginals[s][t as usize])
            .product();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    /// KL(p‖q) in nats; `+inf` when `q` is zero somewhere `p` is not.
    pub kl: f64,
    pub tv: f64,
}

impl Divergence {
    pub fn kl_is_finite(&self) -> bool {
        self.kl.is_finite()
    }
}

pub fn joint_divergence(p: &FrameJointTable, q: &FrameJointTable) -> Result<Divergence> {
    if p.k != q.k || p.n != q.n || p.probs.len() != q.probs.len() {
        return Err(Error::Shape(format!(
            "tables {}^{} and {}^{}",
            p.k, p.n, q.k, q.n
        )));
    }
    let mut kl = 0.0;
    let mut tv = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        tv += (a - b).abs();
        if a > 0.0 {
            if b > 0.0 {
                kl += a * (a / b).ln();
            } else {
                kl = f64::INFINITY;
            }
        }
    }
    Ok(Divergence { kl, tv: 0.5 * tv })
}
