//! Fréchet distance over a fixed frame embedding, divergence against the
//! task oracle, the decoding step-count model and the throughput bench.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codegrid::{CodeGrid, Token};
use crate::error::{Error, Result};
use crate::model::infer::Engine;
use crate::model::{ModelBundle, Variant};
use crate::sampling::{generate_batch, SamplingConfig};
use crate::synthdata::{
    joint_divergence, oracle_frame_joint, Divergence, FrameJointTable, SynthTaskSpec,
};

pub const EMBED_DIM: usize = 32;
pub const EMBEDDER_SEED: u64 = 0x5eed_f00d;
pub const COV_SHRINKAGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-10;

/// Fixed random map from frames to `R^32`: the sum over codebooks of one
/// vector per (codebook, token).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedder {
    k: usize,
    n: usize,
    vectors: Vec<f64>,
}

impl FrameEmbedder {
    pub fn new(k: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f64).sqrt();
        let vectors = (0..n * k * EMBED_DIM)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                scale * x
            })
            .collect();
        Self { k, n, vectors }
    }

    pub fn standard(k: usize, n: usize) -> Self {
        Self::new(k, n, EMBEDDER_SEED)
    }

    pub fn embed(&self, frame: &[Token]) -> Result<Vec<f64>> {
        if frame.len() != self.n {
            return Err(Error::Shape(format!(
                "frame of {} ids for N={}",
                frame.len(),
                self.n
            )));
        }
        let mut out = vec![0.0; EMBED_DIM];
        for (cb, &tok) in frame.iter().enumerate() {
            if tok as usize >= self.k {
                return Err(Error::Index(format!("token {tok} with K={}", self.k)));
            }
            let off = (cb * self.k + tok as usize) * EMBED_DIM;
            for (o, v) in out.iter_mut().zip(&self.vectors[off..off + EMBED_DIM]) {
                *o += v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    pub fn shrunk(&self, amount: f64) -> Self {
        let d = self.dim();
        let mut out = self.clone();
        for i in 0..d {
            out.cov[i * d + i] += amount;
        }
        out
    }
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(vectors: &[Vec<f64>]) -> Result<GaussianStats> {
    if vectors.len() < 2 {
        return Err(Error::Empty(format!(
            "need at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors of unequal length".into()));
    }
    let count = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut cov = vec![0.0; d * d];
    for v in vectors {
        for i in 0..d {
            let di = v[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / (count - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    Ok(GaussianStats { mean, cov, count })
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn check_symmetric(s: &GaussianStats, name: &str) -> Result<()> {
    let d = s.dim();
    if s.cov.len() != d * d {
        return Err(Error::Shape(format!(
            "{name}: covariance has {} entries for d={d}",
            s.cov.len()
        )));
    }
    for i in 0..d {
        for j in i + 1..d {
            if (s.cov[i * d + j] - s.cov[j * d + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Numeric(format!(
                    "{name}: covariance not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "FD between {}-dim and {}-dim stats",
            a.dim(),
            b.dim()
        )));
    }
    check_symmetric(a, "first")?;
    check_symmetric(b, "second")?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let ra = sqrt_psd(sa.clone());
    let cross = sqrt_psd(&ra * &sb * &ra);
    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if !fd.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance is {fd}")));
    }
    Ok(fd.max(0.0))
}

fn embed_all(grids: &[CodeGrid], embedder: &FrameEmbedder) -> Result<Vec<Vec<f64>>> {
    grids
        .iter()
        .flat_map(CodeGrid::iter_frames)
        .map(|f| embedder.embed(f))
        .collect()
}

/// FD between the frame embeddings of two grid sets, with `1e-6 · I` added
/// to both covariances.
pub fn fd_eval(
    generated: &[CodeGrid],
    reference: &[CodeGrid],
    embedder: &FrameEmbedder,
) -> Result<f64> {
    let g = embed_all(generated, embedder)?;
    let r = embed_all(reference, embedder)?;
    if g.is_empty() || r.is_empty() {
        return Err(Error::Empty("fd_eval needs frames on both sides".into()));
    }
    let sg = gaussian_stats(&g)?.shrunk(COV_SHRINKAGE);
    let sr = gaussian_stats(&r)?.shrunk(COV_SHRINKAGE);
    frechet_distance(&sg, &sr)
}

/// KL and TV of the generated intra-frame joint against the oracle joint
/// whose latent distribution is the generated first-codebook marginal.
pub fn oracle_divergence(spec: &SynthTaskSpec, grids: &[CodeGrid]) -> Result<Divergence> {
    let empirical =
        FrameJointTable::empirical(spec.k, spec.n, grids.iter().flat_map(CodeGrid::iter_frames))?;
    let oracle = oracle_frame_joint(spec, &empirical.marginal(0))?;
    joint_divergence(&empirical, &oracle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCount {
    pub primary_steps: usize,
    /// Total LT forward passes for one stream.
    pub lt_passes: usize,
    /// Output-head invocations including the guidance stream.
    pub head_calls: usize,
    pub cfg_multiplier: usize,
}

/// Decoder work for generating `t` frames. A parallel head is one head
/// call per primary step.
pub fn step_count(
    t: usize,
    n: usize,
    s: usize,
    p: usize,
    variant: Variant,
    cfg_enabled: bool,
) -> StepCount {
    let primary_steps = t.div_ceil(s.max(1));
    let per_step = match variant {
        Variant::Parallel => 0,
        Variant::ArLt => s * n,
        Variant::MaskgitLt => p.min(s * n),
    };
    let cfg_multiplier = if cfg_enabled { 2 } else { 1 };
    StepCount {
        primary_steps,
        lt_passes: primary_steps * per_step,
        head_calls: primary_steps * per_step.max(1) * cfg_multiplier,
        cfg_multiplier,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchWorkload {
    pub batch: usize,
    pub frames: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchWorkload {
    fn default() -> Self {
        Self {
            batch: 8,
            frames: 512,
            reps: 5,
            warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub variant: Variant,
    pub stack: usize,
    pub maskgit_steps: usize,
    pub median_seconds: f64,
    pub frames_per_second: f64,
    pub speedup: f64,
}

/// Wall-clock seconds for one batch of `workload.frames` frames in f32,
/// EOS disabled.
pub fn time_generation(
    bundle: &ModelBundle,
    cfg: &SamplingConfig,
    workload: &BenchWorkload,
) -> Result<Vec<f64>> {
    if workload.batch == 0 || workload.frames == 0 {
        return Err(Error::Config(
            "bench batch and frame count must be positive".into(),
        ));
    }
    let engine: Engine<f32> = Engine::new(bundle);
    let run_cfg = SamplingConfig {
        max_frames: workload.frames.div_ceil(bundle.config.stack),
        ignore_eos: true,
        ..*cfg
    };
    let conditions: Vec<Vec<Token>> = (0..workload.batch)
        .map(|i| vec![(i % bundle.config.condition_vocab) as Token; 4])
        .collect();
    let mut times = Vec::with_capacity(workload.reps);
    for rep in 0..workload.warmup + workload.reps {
        let start = Instant::now();
        let out = generate_batch(&engine, &conditions, &run_cfg, 0)?;
        let secs = start.elapsed().as_secs_f64();
        std::hint::black_box(out);
        if rep >= workload.warmup {
            times.push(secs);
        }
    }
    Ok(times)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Benchmarks each labelled bundle and reports speedups relative to the row
/// labelled `baseline`.
pub fn throughput_bench(
    bundles: &[(String, &ModelBundle)],
    cfg: &SamplingConfig,
    workload: &BenchWorkload,
    baseline: &str,
) -> Result<Vec<BenchRow>> {
    if workload.reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    if workload.reps < 5 {
        log::warn!("{} repetition(s): medians will be unstable", workload.reps);
    }
    let base = bundles
        .iter()
        .position(|(l, _)| l == baseline)
        .ok_or_else(|| {
            Error::Config(format!(
                "baseline row {baseline:?} not among the benchmarked configs"
            ))
        })?;
    let mut rows = Vec::with_capacity(bundles.len());
    for (label, bundle) in bundles {
        let med = median(&time_generation(bundle, cfg, workload)?);
        rows.push(BenchRow {
            label: label.clone(),
            variant: bundle.config.variant,
            stack: bundle.config.stack,
            maskgit_steps: cfg.maskgit_steps,
            median_seconds: med,
            frames_per_second: (workload.batch * workload.frames) as f64 / med,
            speedup: 0.0,
        });
    }
    let base_fps = rows[base].frames_per_second;
    rows.iter_mut()
        .for_each(|r| r.speedup = r.frames_per_second / base_fps);
    Ok(rows)
}

/// Formats with 9 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..15).contains(&mag) {
        format!("{:.*}", (8 - mag).max(0) as usize, x)
    } else {
        format!("{x:.8e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: Variant,
    #[serde(rename = "S")]
    pub stack: usize,
    #[serde(rename = "P")]
    pub maskgit_steps: usize,
    pub metric: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "variant,S,P,metric,value,ci_low,ci_high,seed";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let (lo, hi) = r.ci.map_or((String::new(), String::new()), |(l, h)| {
            (fmt_sig(l), fmt_sig(h))
        });
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.stack,
            r.maskgit_steps,
            r.metric,
            fmt_sig(r.value),
            lo,
            hi,
            r.seed
        )?;
    }
    Ok(())
}

/// Mean and a normal-approximation 95% interval.
pub fn mean_ci(values: &[f64]) -> Option<(f64, (f64, f64))> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, (mean, mean)));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    Some((mean, (mean - half, mean + half)))
}
