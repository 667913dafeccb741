//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use codestack::cli::{self, EvalReport, RunConfig};
use codestack::codegrid::{CodeGrid, Token};
use codestack::metrics::{
    frechet_distance, step_count, throughput_bench, BenchWorkload, GaussianStats,
};
use codestack::model::{Engine, ModelBundle, ModelConfig, TrainExample, Variant};
use codestack::nn::{finite_diff_check, Tape};
use codestack::sampling::{
    build_unmask_plan, decode_stack_maskgit, generate_batch, SamplingConfig, UnmaskSchedule,
};
use codestack::synthdata::{
    joint_divergence, oracle_frame_joint, sample_episodes, FrameJointTable, SynthTaskSpec,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const STACKS: [usize; 3] = [1, 2, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn small(
    variant: Variant,
    stack: usize,
    codebooks: usize,
    k: usize,
    dim: usize,
    heads: usize,
    budget: usize,
) -> ModelConfig {
    ModelConfig {
        codebooks,
        k,
        model_dim: dim,
        heads,
        encoder_layers: 1,
        max_positions: 32,
        max_condition_len: 8,
        p_uncond: 0.0,
        ..ModelConfig::matched(variant, stack, budget)
    }
}

/// Adds a deterministic pattern so every path carries signal.
fn roughen(bundle: &mut ModelBundle, amp: f64) {
    for p in bundle.params.iter_mut() {
        let salt = p.name.len() as f64;
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += amp * ((i as f64 * 0.61 + salt).sin());
        }
    }
}

fn random_grid(rng: &mut impl Rng, frames: usize, n: usize, k: usize) -> CodeGrid {
    let toks = (0..frames * n)
        .map(|_| rng.random_range(0..k as Token))
        .collect();
    CodeGrid::new(frames, n, k, toks).unwrap()
}

fn gradients() -> Outcome {
    let mut worst = Vec::new();
    for variant in Variant::ALL {
        let cfg = small(variant, 2, 2, 5, 8, 2, 2);
        let mut b = ModelBundle::new(cfg).unwrap();
        roughen(&mut b, 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = random_grid(&mut rng, 3, 2, 5);
        let ex = TrainExample::new(&cfg, &[2, 0, 1], &grid, &mut rng).unwrap();
        let layout = b.clone();
        let r = finite_diff_check(
            &mut b.params,
            |t| layout.example_loss(t, &ex),
            1e-3,
            6,
            &mut rng,
        )
        .unwrap();
        worst.push((variant, r.max_rel_error));
    }
    let pass = worst.iter().all(|&(_, e)| e < 1e-4);
    let detail = worst
        .iter()
        .map(|(v, e)| format!("{v} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("max relative error: {detail}"))
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0;
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let dim = heads * rng.random_range(2..5);
        let stack = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let k = rng.random_range(2..9);
        let budget = rng.random_range(2..4);
        let cfg = small(Variant::ArLt, stack, n, k, dim, heads, budget);
        let mut b = ModelBundle::new(cfg).unwrap();
        roughen(&mut b, 0.2);
        let slots = stack * n;
        let cond: Vec<Token> = (0..rng.random_range(1..5))
            .map(|_| rng.random_range(0..4))
            .collect();

        let steps = rng.random_range(2..7);
        let mut inputs = vec![vec![cfg.vocab().bos(); slots]];
        for _ in 0..steps {
            inputs.push(
                (0..slots)
                    .map(|_| rng.random_range(0..k as Token))
                    .collect(),
            );
        }
        let primary = |inputs: &[Vec<Token>]| {
            let mut t = Tape::new(&b.params);
            let m = b.encode(&mut t, &cond).unwrap();
            let rows: Vec<&[Token]> = inputs.iter().map(Vec::as_slice).collect();
            let h = b.primary_forward(&mut t, &rows, m).unwrap();
            t.value(h).to_vec()
        };
        let base = primary(&inputs);
        let row = rng.random_range(1..inputs.len());
        let mut alt = inputs.clone();
        let slot = rng.random_range(0..slots);
        alt[row][slot] = (alt[row][slot] + 1) % k as Token;
        if primary(&alt)[..row * dim] != base[..row * dim] {
            failures += 1;
        }

        let teacher: Vec<Token> = (0..slots)
            .map(|_| rng.random_range(0..k as Token))
            .collect();
        let h_data: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).cos()).collect();
        let lt = |teacher: &[Token]| {
            let mut t = Tape::new(&b.params);
            let h = t.constant(1, dim, h_data.clone()).unwrap();
            let l = b.lt_ar_forward(&mut t, h, &[teacher]).unwrap();
            l.iter().map(|&v| t.value(v).to_vec()).collect::<Vec<_>>()
        };
        let base = lt(&teacher);
        let j = rng.random_range(0..slots);
        let mut alt = teacher.clone();
        alt[j] = (alt[j] + 1) % k as Token;
        if lt(&alt)[..=j] != base[..=j] {
            failures += 1;
        }
    }
    Outcome::new(
        failures == 0,
        format!("{failures} violations over 100 configurations"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut tvs = Vec::new();
    for seed in SEEDS {
        let spec = SynthTaskSpec::default_with_seed(seed);
        let episodes = sample_episodes(&spec, 1000 + seed, 0, 100_000);
        let emp = FrameJointTable::empirical(
            spec.k,
            spec.n,
            episodes.iter().flat_map(|e| e.grid.iter_frames()),
        )
        .unwrap();
        // circulant transitions keep the uniform initial distribution at every frame
        let oracle = oracle_frame_joint(&spec, &spec.initial).unwrap();
        tvs.push(joint_divergence(&emp, &oracle).unwrap().tv);
    }
    let pass = tvs.iter().all(|&tv| tv < 0.02);
    Outcome::new(pass, format!("TV per seed {tvs:.4?}"))
}

struct QualityRun {
    seed: u64,
    report: EvalReport,
}

fn quality_runs() -> Vec<QualityRun> {
    let mut out = Vec::new();
    for seed in SEEDS {
        for stack in STACKS {
            for variant in Variant::ALL {
                let mut cfg = RunConfig {
                    seed,
                    ..RunConfig::default()
                }
                .with_head(variant, stack);
                cfg.sampling = SamplingConfig::ancestral(seed, 64usize.div_ceil(stack));
                cfg.propagate_seed();
                let t0 = Instant::now();
                let bundle = cli::train_bundle(&cfg, |_, _| {}).unwrap();
                let report = cli::evaluate(&cfg, &bundle).unwrap();
                eprintln!(
                    "  seed {seed} {variant} S={stack}: KL {:.4} FD {:.4} ({} frames, {:.0}s)",
                    report.joint_kl,
                    report.fd,
                    report.generated_frames,
                    t0.elapsed().as_secs_f64()
                );
                out.push(QualityRun { seed, report });
            }
        }
    }
    out
}

fn find(runs: &[QualityRun], seed: u64, stack: usize, variant: Variant) -> &EvalReport {
    &runs
        .iter()
        .find(|r| r.seed == seed && r.report.stack == stack && r.report.variant == variant)
        .unwrap()
        .report
}

fn kl_trend(runs: &[QualityRun]) -> Outcome {
    let mut pass = true;
    let mut worst = f64::INFINITY;
    for seed in SEEDS {
        for stack in STACKS {
            let par = find(runs, seed, stack, Variant::Parallel).joint_kl;
            for v in [Variant::ArLt, Variant::MaskgitLt] {
                let factor = par / find(runs, seed, stack, v).joint_kl;
                worst = worst.min(factor);
                pass &= factor >= 2.0;
            }
        }
    }
    Outcome::new(
        pass,
        format!("smallest KL(parallel)/KL(LT) factor {worst:.2}"),
    )
}

fn fd_trend(runs: &[QualityRun]) -> Outcome {
    let mut violations = Vec::new();
    for seed in SEEDS {
        for stack in STACKS {
            let par = find(runs, seed, stack, Variant::Parallel).fd;
            for v in [Variant::ArLt, Variant::MaskgitLt] {
                let fd = find(runs, seed, stack, v).fd;
                if fd >= par {
                    violations.push(format!(
                        "seed {seed} S={stack} {v} {fd:.3} >= parallel {par:.3}"
                    ));
                }
            }
        }
        let (s1, s4) = (
            find(runs, seed, 1, Variant::Parallel).fd,
            find(runs, seed, 4, Variant::Parallel).fd,
        );
        if s4 <= s1 {
            violations.push(format!("seed {seed} parallel S=4 {s4:.3} <= S=1 {s1:.3}"));
        }
    }
    if violations.is_empty() {
        Outcome::new(true, "all orderings hold")
    } else {
        Outcome::new(false, violations.join("; "))
    }
}

fn step_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut checked = 0;
    let bundles: Vec<ModelBundle> = STACKS
        .iter()
        .flat_map(|&s| {
            Variant::ALL.map(|v| {
                let cfg = ModelConfig {
                    max_positions: 256,
                    ..small(v, s, 4, 16, 16, 2, 4)
                };
                ModelBundle::new(cfg).unwrap()
            })
        })
        .collect();
    for _ in 0..50 {
        let t: usize = rng.random_range(1..200);
        let cfg_scale = if rng.random_bool(0.5) { 2.5 } else { 1.0 };
        for b in &bundles {
            let m = &b.config;
            let engine: Engine<f32> = Engine::new(b);
            let cfg = SamplingConfig {
                max_frames: t.div_ceil(m.stack),
                ignore_eos: true,
                cfg_scale,
                seed: t as u64,
                ..SamplingConfig::default()
            };
            let g = generate_batch(&engine, &[vec![1, 2]], &cfg, 0)
                .unwrap()
                .remove(0);
            let model = step_count(
                t,
                m.codebooks,
                m.stack,
                cfg.maskgit_steps,
                m.variant,
                cfg.cfg_enabled(),
            );
            let mut ok =
                g.primary_steps == t.div_ceil(m.stack) && g.primary_steps == model.primary_steps;
            if m.variant == Variant::MaskgitLt {
                ok &= g.lt_passes == cfg.maskgit_steps * g.primary_steps * model.cfg_multiplier;
            }
            if m.variant != Variant::Parallel {
                ok &= g.lt_passes == model.lt_passes * model.cfg_multiplier;
            }
            mismatches += usize::from(!ok);
            checked += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{mismatches} mismatches over {checked} generations"),
    )
}

fn throughput() -> Outcome {
    let configs: Vec<(Variant, usize)> = vec![
        (Variant::Parallel, 1),
        (Variant::ArLt, 1),
        (Variant::ArLt, 2),
        (Variant::ArLt, 4),
        (Variant::MaskgitLt, 1),
        (Variant::MaskgitLt, 2),
        (Variant::MaskgitLt, 4),
    ];
    let bundles: Vec<(String, ModelBundle)> = configs
        .iter()
        .map(|&(v, s)| {
            (
                format!("{v}_s{s}"),
                ModelBundle::new(ModelConfig::matched(v, s, 4)).unwrap(),
            )
        })
        .collect();
    let refs: Vec<(String, &ModelBundle)> = bundles.iter().map(|(l, b)| (l.clone(), b)).collect();
    let workload = BenchWorkload {
        batch: 8,
        frames: 512,
        reps: 5,
        warmup: 1,
    };
    let rows =
        throughput_bench(&refs, &SamplingConfig::default(), &workload, "parallel_s1").unwrap();
    let fps = |label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .unwrap()
            .frames_per_second
    };
    let mut pass = true;
    for v in ["ar_lt", "maskgit_lt"] {
        let (a, b, c) = (
            fps(&format!("{v}_s1")),
            fps(&format!("{v}_s2")),
            fps(&format!("{v}_s4")),
        );
        pass &= a < b && b < c;
    }
    pass &= fps("ar_lt_s2") > fps("parallel_s1");
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.2}x", r.label, r.speedup))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("speedup vs parallel_s1: {detail}"))
}

fn fd_units() -> Outcome {
    let g = |mean: Vec<f64>, cov: Vec<f64>| GaussianStats {
        mean,
        cov,
        count: 100,
    };
    let cases = [
        (g(vec![0.0], vec![1.0]), g(vec![0.0], vec![1.0]), 0.0),
        (g(vec![0.0], vec![1.0]), g(vec![1.0], vec![1.0]), 1.0),
        (
            g(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
            g(vec![1.0, 1.0], vec![4.0, 0.0, 0.0, 4.0]),
            4.0,
        ),
    ];
    let got: Vec<f64> = cases
        .iter()
        .map(|(a, b, _)| frechet_distance(a, b).unwrap())
        .collect();
    let pass = cases
        .iter()
        .zip(&got)
        .all(|((_, _, want), d)| (d - want).abs() < 1e-8);
    Outcome::new(pass, format!("distances {got:?}"))
}

fn unmask_plans() -> Outcome {
    let uniform = build_unmask_plan(8, 3, UnmaskSchedule::Uniform)
        .unwrap()
        .counts;
    let mut pass = uniform == vec![2, 3, 3];
    for total in 1..=64 {
        for p in 1..=12 {
            for schedule in [UnmaskSchedule::Uniform, UnmaskSchedule::Cosine] {
                let plan = build_unmask_plan(total, p, schedule).unwrap();
                pass &= plan.counts.iter().sum::<usize>() == total
                    && plan.counts.iter().all(|&c| c > 0);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad_decodes = 0;
    for i in 0..1000 {
        let stack = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let cfg = small(Variant::MaskgitLt, stack, n, 6, 8, 2, 2);
        let mut b = ModelBundle::new(cfg).unwrap();
        roughen(&mut b, 0.3 + (i % 7) as f64 * 0.1);
        let engine: Engine<f64> = Engine::new(&b);
        let slots = stack * n;
        let schedule = if rng.random_bool(0.5) {
            UnmaskSchedule::Uniform
        } else {
            UnmaskSchedule::Cosine
        };
        let sc = SamplingConfig {
            maskgit_steps: rng.random_range(1..slots + 2),
            unmask_schedule: schedule,
            temperature: rng.random_range(0.3..1.5),
            top_k: rng.random_range(1..12),
            cfg_scale: 1.0,
            ..SamplingConfig::default()
        };
        let h: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = decode_stack_maskgit(&engine, &h, None, &sc, &mut rng).unwrap();
        let plan = build_unmask_plan(slots, sc.maskgit_steps, schedule).unwrap();
        let mask = cfg.vocab().mask();
        let mut ok = d.history.len() == plan.counts.len();
        let mut unmasked = 0;
        for (it, row) in d.history.iter().enumerate() {
            unmasked += plan.counts.get(it).copied().unwrap_or(0);
            ok &= row.iter().filter(|&&t| t != mask).count() == unmasked;
            if it > 0 {
                let prev = &d.history[it - 1];
                ok &= prev.iter().zip(row).all(|(&a, &b)| a == mask || a == b);
            }
        }
        ok &= d.history.last().map(|r| r == &d.tokens).unwrap_or(false);
        bad_decodes += usize::from(!ok);
    }
    pass &= bad_decodes == 0;
    Outcome::new(
        pass,
        format!("uniform (8,3) = {uniform:?}; {bad_decodes} non-monotone decodes of 1000"),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let run = |dir: &Path| {
        let mut cfg = RunConfig {
            checkpoint_dir: dir.join("ckpt"),
            output_dir: dir.join("out"),
            train_steps: 40,
            eval_episodes: 20,
            checkpoint_every: 20,
            seed: 17,
            ..RunConfig::default()
        }
        .with_head(Variant::MaskgitLt, 2);
        cfg.propagate_seed();
        let ckpt = cli::cmd_train(&cfg, None).unwrap().checkpoint;
        cli::cmd_eval(&cfg, &ckpt).unwrap();
        cli::cmd_generate(&cfg, &ckpt, &[0, 3, 1], &dir.join("out").join("grid.json")).unwrap();
        snapshot(dir)
    };
    // the run config stored in checkpoints records its paths, so both runs
    // use the same directory
    let dir = tempfile::tempdir().unwrap();
    let fa = run(dir.path());
    fs::remove_dir_all(dir.path().join("ckpt")).unwrap();
    fs::remove_dir_all(dir.path().join("out")).unwrap();
    let fb = run(dir.path());
    let pass = !fa.is_empty() && fa == fb;
    Outcome::new(pass, format!("{} files compared", fa.len()))
}

fn main() {
    // optional criterion numbers select a subset, e.g. `-- 3 10`
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |i: usize| only.is_empty() || only.contains(&i);
    let t0 = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |idx: usize, name: &str, run: &dyn Fn() -> Outcome| {
        if !want(idx) {
            return;
        }
        let o = run();
        println!(
            "{} criterion {idx} ({name}): {} [{:.0}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        results.push((idx, o));
    };
    report(1, "gradient check", &gradients);
    report(2, "causality", &causality);
    report(3, "oracle equivalence", &oracle_equivalence);
    if want(4) || want(5) {
        eprintln!("training 27 models for criteria 4 and 5");
        let runs = quality_runs();
        report(4, "joint KL trend", &|| kl_trend(&runs));
        report(5, "FD trend", &|| fd_trend(&runs));
    }
    report(6, "step counts", &step_counts);
    report(7, "throughput ordering", &throughput);
    report(8, "FD unit examples", &fd_units);
    report(9, "unmask plans", &unmask_plans);
    report(10, "determinism", &determinism);
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
