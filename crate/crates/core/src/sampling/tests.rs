use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelBundle, ModelConfig};

fn small(variant: Variant, stack: usize) -> ModelConfig {
    ModelConfig {
        codebooks: 2,
        k: 5,
        model_dim: 8,
        heads: 2,
        encoder_layers: 1,
        max_positions: 32,
        max_condition_len: 8,
        ..ModelConfig::matched(variant, stack, 2)
    }
}

fn engine(variant: Variant, stack: usize) -> Engine<f64> {
    let mut b = ModelBundle::new(small(variant, stack)).unwrap();
    for p in b.params.iter_mut() {
        let salt = p.name.len() as f64;
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += 0.3 * ((i as f64 * 0.37 + salt).sin());
        }
    }
    Engine::new(&b)
}

#[test]
fn cfg_combine_endpoints() {
    let c = [1.0, -2.0, 0.5];
    let u = [0.0, 1.0, 0.5];
    assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&c, &u, 2.0).unwrap(), vec![2.0, -5.0, 0.5]);
    assert!(matches!(
        cfg_combine(&c, &u[..2], 1.0),
        Err(Error::Shape(_))
    ));
}

#[test]
fn categorical_matches_softmax() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln() + 3.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let s = sample_categorical(&logits, 1.0, 4, &mut rng).unwrap();
        assert!((s.purity - probs[s.token]).abs() < 1e-12);
        counts[s.token] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, p)| {
            let e = p * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 0.999 quantile of chi-square with 3 degrees of freedom
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn temperature_reshapes_purity() {
    let logits = [0.0, 1.0f64];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sample_categorical(&logits, 0.5, 2, &mut rng).unwrap();
    let p1 = 1.0 / (1.0 + (-2.0f64).exp());
    let expect = if s.token == 1 { p1 } else { 1.0 - p1 };
    assert!((s.purity - expect).abs() < 1e-12);
}

#[test]
fn top_k_keeps_largest_and_breaks_ties_low() {
    let logits = [2.0, 5.0, 5.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = sample_categorical(&logits, 1.0, 1, &mut rng).unwrap();
        assert_eq!(s.token, 1);
        assert_eq!(s.purity, 1.0);
        let s = sample_categorical(&logits, 1.0, 2, &mut rng).unwrap();
        assert!(s.token == 1 || s.token == 2);
        assert!((s.purity - 0.5).abs() < 1e-12);
    }
}

#[test]
fn excluded_ids_are_never_drawn() {
    let vocab = Vocab::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for allow_eos in [false, true] {
        let mut l = vec![0.0; vocab.size()];
        mask_reserved(&mut l, vocab, allow_eos);
        for _ in 0..500 {
            let t = sample_categorical(&l, 1.0, usize::MAX, &mut rng)
                .unwrap()
                .token as Token;
            assert!(vocab.is_data(t) || (allow_eos && t == vocab.eos()), "{t}");
        }
    }
    let l = [f64::NEG_INFINITY; 3];
    assert!(matches!(
        sample_categorical(&l, 1.0, 1, &mut rng),
        Err(Error::Numeric(_))
    ));
    assert!(matches!(
        sample_categorical(&[0.0, f64::NAN], 1.0, 1, &mut rng),
        Err(Error::Numeric(_))
    ));
    assert!(sample_categorical(&[0.0], 0.0, 1, &mut rng).is_err());
}

#[test]
fn unmask_plans() {
    let plan = |t, p, s| build_unmask_plan(t, p, s).unwrap().counts;
    assert_eq!(plan(8, 3, UnmaskSchedule::Uniform), vec![2, 3, 3]);
    assert_eq!(plan(32, 3, UnmaskSchedule::Cosine), vec![4, 12, 16]);
    assert_eq!(plan(4, 4, UnmaskSchedule::Cosine), vec![1, 1, 1, 1]);
    for total in 1..40 {
        for p in 1..=total {
            for s in [UnmaskSchedule::Uniform, UnmaskSchedule::Cosine] {
                let c = plan(total, p, s);
                assert_eq!(c.len(), p);
                assert_eq!(c.iter().sum::<usize>(), total);
                assert!(c.iter().all(|&x| x >= 1));
                assert!(c.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
    let reduced = build_unmask_plan(3, 5, UnmaskSchedule::Cosine).unwrap();
    assert_eq!(reduced.counts, vec![1, 1, 1]);
    assert!(reduced.warning.is_some());
    assert!(build_unmask_plan(0, 1, UnmaskSchedule::Uniform).is_err());
}

#[test]
fn generation_is_deterministic_and_batch_independent() {
    for variant in Variant::ALL {
        let e = engine(variant, 2);
        let cfg = SamplingConfig {
            seed: 9,
            max_frames: 6,
            ..SamplingConfig::default()
        };
        let conds = vec![vec![0, 1], vec![2, 3, 1], vec![3]];
        let batch = generate_batch(&e, &conds, &cfg, 0).unwrap();
        assert_eq!(batch, generate_batch(&e, &conds, &cfg, 0).unwrap());
        for (i, c) in conds.iter().enumerate() {
            let alone = generate_batch(&e, std::slice::from_ref(c), &cfg, i as u64).unwrap();
            assert_eq!(alone[0], batch[i], "{variant} sequence {i}");
        }
        let other = SamplingConfig { seed: 10, ..cfg };
        assert_ne!(batch, generate_batch(&e, &conds, &other, 0).unwrap());
    }
}

#[test]
fn capped_generation_counts_steps_and_passes() {
    for variant in Variant::ALL {
        for stack in [1, 2] {
            let e = engine(variant, stack);
            for cfg_scale in [1.0, 3.0] {
                let cfg = SamplingConfig {
                    max_frames: 3,
                    ignore_eos: true,
                    cfg_scale,
                    ..SamplingConfig::default()
                };
                let g = generate(&e, &[1, 2], &cfg).unwrap();
                assert!(g.truncated);
                assert_eq!(g.primary_steps, 3);
                assert_eq!(g.grid.frames(), 3 * stack);
                let per_row = match variant {
                    Variant::Parallel => 0,
                    Variant::ArLt => stack * 2,
                    Variant::MaskgitLt => cfg.maskgit_steps.min(stack * 2),
                };
                let mult = if cfg_scale == 1.0 { 1 } else { 2 };
                assert_eq!(g.lt_passes, 3 * per_row * mult, "{variant} S={stack}");
                assert!(g.grid.tokens().iter().all(|&t| (t as usize) < 5));
            }
        }
    }
}

#[test]
fn eos_stops_and_is_trimmed() {
    let mut b = ModelBundle::new(small(Variant::Parallel, 2)).unwrap();
    let eos = b.vocab().eos() as usize;
    // second frame of the first row opens with EOS
    let bias = b.heads[2].b.unwrap();
    b.params.value_mut(bias).data_mut()[eos] = 60.0;
    let e: Engine<f64> = Engine::new(&b);
    let cfg = SamplingConfig {
        max_frames: 10,
        ..SamplingConfig::default()
    };
    let g = generate(&e, &[0], &cfg).unwrap();
    assert!(!g.truncated);
    assert_eq!(g.primary_steps, 1);
    assert_eq!(g.grid.frames(), 1);

    let capped = generate(
        &e,
        &[0],
        &SamplingConfig {
            ignore_eos: true,
            ..cfg
        },
    )
    .unwrap();
    assert!(capped.truncated);
    assert_eq!(capped.grid.frames(), 20);
}

#[test]
fn maskgit_freezes_unmasked_slots() {
    let e = engine(Variant::MaskgitLt, 4);
    let cfg = SamplingConfig {
        maskgit_steps: 4,
        unmask_schedule: UnmaskSchedule::Uniform,
        ..SamplingConfig::default()
    };
    let mask = e.vocab().mask();
    let mut state = e.condition_state(&[1]).unwrap();
    let mut null = e.null_state();
    let bos = vec![e.vocab().bos(); 8];
    let h = e.primary_step(&mut [&mut state], &[&bos]).unwrap();
    let hu = e.primary_step(&mut [&mut null], &[&bos]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = decode_stack_maskgit(&e, &h, Some(&hu), &cfg, &mut rng).unwrap();
    assert_eq!(d.history.len(), 4);
    let mut prev = vec![mask; 8];
    for (i, row) in d.history.iter().enumerate() {
        for j in 0..8 {
            if prev[j] != mask {
                assert_eq!(row[j], prev[j]);
            }
        }
        let open = row.iter().filter(|&&t| t != mask).count();
        assert_eq!(open, 2 * (i + 1));
        prev = row.clone();
    }
    assert_eq!(d.tokens, prev);
    assert_eq!(d.lt_passes, 8);
    assert!(decode_stack_ar(&e, &h, Some(&hu), &cfg, &mut rng).is_err());
    assert!(decode_stack_maskgit(&e, &h, None, &cfg, &mut rng).is_err());
}

#[test]
fn config_validation() {
    let e = engine(Variant::ArLt, 1);
    let bad = [
        SamplingConfig {
            temperature: 0.0,
            ..Default::default()
        },
        SamplingConfig {
            top_k: 0,
            ..Default::default()
        },
        SamplingConfig {
            maskgit_steps: 0,
            ..Default::default()
        },
        SamplingConfig {
            max_frames: 0,
            ..Default::default()
        },
        SamplingConfig {
            max_frames: 33,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(generate(&e, &[0], &cfg), Err(Error::Config(_))),
            "{cfg:?}"
        );
    }
    let json = serde_json::to_string(&SamplingConfig::default()).unwrap();
    assert!(json.contains("\"cosine\""));
    let back: SamplingConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, SamplingConfig::default());
}

#[test]
fn maskgit_offers_eos_only_to_the_fully_masked_row() {
    let mut b = ModelBundle::new(small(Variant::MaskgitLt, 2)).unwrap();
    let eos = b.vocab().eos();
    for slot in [0, 2] {
        let bias = b.heads[slot].b.unwrap();
        b.params.value_mut(bias).data_mut()[eos as usize] = 60.0;
    }
    let e: Engine<f64> = Engine::new(&b);
    let cfg = SamplingConfig {
        cfg_scale: 1.0,
        unmask_schedule: UnmaskSchedule::Uniform,
        ..SamplingConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = decode_stack_maskgit(&e, &[0.1; 8], None, &cfg, &mut rng).unwrap();
    assert_eq!(d.history[0][0], eos);
    assert_eq!(d.history[0][1..], [e.vocab().mask(); 3]);
    assert_ne!(d.tokens[2], eos);
}
