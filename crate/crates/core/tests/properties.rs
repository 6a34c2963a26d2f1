use std::collections::BTreeSet;
use std::sync::Arc;

use ascnet::autograd::{PoolKind, Tape, Tensor};
use ascnet::model::{
    attention_block, forward, improved_relu, init_params, AttentionParams, Dense, Mode, ModelConfig, Overrides,
};
use ascnet::pipeline::synth::{synthetic_noise, synthetic_records};
use ascnet::pipeline::{
    build_dataset, mix_noise, mse, rmse, snr_out, NoiseKind, NoiseSources, NoiseSpec, SplitFractions,
};
use ascnet::trainer::{adam_step, AdamState, TrainConfig};
use ascnet::wfdb::SignalRecord;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn noise_sources(n: usize) -> NoiseSources {
    let mut s = NoiseSources::new();
    for kind in [NoiseKind::Bw, NoiseKind::Em, NoiseKind::Ma] {
        let samples = synthetic_noise(&kind, n, 360.0, 77);
        s.insert(kind.clone(), Arc::new(SignalRecord::from_samples(kind.record_name().unwrap(), 360.0, samples)));
    }
    s
}

fn noise_kind() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![Just("awgn"), Just("bw"), Just("em"), Just("ma"), Just("em+bw"), Just("awgn+ma"),]
        .prop_map(|s| s.parse().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixed_noise_hits_the_target(seed in any::<u64>(), kind in noise_kind(), target in -10.0f64..30.0,
                                   n in 16usize..600) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spec = NoiseSpec { kind, target_snr_db: target, sources: noise_sources(4000), seed };
        let noisy = mix_noise(&clean, &spec).unwrap();
        prop_assert!((snr_out(&clean, &noisy).unwrap() - target).abs() < 1e-6);
    }

    #[test]
    fn rmse_squared_matches_mse_for_long_vectors(seed in any::<u64>(), n in 1usize..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = mse(&f, &u).unwrap();
        prop_assert!((rmse(&f, &u).unwrap().powi(2) - m).abs() <= 1e-12 * m);
    }

    #[test]
    fn improved_relu_overrides_are_exact(seed in any::<u64>(), b in 1usize..4, c in 1usize..5, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[b, c, n]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let fc = Dense { w: tape.leaf(rand_tensor(&mut rng, &[c, 2 * c]), false), b: tape.leaf(rand_tensor(&mut rng, &[c]), false) };
        let id = improved_relu(&mut tape, xv, fc, Some(1.0)).unwrap();
        prop_assert_eq!(tape.value(id).data(), x.data());
        let relu = improved_relu(&mut tape, xv, fc, Some(0.0)).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        prop_assert_eq!(tape.value(relu).data(), &expect[..]);
        // The learned slope stays in (0, 1): positives pass, negatives shrink toward zero.
        let learned = improved_relu(&mut tape, xv, fc, None).unwrap();
        for (y, v) in tape.value(learned).data().iter().zip(x.data()) {
            if *v >= 0.0 {
                prop_assert_eq!(y, v);
            } else {
                prop_assert!(*v < *y && *y < 0.0, "{} -> {}", v, y);
            }
        }
    }

    #[test]
    fn equal_channels_average_to_themselves(seed in any::<u64>(), b in 1usize..3, c in 1usize..6, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Dyadic values keep the channel sum exact.
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-64i32..64) as f64 / 8.0).collect();
        let data: Vec<f64> = (0..b).flat_map(|_| (0..c).flat_map(|_| row.clone()).collect::<Vec<_>>()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[b, c, n], data).unwrap(), false);
        let avg = tape.pool_channel(x, PoolKind::Avg).unwrap();
        let expect: Vec<f64> = (0..b).flat_map(|_| row.clone()).collect();
        prop_assert_eq!(tape.value(avg).data(), &expect[..]);
    }

    #[test]
    fn attention_with_zero_parameters_quarters_the_input(seed in any::<u64>(), c in 2usize..9, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, c, n]);
        let r = 2;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut zeros = |shape: &[usize]| tape.leaf(Tensor::zeros(shape), false);
        let p = AttentionParams {
            fc1: Dense { w: zeros(&[c / r, c]), b: zeros(&[c / r]) },
            fc2: Dense { w: zeros(&[c, c / r]), b: zeros(&[c]) },
            spatial: Dense { w: zeros(&[1, 2, 7]), b: zeros(&[1]) },
        };
        let y = attention_block(&mut tape, xv, &p, &Overrides::default()).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 0.25 * v).collect();
        prop_assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn adam_with_zero_learning_rate_never_moves(seed in any::<u64>(), steps in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5])];
        let start = params.clone();
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        for _ in 0..steps {
            let grads = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5])];
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(params, start);
        prop_assert_eq!(state.t, steps as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_are_record_disjoint_for_every_seed(seed in any::<u64>()) {
        let recs = synthetic_records(10, 2.0, 360.0, 3);
        let ds = build_dataset(&recs, &[NoiseSpec::awgn(5.0, 1)], 256, 256, SplitFractions::default(), seed).unwrap();
        let (tr, va, te) = (ds.train.record_ids(), ds.val.record_ids(), ds.test.record_ids());
        prop_assert!(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te));
        let all: BTreeSet<&str> = tr.union(&va).chain(te.iter()).copied().collect();
        prop_assert_eq!(all.len(), 10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_assembly_is_pure(seed in any::<u64>(), l in prop_oneof![Just(32usize), Just(64), Just(100)],
                                stride in 16usize..80, target in prop_oneof![Just(0.0), Just(1.25), Just(5.0), Just(15.0)]) {
        let recs = synthetic_records(4, 3.0, 360.0, 8);
        let specs = [
            NoiseSpec::awgn(target, seed),
            NoiseSpec { kind: "em".parse().unwrap(), target_snr_db: target, sources: noise_sources(3000), seed },
        ];
        let a = build_dataset(&recs, &specs, l, stride, SplitFractions::default(), seed).unwrap();
        let b = build_dataset(&recs, &specs, l, stride, SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        for set in [&a.train, &a.val, &a.test] {
            for s in &set.segments {
                prop_assert!((snr_out(&s.clean, &s.noisy).unwrap() - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_shape_preserving(seed in any::<u64>(), b in 1usize..4) {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = rand_tensor(&mut rng, &[b, 1, cfg.segment_length]);
        let run = || {
            let mut tape = Tape::new();
            let vars: Vec<_> = params.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let xv = tape.leaf(x.clone(), false);
            let out = forward(&mut tape, &cfg, &vars, &params.running, xv, Mode::Eval, &Overrides::default()).unwrap();
            let y = tape.value(out.output).clone();
            let l = tape.mean(out.output);
            tape.backward(l).unwrap();
            let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).unwrap()).collect();
            (y, grads)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        prop_assert_eq!(y1.shape(), &[b, 1, cfg.segment_length][..]);
        prop_assert_eq!(y1, y2);
        prop_assert_eq!(g1, g2);
    }
}
