use memgen_core::analysis::stats::top_count;
use memgen_core::analysis::{compute_correlation, compute_nmd, rank_neurons};
use memgen_core::capture::{Fingerprint, PairDataset, PairRecord};
use memgen_core::datagen::{
    classify_output, rephrase_pair, ArithConfig, BehaviorLabel, InContextConfig, Meta, Rephrase, TaskConfig, TaskKind,
};
use memgen_core::rng::rng_from_seed;
use memgen_core::steer::{apply_intervention, build_spec, make_random_baseline, Direction};
use proptest::prelude::*;

fn dataset(layers: usize, width: usize, values: &[(f32, f32)]) -> PairDataset {
    let per = layers * width;
    let records = values
        .chunks_exact(per)
        .enumerate()
        .map(|(i, chunk)| PairRecord {
            pair_id: i as u64,
            task: TaskKind::Arithmetic,
            mem: chunk.iter().map(|v| v.0).collect(),
            gen: chunk.iter().map(|v| v.1).collect(),
        })
        .collect();
    PairDataset { fingerprint: Fingerprint { checkpoint_hash: "ab".repeat(32), n_layers: layers, width }, records }
}

fn activations() -> impl Strategy<Value = (usize, usize, Vec<(f32, f32)>)> {
    (1usize..4, 1usize..6, 1usize..30).prop_flat_map(|(l, d, n)| {
        (Just(l), Just(d), prop::collection::vec((-50.0f32..50.0, -50.0f32..50.0), l * d * n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arithmetic_rephrasing_keeps_both_answers(seed in any::<u64>(), probe in any::<bool>()) {
        let task = TaskConfig::Arithmetic(ArithConfig::generate(seed % 1000).unwrap());
        let mut rng = rng_from_seed(seed);
        let ex = if probe { task.probe_example(&mut rng).unwrap() } else { task.train_example(&mut rng).unwrap() };
        let twin = rephrase_pair(&ex, &mut rng).unwrap();
        prop_assert_eq!(twin.answers().unwrap(), ex.answers().unwrap());
        prop_assert_eq!(twin.pair_id, ex.pair_id);
        let (Some(Meta::Arithmetic(a)), Some(Meta::Arithmetic(b))) = (&ex.meta, &twin.meta) else {
            panic!("arithmetic meta expected");
        };
        prop_assert_eq!([a.operands[1], a.operands[0], a.operands[2], a.operands[3]], b.operands);
        prop_assert_eq!(a.pattern, b.pattern);
        // swapping back restores the original prompt
        prop_assert_eq!(rephrase_pair(&twin, &mut rng).unwrap().input_text, ex.input_text);
    }

    #[test]
    fn story_rephrasing_permutes_statements_only(seed in any::<u64>()) {
        let task = TaskConfig::InContext(InContextConfig::generate(seed % 1000).unwrap());
        let mut rng = rng_from_seed(seed);
        let ex = task.probe_example(&mut rng).unwrap();
        let twin = rephrase_pair(&ex, &mut rng).unwrap();
        prop_assert_eq!(twin.answers().unwrap(), ex.answers().unwrap());
        let (Some(Meta::InContext(a)), Some(Meta::InContext(b))) = (&ex.meta, &twin.meta) else {
            panic!("in-context meta expected");
        };
        prop_assert_eq!(&a.query_name, &b.query_name);
        let mut sa = a.statements.clone();
        let mut sb = b.statements.clone();
        sa.sort();
        sb.sort();
        prop_assert_eq!(sa, sb);
        match twin.rephrase().unwrap() {
            Rephrase::StatementPermutation { order } => {
                prop_assert!(order.iter().enumerate().any(|(i, &o)| i != o));
                prop_assert_ne!(&twin.input_text, &ex.input_text);
            }
            Rephrase::Degenerate => prop_assert_eq!(&twin.input_text, &ex.input_text),
            other => panic!("unexpected rephrase {other:?}"),
        }
    }

    #[test]
    fn answers_classify_as_their_behavior(seed in any::<u64>(), arith in any::<bool>()) {
        let task = if arith {
            TaskConfig::Arithmetic(ArithConfig::generate(seed % 1000).unwrap())
        } else {
            TaskConfig::InContext(InContextConfig::generate(seed % 1000).unwrap())
        };
        let ex = task.probe_example(&mut rng_from_seed(seed)).unwrap();
        let (gen, mem) = ex.answers().unwrap();
        prop_assert_eq!(classify_output(&ex, &gen).unwrap(), BehaviorLabel::Gen);
        if let Some(mem) = mem {
            prop_assert_eq!(classify_output(&ex, &mem).unwrap(), BehaviorLabel::Mem);
        }
        prop_assert_eq!(classify_output(&ex, "").unwrap(), BehaviorLabel::Other);
    }

    #[test]
    fn statistics_are_bounded_and_antisymmetric((l, d, values) in activations()) {
        let ds = dataset(l, d, &values);
        let nmd = compute_nmd(&ds).unwrap();
        let corr = compute_correlation(&ds).unwrap();
        prop_assert!(corr.values.iter().all(|r| r.abs() <= 1.0 + 1e-12));
        let swapped: Vec<(f32, f32)> = values.iter().map(|&(m, g)| (g, m)).collect();
        let ds2 = dataset(l, d, &swapped);
        let nmd2 = compute_nmd(&ds2).unwrap();
        let corr2 = compute_correlation(&ds2).unwrap();
        for k in 0..l * d {
            prop_assert_eq!(nmd.values[k], -nmd2.values[k]);
            prop_assert!((corr.values[k] + corr2.values[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn interventions_touch_only_listed_neurons(
        (l, d, values) in activations(),
        ratio in 0.01f64..=1.0,
        alpha in 0.5f64..8.0,
        toward_gen in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ds = dataset(l, d, &values);
        let nmd = compute_nmd(&ds).unwrap();
        let corr = compute_correlation(&ds).unwrap();
        let direction = if toward_gen { Direction::TowardGen } else { Direction::TowardMem };
        let spec = build_spec(&nmd, &corr, direction, alpha, ratio).unwrap();
        prop_assert_eq!(spec.entries.len(), top_count(ratio, l * d));
        prop_assert_eq!(rank_neurons(&corr, ratio).unwrap().len(), spec.entries.len());
        for layer in 0..l {
            let base: Vec<f32> = (0..d).map(|j| j as f32).collect();
            let mut h = base.clone();
            apply_intervention(&mut h, &spec, layer).unwrap();
            for j in 0..d {
                let entry = spec.entries.iter().find(|e| e.layer == layer && e.neuron == j);
                match entry {
                    Some(e) => prop_assert_eq!(h[j], base[j] + spec.shift(e) as f32),
                    None => prop_assert_eq!(h[j], base[j]),
                }
            }
        }
        let baseline = make_random_baseline(&spec, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(baseline.entries.len(), spec.entries.len());
        let mut coords: Vec<(usize, usize)> = baseline.entries.iter().map(|e| (e.0, e.1)).collect();
        coords.sort_unstable();
        coords.dedup();
        prop_assert_eq!(coords.len(), spec.entries.len());
        prop_assert!(baseline.entries.iter().all(|e| e.0 < l && e.1 < d && e.2.abs() <= baseline.v));
    }
}
