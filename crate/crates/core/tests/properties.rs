mod common;

use common::*;
use hlspower::activity::{parse_traces, serialize_traces, Dir, TraceSet};
use hlspower::dataset::{parse_meta, serialize_meta, SampleMeta};
use hlspower::dse::{
    adrs, budget_count, crowding_distance, non_dominated_sort, pareto_front, Objectives,
};
use hlspower::interp::{parse_stimuli, serialize_stimuli};
use hlspower::sample::{parse_sample, serialize_sample};
use hlspower::train::{fold_partition, mini_batches};
use hlspower::{
    activation_rate, construct_graph, hamming, insert_buffers, interpret_dfg, merge_datapaths,
    parse_dfg, serialize_dfg, switching_activity, trim_graph, BitVector, HecGnn, HecGnnConfig,
    MetadataVector, Stimuli,
};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dfg_text_round_trips(seed in any::<u64>()) {
        let g = random_dfg(seed, 40);
        let text = serialize_dfg(&g);
        let back = parse_dfg(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize_dfg(&back), text);
    }

    #[test]
    fn activity_matches_per_cycle_count(seed in any::<u64>()) {
        let (t, waves, latency) = random_trace(seed);
        for (dir, wave) in [Dir::Src, Dir::Snk].into_iter().zip(&waves) {
            prop_assert_eq!(activation_rate(&t, dir, latency).unwrap(), brute_ar(wave, latency));
            let sa = switching_activity(&t, dir, latency).unwrap();
            let expect = brute_sa(wave, t.width, latency);
            prop_assert!((sa - expect).abs() <= 1e-12 * expect.abs());
        }
    }

    #[test]
    fn hamming_is_a_metric(a in any::<u128>(), b in any::<u128>(), c in any::<u128>(), width in 1u32..=128) {
        let v = |x| BitVector::new(x, width);
        let (ab, ba) = (hamming(v(a), v(b)).unwrap(), hamming(v(b), v(a)).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab <= width);
        prop_assert_eq!(hamming(v(a), v(a)).unwrap(), 0);
        prop_assert!(ab <= hamming(v(a), v(c)).unwrap() + hamming(v(c), v(b)).unwrap());
    }

    #[test]
    fn trace_text_round_trips(seed in any::<u64>()) {
        let (t, _, latency) = random_trace(seed);
        let mut set = TraceSet::new(latency);
        set.insert(t);
        prop_assert_eq!(parse_traces(&serialize_traces(&set)).unwrap(), set);
    }

    #[test]
    fn merge_is_idempotent(seed in any::<u64>()) {
        let g = random_dfg(seed, 50);
        let once = merge_datapaths(&g, &mut Vec::new());
        prop_assert_eq!(merge_datapaths(&once, &mut Vec::new()), once);
    }

    #[test]
    fn trim_preserves_reachability(seed in any::<u64>()) {
        let g = random_dfg(seed, 50);
        let t = trim_graph(&g, &mut Vec::new());
        let before = g.reachability();
        for (u, reach) in t.reachability() {
            let expect: std::collections::BTreeSet<_> =
                before[&u].iter().copied().filter(|v| t.node(*v).is_some()).collect();
            prop_assert_eq!(reach, expect, "from node {}", u);
        }
        prop_assert!(t.nodes().iter().all(|n| g.node(n.id).is_some()));
    }

    #[test]
    fn buffer_insertion_never_removes_nodes(seed in any::<u64>()) {
        let g = random_dfg(seed, 50);
        let b = insert_buffers(&g, &mut Vec::new());
        prop_assert!(b.nodes().len() >= g.nodes().len());
        prop_assert!(g.nodes().iter().all(|n| b.node(n.id).is_some()));
    }

    #[test]
    fn construction_is_deterministic_and_simulates(seed in any::<u64>()) {
        let g = random_dfg(seed, 30);
        let c = construct_graph(&g, &mut Vec::new());
        prop_assert_eq!(&construct_graph(&g, &mut Vec::new()), &c);
        let mut r = rng(seed);
        let stimuli = Stimuli {
            inputs: c.entries().into_iter().map(|id| (id, (0..4).map(|_| r.gen()).collect())).collect(),
        };
        let traces = interpret_dfg(&c, &stimuli, 6).unwrap();
        for t in traces.traces.values() {
            t.validate().unwrap();
        }
    }

    #[test]
    fn stimuli_round_trip(values in prop::collection::btree_map(0u32..100, prop::collection::vec(any::<u128>(), 1..6), 0..6)) {
        let s = Stimuli { inputs: values };
        prop_assert_eq!(parse_stimuli(&serialize_stimuli(&s)).unwrap(), s);
    }

    #[test]
    fn sample_round_trips(seed in any::<u64>(), n in 1usize..12, dim in 1usize..6) {
        let mut s = random_sample(&mut rng(seed), n, dim);
        s.name = String::new();
        s.metadata = None;
        s.label = None;
        prop_assert_eq!(parse_sample(&serialize_sample(&s)).unwrap(), s);
    }

    #[test]
    fn meta_round_trips(values in prop::array::uniform10(0.0f64..1e6), dynamic in prop::option::of(0.0f64..50.0)) {
        let m = SampleMeta {
            metadata: MetadataVector::from_array(values),
            power_dynamic: dynamic,
            power_total: Some(1.5),
        };
        prop_assert_eq!(parse_meta(&serialize_meta(&m)).unwrap(), m);
    }

    #[test]
    fn pareto_front_matches_pairwise_check(seed in any::<u64>()) {
        let pts = random_space(seed, 120);
        let tagged: Vec<(usize, Objectives)> = pts.iter().copied().enumerate().collect();
        let front = pareto_front(&tagged);
        let ids: std::collections::BTreeSet<usize> = front.ids().into_iter().collect();
        prop_assert_eq!(ids, brute_front(&pts));
        prop_assert_eq!(adrs(&front.objectives(), &front.objectives()).unwrap(), 0.0);
    }

    #[test]
    fn adrs_is_nonnegative_and_zero_on_supersets(seed in any::<u64>()) {
        let pts = random_space(seed, 60);
        let exact = pareto_front(&pts.iter().copied().enumerate().collect::<Vec<_>>()).objectives();
        let mut approx = pts[..pts.len().div_ceil(2)].to_vec();
        prop_assert!(adrs(&exact, &approx).unwrap() >= 0.0);
        approx.extend(exact.iter().copied());
        prop_assert_eq!(adrs(&exact, &approx).unwrap(), 0.0);
    }

    #[test]
    fn non_dominated_sort_partitions(seed in any::<u64>()) {
        let pts = random_space(seed, 80);
        let fronts = non_dominated_sort(&pts);
        let mut all: Vec<usize> = fronts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..pts.len()).collect::<Vec<_>>());
        for f in &fronts {
            prop_assert_eq!(crowding_distance(&pts, f).len(), f.len());
        }
    }

    #[test]
    fn budget_count_covers_fraction(frac in 0.0f64..=1.0, n in 1usize..2000) {
        let k = budget_count(frac, n);
        prop_assert!(k <= n);
        prop_assert!(k as f64 + 1e-6 >= frac * n as f64);
    }

    #[test]
    fn batches_and_folds_partition(n in 1usize..300, batch in 1usize..64, folds in 2usize..11, seed in any::<u64>()) {
        let batches = mini_batches(n, batch, &mut rng(seed));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= batch));
        if n >= folds {
            let parts = fold_partition(n, folds, seed);
            prop_assert_eq!(parts.len(), folds);
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_ignores_node_order(seed in any::<u64>(), n in 2usize..20) {
        let mut r = rng(seed);
        let cfg = HecGnnConfig { input_dim: 5, hidden: 12, metadata_dim: 6, head_hidden: 6, ..Default::default() };
        let model = HecGnn::new(cfg, seed).unwrap();
        let s = random_sample(&mut r, n, 5);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let a = model.predict(&s).unwrap();
        let b = model.predict(&permuted(&s, &perm)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
