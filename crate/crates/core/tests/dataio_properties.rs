use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptseg::dataio::{
    coarsen, sample_prompts, sample_prompts_in, Dataset, Granularity, LabeledSeries, PromptKind, SamplerConfig,
    StateSequence, Subsequence, TimeSeries, WindowSpec,
};

fn spec_strategy() -> impl Strategy<Value = WindowSpec> {
    (1usize..24, 1usize..6)
        .prop_flat_map(|(t, w)| (Just(t), 1..=t, Just(w)))
        .prop_map(|(t, hop, w)| WindowSpec::new(t, hop, w).unwrap())
}

fn labels_strategy(len: std::ops::Range<usize>, k: usize) -> impl Strategy<Value = Vec<usize>> {
    // runs of states so that boundaries are neither absent nor everywhere
    prop::collection::vec((0..k, 1usize..6), len).prop_map(|runs| {
        runs.into_iter()
            .flat_map(|(s, n)| std::iter::repeat(s).take(n))
            .collect()
    })
}

fn dataset(len: usize, channels: usize, labels: Vec<usize>, k: usize) -> Dataset {
    let values = (0..len * channels).map(|i| i as f64 * 0.5 - 3.0).collect();
    let series = LabeledSeries {
        series: TimeSeries::new("s0", channels, values).unwrap(),
        labels: vec![StateSequence::new(labels[..len].to_vec(), k, 0).unwrap()],
    };
    Dataset::new(
        "p",
        (0..channels).map(|c| format!("ch_{c}")).collect(),
        vec![Granularity { level: 0, num_states: k, state_offset: 0 }],
        vec![series],
    )
    .unwrap()
}

proptest! {
    #[test]
    fn subsequences_tile_the_series_prefix(spec in spec_strategy(), extra in 0usize..200, channels in 1usize..4) {
        let len = spec.subsequence_len() + extra;
        let labels: Vec<usize> = (0..len).map(|t| (t / 7) % 3).collect();
        let ds = dataset(len, channels, labels.clone(), 3);
        let subs = ds.subsequences(&spec).unwrap();
        let ls = spec.subsequence_len();
        prop_assert_eq!(subs.len(), len / ls);
        let data: Vec<f64> = subs.iter().flat_map(|s| s.data.iter().copied()).collect();
        prop_assert_eq!(&data[..], &ds.series[0].series.values()[..subs.len() * ls * channels]);
        let flat: Vec<usize> = subs.iter().flat_map(|s| s.labels[0].iter().copied()).collect();
        prop_assert_eq!(&flat[..], &labels[..subs.len() * ls]);
        for (i, s) in subs.iter().enumerate() {
            prop_assert_eq!(s.origin_offset, i * ls);
            prop_assert_eq!(s.len(), ls);
        }
    }

    #[test]
    fn window_coverage_matches_closed_form(spec in spec_strategy()) {
        let (t_len, hop, w) = (spec.window_len as i64, spec.hop as i64, spec.windows as i64);
        for t in 0..spec.subsequence_len() {
            let brute = (0..spec.windows).filter(|&j| spec.window_range(j).contains(&t)).count() as i64;
            let ti = t as i64;
            let hi = (ti / hop).min(w - 1);
            let lo = 0i64.max((ti - t_len + 1 + hop - 1).div_euclid(hop));
            prop_assert!(brute >= 1);
            prop_assert_eq!(brute, hi - lo + 1, "t = {}", t);
            let listed: Vec<usize> = spec.covering_windows(t).collect();
            prop_assert_eq!(listed.len() as i64, brute);
        }
    }

    #[test]
    fn coarsening_is_a_label_function_with_fewer_boundaries(
        labels in labels_strategy(2..40, 9),
        factor in 2usize..5,
    ) {
        let fine = StateSequence::new(labels.clone(), 9, 0).unwrap();
        let coarse = coarsen(&fine, factor).unwrap();
        prop_assert_eq!(coarse.num_states(), 9usize.div_ceil(factor));
        let c = coarse.states();
        for a in 0..labels.len() {
            for b in 0..labels.len() {
                if labels[a] == labels[b] {
                    prop_assert_eq!(c[a], c[b]);
                }
            }
        }
        for t in 1..labels.len() {
            if c[t] != c[t - 1] {
                prop_assert!(labels[t] != labels[t - 1], "coarse transition at {} without a fine one", t);
            }
        }
    }

    #[test]
    fn sampled_prompts_agree_with_ground_truth(
        labels in labels_strategy(40..60, 4),
        seed in any::<u64>(),
        budget in 1usize..10,
        kind_mix in 0.0f64..=1.0,
    ) {
        let spec = WindowSpec::new(16, 4, 8).unwrap();
        let len = spec.subsequence_len();
        prop_assume!(labels.len() >= len);
        let ds = dataset(len, 1, labels, 4);
        let sub = ds.subsequences(&spec).unwrap().remove(0);
        let cfg = SamplerConfig { kind_mix, ..Default::default() };
        let prompts = sample_prompts(&sub, &spec, 0, budget, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(prompts.len(), budget);
        let truth = &sub.labels[0];
        let stamps: BTreeSet<usize> = prompts.iter().map(|p| p.t_c).collect();
        prop_assert_eq!(stamps.len(), budget);
        for p in &prompts {
            p.validate(len, &sub.granularities).unwrap();
            match &p.kind {
                PromptKind::Label { correct_state, incorrect_states } => {
                    prop_assert_eq!(*correct_state, truth[p.t_c]);
                    prop_assert!(!incorrect_states.contains(correct_state));
                }
                PromptKind::Boundary { present } => {
                    if p.t_c > 0 {
                        prop_assert_eq!(*present, truth[p.t_c] != truth[p.t_c - 1]);
                    }
                }
            }
        }
        let again = sample_prompts(&sub, &spec, 0, budget, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(prompts, again);
    }

    #[test]
    fn prompts_avoid_used_timestamps(seed in any::<u64>(), used in prop::collection::btree_set(0usize..40, 0..20)) {
        let spec = WindowSpec::new(16, 8, 4).unwrap();
        let len = spec.subsequence_len();
        let labels: Vec<usize> = (0..len).map(|t| (t / 5) % 3).collect();
        let ds = dataset(len, 1, labels, 3);
        let sub: Subsequence = ds.subsequences(&spec).unwrap().remove(0);
        let windows = [0, 2];
        let free = (0..16).chain(16..32).filter(|t| !used.contains(t)).count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = sample_prompts_in(&sub, &spec, &windows, 0, 5, &used, &SamplerConfig::default(), &mut rng);
        if free < 5 {
            prop_assert!(res.is_err());
        } else {
            for p in res.unwrap() {
                prop_assert!(!used.contains(&p.t_c));
                prop_assert!(p.t_c < 32);
            }
        }
    }

    #[test]
    fn chronological_split_has_no_leakage(len in 20usize..400, f0 in 0.2f64..0.8, f1 in 0.05f64..0.15) {
        let f2 = 1.0 - f0 - f1;
        prop_assume!(f2 > 0.05);
        let labels: Vec<usize> = (0..len).map(|t| t % 2).collect();
        let ds = dataset(len, 2, labels, 2);
        let (a, b, c) = ds.chronological_split([f0, f1, f2]).unwrap();
        let parts = [&a, &b, &c];
        let lens: Vec<usize> = parts.iter().map(|p| p.series[0].series.len()).collect();
        prop_assert!(lens.iter().all(|&l| l > 0));
        prop_assert_eq!(lens.iter().sum::<usize>(), len);
        prop_assert_eq!(lens[0], (f0 * len as f64 + 1e-9).floor() as usize);
        // each part continues exactly where the previous one ended
        let joined: Vec<f64> = parts.iter().flat_map(|p| p.series[0].series.values().iter().copied()).collect();
        prop_assert_eq!(&joined[..], ds.series[0].series.values());
    }
}
