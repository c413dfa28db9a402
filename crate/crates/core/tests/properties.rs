//! Property tests for merging, retrieval and the pool gate.

use proptest::prelude::*;
use tegee::embedder::TrigramEmbedder;
use tegee::ensemble::merge_weighted;
use tegee::pool::{ExpertPool, UnitMeta};
use tegee::{Adapter, AdapterSpec, Factors, Tensor};

const WORDS: [&str; 16] = [
    "report", "symbol", "greatest", "first", "echo", "digit", "total", "odd", "count", "window", "sequence", "final",
    "answer", "present", "length", "smaller",
];

fn spec() -> AdapterSpec {
    AdapterSpec::new(vec!["q_proj".into(), "k_proj".into()], 2).unwrap()
}

fn adapter_from(values: &[f64]) -> Adapter {
    // two targets, each B 3x2 and A 2x4
    let f = |off: usize| Factors {
        b: Tensor::matrix(3, 2, values[off..off + 6].to_vec()).unwrap(),
        a: Tensor::matrix(2, 4, values[off + 6..off + 14].to_vec()).unwrap(),
    };
    Adapter::from_factors(spec(), vec![f(0), f(14)]).unwrap()
}

fn flat(a: &Adapter) -> Vec<f64> {
    a.factors().iter().flat_map(|f| f.b.data().iter().chain(f.a.data()).copied()).collect()
}

fn adapters() -> impl Strategy<Value = Vec<Adapter>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 28), 1..6)
        .prop_map(|vs| vs.iter().map(|v| adapter_from(v)).collect())
}

fn definition() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 2..8).prop_map(|ix| ix.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn zero_adapter() -> Adapter {
    adapter_from(&[0.0; 28])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_entries_stay_inside_the_inputs(ads in adapters(), ws in prop::collection::vec(0.01..5.0f64, 6)) {
        let refs: Vec<&Adapter> = ads.iter().collect();
        let merged = merge_weighted(&refs, &ws[..ads.len()]).unwrap();
        let m = flat(&merged);
        for (j, v) in m.iter().enumerate() {
            let lo = ads.iter().map(|a| flat(a)[j]).fold(f64::INFINITY, f64::min);
            let hi = ads.iter().map(|a| flat(a)[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn merge_ignores_input_order(ads in adapters(), ws in prop::collection::vec(0.01..5.0f64, 6)) {
        let w = &ws[..ads.len()];
        let refs: Vec<&Adapter> = ads.iter().collect();
        let rev_refs: Vec<&Adapter> = ads.iter().rev().collect();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let a = flat(&merge_weighted(&refs, w).unwrap());
        let b = flat(&merge_weighted(&rev_refs, &rev_w).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn retrieval_weights_are_normalized_and_ordered(defs in prop::collection::vec(definition(), 1..12), q in definition(), k in 1usize..6) {
        let mut pool = ExpertPool::new(spec(), 1.0, TrigramEmbedder::default()).unwrap();
        for d in &defs {
            pool.try_add(d, zero_adapter(), UnitMeta::new("test", 0, 1)).unwrap();
        }
        let r = pool.retrieve(&q, k).unwrap();
        prop_assert_eq!(r.entries.len(), k.min(pool.len()));
        let total: f64 = r.weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for pair in r.entries.windows(2) {
            prop_assert!(pair[0].similarity > pair[1].similarity
                || (pair[0].similarity == pair[1].similarity && pair[0].index < pair[1].index));
            prop_assert!(pair[0].weight >= pair[1].weight);
        }
    }

    #[test]
    fn admitted_units_stay_distinct(defs in prop::collection::vec(definition(), 1..25), tau in 0.5..1.0f64) {
        let mut pool = ExpertPool::new(spec(), tau, TrigramEmbedder::default()).unwrap();
        for d in &defs {
            pool.try_add(d, zero_adapter(), UnitMeta::new("test", 0, 1)).unwrap();
        }
        let units = pool.units();
        for i in 0..units.len() {
            for j in 0..i {
                let s = tegee::embedder::cosine(&units[i].embedding, &units[j].embedding).unwrap();
                prop_assert!(s < tau, "units {} and {} have similarity {}", j, i, s);
            }
        }
    }

    #[test]
    fn rejected_add_leaves_pool_unchanged(defs in prop::collection::vec(definition(), 1..10), pick in 0usize..10) {
        let mut pool = ExpertPool::new(spec(), 0.9, TrigramEmbedder::default()).unwrap();
        for d in &defs {
            pool.try_add(d, zero_adapter(), UnitMeta::new("test", 0, 1)).unwrap();
        }
        let before = pool.clone();
        let existing = pool.units()[pick % pool.len()].definition.clone();
        let (added, sim) = pool.try_add(&existing, adapter_from(&[1.0; 28]), UnitMeta::new("again", 1, 1)).unwrap();
        prop_assert!(!added);
        prop_assert!(sim >= 0.9);
        prop_assert_eq!(pool.units(), before.units());
    }
}

#[test]
fn mismatched_adapter_is_refused_without_side_effects() {
    let mut pool = ExpertPool::new(spec(), 0.9, TrigramEmbedder::default()).unwrap();
    pool.try_add("report the greatest symbol", zero_adapter(), UnitMeta::new("test", 0, 1)).unwrap();
    let before = pool.clone();
    let other = AdapterSpec::new(vec!["q_proj".into()], 2).unwrap();
    let f = Factors { b: Tensor::zeros(3, 2), a: Tensor::zeros(2, 4) };
    let odd = Adapter::from_factors(other, vec![f]).unwrap();
    assert!(pool.try_add("count every odd digit", odd, UnitMeta::new("test", 1, 1)).is_err());
    assert_eq!(pool.units(), before.units());
}
