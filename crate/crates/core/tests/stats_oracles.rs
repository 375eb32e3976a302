//! Statistics checked against independently computed reference values.

use proptest::prelude::*;
use tclab_core::stats::*;

/// Upper-tail probabilities of the studentized range from an external
/// statistics library: (q, k, df, 1 - cdf).
const RANGE_TAILS: [(f64, usize, f64, f64); 4] = [
    (3.5, 3, 12.0, 0.06999548527518362),
    (2.0, 5, 4.0, 0.6515100585257539),
    (5.0, 2, 30.0, 0.0013436584142986208),
    (4.2, 7, 60.0, 0.06128987861257862),
];

#[test]
fn studentized_range_tail_matches_reference() {
    for (q, k, df, tail) in RANGE_TAILS {
        let got = 1.0 - studentized_range_cdf(q, k, df);
        assert!((got - tail).abs() < 1e-5, "q={q} k={k} df={df}: {got} vs {tail}");
    }
}

#[test]
fn tukey_matches_reference_p_values() {
    let groups = vec![
        vec![1.0, 2.0, 3.0, 4.0, 5.0],
        vec![2.0, 3.0, 4.0, 5.0, 9.0],
        vec![7.0, 8.0, 8.0, 9.0, 10.0],
    ];
    let expected = [(0, 1, 0.41391766), (0, 2, 0.00215449), (1, 2, 0.0222146)];
    let r = tukey_hsd(&groups, 0.05).unwrap();
    for ((a, b, p), c) in expected.iter().zip(&r) {
        assert_eq!((c.group_a, c.group_b), (*a, *b));
        assert!((c.p_value - p).abs() < 1e-5, "{a}-{b}: {} vs {p}", c.p_value);
    }
    assert!(!r[0].different && r[1].different && r[2].different);
}

#[test]
fn tukey_far_apart_groups() {
    // Means 0 and 100 with unit within-group variance.
    let a: Vec<f64> = (0..10)
        .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } * 1.0540925533894598)
        .collect();
    let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
    let r = tukey_hsd(&[a, b], 0.05).unwrap();
    assert!(r[0].p_value < 1e-6 && r[0].different);
}

/// Student t CDF by Simpson integration of the density, inverted by bisection.
fn oracle_t_quantile(p: f64, df: f64) -> f64 {
    let dens = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let integral = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = dens(a) + dens(b);
        for i in 1..n {
            s += dens(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    // Normalizer via the symmetric integral over a wide range plus the
    // analytic-free tail estimate x^-df for large x.
    let big = 2000.0;
    let tail = |x: f64| {
        let c = df.powf((df + 1.0) / 2.0);
        c * x.powf(-df) / df
    };
    let half = integral(0.0, big) + tail(big);
    let cdf = |x: f64| 0.5 + integral(0.0, x) / (2.0 * half);
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn t_interval_matches_numeric_oracle() {
    let t = oracle_t_quantile(0.975, 2.0);
    assert!((t - 4.302652729911275).abs() < 1e-4);
    let (m, h) = t_confidence_interval(&[1.0, 2.0, 3.0], 0.95).unwrap();
    assert_eq!(m, 2.0);
    assert!((h - t / 3f64.sqrt()).abs() < 1e-3);
    assert!((h - 2.4843).abs() < 1e-3);
    for df in [4.0, 14.0] {
        assert!((t_quantile(0.975, df).unwrap() - oracle_t_quantile(0.975, df)).abs() < 1e-4);
    }
}

#[test]
fn chain_groups_by_pairwise_enumeration() {
    let ranks = [1.0, 2.0, 3.0];
    let table = RankTable {
        methods: vec!["a".into(), "b".into(), "c".into()],
        observations: vec![vec![0.0]; 3],
        ranks: ranks.iter().map(|&r| vec![r]).collect(),
        average_ranks: ranks.to_vec(),
    };
    // Enumerate every contiguous set, keep those with all pairwise gaps < CD,
    // then drop non-maximal ones.
    let cd = 1.644;
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for i in 0..3 {
        for j in i..3 {
            let ok = (i..=j).all(|a| (i..=j).all(|b| (ranks[a] - ranks[b]).abs() < cd));
            if ok {
                sets.push((i..=j).collect());
            }
        }
    }
    let maximal: Vec<Vec<usize>> = sets
        .iter()
        .filter(|s| {
            !sets
                .iter()
                .any(|o| o.len() > s.len() && s.iter().all(|x| o.contains(x)))
        })
        .cloned()
        .collect();
    assert_eq!(cd_groups(&table, cd), maximal);
    assert_eq!(maximal, vec![vec![0, 1], vec![1, 2]]);
}

#[test]
fn weighted_f1_equals_f1_on_balanced_data() {
    let t: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let p: Vec<usize> = t
        .iter()
        .enumerate()
        .map(|(i, &c)| if i % 3 == 0 { (c + 1) % 4 } else { c })
        .collect();
    let m = compute_metrics(&t, &p, 4).unwrap();
    assert!((m.weighted_f1 - m.macro_f1).abs() < 1e-12);
}

#[test]
fn identical_partitions_have_identical_kde() {
    use tclab_core::dataio::{Dataset, FlowRecord, PacketSeries};
    let rec = |id: &str, sizes: Vec<u32>| FlowRecord {
        flow_id: id.into(),
        label: "x".into(),
        partition: None,
        series: PacketSeries::from_parts((0..sizes.len()).map(|i| i as f64 * 0.1).collect(), sizes, None).unwrap(),
    };
    let d = Dataset::from_records(vec![rec("a", vec![100, 600, 1400]), rec("b", vec![40, 40, 900])]).unwrap();
    let single = Dataset::from_records(vec![rec("a", vec![100, 600, 1400])]).unwrap();
    let r = drift_diagnostics(&[("p".into(), &d), ("q".into(), &d), ("s".into(), &single)], 32, 15.0).unwrap();
    assert_eq!(r.entries[0].density, r.entries[1].density);
    let fp = tclab_core::build_flowpic(&single.records()[0].series, 32, 15.0);
    let expect: Vec<f64> = fp.counts().iter().map(|&c| c as f64).collect();
    assert_eq!(r.entries[2].mean_flowpic, expect);
}

proptest! {
    #[test]
    fn ranks_invariant_under_increasing_maps(
        obs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 3..7),
        shift in -5.0f64..5.0,
    ) {
        let names: Vec<String> = (0..obs.len()).map(|i| format!("m{i}")).collect();
        let base = rank_methods(names.clone(), obs.clone()).unwrap();
        // Work on 6-decimal grid values so rounding ties are preserved.
        let grid: Vec<Vec<f64>> = obs.iter().map(|r| r.iter().map(|v| (v * 1e3).round() / 1e3).collect()).collect();
        let a = rank_methods(names.clone(), grid.clone()).unwrap();
        let cubed: Vec<Vec<f64>> = grid.iter().map(|r| r.iter().map(|v| 2.0 * v + v.powi(3) / 10.0).collect()).collect();
        let b = rank_methods(names.clone(), cubed).unwrap();
        let shifted: Vec<Vec<f64>> = grid.iter().map(|r| r.iter().map(|v| v + shift.round()).collect()).collect();
        let c = rank_methods(names, shifted).unwrap();
        prop_assert_eq!(&a.ranks, &c.ranks);
        for (ra, rb) in a.ranks.iter().flatten().zip(b.ranks.iter().flatten()) {
            prop_assert_eq!(ra, rb);
        }
        for r in &base.average_ranks {
            prop_assert!(*r >= 1.0 && *r <= obs.len() as f64);
        }
    }

    #[test]
    fn normalized_confusion_rows_sum_to_one(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&t, &p, 4).unwrap();
        for (row, counts) in m.row_normalized_confusion().iter().zip(&m.confusion) {
            if counts.iter().sum::<u64>() > 0 {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let trace: u64 = (0..4).map(|c| m.confusion[c][c]).sum();
        prop_assert!((m.accuracy - trace as f64 / t.len() as f64).abs() < 1e-15);
    }
}
