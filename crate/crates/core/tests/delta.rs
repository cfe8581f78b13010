use deltaforge::delta::{dare_applicability, delta_stats, write_stats_csv, StatsOptions, Verdict};
use deltaforge::{
    apply_delta, compute_delta, DeltaMap, MismatchPolicy, Provenance, Tensor, TensorMap,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn single(name: &str, vals: Vec<f64>) -> DeltaMap {
    let mut tm = TensorMap::new();
    tm.insert(name, Tensor::from_f64(vec![vals.len()], vals).unwrap())
        .unwrap();
    DeltaMap::new(tm, Provenance::Raw)
}

/// Standard normal CDF by composite Simpson integration of the density from 0.
fn normal_cdf(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

fn normal_quantile(q: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn normal_sample_deciles_match_quantile_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vals: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let stats = delta_stats(&single("w", vals), StatsOptions::default()).unwrap();
    let d = &stats.global.deciles;
    assert!(
        (d[5] - normal_quantile(0.5)).abs() <= 0.02,
        "median {}",
        d[5]
    );
    let q90 = normal_quantile(0.9);
    assert!((q90 - 1.2816).abs() < 1e-3, "oracle {q90}");
    assert!((d[9] - q90).abs() <= 0.02, "90% decile {}", d[9]);
}

#[test]
fn integer_ramp_deciles_are_exact() {
    let stats = delta_stats(
        &single("w", (0..=10).map(f64::from).collect()),
        StatsOptions::default(),
    )
    .unwrap();
    assert_eq!(
        stats.global.deciles.to_vec(),
        (0..=10).map(f64::from).collect::<Vec<_>>()
    );
}

#[test]
fn table_fixtures_classify() {
    let math = single("w", vec![-0.0048, -0.001, 0.0, 0.002, 0.0047]);
    let coder = single("w", vec![-0.3, 0.01, 0.7246]);
    let opts = StatsOptions::default();
    let a = dare_applicability(&delta_stats(&math, opts).unwrap(), 0.005);
    let b = dare_applicability(&delta_stats(&coder, opts).unwrap(), 0.005);
    assert_eq!(a.verdict, Verdict::Applicable);
    assert_eq!(a.max_abs, 0.0048);
    assert_eq!(b.verdict, Verdict::Inapplicable);
    assert_eq!(b.max_abs, 0.7246);
    let edge = dare_applicability(
        &delta_stats(&single("w", vec![0.005]), opts).unwrap(),
        0.005,
    );
    assert_eq!(edge.verdict, Verdict::Inapplicable);
}

#[test]
fn sampled_stats_are_reproducible_and_order_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut a = TensorMap::new();
    let mut names = Vec::new();
    for i in 0..6 {
        let v: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0)).collect();
        names.push((format!("t{i}"), v));
    }
    for (n, v) in &names {
        a.insert(
            n.clone(),
            Tensor::from_f64(vec![v.len()], v.clone()).unwrap(),
        )
        .unwrap();
    }
    let mut b = TensorMap::new();
    for (n, v) in names.iter().rev() {
        b.insert(
            n.clone(),
            Tensor::from_f64(vec![v.len()], v.clone()).unwrap(),
        )
        .unwrap();
    }
    let opts = StatsOptions {
        sample_fraction: 0.1,
        seed: 9,
        bins: 10,
    };
    let sa = delta_stats(&DeltaMap::new(a.clone(), Provenance::Raw), opts).unwrap();
    let sb = delta_stats(&DeltaMap::new(b, Provenance::Raw), opts).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.global.count, 6 * 500);
    assert_eq!(
        sa,
        delta_stats(&DeltaMap::new(a, Provenance::Raw), opts).unwrap()
    );
}

#[test]
fn stats_csv_has_table_columns() {
    let stats = delta_stats(&single("w", vec![1.0, -2.0, 3.0]), StatsOptions::default()).unwrap();
    let mut out = Vec::new();
    write_stats_csv(&stats, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scope,count,min,d10,d20,d30,d40,d50,d60,d70,d80,d90,max,max_abs"
    );
    assert!(lines.next().unwrap().starts_with("w,3,-2,"));
    assert!(lines.next().unwrap().starts_with("GLOBAL,3,"));
}

#[test]
fn mismatch_policies() {
    let mut sft = TensorMap::new();
    sft.insert("a", Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    sft.insert("only_sft", Tensor::from_f32(vec![1], vec![1.0]).unwrap())
        .unwrap();
    let mut pre = TensorMap::new();
    pre.insert("a", Tensor::from_f32(vec![2], vec![0.5, 0.5]).unwrap())
        .unwrap();
    let err = compute_delta(&sft, &pre, MismatchPolicy::Error)
        .unwrap_err()
        .to_string();
    assert!(err.contains("only_sft"), "{err}");
    let (d, alignment) = compute_delta(&sft, &pre, MismatchPolicy::Skip).unwrap();
    assert_eq!(d.tensors().names().collect::<Vec<_>>(), ["a"]);
    assert_eq!(alignment.report.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn f32_round_trip_within_one_ulp(pairs in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 1..64)) {
        let (s, p): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let scale: Vec<f32> = s.iter().zip(&p).map(|(a, b)| a.abs().max(b.abs())).collect();
        let mut sft = TensorMap::new();
        sft.insert("w", Tensor::from_f32(vec![s.len()], s.clone()).unwrap()).unwrap();
        let mut pre = TensorMap::new();
        pre.insert("w", Tensor::from_f32(vec![p.len()], p).unwrap()).unwrap();
        let (d, _) = compute_delta(&sft, &pre, MismatchPolicy::Error).unwrap();
        let back = apply_delta(&pre, &d).unwrap();
        let got = back.get("w").unwrap().values::<f32>().into_owned();
        // one ulp at the magnitude of the larger operand
        for ((g, want), m) in got.iter().zip(&s).zip(&scale) {
            let ulp = (m * f32::EPSILON).max(f32::MIN_POSITIVE);
            prop_assert!((g - want).abs() <= ulp, "{} vs {}", g, want);
        }
    }

    #[test]
    fn f64_round_trip_exact_for_f32_inputs(pairs in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 1..64)) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let p: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let mut sft = TensorMap::new();
        sft.insert("w", Tensor::from_f64(vec![s.len()], s.clone()).unwrap()).unwrap();
        let mut pre = TensorMap::new();
        pre.insert("w", Tensor::from_f64(vec![p.len()], p).unwrap()).unwrap();
        let (d, _) = compute_delta(&sft, &pre, MismatchPolicy::Error).unwrap();
        let back = apply_delta(&pre, &d).unwrap();
        prop_assert_eq!(back.get("w").unwrap().to_f64_vec(), s);
    }

    #[test]
    fn deciles_are_monotone_and_bracket(vals in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let stats = delta_stats(&single("w", vals.clone()), StatsOptions::default()).unwrap();
        let d = stats.global.deciles;
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(vals.iter().all(|&v| d[0] <= v && v <= d[10]));
    }

    #[test]
    fn verdict_is_monotone(a in 0.0f64..0.01, b in 0.0f64..0.01, thr in 0.001f64..0.01) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s1 = delta_stats(&single("w", vec![lo]), StatsOptions::default()).unwrap();
        let s2 = delta_stats(&single("w", vec![-hi]), StatsOptions::default()).unwrap();
        if dare_applicability(&s2, thr).verdict == Verdict::Applicable {
            prop_assert_eq!(dare_applicability(&s1, thr).verdict, Verdict::Applicable);
        }
    }
}
