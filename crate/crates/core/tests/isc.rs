mod common;

use attnsync::isc::{time_resolved_isc, window_isc, Cohort};
use attnsync::signal::{UniformSeries, WindowSpec};
use common::{naive_isc, random_cohort, rng};
use proptest::prelude::*;
use rand::Rng;

fn traces(subjects: &[UniformSeries]) -> Vec<Vec<f64>> {
    let named = subjects.iter().enumerate().map(|(i, s)| (format!("s{i}"), s.clone())).collect();
    time_resolved_isc(&Cohort::new("v", named).unwrap(), &WindowSpec::default())
        .unwrap()
        .into_iter()
        .map(|t| t.values)
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn matches_naive_pairwise_pearson() {
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let (m, w, c) = (r.gen_range(2..=6), r.gen_range(1..=120), r.gen_range(1..=8));
        let cohort = random_cohort(seed, m, w, c);
        let got = traces(&cohort);
        let want = naive_isc(&cohort, 40, 4);
        assert_eq!(got[0].len(), w);
        let d = max_diff(&got, &want);
        assert!(d < 1e-10, "seed {seed}: {m} subjects, {w} windows, {c} channels, diff {d:e}");
    }
}

#[test]
fn clamping_example() {
    // r12 = 1, r13 = -1, r23 = -1
    let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let isc = window_isc(&[&x, &x, &neg], 1).unwrap();
    assert_eq!(isc, vec![0.5, 0.5, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positive_affine_rescaling_changes_nothing(
        seed in any::<u64>(),
        m in 2usize..=5,
        c in 1usize..=4,
        gains in prop::collection::vec((0.01f64..100.0, -50.0f64..50.0), 20),
    ) {
        let cohort = random_cohort(seed, m, 6, c);
        let scaled: Vec<UniformSeries> = cohort
            .iter()
            .enumerate()
            .map(|(s, series)| {
                let mut out = series.clone();
                for (i, v) in out.values.iter_mut().enumerate() {
                    let (a, b) = gains[(s * c + i % c) % gains.len()];
                    *v = a * *v + b;
                }
                out
            })
            .collect();
        let d = max_diff(&traces(&cohort), &traces(&scaled));
        prop_assert!(d <= 1e-10, "diff {d:e}");
    }

    #[test]
    fn values_stay_in_unit_interval(seed in any::<u64>(), m in 2usize..=6, c in 1usize..=8) {
        for v in traces(&random_cohort(seed, m, 5, c)).iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn relabelling_subjects_permutes_traces(seed in any::<u64>(), m in 2usize..=5) {
        let cohort = random_cohort(seed, m, 4, 2);
        let mut rev = cohort.clone();
        rev.reverse();
        let mut back = traces(&rev);
        back.reverse();
        prop_assert!(max_diff(&traces(&cohort), &back) < 1e-12);
    }
}
