use proptest::prelude::*;

use vitprune::sparsifier::{
    build_mask, compute_tis, select, select_mass, select_value, value_keep_count, SampleAttention, ScoreKind,
    Strategy as Policy, TokenScore,
};

fn normalise(w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Positive weights, sometimes drawn from a handful of values to force ties.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(1e-3f64..1.0, 1..200).prop_map(normalise),
        prop::collection::vec(1u8..4, 1..60).prop_map(|v| normalise(v.into_iter().map(f64::from).collect())),
    ]
}

fn order(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    idx
}

fn mass_of(s: &[f64], sel: &[usize]) -> f64 {
    let mut v: Vec<f64> = sel.iter().map(|&j| s[j]).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn mass_is_minimal_top_prefix(s in scores(), th in 0.001f64..1.0) {
        let score = TokenScore::new(s.clone(), ScoreKind::Tis).unwrap();
        let sel = select_mass(&score, th);
        let rank = order(&s);
        let k = sel.len();
        let mut top: Vec<usize> = rank[..k].to_vec();
        top.sort_unstable();
        prop_assert_eq!(&sel, &top);
        prop_assert!(mass_of(&s, &sel) >= th || k == s.len());
        prop_assert!(mass_of(&s, &rank[..k - 1]) < th);
    }

    #[test]
    fn mass_selection_grows_with_threshold(s in scores(), a in 0.001f64..1.0, b in 0.001f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let score = TokenScore::new(s, ScoreKind::Tis).unwrap();
        let small = select_mass(&score, lo);
        let large = select_mass(&score, hi);
        prop_assert!(small.len() <= large.len());
        prop_assert!(small.iter().all(|j| large.contains(j)));
        let full = select_mass(&score, 1.0);
        prop_assert_eq!(full.len(), score.len());
    }

    #[test]
    fn value_count_and_ties(s in scores(), rho in 0.0f64..=1.0) {
        let n = s.len();
        let score = TokenScore::new(s.clone(), ScoreKind::Tis).unwrap();
        let k = ((rho * (n as f64 + 1.0)).round() as usize).clamp(1, n);
        prop_assert_eq!(value_keep_count(rho, n), k);
        let sel = select_value(&score, rho);
        let mut want = order(&s)[..k].to_vec();
        want.sort_unstable();
        prop_assert_eq!(sel, want);
    }

    #[test]
    fn masks_keep_cls_and_report_density(s in scores(), th in 0.01f64..1.0) {
        let n = s.len();
        let score = TokenScore::new(s, ScoreKind::Tis).unwrap();
        let mask = select(&score, Policy::Mass { threshold: th }).unwrap();
        prop_assert!(mask.bits()[0]);
        prop_assert_eq!(mask.len(), n + 1);
        prop_assert!((mask.density() - mask.kept() as f64 / (n + 1) as f64).abs() < 1e-15);
        prop_assert_eq!(mask.kept(), select_mass(&score, th).len() + 1);
    }

    #[test]
    fn tis_is_a_distribution(heads in 1usize..4, tokens in 2usize..12, seed in any::<u64>()) {
        let mut x = seed | 1;
        let mut probs = Vec::with_capacity(heads * tokens * tokens);
        for _ in 0..heads * tokens {
            let row: Vec<f64> = (0..tokens)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    (x % 1000) as f64 + 1.0
                })
                .collect();
            probs.extend(normalise(row));
        }
        let att = SampleAttention::new(&probs, heads, tokens).unwrap();
        let tis = compute_tis(&att).unwrap();
        prop_assert_eq!(tis.len(), tokens - 1);
        prop_assert!((tis.scores().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(tis.scores().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn ties_prefer_lower_index() {
    let s = TokenScore::new(vec![0.25; 4], ScoreKind::Tis).unwrap();
    assert_eq!(select_value(&s, 0.4), vec![0, 1]);
    assert_eq!(select_mass(&s, 0.5), vec![0, 1]);
    assert_eq!(select_mass(&s, 0.51), vec![0, 1, 2]);
}

#[test]
fn value_rounding_half_up() {
    // 0.5 * (3 + 1) = 2 exactly; 0.375 * 4 = 1.5 rounds up to 2.
    assert_eq!(value_keep_count(0.5, 3), 2);
    assert_eq!(value_keep_count(0.375, 3), 2);
    assert_eq!(value_keep_count(0.0, 3), 1);
    assert_eq!(value_keep_count(1.0, 3), 3);
    // DeiT-S geometry at 0.42 keeps 83 patches plus CLS.
    assert_eq!(value_keep_count(0.42, 196), 83);
}

#[test]
fn empty_selection_is_rejected() {
    assert!(build_mask(&[], 4).is_err());
    assert!(build_mask(&[4], 4).is_err());
}
