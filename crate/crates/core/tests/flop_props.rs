use proptest::prelude::*;

use vitprune::analysis::{flops, sparse_flops, tokens_for_density, TokenSchedule};
use vitprune::model::ModelConfig;

/// Independent closed form: per layer `4 T d^2 + 2 T^2 d` attention and
/// `2 r T d^2` MLP, plus patch embedding and head.
fn oracle(cfg: &ModelConfig, att: &[usize], mlp: &[usize]) -> u64 {
    let d = cfg.embed_dim as u64;
    let r = cfg.mlp_ratio as u64;
    let n = cfg.num_patches() as u64;
    let pd = (cfg.channels * cfg.patch_size * cfg.patch_size) as u64;
    let mut total = n * pd * d + d * cfg.num_classes as u64;
    for (&ta, &tm) in att.iter().zip(mlp) {
        let (ta, tm) = (ta as u64, tm as u64);
        total += 4 * ta * d * d + 2 * ta * ta * d + 2 * r * tm * d * d;
    }
    total
}

#[test]
fn deit_dense_is_4_6_gflops() {
    let cfg = ModelConfig::deit_small();
    let r = flops(&cfg, &TokenSchedule::dense(&cfg)).unwrap();
    assert_eq!(r.total, oracle(&cfg, &[197; 12], &[197; 12]));
    assert!((r.gflops() - 4.6).abs() / 4.6 < 0.02, "{}", r.gflops());
}

#[test]
fn literal_three_dense_nine_sparse_schedule() {
    let cfg = ModelConfig::deit_small();
    let mut t = vec![197; 3];
    t.extend([83; 9]);
    let r = flops(&cfg, &TokenSchedule::uniform(t.clone())).unwrap();
    assert_eq!(r.total, oracle(&cfg, &t, &t));
    assert!((r.total as f64 - 2.56e9).abs() / 2.56e9 < 0.01, "{}", r.total);
    let dense = flops(&cfg, &TokenSchedule::dense(&cfg)).unwrap();
    assert!((r.reduction_vs(&dense) - 43.0).abs() <= 2.0);
}

#[test]
fn pruned_schedule_runs_prune_layer_attention_dense() {
    let cfg = ModelConfig::deit_small();
    assert_eq!(tokens_for_density(&cfg, 0.42), 83);
    let s = TokenSchedule::from_density(&cfg, 3, 0.42).unwrap();
    let mut att = vec![197; 4];
    att.extend([83; 8]);
    let mut mlp = vec![197; 3];
    mlp.extend([83; 9]);
    let r = flops(&cfg, &s).unwrap();
    assert_eq!(r.total, oracle(&cfg, &att, &mlp));
    let dense = flops(&cfg, &TokenSchedule::dense(&cfg)).unwrap();
    assert!((r.gflops() - 2.6).abs() / 2.6 < 0.04);
    assert!((r.reduction_vs(&dense) - 43.0).abs() <= 2.0);
}

#[test]
fn full_density_matches_dense() {
    let cfg = ModelConfig::toy();
    let dense = flops(&cfg, &TokenSchedule::dense(&cfg)).unwrap();
    let full = flops(&cfg, &TokenSchedule::from_density(&cfg, 1, 1.0).unwrap()).unwrap();
    assert_eq!(dense.total, full.total);
    let (mean, at_mean) = sparse_flops(&cfg, 1, &[1.0, 1.0]).unwrap();
    assert_eq!(mean, dense.total as f64);
    assert_eq!(at_mean, dense.total);
}

#[test]
fn too_many_tokens_rejected() {
    let cfg = ModelConfig::toy();
    assert!(flops(&cfg, &TokenSchedule::uniform(vec![66; 4])).is_err());
    assert!(flops(&cfg, &TokenSchedule::uniform(vec![65; 3])).is_err());
}

proptest! {
    #[test]
    fn matches_oracle(t in prop::collection::vec(1usize..=65, 4)) {
        let cfg = ModelConfig::toy();
        let r = flops(&cfg, &TokenSchedule::uniform(t.clone())).unwrap();
        prop_assert_eq!(r.total, oracle(&cfg, &t, &t));
        let parts: u64 = r.patch_embed + r.head + r.layers.iter().map(|l| l.attention + l.mlp).sum::<u64>();
        prop_assert_eq!(parts, r.total);
    }

    #[test]
    fn monotone_in_density(p in 0usize..4, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let cfg = ModelConfig::toy();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let f = |d| flops(&cfg, &TokenSchedule::from_density(&cfg, p, d).unwrap()).unwrap().total;
        prop_assert!(f(lo) <= f(hi));
    }

    #[test]
    fn later_pruning_costs_more(d in 0.05f64..1.0) {
        let cfg = ModelConfig::deit_small();
        let totals: Vec<u64> = (0..12)
            .map(|p| flops(&cfg, &TokenSchedule::from_density(&cfg, p, d).unwrap()).unwrap().total)
            .collect();
        prop_assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    }
}
