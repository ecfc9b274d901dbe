//! FLOP accounting, density statistics, sensitivity sweeps and throughput
//! benchmarks.
//!
//! FLOPs follow the multiply-accumulate convention: one MAC counts as one
//! FLOP. Token scoring and selection are not counted; they cost `O(H T^2)`
//! additions at a single layer, well under 0.1% of a forward pass.

use std::fmt::{self, Write as _};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::{Dataset, SizeClass};
use crate::model::{ModelConfig, Sparsify, VisionTransformer};
use crate::numerics::{no_grad, Rng, Scalar, Tensor};
use crate::sparsifier::{self, ExecMode, PruneConfig, Strategy};
use crate::trainer::{evaluate, strategy_label};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 1 FLOP";

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

/// Tokens processed by the attention and MLP halves of every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSchedule {
    pub attention: Vec<usize>,
    pub mlp: Vec<usize>,
}

impl TokenSchedule {
    pub fn dense(config: &ModelConfig) -> Self {
        Self::uniform(vec![config.tokens(); config.num_layers])
    }

    /// Both halves of layer `l` see `tokens[l]`.
    pub fn uniform(tokens: Vec<usize>) -> Self {
        TokenSchedule { attention: tokens.clone(), mlp: tokens }
    }

    /// Execution with pruning at `prune_layer`: every layer before it and the
    /// prune layer's attention run on all tokens; the prune layer's MLP and
    /// every later layer run on `kept` tokens.
    pub fn pruned(config: &ModelConfig, prune_layer: usize, kept: usize) -> Result<Self> {
        let (l, t) = (config.num_layers, config.tokens());
        if prune_layer >= l {
            return Err(Error::Config(format!("prune layer {prune_layer} must be below {l}")));
        }
        if kept == 0 || kept > t {
            return dim_err(format!("kept token count {kept} outside [1, {t}]"));
        }
        let attention = (0..l).map(|i| if i <= prune_layer { t } else { kept }).collect();
        let mlp = (0..l).map(|i| if i < prune_layer { t } else { kept }).collect();
        Ok(TokenSchedule { attention, mlp })
    }

    /// [`TokenSchedule::pruned`] with `kept = round_half_up(density * T)`,
    /// clamped to `[1, T]`.
    pub fn from_density(config: &ModelConfig, prune_layer: usize, density: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Config(format!("density {density} outside [0, 1]")));
        }
        Self::pruned(config, prune_layer, tokens_for_density(config, density))
    }
}

pub fn tokens_for_density(config: &ModelConfig, density: f64) -> usize {
    let t = config.tokens();
    ((density * t as f64 + 0.5).floor() as usize).clamp(1, t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub attention_tokens: usize,
    pub mlp_tokens: usize,
    pub attention: u64,
    pub mlp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub patch_embed: u64,
    pub layers: Vec<LayerFlops>,
    pub head: u64,
    pub total: u64,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Percentage saved relative to `baseline`.
    pub fn reduction_vs(&self, baseline: &FlopReport) -> f64 {
        100.0 * (1.0 - self.total as f64 / baseline.total as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,layer,tokens,flops\n");
        let _ = writeln!(s, "patch_embed,,,{}", self.patch_embed);
        for l in &self.layers {
            let _ = writeln!(s, "attention,{},{},{}", l.layer, l.attention_tokens, l.attention);
            let _ = writeln!(s, "mlp,{},{},{}", l.layer, l.mlp_tokens, l.mlp);
        }
        let _ = writeln!(s, "head,,,{}", self.head);
        let _ = writeln!(s, "total,,,{}", self.total);
        s
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FLOPs ({})", self.convention)?;
        writeln!(f, "{:<12} {:>6} {:>6} {:>16} {:>16}", "component", "T_att", "T_mlp", "attention", "mlp")?;
        writeln!(f, "{:<12} {:>6} {:>6} {:>16}", "patch_embed", "", "", self.patch_embed)?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<12} {:>6} {:>6} {:>16} {:>16}",
                format!("layer {}", l.layer),
                l.attention_tokens,
                l.mlp_tokens,
                l.attention,
                l.mlp
            )?;
        }
        writeln!(f, "{:<12} {:>6} {:>6} {:>16}", "head", "", "", self.head)?;
        write!(f, "total {} ({:.3} GFLOPs)", self.total, self.gflops())
    }
}

/// Attention `4 T d^2 + 2 T^2 d`, MLP `2 r T d^2`, patch embedding
/// `N (C p^2) d`, head `d * classes`.
pub fn flops(config: &ModelConfig, schedule: &TokenSchedule) -> Result<FlopReport> {
    config.validate()?;
    let (l, t) = (config.num_layers, config.tokens());
    if schedule.attention.len() != l || schedule.mlp.len() != l {
        return dim_err(format!(
            "token schedule covers {} / {} layers, model has {l}",
            schedule.attention.len(),
            schedule.mlp.len()
        ));
    }
    if let Some(&bad) = schedule.attention.iter().chain(&schedule.mlp).find(|&&n| n > t) {
        return dim_err(format!("schedule lists {bad} tokens, sequence has {t}"));
    }
    let d = config.embed_dim as u64;
    let r = config.mlp_ratio as u64;
    let layers: Vec<LayerFlops> = (0..l)
        .map(|i| {
            let (ta, tm) = (schedule.attention[i] as u64, schedule.mlp[i] as u64);
            LayerFlops {
                layer: i,
                attention_tokens: ta as usize,
                mlp_tokens: tm as usize,
                attention: 4 * ta * d * d + 2 * ta * ta * d,
                mlp: 2 * r * tm * d * d,
            }
        })
        .collect();
    let patch_embed = (config.num_patches() * config.patch_dim()) as u64 * d;
    let head = d * config.num_classes as u64;
    let total = patch_embed + head + layers.iter().map(|x| x.attention + x.mlp).sum::<u64>();
    Ok(FlopReport { convention: FLOP_CONVENTION.into(), patch_embed, layers, head, total })
}

/// Mean FLOPs over per-sample token counts after `prune_layer`, and FLOPs
/// at the averaged density.
pub fn sparse_flops(config: &ModelConfig, prune_layer: usize, densities: &[f64]) -> Result<(f64, u64)> {
    if densities.is_empty() {
        return Err(Error::Config("no densities to account".into()));
    }
    let t = config.tokens();
    let mut per_count = vec![None; t + 1];
    let mut sum = 0.0;
    for &dn in densities {
        let k = tokens_for_density(config, dn);
        let f = match per_count[k] {
            Some(f) => f,
            None => {
                let f = flops(config, &TokenSchedule::pruned(config, prune_layer, k)?)?.total;
                per_count[k] = Some(f);
                f
            }
        };
        sum += f as f64;
    }
    let mean = densities.iter().sum::<f64>() / densities.len() as f64;
    let at_mean = flops(config, &TokenSchedule::from_density(config, prune_layer, mean)?)?.total;
    Ok((sum / densities.len() as f64, at_mean))
}

// ---------------------------------------------------------------------------
// Density statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDensity {
    pub size_class: SizeClass,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub densities: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<HistBucket>,
    /// Per object-size means, when the dataset carries size metadata.
    pub by_size: Vec<ClassDensity>,
}

pub const HISTOGRAM_BUCKETS: usize = 10;

impl DensityStats {
    /// Summary of `densities` with equal-width buckets over `[0, 1]`; the
    /// last bucket is closed.
    pub fn from_densities(densities: Vec<f64>) -> Result<Self> {
        if densities.is_empty() {
            return Err(Error::Config("density statistics need at least one sample".into()));
        }
        if let Some(bad) = densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Config(format!("density {bad} outside [0, 1]")));
        }
        let n = densities.len() as f64;
        let mean = densities.iter().sum::<f64>() / n;
        let var = densities.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let min = densities.iter().copied().fold(f64::INFINITY, f64::min);
        let max = densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = 1.0 / HISTOGRAM_BUCKETS as f64;
        let mut histogram: Vec<HistBucket> =
            (0..HISTOGRAM_BUCKETS).map(|i| HistBucket { lo: i as f64 * w, hi: (i + 1) as f64 * w, count: 0 }).collect();
        for &d in &densities {
            let i = ((d / w).floor() as usize).min(HISTOGRAM_BUCKETS - 1);
            histogram[i].count += 1;
        }
        Ok(DensityStats {
            densities,
            mean: mean.clamp(min, max),
            std: var.sqrt(),
            min,
            max,
            histogram,
            by_size: Vec::new(),
        })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    pub fn size_mean(&self, class: SizeClass) -> Option<f64> {
        self.by_size.iter().find(|c| c.size_class == class).map(|c| c.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_lo,bucket_hi,count\n");
        for b in &self.histogram {
            let _ = writeln!(s, "{:.2},{:.2},{}", b.lo, b.hi, b.count);
        }
        s
    }
}

/// Densities chosen by `prune` for every sample of `data`. Only the layers
/// up to the prune layer's attention are evaluated.
pub fn density_stats<F: Scalar>(
    model: &VisionTransformer<F>,
    data: &Dataset,
    prune: &PruneConfig,
    batch: usize,
) -> Result<DensityStats> {
    if !prune.is_active() {
        return Err(Error::Config("density statistics need a value or mass strategy".into()));
    }
    prune.validate(model.config().num_layers)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut densities = Vec::with_capacity(data.len());
    no_grad(|| -> Result<()> {
        for chunk in all.chunks(batch.max(1)) {
            let images = data.batch::<F>(chunk, None)?;
            let prefix = model.forward_prefix(&images, prune.prune_layer, &[])?;
            densities.extend(sparsifier::plan(prefix.record(), prune)?.densities);
        }
        Ok(())
    })?;
    let mut stats = DensityStats::from_densities(densities)?;
    if let Some(meta) = &data.meta {
        for class in SizeClass::ALL {
            let v: Vec<f64> =
                meta.iter().zip(&stats.densities).filter(|(m, _)| m.size_class == class).map(|(_, &d)| d).collect();
            if !v.is_empty() {
                stats.by_size.push(ClassDensity {
                    size_class: class,
                    count: v.len(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                });
            }
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Sensitivity sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Thresholds are mass thresholds.
    Mass,
    /// Thresholds are keep ratios.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub prune_layer: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_density: f64,
    /// Mean over per-sample token schedules.
    pub flops: f64,
    /// At the averaged density.
    pub flops_at_mean: u64,
    #[serde(skip)]
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub prune_layers: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub dense_accuracy: f64,
    pub dense_flops: u64,
    /// Row-major over `prune_layers` x `thresholds`.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, prune_layer: usize, threshold: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.prune_layer == prune_layer && c.threshold == threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("prune_layer,threshold,accuracy,mean_density,flops,flops_at_mean_density\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.0},{}",
                c.prune_layer, c.threshold, c.accuracy, c.mean_density, c.flops, c.flops_at_mean
            );
        }
        s
    }

    /// Whether every sample's density is non-decreasing in the threshold at
    /// every prune layer.
    pub fn per_sample_monotone(&self) -> bool {
        let mut order: Vec<usize> = (0..self.thresholds.len()).collect();
        order.sort_by(|&a, &b| self.thresholds[a].total_cmp(&self.thresholds[b]));
        self.prune_layers.iter().all(|&p| {
            order.windows(2).all(|w| {
                let lo = self.cell(p, self.thresholds[w[0]]);
                let hi = self.cell(p, self.thresholds[w[1]]);
                match (lo, hi) {
                    (Some(lo), Some(hi)) => lo.densities.iter().zip(&hi.densities).all(|(a, b)| a <= b),
                    _ => false,
                }
            })
        })
    }

    /// Mean density against prune layer for every threshold, noting whether
    /// it decreases with depth.
    pub fn depth_report(&self) -> String {
        let mut s = String::from("mean density by prune layer\nthreshold");
        for p in &self.prune_layers {
            let _ = write!(s, " {:>7}", format!("P={p}"));
        }
        s.push_str("  non-increasing\n");
        for &th in &self.thresholds {
            let row: Vec<f64> =
                self.prune_layers.iter().filter_map(|&p| self.cell(p, th)).map(|c| c.mean_density).collect();
            let _ = write!(s, "{th:>9.2}");
            for d in &row {
                let _ = write!(s, " {d:>7.4}");
            }
            let mono = row.windows(2).all(|w| w[1] <= w[0] + 1e-12);
            let _ = writeln!(s, "  {}", if mono { "yes" } else { "no" });
        }
        s
    }
}

/// Evaluates every `(prune layer, threshold)` pair without retraining, using
/// compacted execution.
pub fn sensitivity_sweep<F: Scalar>(
    model: &VisionTransformer<F>,
    data: &Dataset,
    prune_layers: &[usize],
    thresholds: &[f64],
    kind: SweepKind,
    batch: usize,
) -> Result<SweepResult> {
    let config = model.config().clone();
    if prune_layers.is_empty() || thresholds.is_empty() {
        return Err(Error::Config("sweep needs at least one prune layer and one threshold".into()));
    }
    let mut policies = Vec::with_capacity(prune_layers.len() * thresholds.len());
    for &p in prune_layers {
        for &th in thresholds {
            let policy = match kind {
                SweepKind::Mass => PruneConfig::mass(th, p, ExecMode::Compacted),
                SweepKind::Value => PruneConfig::value(th, p, ExecMode::Compacted),
            };
            policy.validate(config.num_layers)?;
            policies.push(policy);
        }
    }
    let ev = evaluate(model, data, &policies, batch)?;
    let mut cells = Vec::with_capacity(policies.len());
    for (policy, point) in policies.iter().zip(ev.points) {
        let threshold = match policy.strategy {
            Strategy::Mass { threshold } => threshold,
            Strategy::Value { rho } => rho,
            Strategy::None => 1.0,
        };
        let (mean_flops, at_mean) = sparse_flops(&config, policy.prune_layer, &point.densities)?;
        cells.push(SweepCell {
            prune_layer: policy.prune_layer,
            threshold,
            accuracy: point.accuracy,
            mean_density: point.mean_density,
            flops: mean_flops,
            flops_at_mean: at_mean,
            densities: point.densities,
        });
    }
    Ok(SweepResult {
        kind,
        prune_layers: prune_layers.to_vec(),
        thresholds: thresholds.to_vec(),
        dense_accuracy: ev.dense_accuracy,
        dense_flops: flops(&config, &TokenSchedule::dense(&config))?.total,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Images per second of every timed run.
    pub runs: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

impl Throughput {
    fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = runs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            k if k % 2 == 1 => sorted[k / 2],
            k => 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]),
        };
        Throughput { runs, median, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub policy: String,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub dense: Throughput,
    pub masked: Throughput,
    pub compacted: Throughput,
}

impl BenchmarkReport {
    pub fn compacted_speedup(&self) -> f64 {
        self.compacted.median / self.dense.median
    }

    pub fn masked_speedup(&self) -> f64 {
        self.masked.median / self.dense.median
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "policy {} | batch {} | {} runs after {} warmup",
            self.policy, self.batch, self.repetitions, self.warmup
        )?;
        for (name, t) in [("dense", &self.dense), ("masked", &self.masked), ("compacted", &self.compacted)] {
            writeln!(
                f,
                "{name:<10} median {:>9.2} img/s  mean {:>9.2} +- {:.2}  ({:.2}x dense)",
                t.median,
                t.mean,
                t.std,
                t.median / self.dense.median
            )?;
        }
        Ok(())
    }
}

/// Forward-pass throughput of the dense, masked-sparse and compacted-sparse
/// paths on one random batch. Every path runs `warmup` untimed passes first.
pub fn benchmark<F: Scalar>(
    model: &VisionTransformer<F>,
    prune: &PruneConfig,
    batch: usize,
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchmarkReport> {
    if !prune.is_active() {
        return Err(Error::Config("benchmark needs a value or mass strategy".into()));
    }
    if batch == 0 || repetitions == 0 {
        return Err(Error::Config("benchmark needs a positive batch and repetition count".into()));
    }
    let c = model.config();
    prune.validate(c.num_layers)?;
    let mut rng = Rng::new(seed);
    let n = batch * c.channels * c.image_size * c.image_size;
    let images = Tensor::new(
        (0..n).map(|_| F::from_f64(rng.normal())).collect(),
        &[batch, c.channels, c.image_size, c.image_size],
    )?;
    let with_mode = |mode: ExecMode| PruneConfig { exec_mode: mode, ..*prune };
    let (masked_cfg, compacted_cfg) = (with_mode(ExecMode::Masked), with_mode(ExecMode::Compacted));
    no_grad(|| {
        let runs: [&dyn Fn() -> Result<()>; 3] = [
            &|| model.forward(&images, Sparsify::Off, &[]).map(drop),
            &|| model.forward(&images, Sparsify::Policy { config: &masked_cfg, apply: true }, &[]).map(drop),
            &|| model.forward(&images, Sparsify::Policy { config: &compacted_cfg, apply: true }, &[]).map(drop),
        ];
        for _ in 0..warmup {
            for run in &runs {
                run()?;
            }
        }
        // Modes are interleaved per repetition so slow phases of a shared
        // machine hit all three alike.
        let mut rates = [(); 3].map(|_| Vec::with_capacity(repetitions));
        for _ in 0..repetitions {
            for (run, out) in runs.iter().zip(rates.iter_mut()) {
                let t = Instant::now();
                run()?;
                out.push(batch as f64 / t.elapsed().as_secs_f64().max(1e-12));
            }
        }
        let [dense, masked, compacted] = rates.map(Throughput::from_runs);
        Ok(BenchmarkReport {
            policy: format!("{} at layer {}", strategy_label(&prune.strategy), prune.prune_layer),
            batch,
            repetitions,
            warmup,
            dense,
            masked,
            compacted,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form evaluation, written out independently of `flops`.
    #[allow(clippy::too_many_arguments)]
    fn closed_form(l: u64, d: u64, r: u64, n: u64, cp2: u64, classes: u64, att: &[u64], mlp: &[u64]) -> u64 {
        let mut total = n * cp2 * d + d * classes;
        for i in 0..l as usize {
            total += 4 * att[i] * d * d + 2 * att[i] * att[i] * d + 2 * r * mlp[i] * d * d;
        }
        total
    }

    #[test]
    fn deit_dense_and_literal_schedule() {
        let c = ModelConfig::deit_small();
        let dense = flops(&c, &TokenSchedule::dense(&c)).unwrap();
        assert_eq!(dense.total, closed_form(12, 384, 4, 196, 768, 1000, &[197; 12], &[197; 12]));
        assert!((dense.gflops() - 4.6).abs() / 4.6 < 0.02, "{}", dense.gflops());
        let mut t = vec![197usize; 3];
        t.extend([83; 9]);
        let lit = flops(&c, &TokenSchedule::uniform(t.clone())).unwrap();
        let t64: Vec<u64> = t.iter().map(|&x| x as u64).collect();
        assert_eq!(lit.total, closed_form(12, 384, 4, 196, 768, 1000, &t64, &t64));
        assert!((lit.gflops() - 2.56).abs() < 0.01);
    }

    #[test]
    fn pruned_schedule_counts_prune_layer_mlp_sparse() {
        let c = ModelConfig::deit_small();
        let s = TokenSchedule::from_density(&c, 3, 0.42).unwrap();
        assert_eq!(s.attention[3], 197);
        assert_eq!(s.mlp[3], 83);
        assert_eq!(s.attention[4], 83);
        let dense = flops(&c, &TokenSchedule::dense(&c)).unwrap();
        let r = flops(&c, &s).unwrap();
        assert!((r.reduction_vs(&dense) - 43.0).abs() <= 2.0, "{}", r.reduction_vs(&dense));
        assert_eq!(flops(&c, &TokenSchedule::from_density(&c, 3, 1.0).unwrap()).unwrap().total, dense.total);
    }

    #[test]
    fn components_sum() {
        let c = ModelConfig::toy();
        let r = flops(&c, &TokenSchedule::pruned(&c, 1, 30).unwrap()).unwrap();
        let sum: u64 = r.patch_embed + r.head + r.layers.iter().map(|l| l.attention + l.mlp).sum::<u64>();
        assert_eq!(sum, r.total);
        assert!(flops(&c, &TokenSchedule::uniform(vec![66; 4])).is_err());
        assert!(flops(&c, &TokenSchedule::uniform(vec![65; 3])).is_err());
        assert!(r.to_csv().lines().count() == 2 + 2 * 4 + 2);
    }

    #[test]
    fn histogram_mass() {
        let s = DensityStats::from_densities(vec![0.0, 0.05, 0.5, 1.0, 1.0]).unwrap();
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(s.histogram[0].count, 2);
        assert_eq!(s.histogram[9].count, 2);
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert!(DensityStats::from_densities(vec![]).is_err());
    }

    #[test]
    fn median_of_runs() {
        assert_eq!(Throughput::from_runs(vec![3.0, 1.0, 2.0]).median, 2.0);
        assert_eq!(Throughput::from_runs(vec![4.0, 1.0, 2.0, 3.0]).median, 2.5);
    }
}
