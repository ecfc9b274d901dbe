//! Token importance scoring and token selection.
//!
//! Scores are computed from the post-softmax attention probabilities of one
//! layer (`[H, T, T]` per sample, token 0 is CLS). Patch tokens are indexed
//! `0..N` in scores and selections; mask bit `1 + j` corresponds to patch `j`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::AttentionRecord;
use crate::numerics::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Normalised column sums over all heads and query rows.
    Tis,
    /// Per-head softmax of the column sums, averaged over heads.
    TisStar,
    /// Head-averaged CLS query row.
    ClsRow,
}

/// A probability distribution over the `N` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    scores: Vec<f64>,
    kind: ScoreKind,
}

const SCORE_EPS: f64 = 1e-6;

impl TokenScore {
    pub fn new(scores: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Distribution("empty token score".into()));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Distribution(format!("token score entry {v} is not a probability")));
        }
        let s: f64 = scores.iter().sum();
        if (s - 1.0).abs() > SCORE_EPS {
            return Err(Error::Distribution(format!("token scores sum to {s}")));
        }
        Ok(TokenScore { scores, kind })
    }

    fn normalized(weights: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Distribution(format!("token weights sum to {total}; cannot normalise")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect(), kind)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Keep/prune bits over the `N + 1` token positions. Bit 0 (CLS) is always set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn all(tokens: usize) -> Self {
        TokenMask { bits: vec![true; tokens.max(1)] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        match bits.first() {
            None => Err(Error::Contract("token mask has no positions".into())),
            Some(false) => Err(Error::Contract("token mask prunes the CLS token".into())),
            Some(true) => Ok(TokenMask { bits }),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of positions, `N + 1`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Kept tokens (CLS included) over all `N + 1` positions.
    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.bits.len() as f64
    }

    /// Kept token positions in increasing order (CLS first).
    pub fn kept_positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No pruning; every mask is all ones.
    None,
    /// Fixed count `K = round(rho * (N + 1))` of top-scoring patches.
    Value { rho: f64 },
    /// Smallest top-scoring set whose mass reaches `threshold`.
    Mass { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Full-size attention with pruned tokens masked out.
    Masked,
    /// Kept tokens gathered into shorter sequences.
    Compacted,
}

/// Which attention-derived score drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Tis,
    ClsRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: Strategy,
    pub prune_layer: usize,
    pub exec_mode: ExecMode,
    pub selector: Selector,
}

impl PruneConfig {
    pub fn none() -> Self {
        PruneConfig { strategy: Strategy::None, prune_layer: 0, exec_mode: ExecMode::Masked, selector: Selector::Tis }
    }

    pub fn mass(threshold: f64, prune_layer: usize, exec_mode: ExecMode) -> Self {
        PruneConfig { strategy: Strategy::Mass { threshold }, prune_layer, exec_mode, selector: Selector::Tis }
    }

    pub fn value(rho: f64, prune_layer: usize, exec_mode: ExecMode) -> Self {
        PruneConfig { strategy: Strategy::Value { rho }, prune_layer, exec_mode, selector: Selector::Tis }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.strategy, Strategy::None)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self.strategy {
            Strategy::None => {}
            Strategy::Value { rho } if !(0.0..=1.0).contains(&rho) => {
                return Err(Error::Config(format!("token density {rho} outside [0, 1]")));
            }
            Strategy::Mass { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                return Err(Error::Config(format!("mass threshold {threshold} outside (0, 1]")));
            }
            _ => {}
        }
        if self.is_active() && self.prune_layer >= num_layers {
            return Err(Error::Config(format!(
                "prune layer {} must be below the layer count {num_layers}",
                self.prune_layer
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Attention probabilities of one sample, `[heads, tokens, tokens]`.
#[derive(Debug, Clone, Copy)]
pub struct SampleAttention<'a, F: Scalar> {
    pub probs: &'a [F],
    pub heads: usize,
    pub tokens: usize,
}

impl<'a, F: Scalar> SampleAttention<'a, F> {
    pub fn new(probs: &'a [F], heads: usize, tokens: usize) -> Result<Self> {
        if tokens < 2 || heads == 0 || probs.len() != heads * tokens * tokens {
            return dim_err(format!(
                "attention of {} values does not match [{heads}, {tokens}, {tokens}] with at least one patch",
                probs.len()
            ));
        }
        Ok(SampleAttention { probs, heads, tokens })
    }

    #[inline]
    fn at(&self, h: usize, m: usize, n: usize) -> f64 {
        self.probs[(h * self.tokens + m) * self.tokens + n].as_f64()
    }

    /// `sums[h][n - 1] = sum_m probs[h, m, n]` over patch columns.
    fn column_sums(&self) -> Vec<Vec<f64>> {
        let t = self.tokens;
        (0..self.heads)
            .map(|h| {
                let mut acc = vec![0.0; t - 1];
                for m in 0..t {
                    let row = &self.probs[(h * t + m) * t..(h * t + m + 1) * t];
                    for (a, v) in acc.iter_mut().zip(&row[1..]) {
                        *a += v.as_f64();
                    }
                }
                acc
            })
            .collect()
    }
}

/// Token importance: column sums over every head and every query row
/// (CLS included), restricted to patch columns and normalised.
pub fn compute_tis<F: Scalar>(att: &SampleAttention<'_, F>) -> Result<TokenScore> {
    let mut w = vec![0.0; att.tokens - 1];
    for head in att.column_sums() {
        w.iter_mut().zip(head).for_each(|(a, v)| *a += v);
    }
    TokenScore::normalized(w, ScoreKind::Tis)
}

/// Per-head softmax of the patch column sums, averaged over heads.
pub fn compute_tis_star<F: Scalar>(att: &SampleAttention<'_, F>) -> Result<TokenScore> {
    let n = att.tokens - 1;
    let mut acc = vec![0.0; n];
    for head in att.column_sums() {
        let mx = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = head.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        acc.iter_mut().zip(e).for_each(|(a, v)| *a += v / z);
    }
    let h = att.heads as f64;
    TokenScore::normalized(acc.into_iter().map(|v| v / h).collect(), ScoreKind::TisStar)
}

/// Head-averaged CLS query row over patch columns, renormalised.
pub fn compute_cls_row<F: Scalar>(att: &SampleAttention<'_, F>) -> Result<TokenScore> {
    let mut w = vec![0.0; att.tokens - 1];
    for h in 0..att.heads {
        for (j, a) in w.iter_mut().enumerate() {
            *a += att.at(h, 0, j + 1);
        }
    }
    let h = att.heads as f64;
    TokenScore::normalized(w.into_iter().map(|v| v / h).collect(), ScoreKind::ClsRow)
}

/// Differentiable batched score used by the distillation loss:
/// probabilities `[B, H, T, T]` to `[B, N]`.
pub fn tis_star_tensor<F: Scalar>(probs: &Tensor<F>) -> Result<Tensor<F>> {
    let s = probs.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] < 2 {
        return dim_err(format!("attention probabilities must be [B,H,T,T], got {s:?}"));
    }
    let n = s[2] - 1;
    probs.sum_axis(2)?.narrow(2, 1, n)?.softmax(-1)?.mean_axis(1)
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Patch indices ordered by descending score, ties by lower index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// `K = round_half_up(rho * (N + 1))`, clamped to `[1, N]`.
pub fn value_keep_count(rho: f64, n: usize) -> usize {
    let k = (rho * (n as f64 + 1.0) + 0.5).floor();
    (k.max(1.0) as usize).min(n.max(1))
}

/// The `K` highest-scoring patches, returned in increasing index order.
pub fn select_value(score: &TokenScore, rho: f64) -> Vec<usize> {
    let k = value_keep_count(rho, score.len());
    let mut sel: Vec<usize> = ranked(score.scores()).into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

/// The shortest descending-score prefix whose mass reaches `threshold`,
/// returned in increasing index order. A threshold of 1 keeps every patch.
pub fn select_mass(score: &TokenScore, threshold: f64) -> Vec<usize> {
    let s = score.scores();
    if threshold >= 1.0 {
        return (0..s.len()).collect();
    }
    let order = ranked(s);
    let mut acc = 0.0;
    let mut take = order.len();
    for (i, &j) in order.iter().enumerate() {
        acc += s[j];
        if acc >= threshold {
            take = i + 1;
            break;
        }
    }
    let mut sel: Vec<usize> = order[..take.max(1)].to_vec();
    sel.sort_unstable();
    sel
}

/// Mask over `N + 1` positions keeping CLS and the selected patches.
pub fn build_mask(selected: &[usize], n: usize) -> Result<TokenMask> {
    if selected.is_empty() {
        return Err(Error::Contract("selection keeps no patch tokens".into()));
    }
    let mut bits = vec![false; n + 1];
    bits[0] = true;
    for &j in selected {
        if j >= n {
            return Err(Error::Index(format!("patch index {j} out of range for {n} patches")));
        }
        bits[j + 1] = true;
    }
    TokenMask::from_bits(bits)
}

// ---------------------------------------------------------------------------
// Compaction
// ---------------------------------------------------------------------------

/// Kept rows of `[B, T, D]` gathered into `[B, T', D]`, with the original
/// positions of every gathered row.
#[derive(Debug, Clone)]
pub struct Compacted<F: Scalar> {
    pub tokens: Tensor<F>,
    pub positions: Vec<Vec<usize>>,
    pub original_len: usize,
}

pub fn compact<F: Scalar>(x: &Tensor<F>, masks: &[TokenMask]) -> Result<Compacted<F>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != masks.len() {
        return dim_err(format!("compact needs [B,T,D] with B = {} masks, got {s:?}", masks.len()));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != s[1]) {
        return dim_err(format!("mask over {} positions for {} tokens", m.len(), s[1]));
    }
    let positions: Vec<Vec<usize>> = masks.iter().map(TokenMask::kept_positions).collect();
    let picks: Vec<(usize, Vec<usize>)> = positions.iter().cloned().enumerate().collect();
    Ok(Compacted { tokens: x.gather_tokens(&picks)?, positions, original_len: s[1] })
}

impl<F: Scalar> Compacted<F> {
    /// Scatter back to `[B, T, D]`, zeros at pruned positions.
    pub fn scatter(&self) -> Result<Tensor<F>> {
        let s = self.tokens.shape();
        let (b, tp, d) = (s[0], s[1], s[2]);
        let t = self.original_len;
        let src = self.tokens.data();
        let mut out = vec![F::zero(); b * t * d];
        for (bi, pos) in self.positions.iter().enumerate() {
            for (k, &p) in pos.iter().enumerate() {
                let from = (bi * tp + k) * d;
                out[(bi * t + p) * d..(bi * t + p + 1) * d].copy_from_slice(&src[from..from + d]);
            }
        }
        Tensor::new(out, &[b, t, d])
    }
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Plan {
    pub masks: Vec<TokenMask>,
    pub densities: Vec<f64>,
}

pub fn score_sample<F: Scalar>(att: &SampleAttention<'_, F>, selector: Selector) -> Result<TokenScore> {
    match selector {
        Selector::Tis => compute_tis(att),
        Selector::ClsRow => compute_cls_row(att),
    }
}

pub fn select(score: &TokenScore, strategy: Strategy) -> Result<TokenMask> {
    let n = score.len();
    match strategy {
        Strategy::None => Ok(TokenMask::all(n + 1)),
        Strategy::Value { rho } => build_mask(&select_value(score, rho), n),
        Strategy::Mass { threshold } => build_mask(&select_mass(score, threshold), n),
    }
}

/// Scores every sample of `record` and builds its mask.
pub fn plan<F: Scalar>(record: &AttentionRecord<F>, config: &PruneConfig) -> Result<Plan> {
    if config.is_active() && record.layer != config.prune_layer {
        return Err(Error::Contract(format!(
            "attention captured at layer {} but pruning is configured at layer {}",
            record.layer, config.prune_layer
        )));
    }
    let view = record.view();
    let mut masks = Vec::with_capacity(view.batch());
    for b in 0..view.batch() {
        let mask = if config.is_active() {
            select(&score_sample(&view.sample(b)?, config.selector)?, config.strategy)?
        } else {
            TokenMask::all(view.tokens())
        };
        masks.push(mask);
    }
    let densities = masks.iter().map(TokenMask::density).collect();
    Ok(Plan { masks, densities })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(v: &[f64]) -> TokenScore {
        TokenScore::new(v.to_vec(), ScoreKind::Tis).unwrap()
    }

    #[test]
    fn tis_uniform() {
        let p = vec![0.25f64; 16];
        let s = compute_tis(&SampleAttention::new(&p, 1, 4).unwrap()).unwrap();
        for v in s.scores() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tis_hand_value() {
        let p: Vec<f64> = [0.2, 0.5, 0.3].repeat(3);
        let s = compute_tis(&SampleAttention::new(&p, 1, 3).unwrap()).unwrap();
        assert!((s.scores()[0] - 0.625).abs() < 1e-15);
        assert!((s.scores()[1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn tis_star_closed_form() {
        let p: Vec<f64> = [0.2, 0.5, 0.3].repeat(3);
        let s = compute_tis_star(&SampleAttention::new(&p, 1, 3).unwrap()).unwrap();
        let e = (1.5f64).exp() / ((1.5f64).exp() + (0.9f64).exp());
        assert!((s.scores()[0] - e).abs() < 1e-15);
        assert!((s.scores()[0] - 0.6457).abs() < 1e-4);
        let u = vec![0.25f64; 16];
        let s = compute_tis_star(&SampleAttention::new(&u, 1, 4).unwrap()).unwrap();
        assert!(s.scores().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn cls_row_hand_value() {
        let p = vec![0.4, 0.36, 0.24, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4];
        let s = compute_cls_row(&SampleAttention::new(&p, 1, 3).unwrap()).unwrap();
        assert!((s.scores()[0] - 0.6).abs() < 1e-12);
        assert!((s.scores()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn cls_row_equals_tis_for_identical_rows() {
        let row = [0.1, 0.2, 0.3, 0.4];
        let p: Vec<f64> = row.repeat(8);
        let att = SampleAttention::new(&p, 2, 4).unwrap();
        let a = compute_tis(&att).unwrap();
        let b = compute_cls_row(&att).unwrap();
        for (x, y) in a.scores().iter().zip(b.scores()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn value_rule() {
        assert_eq!(value_keep_count(0.5, 196), 99);
        assert_eq!(value_keep_count(1.0, 196), 196);
        assert_eq!(value_keep_count(0.0, 196), 1);
        assert_eq!(value_keep_count(0.42, 196), 83);
        assert_eq!(select_value(&score(&[0.5, 0.2, 0.2, 0.1]), 0.4), vec![0, 1]);
    }

    #[test]
    fn mass_rule() {
        let s = score(&[0.5, 0.3, 0.2]);
        assert_eq!(select_mass(&s, 0.7), vec![0, 1]);
        assert_eq!(select_mass(&s, 0.5), vec![0]);
        assert_eq!(select_mass(&s, 1.0), vec![0, 1, 2]);
        let s = score(&[0.2, 0.5, 0.3]);
        assert_eq!(select_mass(&s, 0.75), vec![1, 2]);
    }

    #[test]
    fn mask_building() {
        let m = build_mask(&[1, 3], 4).unwrap();
        assert_eq!(m.bits(), &[true, false, true, false, true]);
        assert!(build_mask(&[0, 1, 2, 3], 4).unwrap().is_full());
        assert!(matches!(build_mask(&[], 4), Err(Error::Contract(_))));
        assert!(matches!(build_mask(&[4], 4), Err(Error::Index(_))));
        assert!(TokenMask::from_bits(vec![false, true]).is_err());
    }

    #[test]
    fn compact_and_scatter() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]).unwrap();
        let m = TokenMask::from_bits(vec![true, false, true]).unwrap();
        let c = compact(&x, std::slice::from_ref(&m)).unwrap();
        assert_eq!(c.tokens.to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.scatter().unwrap().to_vec(), vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        let all = compact(&x, &[TokenMask::all(3)]).unwrap();
        assert_eq!(all.tokens.to_vec(), x.to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::mass(0.0, 1, ExecMode::Masked).validate(4).is_err());
        assert!(PruneConfig::mass(0.7, 4, ExecMode::Masked).validate(4).is_err());
        assert!(PruneConfig::value(1.2, 1, ExecMode::Masked).validate(4).is_err());
        assert!(PruneConfig::value(0.5, 3, ExecMode::Masked).validate(4).is_ok());
    }
}
