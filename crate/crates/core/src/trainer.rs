//! Dense/sparse alternating training with token distillation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::Dataset;
use crate::model::{AttentionRecord, Sparsify, VisionTransformer};
use crate::numerics::{no_grad, AdamW, AdamWConfig, Rng, Scalar, Tensor};
use crate::sparsifier::{compute_cls_row, ExecMode, PruneConfig, Strategy, TokenScore};

const EPOCH_STREAM: u64 = 1 << 32;
const REG_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EpochMode {
    Dense,
    Sparse,
}

/// Mode of 1-based epoch `epoch`: even epochs are dense, odd epochs sparse;
/// `dense_first` swaps the two.
pub fn epoch_mode(epoch: usize, dense_first: bool) -> EpochMode {
    if epoch.is_multiple_of(2) != dense_first {
        EpochMode::Dense
    } else {
        EpochMode::Sparse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    /// Weight of the distillation term.
    pub beta: f64,
    pub prune: PruneConfig,
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub dense_first: bool,
    /// Random horizontal flips.
    pub flip: bool,
    pub eval_batch: usize,
    /// Skip evaluation on epochs not divisible by this (the last epoch is
    /// always evaluated). Zero disables evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 3,
            optimizer: AdamWConfig::default(),
            beta: 4.0,
            prune: PruneConfig::mass(0.7, 1, ExecMode::Masked),
            teacher: None,
            seed: 0,
            dense_first: false,
            flip: true,
            eval_batch: 250,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Plain dense training without pruning or distillation.
    pub fn dense(epochs: usize, seed: u64) -> Self {
        TrainConfig { epochs, seed, beta: 0.0, prune: PruneConfig::none(), ..Default::default() }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("distillation ratio {} must be non-negative", self.beta)));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!("learning rates lr={} min_lr={} are invalid", self.lr, self.min_lr)));
        }
        self.prune.validate(num_layers)
    }

    /// Learning rate at optimizer step `step` (0-based): linear warmup then
    /// cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let total = (self.epochs * steps_per_epoch).max(1);
        let warm = (self.warmup_epochs * steps_per_epoch).min(total);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let t = ((step - warm) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: EpochMode,
    pub lr: f64,
    pub label_loss: f64,
    pub distill_loss: f64,
    /// Mean training density of the selector's masks (computed every batch,
    /// applied only in sparse epochs).
    pub density: f64,
    pub dense_acc: Option<f64>,
    pub sparse_acc: Option<f64>,
    pub sparse_density: Option<f64>,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Head-averaged last-layer CLS attention of `teacher` for every image.
pub fn teacher_target<F: Scalar>(teacher: &VisionTransformer<F>, images: &Tensor<F>) -> Result<Vec<TokenScore>> {
    let last = teacher.config().num_layers - 1;
    no_grad(|| {
        let out = teacher.forward(images, Sparsify::Off, &[last])?;
        let rec = out.record(last).expect("captured");
        let view = rec.view();
        (0..view.batch()).map(|b| compute_cls_row(&view.sample(b)?)).collect()
    })
}

fn score_matrix<F: Scalar>(targets: &[TokenScore]) -> Result<Tensor<F>> {
    let n = targets.first().map_or(0, TokenScore::len);
    if targets.iter().any(|t| t.len() != n) {
        return dim_err("teacher targets differ in length");
    }
    let data = targets.iter().flat_map(|t| t.scores().iter().map(|&v| F::from_f64(v))).collect();
    Tensor::new(data, &[targets.len(), n])
}

/// `KL(TIS* || target)` averaged over the batch; `target` is `[B, N]`.
pub fn distill_loss_tensor<F: Scalar>(record: &AttentionRecord<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
    let student = crate::sparsifier::tis_star_tensor(&record.probs)?;
    if student.shape() != target.shape() {
        return dim_err(format!(
            "student scores {:?} and teacher targets {:?} differ",
            student.shape(),
            target.shape()
        ));
    }
    student.kl_divergence(target)
}

pub fn distill_loss<F: Scalar>(record: &AttentionRecord<F>, targets: &[TokenScore]) -> Result<Tensor<F>> {
    distill_loss_tensor(record, &score_matrix(targets)?)
}

/// `label + beta * distill`.
pub fn total_loss<F: Scalar>(label: &Tensor<F>, distill: &Tensor<F>, beta: f64) -> Result<Tensor<F>> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("distillation ratio {beta} must be non-negative")));
    }
    if beta == 0.0 {
        return Ok(label.clone());
    }
    label.add(&distill.scale(beta))
}

#[derive(Debug, Clone)]
pub struct BatchLoss<F: Scalar> {
    pub total: Tensor<F>,
    pub label: f64,
    pub distill: f64,
    pub densities: Vec<f64>,
}

/// Forward pass and loss for one training batch. The selector runs in both
/// modes; its masks are applied only when `mode` is sparse.
pub fn batch_loss<F: Scalar>(
    model: &VisionTransformer<F>,
    images: &Tensor<F>,
    labels: &[usize],
    targets: Option<&Tensor<F>>,
    prune: &PruneConfig,
    mode: EpochMode,
    beta: f64,
) -> Result<BatchLoss<F>> {
    let needs_record = beta > 0.0;
    if needs_record && targets.is_none() {
        return Err(Error::Config("distillation requires teacher targets".into()));
    }
    let out = if prune.is_active() || needs_record {
        let mut policy = *prune;
        policy.exec_mode = ExecMode::Masked;
        model.forward(images, Sparsify::Policy { config: &policy, apply: mode == EpochMode::Sparse }, &[])?
    } else {
        model.forward(images, Sparsify::Off, &[])?
    };
    let label = out.logits.cross_entropy(labels)?;
    let (distill, dv) = match targets.filter(|_| needs_record) {
        Some(t) => {
            let rec = out.record(prune.prune_layer).expect("prune layer is always recorded");
            let d = distill_loss_tensor(rec, t)?;
            let v = d.item().as_f64();
            (d, v)
        }
        None => (Tensor::scalar(F::zero()), 0.0),
    };
    let total = total_loss(&label, &distill, if needs_record { beta } else { 0.0 })?;
    Ok(BatchLoss { label: label.item().as_f64(), distill: dv, total, densities: out.densities() })
}

// ---------------------------------------------------------------------------
// Teacher targets
// ---------------------------------------------------------------------------

/// Teacher targets for every training image (and its mirror image when
/// flips are enabled), computed once up front.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    n: usize,
    plain: Vec<f64>,
    flipped: Option<Vec<f64>>,
}

impl TeacherTargets {
    pub fn compute<F: Scalar>(
        teacher: &VisionTransformer<F>,
        student: &crate::model::ModelConfig,
        data: &Dataset,
        flips: bool,
        batch: usize,
    ) -> Result<Self> {
        let n = teacher.config().num_patches();
        if n != student.num_patches() {
            return Err(Error::Config(format!("teacher has {n} patch tokens, student has {}", student.num_patches())));
        }
        let run = |flip: bool| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(data.len() * n);
            let all: Vec<usize> = (0..data.len()).collect();
            for chunk in all.chunks(batch.max(1)) {
                let f = vec![flip; chunk.len()];
                let images = data.batch::<F>(chunk, Some(&f))?;
                for t in teacher_target(teacher, &images)? {
                    out.extend_from_slice(t.scores());
                }
            }
            Ok(out)
        };
        let plain = run(false)?;
        let flipped = if flips { Some(run(true)?) } else { None };
        Ok(TeacherTargets { n, plain, flipped })
    }

    pub fn num_patches(&self) -> usize {
        self.n
    }

    pub fn target(&self, index: usize, flip: bool) -> &[f64] {
        let src = match (&self.flipped, flip) {
            (Some(f), true) => f,
            _ => &self.plain,
        };
        &src[index * self.n..(index + 1) * self.n]
    }

    pub fn batch<F: Scalar>(&self, idx: &[usize], flips: Option<&[bool]>) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(idx.len() * self.n);
        for (k, &i) in idx.iter().enumerate() {
            let flip = flips.is_some_and(|f| f[k]);
            data.extend(self.target(i, flip).iter().map(|&v| F::from_f64(v)));
        }
        Tensor::new(data, &[idx.len(), self.n])
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub prune: PruneConfig,
    pub accuracy: f64,
    pub mean_density: f64,
    pub densities: Vec<f64>,
    /// Per-sample correctness.
    #[serde(skip)]
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dense_accuracy: f64,
    pub points: Vec<EvalPoint>,
}

fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Dense accuracy plus accuracy and density under every listed policy.
/// Layers up to each prune layer's attention are shared between the
/// policies using that layer.
pub fn evaluate<F: Scalar>(
    model: &VisionTransformer<F>,
    data: &Dataset,
    policies: &[PruneConfig],
    batch: usize,
) -> Result<Evaluation> {
    let num_layers = model.config().num_layers;
    for p in policies {
        p.validate(num_layers)?;
    }
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in policies.iter().enumerate() {
        by_layer.entry(if p.is_active() { p.prune_layer } else { num_layers - 1 }).or_default().push(i);
    }
    let dense_layer = *by_layer.keys().next().unwrap_or(&(num_layers - 1));
    let mut dense_correct = Vec::with_capacity(data.len());
    let mut correct = vec![Vec::with_capacity(data.len()); policies.len()];
    let mut densities = vec![Vec::with_capacity(data.len()); policies.len()];
    let all: Vec<usize> = (0..data.len()).collect();
    no_grad(|| -> Result<()> {
        for chunk in all.chunks(batch.max(1)) {
            let images = data.batch::<F>(chunk, None)?;
            let labels = data.labels_of(chunk);
            let mut layers: Vec<usize> = by_layer.keys().copied().collect();
            if layers.is_empty() {
                layers.push(dense_layer);
            }
            for layer in layers {
                let prefix = model.forward_prefix(&images, layer, &[])?;
                if layer == dense_layer {
                    let (logits, _) = model.forward_suffix(&prefix.hidden, layer, None, ExecMode::Masked, &[])?;
                    dense_correct.extend(argmax_rows(&logits).iter().zip(&labels).map(|(p, l)| p == l));
                }
                for &i in by_layer.get(&layer).map(Vec::as_slice).unwrap_or(&[]) {
                    let p = &policies[i];
                    let plan = crate::sparsifier::plan(prefix.record(), p)?;
                    let masks = p.is_active().then_some(plan.masks.as_slice());
                    let (logits, _) = model.forward_suffix(&prefix.hidden, layer, masks, p.exec_mode, &[])?;
                    correct[i].extend(argmax_rows(&logits).iter().zip(&labels).map(|(a, l)| a == l));
                    densities[i].extend(plan.densities);
                }
            }
        }
        Ok(())
    })?;
    let acc = |c: &[bool]| if c.is_empty() { 0.0 } else { c.iter().filter(|&&x| x).count() as f64 / c.len() as f64 };
    let mean = |d: &[f64]| if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
    let points = policies
        .iter()
        .zip(correct)
        .zip(densities)
        .map(|((p, c), d)| EvalPoint { prune: *p, accuracy: acc(&c), mean_density: mean(&d), densities: d, correct: c })
        .collect();
    Ok(Evaluation { dense_accuracy: acc(&dense_correct), points })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer<'a, F: Scalar> {
    pub model: VisionTransformer<F>,
    pub config: TrainConfig,
    pub optimizer: AdamW<F>,
    pub logs: Vec<EpochLog>,
    teacher: Option<TeacherTargets>,
    train: &'a Dataset,
    eval: Option<&'a Dataset>,
    /// Completed epochs.
    epoch: usize,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(
        model: VisionTransformer<F>,
        config: TrainConfig,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        teacher: Option<TeacherTargets>,
    ) -> Result<Self> {
        config.validate(model.config().num_layers)?;
        let mc = model.config();
        if train.channels != mc.channels || train.image_size != mc.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                train.channels, train.image_size, train.image_size, mc.channels, mc.image_size, mc.image_size
            )));
        }
        if let Some(&bad) = train.labels.iter().find(|&&l| l as usize >= mc.num_classes) {
            return Err(Error::Config(format!("label {bad} exceeds the model's {} classes", mc.num_classes)));
        }
        if config.beta > 0.0 {
            match &teacher {
                None => return Err(Error::Config("distillation ratio > 0 needs a teacher".into())),
                Some(t) if t.num_patches() != mc.num_patches() => {
                    return Err(Error::Config("teacher and student patch grids differ".into()))
                }
                _ => {}
            }
        }
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.tensor.numel()).collect();
        let optimizer = AdamW::new(config.optimizer, &sizes);
        Ok(Trainer { model, config, optimizer, logs: Vec::new(), teacher, train, eval, epoch: 0 })
    }

    /// Restores model, optimizer, epoch counter and logs from a checkpoint
    /// written by [`Trainer::checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint<F>) -> Result<()> {
        if &ck.config != self.model.config() {
            return Err(Error::Incompatible("checkpoint model config differs from the run".into()));
        }
        self.model.load_parameters(&ck.params)?;
        self.optimizer =
            ck.optimizer.clone().ok_or_else(|| Error::Incompatible("checkpoint has no optimizer state".into()))?;
        self.epoch = ck.epoch;
        self.logs = match ck.extra.get("logs") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Vec::new(),
        };
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<F>> {
        Ok(Checkpoint {
            config: self.model.config().clone(),
            params: self.model.export_parameters(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            seed: self.config.seed,
            rng: Some(Rng::new(self.config.seed).fork(EPOCH_STREAM + self.epoch as u64 + 1).state()),
            extra: serde_json::json!({ "train_config": self.config, "logs": self.logs }),
        })
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    /// Policy used for evaluation during training: the training selector in
    /// compacted execution.
    pub fn eval_policy(&self) -> PruneConfig {
        PruneConfig { exec_mode: ExecMode::Compacted, ..self.config.prune }
    }

    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let cfg = &self.config;
        let mode = if cfg.prune.is_active() { epoch_mode(epoch, cfg.dense_first) } else { EpochMode::Dense };
        let mut rng = Rng::new(cfg.seed).fork(EPOCH_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        rng.shuffle(&mut order);
        self.model.set_regularization(Some(Rng::new(cfg.seed).fork(REG_STREAM + epoch as u64)));
        let spe = self.steps_per_epoch();
        let mut step = (epoch - 1) * spe;
        let (mut label_sum, mut distill_sum, mut dens_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = cfg.lr;
        let result = (|| -> Result<()> {
            for chunk in order.chunks(cfg.batch_size) {
                let flips: Option<Vec<bool>> = cfg.flip.then(|| chunk.iter().map(|_| rng.uniform() < 0.5).collect());
                let images = self.train.batch::<F>(chunk, flips.as_deref())?;
                let labels = self.train.labels_of(chunk);
                let targets = match (&self.teacher, cfg.beta > 0.0) {
                    (Some(t), true) => Some(t.batch::<F>(chunk, flips.as_deref())?),
                    _ => None,
                };
                lr = cfg.lr_at(step, spe);
                let loss = batch_loss(&self.model, &images, &labels, targets.as_ref(), &cfg.prune, mode, cfg.beta)?;
                loss.total.check_finite("training loss")?;
                self.model.zero_grad();
                loss.total.backward()?;
                let params = self.model.parameters();
                let pairs: Vec<(&Tensor<F>, bool)> = params.iter().map(|p| (p.tensor, p.decay)).collect();
                self.optimizer.step(&pairs, lr)?;
                let b = chunk.len();
                label_sum += loss.label * b as f64;
                distill_sum += loss.distill * b as f64;
                dens_sum += loss.densities.iter().sum::<f64>();
                seen += b;
                step += 1;
            }
            Ok(())
        })();
        self.model.set_regularization(None);
        self.model.zero_grad();
        result?;
        let (mut dense_acc, mut sparse_acc, mut sparse_density) = (None, None, None);
        let evaluate_now = cfg.eval_every > 0 && (epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.epochs);
        if let (Some(eval), true) = (self.eval, evaluate_now) {
            let policies: Vec<PruneConfig> = if cfg.prune.is_active() { vec![self.eval_policy()] } else { vec![] };
            let ev = evaluate(&self.model, eval, &policies, cfg.eval_batch)?;
            dense_acc = Some(ev.dense_accuracy);
            if let Some(p) = ev.points.first() {
                sparse_acc = Some(p.accuracy);
                sparse_density = Some(p.mean_density);
            }
        }
        let log = EpochLog {
            epoch,
            mode,
            lr,
            label_loss: label_sum / seen.max(1) as f64,
            distill_loss: distill_sum / seen.max(1) as f64,
            density: dens_sum / seen.max(1) as f64,
            dense_acc,
            sparse_acc,
            sparse_density,
        };
        if let Some(prev) = self.logs.last() {
            if (self.config.prune.is_active() && prev.mode == log.mode) || prev.epoch + 1 != log.epoch {
                return Err(Error::Contract(format!(
                    "epoch {} ran {:?} after epoch {} ran {:?}",
                    log.epoch, log.mode, prev.epoch, prev.mode
                )));
            }
        }
        self.epoch = epoch;
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.train_epoch()?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }
}

/// Whether `logs` alternate strictly between modes starting from the
/// configured parity.
pub fn alternates(logs: &[EpochLog], dense_first: bool) -> bool {
    logs.iter().enumerate().all(|(i, l)| l.epoch == i + 1 && l.mode == epoch_mode(l.epoch, dense_first))
}

/// Value-selector policies for a density grid.
pub fn density_grid(rhos: &[f64], prune_layer: usize, mode: ExecMode) -> Vec<PruneConfig> {
    rhos.iter().map(|&rho| PruneConfig::value(rho, prune_layer, mode)).collect()
}

/// Mass-selector policies for a threshold grid.
pub fn mass_grid(thresholds: &[f64], prune_layer: usize, mode: ExecMode) -> Vec<PruneConfig> {
    thresholds.iter().map(|&m| PruneConfig::mass(m, prune_layer, mode)).collect()
}

pub fn strategy_label(s: &Strategy) -> String {
    match s {
        Strategy::None => "none".into(),
        Strategy::Value { rho } => format!("value:{rho}"),
        Strategy::Mass { threshold } => format!("mass:{threshold}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn parity() {
        let modes: Vec<_> = (1..=4).map(|e| epoch_mode(e, false)).collect();
        assert_eq!(modes, vec![EpochMode::Sparse, EpochMode::Dense, EpochMode::Sparse, EpochMode::Dense]);
        assert_eq!(epoch_mode(1, true), EpochMode::Dense);
    }

    #[test]
    fn total_loss_arithmetic() {
        let l = Tensor::<f64>::scalar(2.0);
        let d = Tensor::<f64>::scalar(0.25);
        assert_eq!(total_loss(&l, &d, 4.0).unwrap().item(), 3.0);
        assert_eq!(total_loss(&l, &d, 0.0).unwrap().item(), 2.0);
        assert!(total_loss(&l, &d, -1.0).is_err());
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { epochs: 10, warmup_epochs: 2, lr: 1e-3, min_lr: 1e-5, ..Default::default() };
        assert!((c.lr_at(0, 10) - 5e-5).abs() < 1e-12);
        assert!((c.lr_at(19, 10) - 1e-3).abs() < 1e-12);
        assert!((c.lr_at(20, 10) - 1e-3).abs() < 1e-12);
        assert!(c.lr_at(99, 10) < 2e-5);
    }

    #[test]
    fn distill_zero_for_matching_target() {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            ..ModelConfig::toy()
        };
        let m = VisionTransformer::<f64>::new(cfg, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let out = m.forward(&x, Sparsify::Off, &[0]).unwrap();
        let rec = out.record(0).unwrap();
        let target = crate::sparsifier::tis_star_tensor(&rec.probs).unwrap().detach();
        assert_eq!(distill_loss_tensor(rec, &target).unwrap().item(), 0.0);
    }
}
