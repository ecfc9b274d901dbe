//! Pre-norm vision transformer with a CLS token, learned positional
//! embeddings and optional mid-network token pruning.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};
use crate::sparsifier::{self, ExecMode, PruneConfig, SampleAttention, TokenMask};

/// Score assigned to attention logits whose query or key is pruned.
pub const MASK_SENTINEL: f64 = -65000.0;
pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub drop_path: f64,
}

impl ModelConfig {
    /// 32x32 inputs, 4x4 patches, 4 layers of width 64, 8 classes.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }

    /// DeiT-Small geometry.
    pub fn deit_small() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            mlp_ratio: 4,
            num_classes: 1000,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "deit-s" | "deit_s" | "deit-small" => Ok(Self::deit_small()),
            other => Err(Error::Config(format!("unknown model preset '{other}' (expected toy or deit-s)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length `N + 1`.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// `(name, shape)` of every parameter in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.tokens(), d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            v.extend([
                (p("norm1.gamma"), vec![d]),
                (p("norm1.beta"), vec![d]),
                (p("qkv.weight"), vec![d, 3 * d]),
                (p("qkv.bias"), vec![3 * d]),
                (p("proj.weight"), vec![d, d]),
                (p("proj.bias"), vec![d]),
                (p("norm2.gamma"), vec![d]),
                (p("norm2.beta"), vec![d]),
                (p("fc1.weight"), vec![d, self.mlp_dim()]),
                (p("fc1.bias"), vec![self.mlp_dim()]),
                (p("fc2.weight"), vec![self.mlp_dim(), d]),
                (p("fc2.bias"), vec![d]),
            ]);
        }
        v.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        v
    }
}

// ---------------------------------------------------------------------------
// Attention records and outputs
// ---------------------------------------------------------------------------

/// Post-softmax (and post-zeroing) attention of one layer, `[B, H, T, T]`.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F: Scalar> {
    pub layer: usize,
    pub probs: Tensor<F>,
}

pub struct RecordView<'a, F: Scalar> {
    data: Ref<'a, Vec<F>>,
    batch: usize,
    heads: usize,
    tokens: usize,
}

impl<F: Scalar> AttentionRecord<F> {
    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn view(&self) -> RecordView<'_, F> {
        let s = self.probs.shape();
        RecordView { data: self.probs.data(), batch: s[0], heads: s[1], tokens: s[2] }
    }
}

impl<F: Scalar> RecordView<'_, F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn sample(&self, b: usize) -> Result<SampleAttention<'_, F>> {
        let per = self.heads * self.tokens * self.tokens;
        if b >= self.batch {
            return Err(Error::Index(format!("sample {b} out of range for batch {}", self.batch)));
        }
        SampleAttention::new(&self.data[b * per..(b + 1) * per], self.heads, self.tokens)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Scalar> {
    pub logits: Tensor<F>,
    /// Captured records in increasing layer order.
    pub records: Vec<AttentionRecord<F>>,
    pub masks: Vec<TokenMask>,
    pub kept: Vec<usize>,
    /// Whether the masks were applied after the prune layer.
    pub sparse: bool,
}

impl<F: Scalar> ForwardOutput<F> {
    pub fn record(&self, layer: usize) -> Option<&AttentionRecord<F>> {
        self.records.iter().find(|r| r.layer == layer)
    }

    pub fn densities(&self) -> Vec<f64> {
        self.masks.iter().map(TokenMask::density).collect()
    }
}

/// How (and whether) tokens are pruned during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Sparsify<'a> {
    Off,
    /// Score and select at the policy's prune layer. With `apply = false` the
    /// masks are computed and reported but the network runs dense.
    Policy {
        config: &'a PruneConfig,
        apply: bool,
    },
    /// Externally supplied masks applied after `layer`.
    Masks {
        layer: usize,
        masks: &'a [TokenMask],
        mode: ExecMode,
    },
}

/// Hidden state after the attention residual of the prune layer.
#[derive(Debug, Clone)]
pub struct Prefix<F: Scalar> {
    pub layer: usize,
    pub hidden: Tensor<F>,
    pub records: Vec<AttentionRecord<F>>,
}

impl<F: Scalar> Prefix<F> {
    /// The prune layer's own attention record.
    pub fn record(&self) -> &AttentionRecord<F> {
        self.records.last().expect("prefix always records its last layer")
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    /// `[in, out]`.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, std: f64) -> Result<Self> {
        let w = (0..fan_in * fan_out).map(|_| F::from_f64(rng.trunc_normal(std))).collect();
        Ok(Linear {
            weight: Tensor::param(w, &[fan_in, fan_out])?,
            bias: Tensor::param(vec![F::zero(); fan_out], &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.linear(&self.weight, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: Scalar> LayerNorm<F> {
    fn init(d: usize) -> Result<Self> {
        Ok(LayerNorm { gamma: Tensor::param(vec![F::one(); d], &[d])?, beta: Tensor::param(vec![F::zero(); d], &[d])? })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Block<F: Scalar> {
    pub norm1: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> Block<F> {
    /// Multi-head self-attention branch. Returns the projected output and
    /// the attention probabilities `[B, H, T, T]`.
    pub fn attention(&self, x: &Tensor<F>, heads: usize, keep: Option<&[bool]>) -> Result<(Tensor<F>, Tensor<F>)> {
        let dh = x.shape()[2] / heads;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let mut scores = qkv.attention_scores(heads, 1.0 / (dh as f64).sqrt())?;
        if let Some(keep) = keep {
            scores = scores.attention_mask_fill(keep, MASK_SENTINEL)?;
        }
        let mut probs = scores.softmax(-1)?;
        if let Some(keep) = keep {
            probs = probs.zero_pruned_rows(keep)?;
        }
        let ctx = probs.attention_context(&qkv, heads)?;
        Ok((self.proj.forward(&ctx)?, probs))
    }

    pub fn mlp(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.fc2.forward(&self.fc1.forward(&self.norm2.forward(x)?)?.gelu())
    }
}

/// `[B, C, S, S]` images to `[B, N, C*p*p]` patch rows. Patches follow the
/// row-major grid; within a patch values are ordered channel, row, column.
pub fn patchify<F: Scalar>(images: &[F], batch: usize, channels: usize, size: usize, patch: usize) -> Result<Vec<F>> {
    if images.len() != batch * channels * size * size || !size.is_multiple_of(patch) {
        return dim_err(format!(
            "{} pixel values do not form {batch} images of [{channels}, {size}, {size}] with patch {patch}",
            images.len()
        ));
    }
    let g = size / patch;
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * channels * size * size..(b + 1) * channels * size * size];
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..channels {
                    for dy in 0..patch {
                        let row = (c * size + gy * patch + dy) * size + gx * patch;
                        out.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct NamedParam<'a, F: Scalar> {
    pub name: &'a str,
    pub tensor: &'a Tensor<F>,
    pub decay: bool,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct VisionTransformer<F: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    pub patch_embed: Linear<F>,
    pub cls_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
    regularizer: RefCell<Option<Rng>>,
}

impl<F: Scalar> VisionTransformer<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).fork(0x1217);
        let d = config.embed_dim;
        let patch_std = 1.0 / (config.patch_dim() as f64).sqrt();
        let patch_embed = Linear::init(&mut rng, config.patch_dim(), d, patch_std)?;
        let mut table = |n: usize| -> Vec<F> { (0..n).map(|_| F::from_f64(rng.trunc_normal(INIT_STD))).collect() };
        let cls = table(d);
        let pos = table(config.tokens() * d);
        let cls_token = Tensor::param(cls, &[d])?;
        let pos_embed = Tensor::param(pos, &[config.tokens(), d])?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block {
                norm1: LayerNorm::init(d)?,
                qkv: Linear::init(&mut rng, d, 3 * d, INIT_STD)?,
                proj: Linear::init(&mut rng, d, d, INIT_STD)?,
                norm2: LayerNorm::init(d)?,
                fc1: Linear::init(&mut rng, d, config.mlp_dim(), INIT_STD)?,
                fc2: Linear::init(&mut rng, config.mlp_dim(), d, INIT_STD)?,
            });
        }
        let norm = LayerNorm::init(d)?;
        let head = Linear::init(&mut rng, d, config.num_classes, INIT_STD)?;
        let names = config.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        Ok(VisionTransformer {
            config,
            names,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            regularizer: RefCell::new(None),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in canonical order (matching [`ModelConfig::parameter_shapes`]).
    /// Weight matrices are flagged for weight decay; biases, norms and
    /// embeddings are not.
    pub fn parameters(&self) -> Vec<NamedParam<'_, F>> {
        let mut t: Vec<&Tensor<F>> =
            vec![&self.patch_embed.weight, &self.patch_embed.bias, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            t.extend([
                &b.norm1.gamma,
                &b.norm1.beta,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.proj.weight,
                &b.proj.bias,
                &b.norm2.gamma,
                &b.norm2.beta,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        t.extend([&self.norm.gamma, &self.norm.beta, &self.head.weight, &self.head.bias]);
        self.names
            .iter()
            .zip(t)
            .map(|(name, tensor)| NamedParam { name, tensor, decay: name.ends_with(".weight") })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.tensor.zero_grad());
    }

    pub fn export_parameters(&self) -> Vec<Vec<F>> {
        self.parameters().iter().map(|p| p.tensor.to_vec()).collect()
    }

    /// Overwrites every parameter; shapes must match the canonical order.
    pub fn load_parameters(&self, values: &[Vec<F>]) -> Result<()> {
        let params = self.parameters();
        if values.len() != params.len() {
            return dim_err(format!("expected {} parameter buffers, got {}", params.len(), values.len()));
        }
        for (p, v) in params.iter().zip(values) {
            if p.tensor.numel() != v.len() {
                return dim_err(format!("parameter {} has {} values, expected {}", p.name, v.len(), p.tensor.numel()));
            }
        }
        for (p, v) in params.iter().zip(values) {
            p.tensor.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// A copy of this model in another precision.
    pub fn cast<G: Scalar>(&self) -> Result<VisionTransformer<G>> {
        let out = VisionTransformer::<G>::new(self.config.clone(), 0)?;
        let values: Vec<Vec<G>> = self
            .export_parameters()
            .into_iter()
            .map(|v| v.into_iter().map(|x| G::from_f64(x.as_f64())).collect())
            .collect();
        out.load_parameters(&values)?;
        Ok(out)
    }

    /// Enables dropout / stochastic depth (when configured) driven by `rng`;
    /// `None` restores deterministic inference behaviour.
    pub fn set_regularization(&self, rng: Option<Rng>) {
        *self.regularizer.borrow_mut() = rng;
    }

    // -- forward pieces ----------------------------------------------------

    fn check_images(&self, images: &Tensor<F>) -> Result<usize> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return dim_err(format!(
                "expected images [B, {}, {}, {}], got {s:?}",
                c.channels, c.image_size, c.image_size
            ));
        }
        Ok(s[0])
    }

    /// Patch embedding `[B, N, d]` (no CLS, no positions).
    pub fn patch_embed(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let b = self.check_images(images)?;
        let c = &self.config;
        let rows = patchify(&images.data(), b, c.channels, c.image_size, c.patch_size)?;
        let patches = Tensor::new(rows, &[b, c.num_patches(), c.patch_dim()])?;
        self.patch_embed.forward(&patches)
    }

    /// Token sequence `[B, T, d]` entering layer 0.
    pub fn embed(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        self.patch_embed(images)?.prepend_token(&self.cls_token)?.add(&self.pos_embed)
    }

    fn regularize(&self, branch: Tensor<F>) -> Result<Tensor<F>> {
        let (p_drop, p_path) = (self.config.dropout, self.config.drop_path);
        if p_drop == 0.0 && p_path == 0.0 {
            return Ok(branch);
        }
        let mut guard = self.regularizer.borrow_mut();
        let Some(rng) = guard.as_mut() else { return Ok(branch) };
        let s = branch.shape().to_vec();
        let per_sample = s[1..].iter().product::<usize>();
        let mut mask = vec![F::one(); branch.numel()];
        if p_drop > 0.0 {
            let keep = F::from_f64(1.0 / (1.0 - p_drop));
            for m in mask.iter_mut() {
                *m = if rng.uniform() < p_drop { F::zero() } else { keep };
            }
        }
        if p_path > 0.0 {
            let keep = F::from_f64(1.0 / (1.0 - p_path));
            for chunk in mask.chunks_exact_mut(per_sample) {
                let f = if rng.uniform() < p_path { F::zero() } else { keep };
                chunk.iter_mut().for_each(|m| *m *= f);
            }
        }
        branch.mul(&Tensor::new(mask, &s)?)
    }

    fn attn_residual(&self, l: usize, x: &Tensor<F>, keep: Option<&[bool]>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (out, probs) = self.blocks[l].attention(x, self.config.num_heads, keep)?;
        Ok((x.add(&self.regularize(out)?)?, probs))
    }

    fn mlp_residual(&self, l: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.add(&self.regularize(self.blocks[l].mlp(x)?)?)
    }

    /// Logits from the CLS position of the final hidden state.
    pub fn classify(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let s = x.shape();
        let cls = x.narrow(1, 0, 1)?.reshape(&[s[0], s[2]])?;
        self.head.forward(&self.norm.forward(&cls)?)
    }

    /// Runs layers `0..layer` fully and the attention half of `layer`.
    /// The record of `layer` is always kept; earlier layers only when listed
    /// in `capture`.
    pub fn forward_prefix(&self, images: &Tensor<F>, layer: usize, capture: &[usize]) -> Result<Prefix<F>> {
        if layer >= self.config.num_layers {
            return Err(Error::Config(format!(
                "prune layer {layer} must be below the layer count {}",
                self.config.num_layers
            )));
        }
        let mut x = self.embed(images)?;
        let mut records = Vec::new();
        for l in 0..layer {
            let (h, probs) = self.attn_residual(l, &x, None)?;
            if capture.contains(&l) {
                records.push(AttentionRecord { layer: l, probs });
            }
            x = self.mlp_residual(l, &h)?;
        }
        let (hidden, probs) = self.attn_residual(layer, &x, None)?;
        records.push(AttentionRecord { layer, probs });
        Ok(Prefix { layer, hidden, records })
    }

    /// Finishes a forward pass from a [`Prefix`] hidden state: the MLP half of
    /// `layer` and every later layer, with optional pruning.
    pub fn forward_suffix(
        &self,
        hidden: &Tensor<F>,
        layer: usize,
        masks: Option<&[TokenMask]>,
        mode: ExecMode,
        capture: &[usize],
    ) -> Result<(Tensor<F>, Vec<AttentionRecord<F>>)> {
        let s = hidden.shape().to_vec();
        if s.len() != 3 || s[1] != self.config.tokens() || s[2] != self.config.embed_dim {
            return dim_err(format!(
                "hidden state must be [B, {}, {}], got {s:?}",
                self.config.tokens(),
                self.config.embed_dim
            ));
        }
        if layer >= self.config.num_layers {
            return Err(Error::Config(format!("layer {layer} out of range")));
        }
        let masks = match masks {
            Some(m) if m.iter().all(TokenMask::is_full) => None,
            other => other,
        };
        let Some(masks) = masks else {
            return self.run_tail(hidden, layer, None, capture);
        };
        self.check_masks(masks, s[0])?;
        match mode {
            ExecMode::Masked => {
                let keep: Vec<bool> = masks.iter().flat_map(|m| m.bits().iter().copied()).collect();
                self.run_tail(hidden, layer, Some(&keep), capture)
            }
            ExecMode::Compacted => {
                if capture.iter().any(|&l| l > layer) {
                    return Err(Error::Contract(
                        "attention beyond the prune layer cannot be captured in compacted mode".into(),
                    ));
                }
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (b, m) in masks.iter().enumerate() {
                    groups.entry(m.kept()).or_default().push(b);
                }
                let mut parts = Vec::with_capacity(groups.len());
                let mut order = Vec::with_capacity(s[0]);
                for members in groups.values() {
                    let picks: Vec<(usize, Vec<usize>)> =
                        members.iter().map(|&b| (b, masks[b].kept_positions())).collect();
                    let x = hidden.gather_tokens(&picks)?;
                    parts.push(self.run_tail(&x, layer, None, &[])?.0);
                    order.extend_from_slice(members);
                }
                let logits = if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::concat0(&parts)? };
                if order.iter().enumerate().all(|(i, &b)| i == b) {
                    return Ok((logits, Vec::new()));
                }
                let mut inverse = vec![0; order.len()];
                for (i, &b) in order.iter().enumerate() {
                    inverse[b] = i;
                }
                Ok((logits.index_select0(&inverse)?, Vec::new()))
            }
        }
    }

    fn check_masks(&self, masks: &[TokenMask], batch: usize) -> Result<()> {
        if masks.len() != batch {
            return Err(Error::Contract(format!("{} masks supplied for a batch of {batch}", masks.len())));
        }
        let t = self.config.tokens();
        if let Some(m) = masks.iter().find(|m| m.len() != t) {
            return dim_err(format!("mask covers {} positions, sequence has {t}", m.len()));
        }
        if masks.iter().any(|m| !m.bits()[0]) {
            return Err(Error::Contract("mask prunes the CLS token".into()));
        }
        Ok(())
    }

    fn run_tail(
        &self,
        hidden: &Tensor<F>,
        layer: usize,
        keep: Option<&[bool]>,
        capture: &[usize],
    ) -> Result<(Tensor<F>, Vec<AttentionRecord<F>>)> {
        let mut x = self.mlp_residual(layer, hidden)?;
        let mut records = Vec::new();
        for l in layer + 1..self.config.num_layers {
            let (h, probs) = self.attn_residual(l, &x, keep)?;
            if capture.contains(&l) {
                records.push(AttentionRecord { layer: l, probs });
            }
            x = self.mlp_residual(l, &h)?;
        }
        Ok((self.classify(&x)?, records))
    }

    /// Full forward pass.
    ///
    /// `capture` lists layers whose attention is returned. With a pruning
    /// policy the prune layer's record is always returned as well.
    pub fn forward(&self, images: &Tensor<F>, sparsify: Sparsify<'_>, capture: &[usize]) -> Result<ForwardOutput<F>> {
        let batch = self.check_images(images)?;
        let t = self.config.tokens();
        let last = self.config.num_layers - 1;
        match sparsify {
            Sparsify::Off => {
                let prefix = self.forward_prefix(images, last, capture)?;
                let mut records = prefix.records;
                if !capture.contains(&last) {
                    records.pop();
                }
                let logits = self.mlp_residual(last, &prefix.hidden).and_then(|x| self.classify(&x))?;
                Ok(ForwardOutput {
                    logits,
                    records,
                    masks: vec![TokenMask::all(t); batch],
                    kept: vec![t; batch],
                    sparse: false,
                })
            }
            Sparsify::Policy { config, apply } => {
                config.validate(self.config.num_layers)?;
                let p = config.prune_layer;
                let prefix = self.forward_prefix(images, p, capture)?;
                let plan = sparsifier::plan(prefix.record(), config)?;
                let sparse = apply && config.is_active();
                let masks = sparse.then_some(plan.masks.as_slice());
                let (logits, tail) = self.forward_suffix(&prefix.hidden, p, masks, config.exec_mode, capture)?;
                Ok(self.finish(logits, prefix.records, tail, plan.masks, sparse))
            }
            Sparsify::Masks { layer, masks, mode } => {
                self.check_masks(masks, batch)?;
                let prefix = self.forward_prefix(images, layer, capture)?;
                let mut records = prefix.records;
                if !capture.contains(&layer) {
                    records.pop();
                }
                let (logits, tail) = self.forward_suffix(&prefix.hidden, layer, Some(masks), mode, capture)?;
                Ok(self.finish(logits, records, tail, masks.to_vec(), true))
            }
        }
    }

    fn finish(
        &self,
        logits: Tensor<F>,
        mut records: Vec<AttentionRecord<F>>,
        tail: Vec<AttentionRecord<F>>,
        masks: Vec<TokenMask>,
        sparse: bool,
    ) -> ForwardOutput<F> {
        records.extend(tail);
        let kept = masks.iter().map(TokenMask::kept).collect();
        ForwardOutput { logits, records, masks, kept, sparse }
    }

    /// Dense logits.
    pub fn logits(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(images, Sparsify::Off, &[])?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::no_grad;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }

    fn images(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = b * cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new((0..n).map(|_| rng.normal()).collect(), &[b, cfg.channels, cfg.image_size, cfg.image_size]).unwrap()
    }

    #[test]
    fn geometry() {
        let t = ModelConfig::toy();
        assert_eq!((t.num_patches(), t.tokens()), (64, 65));
        let d = ModelConfig::deit_small();
        assert_eq!((d.num_patches(), d.head_dim()), (196, 64));
        let mut bad = ModelConfig::toy();
        bad.patch_size = 5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        bad = ModelConfig::toy();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&img, 1, 1, 4, 2).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_image_zero_embedding() {
        let m = VisionTransformer::<f64>::new(tiny(), 1).unwrap();
        let e = m.patch_embed(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert!(e.to_vec().iter().all(|&v| v == 0.0));
        assert!(m.patch_embed(&Tensor::zeros(&[2, 1, 7, 7])).is_err());
    }

    #[test]
    fn full_mask_is_bitwise_dense() {
        let cfg = tiny();
        let m = VisionTransformer::<f64>::new(cfg.clone(), 2).unwrap();
        let x = images(&cfg, 3, 4);
        let dense = m.logits(&x).unwrap().to_vec();
        let masks = vec![TokenMask::all(cfg.tokens()); 3];
        for mode in [ExecMode::Masked, ExecMode::Compacted] {
            let out = m.forward(&x, Sparsify::Masks { layer: 0, masks: &masks, mode }, &[]).unwrap();
            assert_eq!(out.logits.to_vec(), dense);
        }
    }

    #[test]
    fn masked_matches_compacted() {
        let cfg = tiny();
        let m = VisionTransformer::<f64>::new(cfg.clone(), 3).unwrap();
        let x = images(&cfg, 3, 5);
        let masks = vec![
            TokenMask::from_bits(vec![true, false, true, true, false]).unwrap(),
            TokenMask::from_bits(vec![true, true, false, false, false]).unwrap(),
            TokenMask::from_bits(vec![true, false, false, true, true]).unwrap(),
        ];
        let run = |mode| {
            no_grad(|| m.forward(&x, Sparsify::Masks { layer: 0, masks: &masks, mode }, &[])).unwrap().logits.to_vec()
        };
        let (a, b) = (run(ExecMode::Masked), run(ExecMode::Compacted));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn records_rows_sum_to_one() {
        let cfg = tiny();
        let m = VisionTransformer::<f64>::new(cfg.clone(), 3).unwrap();
        let out = m.forward(&images(&cfg, 2, 1), Sparsify::Off, &[0, 1]).unwrap();
        assert_eq!(out.records.len(), 2);
        for r in &out.records {
            for row in r.probs.to_vec().chunks(cfg.tokens()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_pruning_rejected() {
        let cfg = tiny();
        let m = VisionTransformer::<f64>::new(cfg.clone(), 3).unwrap();
        let x = images(&cfg, 1, 1);
        assert!(m.forward(&x, Sparsify::Masks { layer: 0, masks: &[], mode: ExecMode::Masked }, &[]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let m = VisionTransformer::<f32>::new(ModelConfig::toy(), 9).unwrap();
        let d = m.cast::<f64>().unwrap();
        let back = d.cast::<f32>().unwrap();
        assert_eq!(m.export_parameters(), back.export_parameters());
        assert_eq!(m.num_parameters(), 207_944);
    }
}
