//! A tiny decoder-only transformer in double precision with explicit
//! reverse-mode differentiation and per-block projection hook points.
//!
//! Blocks are pre-norm (LayerNorm → attention → residual, LayerNorm → MLP →
//! residual). A hooked block additionally replaces every token's post-block
//! residual state `x` with `x - Qᵀ(Qx)` for that block's projection basis.

mod checkpoint;
mod forward;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use forward::{forward, grads, grads_scaled, grads_with, loss_ce, zero_bundle, ForwardOutput};
pub use optim::{adamw_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    batch_examples, greedy_accuracy, layer_avg_gradients, pretrain, PretrainConfig,
    PretrainReport, TrainExample,
};

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ProjectionBasis;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub context_len: usize,
    #[serde(default = "default_mlp_expansion")]
    pub mlp_expansion: usize,
}

fn default_mlp_expansion() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 512,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            context_len: 64,
            mlp_expansion: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab,
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.context_len,
            self.mlp_expansion,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(
                "all model dimensions must be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_expansion
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter layout derived from a config: tensor order is fixed and the
/// checkpoint format stores raw values in exactly this order.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    block_ranges: Vec<Range<usize>>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let hidden = cfg.mlp_hidden();
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
            let len: usize = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset: *offset,
                len,
            });
            *offset += len;
        };

        push("embed.tok".into(), vec![cfg.vocab, d], &mut offset);
        push("embed.pos".into(), vec![cfg.context_len, d], &mut offset);
        let mut block_ranges = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let start = offset;
            push(format!("block{b}.ln1.g"), vec![d], &mut offset);
            push(format!("block{b}.ln1.b"), vec![d], &mut offset);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("block{b}.attn.{w}"), vec![d, d], &mut offset);
                push(
                    format!("block{b}.attn.{}", w.replace('w', "b")),
                    vec![d],
                    &mut offset,
                );
            }
            push(format!("block{b}.ln2.g"), vec![d], &mut offset);
            push(format!("block{b}.ln2.b"), vec![d], &mut offset);
            push(format!("block{b}.mlp.w1"), vec![d, hidden], &mut offset);
            push(format!("block{b}.mlp.b1"), vec![hidden], &mut offset);
            push(format!("block{b}.mlp.w2"), vec![hidden, d], &mut offset);
            push(format!("block{b}.mlp.b2"), vec![d], &mut offset);
            block_ranges.push(start..offset);
        }
        push("final.ln.g".into(), vec![d], &mut offset);
        push("final.ln.b".into(), vec![d], &mut offset);
        push("head.w".into(), vec![d, cfg.vocab], &mut offset);
        push("head.b".into(), vec![cfg.vocab], &mut offset);

        ParamLayout {
            tensors,
            total: offset,
            block_ranges,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        let t = self
            .spec(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        t.offset..t.offset + t.len
    }

    /// Contiguous parameter range covering every tensor of block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        self.block_ranges[b].clone()
    }
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl BaseModel {
    /// Random initialization: N(0, 0.02) weights, zero biases, unit norm
    /// gains. Residual-output matrices are scaled down by √(2·n_blocks).
    pub fn init(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let resid_scale = 1.0 / ((2 * config.n_blocks) as f64).sqrt();
        for t in &layout.tensors {
            let slice = &mut params[t.offset..t.offset + t.len];
            let name = t.name.as_str();
            if name.ends_with("ln.g") || name.contains("ln1.g") || name.contains("ln2.g") {
                slice.fill(1.0);
            } else if t.shape.len() == 2 {
                let sigma = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    0.02 * resid_scale
                } else if name == "embed.pos" {
                    0.01
                } else {
                    0.02
                };
                for v in slice.iter_mut() {
                    *v = gaussian(rng) * sigma;
                }
            }
            // biases and ln shifts stay zero
        }
        Ok(BaseModel {
            config,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }
}

fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    // Box-Muller on open intervals.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Base model plus the hook set `H`: block index → projection basis applied
/// to that block's output states. Blocks absent from the map carry `P = I`.
#[derive(Debug, Clone)]
pub struct HookedModel {
    pub base: BaseModel,
    pub hooks: BTreeMap<usize, ProjectionBasis>,
}

impl HookedModel {
    pub fn unhooked(base: BaseModel) -> Self {
        HookedModel {
            base,
            hooks: BTreeMap::new(),
        }
    }

    pub fn with_hooks(base: BaseModel, hooks: BTreeMap<usize, ProjectionBasis>) -> Result<Self> {
        for (&layer, basis) in &hooks {
            if layer >= base.config.n_blocks {
                return Err(Error::InvalidInput(format!(
                    "hooked block {layer} out of range (n_blocks = {})",
                    base.config.n_blocks
                )));
            }
            if basis.dim() != base.config.d_model {
                return Err(Error::DimensionMismatch {
                    expected: base.config.d_model,
                    got: basis.dim(),
                    context: "hook basis dimension",
                });
            }
        }
        Ok(HookedModel { base, hooks })
    }

    pub fn set_hook(&mut self, layer: usize, basis: ProjectionBasis) -> Result<()> {
        if layer >= self.base.config.n_blocks {
            return Err(Error::InvalidInput(format!(
                "hooked block {layer} out of range (n_blocks = {})",
                self.base.config.n_blocks
            )));
        }
        if basis.dim() != self.base.config.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.base.config.d_model,
                got: basis.dim(),
                context: "hook basis dimension",
            });
        }
        self.hooks.insert(layer, basis);
        Ok(())
    }
}

/// Token batch with next-token supervision restricted to masked positions.
///
/// `labels[b][t]` is the target for the logits at `(b, t)`; only positions
/// with `mask[b][t] = true` contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub labels: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn new(
        batch: usize,
        len: usize,
        tokens: Vec<u32>,
        mask: Vec<bool>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidInput("batch size must be ≥ 1".into()));
        }
        let n = batch * len;
        if tokens.len() != n || mask.len() != n || labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: tokens.len().min(mask.len()).min(labels.len()),
                context: "batch storage length",
            });
        }
        Ok(Batch {
            tokens,
            mask,
            labels,
            batch,
            len,
        })
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        if self.len > cfg.context_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds context_len {}",
                self.len, cfg.context_len
            )));
        }
        for &t in &self.tokens {
            if t as usize >= cfg.vocab {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of range (vocab = {})",
                    cfg.vocab
                )));
            }
        }
        for (i, &m) in self.mask.iter().enumerate() {
            if m && self.labels[i] as usize >= cfg.vocab {
                return Err(Error::InvalidInput(format!(
                    "label id {} out of range (vocab = {})",
                    self.labels[i], cfg.vocab
                )));
            }
        }
        Ok(())
    }
}

/// Which parameters a gradient computation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    BaseWeights,
    HookBases,
    Both,
}

impl Scope {
    pub fn wants_base(self) -> bool {
        matches!(self, Scope::BaseWeights | Scope::Both)
    }

    pub fn wants_hooks(self) -> bool {
        matches!(self, Scope::HookBases | Scope::Both)
    }
}

/// Gradients for the requested scope. `base` is laid out exactly like
/// `BaseModel::params`; `hooks` maps block index to a k×d gradient matrix
/// for that block's basis rows.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub base: Option<Vec<f64>>,
    pub hooks: BTreeMap<usize, crate::linalg::Matrix>,
}

impl GradBundle {
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) {
        if let (Some(a), Some(b)) = (self.base.as_mut(), other.base.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (layer, g) in &other.hooks {
            if let Some(mine) = self.hooks.get_mut(layer) {
                for (x, y) in mine.data.iter_mut().zip(&g.data) {
                    *x += scale * y;
                }
            }
        }
    }
}
