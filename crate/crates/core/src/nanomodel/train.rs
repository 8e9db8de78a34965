//! Supervised pretraining loop and per-block gradient averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

use super::{
    adamw_step, forward, grads_scaled, AdamState, BaseModel, Batch, HookedModel, Scope,
};
use rand::seq::SliceRandom;

/// One supervised item: a token sequence with one or more trained positions.
/// `targets` lists (position, expected token) pairs for the loss;
/// `answer_pos` marks the position whose logits answer the question, with
/// `answer` the correct token there.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
    pub answer_pos: usize,
    pub answer: u32,
}

/// Pads with token 0 and supervises exactly each example's target positions.
pub fn batch_examples(items: &[&TrainExample]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot batch zero examples".into()));
    }
    let len = items.iter().map(|e| e.tokens.len()).max().unwrap();
    let b = items.len();
    let mut tokens = vec![0u32; b * len];
    let mut mask = vec![false; b * len];
    let mut labels = vec![0u32; b * len];
    for (i, ex) in items.iter().enumerate() {
        tokens[i * len..i * len + ex.tokens.len()].copy_from_slice(&ex.tokens);
        for &(pos, tok) in &ex.targets {
            if pos >= ex.tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "target position {pos} outside sequence of length {}",
                    ex.tokens.len()
                )));
            }
            mask[i * len + pos] = true;
            labels[i * len + pos] = tok;
        }
    }
    Batch::new(b, len, tokens, mask, labels)
}

/// Greedy full-vocabulary accuracy at the answer positions.
pub fn greedy_accuracy(model: &HookedModel, items: &[TrainExample], batch: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&TrainExample> = chunk.iter().collect();
        let b = batch_examples(&refs)?;
        let out = forward(model, &b, &std::collections::BTreeSet::new())?;
        for (i, ex) in chunk.iter().enumerate() {
            let row = out.logit_row(i, ex.answer_pos);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == ex.answer as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub target_acc: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            batch: 32,
            max_epochs: 60,
            target_acc: 0.9,
            weight_decay: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub per_topic_train_acc: BTreeMap<String, f64>,
}

/// Trains the base model on all topics until every topic's train accuracy
/// reaches `target_acc`, or fails after `max_epochs`.
pub fn pretrain(
    model: &mut BaseModel,
    topics: &[(String, Vec<TrainExample>)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if topics.is_empty() || topics.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidInput("pretrain corpus is empty".into()));
    }
    let mut rng = substream(cfg.seed, "pretrain");
    let mut state = AdamState::new(model.layout.total);
    let all: Vec<&TrainExample> = topics.iter().flat_map(|(_, v)| v.iter()).collect();
    let eval_batch = cfg.batch.max(32);

    let topic_accs = |m: &HookedModel| -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (name, items) in topics {
            out.insert(name.clone(), greedy_accuracy(m, items, eval_batch)?);
        }
        Ok(out)
    };

    let mut work = HookedModel::unhooked(model.clone());
    let mut accs = topic_accs(&work)?;
    let mut epochs = 0usize;
    // Skip the full train-accuracy sweep while the loss is clearly too high
    // for the target to be in reach.
    let eval_gate = (-cfg.target_acc.max(0.05).ln()).max(0.5);
    // One-way learning-rate latch: once the epoch loss drops below 0.3 the
    // rate is cut so the memorized solution stops oscillating.
    let mut lr = cfg.lr;
    while accs.values().any(|&a| a < cfg.target_acc) {
        if epochs >= cfg.max_epochs {
            return Err(Error::TrainingFailure(format!(
                "target accuracy {} not reached after {} epochs; per-topic accuracy: {:?}",
                cfg.target_acc, cfg.max_epochs, accs
            )));
        }
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&TrainExample> = chunk.iter().map(|&i| all[i]).collect();
            let batch = batch_examples(&refs)?;
            let (loss, bundle) = grads_scaled(&work, &batch, Scope::BaseWeights, 1.0)?;
            let g = bundle.base.expect("base scope produces base grads");
            adamw_step(&mut work.base.params, &g, &mut state, lr, cfg.weight_decay)?;
            loss_sum += loss;
            n_steps += 1;
        }
        epochs += 1;
        let mean_loss = loss_sum / n_steps.max(1) as f64;
        if mean_loss < 0.3 {
            lr = cfg.lr * 0.25;
        }
        let evaluated = mean_loss <= eval_gate || epochs == cfg.max_epochs;
        if evaluated {
            accs = topic_accs(&work)?;
        }
        let min_acc = accs.values().cloned().fold(f64::INFINITY, f64::min);
        eprintln!(
            "pretrain: epoch {epochs} done in {:.1}s, mean loss {mean_loss:.4}, min topic accuracy {}",
            started.elapsed().as_secs_f64(),
            if evaluated {
                format!("{min_acc:.3}")
            } else {
                "(not evaluated)".into()
            }
        );
    }
    *model = work.base;
    Ok(PretrainReport {
        epochs,
        per_topic_train_acc: accs,
    })
}

/// Per-block mean gradients of the unlearning objective `-L` over the
/// dataset, flattened in parameter-layout order (the whole block: attention,
/// MLP, and their norms).
pub fn layer_avg_gradients(
    model: &HookedModel,
    items: &[TrainExample],
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty gradient dataset".into()));
    }
    let layout = &model.base.layout;
    let n_blocks = model.base.config.n_blocks;
    let mut sums: Vec<Vec<f64>> = (0..n_blocks)
        .map(|b| vec![0.0; layout.block_range(b).len()])
        .collect();
    let mut n_batches = 0usize;
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&TrainExample> = chunk.iter().collect();
        let b = batch_examples(&refs)?;
        let (_, bundle) = grads_scaled(model, &b, Scope::BaseWeights, -1.0)?;
        let g = bundle.base.expect("base scope produces base grads");
        for (bi, sum) in sums.iter_mut().enumerate() {
            let r = layout.block_range(bi);
            for (s, v) in sum.iter_mut().zip(&g[r]) {
                *s += v;
            }
        }
        n_batches += 1;
    }
    let inv = 1.0 / n_batches as f64;
    for sum in &mut sums {
        for v in sum.iter_mut() {
            *v *= inv;
        }
    }
    Ok(sums)
}
