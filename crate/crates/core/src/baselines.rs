//! Gradient-ascent unlearning baseline and the relearning attacker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrp::StepLog;
use crate::nanomodel::{
    adamw_step, batch_examples, grads_scaled, grads_with, AdamState, BaseModel, HookedModel,
    Scope, TrainExample,
};
use crate::rng::substream;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaConfig {
    /// Weight on the (ascended) unlearn cross-entropy.
    pub w_unl: f64,
    /// Weight on the (descended) retain cross-entropy.
    pub w_ret: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Ceiling on the unlearn term, as in the projection trainer; `None`
    /// means 2·ln(vocab).
    pub unlearn_ce_cap: Option<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            w_unl: 0.1,
            w_ret: 1.0,
            lr: 2e-4,
            batch: 5,
            epochs: 2,
            unlearn_ce_cap: None,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_unl < 0.0 || self.w_ret < 0.0 {
            return Err(Error::InvalidInput(
                "loss-term weights must be non-negative".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::InvalidInput("batch must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn cap_for_vocab(&self, vocab: usize) -> f64 {
        self.unlearn_ce_cap
            .unwrap_or_else(|| 2.0 * (vocab as f64).ln())
    }
}

/// Fine-tunes all base weights on `w_ret·L_ret - w_unl·min(L_unl, τ)`:
/// gradient ascent on the unlearn set, descent on the retain set.
#[allow(clippy::too_many_arguments)]
pub fn ga_unlearn(
    model: &mut BaseModel,
    d_unl: &[TrainExample],
    d_ret: &[TrainExample],
    cfg: &GaConfig,
    stage: usize,
    seed: u64,
    logs: &mut Vec<StepLog>,
) -> Result<()> {
    cfg.validate()?;
    if d_unl.is_empty() || d_ret.is_empty() {
        return Err(Error::InvalidInput("training sets must be non-empty".into()));
    }
    let cap = cfg.cap_for_vocab(model.config.vocab);
    let mut rng = substream(seed, &format!("ga-unlearn/{stage}"));
    let mut work = HookedModel::unhooked(model.clone());
    let mut state = AdamState::new(work.base.layout.total);

    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut unl: Vec<&TrainExample> = d_unl.iter().collect();
        let mut ret: Vec<&TrainExample> = d_ret.iter().collect();
        unl.shuffle(&mut rng);
        ret.shuffle(&mut rng);
        let steps = (unl.len() / cfg.batch).min(ret.len() / cfg.batch).max(1);
        for step in 0..steps {
            let lo = step * cfg.batch;
            let unl_slice = &unl[lo.min(unl.len() - 1)..(lo + cfg.batch).min(unl.len())];
            let ret_slice = &ret[lo.min(ret.len() - 1)..(lo + cfg.batch).min(ret.len())];
            let batch_unl = batch_examples(unl_slice)?;
            let batch_ret = batch_examples(ret_slice)?;

            let step_result = (|| -> Result<(f64, f64)> {
                let (l_unl, mut g) =
                    grads_with(&work, &batch_unl, Scope::BaseWeights, |l| {
                        if l < cap {
                            -cfg.w_unl
                        } else {
                            0.0
                        }
                    })?;
                let (l_ret, g_ret) =
                    grads_scaled(&work, &batch_ret, Scope::BaseWeights, cfg.w_ret)?;
                g.add_scaled(&g_ret, 1.0);
                let grads = g.base.expect("base scope produces base grads");
                adamw_step(&mut work.base.params, &grads, &mut state, cfg.lr, 0.0)?;
                Ok((l_unl, l_ret))
            })();
            let (l_unl, l_ret) = step_result.map_err(|e| {
                Error::NumericOverflow(format!("ga_unlearn step {global_step}: {e}"))
            })?;
            logs.push(StepLog {
                stage,
                epoch,
                step,
                loss_unlearn: l_unl,
                loss_retain: l_ret,
                composite: cfg.w_ret * l_ret - cfg.w_unl * l_unl.min(cap),
            });
            global_step += 1;
        }
    }
    *model = work.base;
    Ok(())
}

/// One row of the relearning-attack trace; `epoch` 0 is the pre-attack state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTraceRow {
    pub epoch: usize,
    pub unlearn_test_acc: f64,
    pub retain1_acc: f64,
    pub retain2_acc: f64,
}

/// Fine-tunes the base weights on attack data with plain cross-entropy for
/// `epochs` epochs. Projection hooks are never touched: the released model's
/// projections are part of the artifact the attacker cannot edit.
/// `evaluate` maps a model snapshot to
/// (unlearn-test, retain-1, retain-2) accuracies.
pub fn relearn_attack(
    model: &mut HookedModel,
    d_attack: &[TrainExample],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    mut evaluate: impl FnMut(&HookedModel) -> Result<[f64; 3]>,
) -> Result<Vec<AttackTraceRow>> {
    if d_attack.is_empty() {
        return Err(Error::InvalidInput("attack set is empty".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidInput("batch must be ≥ 1".into()));
    }
    let mut rng = substream(seed, "relearn-attack");
    let mut state = AdamState::new(model.base.layout.total);
    let mut trace = Vec::with_capacity(epochs + 1);
    let pre = evaluate(model)?;
    trace.push(AttackTraceRow {
        epoch: 0,
        unlearn_test_acc: pre[0],
        retain1_acc: pre[1],
        retain2_acc: pre[2],
    });

    for epoch in 1..=epochs {
        let mut order: Vec<&TrainExample> = d_attack.iter().collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let b = batch_examples(chunk)?;
            let (_, g) = grads_scaled(model, &b, Scope::BaseWeights, 1.0)?;
            let grads = g.base.expect("base scope produces base grads");
            adamw_step(&mut model.base.params, &grads, &mut state, lr, 0.0)?;
        }
        let acc = evaluate(model)?;
        trace.push(AttackTraceRow {
            epoch,
            unlearn_test_acc: acc[0],
            retain1_acc: acc[1],
            retain2_acc: acc[2],
        });
    }
    Ok(trace)
}
