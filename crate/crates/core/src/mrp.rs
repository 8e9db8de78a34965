//! Representation-projection unlearning: hidden-state extraction, orthogonal
//! basis initialization, composite-loss training of the projection bases, and
//! the sequential unlearning loop.
//!
//! Each unlearning request appends `dims_per_task` fresh rows to every hooked
//! layer's basis. Rows inherited from earlier requests stay frozen during
//! training, so earlier row spaces are contained in later ones and a
//! direction once projected away can never be restored by a later request.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    apply_projection, norm, qr_orthobasis, Matrix, ProjectionBasis, DEFAULT_RANK_TOL,
};
use crate::nanomodel::{
    adamw_step, batch_examples, forward, grads_scaled, grads_with, AdamState, GradBundle,
    HookedModel, Scope, TrainExample,
};
use crate::rng::substream;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MrpConfig {
    /// Retain-loss weight α; must exceed 1.
    pub alpha: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// K: samples per side used to initialize each projection basis.
    pub init_samples: usize,
    /// Basis rows added per unlearning request.
    pub dims_per_task: usize,
    pub hooked_layers: Vec<usize>,
    /// Per-example cross-entropy ceiling τ on the unlearn term; `None` means
    /// 2·ln(vocab). Once the unlearn loss exceeds τ the term stops
    /// contributing gradient, keeping the objective bounded.
    pub unlearn_ce_cap: Option<f64>,
    pub reortho_every_step: bool,
}

impl Default for MrpConfig {
    fn default() -> Self {
        MrpConfig {
            alpha: 1.2,
            lr: 2e-4,
            batch: 5,
            epochs: 2,
            init_samples: 200,
            dims_per_task: 2,
            hooked_layers: vec![2, 3],
            unlearn_ce_cap: None,
            reortho_every_step: true,
        }
    }
}

impl MrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 1.0 {
            return Err(Error::InvalidInput(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if self.dims_per_task == 0 {
            return Err(Error::InvalidInput("dims_per_task must be ≥ 1".into()));
        }
        if self.init_samples < self.dims_per_task {
            return Err(Error::InvalidInput(format!(
                "init_samples {} below dims_per_task {}",
                self.init_samples, self.dims_per_task
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidInput("batch must be ≥ 1".into()));
        }
        if self.hooked_layers.is_empty() {
            return Err(Error::InvalidInput("hooked_layers must be non-empty".into()));
        }
        let unique: BTreeSet<usize> = self.hooked_layers.iter().copied().collect();
        if unique.len() != self.hooked_layers.len() {
            return Err(Error::InvalidInput("hooked_layers repeats a layer".into()));
        }
        Ok(())
    }

    pub fn cap_for_vocab(&self, vocab: usize) -> f64 {
        self.unlearn_ce_cap
            .unwrap_or_else(|| 2.0 * (vocab as f64).ln())
    }
}

/// Per-layer training bookkeeping. The authoritative basis lives in the
/// hooked model; this carries the previous-request snapshot, the count of
/// frozen rows, and the optimizer state for the trainable rows.
#[derive(Debug, Clone)]
pub struct LayerHookState {
    pub prev_snapshot: ProjectionBasis,
    pub frozen_rank: usize,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone, Default)]
pub struct HookState {
    pub layers: BTreeMap<usize, LayerHookState>,
}

impl HookState {
    /// Total basis parameters, Σ rank(Q_h)·d over hooked layers.
    pub fn trainable_params(model: &HookedModel) -> usize {
        model
            .hooks
            .values()
            .map(|b| b.rank() * b.dim())
            .sum()
    }
}

/// Per-step losses emitted by projection training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_unlearn: f64,
    pub loss_retain: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompositeLoss {
    pub total: f64,
    pub loss_unlearn: f64,
    pub loss_retain: f64,
    pub cap_active: bool,
}

/// `-min(L_unl, τ) + α·L_ret`.
pub fn combine_composite(loss_unl: f64, loss_ret: f64, alpha: f64, cap: f64) -> CompositeLoss {
    let capped = loss_unl.min(cap);
    CompositeLoss {
        total: -capped + alpha * loss_ret,
        loss_unlearn: loss_unl,
        loss_retain: loss_ret,
        cap_active: loss_unl >= cap,
    }
}

/// Mean post-projection hidden state at the masked positions of each of the
/// first `k_samples` examples, captured at `layer` with current hooks active.
pub fn extract_hidden_states(
    model: &HookedModel,
    data: &[TrainExample],
    layer: usize,
    k_samples: usize,
) -> Result<Matrix> {
    let mut multi = extract_hidden_states_multi(model, data, &[layer], k_samples)?;
    Ok(multi.remove(&layer).expect("requested layer present"))
}

/// One forward sweep capturing several layers at once.
pub fn extract_hidden_states_multi(
    model: &HookedModel,
    data: &[TrainExample],
    layers: &[usize],
    k_samples: usize,
) -> Result<BTreeMap<usize, Matrix>> {
    if data.len() < k_samples || k_samples == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least {k_samples} examples, got {}",
            data.len()
        )));
    }
    let n_blocks = model.base.config.n_blocks;
    for &l in layers {
        if l >= n_blocks {
            return Err(Error::InvalidLayer(l));
        }
    }
    let d = model.base.config.d_model;
    let capture: BTreeSet<usize> = layers.iter().copied().collect();
    let mut out: BTreeMap<usize, Matrix> = layers
        .iter()
        .map(|&l| (l, Matrix::zeros(k_samples, d)))
        .collect();

    let mut row = 0usize;
    for chunk in data[..k_samples].chunks(32) {
        let refs: Vec<&TrainExample> = chunk.iter().collect();
        let batch = batch_examples(&refs)?;
        let fwd = forward(model, &batch, &capture)?;
        for (&layer, states) in &fwd.captured {
            let dst = out.get_mut(&layer).expect("captured layer requested");
            for (i, _) in chunk.iter().enumerate() {
                let mut acc = vec![0.0; d];
                let mut n = 0usize;
                for t in 0..batch.len {
                    if batch.mask[i * batch.len + t] {
                        let s = &states[(i * batch.len + t) * d..(i * batch.len + t + 1) * d];
                        for (a, &v) in acc.iter_mut().zip(s) {
                            *a += v;
                        }
                        n += 1;
                    }
                }
                let inv = 1.0 / n as f64;
                for (o, a) in dst.row_mut(row + i).iter_mut().zip(&acc) {
                    *o = a * inv;
                }
            }
        }
        row += chunk.len();
    }
    Ok(out)
}

/// Basis initialization: orthogonalize against the retain representation,
/// take the leading directions of the projected unlearn states, and merge
/// with the previous basis.
///
/// Guarantees: the new rows annihilate every supplied retain state (within
/// 1e-8 relative), and the previous row space is contained in the result.
pub fn init_projection(
    q_prev: &ProjectionBasis,
    retain_states: &Matrix,
    unlearn_states: &Matrix,
    k: usize,
) -> Result<ProjectionBasis> {
    if retain_states.cols != unlearn_states.cols || retain_states.cols != q_prev.dim() {
        return Err(Error::DimensionMismatch {
            expected: q_prev.dim(),
            got: retain_states.cols.min(unlearn_states.cols),
            context: "init_projection state width",
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    let q_ret = qr_orthobasis(retain_states, DEFAULT_RANK_TOL)?;

    let mut projected = Matrix::zeros(unlearn_states.rows, unlearn_states.cols);
    let mut any_alive = false;
    for i in 0..unlearn_states.rows {
        let original = unlearn_states.row(i);
        let p = apply_projection(&q_ret, original)?;
        if norm(&p) > 1e-8 * norm(original).max(f64::MIN_POSITIVE) {
            any_alive = true;
        }
        projected.row_mut(i).copy_from_slice(&p);
    }
    if !any_alive {
        return Err(Error::DegenerateSubspace(
            "every unlearn state lies in the retain space; nothing to project away".into(),
        ));
    }

    let q_init = crate::linalg::pca_top_k(&projected, k)?;
    if q_init.rows < k {
        return Err(Error::DegenerateSubspace(format!(
            "projected unlearn states span only {} directions, {k} requested",
            q_init.rows
        )));
    }

    let mut stacked_rows: Vec<&[f64]> = Vec::with_capacity(q_prev.rank() + k);
    for i in 0..q_prev.rank() {
        stacked_rows.push(q_prev.rows().row(i));
    }
    for i in 0..q_init.rows {
        stacked_rows.push(q_init.row(i));
    }
    let stacked = Matrix::from_rows(q_prev.dim(), &stacked_rows)?;
    let combined = qr_orthobasis(&stacked, DEFAULT_RANK_TOL)?;
    if combined.rank() != q_prev.rank() + k {
        return Err(Error::DegenerateSubspace(format!(
            "combined basis collapsed to rank {} (previous {} + {k} new expected)",
            combined.rank(),
            q_prev.rank()
        )));
    }
    Ok(combined)
}

/// Forward-only composite loss (both terms, no gradients).
pub fn composite_loss(
    model: &HookedModel,
    batch_unl: &crate::nanomodel::Batch,
    batch_ret: &crate::nanomodel::Batch,
    alpha: f64,
    cap: f64,
) -> Result<CompositeLoss> {
    let l_unl = crate::nanomodel::loss_ce(model, batch_unl)?;
    let l_ret = crate::nanomodel::loss_ce(model, batch_ret)?;
    Ok(combine_composite(l_unl, l_ret, alpha, cap))
}

/// Composite loss and its gradients. The unlearn term contributes no
/// gradient once it exceeds the cap.
pub fn composite_grads(
    model: &HookedModel,
    batch_unl: &crate::nanomodel::Batch,
    batch_ret: &crate::nanomodel::Batch,
    alpha: f64,
    cap: f64,
    scope: Scope,
) -> Result<(CompositeLoss, GradBundle)> {
    let (l_unl, mut bundle) =
        grads_with(model, batch_unl, scope, |l| if l < cap { -1.0 } else { 0.0 })?;
    let (l_ret, ret_bundle) = grads_scaled(model, batch_ret, scope, alpha)?;
    bundle.add_scaled(&ret_bundle, 1.0);
    Ok((combine_composite(l_unl, l_ret, alpha, cap), bundle))
}

/// Optimizes the trainable (newly added) basis rows with AdamW while the
/// base weights and all earlier rows stay fixed; after every step each basis
/// is re-orthonormalized so the hook stays an exact projection.
#[allow(clippy::too_many_arguments)]
pub fn train_projection(
    model: &mut HookedModel,
    state: &mut HookState,
    d_unl: &[TrainExample],
    d_ret: &[TrainExample],
    cfg: &MrpConfig,
    stage: usize,
    seed: u64,
    logs: &mut Vec<StepLog>,
) -> Result<()> {
    cfg.validate()?;
    if d_unl.is_empty() || d_ret.is_empty() {
        return Err(Error::InvalidInput("training sets must be non-empty".into()));
    }
    let cap = cfg.cap_for_vocab(model.base.config.vocab);
    let mut rng = substream(seed, &format!("train-projection/{stage}"));

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
            let (loss, bundle) =
                composite_grads(model, &batch_unl, &batch_ret, cfg.alpha, cap, Scope::HookBases)?;
            apply_basis_update(model, state, &bundle, cfg)?;
            logs.push(StepLog {
                stage,
                epoch,
                step,
                loss_unlearn: loss.loss_unlearn,
                loss_retain: loss.loss_retain,
                composite: loss.total,
            });
        }
    }
    Ok(())
}

fn apply_basis_update(
    model: &mut HookedModel,
    state: &mut HookState,
    bundle: &GradBundle,
    cfg: &MrpConfig,
) -> Result<()> {
    let d = model.base.config.d_model;
    for (&layer, grad) in &bundle.hooks {
        let ls = state
            .layers
            .get_mut(&layer)
            .ok_or_else(|| Error::InvalidLayer(layer))?;
        let basis = model.hooks.get(&layer).expect("hooked layer present");
        let rank = basis.rank();
        let frozen = ls.frozen_rank;
        if frozen >= rank {
            continue; // nothing trainable at this layer
        }
        let rows = basis.rows();
        let mut trainable: Vec<f64> = rows.data[frozen * d..rank * d].to_vec();
        let gslice = &grad.data[frozen * d..rank * d];
        adamw_step(&mut trainable, gslice, &mut ls.optimizer, cfg.lr, 0.0)?;

        let mut new_rows = rows.clone();
        new_rows.data[frozen * d..rank * d].copy_from_slice(&trainable);

        if cfg.reortho_every_step {
            let frozen_basis = ProjectionBasis::from_rows_unchecked(Matrix::from_vec(
                frozen,
                d,
                rows.data[..frozen * d].to_vec(),
            )?);
            let mut updated = Matrix::from_vec(rank - frozen, d, trainable)?;
            for i in 0..updated.rows {
                let p = apply_projection(&frozen_basis, updated.row(i))?;
                updated.row_mut(i).copy_from_slice(&p);
            }
            let ortho = qr_orthobasis(&updated, DEFAULT_RANK_TOL)?;
            if ortho.rank() != rank - frozen {
                return Err(Error::RankCollapse(format!(
                    "layer {layer}: trainable rows collapsed to rank {} of {}",
                    ortho.rank(),
                    rank - frozen
                )));
            }
            new_rows.data[frozen * d..rank * d].copy_from_slice(&ortho.rows().data);
            model
                .set_hook(layer, ProjectionBasis::from_rows(new_rows)?)
                .expect("validated layer");
        } else {
            model
                .set_hook(layer, ProjectionBasis::from_rows_unchecked(new_rows))
                .expect("validated layer");
        }
    }
    Ok(())
}

/// One unlearning request: snapshot, extract, initialize, train, commit.
/// Every hooked layer's rank grows by exactly `dims_per_task`.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_task(
    model: &mut HookedModel,
    state: &mut HookState,
    d_unl: &[TrainExample],
    d_ret: &[TrainExample],
    cfg: &MrpConfig,
    stage: usize,
    seed: u64,
    logs: &mut Vec<StepLog>,
) -> Result<()> {
    cfg.validate()?;
    let d = model.base.config.d_model;
    if d_unl.len() < cfg.init_samples || d_ret.len() < cfg.init_samples {
        return Err(Error::InvalidInput(format!(
            "need at least K = {} examples on both sides, got {} unlearn / {} retain",
            cfg.init_samples,
            d_unl.len(),
            d_ret.len()
        )));
    }
    for &layer in &cfg.hooked_layers {
        state.layers.entry(layer).or_insert_with(|| LayerHookState {
            prev_snapshot: ProjectionBasis::empty(d),
            frozen_rank: 0,
            optimizer: AdamState::new(0),
        });
        model.hooks.entry(layer).or_insert_with(|| ProjectionBasis::empty(d));
    }

    // Snapshot previous bases, then extract states with current hooks active.
    for (&layer, ls) in state.layers.iter_mut() {
        ls.prev_snapshot = model.hooks[&layer].clone();
    }
    let ret_states =
        extract_hidden_states_multi(model, d_ret, &cfg.hooked_layers, cfg.init_samples)?;
    let unl_states =
        extract_hidden_states_multi(model, d_unl, &cfg.hooked_layers, cfg.init_samples)?;

    for &layer in &cfg.hooked_layers {
        let prev = model.hooks[&layer].clone();
        let combined = init_projection(
            &prev,
            &ret_states[&layer],
            &unl_states[&layer],
            cfg.dims_per_task,
        )?;
        let ls = state.layers.get_mut(&layer).expect("initialized above");
        ls.frozen_rank = prev.rank();
        ls.optimizer = AdamState::new(cfg.dims_per_task * d);
        model.set_hook(layer, combined)?;
    }

    train_projection(model, state, d_unl, d_ret, cfg, stage, seed, logs)?;

    for (&layer, ls) in state.layers.iter_mut() {
        ls.prev_snapshot = model.hooks[&layer].clone();
        ls.frozen_rank = model.hooks[&layer].rank();
    }
    Ok(())
}

/// A named unlearning request.
#[derive(Debug, Clone)]
pub struct UnlearnRequest {
    pub name: String,
    pub examples: Vec<TrainExample>,
}

/// Applies the requests in order, invoking `on_stage` after each one with
/// the 1-based stage index.
pub fn continual_unlearn(
    model: &mut HookedModel,
    state: &mut HookState,
    requests: &[UnlearnRequest],
    d_ret: &[TrainExample],
    cfg: &MrpConfig,
    seed: u64,
    logs: &mut Vec<StepLog>,
    mut on_stage: impl FnMut(usize, &HookedModel, &HookState) -> Result<()>,
) -> Result<()> {
    if requests.is_empty() {
        return Err(Error::InvalidInput("no unlearning requests".into()));
    }
    for (i, req) in requests.iter().enumerate() {
        let stage = i + 1;
        let stage_seed = substream_seed(seed, &format!("stage/{}/{}", stage, req.name));
        unlearn_task(model, state, &req.examples, d_ret, cfg, stage, stage_seed, logs)?;
        on_stage(stage, model, state)?;
    }
    Ok(())
}

fn substream_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(seed, name).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn combine_composite_arithmetic() {
        let c = combine_composite(2.0, 1.0, 1.2, f64::INFINITY);
        assert!((c.total - (-0.8)).abs() < 1e-12);
        assert!(!c.cap_active);

        // identical losses at α = 1 cancel
        let c = combine_composite(1.7, 1.7, 1.0, f64::INFINITY);
        assert!(c.total.abs() < 1e-12);

        // active cap
        let c = combine_composite(10.0, 0.5, 1.2, 6.0);
        assert!((c.total - (-6.0 + 1.2 * 0.5)).abs() < 1e-12);
        assert!(c.cap_active);
    }

    #[test]
    fn init_projection_hand_oracle() {
        // Retain spans e₁; unlearn states along e₁+e₂. Projecting off e₁
        // leaves e₂, so the new basis must be ±e₂.
        let d = 3;
        let retain = Matrix::from_rows(d, &[&unit(d, 0)[..], &unit(d, 0)[..]]).unwrap();
        let u: Vec<f64> = vec![1.0, 1.0, 0.0];
        let unlearn = Matrix::from_rows(d, &[&u[..], &u[..]]).unwrap();
        let q = init_projection(&ProjectionBasis::empty(d), &retain, &unlearn, 1).unwrap();
        assert_eq!(q.rank(), 1);
        assert!((q.rows().row(0)[1].abs() - 1.0).abs() < 1e-10);
        assert!(q.rows().row(0)[0].abs() < 1e-10);
        assert!(q.rows().row(0)[2].abs() < 1e-10);

        // With a previous basis along e₃ the result spans {e₂, e₃}.
        let prev_rows = Matrix::from_rows(d, &[&unit(d, 2)[..]]).unwrap();
        let prev = ProjectionBasis::from_rows(prev_rows).unwrap();
        let q2 = init_projection(&prev, &retain, &unlearn, 1).unwrap();
        assert_eq!(q2.rank(), 2);
        for basis_vec in [unit(d, 1), unit(d, 2)] {
            let resid = apply_projection(&q2, &basis_vec).unwrap();
            assert!(norm(&resid) < 1e-8, "{basis_vec:?} not in combined span");
        }
    }

    #[test]
    fn init_projection_annihilates_retain_states() {
        use rand::Rng;
        let mut rng = crate::rng::substream(5, "test");
        let d = 16;
        let kr = 6;
        let retain_raw: Vec<f64> = (0..kr * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let retain = Matrix::from_vec(kr, d, retain_raw).unwrap();
        let unl_raw: Vec<f64> = (0..10 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let unlearn_m = Matrix::from_vec(10, d, unl_raw).unwrap();
        let q = init_projection(&ProjectionBasis::empty(d), &retain, &unlearn_m, 2).unwrap();
        // Only the NEW rows must annihilate retain states; prev is empty so
        // all rows qualify here.
        for i in 0..retain.rows {
            let h = retain.row(i);
            for r in 0..q.rank() {
                assert!(dot(q.rows().row(r), h).abs() <= 1e-8 * norm(h));
            }
        }
    }

    #[test]
    fn init_projection_degenerate_when_retain_spans_everything() {
        let d = 3;
        let retain = Matrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let unlearn = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        assert!(matches!(
            init_projection(&ProjectionBasis::empty(d), &retain, &unlearn, 1),
            Err(Error::DegenerateSubspace(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MrpConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 1.2;
        cfg.hooked_layers = vec![2, 2];
        assert!(cfg.validate().is_err());
        assert!((MrpConfig::default().cap_for_vocab(512) - 2.0 * 512f64.ln()).abs() < 1e-12);
    }
}
