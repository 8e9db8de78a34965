//! Analytic gradients vs central finite differences on a small config.

mod common;



use common::{fd_grad, param_get, param_set, rel_err, ParamRef};
use mrplab::linalg::{qr_orthobasis, Matrix};
use mrplab::nanomodel::{
    grads, grads_scaled, loss_ce, BaseModel, HookedModel, Scope,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn hooked_test_model(seed: u64) -> HookedModel {
    let cfg = common::small_config(16, 1);
    let mut rng = StdRng::seed_from_u64(seed);
    let base = BaseModel::init(cfg, &mut rng).unwrap();
    let raw: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let basis = qr_orthobasis(&Matrix::from_vec(2, 16, raw).unwrap(), 1e-8).unwrap();
    let mut model = HookedModel::unhooked(base);
    model.set_hook(0, basis).unwrap();
    model
}

/// A spread of indices per tensor: ends plus strided interior points.
fn sample_indices(len: usize, per_tensor: usize, rng: &mut StdRng) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    let mut idx = vec![0, len - 1];
    while idx.len() < per_tensor {
        idx.push(rng.gen_range(0..len));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[test]
fn base_weight_gradients_match_finite_differences() {
    let mut model = hooked_test_model(11);
    let batch = common::random_batch(&model.base.config, 3, 8, 5);
    let (_, bundle) = grads(&model, &batch, Scope::Both).unwrap();
    let analytic = bundle.base.unwrap();

    let mut rng = StdRng::seed_from_u64(99);
    let specs = model.base.layout.tensors.clone();
    let mut worst: (f64, String) = (0.0, String::new());
    for spec in &specs {
        for i in sample_indices(spec.len, 8, &mut rng) {
            let p = ParamRef::Base(spec.offset + i);
            let fd = fd_grad(&mut model, &p, FD_STEP, &mut |m| loss_ce(m, &batch)).unwrap();
            let a = analytic[spec.offset + i];
            let e = rel_err(a, fd);
            if e > worst.0 {
                worst = (e, format!("{}[{i}]", spec.name));
            }
            assert!(
                e <= TOL,
                "gradient mismatch at {}[{i}]: analytic {a}, fd {fd}, rel {e}",
                spec.name
            );
        }
    }
    println!("worst base-weight rel err: {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn hook_basis_gradients_match_finite_differences() {
    let mut model = hooked_test_model(13);
    let batch = common::random_batch(&model.base.config, 3, 8, 7);
    let (_, bundle) = grads(&model, &batch, Scope::HookBases).unwrap();
    assert!(bundle.base.is_none());
    let dq = bundle.hooks.get(&0).unwrap().clone();

    for idx in 0..dq.data.len() {
        let p = ParamRef::Hook { layer: 0, idx };
        let fd = fd_grad(&mut model, &p, FD_STEP, &mut |m| loss_ce(m, &batch)).unwrap();
        let a = dq.data[idx];
        assert!(
            rel_err(a, fd) <= TOL,
            "hook gradient mismatch at Q[{idx}]: analytic {a}, fd {fd}"
        );
    }
}

#[test]
fn gradients_scale_linearly_with_loss() {
    let model = hooked_test_model(17);
    let batch = common::random_batch(&model.base.config, 2, 6, 3);
    let (l1, g1) = grads_scaled(&model, &batch, Scope::Both, 1.0).unwrap();
    let (l2, g2) = grads_scaled(&model, &batch, Scope::Both, 2.0).unwrap();
    assert_eq!(l1, l2);
    let (b1, b2) = (g1.base.unwrap(), g2.base.unwrap());
    for (a, b) in b1.iter().zip(&b2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    for (layer, h1) in &g1.hooks {
        let h2 = &g2.hooks[layer];
        for (a, b) in h1.data.iter().zip(&h2.data) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn empty_hook_scope_gives_empty_bundle() {
    let cfg = common::small_config(16, 1);
    let mut rng = StdRng::seed_from_u64(23);
    let model = HookedModel::unhooked(BaseModel::init(cfg, &mut rng).unwrap());
    let batch = common::random_batch(&model.base.config, 2, 6, 9);
    let (_, bundle) = grads(&model, &batch, Scope::HookBases).unwrap();
    assert!(bundle.base.is_none());
    assert!(bundle.hooks.is_empty());
}

#[test]
fn scope_selects_exactly_the_requested_gradients() {
    let model = hooked_test_model(29);
    let batch = common::random_batch(&model.base.config, 2, 6, 1);
    let (_, only_base) = grads(&model, &batch, Scope::BaseWeights).unwrap();
    assert!(only_base.base.is_some());
    assert!(only_base.hooks.is_empty());
    let (_, only_hooks) = grads(&model, &batch, Scope::HookBases).unwrap();
    assert!(only_hooks.base.is_none());
    assert_eq!(only_hooks.hooks.len(), 1);
    // The two scopes agree with the combined computation.
    let (_, both) = grads(&model, &batch, Scope::Both).unwrap();
    assert_eq!(both.base.as_ref().unwrap(), only_base.base.as_ref().unwrap());
    assert_eq!(
        both.hooks.get(&0).unwrap(),
        only_hooks.hooks.get(&0).unwrap()
    );
}

/// Perturbing a hook entry must change loss in the direction the analytic
/// gradient predicts even though the perturbed rows are not orthonormal.
#[test]
fn hook_gradient_predicts_off_manifold_loss_change() {
    let mut model = hooked_test_model(31);
    let batch = common::random_batch(&model.base.config, 2, 6, 11);
    let (l0, bundle) = grads(&model, &batch, Scope::HookBases).unwrap();
    let dq = bundle.hooks.get(&0).unwrap();
    let (mut best_idx, mut best_mag) = (0, 0.0);
    for (i, v) in dq.data.iter().enumerate() {
        if v.abs() > best_mag {
            best_mag = v.abs();
            best_idx = i;
        }
    }
    let p = ParamRef::Hook {
        layer: 0,
        idx: best_idx,
    };
    let step = 1e-3;
    let orig = param_get(&model, &p);
    param_set(&mut model, &p, orig - step * dq.data[best_idx].signum());
    let l1 = loss_ce(&model, &batch).unwrap();
    assert!(l1 < l0, "loss must drop along -grad: {l1} !< {l0}");
}

#[test]
fn forward_matches_naive_oracle_with_hook() {
    let model = hooked_test_model(37);
    let cfg = &model.base.config;
    let mut rng = StdRng::seed_from_u64(41);
    let len = 7;
    let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
    let mut mask = vec![false; len];
    mask[len - 2] = true;
    let batch = mrplab::nanomodel::Batch::new(1, len, tokens.clone(), mask, vec![0; len]).unwrap();

    let capture: std::collections::BTreeSet<usize> = [0usize].into_iter().collect();
    let out = mrplab::nanomodel::forward(&model, &batch, &capture).unwrap();
    let oracle = common::naive_forward(&model, &tokens);

    for t in 0..len {
        for v in 0..cfg.vocab {
            let got = out.logit_row(0, t)[v];
            let want = oracle.logits[t][v];
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "logit mismatch at t={t} v={v}: {got} vs {want}"
            );
        }
    }
    let captured = out.captured.get(&0).unwrap();
    for t in 0..len {
        for i in 0..cfg.d_model {
            let got = captured[t * cfg.d_model + i];
            let want = oracle.block_states[0][t][i];
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

#[test]
fn hook_annihilates_coordinate_and_matches_zeroed_recomputation() {
    // Rank-1 hook on e₁: the captured state's first coordinate is exactly 0
    // and downstream logits equal a manual recomputation from that state.
    let cfg = common::small_config(4, 1);
    let mut rng = StdRng::seed_from_u64(43);
    let base = BaseModel::init(cfg.clone(), &mut rng).unwrap();
    let mut model = HookedModel::unhooked(base);
    let e1 = Matrix::from_vec(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    model
        .set_hook(0, mrplab::linalg::ProjectionBasis::from_rows(e1).unwrap())
        .unwrap();

    let tokens = vec![3u32];
    let batch =
        mrplab::nanomodel::Batch::new(1, 1, tokens.clone(), vec![true], vec![1]).unwrap();
    let capture: std::collections::BTreeSet<usize> = [0usize].into_iter().collect();
    let out = mrplab::nanomodel::forward(&model, &batch, &capture).unwrap();
    let state = out.captured.get(&0).unwrap();
    assert_eq!(state[0], 0.0, "projected coordinate must be exactly zero");

    // Unhooked forward, then zero the coordinate by hand and re-run the tail.
    let unhooked = HookedModel::unhooked(model.base.clone());
    let plain = common::naive_forward(&unhooked, &tokens);
    let mut zeroed = plain.block_states[0][0].clone();
    zeroed[0] = 0.0;
    for (a, b) in state.iter().zip(&zeroed) {
        assert!((a - b).abs() <= 1e-12);
    }
    let hooked_oracle = common::naive_forward(&model, &tokens);
    for v in 0..cfg.vocab {
        let got = out.logit_row(0, 0)[v];
        let want = hooked_oracle.logits[0][v];
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn forward_with_no_hooks_is_bit_identical_to_rank0_hooks() {
    let cfg = common::small_config(16, 2);
    let mut rng = StdRng::seed_from_u64(47);
    let base = BaseModel::init(cfg, &mut rng).unwrap();
    let empty = HookedModel::unhooked(base.clone());
    let mut rank0 = HookedModel::unhooked(base);
    rank0
        .set_hook(1, mrplab::linalg::ProjectionBasis::empty(16))
        .unwrap();
    let no_capture = std::collections::BTreeSet::new();
    for seed in 0..5 {
        let batch = common::random_batch(&empty.base.config, 3, 9, seed);
        let a = mrplab::nanomodel::forward(&empty, &batch, &no_capture).unwrap();
        let b = mrplab::nanomodel::forward(&rank0, &batch, &no_capture).unwrap();
        assert_eq!(a.logits, b.logits, "bit-identical logits required");
    }
}
