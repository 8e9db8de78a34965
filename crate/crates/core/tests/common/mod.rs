//! Shared test oracles, independent of the library's compute paths.

#![allow(dead_code)]

use mrplab::linalg::{dot, norm, Matrix};
use mrplab::nanomodel::{Batch, HookedModel, ModelConfig};
use mrplab::Result;

// ---------------------------------------------------------------------------
// Modified Gram-Schmidt span oracle
// ---------------------------------------------------------------------------

/// Orthonormal basis of the row space by two-pass modified Gram-Schmidt.
pub fn mgs_basis(rows: &Matrix, tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let largest = (0..rows.rows)
        .map(|i| norm(rows.row(i)))
        .fold(0.0f64, f64::max);
    for i in 0..rows.rows {
        let mut v = rows.row(i).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (vj, bj) in v.iter_mut().zip(b) {
                    *vj -= c * bj;
                }
            }
        }
        let n = norm(&v);
        if n > tol * largest {
            for vj in v.iter_mut() {
                *vj /= n;
            }
            basis.push(v);
        }
    }
    basis
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ParamRef {
    Base(usize),
    Hook { layer: usize, idx: usize },
}

pub fn param_get(model: &HookedModel, p: &ParamRef) -> f64 {
    match p {
        ParamRef::Base(i) => model.base.params[*i],
        ParamRef::Hook { layer, idx } => model.hooks[layer].rows().data[*idx],
    }
}

pub fn param_set(model: &mut HookedModel, p: &ParamRef, v: f64) {
    match p {
        ParamRef::Base(i) => model.base.params[*i] = v,
        ParamRef::Hook { layer, idx } => {
            let basis = model.hooks.get_mut(layer).unwrap();
            let mut rows = basis.rows().clone();
            rows.data[*idx] = v;
            *basis = mrplab::linalg::ProjectionBasis::from_rows_unchecked(rows);
        }
    }
}

/// Central finite difference of `loss` along one parameter.
pub fn fd_grad(
    model: &mut HookedModel,
    p: &ParamRef,
    h: f64,
    loss: &mut impl FnMut(&HookedModel) -> Result<f64>,
) -> Result<f64> {
    let orig = param_get(model, p);
    param_set(model, p, orig + h);
    let lp = loss(model)?;
    param_set(model, p, orig - h);
    let lm = loss(model)?;
    param_set(model, p, orig);
    Ok((lp - lm) / (2.0 * h))
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up on finite-difference noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

// ---------------------------------------------------------------------------
// Naive forward-pass oracle: straightforward per-token reimplementation
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&xi, (&gi, &bi))| gi * (xi - mean) * rstd + bi)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + 0.044715 * x * x * x)).tanh())
}

fn linear(x: &[f64], w: &[f64], bias: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|o| {
            let mut s = bias[o];
            for (i, &xi) in x.iter().enumerate().take(n_in) {
                s += xi * w[i * n_out + o];
            }
            s
        })
        .collect()
}

pub struct NaiveForward {
    /// Post-projection block outputs per block: [block][position][dim].
    pub block_states: Vec<Vec<Vec<f64>>>,
    /// Logits per position: [position][vocab].
    pub logits: Vec<Vec<f64>>,
}

/// Re-derives the hooked forward pass for one sequence with plain per-token
/// loops and no shared code with the library implementation.
pub fn naive_forward(model: &HookedModel, tokens: &[u32]) -> NaiveForward {
    let cfg: &ModelConfig = &model.base.config;
    let d = cfg.d_model;
    let hd = cfg.d_model / cfg.n_heads;
    let l = tokens.len();
    let t_of = |name: &str| model.base.tensor(name).to_vec();

    let tok_emb = t_of("embed.tok");
    let pos_emb = t_of("embed.pos");
    let mut x: Vec<Vec<f64>> = (0..l)
        .map(|t| {
            let tok = tokens[t] as usize;
            (0..d)
                .map(|i| tok_emb[tok * d + i] + pos_emb[t * d + i])
                .collect()
        })
        .collect();

    let mut block_states = Vec::new();
    for bi in 0..cfg.n_blocks {
        let g1 = t_of(&format!("block{bi}.ln1.g"));
        let b1n = t_of(&format!("block{bi}.ln1.b"));
        let wq = t_of(&format!("block{bi}.attn.wq"));
        let bq = t_of(&format!("block{bi}.attn.bq"));
        let wk = t_of(&format!("block{bi}.attn.wk"));
        let bk = t_of(&format!("block{bi}.attn.bk"));
        let wv = t_of(&format!("block{bi}.attn.wv"));
        let bv = t_of(&format!("block{bi}.attn.bv"));
        let wo = t_of(&format!("block{bi}.attn.wo"));
        let bo = t_of(&format!("block{bi}.attn.bo"));
        let g2 = t_of(&format!("block{bi}.ln2.g"));
        let b2n = t_of(&format!("block{bi}.ln2.b"));
        let w1 = t_of(&format!("block{bi}.mlp.w1"));
        let bias1 = t_of(&format!("block{bi}.mlp.b1"));
        let w2 = t_of(&format!("block{bi}.mlp.w2"));
        let bias2 = t_of(&format!("block{bi}.mlp.b2"));
        let hidden = cfg.d_model * cfg.mlp_expansion;

        let normed: Vec<Vec<f64>> = x.iter().map(|row| ln_row(row, &g1, &b1n)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &wq, &bq, d, d)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &wk, &bk, d, d)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &wv, &bv, d, d)).collect();

        for t in 0..l {
            let mut att = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let ho = h * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        let mut s = 0.0;
                        for i in 0..hd {
                            s += q[t][ho + i] * k[j][ho + i];
                        }
                        s / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / z;
                    for i in 0..hd {
                        att[ho + i] += p * v[j][ho + i];
                    }
                }
            }
            let o = linear(&att, &wo, &bo, d, d);
            for i in 0..d {
                x[t][i] += o[i];
            }
        }

        for t in 0..l {
            let m2 = ln_row(&x[t], &g2, &b2n);
            let h1: Vec<f64> = linear(&m2, &w1, &bias1, d, hidden)
                .into_iter()
                .map(gelu)
                .collect();
            let h2 = linear(&h1, &w2, &bias2, hidden, d);
            for i in 0..d {
                x[t][i] += h2[i];
            }
        }

        if let Some(basis) = model.hooks.get(&bi) {
            for row in x.iter_mut() {
                // x ← x − Qᵀ(Qx), written out directly
                let qm = basis.rows();
                let coeffs: Vec<f64> = (0..basis.rank()).map(|r| dot(qm.row(r), row)).collect();
                for (r, c) in coeffs.iter().enumerate() {
                    for (xi, qi) in row.iter_mut().zip(qm.row(r)) {
                        *xi -= c * qi;
                    }
                }
            }
        }
        block_states.push(x.clone());
    }

    let gf = t_of("final.ln.g");
    let bf = t_of("final.ln.b");
    let hw = t_of("head.w");
    let hb = t_of("head.b");
    let logits: Vec<Vec<f64>> = x
        .iter()
        .map(|row| linear(&ln_row(row, &gf, &bf), &hw, &hb, d, cfg.vocab))
        .collect();

    NaiveForward {
        block_states,
        logits,
    }
}

/// Cross-entropy at one position from raw logits, via explicit log-softmax.
pub fn naive_ce(logits: &[f64], label: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    -(logits[label] - mx - z.ln())
}

// ---------------------------------------------------------------------------
// Small model/batch builders
// ---------------------------------------------------------------------------

pub fn small_config(d_model: usize, n_blocks: usize) -> ModelConfig {
    ModelConfig {
        vocab: 64,
        d_model,
        n_blocks,
        n_heads: 2,
        context_len: 12,
        mlp_expansion: 4,
    }
}

pub fn random_batch(cfg: &ModelConfig, batch: usize, len: usize, seed: u64) -> Batch {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(batch * len);
    let mut mask = vec![false; batch * len];
    let mut labels = vec![0u32; batch * len];
    for b in 0..batch {
        for _ in 0..len {
            tokens.push(rng.gen_range(0..cfg.vocab as u32));
        }
        let pos = rng.gen_range(0..len - 1);
        mask[b * len + pos] = true;
        labels[b * len + pos] = rng.gen_range(0..cfg.vocab as u32);
    }
    Batch::new(batch, len, tokens, mask, labels).unwrap()
}
