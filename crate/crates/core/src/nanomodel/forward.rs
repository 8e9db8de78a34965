//! Forward pass, activation trace, and reverse-mode gradients.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{Batch, GradBundle, HookedModel, ParamLayout, Scope};

const LN_EPS: f64 = 1e-5;
const GELU_S: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

// ---------------------------------------------------------------------------
// Flat matmul kernels over row-major buffers
// ---------------------------------------------------------------------------

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · bᵀ where b is stored n×k
fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += crate::linalg::dot(arow, brow);
        }
    }
}

/// out[k×n] += aᵀ · b where a is m×k and b is m×n
fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_bias(x: &mut [f64], rows: usize, n: usize, bias: &[f64]) {
    for r in 0..rows {
        for (v, &b) in x[r * n..(r + 1) * n].iter_mut().zip(bias) {
            *v += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Per-block parameter views
// ---------------------------------------------------------------------------

struct BlockOff {
    ln1_g: std::ops::Range<usize>,
    ln1_b: std::ops::Range<usize>,
    wq: std::ops::Range<usize>,
    bq: std::ops::Range<usize>,
    wk: std::ops::Range<usize>,
    bk: std::ops::Range<usize>,
    wv: std::ops::Range<usize>,
    bv: std::ops::Range<usize>,
    wo: std::ops::Range<usize>,
    bo: std::ops::Range<usize>,
    ln2_g: std::ops::Range<usize>,
    ln2_b: std::ops::Range<usize>,
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl BlockOff {
    fn new(layout: &ParamLayout, b: usize) -> Self {
        BlockOff {
            ln1_g: layout.range(&format!("block{b}.ln1.g")),
            ln1_b: layout.range(&format!("block{b}.ln1.b")),
            wq: layout.range(&format!("block{b}.attn.wq")),
            bq: layout.range(&format!("block{b}.attn.bq")),
            wk: layout.range(&format!("block{b}.attn.wk")),
            bk: layout.range(&format!("block{b}.attn.bk")),
            wv: layout.range(&format!("block{b}.attn.wv")),
            bv: layout.range(&format!("block{b}.attn.bv")),
            wo: layout.range(&format!("block{b}.attn.wo")),
            bo: layout.range(&format!("block{b}.attn.bo")),
            ln2_g: layout.range(&format!("block{b}.ln2.g")),
            ln2_b: layout.range(&format!("block{b}.ln2.b")),
            w1: layout.range(&format!("block{b}.mlp.w1")),
            b1: layout.range(&format!("block{b}.mlp.b1")),
            w2: layout.range(&format!("block{b}.mlp.w2")),
            b2: layout.range(&format!("block{b}.mlp.b2")),
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Writes normalized output into `out`; records x̂ and 1/σ per row.
fn layernorm_fwd(
    x: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    b: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for r in 0..rows {
        let xi = &x[r * d..(r + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            let h = (xi[i] - mean) * rs;
            xh[i] = h;
            o[i] = g[i] * h + b[i];
        }
    }
}

/// dx += backward(dy); accumulates dg/db when provided.
#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    dy: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dx: &mut [f64],
    mut dgb: Option<(&mut [f64], &mut [f64])>,
) {
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let rs = rstd[r];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[i];
        }
        let inv_d = 1.0 / d as f64;
        let a = sum_dxhat * inv_d;
        let c = sum_dxhat_xhat * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dxr[i] += rs * (dxh - a - xh[i] * c);
        }
        if let Some((dg, db)) = dgb.as_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trace and forward pass
// ---------------------------------------------------------------------------

struct BlockTrace {
    ln1_out: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // B × heads × L × L, causal upper part zero
    att_concat: Vec<f64>,
    ln2_out: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
    /// Block output before the hook projection; kept only for hooked blocks.
    x_pre_proj: Option<Vec<f64>>,
}

struct Trace {
    blocks: Vec<BlockTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    final_y: Vec<f64>,
}

pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    /// Post-projection block outputs for each requested layer, B×L×d.
    pub captured: BTreeMap<usize, Vec<f64>>,
}

impl ForwardOutput {
    #[inline]
    pub fn logit_row(&self, b: usize, t: usize) -> &[f64] {
        let r = b * self.len + t;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }
}

fn run_forward(
    model: &HookedModel,
    batch: &Batch,
    capture: &BTreeSet<usize>,
    want_trace: bool,
) -> Result<(ForwardOutput, Option<Trace>)> {
    let cfg = &model.base.config;
    batch.check_against(cfg)?;
    for &layer in capture {
        if layer >= cfg.n_blocks {
            return Err(Error::InvalidLayer(layer));
        }
    }

    let d = cfg.d_model;
    let hidden = cfg.mlp_hidden();
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let l = batch.len;
    let m = batch.batch * l;
    let params = &model.base.params;
    let layout = &model.base.layout;

    // Embedding
    let tok_emb = &params[layout.range("embed.tok")];
    let pos_emb = &params[layout.range("embed.pos")];
    let mut x = vec![0.0; m * d];
    for b in 0..batch.batch {
        for t in 0..l {
            let tok = batch.tokens[b * l + t] as usize;
            let row = &mut x[(b * l + t) * d..(b * l + t + 1) * d];
            for (o, (&e, &p)) in row
                .iter_mut()
                .zip(tok_emb[tok * d..(tok + 1) * d].iter().zip(&pos_emb[t * d..(t + 1) * d]))
            {
                *o = e + p;
            }
        }
    }

    let mut blocks = Vec::with_capacity(if want_trace { cfg.n_blocks } else { 0 });
    let mut captured = BTreeMap::new();
    let scale = 1.0 / (hd as f64).sqrt();

    for bi in 0..cfg.n_blocks {
        let off = BlockOff::new(layout, bi);

        // ln1 → attention
        let mut ln1_out = vec![0.0; m * d];
        let mut ln1_xhat = vec![0.0; m * d];
        let mut ln1_rstd = vec![0.0; m];
        layernorm_fwd(
            &x,
            m,
            d,
            &params[off.ln1_g.clone()],
            &params[off.ln1_b.clone()],
            &mut ln1_out,
            &mut ln1_xhat,
            &mut ln1_rstd,
        );

        let mut q = vec![0.0; m * d];
        let mut k = vec![0.0; m * d];
        let mut v = vec![0.0; m * d];
        matmul_nn(&ln1_out, m, d, &params[off.wq.clone()], d, &mut q);
        add_bias(&mut q, m, d, &params[off.bq.clone()]);
        matmul_nn(&ln1_out, m, d, &params[off.wk.clone()], d, &mut k);
        add_bias(&mut k, m, d, &params[off.bk.clone()]);
        matmul_nn(&ln1_out, m, d, &params[off.wv.clone()], d, &mut v);
        add_bias(&mut v, m, d, &params[off.bv.clone()]);

        let mut probs = vec![0.0; batch.batch * heads * l * l];
        let mut att_concat = vec![0.0; m * d];
        for b in 0..batch.batch {
            for h in 0..heads {
                let ho = h * hd;
                for ti in 0..l {
                    let qrow = &q[(b * l + ti) * d + ho..(b * l + ti) * d + ho + hd];
                    let prow = &mut probs
                        [((b * heads + h) * l + ti) * l..((b * heads + h) * l + ti) * l + l];
                    let mut maxs = f64::NEG_INFINITY;
                    for tj in 0..=ti {
                        let krow = &k[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        let s = crate::linalg::dot(qrow, krow) * scale;
                        prow[tj] = s;
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    let mut z = 0.0;
                    for p in prow[..=ti].iter_mut() {
                        *p = (*p - maxs).exp();
                        z += *p;
                    }
                    let inv_z = 1.0 / z;
                    for p in prow[..=ti].iter_mut() {
                        *p *= inv_z;
                    }
                    let orow = &mut att_concat[(b * l + ti) * d + ho..(b * l + ti) * d + ho + hd];
                    for tj in 0..=ti {
                        let p = prow[tj];
                        let vrow = &v[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }

        let mut att_out = vec![0.0; m * d];
        matmul_nn(&att_concat, m, d, &params[off.wo.clone()], d, &mut att_out);
        add_bias(&mut att_out, m, d, &params[off.bo.clone()]);
        for (xi, ai) in x.iter_mut().zip(&att_out) {
            *xi += ai;
        }

        // ln2 → MLP
        let mut ln2_out = vec![0.0; m * d];
        let mut ln2_xhat = vec![0.0; m * d];
        let mut ln2_rstd = vec![0.0; m];
        layernorm_fwd(
            &x,
            m,
            d,
            &params[off.ln2_g.clone()],
            &params[off.ln2_b.clone()],
            &mut ln2_out,
            &mut ln2_xhat,
            &mut ln2_rstd,
        );
        let mut mlp_pre = vec![0.0; m * hidden];
        matmul_nn(&ln2_out, m, d, &params[off.w1.clone()], hidden, &mut mlp_pre);
        add_bias(&mut mlp_pre, m, hidden, &params[off.b1.clone()]);
        let mut mlp_act = vec![0.0; m * hidden];
        for (a, &p) in mlp_act.iter_mut().zip(&mlp_pre) {
            *a = gelu(p);
        }
        let mut mlp_out = vec![0.0; m * d];
        matmul_nn(&mlp_act, m, hidden, &params[off.w2.clone()], d, &mut mlp_out);
        add_bias(&mut mlp_out, m, d, &params[off.b2.clone()]);
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi += mi;
        }

        // Hook projection on the post-block residual state, per token.
        let hook = model.hooks.get(&bi).filter(|basis| basis.rank() > 0);
        let x_pre_proj = if want_trace && hook.is_some() {
            Some(x.clone())
        } else {
            None
        };
        if let Some(basis) = hook {
            for r in 0..m {
                basis.project_in_place(&mut x[r * d..(r + 1) * d]);
            }
        }

        if capture.contains(&bi) {
            captured.insert(bi, x.clone());
        }
        if want_trace {
            blocks.push(BlockTrace {
                ln1_out,
                ln1_xhat,
                ln1_rstd,
                q,
                k,
                v,
                probs,
                att_concat,
                ln2_out,
                ln2_xhat,
                ln2_rstd,
                mlp_pre,
                mlp_act,
                x_pre_proj,
            });
        }
    }

    // Final norm and head
    let mut y = vec![0.0; m * d];
    let mut lnf_xhat = vec![0.0; m * d];
    let mut lnf_rstd = vec![0.0; m];
    layernorm_fwd(
        &x,
        m,
        d,
        &params[layout.range("final.ln.g")],
        &params[layout.range("final.ln.b")],
        &mut y,
        &mut lnf_xhat,
        &mut lnf_rstd,
    );
    let mut logits = vec![0.0; m * cfg.vocab];
    matmul_nn(&y, m, d, &params[layout.range("head.w")], cfg.vocab, &mut logits);
    add_bias(&mut logits, m, cfg.vocab, &params[layout.range("head.b")]);

    let out = ForwardOutput {
        logits,
        batch: batch.batch,
        len: l,
        vocab: cfg.vocab,
        captured,
    };
    let trace = if want_trace {
        Some(Trace {
            blocks,
            lnf_xhat,
            lnf_rstd,
            final_y: y,
        })
    } else {
        None
    };
    Ok((out, trace))
}

/// Hooked forward pass. Projection hooks apply to every token's state after
/// their block; `capture_layers` selects post-projection states to return.
pub fn forward(
    model: &HookedModel,
    batch: &Batch,
    capture_layers: &BTreeSet<usize>,
) -> Result<ForwardOutput> {
    run_forward(model, batch, capture_layers, false).map(|(out, _)| out)
}

/// Mean next-token cross-entropy over masked positions.
pub fn loss_ce(model: &HookedModel, batch: &Batch) -> Result<f64> {
    let out = forward(model, batch, &BTreeSet::new())?;
    masked_ce(&out, batch)
}

pub(crate) fn masked_ce(out: &ForwardOutput, batch: &Batch) -> Result<f64> {
    let count = batch.mask_count();
    if count == 0 {
        return Err(Error::InvalidInput(
            "loss mask marks no positions".into(),
        ));
    }
    let mut total = 0.0;
    for r in 0..batch.batch * batch.len {
        if !batch.mask[r] {
            continue;
        }
        let row = &out.logits[r * out.vocab..(r + 1) * out.vocab];
        let label = batch.labels[r] as usize;
        total += logsumexp(row) - row[label];
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "cross-entropy loss is {loss}"
        )));
    }
    Ok(loss)
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradients of the masked cross-entropy for the requested scope.
pub fn grads(model: &HookedModel, batch: &Batch, scope: Scope) -> Result<(f64, GradBundle)> {
    grads_scaled(model, batch, scope, 1.0)
}

/// Same as [`grads`] with the loss scaled by `coeff`; gradients scale
/// linearly with it.
pub fn grads_scaled(
    model: &HookedModel,
    batch: &Batch,
    scope: Scope,
    coeff: f64,
) -> Result<(f64, GradBundle)> {
    grads_with(model, batch, scope, |_| coeff)
}

/// Gradient computation where the loss coefficient may depend on the loss
/// value itself (capped terms). A zero coefficient skips the backward pass
/// and returns zero gradients.
pub fn grads_with(
    model: &HookedModel,
    batch: &Batch,
    scope: Scope,
    coeff_of_loss: impl FnOnce(f64) -> f64,
) -> Result<(f64, GradBundle)> {
    let (out, trace) = run_forward(model, batch, &BTreeSet::new(), true)?;
    let trace = trace.expect("trace requested");
    let loss = masked_ce(&out, batch)?;
    let coeff = coeff_of_loss(loss);
    if coeff == 0.0 {
        return Ok((loss, zero_bundle(model, scope)));
    }
    let bundle = backward(model, batch, &out, &trace, coeff, scope);
    Ok((loss, bundle))
}

/// A gradient bundle of the right shapes, filled with zeros.
pub fn zero_bundle(model: &HookedModel, scope: Scope) -> GradBundle {
    let base = scope
        .wants_base()
        .then(|| vec![0.0; model.base.layout.total]);
    let mut hooks = BTreeMap::new();
    if scope.wants_hooks() {
        for (&layer, basis) in &model.hooks {
            if basis.rank() > 0 {
                hooks.insert(layer, Matrix::zeros(basis.rank(), basis.dim()));
            }
        }
    }
    GradBundle { base, hooks }
}

fn backward(
    model: &HookedModel,
    batch: &Batch,
    out: &ForwardOutput,
    trace: &Trace,
    coeff: f64,
    scope: Scope,
) -> GradBundle {
    let cfg = &model.base.config;
    let d = cfg.d_model;
    let hidden = cfg.mlp_hidden();
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let l = batch.len;
    let m = batch.batch * l;
    let params = &model.base.params;
    let layout = &model.base.layout;
    let want_base = scope.wants_base();
    let want_hooks = scope.wants_hooks();

    let mut base = if want_base {
        Some(vec![0.0; layout.total])
    } else {
        None
    };
    let mut hook_grads: BTreeMap<usize, Matrix> = BTreeMap::new();
    if want_hooks {
        for (&layer, basis) in &model.hooks {
            if basis.rank() > 0 {
                hook_grads.insert(layer, Matrix::zeros(basis.rank(), basis.dim()));
            }
        }
    }
    // With hook-only scope, nothing below the lowest hooked block carries
    // trainable parameters, so the backward walk can stop there.
    let stop_block = if want_base {
        0
    } else {
        hook_grads.keys().next().copied().unwrap_or(usize::MAX)
    };

    // d(logits): (softmax - onehot) · coeff / mask_count at masked rows.
    let count = batch.mask_count() as f64;
    let masked_rows: Vec<usize> = (0..m).filter(|&r| batch.mask[r]).collect();
    let mut dlogits_rows: Vec<Vec<f64>> = Vec::with_capacity(masked_rows.len());
    for &r in &masked_rows {
        let row = &out.logits[r * out.vocab..(r + 1) * out.vocab];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = p.iter().sum();
        let s = coeff / (z * count);
        for v in p.iter_mut() {
            *v *= s;
        }
        p[batch.labels[r] as usize] -= coeff / count;
        dlogits_rows.push(p);
    }

    // Head backward (masked rows only).
    let head_w = &params[layout.range("head.w")];
    let mut dy = vec![0.0; m * d];
    for (&r, dl) in masked_rows.iter().zip(&dlogits_rows) {
        let yrow = &trace.final_y[r * d..(r + 1) * d];
        let dyrow = &mut dy[r * d..(r + 1) * d];
        for (i, dyi) in dyrow.iter_mut().enumerate() {
            *dyi = crate::linalg::dot(dl, &head_w[i * out.vocab..(i + 1) * out.vocab]);
        }
        if let Some(g) = base.as_mut() {
            let hw = layout.range("head.w");
            let hb = layout.range("head.b");
            for i in 0..d {
                let yv = yrow[i];
                let grow = &mut g[hw.start + i * out.vocab..hw.start + (i + 1) * out.vocab];
                for (gv, &dv) in grow.iter_mut().zip(dl) {
                    *gv += yv * dv;
                }
            }
            for (gv, &dv) in g[hb].iter_mut().zip(dl) {
                *gv += dv;
            }
        }
    }

    // Final LayerNorm backward.
    let mut dx = vec![0.0; m * d];
    {
        let gname = layout.range("final.ln.g");
        let g = params[gname.clone()].to_vec();
        if let Some(gr) = base.as_mut() {
            let bname = layout.range("final.ln.b");
            let (left, right) = split_two(gr, gname.clone(), bname);
            layernorm_bwd(
                &dy,
                m,
                d,
                &g,
                &trace.lnf_xhat,
                &trace.lnf_rstd,
                &mut dx,
                Some((left, right)),
            );
        } else {
            layernorm_bwd(
                &dy,
                m,
                d,
                &g,
                &trace.lnf_xhat,
                &trace.lnf_rstd,
                &mut dx,
                None,
            );
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    for bi in (0..cfg.n_blocks).rev() {
        if bi < stop_block {
            break;
        }
        let tr = &trace.blocks[bi];
        let off = BlockOff::new(layout, bi);

        // Hook projection backward: dQ accumulation then dx ← P dx.
        if let Some(basis) = model.hooks.get(&bi).filter(|h| h.rank() > 0) {
            let x_pre = tr
                .x_pre_proj
                .as_ref()
                .expect("hooked block stores pre-projection state");
            let rank = basis.rank();
            let qrows = basis.rows();
            let mut dq = hook_grads.remove(&bi);
            let mut qx = vec![0.0; rank];
            let mut qg = vec![0.0; rank];
            for r in 0..m {
                let xr = &x_pre[r * d..(r + 1) * d];
                let gr = &mut dx[r * d..(r + 1) * d];
                for i in 0..rank {
                    qx[i] = crate::linalg::dot(qrows.row(i), xr);
                    qg[i] = crate::linalg::dot(qrows.row(i), gr);
                }
                // ∂loss/∂Q of x - Qᵀ(Qx): -[(Qx)gᵀ + (Qg)xᵀ]
                if let Some(dqm) = dq.as_mut() {
                    for i in 0..rank {
                        let row = dqm.row_mut(i);
                        for (jj, rv) in row.iter_mut().enumerate() {
                            *rv -= qx[i] * gr[jj] + qg[i] * xr[jj];
                        }
                    }
                }
                // dx = g - Qᵀ(Qg)
                for i in 0..rank {
                    let q = qrows.row(i);
                    let c = qg[i];
                    for (gj, &qj) in gr.iter_mut().zip(q) {
                        *gj -= c * qj;
                    }
                }
            }
            if let Some(dqm) = dq {
                hook_grads.insert(bi, dqm);
            }
        }

        // MLP backward. Residual: carry dx plus path through ln2/w1/gelu/w2.
        let mut dact = vec![0.0; m * hidden];
        matmul_nt(&dx, m, d, &params[off.w2.clone()], hidden, &mut dact);
        if let Some(g) = base.as_mut() {
            matmul_tn(&tr.mlp_act, m, hidden, &dx, d, &mut g[off.w2.clone()]);
            accum_bias(&dx, m, d, &mut g[off.b2.clone()]);
        }
        let mut dpre = dact;
        for (dp, &pre) in dpre.iter_mut().zip(&tr.mlp_pre) {
            *dp *= gelu_grad(pre);
        }
        let mut dln2 = vec![0.0; m * d];
        matmul_nt(&dpre, m, hidden, &params[off.w1.clone()], d, &mut dln2);
        if let Some(g) = base.as_mut() {
            matmul_tn(&tr.ln2_out, m, d, &dpre, hidden, &mut g[off.w1.clone()]);
            accum_bias(&dpre, m, hidden, &mut g[off.b1.clone()]);
        }
        {
            let g = params[off.ln2_g.clone()].to_vec();
            if let Some(gr) = base.as_mut() {
                let (left, right) = split_two(gr, off.ln2_g.clone(), off.ln2_b.clone());
                layernorm_bwd(
                    &dln2,
                    m,
                    d,
                    &g,
                    &tr.ln2_xhat,
                    &tr.ln2_rstd,
                    &mut dx,
                    Some((left, right)),
                );
            } else {
                layernorm_bwd(&dln2, m, d, &g, &tr.ln2_xhat, &tr.ln2_rstd, &mut dx, None);
            }
        }

        // Attention backward.
        let mut datt_concat = vec![0.0; m * d];
        matmul_nt(&dx, m, d, &params[off.wo.clone()], d, &mut datt_concat);
        if let Some(g) = base.as_mut() {
            matmul_tn(&tr.att_concat, m, d, &dx, d, &mut g[off.wo.clone()]);
            accum_bias(&dx, m, d, &mut g[off.bo.clone()]);
        }

        let mut dq = vec![0.0; m * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; l];
        for b in 0..batch.batch {
            for h in 0..heads {
                let ho = h * hd;
                for ti in 0..l {
                    let da = &datt_concat[(b * l + ti) * d + ho..(b * l + ti) * d + ho + hd];
                    let prow =
                        &tr.probs[((b * heads + h) * l + ti) * l..((b * heads + h) * l + ti) * l + l];
                    let mut dot_pd = 0.0;
                    for tj in 0..=ti {
                        let vrow = &tr.v[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        let dvrow_dot = crate::linalg::dot(da, vrow);
                        dp[tj] = dvrow_dot;
                        dot_pd += prow[tj] * dvrow_dot;
                        let dvrow = &mut dv[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        let p = prow[tj];
                        for (dvi, &dai) in dvrow.iter_mut().zip(da) {
                            *dvi += p * dai;
                        }
                    }
                    let qrow = &tr.q[(b * l + ti) * d + ho..(b * l + ti) * d + ho + hd];
                    let dqrow_idx = (b * l + ti) * d + ho;
                    for tj in 0..=ti {
                        let ds = prow[tj] * (dp[tj] - dot_pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &tr.k[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        let dqrow = &mut dq[dqrow_idx..dqrow_idx + hd];
                        for (dqi, &ki) in dqrow.iter_mut().zip(krow) {
                            *dqi += ds * ki;
                        }
                        let dkrow = &mut dk[(b * l + tj) * d + ho..(b * l + tj) * d + ho + hd];
                        for (dki, &qi) in dkrow.iter_mut().zip(qrow) {
                            *dki += ds * qi;
                        }
                    }
                }
            }
        }

        let mut dln1 = vec![0.0; m * d];
        matmul_nt(&dq, m, d, &params[off.wq.clone()], d, &mut dln1);
        matmul_nt(&dk, m, d, &params[off.wk.clone()], d, &mut dln1);
        matmul_nt(&dv, m, d, &params[off.wv.clone()], d, &mut dln1);
        if let Some(g) = base.as_mut() {
            matmul_tn(&tr.ln1_out, m, d, &dq, d, &mut g[off.wq.clone()]);
            accum_bias(&dq, m, d, &mut g[off.bq.clone()]);
            matmul_tn(&tr.ln1_out, m, d, &dk, d, &mut g[off.wk.clone()]);
            accum_bias(&dk, m, d, &mut g[off.bk.clone()]);
            matmul_tn(&tr.ln1_out, m, d, &dv, d, &mut g[off.wv.clone()]);
            accum_bias(&dv, m, d, &mut g[off.bv.clone()]);
        }
        {
            let g = params[off.ln1_g.clone()].to_vec();
            if let Some(gr) = base.as_mut() {
                let (left, right) = split_two(gr, off.ln1_g.clone(), off.ln1_b.clone());
                layernorm_bwd(
                    &dln1,
                    m,
                    d,
                    &g,
                    &tr.ln1_xhat,
                    &tr.ln1_rstd,
                    &mut dx,
                    Some((left, right)),
                );
            } else {
                layernorm_bwd(&dln1, m, d, &g, &tr.ln1_xhat, &tr.ln1_rstd, &mut dx, None);
            }
        }
    }

    // Embedding backward.
    if let Some(g) = base.as_mut() {
        let tok_range = layout.range("embed.tok");
        let pos_range = layout.range("embed.pos");
        for b in 0..batch.batch {
            for t in 0..l {
                let r = b * l + t;
                let dxr = &dx[r * d..(r + 1) * d];
                let tok = batch.tokens[r] as usize;
                let trow = &mut g[tok_range.start + tok * d..tok_range.start + (tok + 1) * d];
                for (gv, &dv) in trow.iter_mut().zip(dxr) {
                    *gv += dv;
                }
                let prow = &mut g[pos_range.start + t * d..pos_range.start + (t + 1) * d];
                for (gv, &dv) in prow.iter_mut().zip(dxr) {
                    *gv += dv;
                }
            }
        }
    }

    GradBundle {
        base,
        hooks: hook_grads,
    }
}

fn accum_bias(dy: &[f64], rows: usize, n: usize, out: &mut [f64]) {
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&dy[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
}

/// Two disjoint mutable subslices of the parameter-gradient buffer.
fn split_two(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start || b.end <= a.start);
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ProjectionBasis;
    use crate::nanomodel::{BaseModel, ModelConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_model(seed: u64) -> HookedModel {
        let cfg = ModelConfig {
            vocab: 32,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            context_len: 10,
            mlp_expansion: 2,
        };
        let mut rng = StdRng::seed_from_u64(seed);
        HookedModel::unhooked(BaseModel::init(cfg, &mut rng).unwrap())
    }

    fn test_batch(model: &HookedModel, seed: u64, b: usize, l: usize) -> Batch {
        let v = model.base.config.vocab as u32;
        let mut rng = StdRng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..b * l).map(|_| rng.gen_range(0..v)).collect();
        let mut mask = vec![false; b * l];
        let mut labels = vec![0u32; b * l];
        for i in 0..b {
            let pos = rng.gen_range(0..l - 1);
            mask[i * l + pos] = true;
            labels[i * l + pos] = rng.gen_range(0..v);
        }
        Batch::new(b, l, tokens, mask, labels).unwrap()
    }

    fn synthetic_out(vocab: usize, rows: usize, logits: Vec<f64>) -> ForwardOutput {
        ForwardOutput {
            logits,
            batch: rows,
            len: 1,
            vocab,
            captured: BTreeMap::new(),
        }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let vocab = 25;
        let out = synthetic_out(vocab, 2, vec![0.7; 2 * vocab]);
        let batch = Batch::new(2, 1, vec![0, 0], vec![true, true], vec![3, 9]).unwrap();
        let loss = masked_ce(&out, &batch).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_model_has_zero_loss() {
        let vocab = 6;
        let mut logits = vec![0.0; vocab];
        logits[4] = 1e9; // probability 1 on the label after softmax
        let out = synthetic_out(vocab, 1, logits);
        let batch = Batch::new(1, 1, vec![0], vec![true], vec![4]).unwrap();
        assert!(masked_ce(&out, &batch).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let model = test_model(1);
        let batch = Batch::new(1, 3, vec![1, 2, 3], vec![false; 3], vec![0; 3]).unwrap();
        assert!(matches!(
            loss_ce(&model, &batch),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn loss_matches_log_softmax_recomputation() {
        let model = test_model(2);
        let batch = test_batch(&model, 3, 4, 6);
        let loss = loss_ce(&model, &batch).unwrap();
        let out = forward(&model, &batch, &BTreeSet::new()).unwrap();
        let mut manual = 0.0;
        let mut count = 0usize;
        for r in 0..batch.batch * batch.len {
            if !batch.mask[r] {
                continue;
            }
            let row = &out.logits[r * out.vocab..(r + 1) * out.vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            manual += -(row[batch.labels[r] as usize] - mx - z.ln());
            count += 1;
        }
        manual /= count as f64;
        assert!((loss - manual).abs() <= 1e-12 * manual.max(1.0));
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_logits() {
        let model = test_model(4);
        let l = 8;
        let mut batch = test_batch(&model, 5, 2, l);
        let before = forward(&model, &batch, &BTreeSet::new()).unwrap();
        // Scramble the last three tokens of every row.
        for b in 0..batch.batch {
            for t in l - 3..l {
                batch.tokens[b * l + t] = (batch.tokens[b * l + t] + 7) % 32;
            }
        }
        let after = forward(&model, &batch, &BTreeSet::new()).unwrap();
        for b in 0..batch.batch {
            for t in 0..l - 3 {
                assert_eq!(
                    before.logit_row(b, t),
                    after.logit_row(b, t),
                    "logits at position {t} changed after editing later tokens"
                );
            }
        }
    }

    #[test]
    fn non_masked_labels_do_not_contribute() {
        let model = test_model(6);
        let mut batch = test_batch(&model, 7, 3, 6);
        let loss = loss_ce(&model, &batch).unwrap();
        let (_, g) = grads(&model, &batch, Scope::BaseWeights).unwrap();
        for (i, m) in batch.mask.clone().iter().enumerate() {
            if !m {
                batch.labels[i] = (batch.labels[i] + 13) % 32;
            }
        }
        let loss2 = loss_ce(&model, &batch).unwrap();
        let (_, g2) = grads(&model, &batch, Scope::BaseWeights).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(g.base.unwrap(), g2.base.unwrap());
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let model = test_model(8);
        let batch = Batch::new(1, 2, vec![1, 99], vec![true, false], vec![0, 0]).unwrap();
        assert!(matches!(
            forward(&model, &batch, &BTreeSet::new()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn capture_layer_out_of_range_is_rejected() {
        let model = test_model(9);
        let batch = test_batch(&model, 10, 1, 4);
        let capture: BTreeSet<usize> = [5usize].into_iter().collect();
        assert!(matches!(
            forward(&model, &batch, &capture),
            Err(Error::InvalidLayer(5))
        ));
    }

    #[test]
    fn rank0_hook_forward_is_bit_identical() {
        let plain = test_model(12);
        let mut hooked = plain.clone();
        hooked.set_hook(0, ProjectionBasis::empty(8)).unwrap();
        let batch = test_batch(&plain, 13, 2, 5);
        let a = forward(&plain, &batch, &BTreeSet::new()).unwrap();
        let b = forward(&hooked, &batch, &BTreeSet::new()).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
