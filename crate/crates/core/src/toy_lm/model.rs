//! Packed-batch forward and backward passes.
//!
//! Sequences of different lengths are stacked row-wise into one `[N, d]`
//! activation matrix; linear layers run as a single GEMM over all rows and
//! attention runs per sequence. Causality holds because attention scores
//! for row `i` only ever read rows `j <= i` of the same sequence.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::params::{LayerParams, Params};
use super::{Token, ToyLmConfig};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row layout of a packed batch.
pub(crate) struct Packed {
    pub tokens: Vec<Token>,
    pub positions: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [Token]>) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::new();
        for s in seqs {
            spans.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Packed {
            tokens,
            positions,
            spans,
        }
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    norm1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<f64>,
    att: Array2<f64>,
    norm2: NormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    normf: NormCache,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(x.nrows());
    for (r, (row, mut out)) in x.outer_iter().zip(xhat.outer_iter_mut()).enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (r, mut out) in dx.outer_iter_mut().enumerate() {
        let dxh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_dxh = dxh.sum() / d;
        let mean_dxh_xh = dxh.dot(&xh) / d;
        let rs = cache.rstd[r];
        for ((o, &a), &b) in out.iter_mut().zip(dxh).zip(xh) {
            *o = rs * (a - mean_dxh - b * mean_dxh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

/// Offsets into the flat probability buffer: one `T×T` block per
/// (sequence, head).
fn prob_offsets(packed: &Packed, n_heads: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(packed.spans.len());
    let mut total = 0;
    for &(_, t) in &packed.spans {
        offs.push(total);
        total += n_heads * t * t;
    }
    (offs, total)
}

fn attention(
    packed: &Packed,
    cfg: &ToyLmConfig,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (offs, total) = prob_offsets(packed, cfg.n_heads);
    let mut probs = vec![0.0; total];
    let mut att = Array2::<f64>::zeros(q.raw_dim());
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let out = att.as_slice_mut().unwrap();
    for (&(start, t), &off) in packed.spans.iter().zip(&offs) {
        for h in 0..cfg.n_heads {
            let c0 = h * dh;
            let block = &mut probs[off + h * t * t..off + (h + 1) * t * t];
            for i in 0..t {
                let qi = &qs[(start + i) * d + c0..(start + i) * d + c0 + dh];
                let row = &mut block[i * t..i * t + t];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &ks[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *p = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for p in row.iter_mut().take(i + 1) {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let oi = (start + i) * d + c0;
                for j in 0..=i {
                    row[j] /= z;
                    let pj = row[j];
                    let vj = &vs[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    for (o, &vv) in out[oi..oi + dh].iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (att, probs)
}

/// Returns (dq, dk, dv).
fn attention_backward(
    packed: &Packed,
    cfg: &ToyLmConfig,
    cache: &LayerCache,
    datt: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (offs, _) = prob_offsets(packed, cfg.n_heads);
    let mut dq = Array2::<f64>::zeros(datt.raw_dim());
    let mut dk = Array2::<f64>::zeros(datt.raw_dim());
    let mut dv = Array2::<f64>::zeros(datt.raw_dim());
    let (qs, ks, vs) = (
        cache.q.as_slice().unwrap(),
        cache.k.as_slice().unwrap(),
        cache.v.as_slice().unwrap(),
    );
    let da = datt.as_slice().unwrap();
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().unwrap(),
        dk.as_slice_mut().unwrap(),
        dv.as_slice_mut().unwrap(),
    );
    let mut dp = Vec::new();
    for (&(start, t), &off) in packed.spans.iter().zip(&offs) {
        dp.resize(t, 0.0);
        for h in 0..cfg.n_heads {
            let c0 = h * dh;
            let block = &cache.probs[off + h * t * t..off + (h + 1) * t * t];
            for i in 0..t {
                let row = &block[i * t..i * t + t];
                let di = (start + i) * d + c0;
                let dai = &da[di..di + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = (start + j) * d + c0;
                    dp[j] = dai.iter().zip(&vs[vj..vj + dh]).map(|(a, b)| a * b).sum();
                    dot += row[j] * dp[j];
                    for (o, &a) in dvs[vj..vj + dh].iter_mut().zip(dai) {
                        *o += row[j] * a;
                    }
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (start + j) * d + c0;
                    for c in 0..dh {
                        dqs[di + c] += ds * ks[kj + c];
                        dks[kj + c] += ds * qs[di + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn block_forward(
    packed: &Packed,
    cfg: &ToyLmConfig,
    l: &LayerParams,
    x: Array2<f64>,
    keep: bool,
) -> (Array2<f64>, Option<LayerCache>) {
    let (h1, norm1) = layer_norm(&x, &l.ln1_g, &l.ln1_b);
    let q = h1.dot(&l.wq);
    let k = h1.dot(&l.wk);
    let v = h1.dot(&l.wv);
    let (att, probs) = attention(packed, cfg, &q, &k, &v);
    let x = x + att.dot(&l.wo);
    let (h2, norm2) = layer_norm(&x, &l.ln2_g, &l.ln2_b);
    let pre_act = add_bias(h2.dot(&l.w1), &l.b1);
    let act = pre_act.mapv(gelu);
    let x = x + add_bias(act.dot(&l.w2), &l.b2);
    let cache = keep.then(|| LayerCache {
        norm1,
        h1,
        q,
        k,
        v,
        probs,
        att,
        norm2,
        h2,
        pre_act,
        act,
    });
    (x, cache)
}

/// Final-norm hidden states `[N, d]`, plus the cache when `keep` is set.
pub(crate) fn forward_hidden(
    params: &Params,
    cfg: &ToyLmConfig,
    packed: &Packed,
    keep: bool,
) -> (Array2<f64>, Option<Cache>) {
    let d = cfg.d_model;
    let mut x = Array2::<f64>::zeros((packed.rows(), d));
    for (r, mut row) in x.outer_iter_mut().enumerate() {
        let tok = params.tok_emb.row(packed.tokens[r] as usize);
        let pos = params.pos_emb.row(packed.positions[r]);
        for ((o, a), b) in row.iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    let mut layer_caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
    for l in &params.layers {
        let (next, cache) = block_forward(packed, cfg, l, x, keep);
        x = next;
        layer_caches.extend(cache);
    }
    let (hf, normf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let cache = keep.then_some(Cache {
        layers: layer_caches,
        normf,
    });
    (hf, cache)
}

/// Log-softmax normalizer of one logits row.
pub(crate) fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A prediction target: hidden row, token to predict, loss weight.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Target {
    pub row: usize,
    pub token: Token,
    pub weight: f64,
}

/// Negative log-likelihood per target.
pub(crate) fn target_nll(params: &Params, hf: &Array2<f64>, targets: &[Target]) -> Vec<f64> {
    let rows: Vec<usize> = targets.iter().map(|t| t.row).collect();
    let logits = hf.select(Axis(0), &rows).dot(&params.head);
    targets
        .iter()
        .zip(logits.outer_iter())
        .map(|(t, z)| log_sum_exp(z) - z[t.token as usize])
        .collect()
}

/// Weighted NLL over the targets and its gradient with respect to every
/// parameter.
pub(crate) fn loss_and_grad(
    params: &Params,
    cfg: &ToyLmConfig,
    packed: &Packed,
    targets: &[Target],
) -> (f64, Params) {
    let (hf, cache) = forward_hidden(params, cfg, packed, true);
    let cache = cache.unwrap();
    let mut grad = Params::zeros(cfg);

    let rows: Vec<usize> = targets.iter().map(|t| t.row).collect();
    let hsel = hf.select(Axis(0), &rows);
    let mut dlogits = hsel.dot(&params.head);
    let mut loss = 0.0;
    for (t, mut z) in targets.iter().zip(dlogits.outer_iter_mut()) {
        let lse = log_sum_exp(z.view());
        loss += t.weight * (lse - z[t.token as usize]);
        z.mapv_inplace(|v| (v - lse).exp() * t.weight);
        z[t.token as usize] -= t.weight;
    }
    grad.head = hsel.t().dot(&dlogits);
    let dsel = dlogits.dot(&params.head.t());
    let mut dhf = Array2::<f64>::zeros(hf.raw_dim());
    for (&r, drow) in rows.iter().zip(dsel.outer_iter()) {
        let mut out = dhf.row_mut(r);
        out += &drow;
    }

    let mut dx = layer_norm_backward(
        &dhf,
        &cache.normf,
        &params.lnf_g,
        &mut grad.lnf_g,
        &mut grad.lnf_b,
    );

    for (li, (l, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grad.layers[li];
        // feed-forward
        g.b2 += &dx.sum_axis(Axis(0));
        g.w2 += &c.act.t().dot(&dx);
        let mut dpre = dx.dot(&l.w2.t());
        ndarray::Zip::from(&mut dpre)
            .and(&c.pre_act)
            .for_each(|d, &u| *d *= gelu_grad(u));
        g.b1 += &dpre.sum_axis(Axis(0));
        g.w1 += &c.h2.t().dot(&dpre);
        let dh2 = dpre.dot(&l.w1.t());
        dx += &layer_norm_backward(&dh2, &c.norm2, &l.ln2_g, &mut g.ln2_g, &mut g.ln2_b);

        // attention
        g.wo += &c.att.t().dot(&dx);
        let datt = dx.dot(&l.wo.t());
        let (dq, dk, dv) = attention_backward(packed, cfg, c, &datt);
        g.wq += &c.h1.t().dot(&dq);
        g.wk += &c.h1.t().dot(&dk);
        g.wv += &c.h1.t().dot(&dv);
        let dh1 = dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t());
        dx += &layer_norm_backward(&dh1, &c.norm1, &l.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    }

    for (r, drow) in dx.outer_iter().enumerate() {
        let mut te = grad.tok_emb.row_mut(packed.tokens[r] as usize);
        te += &drow;
        let mut pe = grad.pos_emb.row_mut(packed.positions[r]);
        pe += &drow;
    }
    (loss, grad)
}

/// Logits for the last row of every sequence in the batch.
pub(crate) fn last_logits(params: &Params, cfg: &ToyLmConfig, packed: &Packed) -> Array2<f64> {
    let (hf, _) = forward_hidden(params, cfg, packed, false);
    let rows: Vec<usize> = packed.spans.iter().map(|&(s, t)| s + t - 1).collect();
    hf.select(Axis(0), &rows).dot(&params.head)
}

pub(crate) fn all_logits(params: &Params, cfg: &ToyLmConfig, packed: &Packed) -> Array2<f64> {
    let (hf, _) = forward_hidden(params, cfg, packed, false);
    hf.dot(&params.head)
}
