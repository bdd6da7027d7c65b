//! Small pre-norm decoder-only transformer with hand-written backprop.
//!
//! Parameters live in one flat `Vec<f64>` in this order:
//!
//! ```text
//! tok_emb[V,d] pos_emb[P,d]
//! per layer: ln1_g[d] ln1_b[d] w_qkv[d,3d] b_qkv[3d] w_o[d,d] b_o[d]
//!            ln2_g[d] ln2_b[d] w_1[d,f] b_1[f] w_2[f,d] b_2[d]
//! lnf_g[d] lnf_b[d] w_out[d,V] b_out[V]
//! ```
//!
//! Matrices are row-major `[in, out]`. Every sequence is implicitly
//! prefixed with `<bos>`, so a context of `n` tokens occupies `n + 1`
//! positions. Training and incremental decoding share the same per-row
//! kernels, so their log-probabilities agree exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_token, log_softmax, DecodeState, LanguageModel, ModelError, Trainable};
use crate::vocab::Token;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Number of positions, including the implicit `<bos>`.
    pub max_positions: usize,
}

impl TransformerConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig { vocab_size, d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, max_positions: 64 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Checkpoint(format!("invalid transformer config: {m}")));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions < 2 {
            return bad("zero-sized dimension");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model not divisible by n_heads");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_1: usize,
    b_1: usize,
    w_2: usize,
    b_2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let (v, d, f, p) = (c.vocab_size, c.d_model, c.d_ff, c.max_positions);
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok_emb = take(v * d);
        let pos_emb = take(p * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_1: take(d * f),
                b_1: take(f),
                w_2: take(f * d),
                b_2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, total: at }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Transformer {
    /// Randomly initialized model. Weights ~ N(0, 0.02²), layer-norm gains 1.
    pub fn new(config: TransformerConfig, seed: u64) -> Self {
        Self::with_init_scale(config, seed, 0.02)
    }

    pub fn with_init_scale(config: TransformerConfig, seed: u64, scale: f64) -> Self {
        config.validate().expect("invalid transformer config");
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        for p in params.iter_mut() {
            *p = normal.sample(&mut rng);
        }
        let d = config.d_model;
        let mut fill = |start: usize, n: usize, value: f64| params[start..start + n].iter_mut().for_each(|p| *p = value);
        for l in &layout.layers {
            fill(l.ln1_g, d, 1.0);
            fill(l.ln1_b, d, 0.0);
            fill(l.ln2_g, d, 1.0);
            fill(l.ln2_b, d, 0.0);
            fill(l.b_qkv, 3 * d, 0.0);
            fill(l.b_o, d, 0.0);
            fill(l.b_1, config.d_ff, 0.0);
            fill(l.b_2, d, 0.0);
        }
        fill(layout.lnf_g, d, 1.0);
        fill(layout.lnf_b, d, 0.0);
        fill(layout.b_out, config.vocab_size, 0.0);
        Transformer { config, layout, params }
    }

    pub fn from_params(config: TransformerConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Transformer { config, layout, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, start: usize, n: usize) -> &[f64] {
        &self.params[start..start + n]
    }

    /// Embedding of `token` at `pos`.
    fn embed(&self, token: Token, pos: usize, out: &mut [f64]) {
        let d = self.config.d_model;
        let te = self.p(self.layout.tok_emb + token.index() * d, d);
        let pe = self.p(self.layout.pos_emb + pos * d, d);
        for i in 0..d {
            out[i] = te[i] + pe[i];
        }
    }

    fn logits_row(&self, z: &[f64], out: &mut [f64]) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        affine(z, self.p(self.layout.w_out, d * v), self.p(self.layout.b_out, v), out);
    }
}

// ---- row kernels shared by training and decoding ----

/// `out = x · w + b` with `w` row-major `[x.len(), out.len()]`.
#[inline]
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Layer norm of one row. Writes the normalized row into `xhat` and the
/// affine output into `out`; returns `1/std`.
#[inline]
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal attention for the query row at position `i` over keys/values
/// `0..=i`. `qkv_rows(j)` yields the packed `[q|k|v]` row of position j.
/// Writes head-concatenated output into `out` and attention weights into
/// `probs` (layout `[head][j]`, length `n_heads * (i+1)`).
#[inline]
fn attend<'a>(
    q_row: &[f64],
    keys: impl Fn(usize) -> &'a [f64],
    values: impl Fn(usize) -> &'a [f64],
    i: usize,
    n_heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d = q_row.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let span = i + 1;
    out.iter_mut().for_each(|o| *o = 0.0);
    for h in 0..n_heads {
        let q = &q_row[h * dh..(h + 1) * dh];
        let pr = &mut probs[h * span..(h + 1) * span];
        let mut max = f64::NEG_INFINITY;
        for (j, p) in pr.iter_mut().enumerate() {
            let k = &keys(j)[h * dh..(h + 1) * dh];
            let s: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            *p = s;
            if s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for p in pr.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in pr.iter_mut() {
            *p /= sum;
        }
        let o = &mut out[h * dh..(h + 1) * dh];
        for (j, &p) in pr.iter().enumerate() {
            let v = &values(j)[h * dh..(h + 1) * dh];
            for (oi, &vi) in o.iter_mut().zip(v) {
                *oi += p * vi;
            }
        }
    }
}

// ---- incremental decoding ----

#[derive(Clone)]
struct TransformerState<'a> {
    model: &'a Transformer,
    /// Positions consumed, including `<bos>`.
    pos: usize,
    /// Per layer, `pos * d` keys and values.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    logprobs: Vec<f64>,
}

impl<'a> TransformerState<'a> {
    fn new(model: &'a Transformer) -> Self {
        let n = model.config.n_layers;
        let mut s = TransformerState { model, pos: 0, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], logprobs: Vec::new() };
        s.advance(Token::BOS);
        s
    }

    fn advance(&mut self, token: Token) {
        let m = self.model;
        let c = &m.config;
        let d = c.d_model;
        let i = self.pos;
        let mut x = vec![0.0; d];
        m.embed(token, i, &mut x);
        let mut a = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut o = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut u = vec![0.0; c.d_ff];
        let mut probs = vec![0.0; c.n_heads * (i + 1)];
        for (l, lo) in m.layout.layers.iter().enumerate() {
            layer_norm(&x, m.p(lo.ln1_g, d), m.p(lo.ln1_b, d), &mut xhat, &mut a);
            affine(&a, m.p(lo.w_qkv, 3 * d * d), m.p(lo.b_qkv, 3 * d), &mut qkv);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let keys = &self.keys[l];
            let values = &self.values[l];
            attend(&qkv[..d], |j| &keys[j * d..(j + 1) * d], |j| &values[j * d..(j + 1) * d], i, c.n_heads, &mut o, &mut probs);
            affine(&o, m.p(lo.w_o, d * d), m.p(lo.b_o, d), &mut proj);
            for k in 0..d {
                x[k] += proj[k];
            }
            layer_norm(&x, m.p(lo.ln2_g, d), m.p(lo.ln2_b, d), &mut xhat, &mut a);
            affine(&a, m.p(lo.w_1, d * c.d_ff), m.p(lo.b_1, c.d_ff), &mut u);
            for v in u.iter_mut() {
                *v = gelu(*v);
            }
            affine(&u, m.p(lo.w_2, c.d_ff * d), m.p(lo.b_2, d), &mut proj);
            for k in 0..d {
                x[k] += proj[k];
            }
        }
        layer_norm(&x, m.p(m.layout.lnf_g, d), m.p(m.layout.lnf_b, d), &mut xhat, &mut a);
        let mut logits = vec![0.0; c.vocab_size];
        m.logits_row(&a, &mut logits);
        self.logprobs = log_softmax(&logits);
        self.pos += 1;
    }
}

impl<'a> DecodeState<'a> for TransformerState<'a> {
    fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    fn len(&self) -> usize {
        self.pos - 1
    }

    fn push(&mut self, token: Token) -> Result<(), ModelError> {
        check_token(token, self.model.config.vocab_size)?;
        if self.pos >= self.model.config.max_positions {
            return Err(ModelError::ContextTooLong { len: self.pos, max: self.model.max_context() });
        }
        self.advance(token);
        Ok(())
    }

    fn fork(&self) -> Box<dyn DecodeState<'a> + 'a> {
        Box::new(self.clone())
    }
}

impl LanguageModel for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_positions - 1
    }

    fn start(&self, context: &[Token]) -> Result<Box<dyn DecodeState<'_> + '_>, ModelError> {
        if context.len() > self.max_context() {
            return Err(ModelError::ContextTooLong { len: context.len(), max: self.max_context() });
        }
        for &t in context {
            check_token(t, self.config.vocab_size)?;
        }
        let mut state = TransformerState::new(self);
        for &t in context {
            state.advance(t);
        }
        Ok(Box::new(state))
    }
}

// ---- training ----

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Per row i: n_heads * (i+1) weights, rows concatenated.
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

fn probs_offset(i: usize, n_heads: usize) -> usize {
    n_heads * i * (i + 1) / 2
}

/// `dx` for a layer-norm row given upstream `dy`; accumulates gain/bias grads.
#[inline]
fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let n = dy.len();
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..n {
        let dxh = dy[i] * g[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n as f64;
    mean_dxhat_xhat /= n as f64;
    for i in 0..n {
        let dxh = dy[i] * g[i];
        dx[i] = rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// Accumulates `dw += x ⊗ dy`, `db += dy` and returns nothing; `dx = dy · wᵀ`
/// is written when `dx` is given.
#[inline]
fn affine_backward(x: &[f64], dy: &[f64], w: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &mut dw[i * n..(i + 1) * n];
        for (r, &g) in row.iter_mut().zip(dy) {
            *r += xi * g;
        }
    }
    for (b, &g) in db.iter_mut().zip(dy) {
        *b += g;
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * n..(i + 1) * n];
            *dxi = row.iter().zip(dy).map(|(a, b)| a * b).sum();
        }
    }
}

impl Transformer {
    fn loss_and_grad(
        &self,
        context: &[Token],
        target: &[Token],
        mask: &[bool],
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64, ModelError> {
        let c = &self.config;
        let (d, f, v, nh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads);
        let total = context.len() + target.len();
        if total > self.max_context() {
            return Err(ModelError::ContextTooLong { len: total, max: self.max_context() });
        }
        for &t in context.iter().chain(target) {
            check_token(t, v)?;
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 || target.is_empty() {
            return Ok(0.0);
        }
        // Input positions: <bos>, context, target[..-1].
        let mut seq = Vec::with_capacity(total);
        seq.push(Token::BOS);
        seq.extend_from_slice(context);
        seq.extend_from_slice(&target[..target.len() - 1]);
        let len = seq.len();
        let first_pred = context.len();

        let mut x = vec![0.0; len * d];
        for (i, &t) in seq.iter().enumerate() {
            self.embed(t, i, &mut x[i * d..(i + 1) * d]);
        }
        let n_probs = probs_offset(len, nh);
        let mut caches: Vec<LayerCache> = Vec::with_capacity(c.n_layers);
        let mut proj = vec![0.0; d];
        for lo in &self.layout.layers {
            let mut cache = LayerCache {
                xhat1: vec![0.0; len * d],
                rstd1: vec![0.0; len],
                a: vec![0.0; len * d],
                qkv: vec![0.0; len * 3 * d],
                probs: vec![0.0; n_probs],
                o: vec![0.0; len * d],
                xhat2: vec![0.0; len * d],
                rstd2: vec![0.0; len],
                c: vec![0.0; len * d],
                u: vec![0.0; len * f],
                g: vec![0.0; len * f],
            };
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                cache.rstd1[i] = layer_norm(
                    &x[r.clone()],
                    self.p(lo.ln1_g, d),
                    self.p(lo.ln1_b, d),
                    &mut cache.xhat1[r.clone()],
                    &mut cache.a[r.clone()],
                );
                affine(&cache.a[r], self.p(lo.w_qkv, 3 * d * d), self.p(lo.b_qkv, 3 * d), &mut cache.qkv[i * 3 * d..(i + 1) * 3 * d]);
            }
            for i in 0..len {
                let qkv = &cache.qkv;
                let po = probs_offset(i, nh);
                attend(
                    &qkv[i * 3 * d..i * 3 * d + d],
                    |j| &qkv[j * 3 * d + d..j * 3 * d + 2 * d],
                    |j| &qkv[j * 3 * d + 2 * d..(j + 1) * 3 * d],
                    i,
                    nh,
                    &mut cache.o[i * d..(i + 1) * d],
                    &mut cache.probs[po..po + nh * (i + 1)],
                );
            }
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                affine(&cache.o[r.clone()], self.p(lo.w_o, d * d), self.p(lo.b_o, d), &mut proj);
                for k in 0..d {
                    x[i * d + k] += proj[k];
                }
                cache.rstd2[i] = layer_norm(
                    &x[r.clone()],
                    self.p(lo.ln2_g, d),
                    self.p(lo.ln2_b, d),
                    &mut cache.xhat2[r.clone()],
                    &mut cache.c[r.clone()],
                );
                let fr = i * f..(i + 1) * f;
                affine(&cache.c[r], self.p(lo.w_1, d * f), self.p(lo.b_1, f), &mut cache.u[fr.clone()]);
                for k in fr.clone() {
                    cache.g[k] = gelu(cache.u[k]);
                }
                affine(&cache.g[fr], self.p(lo.w_2, f * d), self.p(lo.b_2, d), &mut proj);
                for k in 0..d {
                    x[i * d + k] += proj[k];
                }
            }
            caches.push(cache);
        }

        // Final norm and loss at predicting positions.
        let mut xhatf = vec![0.0; len * d];
        let mut rstdf = vec![0.0; len];
        let mut z = vec![0.0; len * d];
        let mut loss = 0.0;
        let mut dlogits: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut logits = vec![0.0; v];
        for (k, (&tgt, &m)) in target.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let i = first_pred + k;
            let r = i * d..(i + 1) * d;
            rstdf[i] = layer_norm(&x[r.clone()], self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), &mut xhatf[r.clone()], &mut z[r.clone()]);
            self.logits_row(&z[r], &mut logits);
            let lp = log_softmax(&logits);
            loss -= lp[tgt.index()];
            if grad.is_some() {
                let mut dl: Vec<f64> = lp.iter().map(|&l| l.exp()).collect();
                dl[tgt.index()] -= 1.0;
                dlogits.push((i, dl));
            }
        }
        let loss = loss / n_masked as f64;
        let Some((grad, scale)) = grad else {
            return Ok(loss);
        };
        if !loss.is_finite() {
            return Ok(loss);
        }
        let coef = scale / n_masked as f64;
        let lay = &self.layout;

        let mut dx = vec![0.0; len * d];
        let mut dz = vec![0.0; d];
        for (i, dl) in dlogits.iter_mut() {
            let i = *i;
            dl.iter_mut().for_each(|g| *g *= coef);
            let (dw_out, rest) = grad[lay.w_out..].split_at_mut(d * v);
            affine_backward(&z[i * d..(i + 1) * d], dl, self.p(lay.w_out, d * v), dw_out, &mut rest[..v], Some(&mut dz));
            let (dg, rest) = grad[lay.lnf_g..].split_at_mut(d);
            layer_norm_backward(&dz, &xhatf[i * d..(i + 1) * d], rstdf[i], self.p(lay.lnf_g, d), dg, &mut rest[..d], &mut dx[i * d..(i + 1) * d]);
        }

        let mut tmp_d = vec![0.0; d];
        let mut tmp_d2 = vec![0.0; d];
        let mut dg_row = vec![0.0; f];
        for (lo, cache) in lay.layers.iter().zip(&caches).rev() {
            // MLP block; dx holds d(out) and becomes d(h_mid).
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                let fr = i * f..(i + 1) * f;
                {
                    let (dw2, rest) = grad[lo.w_2..].split_at_mut(f * d);
                    affine_backward(&cache.g[fr.clone()], &dx[r.clone()], self.p(lo.w_2, f * d), dw2, &mut rest[..d], Some(&mut dg_row));
                }
                for (k, g) in dg_row.iter_mut().enumerate() {
                    *g *= gelu_grad(cache.u[i * f + k]);
                }
                {
                    let (dw1, rest) = grad[lo.w_1..].split_at_mut(d * f);
                    affine_backward(&cache.c[r.clone()], &dg_row, self.p(lo.w_1, d * f), dw1, &mut rest[..f], Some(&mut tmp_d));
                }
                let (dg2, rest) = grad[lo.ln2_g..].split_at_mut(d);
                layer_norm_backward(&tmp_d, &cache.xhat2[r.clone()], cache.rstd2[i], self.p(lo.ln2_g, d), dg2, &mut rest[..d], &mut tmp_d2);
                for k in 0..d {
                    dx[i * d + k] += tmp_d2[k];
                }
            }
            // Attention block; dx holds d(h_mid) and becomes d(x_in).
            let mut do_rows = vec![0.0; len * d];
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                let (dwo, rest) = grad[lo.w_o..].split_at_mut(d * d);
                affine_backward(&cache.o[r.clone()], &dx[r.clone()], self.p(lo.w_o, d * d), dwo, &mut rest[..d], Some(&mut do_rows[r]));
            }
            let mut dqkv = vec![0.0; len * 3 * d];
            let dh = d / nh;
            let sc = 1.0 / (dh as f64).sqrt();
            let qkv = &cache.qkv;
            for i in 0..len {
                let po = probs_offset(i, nh);
                let span = i + 1;
                for h in 0..nh {
                    let pr = &cache.probs[po + h * span..po + (h + 1) * span];
                    let dout = &do_rows[i * d + h * dh..i * d + (h + 1) * dh];
                    // dP_ij = dout · v_j
                    let mut dp = vec![0.0; span];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        let vj = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                        *dpj = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (k, &g) in dout.iter().enumerate() {
                            dqkv[j * 3 * d + 2 * d + h * dh + k] += pr[j] * g;
                        }
                    }
                    let dot: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..span {
                        let ds = pr[j] * (dp[j] - dot) * sc;
                        if ds == 0.0 {
                            continue;
                        }
                        for k in 0..dh {
                            let qk = qkv[i * 3 * d + h * dh + k];
                            let kk = qkv[j * 3 * d + d + h * dh + k];
                            dqkv[i * 3 * d + h * dh + k] += ds * kk;
                            dqkv[j * 3 * d + d + h * dh + k] += ds * qk;
                        }
                    }
                }
            }
            for i in 0..len {
                let r = i * d..(i + 1) * d;
                {
                    let (dw, rest) = grad[lo.w_qkv..].split_at_mut(3 * d * d);
                    affine_backward(&cache.a[r.clone()], &dqkv[i * 3 * d..(i + 1) * 3 * d], self.p(lo.w_qkv, 3 * d * d), dw, &mut rest[..3 * d], Some(&mut tmp_d));
                }
                let (dg1, rest) = grad[lo.ln1_g..].split_at_mut(d);
                layer_norm_backward(&tmp_d, &cache.xhat1[r.clone()], cache.rstd1[i], self.p(lo.ln1_g, d), dg1, &mut rest[..d], &mut tmp_d2);
                for k in 0..d {
                    dx[i * d + k] += tmp_d2[k];
                }
            }
        }
        for (i, &t) in seq.iter().enumerate() {
            for k in 0..d {
                grad[lay.tok_emb + t.index() * d + k] += dx[i * d + k];
                grad[lay.pos_emb + i * d + k] += dx[i * d + k];
            }
        }
        Ok(loss)
    }
}

impl Trainable for Transformer {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn target_nll(
        &self,
        context: &[Token],
        target: &[Token],
        mask: &[bool],
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64, ModelError> {
        self.loss_and_grad(context, target, mask, grad)
    }
}
