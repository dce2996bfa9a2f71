//! A small decoder-only transformer with exact hand-written gradients.
//!
//! Pre-norm blocks (layer norm, causal multi-head attention without a key
//! bias, layer norm,
//! GELU MLP with hidden width `4 * d_model`), learned positional embeddings,
//! a final layer norm and an untied output head. Every parameter lives in one
//! flat `f64` vector; [`Layout`] names the slices.
//!
//! The forward pass is written row by row so that full-sequence evaluation
//! and cached incremental decoding perform the same floating-point
//! operations in the same order.

mod checkpoint;
mod sampling;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tokenizer::BOS;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use sampling::{sample, sample_from_logits, sample_until, tempered_probs, DecodeSession};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl ModelConfig {
    /// Default shape for a given vocabulary: 2 layers, width 32, 2 heads,
    /// context 64.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_len: 64,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigMismatch(m.to_string()));
        if self.vocab_size < 5 || self.vocab_size > 512 {
            return bad("vocab_size must be in 5..=512");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.context_len == 0 {
            return bad("n_layers and context_len must be positive");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_q: usize,
    b_v: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone)]
pub struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerSlots>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
    names: Vec<(String, Range<usize>)>,
}

impl LayerSlots {
    /// Query/key/value bias with the key part fixed at zero. A key bias only
    /// shifts every score of a query by the same amount, so it would be a
    /// parameter with identically zero gradient.
    fn qkv_bias(&self, p: &[f64], d: usize) -> Vec<f64> {
        let mut b = vec![0.0; 3 * d];
        b[..d].copy_from_slice(&p[self.b_q..self.b_q + d]);
        b[2 * d..].copy_from_slice(&p[self.b_v..self.b_v + d]);
        b
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (v, d, t, h) = (c.vocab_size, c.d_model, c.context_len, c.mlp_hidden());
        let mut names = Vec::new();
        let mut next = 0usize;
        let mut take = |name: String, len: usize| {
            let at = next;
            names.push((name, at..at + len));
            next += len;
            at
        };
        let tok_emb = take("tok_emb".into(), v * d);
        let pos_emb = take("pos_emb".into(), t * d);
        let layers = (0..c.n_layers)
            .map(|l| LayerSlots {
                ln1_g: take(format!("layer{l}.ln1.gain"), d),
                ln1_b: take(format!("layer{l}.ln1.bias"), d),
                w_qkv: take(format!("layer{l}.attn.w_qkv"), d * 3 * d),
                b_q: take(format!("layer{l}.attn.b_q"), d),
                b_v: take(format!("layer{l}.attn.b_v"), d),
                w_o: take(format!("layer{l}.attn.w_out"), d * d),
                b_o: take(format!("layer{l}.attn.b_out"), d),
                ln2_g: take(format!("layer{l}.ln2.gain"), d),
                ln2_b: take(format!("layer{l}.ln2.bias"), d),
                w_fc: take(format!("layer{l}.mlp.w_fc"), d * h),
                b_fc: take(format!("layer{l}.mlp.b_fc"), h),
                w_proj: take(format!("layer{l}.mlp.w_proj"), h * d),
                b_proj: take(format!("layer{l}.mlp.b_proj"), d),
            })
            .collect();
        let lnf_g = take("final_ln.gain".into(), d);
        let lnf_b = take("final_ln.bias".into(), d);
        let head_w = take("head.weight".into(), d * v);
        let head_b = take("head.bias".into(), v);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: next,
            names,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Named parameter blocks in storage order.
    pub fn names(&self) -> &[(String, Range<usize>)] {
        &self.names
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }
}

/// Parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<f64>,
}

/// A next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DistVec {
    pub probs: Vec<f64>,
}

impl ModelState {
    /// Seeded initialization: weight matrices uniform in `±1/sqrt(fan_in)`,
    /// embeddings uniform in `±1/sqrt(d_model)`, layer-norm gains one and all
    /// biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, v) = (config.d_model, config.mlp_hidden(), config.vocab_size);
        let mut fill = |params: &mut [f64], at: usize, len: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[at..at + len] {
                *p = (rng.gen::<f64>() * 2.0 - 1.0) * a;
            }
        };
        fill(&mut params, layout.tok_emb, v * d, d);
        fill(&mut params, layout.pos_emb, config.context_len * d, d);
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
            fill(&mut params, l.w_qkv, d * 3 * d, d);
            fill(&mut params, l.w_o, d * d, d);
            fill(&mut params, l.w_fc, d * h, d);
            fill(&mut params, l.w_proj, h * d, h);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.head_w, d * v, d);
        Ok(ModelState { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if params.len() != expected {
            return Err(Error::ConfigMismatch(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "parameters" });
        }
        Ok(ModelState { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Zeroes the output head so every next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        let layout = self.layout();
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        self.params[layout.head_w..layout.head_w + d * v].fill(0.0);
        self.params[layout.head_b..layout.head_b + v].fill(0.0);
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context: self.config.context_len,
            });
        }
        let vocab = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }

    /// Runs the network over `tokens`, keeping every activation needed by
    /// [`ModelState::backward`].
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let layout = Layout::new(c);
        let p = &self.params;
        let (n, d, hid, v) = (tokens.len(), c.d_model, c.mlp_hidden(), c.vocab_size);

        let mut x = vec![0.0; n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            embed_row(p, &layout, tok, t, d, &mut x[t * d..(t + 1) * d]);
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for slots in &layout.layers {
            let qkv_bias = slots.qkv_bias(p, d);
            let mut ln1 = NormCache::new(n, d);
            let mut a = vec![0.0; n * d];
            let mut qkv = vec![0.0; n * 3 * d];
            for t in 0..n {
                let row = t * d..(t + 1) * d;
                layer_norm_row(
                    &x[row.clone()],
                    &p[slots.ln1_g..slots.ln1_g + d],
                    &p[slots.ln1_b..slots.ln1_b + d],
                    &mut a[row.clone()],
                    &mut ln1.xhat[row],
                    &mut ln1.rstd[t],
                );
                affine_row(
                    &a[t * d..(t + 1) * d],
                    &p[slots.w_qkv..slots.w_qkv + d * 3 * d],
                    &qkv_bias,
                    &mut qkv[t * 3 * d..(t + 1) * 3 * d],
                );
            }
            let mut probs = vec![0.0; c.n_heads * n * n];
            let mut y = vec![0.0; n * d];
            for t in 0..n {
                attention_row(
                    c,
                    t,
                    &qkv[t * 3 * d..(t + 1) * 3 * d],
                    |j| &qkv[j * 3 * d + d..j * 3 * d + 2 * d],
                    |j| &qkv[j * 3 * d + 2 * d..(j + 1) * 3 * d],
                    |h, j, pr| probs[(h * n + t) * n + j] = pr,
                    &mut y[t * d..(t + 1) * d],
                );
            }
            let mut c_act = vec![0.0; n * d];
            let mut ln2 = NormCache::new(n, d);
            let mut f = vec![0.0; n * hid];
            let mut g = vec![0.0; n * hid];
            let mut tmp = vec![0.0; d];
            for t in 0..n {
                let row = t * d..(t + 1) * d;
                affine_row(
                    &y[row.clone()],
                    &p[slots.w_o..slots.w_o + d * d],
                    &p[slots.b_o..slots.b_o + d],
                    &mut tmp,
                );
                for (xi, ti) in x[row.clone()].iter_mut().zip(&tmp) {
                    *xi += ti;
                }
                layer_norm_row(
                    &x[row.clone()],
                    &p[slots.ln2_g..slots.ln2_g + d],
                    &p[slots.ln2_b..slots.ln2_b + d],
                    &mut c_act[row.clone()],
                    &mut ln2.xhat[row.clone()],
                    &mut ln2.rstd[t],
                );
                let hrow = t * hid..(t + 1) * hid;
                affine_row(
                    &c_act[row.clone()],
                    &p[slots.w_fc..slots.w_fc + d * hid],
                    &p[slots.b_fc..slots.b_fc + hid],
                    &mut f[hrow.clone()],
                );
                for (gi, &fi) in g[hrow.clone()].iter_mut().zip(&f[hrow.clone()]) {
                    *gi = gelu(fi);
                }
                affine_row(
                    &g[hrow],
                    &p[slots.w_proj..slots.w_proj + hid * d],
                    &p[slots.b_proj..slots.b_proj + d],
                    &mut tmp,
                );
                for (xi, ti) in x[row].iter_mut().zip(&tmp) {
                    *xi += ti;
                }
            }
            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                y,
                ln2,
                c: c_act,
                f,
                g,
            });
        }

        let mut lnf = NormCache::new(n, d);
        let mut z = vec![0.0; n * d];
        let mut logits = vec![0.0; n * v];
        for t in 0..n {
            let row = t * d..(t + 1) * d;
            layer_norm_row(
                &x[row.clone()],
                &p[layout.lnf_g..layout.lnf_g + d],
                &p[layout.lnf_b..layout.lnf_b + d],
                &mut z[row.clone()],
                &mut lnf.xhat[row.clone()],
                &mut lnf.rstd[t],
            );
            affine_row(
                &z[row],
                &p[layout.head_w..layout.head_w + d * v],
                &p[layout.head_b..layout.head_b + v],
                &mut logits[t * v..(t + 1) * v],
            );
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(Forward {
            tokens: tokens.to_vec(),
            vocab: v,
            layers,
            lnf,
            z,
            logits,
        })
    }

    /// Exact gradient of a scalar loss with respect to every parameter, given
    /// the loss's gradient with respect to the logits of `fwd` (row-major,
    /// one row per position).
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        let layout = Layout::new(c);
        let p = &self.params;
        let (n, d, hid, v) = (fwd.tokens.len(), c.d_model, c.mlp_hidden(), c.vocab_size);
        if dlogits.len() != n * v {
            return Err(Error::InvalidArgument(format!(
                "logit gradient has length {}, expected {}",
                dlogits.len(),
                n * v
            )));
        }
        check_finite(dlogits, "loss")?;
        let mut grad = vec![0.0; layout.total];

        // output head
        let mut dz = vec![0.0; n * d];
        {
            let (dw, db) = weight_and_bias(&mut grad, layout.head_w, d, v);
            affine_backward(
                &fwd.z,
                dlogits,
                &p[layout.head_w..layout.head_w + d * v],
                n,
                d,
                v,
                &mut dz,
                dw,
                db,
            );
        }
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(
            &fwd.lnf,
            &dz,
            &p[layout.lnf_g..layout.lnf_g + d],
            n,
            d,
            &mut dx,
            &mut grad,
            layout.lnf_g,
            layout.lnf_b,
        );
        check_finite(&dx, "final_layer_norm")?;

        for (slots, cache) in layout.layers.iter().zip(&fwd.layers).rev() {
            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            let mut dg = vec![0.0; n * hid];
            {
                let (dw, db) = weight_and_bias(&mut grad, slots.w_proj, hid, d);
                affine_backward(
                    &cache.g,
                    &dx,
                    &p[slots.w_proj..slots.w_proj + hid * d],
                    n,
                    hid,
                    d,
                    &mut dg,
                    dw,
                    db,
                );
            }
            let mut df = dg;
            for (dfi, &fi) in df.iter_mut().zip(&cache.f) {
                *dfi *= gelu_grad(fi);
            }
            let mut dc = vec![0.0; n * d];
            {
                let (dw, db) = weight_and_bias(&mut grad, slots.w_fc, d, hid);
                affine_backward(
                    &cache.c,
                    &df,
                    &p[slots.w_fc..slots.w_fc + d * hid],
                    n,
                    d,
                    hid,
                    &mut dc,
                    dw,
                    db,
                );
            }
            // dx accumulates the residual path plus the norm input gradient
            layer_norm_backward(
                &cache.ln2,
                &dc,
                &p[slots.ln2_g..slots.ln2_g + d],
                n,
                d,
                &mut dx,
                &mut grad,
                slots.ln2_g,
                slots.ln2_b,
            );
            check_finite(&dx, "mlp")?;

            // attention branch: x_mid = x_in + out(attn(qkv(ln1(x_in))))
            let mut dy = vec![0.0; n * d];
            {
                let (dw, db) = weight_and_bias(&mut grad, slots.w_o, d, d);
                affine_backward(
                    &cache.y,
                    &dx,
                    &p[slots.w_o..slots.w_o + d * d],
                    n,
                    d,
                    d,
                    &mut dy,
                    dw,
                    db,
                );
            }
            let mut dqkv = vec![0.0; n * 3 * d];
            attention_backward(c, n, &cache.qkv, &cache.probs, &dy, &mut dqkv);
            let mut da = vec![0.0; n * d];
            let mut db_qkv = vec![0.0; 3 * d];
            let (dw_qkv, _) = grad[slots.w_qkv..].split_at_mut(d * 3 * d);
            affine_backward(
                &cache.a,
                &dqkv,
                &p[slots.w_qkv..slots.w_qkv + d * 3 * d],
                n,
                d,
                3 * d,
                &mut da,
                dw_qkv,
                &mut db_qkv,
            );
            for k in 0..d {
                grad[slots.b_q + k] += db_qkv[k];
                grad[slots.b_v + k] += db_qkv[2 * d + k];
            }
            layer_norm_backward(
                &cache.ln1,
                &da,
                &p[slots.ln1_g..slots.ln1_g + d],
                n,
                d,
                &mut dx,
                &mut grad,
                slots.ln1_g,
                slots.ln1_b,
            );
            check_finite(&dx, "attention")?;
        }

        for (t, &tok) in fwd.tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let te = layout.tok_emb + tok as usize * d;
            let pe = layout.pos_emb + t * d;
            for k in 0..d {
                grad[te + k] += row[k];
                grad[pe + k] += row[k];
            }
        }
        check_finite(&grad, "embedding")?;
        Ok(grad)
    }

    /// Distribution of the token following `ctx`.
    pub fn next_token_dist(&self, ctx: &[TokenId]) -> Result<DistVec> {
        if ctx.is_empty() {
            return Err(Error::InvalidArgument(
                "context must be non-empty (prepend BOS)".into(),
            ));
        }
        let fwd = self.forward(ctx)?;
        Ok(DistVec {
            probs: softmax(fwd.logits(ctx.len() - 1)),
        })
    }

    /// `sum_t log P(x_t | prefix, x_<t)`.
    pub fn conditional_logprob(&self, prefix: &[TokenId], x: &[TokenId]) -> Result<f64> {
        if x.is_empty() {
            return Ok(0.0);
        }
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("prefix must be non-empty".into()));
        }
        let mut input = prefix.to_vec();
        input.extend_from_slice(&x[..x.len() - 1]);
        let fwd = self.forward(&input)?;
        let start = prefix.len() - 1;
        Ok(x.iter()
            .enumerate()
            .map(|(t, &target)| log_softmax_at(fwd.logits(start + t), target as usize))
            .sum())
    }

    /// `log P(x)` with BOS as the implicit first context token.
    pub fn sequence_logprob(&self, x: &[TokenId]) -> Result<f64> {
        if x.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: x.len(),
                context: self.config.context_len,
            });
        }
        self.conditional_logprob(&[BOS], x)
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<TokenId>,
    vocab: usize,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    z: Vec<f64>,
    logits: Vec<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits predicting the token after position `t`.
    pub fn logits(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn all_logits(&self) -> &[f64] {
        &self.logits
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    y: Vec<f64>,
    ln2: NormCache,
    c: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl NormCache {
    fn new(n: usize, d: usize) -> Self {
        NormCache {
            xhat: vec![0.0; n * d],
            rstd: vec![0.0; n],
        }
    }
}

fn check_finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn embed_row(p: &[f64], layout: &Layout, tok: TokenId, pos: usize, d: usize, out: &mut [f64]) {
    let te = &p[layout.tok_emb + tok as usize * d..][..d];
    let pe = &p[layout.pos_emb + pos * d..][..d];
    for k in 0..d {
        out[k] = te[k] + pe[k];
    }
}

/// `out = x W + b` for one row; `W` is `x.len() x out.len()`, row-major.
fn affine_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = out.len();
    out.copy_from_slice(b);
    for (k, &xk) in x.iter().enumerate() {
        let wrow = &w[k * m..(k + 1) * m];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xk * wv;
        }
    }
}

/// Gradient slices of a weight block immediately followed by its bias.
fn weight_and_bias(grad: &mut [f64], w_at: usize, k: usize, m: usize) -> (&mut [f64], &mut [f64]) {
    grad[w_at..w_at + k * m + m].split_at_mut(k * m)
}

/// Backward of `Y = X W + b` for `n` rows: writes `dX = dY W^T` and adds
/// `X^T dY` into `dw` and the column sums of `dY` into `db`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    n: usize,
    k: usize,
    m: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        let xr = &x[i * k..(i + 1) * k];
        for (kk, dxv) in dx[i * k..(i + 1) * k].iter_mut().enumerate() {
            let wrow = &w[kk * m..(kk + 1) * m];
            *dxv = wrow.iter().zip(dyr).map(|(a, b)| a * b).sum();
            let xv = xr[kk];
            if xv != 0.0 {
                let grow = &mut dw[kk * m..(kk + 1) * m];
                for (g, &dv) in grow.iter_mut().zip(dyr) {
                    *g += xv * dv;
                }
            }
        }
        for (g, &dv) in db.iter_mut().zip(dyr) {
            *g += dv;
        }
    }
}

fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut f64,
) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    *rstd = r;
    for k in 0..x.len() {
        xhat[k] = (x[k] - mean) * r;
        out[k] = xhat[k] * gain[k] + bias[k];
    }
}

/// Adds the input gradient of a layer norm into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    cache: &NormCache,
    dout: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    grad: &mut [f64],
    g_at: usize,
    b_at: usize,
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let row = i * d..(i + 1) * d;
        let xh = &cache.xhat[row.clone()];
        let dor = &dout[row.clone()];
        for k in 0..d {
            grad[g_at + k] += dor[k] * xh[k];
            grad[b_at + k] += dor[k];
            dxhat[k] = dor[k] * gain[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        for (k, dxv) in dx[row].iter_mut().enumerate() {
            *dxv += r * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
}

/// Causal attention for query position `t` over keys `0..=t`.
fn attention_row<'a, K, V, S>(
    c: &ModelConfig,
    t: usize,
    qkv_row: &[f64],
    key: K,
    value: V,
    mut store: S,
    out: &mut [f64],
) where
    K: Fn(usize) -> &'a [f64],
    V: Fn(usize) -> &'a [f64],
    S: FnMut(usize, usize, f64),
{
    let hd = c.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = vec![0.0; t + 1];
    out.fill(0.0);
    for h in 0..c.n_heads {
        let q = &qkv_row[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &key(j)[h * hd..(h + 1) * hd];
            *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let o = &mut out[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            store(h, j, *s);
            let vj = &value(j)[h * hd..(h + 1) * hd];
            for (ov, &vv) in o.iter_mut().zip(vj) {
                *ov += *s * vv;
            }
        }
    }
}

fn attention_backward(
    c: &ModelConfig,
    n: usize,
    qkv: &[f64],
    probs: &[f64],
    dy: &[f64],
    dqkv: &mut [f64],
) {
    let d = c.d_model;
    let hd = c.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = vec![0.0; n];
    for h in 0..c.n_heads {
        let off = h * hd;
        for i in 0..n {
            let dyi = &dy[i * d + off..i * d + off + hd];
            let prow = &probs[(h * n + i) * n..(h * n + i) * n + n];
            for j in 0..=i {
                let vj = &qkv[j * 3 * d + 2 * d + off..][..hd];
                dp[j] = dyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dqkv[j * 3 * d + 2 * d + off..][..hd];
                for (dv, &g) in dvj.iter_mut().zip(dyi) {
                    *dv += prow[j] * g;
                }
            }
            let dot: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for k in 0..hd {
                    let qk = qkv[i * 3 * d + off + k];
                    let kk = qkv[j * 3 * d + d + off + k];
                    dqkv[i * 3 * d + off + k] += ds * kk;
                    dqkv[j * 3 * d + d + off + k] += ds * qk;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}
