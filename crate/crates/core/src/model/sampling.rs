use rand::Rng;

use super::{
    affine_row, attention_row, embed_row, gelu, layer_norm_row, softmax, Layout, ModelState,
};
use crate::data::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::tokenizer::EOS;

/// Incremental decoder with a key/value cache. Produces bit-identical logits
/// to [`ModelState::forward`] on the same prefix.
pub struct DecodeSession<'m> {
    model: &'m ModelState,
    layout: Layout,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        let n_layers = model.config.n_layers;
        DecodeSession {
            model,
            layout: Layout::new(&model.config),
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the logits for the next position.
    pub fn push(&mut self, tok: TokenId) -> Result<Vec<f64>> {
        let c = &self.model.config;
        if self.len >= c.context_len {
            return Err(Error::ContextOverflow {
                len: self.len + 1,
                context: c.context_len,
            });
        }
        if tok as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab: c.vocab_size,
            });
        }
        let p = &self.model.params;
        let (d, hid, v) = (c.d_model, c.mlp_hidden(), c.vocab_size);
        let t = self.len;
        let mut x = vec![0.0; d];
        embed_row(p, &self.layout, tok, t, d, &mut x);

        let mut a = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut rstd = 0.0;
        let mut qkv = vec![0.0; 3 * d];
        let mut y = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut f = vec![0.0; hid];
        for (l, slots) in self.layout.layers.iter().enumerate() {
            let qkv_bias = slots.qkv_bias(p, d);
            layer_norm_row(
                &x,
                &p[slots.ln1_g..slots.ln1_g + d],
                &p[slots.ln1_b..slots.ln1_b + d],
                &mut a,
                &mut xhat,
                &mut rstd,
            );
            affine_row(
                &a,
                &p[slots.w_qkv..slots.w_qkv + d * 3 * d],
                &qkv_bias,
                &mut qkv,
            );
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            attention_row(
                c,
                t,
                &qkv,
                |j| &keys[j * d..(j + 1) * d],
                |j| &values[j * d..(j + 1) * d],
                |_, _, _| {},
                &mut y,
            );
            affine_row(
                &y,
                &p[slots.w_o..slots.w_o + d * d],
                &p[slots.b_o..slots.b_o + d],
                &mut tmp,
            );
            x.iter_mut().zip(&tmp).for_each(|(xi, ti)| *xi += ti);
            layer_norm_row(
                &x,
                &p[slots.ln2_g..slots.ln2_g + d],
                &p[slots.ln2_b..slots.ln2_b + d],
                &mut a,
                &mut xhat,
                &mut rstd,
            );
            affine_row(
                &a,
                &p[slots.w_fc..slots.w_fc + d * hid],
                &p[slots.b_fc..slots.b_fc + hid],
                &mut f,
            );
            f.iter_mut().for_each(|fi| *fi = gelu(*fi));
            affine_row(
                &f,
                &p[slots.w_proj..slots.w_proj + hid * d],
                &p[slots.b_proj..slots.b_proj + d],
                &mut tmp,
            );
            x.iter_mut().zip(&tmp).for_each(|(xi, ti)| *xi += ti);
        }
        let lf = &self.layout;
        layer_norm_row(
            &x,
            &p[lf.lnf_g..lf.lnf_g + d],
            &p[lf.lnf_b..lf.lnf_b + d],
            &mut a,
            &mut xhat,
            &mut rstd,
        );
        let mut logits = vec![0.0; v];
        affine_row(
            &a,
            &p[lf.head_w..lf.head_w + d * v],
            &p[lf.head_b..lf.head_b + v],
            &mut logits,
        );
        self.len += 1;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(logits)
    }
}

/// `softmax(logits / temperature)`; temperature zero gives a one-hot on the
/// lowest-id maximum.
pub fn tempered_probs(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        let mut out = vec![0.0; logits.len()];
        out[argmax(logits)] = 1.0;
        return Ok(out);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    Ok(softmax(&scaled))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId> {
    if temperature == 0.0 {
        return Ok(argmax(logits) as TokenId);
    }
    let probs = tempered_probs(logits, temperature)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i as TokenId);
        }
    }
    // rounding left `acc` a hair below one
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId)
}

/// Left-to-right sampling after `prompt`; stops at EOS (not included), after
/// `max_new` tokens, when the context is full, or once `stop` returns true on
/// the tokens generated so far (the triggering token is kept).
pub fn sample_until<R, F>(
    model: &ModelState,
    prompt: &[TokenId],
    temperature: f64,
    max_new: usize,
    rng: &mut R,
    mut stop: F,
) -> Result<TokenSeq>
where
    R: Rng + ?Sized,
    F: FnMut(&[TokenId]) -> bool,
{
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    if prompt.len() > model.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            context: model.config.context_len,
        });
    }
    let mut session = DecodeSession::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = session.push(t)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let tok = sample_from_logits(&logits, temperature, rng)?;
        if tok == EOS {
            break;
        }
        out.push(tok);
        if stop(&out) || session.len() >= model.config.context_len {
            break;
        }
        logits = session.push(tok)?;
    }
    Ok(TokenSeq::new(out))
}

pub fn sample<R: Rng + ?Sized>(
    model: &ModelState,
    prompt: &[TokenId],
    temperature: f64,
    max_new: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    sample_until(model, prompt, temperature, max_new, rng, |_| false)
}
