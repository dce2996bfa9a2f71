//! Training objectives over the tiny LM.
//!
//! Every objective scores an output sequence conditioned on an instruction.
//! The model sees `[BOS] instruction [SEP] output[..n-1]`, so the logits at
//! position `|instruction| + 1 + t` predict `output[t]`. Losses are sums over
//! output positions, never means.

use serde::{Deserialize, Serialize};

use crate::data::{InstructionSample, MaskVec, SecurityTriple, TokenId};
use crate::error::{Error, Result};
use crate::model::{log_softmax, log_softmax_at, softmax, Forward, ModelState};
use crate::tokenizer::{BOS, SEP};

/// Upper bound on the probability fed to `log(1 - P)`.
pub const UNLIKELIHOOD_CLAMP: f64 = 1.0 - 1e-12;

/// A loss value with its per-output-position breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub contributions: Vec<f64>,
}

impl LossValue {
    fn from_contributions(contributions: Vec<f64>) -> Self {
        LossValue {
            value: contributions.iter().sum(),
            contributions,
        }
    }
}

/// Settings of the SVEN baseline objective.
#[derive(Debug, Clone, Copy)]
pub struct SvenConfig<'a> {
    pub kl_weight: f64,
    pub base: &'a ModelState,
}

impl<'a> SvenConfig<'a> {
    pub fn new(kl_weight: f64, base: &'a ModelState) -> Result<Self> {
        if !(kl_weight >= 0.0) || !kl_weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "KL weight must be finite and >= 0, got {kl_weight}"
            )));
        }
        Ok(SvenConfig { kl_weight, base })
    }

    /// `2^n / 10`, the sweep used for the KL weight.
    pub fn sweep_weight(n: u32) -> f64 {
        2f64.powi(n as i32) / 10.0
    }
}

/// Which output of a triple a KL term is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Sec,
    Vul,
}

/// The individual terms of the SVEN objective for one triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvenTerms {
    pub sec: f64,
    pub vul: f64,
    pub kl_sec: f64,
    pub kl_vul: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl SvenTerms {
    pub fn combine(sec: f64, vul: f64, kl_sec: f64, kl_vul: f64, kl_weight: f64) -> Self {
        SvenTerms {
            sec,
            vul,
            kl_sec,
            kl_vul,
            kl_weight,
            total: sec + vul + kl_weight * (kl_sec + kl_vul),
        }
    }
}

/// How the output tokens of one sequence are scored.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Negative log-likelihood of every output token.
    Likelihood,
    /// Negative log-likelihood of the tokens whose mask bit is set.
    MaskedLikelihood(&'a MaskVec),
    /// `-log(1 - P)` of the tokens whose mask bit is set.
    Unlikelihood(&'a MaskVec),
}

/// Model input for scoring `output` after `instruction`.
pub fn model_input(instruction: &[TokenId], output: &[TokenId]) -> Vec<TokenId> {
    let mut input = Vec::with_capacity(instruction.len() + output.len() + 1);
    input.push(BOS);
    input.extend_from_slice(instruction);
    input.push(SEP);
    if let Some((_, head)) = output.split_last() {
        input.extend_from_slice(head);
    }
    input
}

/// Tokens the model must hold to score `output` after `instruction`.
pub fn required_context(instruction: &[TokenId], output: &[TokenId]) -> usize {
    instruction.len() + output.len() + 1
}

fn check_fits(m: &ModelState, instruction: &[TokenId], output: &[TokenId]) -> Result<()> {
    let len = required_context(instruction, output);
    if len > m.config().context_len {
        return Err(Error::ContextOverflow {
            len,
            context: m.config().context_len,
        });
    }
    Ok(())
}

fn check_mask(mask: &MaskVec, output: &[TokenId]) -> Result<()> {
    if mask.len() != output.len() {
        return Err(Error::InvalidArgument(format!(
            "mask has {} bits for {} output tokens",
            mask.len(),
            output.len()
        )));
    }
    Ok(())
}

fn check_same_config(m: &ModelState, base: &ModelState) -> Result<()> {
    if m.config() != base.config() {
        return Err(Error::ConfigMismatch(format!(
            "trained model {:?} vs base model {:?}",
            m.config(),
            base.config()
        )));
    }
    Ok(())
}

/// Forward pass over `[BOS] instruction [SEP] output[..n-1]`.
fn run(m: &ModelState, instruction: &[TokenId], output: &[TokenId]) -> Result<(Forward, usize)> {
    check_fits(m, instruction, output)?;
    let fwd = m.forward(&model_input(instruction, output))?;
    Ok((fwd, instruction.len() + 1))
}

/// Scores `output` and writes `d loss / d logits` into `dlogits` (rows of the
/// full forward pass). Rows of unscored positions are left untouched.
fn score_into(
    fwd: &Forward,
    offset: usize,
    output: &[TokenId],
    objective: Objective<'_>,
    mut dlogits: Option<&mut [f64]>,
) -> Vec<f64> {
    let vocab = fwd.all_logits().len() / fwd.len();
    let mut contributions = vec![0.0; output.len()];
    for (t, &target) in output.iter().enumerate() {
        let target = target as usize;
        let scored = match objective {
            Objective::Likelihood => true,
            Objective::MaskedLikelihood(mask) | Objective::Unlikelihood(mask) => mask.get(t),
        };
        if !scored {
            continue;
        }
        let row = offset + t;
        let logits = fwd.logits(row);
        match objective {
            Objective::Likelihood | Objective::MaskedLikelihood(_) => {
                contributions[t] = -log_softmax_at(logits, target);
                if let Some(d) = dlogits.as_deref_mut() {
                    let p = softmax(logits);
                    let out = &mut d[row * vocab..(row + 1) * vocab];
                    for (k, (o, pk)) in out.iter_mut().zip(&p).enumerate() {
                        *o += pk - if k == target { 1.0 } else { 0.0 };
                    }
                }
            }
            Objective::Unlikelihood(_) => {
                let p = softmax(logits);
                let pt = p[target];
                let clamped = pt > UNLIKELIHOOD_CLAMP;
                let pt = pt.min(UNLIKELIHOOD_CLAMP);
                contributions[t] = -(-pt).ln_1p();
                if let Some(d) = dlogits.as_deref_mut() {
                    // the clamp is flat above the bound
                    if !clamped {
                        let scale = pt / (1.0 - pt);
                        let out = &mut d[row * vocab..(row + 1) * vocab];
                        for (k, (o, pk)) in out.iter_mut().zip(&p).enumerate() {
                            *o += scale * (if k == target { 1.0 } else { 0.0 } - pk);
                        }
                    }
                }
            }
        }
    }
    contributions
}

/// `sum_t (1 - mask_t) KL(P || P_orig)`, adding `weight * d/dlogits` into
/// `dlogits` when given.
fn kl_into(
    fwd: &Forward,
    base_fwd: &Forward,
    offset: usize,
    mask: &MaskVec,
    weight: f64,
    mut dlogits: Option<&mut [f64]>,
) -> Vec<f64> {
    let vocab = fwd.all_logits().len() / fwd.len();
    let mut contributions = vec![0.0; mask.len()];
    for (t, c) in contributions.iter_mut().enumerate() {
        if mask.get(t) {
            continue;
        }
        let row = offset + t;
        let lp = log_softmax(fwd.logits(row));
        let lq = log_softmax(base_fwd.logits(row));
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let kl: f64 = p
            .iter()
            .zip(lp.iter().zip(&lq))
            .map(|(pk, (a, b))| pk * (a - b))
            .sum();
        *c = kl.max(0.0);
        if let Some(d) = dlogits.as_deref_mut() {
            let out = &mut d[row * vocab..(row + 1) * vocab];
            for k in 0..vocab {
                out[k] += weight * p[k] * (lp[k] - lq[k] - kl);
            }
        }
    }
    contributions
}

fn objective_output(s: &SecurityTriple, side: Side) -> (&[TokenId], &MaskVec) {
    match side {
        Side::Sec => (s.secure_out(), s.sec_mask()),
        Side::Vul => (s.vuln_out(), s.vul_mask()),
    }
}

/// Value of `objective` on `output` after `instruction`.
pub fn evaluate(
    m: &ModelState,
    instruction: &[TokenId],
    output: &[TokenId],
    objective: Objective<'_>,
) -> Result<LossValue> {
    if let Objective::MaskedLikelihood(mask) | Objective::Unlikelihood(mask) = objective {
        check_mask(mask, output)?;
    }
    let (fwd, offset) = run(m, instruction, output)?;
    Ok(LossValue::from_contributions(score_into(
        &fwd, offset, output, objective, None,
    )))
}

/// Loss value plus its gradient with respect to the logits that predict each
/// output token (`|output| x vocab`, row-major).
pub fn output_logit_grad(
    m: &ModelState,
    instruction: &[TokenId],
    output: &[TokenId],
    objective: Objective<'_>,
) -> Result<(LossValue, Vec<f64>)> {
    if let Objective::MaskedLikelihood(mask) | Objective::Unlikelihood(mask) = objective {
        check_mask(mask, output)?;
    }
    let (fwd, offset) = run(m, instruction, output)?;
    let vocab = m.config().vocab_size;
    let mut d = vec![0.0; fwd.len() * vocab];
    let c = score_into(&fwd, offset, output, objective, Some(&mut d));
    Ok((
        LossValue::from_contributions(c),
        d[offset * vocab..].to_vec(),
    ))
}

/// Value and parameter gradient of `objective`.
pub fn gradient(
    m: &ModelState,
    instruction: &[TokenId],
    output: &[TokenId],
    objective: Objective<'_>,
) -> Result<(LossValue, Vec<f64>)> {
    if let Objective::MaskedLikelihood(mask) | Objective::Unlikelihood(mask) = objective {
        check_mask(mask, output)?;
    }
    let (fwd, offset) = run(m, instruction, output)?;
    let mut d = vec![0.0; fwd.len() * m.config().vocab_size];
    let c = score_into(&fwd, offset, output, objective, Some(&mut d));
    let grad = m.backward(&fwd, &d)?;
    Ok((LossValue::from_contributions(c), grad))
}

pub fn loss_std(m: &ModelState, s: &InstructionSample) -> Result<LossValue> {
    evaluate(m, &s.instruction, &s.output, Objective::Likelihood)
}

pub fn loss_sec(m: &ModelState, s: &SecurityTriple) -> Result<LossValue> {
    evaluate(
        m,
        s.instruction(),
        s.secure_out(),
        Objective::MaskedLikelihood(s.sec_mask()),
    )
}

pub fn loss_vul(m: &ModelState, s: &SecurityTriple) -> Result<LossValue> {
    evaluate(
        m,
        s.instruction(),
        s.vuln_out(),
        Objective::Unlikelihood(s.vul_mask()),
    )
}

/// KL from the frozen base model on the unmasked positions of one side.
pub fn loss_sven_kl(
    m: &ModelState,
    base: &ModelState,
    s: &SecurityTriple,
    side: Side,
) -> Result<LossValue> {
    check_same_config(m, base)?;
    let (output, mask) = objective_output(s, side);
    let (fwd, offset) = run(m, s.instruction(), output)?;
    let base_fwd = base.forward(&model_input(s.instruction(), output))?;
    Ok(LossValue::from_contributions(kl_into(
        &fwd, &base_fwd, offset, mask, 0.0, None,
    )))
}

/// All terms of the SVEN objective.
pub fn sven_terms(m: &ModelState, s: &SecurityTriple, cfg: &SvenConfig<'_>) -> Result<SvenTerms> {
    Ok(SvenTerms::combine(
        loss_sec(m, s)?.value,
        loss_vul(m, s)?.value,
        loss_sven_kl(m, cfg.base, s, Side::Sec)?.value,
        loss_sven_kl(m, cfg.base, s, Side::Vul)?.value,
        cfg.kl_weight,
    ))
}

/// `L_sec + L_vul + w (KL_sec + KL_vul)`. Contributions list the secure
/// output's positions followed by the vulnerable output's.
pub fn loss_sven_total(
    m: &ModelState,
    s: &SecurityTriple,
    cfg: &SvenConfig<'_>,
) -> Result<LossValue> {
    let sec = loss_sec(m, s)?;
    let vul = loss_vul(m, s)?;
    let kl_sec = loss_sven_kl(m, cfg.base, s, Side::Sec)?;
    let kl_vul = loss_sven_kl(m, cfg.base, s, Side::Vul)?;
    let w = cfg.kl_weight;
    let mut contributions: Vec<f64> = sec
        .contributions
        .iter()
        .zip(&kl_sec.contributions)
        .map(|(a, k)| a + w * k)
        .collect();
    contributions.extend(
        vul.contributions
            .iter()
            .zip(&kl_vul.contributions)
            .map(|(a, k)| a + w * k),
    );
    Ok(LossValue {
        value: SvenTerms::combine(sec.value, vul.value, kl_sec.value, kl_vul.value, w).total,
        contributions,
    })
}

/// Value and gradient of `L_std`.
pub fn std_gradient(m: &ModelState, s: &InstructionSample) -> Result<(LossValue, Vec<f64>)> {
    gradient(m, &s.instruction, &s.output, Objective::Likelihood)
}

/// Value and gradient of `L_sec + L_vul`, or of the SVEN objective when a
/// config is given. A KL weight of zero skips the base model entirely, so the
/// result is bit-identical to the plain security objective.
pub fn security_gradient(
    m: &ModelState,
    s: &SecurityTriple,
    sven: Option<&SvenConfig<'_>>,
) -> Result<(SvenTerms, Vec<f64>)> {
    let kl = match sven {
        Some(cfg) => {
            check_same_config(m, cfg.base)?;
            (cfg.kl_weight != 0.0).then_some(cfg)
        }
        None => None,
    };
    let vocab = m.config().vocab_size;
    let mut values = [0.0; 4];
    let mut grad: Option<Vec<f64>> = None;
    for side in [Side::Sec, Side::Vul] {
        let (output, mask) = objective_output(s, side);
        let (fwd, offset) = run(m, s.instruction(), output)?;
        let mut d = vec![0.0; fwd.len() * vocab];
        let objective = match side {
            Side::Sec => Objective::MaskedLikelihood(mask),
            Side::Vul => Objective::Unlikelihood(mask),
        };
        let main: f64 = score_into(&fwd, offset, output, objective, Some(&mut d))
            .iter()
            .sum();
        let kl: f64 = match kl {
            Some(cfg) => {
                let base_fwd = cfg.base.forward(&model_input(s.instruction(), output))?;
                kl_into(&fwd, &base_fwd, offset, mask, cfg.kl_weight, Some(&mut d))
                    .iter()
                    .sum()
            }
            None => 0.0,
        };
        let i = side as usize;
        values[i] = main;
        values[2 + i] = kl;
        let g = m.backward(&fwd, &d)?;
        grad = Some(match grad {
            None => g,
            Some(mut acc) => {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    let w = sven.map_or(0.0, |c| c.kl_weight);
    Ok((
        SvenTerms::combine(values[0], values[1], values[2], values[3], w),
        grad.expect("two sides"),
    ))
}
