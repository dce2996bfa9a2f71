//! Joint standard + security instruction tuning, oversampling, and the SVEN
//! baseline trainer.
//!
//! Every micro-step processes one sample. Gradients are averaged over
//! `grad_accum_steps` micro-steps (the last window of a run may be shorter),
//! clipped to a global norm, and applied with AdamW.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassKey, Dataset, InstructionSample, SecurityTriple};
use crate::error::{Error, Result};
use crate::losses::{self, required_context, SvenConfig, SvenTerms};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub oversample_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 3e-3,
            grad_accum_steps: 16,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            oversample_k: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        let a = &self.adam;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if self.oversample_k == 0 {
            return bad("oversample_k must be >= 1");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adam eps must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Dataset a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Std,
    Sec,
}

/// Objective applied at a micro-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `L_std`
    Std,
    /// `L_sec + L_vul`
    SecVul,
    /// `L_sec + L_vul + w (KL_sec + KL_vul)`
    Sven,
}

/// One micro-step. Gradient norms are present on steps that ended an
/// accumulation window and therefore applied an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub origin: Origin,
    /// Index of the sample in its source list (`std_samples`, or the
    /// security list before oversampling).
    pub sample: usize,
    pub kind: LossKind,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm_post: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sven: Option<SvenTerms>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn updates(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.grad_norm_pre.is_some())
            .count()
    }

    /// Mean loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[i]);
        }
    }
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(g);
    if norm > max_norm {
        let scale = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= scale);
    }
    norm
}

/// Pads every (cwe, language) class with fewer than `k` members up to `k` by
/// drawing duplicates of its own members uniformly with replacement, then
/// shuffles the result.
pub fn oversample<R: Rng + ?Sized>(
    sec: &[SecurityTriple],
    k: usize,
    rng: &mut R,
) -> Result<Vec<SecurityTriple>> {
    Ok(oversample_indices(sec, k, rng)?
        .into_iter()
        .map(|i| sec[i].clone())
        .collect())
}

/// [`oversample`] on indices into `sec`.
pub fn oversample_indices<R: Rng + ?Sized>(
    sec: &[SecurityTriple],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("oversample k must be >= 1".into()));
    }
    let mut classes: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
    for (i, t) in sec.iter().enumerate() {
        classes.entry(t.class_key()).or_default().push(i);
    }
    let mut out: Vec<usize> = (0..sec.len()).collect();
    for members in classes.values() {
        for _ in members.len()..k {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Seeded RNG streams used by a training run.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut over = ChaCha8Rng::seed_from_u64(seed);
    over.set_stream(1);
    let mut order = ChaCha8Rng::seed_from_u64(seed);
    order.set_stream(2);
    (over, order)
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Std(usize),
    Sec(usize),
}

fn check_lengths(m: &ModelState, std: &[InstructionSample], sec: &[SecurityTriple]) -> Result<()> {
    let context = m.config().context_len;
    let lens = std
        .iter()
        .map(|s| required_context(&s.instruction, &s.output))
        .chain(sec.iter().flat_map(|t| {
            [
                required_context(t.instruction(), t.secure_out()),
                required_context(t.instruction(), t.vuln_out()),
            ]
        }));
    for len in lens {
        if len > context {
            return Err(Error::ContextOverflow { len, context });
        }
    }
    Ok(())
}

fn non_finite_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

fn run(
    mut model: ModelState,
    std: &[InstructionSample],
    sec: &[SecurityTriple],
    cfg: &TrainConfig,
    sven: Option<&SvenConfig<'_>>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    check_lengths(&model, std, sec)?;
    let (mut over_rng, mut order_rng) = streams(cfg.seed);
    let sec_order = oversample_indices(sec, cfg.oversample_k, &mut over_rng)?;
    let mut items: Vec<Item> = (0..std.len()).map(Item::Std).collect();
    items.extend(sec_order.iter().map(|&i| Item::Sec(i)));

    let n = model.params().len();
    let mut opt = AdamW::new(n, cfg.adam);
    let mut acc = vec![0.0; n];
    let mut in_window = 0usize;
    let mut log = TrainLog::default();
    let total_steps = cfg.epochs * items.len();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = items.clone();
        order.shuffle(&mut order_rng);
        for item in order {
            let on_err = non_finite_at(step);
            let (origin, sample, kind, loss, terms, grad) = match item {
                Item::Std(i) => {
                    let (l, g) = losses::std_gradient(&model, &std[i]).map_err(&on_err)?;
                    (Origin::Std, i, LossKind::Std, l.value, None, g)
                }
                Item::Sec(i) => {
                    let (terms, g) =
                        losses::security_gradient(&model, &sec[i], sven).map_err(&on_err)?;
                    let kind = if sven.is_some() {
                        LossKind::Sven
                    } else {
                        LossKind::SecVul
                    };
                    (Origin::Sec, i, kind, terms.total, sven.map(|_| terms), g)
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g);
            in_window += 1;
            let mut rec = StepRecord {
                step,
                epoch,
                origin,
                sample,
                kind,
                loss,
                grad_norm_pre: None,
                grad_norm_post: None,
                sven: terms,
            };
            step += 1;
            if in_window == cfg.grad_accum_steps || step == total_steps {
                let scale = 1.0 / in_window as f64;
                acc.iter_mut().for_each(|a| *a *= scale);
                let pre = clip_global_norm(&mut acc, cfg.clip_norm);
                rec.grad_norm_pre = Some(pre);
                rec.grad_norm_post = Some(global_norm(&acc));
                opt.step(model.params_mut(), &acc, cfg.learning_rate);
                if model.params().iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFiniteLoss { step: rec.step });
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                in_window = 0;
            }
            log.records.push(rec);
        }
        if log::log_enabled!(log::Level::Debug) {
            let means = log.epoch_means();
            if let Some(m) = means.last() {
                log::debug!("epoch {epoch}: mean loss {m:.4}");
            }
        }
    }
    Ok((model, log))
}

/// Joint tuning over `D^std` and the oversampled `D^sec`: standard samples
/// take `L_std`, security samples `L_sec + L_vul`.
pub fn train_joint(
    model: ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    run(model, &data.std_samples, &data.sec_samples, cfg, None)
}

/// Plain instruction tuning on `D^std` alone.
pub fn train_standard(
    model: ModelState,
    std: &[InstructionSample],
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    run(model, std, &[], cfg, None)
}

/// SVEN-style security tuning of `model` over `D^sec` with KL regularization
/// towards the frozen `sven.base`.
pub fn train_sven(
    model: ModelState,
    sec: &[SecurityTriple],
    cfg: &TrainConfig,
    sven: &SvenConfig<'_>,
) -> Result<(ModelState, TrainLog)> {
    run(model, &[], sec, cfg, Some(sven))
}
