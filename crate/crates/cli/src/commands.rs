//! Subcommand implementations. Every output file name carries a hash of the
//! section that produced it, the seed and the bytes of its inputs, so reruns
//! overwrite identical files and sweeps never collide.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use sectune_core::data::{load_dataset, save_dataset, Dataset};
use sectune_core::eval::{
    load_scenarios, run_scenario_by_id, security_rate, utility_probe, SampleConfig, Scenario,
};
use sectune_core::losses::{required_context, SvenConfig};
use sectune_core::minilang;
use sectune_core::model::{load_checkpoint, save_checkpoint, ModelState};
use sectune_core::pipeline::{
    collect_dataset, detector_by_id, load_commits, rebalance_clean, save_commits, write_jsonl,
    Funnel, InstGenerator, TemplateGenerator,
};
use sectune_core::synth;
use sectune_core::trainer::{train_joint, train_standard, train_sven, TrainConfig, TrainLog};
use sectune_core::{InstructionSample, SecurityTriple, Tokenizer};

use crate::config::{section, EvalSection, Mode, RunConfig, SweepSection, TrainSection};
use crate::report::{ls_slope, Aggregate, EvalReport, ExperimentReport, ReportRow, SweepPoint};
use crate::{CliError, CliResult};

/// First 16 hex digits of SHA-256 over `parts`, each length-prefixed.
pub fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

fn file_hash(path: &Path) -> CliResult<Vec<u8>> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).to_vec())
}

/// Hash of a config section, the seed and the contents of `inputs`.
fn run_key<T: Serialize>(section: &T, seed: u64, inputs: &[&Path]) -> CliResult<String> {
    let mut parts = vec![serde_json::to_vec(section)?, seed.to_le_bytes().to_vec()];
    for p in inputs {
        parts.push(file_hash(p)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(digest(&refs))
}

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_jsonl(items, &mut w)?;
    w.flush()?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn tokenizer() -> Tokenizer {
    minilang::tokenizer()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub commits: PathBuf,
    pub planted: PathBuf,
    pub pretrain: PathBuf,
    pub standard: PathBuf,
    pub probes: PathBuf,
    pub scenarios: PathBuf,
}

/// Writes the synthetic corpora: commits, the planted-fix manifest,
/// pretraining and standard instruction data, utility probes and scenarios.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<SynthOutput> {
    let dir = out_dir(cfg)?;
    let tok = tokenizer();
    let s = &cfg.synth;
    let corpus = synth::commit_corpus(&s.shape, cfg.seed)?;
    let out = SynthOutput {
        commits: dir.join("commits.jsonl"),
        planted: dir.join("planted.jsonl"),
        pretrain: dir.join("pretrain.jsonl"),
        standard: dir.join("standard.jsonl"),
        probes: dir.join("probes.jsonl"),
        scenarios: dir.join(format!("scenarios-{}.jsonl", s.language)),
    };
    save_commits(&corpus.commits, &out.commits)?;
    write_lines(&corpus.planted, &out.planted)?;
    let std_only = |samples: Vec<InstructionSample>| Dataset {
        std_samples: samples,
        sec_samples: Vec::new(),
    };
    save_dataset(
        &std_only(synth::pretrain_samples(&tok, &s.mix, cfg.seed)?),
        &out.pretrain,
        &tok,
    )?;
    save_dataset(
        &std_only(synth::standard_samples(&tok)?),
        &out.standard,
        &tok,
    )?;
    save_dataset(&std_only(synth::utility_probes(&tok)?), &out.probes, &tok)?;
    write_lines(&synth::scenarios(&s.language), &out.scenarios)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub dataset: PathBuf,
    pub skips: PathBuf,
    pub funnel: Funnel,
    pub kept: usize,
}

impl MineOutput {
    pub fn summary(&self) -> String {
        let f = &self.funnel;
        format!(
            "commits {}  filtered {}  analyzed {}  verified {}  pairs {}  triples {}  kept {}\n\
             dataset {}\n",
            f.commits,
            f.filtered,
            f.analyzed,
            f.verified,
            f.pairs,
            f.triples,
            self.kept,
            self.dataset.display()
        )
    }
}

fn generator_by_id(id: &str) -> CliResult<Box<dyn InstGenerator>> {
    match id {
        "template" => Ok(Box::new(TemplateGenerator)),
        _ => Err(CliError::Usage(format!(
            "unknown instruction generator {id:?} (available: template)"
        ))),
    }
}

/// Mines the commit corpus into a security dataset plus a skip log.
pub fn cmd_mine(cfg: &RunConfig) -> CliResult<MineOutput> {
    let p = section(&cfg.pipeline, "pipeline")?;
    let det = detector_by_id(&p.detector)
        .ok_or_else(|| CliError::Usage(format!("unknown detector {:?}", p.detector)))?;
    let gen = generator_by_id(&p.generator)?;
    let commits = load_commits(&p.corpus)
        .map_err(|e| CliError::Data(format!("cannot read corpus {}: {e}", p.corpus.display())))?;
    let tok = tokenizer();
    let mined = collect_dataset(&commits, det.as_ref(), &p.rules, gen.as_ref(), &tok)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kept = rebalance_clean(mined.triples, p.max_per_class, &mut rng)?;
    let key = run_key(p, cfg.seed, &[&p.corpus])?;
    let dir = out_dir(cfg)?;
    let dataset = dir.join(format!("dataset-{key}.jsonl"));
    let skips = dir.join(format!("skips-{key}.jsonl"));
    let n = kept.len();
    save_dataset(
        &Dataset {
            std_samples: Vec::new(),
            sec_samples: kept,
        },
        &dataset,
        &tok,
    )?;
    write_lines(&mined.skips, &skips)?;
    write_json(&mined.funnel, &dir.join(format!("funnel-{key}.json")))?;
    Ok(MineOutput {
        dataset,
        skips,
        funnel: mined.funnel,
        kept: n,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub updates: usize,
}

fn load_std(path: &Option<PathBuf>, tok: &Tokenizer) -> CliResult<Vec<InstructionSample>> {
    match path {
        Some(p) => Ok(load_dataset(p, tok)?.std_samples),
        None => Ok(Vec::new()),
    }
}

fn load_sec(path: &Option<PathBuf>, tok: &Tokenizer) -> CliResult<Vec<SecurityTriple>> {
    match path {
        Some(p) => Ok(load_dataset(p, tok)?.sec_samples),
        None => Ok(Vec::new()),
    }
}

/// Rejects the first sample that does not fit the model's context.
fn check_context(
    std: &[InstructionSample],
    sec: &[SecurityTriple],
    context: usize,
) -> CliResult<()> {
    for (i, s) in std.iter().enumerate() {
        let need = required_context(&s.instruction, &s.output);
        if need > context {
            return Err(CliError::Data(format!(
                "standard sample {i} needs {need} positions, context is {context}"
            )));
        }
    }
    for (i, t) in sec.iter().enumerate() {
        let need = required_context(t.instruction(), t.secure_out())
            .max(required_context(t.instruction(), t.vuln_out()));
        if need > context {
            return Err(CliError::Data(format!(
                "security sample {i} needs {need} positions, context is {context}"
            )));
        }
    }
    Ok(())
}

fn write_log(log: &TrainLog, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Trains per `[train]`: `standard_only` on `D^std`, `safecoder` jointly on
/// `D^std` and `D^sec`, `sven` on `D^sec` against a frozen base.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let t = section(&cfg.train, "train")?;
    train_with(cfg, t, "model")
}

fn train_with(cfg: &RunConfig, t: &TrainSection, prefix: &str) -> CliResult<TrainOutput> {
    let tok = tokenizer();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..t.config
    };
    train_cfg.validate()?;
    if t.mode == Mode::Sven && t.base.is_none() {
        return Err(CliError::Usage("mode sven needs [train] base".into()));
    }
    if t.mode == Mode::StandardOnly && t.std_data.is_none() {
        return Err(CliError::Usage(
            "mode standard_only needs [train] std_data".into(),
        ));
    }
    let std = if t.mode == Mode::Sven {
        Vec::new()
    } else {
        load_std(&t.std_data, &tok)?
    };
    let sec = if t.mode == Mode::StandardOnly {
        Vec::new()
    } else {
        load_sec(&t.sec_data, &tok)?
    };
    let base = t.base.as_deref().map(load_checkpoint).transpose()?;
    let init = match (&t.init, &base) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Some(b)) if t.mode == Mode::Sven => b.clone(),
        _ => ModelState::init(t.model.config(tok.vocab_size()), cfg.seed)?,
    };
    check_context(&std, &sec, init.config().context_len)?;
    let (model, log) = match t.mode {
        Mode::StandardOnly => train_standard(init, &std, &train_cfg)?,
        Mode::Safecoder => train_joint(
            init,
            &Dataset {
                std_samples: std,
                sec_samples: sec,
            },
            &train_cfg,
        )?,
        Mode::Sven => {
            let base = base.as_ref().expect("checked above");
            train_sven(init, &sec, &train_cfg, &SvenConfig::new(t.kl_weight, base)?)?
        }
    };
    let inputs: Vec<&Path> = [&t.std_data, &t.sec_data, &t.init, &t.base]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect();
    let key = run_key(t, cfg.seed, &inputs)?;
    let dir = out_dir(cfg)?;
    let out = TrainOutput {
        checkpoint: dir.join(format!("{prefix}-{key}.ckpt")),
        log: dir.join(format!("trainlog-{key}.jsonl")),
        updates: log.updates(),
    };
    save_checkpoint(&model, &out.checkpoint)?;
    write_log(&log, &out.log)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub path: PathBuf,
    pub table: PathBuf,
    pub report: EvalReport,
}

/// Security over every scenario and variant plus the optional utility probe.
pub fn evaluate(
    model: &ModelState,
    checkpoint: &str,
    scenarios: &[Scenario],
    probes: &[InstructionSample],
    e: &EvalSection,
    seed: u64,
) -> CliResult<EvalReport> {
    let tok = tokenizer();
    let sample = SampleConfig {
        n: e.n,
        temperature: e.temperature,
        seed,
    };
    let mut results = Vec::new();
    let mut aggregates = Vec::new();
    for &v in &e.variants {
        let rows = scenarios
            .iter()
            .map(|s| run_scenario_by_id(model, &tok, s, v, &sample))
            .collect::<sectune_core::Result<Vec<_>>>()?;
        let undefined: Vec<String> = rows
            .iter()
            .filter(|r| r.rate.is_none())
            .map(|r| r.scenario.clone())
            .collect();
        for id in &undefined {
            log::warn!(
                "{checkpoint}: scenario {id} produced no valid program ({})",
                v.name()
            );
        }
        aggregates.push(Aggregate {
            variant: v,
            security: security_rate(&rows).ok(),
            undefined,
        });
        results.extend(rows);
    }
    let utility = if probes.is_empty() {
        None
    } else {
        Some(utility_probe(model, &tok, probes, &sample)?)
    };
    Ok(EvalReport {
        kind: EvalReport::KIND.into(),
        checkpoint: checkpoint.to_string(),
        seed,
        n: e.n,
        temperature: e.temperature,
        results,
        aggregates,
        utility,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalOutput> {
    let e = section(&cfg.eval, "eval")?;
    eval_with(cfg, e)
}

fn eval_with(cfg: &RunConfig, e: &EvalSection) -> CliResult<EvalOutput> {
    if e.variants.is_empty() {
        return Err(CliError::Usage("[eval] variants is empty".into()));
    }
    let tok = tokenizer();
    let model = load_checkpoint(&e.checkpoint)?;
    let scenarios = load_scenarios(&e.scenarios)?;
    let probes = load_std(&e.probes, &tok)?;
    let report = evaluate(
        &model,
        &file_name(&e.checkpoint),
        &scenarios,
        &probes,
        e,
        cfg.seed,
    )?;
    let mut inputs: Vec<&Path> = vec![&e.checkpoint, &e.scenarios];
    inputs.extend(e.probes.as_deref());
    let key = run_key(e, cfg.seed, &inputs)?;
    let dir = out_dir(cfg)?;
    let path = dir.join(format!("eval-{key}.json"));
    let table = dir.join(format!("eval-{key}.txt"));
    write_json(&report, &path)?;
    fs::write(&table, report.render())?;
    Ok(EvalOutput {
        path,
        table,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub path: PathBuf,
    pub table: PathBuf,
    pub report: ExperimentReport,
}

fn write_experiment(
    cfg: &RunConfig,
    prefix: &str,
    key: &str,
    report: &ExperimentReport,
) -> CliResult<(PathBuf, PathBuf)> {
    let dir = out_dir(cfg)?;
    let path = dir.join(format!("{prefix}-{key}.json"));
    let table = dir.join(format!("{prefix}-{key}.txt"));
    write_json(report, &path)?;
    fs::write(&table, report.render())?;
    Ok((path, table))
}

/// Trains one SVEN model per weight `2^n / 10` from the base checkpoint and
/// scores each for security and utility.
pub fn cmd_sweep_sven(cfg: &RunConfig) -> CliResult<ExperimentOutput> {
    let s = section(&cfg.sweep, "sweep")?;
    sweep_with(cfg, s)
}

fn sweep_with(cfg: &RunConfig, s: &SweepSection) -> CliResult<ExperimentOutput> {
    if s.exponents.is_empty() {
        return Err(CliError::Usage("[sweep] exponents is empty".into()));
    }
    let tok = tokenizer();
    let base = load_checkpoint(&s.base)?;
    let sec = load_sec(&Some(s.sec_data.clone()), &tok)?;
    let scenarios = load_scenarios(&s.scenarios)?;
    let probes = load_std(&Some(s.probes.clone()), &tok)?;
    check_context(&[], &sec, base.config().context_len)?;
    let key = run_key(
        s,
        cfg.seed,
        &[&s.base, &s.sec_data, &s.scenarios, &s.probes],
    )?;
    let dir = out_dir(cfg)?.to_path_buf();
    let eval = EvalSection {
        n: s.n,
        temperature: s.temperature,
        ..EvalSection::default()
    };
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..s.config
    };
    let mut report = ExperimentReport::new("w_kl");
    for &n in &s.exponents {
        let w = SvenConfig::sweep_weight(n);
        let (model, log) = train_sven(base.clone(), &sec, &train_cfg, &SvenConfig::new(w, &base)?)?;
        let ckpt = dir.join(format!("sven-{key}-n{n}.ckpt"));
        let log_path = dir.join(format!("trainlog-{key}-n{n}.jsonl"));
        save_checkpoint(&model, &ckpt)?;
        write_log(&log, &log_path)?;
        let r = evaluate(
            &model,
            &file_name(&ckpt),
            &scenarios,
            &probes,
            &eval,
            cfg.seed,
        )?;
        log::info!(
            "sweep n={n} w={w}: security {:?} utility {:?}",
            r.security(eval.variants[0]),
            r.utility()
        );
        report.sweep.push(SweepPoint {
            exponent: n,
            kl_weight: w,
            checkpoint: file_name(&ckpt),
            log: file_name(&log_path),
            security: r.security(eval.variants[0]),
            utility: r.utility(),
        });
    }
    let xy: Vec<(f64, f64)> = report
        .sweep
        .iter()
        .filter_map(|p| Some((p.utility?, p.security?)))
        .collect();
    report.slope = ls_slope(&xy);
    let (path, table) = write_experiment(cfg, "sweep", &key, &report)?;
    Ok(ExperimentOutput {
        path,
        table,
        report,
    })
}

/// Merges eval, sweep and study reports into one table.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<ExperimentOutput> {
    let r = section(&cfg.report, "report")?;
    if r.inputs.is_empty() {
        return Err(CliError::Usage("[report] inputs is empty".into()));
    }
    let mut merged = ExperimentReport::new(r.title.clone());
    for p in &r.inputs {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some(EvalReport::KIND) => {
                let e: EvalReport = serde_json::from_value(value)?;
                let variant = e.aggregates.first().map(|a| a.variant);
                merged.rows.push(ReportRow {
                    label: e.checkpoint.clone(),
                    checkpoint: e.checkpoint.clone(),
                    seed: e.seed,
                    security: variant.and_then(|v| e.security(v)),
                    utility: e.utility(),
                });
            }
            Some(ExperimentReport::KIND) => {
                let x: ExperimentReport = serde_json::from_value(value)?;
                merged.rows.extend(x.rows);
                merged.sweep.extend(x.sweep);
            }
            _ => {
                return Err(CliError::Data(format!(
                    "{}: not an eval or experiment report",
                    p.display()
                )))
            }
        }
    }
    let xy: Vec<(f64, f64)> = merged
        .sweep
        .iter()
        .filter_map(|p| Some((p.utility?, p.security?)))
        .collect();
    merged.slope = ls_slope(&xy);
    let inputs: Vec<&Path> = r.inputs.iter().map(PathBuf::as_path).collect();
    let key = run_key(r, cfg.seed, &inputs)?;
    let (path, table) = write_experiment(cfg, "report", &key, &merged)?;
    Ok(ExperimentOutput {
        path,
        table,
        report: merged,
    })
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub synth: SynthOutput,
    pub mined: MineOutput,
    pub base: PathBuf,
    pub standard_only: PathBuf,
    pub safecoder: PathBuf,
    pub report: ExperimentOutput,
}

/// The end-to-end micro-study: synthesize corpora, mine `D^sec`, pretrain a
/// base model, fine-tune it standard-only and with security tuning, and
/// score all three.
pub fn cmd_study(cfg: &RunConfig) -> CliResult<StudyOutput> {
    let st = cfg.study.clone().unwrap_or_default();
    let synth = cmd_synth(cfg)?;

    let mut c = cfg.clone();
    c.pipeline = Some(crate::config::PipelineSection {
        corpus: synth.commits.clone(),
        ..Default::default()
    });
    let mined = cmd_mine(&c)?;

    let train = |mode: Mode,
                 init: Option<&Path>,
                 data: &Path,
                 sec: Option<&Path>,
                 tc: TrainConfig,
                 prefix: &str| {
        let t = TrainSection {
            mode,
            std_data: Some(data.to_path_buf()),
            sec_data: sec.map(Path::to_path_buf),
            init: init.map(Path::to_path_buf),
            base: None,
            model: st.model,
            config: tc,
            kl_weight: 0.0,
        };
        train_with(cfg, &t, prefix)
    };
    let base = train(
        Mode::StandardOnly,
        None,
        &synth.pretrain,
        None,
        st.pretrain,
        "base",
    )?;
    let std_only = train(
        Mode::StandardOnly,
        Some(&base.checkpoint),
        &synth.standard,
        None,
        st.finetune,
        "standard",
    )?;
    let safecoder = train(
        Mode::Safecoder,
        Some(&base.checkpoint),
        &synth.standard,
        Some(&mined.dataset),
        st.finetune,
        "safecoder",
    )?;

    let e = EvalSection {
        checkpoint: PathBuf::new(),
        scenarios: synth.scenarios.clone(),
        probes: Some(synth.probes.clone()),
        n: st.n,
        temperature: st.temperature,
        ..EvalSection::default()
    };
    let mut report = ExperimentReport::new("configuration");
    for (label, ckpt) in [
        ("none", &base.checkpoint),
        ("standard-only", &std_only.checkpoint),
        ("safecoder", &safecoder.checkpoint),
    ] {
        let out = eval_with(
            cfg,
            &EvalSection {
                checkpoint: ckpt.clone(),
                ..e.clone()
            },
        )?;
        report.rows.push(ReportRow {
            label: label.into(),
            checkpoint: file_name(ckpt),
            seed: cfg.seed,
            security: out.report.security(e.variants[0]),
            utility: out.report.utility(),
        });
    }
    let key = run_key(
        &st,
        cfg.seed,
        &[
            &base.checkpoint,
            &std_only.checkpoint,
            &safecoder.checkpoint,
        ],
    )?;
    let (path, table) = write_experiment(cfg, "study", &key, &report)?;
    Ok(StudyOutput {
        synth,
        mined,
        base: base.checkpoint,
        standard_only: std_only.checkpoint,
        safecoder: safecoder.checkpoint,
        report: ExperimentOutput {
            path,
            table,
            report,
        },
    })
}
