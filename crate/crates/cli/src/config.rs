//! The run manifest. One TOML file drives every subcommand; each subcommand
//! reads its own section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sectune_core::eval::PromptVariant;
use sectune_core::model::ModelConfig;
use sectune_core::pipeline::FilterRules;
use sectune_core::synth::{CorpusShape, PretrainMix};
use sectune_core::trainer::TrainConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SynthSection,
    pub pipeline: Option<PipelineSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub sweep: Option<SweepSection>,
    pub report: Option<ReportSection>,
    pub study: Option<StudySection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            synth: SynthSection::default(),
            pipeline: None,
            train: None,
            eval: None,
            sweep: None,
            report: None,
            study: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub shape: CorpusShape,
    pub mix: PretrainMix,
    /// Language of the generated evaluation scenarios.
    pub language: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            shape: CorpusShape::default(),
            mix: PretrainMix::default(),
            language: "py".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub corpus: PathBuf,
    pub detector: String,
    pub generator: String,
    pub max_per_class: usize,
    pub rules: FilterRules,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            corpus: PathBuf::new(),
            detector: "rules".into(),
            generator: "template".into(),
            max_per_class: 1000,
            rules: FilterRules::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    StandardOnly,
    Safecoder,
    Sven,
}

/// Network shape used when training starts from a fresh initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_len: 128,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_len: self.context_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    /// Dataset file whose standard records form `D^std`.
    pub std_data: Option<PathBuf>,
    /// Dataset file whose security records form `D^sec`.
    pub sec_data: Option<PathBuf>,
    /// Starting checkpoint; a fresh model of `model` shape when absent.
    pub init: Option<PathBuf>,
    /// Frozen reference model for `sven`.
    pub base: Option<PathBuf>,
    pub model: ModelShape,
    pub config: TrainConfig,
    pub kl_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: Mode::Safecoder,
            std_data: None,
            sec_data: None,
            init: None,
            base: None,
            model: ModelShape::default(),
            config: TrainConfig::default(),
            kl_weight: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub scenarios: PathBuf,
    /// Dataset file whose standard records are the utility probes.
    pub probes: Option<PathBuf>,
    pub n: usize,
    pub temperature: f64,
    pub variants: Vec<PromptVariant>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: PathBuf::new(),
            scenarios: PathBuf::new(),
            probes: None,
            n: 100,
            temperature: 0.4,
            variants: vec![PromptVariant::FuncOnly],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub base: PathBuf,
    pub sec_data: PathBuf,
    pub scenarios: PathBuf,
    pub probes: PathBuf,
    /// Exponents `n` of the weights `2^n / 10`.
    pub exponents: Vec<u32>,
    pub config: TrainConfig,
    pub n: usize,
    pub temperature: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            base: PathBuf::new(),
            sec_data: PathBuf::new(),
            scenarios: PathBuf::new(),
            probes: PathBuf::new(),
            exponents: (1..=8).collect(),
            config: TrainConfig::default(),
            n: 100,
            temperature: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Eval, sweep or study reports (JSON) to merge.
    pub inputs: Vec<PathBuf>,
    pub title: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            inputs: Vec::new(),
            title: "configuration".into(),
        }
    }
}

/// Settings of the end-to-end micro-study: pretraining, the two fine-tuning
/// configurations and their evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub n: usize,
    pub temperature: f64,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            model: ModelShape::default(),
            pretrain: TrainConfig {
                epochs: 10,
                learning_rate: 3e-3,
                grad_accum_steps: 8,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 10,
                learning_rate: 1e-3,
                grad_accum_steps: 8,
                oversample_k: 20,
                ..TrainConfig::default()
            },
            n: 100,
            temperature: 0.4,
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to the file's
    /// directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p)
            }
        };
        fix(&mut self.out);
        if let Some(p) = &mut self.pipeline {
            fix(&mut p.corpus);
        }
        if let Some(t) = &mut self.train {
            fix_opt(&mut t.std_data);
            fix_opt(&mut t.sec_data);
            fix_opt(&mut t.init);
            fix_opt(&mut t.base);
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.checkpoint);
            fix(&mut e.scenarios);
            fix_opt(&mut e.probes);
        }
        if let Some(s) = &mut self.sweep {
            fix(&mut s.base);
            fix(&mut s.sec_data);
            fix(&mut s.scenarios);
            fix(&mut s.probes);
        }
        if let Some(r) = &mut self.report {
            r.inputs.iter_mut().for_each(fix);
        }
    }
}

/// The named section, or a usage error naming it.
pub fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref()
        .ok_or_else(|| CliError::Usage(format!("config has no [{name}] section")))
}
