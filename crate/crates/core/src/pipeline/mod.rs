//! Mining security triples from a commit corpus: keyword/size filtering,
//! detector-verified fixes, changed-function pairing, instruction generation,
//! and a final rebalancing pass.

mod detector;
mod instgen;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use detector::{
    analyze_code, detector_by_id, verify_fix, words_with_lines, Detector, Finding, RuleDetector,
    VulnReport, RULE_CWES,
};
pub use instgen::{
    generate_inst, generate_inst_prompt, CompletionClient, InstGenerator, PromptingGenerator,
    TemplateGenerator,
};

use crate::data::{ClassKey, SecurityTriple};
use crate::diffmask::{token_diff, OpKind};
use crate::error::{Error, Result};
use crate::minilang::{self, split_functions};
use crate::tokenizer::Tokenizer;

/// File contents keyed by normalized path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<String, String>",
    into = "BTreeMap<String, String>"
)]
pub struct RepoSnapshot {
    files: BTreeMap<String, String>,
}

/// Strips `./` segments and repeated slashes; rejects empty, absolute and
/// `..` paths.
pub fn normalize_path(path: &str) -> Result<String> {
    let parts: Vec<&str> = path
        .split('/')
        .filter(|p| !p.is_empty() && *p != ".")
        .collect();
    if path.starts_with('/') || parts.is_empty() || parts.contains(&"..") {
        return Err(Error::InvalidArgument(format!("unusable path {path:?}")));
    }
    Ok(parts.join("/"))
}

impl RepoSnapshot {
    pub fn new<I, P, T>(files: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, T)>,
        P: AsRef<str>,
        T: Into<String>,
    {
        let mut out = BTreeMap::new();
        for (p, text) in files {
            let path = normalize_path(p.as_ref())?;
            if out.insert(path.clone(), text.into()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "path {path:?} appears twice after normalization"
                )));
            }
        }
        Ok(RepoSnapshot { files: out })
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn get(&self, path: &str) -> Option<&str> {
        self.files.get(path).map(String::as_str)
    }

    pub fn language_of(&self, path: &str) -> Option<&'static str> {
        minilang::language_of(path)
    }
}

impl TryFrom<BTreeMap<String, String>> for RepoSnapshot {
    type Error = Error;

    fn try_from(files: BTreeMap<String, String>) -> Result<Self> {
        RepoSnapshot::new(files)
    }
}

impl From<RepoSnapshot> for BTreeMap<String, String> {
    fn from(s: RepoSnapshot) -> Self {
        s.files
    }
}

/// A commit: message plus the repository before and after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub message: String,
    pub pre: RepoSnapshot,
    pub post: RepoSnapshot,
}

impl CommitRecord {
    pub fn new(message: impl Into<String>, pre: RepoSnapshot, post: RepoSnapshot) -> Result<Self> {
        let c = CommitRecord {
            message: message.into(),
            pre,
            post,
        };
        if c.changed_files().is_empty() {
            return Err(Error::InvalidArgument("commit changes no files".into()));
        }
        Ok(c)
    }

    /// Paths added, removed or modified by the commit.
    pub fn changed_files(&self) -> Vec<&str> {
        let paths: BTreeSet<&str> = self
            .pre
            .files
            .keys()
            .chain(self.post.files.keys())
            .map(String::as_str)
            .collect();
        paths
            .into_iter()
            .filter(|p| self.pre.get(p) != self.post.get(p))
            .collect()
    }

    /// Added plus removed lines over all changed files, from a line diff.
    pub fn changed_lines(&self) -> usize {
        self.changed_files()
            .into_iter()
            .map(|p| {
                let a: Vec<&str> = self.pre.get(p).map_or(vec![], |t| t.lines().collect());
                let b: Vec<&str> = self.post.get(p).map_or(vec![], |t| t.lines().collect());
                token_diff(&a, &b)
                    .ops
                    .iter()
                    .filter(|op| op.kind != OpKind::Equal)
                    .map(|op| op.a.len() + op.b.len())
                    .sum::<usize>()
            })
            .sum()
    }
}

/// Commit-level filter thresholds and per-CWE message keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRules {
    pub keywords: BTreeMap<String, Vec<String>>,
    pub max_lines: usize,
    pub max_files: usize,
    pub extensions: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        let kw = |cwe: &str, words: &[&str]| {
            (
                cwe.to_string(),
                words.iter().map(|w| w.to_string()).collect(),
            )
        };
        FilterRules {
            keywords: BTreeMap::from([
                kw("CWE-022", &["path traversal", "directory traversal"]),
                kw("CWE-078", &["command injection", "shell injection"]),
                kw("CWE-089", &["sql injection", "sqli", "parameterized query"]),
                kw("CWE-326", &["weak key", "key size", "key length"]),
                kw("CWE-327", &["weak hash", "broken crypto", "md5", "sha1"]),
                kw(
                    "CWE-476",
                    &["null pointer", "null dereference", "none check"],
                ),
            ]),
            max_lines: 40,
            max_files: 2,
            extensions: vec!["py".into(), "js".into()],
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        if self.max_lines == 0 || self.max_files == 0 {
            return Err(Error::InvalidArgument(
                "filter thresholds must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// CWEs with at least one keyword in `message` (case-insensitive).
    pub fn matching_cwes(&self, message: &str) -> Vec<&str> {
        let msg = message.to_lowercase();
        self.keywords
            .iter()
            .filter(|(_, words)| words.iter().any(|w| msg.contains(&w.to_lowercase())))
            .map(|(cwe, _)| cwe.as_str())
            .collect()
    }

    fn supported(&self, path: &str) -> bool {
        path.rsplit_once('.')
            .is_some_and(|(_, ext)| self.extensions.iter().any(|e| e == ext))
    }
}

/// Why a commit or function pair was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoKeyword,
    TooManyLines,
    TooManyFiles,
    UnsupportedFile,
    AnalysisFailed,
    NotAFix,
    NoChangedFunction,
    InstructionFailed,
    InvalidPair,
}

/// First filter predicate the commit fails, if any.
pub fn filter_verdict(c: &CommitRecord, rules: &FilterRules) -> Option<SkipReason> {
    if rules.matching_cwes(&c.message).is_empty() {
        return Some(SkipReason::NoKeyword);
    }
    let files = c.changed_files();
    if files.len() > rules.max_files {
        return Some(SkipReason::TooManyFiles);
    }
    if !files.iter().all(|p| rules.supported(p)) {
        return Some(SkipReason::UnsupportedFile);
    }
    if c.changed_lines() > rules.max_lines {
        return Some(SkipReason::TooManyLines);
    }
    None
}

pub fn heuristic_filter(c: &CommitRecord, rules: &FilterRules) -> bool {
    filter_verdict(c, rules).is_none()
}

/// A function that exists under the same name in the same file before and
/// after a commit, with differing bodies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionPair {
    pub path: String,
    pub name: String,
    pub language: String,
    /// Post-commit body.
    pub secure: Vec<String>,
    /// Pre-commit body.
    pub vulnerable: Vec<String>,
}

fn functions_of(path: &str, text: &str) -> Option<BTreeMap<String, Vec<String>>> {
    let words = Tokenizer::split(text);
    match split_functions(&words) {
        Ok(spans) => {
            let mut out = BTreeMap::new();
            for s in spans {
                let body = words[s.range].iter().map(|w| w.to_string()).collect();
                if out.insert(s.name.clone(), body).is_some() {
                    log::warn!(
                        "{path}: function {} defined twice; keeping the last",
                        s.name
                    );
                }
            }
            Some(out)
        }
        Err(e) => {
            log::warn!("{path}: cannot delimit functions ({e}); skipping file");
            None
        }
    }
}

/// Same-named functions whose bodies differ between `pre` and `post`, in
/// (path, name) order.
pub fn changed_funcs(pre: &RepoSnapshot, post: &RepoSnapshot) -> Vec<FunctionPair> {
    let mut out = Vec::new();
    for (path, after) in &post.files {
        let Some(before) = pre.get(path) else {
            continue;
        };
        if before == after {
            continue;
        }
        let Some(language) = minilang::language_of(path) else {
            continue;
        };
        let (Some(old), Some(new)) = (functions_of(path, before), functions_of(path, after)) else {
            continue;
        };
        for (name, body) in new {
            if let Some(old_body) = old.get(&name) {
                if *old_body != body {
                    out.push(FunctionPair {
                        path: path.clone(),
                        name,
                        language: language.to_string(),
                        secure: body,
                        vulnerable: old_body.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Counts at each stage of mining.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub commits: usize,
    pub filtered: usize,
    pub analyzed: usize,
    pub verified: usize,
    pub pairs: usize,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub commit: usize,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Mined {
    pub triples: Vec<SecurityTriple>,
    pub funnel: Funnel,
    pub skips: Vec<SkipRecord>,
}

/// CWE a pair is tagged with: a fixed CWE the detector reported inside this
/// function before the commit, else the smallest fixed CWE of the commit.
fn tag_pair(pair: &FunctionPair, fixed: &BTreeSet<String>, pre: &VulnReport) -> String {
    let local = pre.cwes_in(&pair.path, &pair.name);
    fixed
        .iter()
        .find(|c| local.contains(c.as_str()))
        .or_else(|| fixed.iter().next())
        .cloned()
        .expect("tagging requires at least one fixed CWE")
}

/// Runs the mining pipeline over `commits`. Analyzer failures and every other
/// rejection are recorded in `skips`, never fatal.
pub fn collect_dataset(
    commits: &[CommitRecord],
    det: &dyn Detector,
    rules: &FilterRules,
    gen: &dyn InstGenerator,
    tok: &Tokenizer,
) -> Result<Mined> {
    rules.validate()?;
    let mut funnel = Funnel {
        commits: commits.len(),
        ..Funnel::default()
    };
    let mut skips = Vec::new();
    let mut triples = Vec::new();
    let mut skip = |commit: usize, reason: SkipReason, detail: String| {
        log::debug!("commit {commit}: {reason:?} {detail}");
        skips.push(SkipRecord {
            commit,
            reason,
            detail,
        });
    };
    for (ci, c) in commits.iter().enumerate() {
        if let Some(reason) = filter_verdict(c, rules) {
            skip(ci, reason, String::new());
            continue;
        }
        funnel.filtered += 1;
        let reports = analyze_code(&c.pre, det).and_then(|a| Ok((a, analyze_code(&c.post, det)?)));
        let (pre, post) = match reports {
            Ok(r) => r,
            Err(e) => {
                skip(ci, SkipReason::AnalysisFailed, e.to_string());
                continue;
            }
        };
        funnel.analyzed += 1;
        let fixed = verify_fix(&pre, &post);
        if fixed.is_empty() {
            skip(ci, SkipReason::NotAFix, String::new());
            continue;
        }
        funnel.verified += 1;
        let pairs = changed_funcs(&c.pre, &c.post);
        if pairs.is_empty() {
            skip(ci, SkipReason::NoChangedFunction, String::new());
            continue;
        }
        for pair in pairs {
            funnel.pairs += 1;
            let what = format!("{}::{}", pair.path, pair.name);
            let instruction = match generate_inst(&pair, gen) {
                Ok(text) => text,
                Err(e) => {
                    skip(ci, SkipReason::InstructionFailed, format!("{what}: {e}"));
                    continue;
                }
            };
            let cwe = tag_pair(&pair, &fixed, &pre);
            let built = (|| {
                let i = tok.encode(&instruction)?;
                let s = tok.encode(&pair.secure.join(" "))?;
                let v = tok.encode(&pair.vulnerable.join(" "))?;
                SecurityTriple::new(i, s, v, cwe, pair.language.clone())
            })();
            match built {
                Ok(t) => {
                    funnel.triples += 1;
                    triples.push(t);
                }
                Err(e) => skip(ci, SkipReason::InvalidPair, format!("{what}: {e}")),
            }
        }
    }
    Ok(Mined {
        triples,
        funnel,
        skips,
    })
}

/// Drops triples without any mask bit and uniformly downsamples classes
/// larger than `max_per_class`. Surviving triples keep their input order.
pub fn rebalance_clean<R: Rng + ?Sized>(
    d: Vec<SecurityTriple>,
    max_per_class: usize,
    rng: &mut R,
) -> Result<Vec<SecurityTriple>> {
    if max_per_class == 0 {
        return Err(Error::InvalidArgument("max_per_class must be >= 1".into()));
    }
    let valid: Vec<SecurityTriple> = d.into_iter().filter(|t| t.has_signal()).collect();
    let mut classes: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
    for (i, t) in valid.iter().enumerate() {
        classes.entry(t.class_key()).or_default().push(i);
    }
    let mut keep = vec![true; valid.len()];
    for members in classes.values() {
        if members.len() > max_per_class {
            let chosen: BTreeSet<usize> =
                rand::seq::index::sample(rng, members.len(), max_per_class)
                    .into_iter()
                    .collect();
            for (j, &i) in members.iter().enumerate() {
                keep[i] = chosen.contains(&j);
            }
        }
    }
    Ok(valid
        .into_iter()
        .zip(keep)
        .filter_map(|(t, k)| k.then_some(t))
        .collect())
}

/// Reads a commit corpus: one JSON object per line.
pub fn load_commits(path: &Path) -> Result<Vec<CommitRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CommitRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        if c.changed_files().is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: n + 1,
                reason: "commit changes no files".into(),
            });
        }
        out.push(c);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(items: &[T], w: &mut W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_commits(commits: &[CommitRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(commits, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
