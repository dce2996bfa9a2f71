//! Vulnerability detectors. [`RuleDetector`] is a pattern matcher over the
//! mini-language; other analyzers plug in through [`Detector`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::RepoSnapshot;
use crate::error::{Error, Result};
use crate::minilang::{self, split_functions};
use crate::tokenizer::Tokenizer;

/// One detector hit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub cwe: String,
    pub path: String,
    pub function: String,
    /// 1-based line of the offending pattern.
    pub line: usize,
}

/// Deduplicated findings of one analysis.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnReport {
    findings: BTreeSet<Finding>,
}

impl VulnReport {
    pub fn new(findings: impl IntoIterator<Item = Finding>) -> Self {
        VulnReport {
            findings: findings.into_iter().collect(),
        }
    }

    pub fn findings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count_for(&self, cwe: &str) -> usize {
        self.findings.iter().filter(|f| f.cwe == cwe).count()
    }

    pub fn cwes(&self) -> BTreeSet<&str> {
        self.findings.iter().map(|f| f.cwe.as_str()).collect()
    }

    /// CWEs reported inside `function` of `path`.
    pub fn cwes_in(&self, path: &str, function: &str) -> BTreeSet<&str> {
        self.findings
            .iter()
            .filter(|f| f.path == path && f.function == function)
            .map(|f| f.cwe.as_str())
            .collect()
    }
}

pub trait Detector {
    fn id(&self) -> &str;

    fn supported_cwes(&self) -> Vec<String>;

    /// Must be deterministic. Errors mean the snapshot could not be analyzed.
    fn analyze(&self, snapshot: &RepoSnapshot) -> Result<VulnReport>;
}

pub fn analyze_code(snapshot: &RepoSnapshot, det: &dyn Detector) -> Result<VulnReport> {
    det.analyze(snapshot)
}

/// CWEs flagged before the commit and clean after it.
pub fn verify_fix(pre: &VulnReport, post: &VulnReport) -> BTreeSet<String> {
    pre.cwes()
        .into_iter()
        .filter(|cwe| post.count_for(cwe) == 0)
        .map(str::to_string)
        .collect()
}

pub const RULE_CWES: [&str; 6] = [
    "CWE-022", "CWE-078", "CWE-089", "CWE-326", "CWE-327", "CWE-476",
];

/// Pattern rules over mini-language functions:
///
/// | CWE | flagged pattern |
/// |-----|-----------------|
/// | 089 | `. execute ( ... )` whose arguments contain `concat` or `+` |
/// | 022 | `open ( join` |
/// | 078 | `os . system` |
/// | 326 | `rsa . generate ( bits = N )` with `N < 2048` |
/// | 327 | `hash . md5` or `hash . sha1` |
/// | 476 | `x = ... lookup (` followed by `x .` with no `if x == none` in between |
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleDetector;

impl RuleDetector {
    pub const ID: &'static str = "rules";

    /// Findings for one function body given as `(word, line)` pairs.
    pub fn scan_function(words: &[(&str, usize)]) -> Vec<(&'static str, usize)> {
        let w = |i: usize| words.get(i).map_or("", |x| x.0);
        let mut out = Vec::new();
        for i in 0..words.len() {
            let line = words[i].1;
            if w(i) == "." && w(i + 1) == "execute" && w(i + 2) == "(" {
                let mut depth = 0;
                let mut j = i + 2;
                let mut tainted = false;
                while j < words.len() {
                    match w(j) {
                        "(" => depth += 1,
                        ")" => {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                        }
                        "concat" | "+" => tainted = true,
                        _ => {}
                    }
                    j += 1;
                }
                if tainted {
                    out.push(("CWE-089", line));
                }
            }
            if w(i) == "open" && w(i + 1) == "(" && w(i + 2) == "join" {
                out.push(("CWE-022", line));
            }
            if w(i) == "os" && w(i + 1) == "." && w(i + 2) == "system" {
                out.push(("CWE-078", line));
            }
            if [w(i), w(i + 1), w(i + 2), w(i + 3), w(i + 4), w(i + 5)]
                == ["rsa", ".", "generate", "(", "bits", "="]
            {
                if let Ok(bits) = w(i + 6).parse::<u64>() {
                    if bits < 2048 {
                        out.push(("CWE-326", line));
                    }
                }
            }
            if w(i) == "hash" && w(i + 1) == "." && matches!(w(i + 2), "md5" | "sha1") {
                out.push(("CWE-327", line));
            }
            if minilang::is_name(w(i)) && w(i + 1) == "=" && (i == 0 || w(i - 1) != "(") {
                if let Some(l) = unchecked_lookup(words, i) {
                    out.push(("CWE-476", l));
                }
            }
        }
        out
    }
}

/// For `x = ... lookup ( ...` at `at`, the line of the first `x .` that is not
/// preceded by `if x == none`.
fn unchecked_lookup(words: &[(&str, usize)], at: usize) -> Option<usize> {
    let w = |i: usize| words.get(i).map_or("", |x| x.0);
    let var = w(at);
    // the assignment's right-hand side ends where the next statement starts
    let mut j = at + 2;
    let mut depth = 0;
    let mut calls_lookup = false;
    while j < words.len() {
        match w(j) {
            "(" => depth += 1,
            ")" => depth -= 1,
            "lookup" if w(j + 1) == "(" => calls_lookup = true,
            _ => {}
        }
        j += 1;
        if depth == 0 && !continues(w(j - 1), w(j)) {
            break;
        }
    }
    if !calls_lookup {
        return None;
    }
    while j < words.len() {
        if [w(j), w(j + 1), w(j + 2), w(j + 3)] == ["if", var, "==", "none"] {
            return None;
        }
        if w(j) == var && w(j + 1) == "." {
            return Some(words[j].1);
        }
        if w(j) == var && w(j + 1) == "=" {
            return None;
        }
        j += 1;
    }
    None
}

/// Whether `next` continues the expression that `prev` is part of.
fn continues(prev: &str, next: &str) -> bool {
    const OPS: &[&str] = &["+", "-", "*", "/", "%", "==", "!=", "<", ">", ",", "."];
    OPS.contains(&prev)
        || OPS.contains(&next)
        || matches!(prev, "=" | "(")
        || matches!(next, "(" | ")")
}

/// Words of `text` with their 1-based line numbers.
pub fn words_with_lines(text: &str) -> Vec<(&str, usize)> {
    text.lines()
        .enumerate()
        .flat_map(|(n, line)| Tokenizer::split(line).into_iter().map(move |w| (w, n + 1)))
        .collect()
}

impl Detector for RuleDetector {
    fn id(&self) -> &str {
        Self::ID
    }

    fn supported_cwes(&self) -> Vec<String> {
        RULE_CWES.iter().map(|s| s.to_string()).collect()
    }

    fn analyze(&self, snapshot: &RepoSnapshot) -> Result<VulnReport> {
        let mut findings = BTreeSet::new();
        for (path, text) in snapshot.files() {
            if minilang::language_of(path).is_none() {
                continue;
            }
            let words = words_with_lines(text);
            let bare: Vec<&str> = words.iter().map(|x| x.0).collect();
            let spans = split_functions(&bare).map_err(|e| Error::Analysis {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            for span in spans {
                for (cwe, line) in Self::scan_function(&words[span.range.clone()]) {
                    findings.insert(Finding {
                        cwe: cwe.to_string(),
                        path: path.clone(),
                        function: span.name.clone(),
                        line,
                    });
                }
            }
        }
        Ok(VulnReport { findings })
    }
}

/// Looks up a built-in detector by id.
pub fn detector_by_id(id: &str) -> Option<Box<dyn Detector + Send + Sync>> {
    match id {
        RuleDetector::ID => Some(Box::new(RuleDetector)),
        _ => None,
    }
}
