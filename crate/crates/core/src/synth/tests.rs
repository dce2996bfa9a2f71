use std::collections::BTreeSet;

use super::*;
use crate::minilang::{self, parse_function};
use crate::pipeline::{collect_dataset, Detector, FilterRules, SkipReason, TemplateGenerator};

fn analyze(path: &str, text: &str) -> BTreeSet<String> {
    let snap = RepoSnapshot::new([(path, text)]).unwrap();
    RuleDetector
        .analyze(&snap)
        .unwrap()
        .findings()
        .map(|f| f.cwe.clone())
        .collect()
}

#[test]
fn every_body_parses_and_tokenizes() {
    let tok = minilang::tokenizer();
    for fam in FUNCTIONAL.iter().chain(&SECURITY) {
        for name in fam.names {
            for body in fam.bodies.iter().chain(fam.vulnerable) {
                let f = function(name, fam.params, body);
                let words = Tokenizer::split(&f);
                parse_function(&words).unwrap_or_else(|e| panic!("{f}: {e}"));
                tok.encode(&f).unwrap();
            }
            for lang in LANGUAGES {
                tok.encode(&instruction(lang, name)).unwrap();
            }
        }
    }
}

#[test]
fn detector_separates_the_planted_patterns() {
    for fam in &FUNCTIONAL {
        for name in fam.names {
            assert!(
                analyze("a.py", &source(name, fam.params, fam.bodies[0])).is_empty(),
                "{name}"
            );
        }
    }
    for fam in &SECURITY {
        let cwe = fam.cwe.unwrap();
        assert_eq!(fam.bodies.len(), fam.vulnerable.len());
        for name in fam.names {
            for (sec, vul) in fam.bodies.iter().zip(fam.vulnerable) {
                assert!(
                    analyze("a.js", &source(name, fam.params, sec)).is_empty(),
                    "{name}: {sec}"
                );
                assert_eq!(
                    analyze("a.js", &source(name, fam.params, vul)),
                    BTreeSet::from([cwe.to_string()]),
                    "{name}: {vul}"
                );
            }
        }
    }
}

#[test]
fn sample_sets_have_the_documented_sizes() {
    let tok = minilang::tokenizer();
    assert_eq!(standard_samples(&tok).unwrap().len(), 8 * 4 * 2);
    assert_eq!(utility_probes(&tok).unwrap().len(), 8 * 2);
    let mix = PretrainMix::default();
    let p = pretrain_samples(&tok, &mix, 1).unwrap();
    assert_eq!(p.len(), 2 * 64 + 6 * 4 * 2 * 4);
    assert_eq!(p, pretrain_samples(&tok, &mix, 1).unwrap());
    assert_ne!(p, pretrain_samples(&tok, &mix, 2).unwrap());
    assert_eq!(scenarios("py").len(), 24);
}

#[test]
fn pretraining_leans_vulnerable() {
    let tok = minilang::tokenizer();
    let mix = PretrainMix {
        functional_repeats: 0,
        security_per_name: 50,
        vulnerable_share: 0.8,
    };
    let p = pretrain_samples(&tok, &mix, 3).unwrap();
    let vulnerable = p
        .iter()
        .filter(|s| {
            let text = format_code(&Tokenizer::split(&tok.decode(&s.output)));
            !analyze("a.py", &text).is_empty()
        })
        .count();
    let share = vulnerable as f64 / p.len() as f64;
    let sigma = (0.8f64 * 0.2 / p.len() as f64).sqrt();
    assert!((share - 0.8).abs() < 3.0 * sigma, "{share}");
}

#[test]
fn corpus_composition() {
    let c = commit_corpus(&CorpusShape::default(), 5).unwrap();
    assert_eq!(c.commits.len(), 200);
    assert_eq!(c.planted.len(), 20);
    let distinct: BTreeSet<_> = c.planted.iter().map(|p| (&p.name, &p.language)).collect();
    assert_eq!(distinct.len(), 20);
    let rules = FilterRules::default();
    let oversize = c
        .commits
        .iter()
        .filter(|x| {
            matches!(
                crate::pipeline::filter_verdict(x, &rules),
                Some(SkipReason::TooManyFiles | SkipReason::TooManyLines)
            )
        })
        .count();
    assert_eq!(oversize, 40);
}

#[test]
fn mining_recovers_exactly_the_planted_fixes() {
    let tok = minilang::tokenizer();
    let c = commit_corpus(&CorpusShape::default(), 5).unwrap();
    let mined = collect_dataset(
        &c.commits,
        &RuleDetector,
        &FilterRules::default(),
        &TemplateGenerator,
        &tok,
    )
    .unwrap();
    let got: BTreeSet<(String, String, String, String, String)> = mined
        .triples
        .iter()
        .map(|t| {
            (
                tok.decode(t.instruction()),
                tok.decode(t.secure_out()),
                tok.decode(t.vuln_out()),
                t.cwe().to_string(),
                t.language().to_string(),
            )
        })
        .collect();
    let want: BTreeSet<_> = c
        .planted
        .iter()
        .map(|p| {
            (
                Tokenizer::split(&instruction(&p.language, &p.name)).join(" "),
                p.secure.clone(),
                p.vulnerable.clone(),
                p.cwe.clone(),
                p.language.clone(),
            )
        })
        .collect();
    assert_eq!(mined.triples.len(), 20);
    assert_eq!(got, want);
}
