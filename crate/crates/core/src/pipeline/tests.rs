use std::cell::RefCell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::MaskVec;
use crate::diffmask::build_masks;
use crate::minilang;

const WEAK_KEY: &str =
    "def gen_key ( ) :\n    key = rsa . generate ( bits = 1024 )\n    return key\nend\n";
const STRONG_KEY: &str =
    "def gen_key ( ) :\n    key = rsa . generate ( bits = 2048 )\n    return key\nend\n";

fn snap(files: &[(&str, &str)]) -> RepoSnapshot {
    RepoSnapshot::new(files.iter().copied()).unwrap()
}

fn commit(msg: &str, pre: &[(&str, &str)], post: &[(&str, &str)]) -> CommitRecord {
    CommitRecord::new(msg, snap(pre), snap(post)).unwrap()
}

fn analyze(text: &str) -> Vec<String> {
    RuleDetector
        .analyze(&snap(&[("a.py", text)]))
        .unwrap()
        .findings()
        .map(|f| f.cwe.clone())
        .collect()
}

fn filler(n: usize) -> String {
    (0..n).map(|i| format!("x = {}\n", i % 10)).collect()
}

#[test]
fn paths_are_normalized() {
    assert_eq!(normalize_path("./src//a.py").unwrap(), "src/a.py");
    assert!(normalize_path("../a.py").is_err());
    assert!(normalize_path("/etc/a.py").is_err());
    assert!(RepoSnapshot::new([("a.py", ""), ("./a.py", "")]).is_err());
}

#[test]
fn commit_must_change_something() {
    let s = snap(&[("a.py", WEAK_KEY)]);
    assert!(CommitRecord::new("m", s.clone(), s).is_err());
}

#[test]
fn filter_examples() {
    let rules = FilterRules::default();
    let small = commit(
        "fix sql injection",
        &[("a.py", &filler(10))],
        &[("a.py", &filler(0))],
    );
    assert_eq!(small.changed_lines(), 10);
    assert!(heuristic_filter(&small, &rules));

    let big = commit(
        "fix sql injection",
        &[("a.py", &filler(50))],
        &[("a.py", "")],
    );
    assert_eq!(filter_verdict(&big, &rules), Some(SkipReason::TooManyLines));

    let three = commit(
        "fix sql injection",
        &[("a.py", "x"), ("b.py", "x"), ("c.py", "x")],
        &[("a.py", "y"), ("b.py", "y"), ("c.py", "y")],
    );
    assert_eq!(
        filter_verdict(&three, &rules),
        Some(SkipReason::TooManyFiles)
    );

    let shouty = commit(
        "Fix SQL Injection in login",
        &[("a.py", "x")],
        &[("a.py", "y")],
    );
    assert!(heuristic_filter(&shouty, &rules));
    let quiet = commit("tidy up", &[("a.py", "x")], &[("a.py", "y")]);
    assert_eq!(filter_verdict(&quiet, &rules), Some(SkipReason::NoKeyword));
    let docs = commit("sqli", &[("a.md", "x")], &[("a.md", "y")]);
    assert_eq!(
        filter_verdict(&docs, &rules),
        Some(SkipReason::UnsupportedFile)
    );
}

#[test]
fn threshold_is_inclusive() {
    let rules = FilterRules::default();
    let at = commit("md5", &[("a.py", &filler(40))], &[("a.py", "")]);
    let over = commit("md5", &[("a.py", &filler(41))], &[("a.py", "")]);
    assert!(heuristic_filter(&at, &rules));
    assert!(!heuristic_filter(&over, &rules));
    let two = commit("md5", &[("a.py", "x"), ("b.js", "x")], &[("a.py", "y")]);
    assert_eq!(two.changed_files(), vec!["a.py", "b.js"]);
    assert!(heuristic_filter(&two, &rules));
}

#[test]
fn changed_lines_counts_both_sides_of_a_replacement() {
    let c = commit("x", &[("a.py", "a\nb\nc\n")], &[("a.py", "a\nB\nc\nd\n")]);
    assert_eq!(c.changed_lines(), 3);
    let added = commit("x", &[], &[("n.py", "a\nb\n")]);
    assert_eq!(added.changed_lines(), 2);
}

proptest! {
    #[test]
    fn raising_thresholds_never_rejects_more(
        lines in 0usize..60,
        files in 1usize..4,
        max_lines in 1usize..60,
        max_files in 1usize..4,
        extra_lines in 0usize..20,
        extra_files in 0usize..3,
    ) {
        let pre: Vec<(String, String)> =
            (0..files).map(|f| (format!("f{f}.py"), filler(lines))).collect();
        let post: Vec<(String, String)> =
            (0..files).map(|f| (format!("f{f}.py"), String::from("y = 1\n"))).collect();
        let c = CommitRecord::new(
            "sql injection",
            RepoSnapshot::new(pre).unwrap(),
            RepoSnapshot::new(post).unwrap(),
        ).unwrap();
        let tight = FilterRules { max_lines, max_files, ..FilterRules::default() };
        let loose = FilterRules {
            max_lines: max_lines + extra_lines,
            max_files: max_files + extra_files,
            ..FilterRules::default()
        };
        if heuristic_filter(&c, &tight) {
            prop_assert!(heuristic_filter(&c, &loose));
        }
    }
}

#[test]
fn detector_examples() {
    assert!(RuleDetector
        .analyze(&RepoSnapshot::default())
        .unwrap()
        .is_empty());
    let r = RuleDetector.analyze(&snap(&[("k.py", WEAK_KEY)])).unwrap();
    assert_eq!(r.len(), 1);
    let f = r.findings().next().unwrap();
    assert_eq!(
        (f.cwe.as_str(), f.path.as_str(), f.function.as_str(), f.line),
        ("CWE-326", "k.py", "gen_key", 2)
    );
    assert_eq!(
        r,
        RuleDetector.analyze(&snap(&[("k.py", WEAK_KEY)])).unwrap()
    );
    assert!(analyze(STRONG_KEY).is_empty());
}

#[test]
fn each_rule_fires_on_its_pattern_only() {
    let cases = [
        ("CWE-089", "def get_user ( db , name ) :\n rows = db . execute ( concat ( sql , name ) )\n return rows\nend",
                    "def get_user ( db , name ) :\n rows = db . execute ( sql , params ( name ) )\n return rows\nend"),
        ("CWE-089", "def get_user ( db , name ) :\n return db . execute ( sql + name )\nend",
                    "def get_user ( db , name ) :\n return db . execute ( sql , name )\nend"),
        ("CWE-022", "def read_upload ( name ) :\n return open ( join ( base , name ) ) . read ( )\nend",
                    "def read_upload ( name ) :\n return open ( safe_join ( base , name ) ) . read ( )\nend"),
        ("CWE-078", "def run_tool ( arg ) :\n os . system ( concat ( cmd , arg ) )\nend",
                    "def run_tool ( arg ) :\n subprocess . run ( list ( cmd , arg ) )\nend"),
        ("CWE-326", "def make_key ( ) :\n return rsa . generate ( bits = 512 )\nend",
                    "def make_key ( ) :\n return rsa . generate ( bits = 4096 )\nend"),
        ("CWE-327", "def hash_data ( data ) :\n h = hash . sha1 ( data )\n return h . digest ( )\nend",
                    "def hash_data ( data ) :\n h = hash . sha256 ( data )\n return h . digest ( )\nend"),
        ("CWE-476", "def get_value ( k ) :\n x = lookup ( k )\n return x . value\nend",
                    "def get_value ( k ) :\n x = lookup ( k )\n if x == none :\n return none\n end\n return x . value\nend"),
    ];
    for (cwe, bad, good) in cases {
        assert_eq!(analyze(bad), vec![cwe.to_string()], "{bad}");
        assert!(analyze(good).is_empty(), "{good}");
    }
}

#[test]
fn lookup_rule_tracks_the_assigned_name() {
    let other = "def get_value ( k ) :\n x = lookup ( k )\n y = 1\n return y . value\nend";
    assert!(analyze(other).is_empty());
    let later = "def get_value ( k ) :\n x = lookup ( k )\n y = 1\n return x . value\nend";
    assert_eq!(analyze(later), vec!["CWE-476".to_string()]);
    let plain = "def get_value ( k ) :\n x = k\n return x . value\nend";
    assert!(analyze(plain).is_empty());
}

#[test]
fn findings_are_deduplicated_and_located() {
    let twice = "def make_key ( ) :\n a = rsa . generate ( bits = 512 )\n b = rsa . generate ( bits = 512 )\nend";
    let r = RuleDetector.analyze(&snap(&[("a.py", twice)])).unwrap();
    let lines: Vec<usize> = r.findings().map(|f| f.line).collect();
    assert_eq!(lines, vec![2, 3]);
    let dup = VulnReport::new(vec![r.findings().next().unwrap().clone(); 3]);
    assert_eq!(dup.len(), 1);
}

#[test]
fn unparseable_files_fail_analysis() {
    let broken = snap(&[("a.py", "def f ( ) :\n return 1\n")]);
    assert!(matches!(
        RuleDetector.analyze(&broken),
        Err(Error::Analysis { .. })
    ));
    // files in other languages are ignored
    let other = snap(&[("notes.txt", "def (((")]);
    assert!(RuleDetector.analyze(&other).unwrap().is_empty());
}

fn report(cwes: &[&str]) -> VulnReport {
    VulnReport::new(cwes.iter().enumerate().map(|(i, c)| Finding {
        cwe: c.to_string(),
        path: "a.py".into(),
        function: "f".into(),
        line: i + 1,
    }))
}

#[test]
fn verify_fix_is_per_cwe() {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(
        verify_fix(&report(&["CWE-089"]), &report(&[])),
        set(&["CWE-089"])
    );
    assert!(verify_fix(&report(&[]), &report(&[])).is_empty());
    assert_eq!(
        verify_fix(&report(&["CWE-089", "CWE-022"]), &report(&["CWE-022"])),
        set(&["CWE-089"])
    );
    assert!(verify_fix(&report(&[]), &report(&["CWE-022"])).is_empty());
}

#[test]
fn changed_funcs_examples() {
    let s = snap(&[("k.py", WEAK_KEY)]);
    assert!(changed_funcs(&s, &s).is_empty());

    let pairs = changed_funcs(&snap(&[("k.py", WEAK_KEY)]), &snap(&[("k.py", STRONG_KEY)]));
    assert_eq!(pairs.len(), 1);
    let p = &pairs[0];
    assert_eq!((p.name.as_str(), p.language.as_str()), ("gen_key", "py"));
    let tok = minilang::tokenizer();
    let (ms, mv) = build_masks(
        &tok.encode(&p.secure.join(" ")).unwrap(),
        &tok.encode(&p.vulnerable.join(" ")).unwrap(),
    );
    let marked: Vec<&str> = p
        .secure
        .iter()
        .zip(ms.bits())
        .filter(|(_, &b)| b)
        .map(|(w, _)| w.as_str())
        .collect();
    assert_eq!(marked, vec!["2048"]);
    assert_eq!(mv.count_ones(), 1);

    let added = format!("{STRONG_KEY}def handle ( ) :\n return 1\nend\n");
    let pairs = changed_funcs(&snap(&[("k.py", STRONG_KEY)]), &snap(&[("k.py", &added)]));
    assert!(pairs.is_empty());
}

#[test]
fn renamed_functions_are_not_paired() {
    let renamed = STRONG_KEY.replace("gen_key", "make_key");
    assert!(changed_funcs(&snap(&[("k.py", WEAK_KEY)]), &snap(&[("k.py", &renamed)])).is_empty());
}

fn pair(name: &str) -> FunctionPair {
    FunctionPair {
        path: "k.py".into(),
        name: name.into(),
        language: "py".into(),
        secure: vec!["a".into()],
        vulnerable: vec!["b".into()],
    }
}

#[test]
fn template_instruction() {
    assert_eq!(
        generate_inst(&pair("handle"), &TemplateGenerator).unwrap(),
        "Write a py function named handle."
    );
    assert!(generate_inst(&pair(""), &TemplateGenerator).is_err());
    minilang::tokenizer()
        .encode("Write a py function named handle.")
        .unwrap();
}

struct Recorder {
    reply: Option<&'static str>,
    seen: RefCell<Vec<String>>,
}

impl CompletionClient for Recorder {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.seen.borrow_mut().push(prompt.to_string());
        self.reply
            .map(str::to_string)
            .ok_or_else(|| Error::Evaluation("offline".into()))
    }
}

#[test]
fn prompting_generator_sends_the_prompt_and_falls_back() {
    let p = changed_funcs(&snap(&[("k.py", WEAK_KEY)]), &snap(&[("k.py", STRONG_KEY)]))
        .pop()
        .unwrap();
    let online = PromptingGenerator {
        client: Recorder {
            reply: Some(" Write a Python function that generates an RSA key. "),
            seen: RefCell::new(vec![]),
        },
    };
    assert_eq!(
        online.generate(&p).unwrap(),
        "Write a Python function that generates an RSA key."
    );
    let prompt = online.client.seen.borrow()[0].clone();
    assert_eq!(
        prompt,
        generate_inst_prompt(STRONG_KEY.trim_end(), WEAK_KEY.trim_end())
    );
    assert!(
        prompt.contains("Snippet 1:\ndef gen_key ( ) :\n    key = rsa . generate ( bits = 2048 )")
    );

    let offline = PromptingGenerator {
        client: Recorder {
            reply: None,
            seen: RefCell::new(vec![]),
        },
    };
    assert_eq!(
        offline.generate(&p).unwrap(),
        "Write a py function named gen_key."
    );
}

fn mine(commits: &[CommitRecord]) -> Mined {
    collect_dataset(
        commits,
        &RuleDetector,
        &FilterRules::default(),
        &TemplateGenerator,
        &minilang::tokenizer(),
    )
    .unwrap()
}

#[test]
fn collect_examples() {
    let m = mine(&[]);
    assert!(m.triples.is_empty());
    assert_eq!(m.funnel, Funnel::default());

    let fix = commit(
        "fix weak key size",
        &[("k.py", WEAK_KEY)],
        &[("k.py", STRONG_KEY)],
    );
    let huge_pre = format!("{WEAK_KEY}{}", filler(45));
    let oversize = commit(
        "fix weak key size",
        &[("k.py", &huge_pre)],
        &[("k.py", STRONG_KEY)],
    );
    let m = mine(&[fix.clone(), oversize]);
    assert_eq!(m.triples.len(), 1);
    let t = &m.triples[0];
    assert_eq!((t.cwe(), t.language()), ("CWE-326", "py"));
    let tok = minilang::tokenizer();
    assert_eq!(
        tok.decode(t.instruction()),
        "Write a py function named gen_key ."
    );
    assert_eq!(t.sec_mask().count_ones(), 1);
    assert_eq!(
        m.funnel,
        Funnel {
            commits: 2,
            filtered: 1,
            analyzed: 1,
            verified: 1,
            pairs: 1,
            triples: 1
        }
    );
    assert_eq!(m.skips.len(), 1);
    assert_eq!(m.skips[0].commit, 1);
    assert_eq!(m.skips[0].reason, SkipReason::TooManyLines);

    let still_weak = WEAK_KEY.replace("1024", "512");
    let nofix = commit(
        "fix weak key size",
        &[("k.py", WEAK_KEY)],
        &[("k.py", &still_weak)],
    );
    let m = mine(&[nofix]);
    assert!(m.triples.is_empty());
    assert_eq!(m.skips[0].reason, SkipReason::NotAFix);
}

#[test]
fn analysis_failures_are_skipped() {
    let broken = commit(
        "fix weak key size",
        &[("k.py", WEAK_KEY)],
        &[("k.py", "def gen_key ( ) :\n")],
    );
    let m = mine(&[broken]);
    assert!(m.triples.is_empty());
    assert_eq!(m.skips[0].reason, SkipReason::AnalysisFailed);
    assert_eq!(m.funnel.filtered, 1);
    assert_eq!(m.funnel.analyzed, 0);
}

#[test]
fn pairs_take_the_cwe_found_in_their_function() {
    let pre = format!(
        "{WEAK_KEY}def hash_data ( data ) :\n h = hash . md5 ( data )\n return h . digest ( )\nend\n"
    );
    let post = format!(
        "{STRONG_KEY}def hash_data ( data ) :\n h = hash . sha256 ( data )\n return h . digest ( )\nend\n"
    );
    let m = mine(&[commit(
        "weak key and md5",
        &[("k.py", &pre)],
        &[("k.py", &post)],
    )]);
    let tags: Vec<(&str, &str)> = m.triples.iter().map(|t| (t.cwe(), t.language())).collect();
    // pairs come out in function-name order
    assert_eq!(tags, vec![("CWE-326", "py"), ("CWE-327", "py")]);
}

#[test]
fn mining_is_deterministic() {
    let fix = commit(
        "fix weak key size",
        &[("k.js", WEAK_KEY)],
        &[("k.js", STRONG_KEY)],
    );
    let a = mine(&[fix.clone(), fix.clone()]);
    let b = mine(&[fix.clone(), fix]);
    assert_eq!(a.triples, b.triples);
    assert_eq!(a.skips, b.skips);
    assert_eq!(a.triples[0].language(), "js");
}

fn sample_triples(n: usize, cwe: &str) -> Vec<SecurityTriple> {
    let tok = minilang::tokenizer();
    let names = [
        "add", "square", "count", "greet", "handle", "gen_key", "make_key",
    ];
    let bits = ["2048", "3072", "4096"];
    (0..n)
        .map(|k| {
            let i = tok
                .encode(&format!(
                    "Write a py function named {} .",
                    names[k % names.len()]
                ))
                .unwrap();
            let s = tok
                .encode(&format!("x = {}", bits[k % bits.len()]))
                .unwrap();
            let v = tok.encode("x = 1024").unwrap();
            SecurityTriple::new(i, s, v, cwe, "py").unwrap()
        })
        .collect()
}

#[test]
fn rebalance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let small = sample_triples(5, "CWE-089");
    assert_eq!(rebalance_clean(small.clone(), 10, &mut rng).unwrap(), small);

    let mut big = sample_triples(50, "CWE-022");
    big.extend(sample_triples(4, "CWE-078"));
    let out = rebalance_clean(big.clone(), 30, &mut rng).unwrap();
    assert_eq!(out.iter().filter(|t| t.cwe() == "CWE-022").count(), 30);
    assert_eq!(out.iter().filter(|t| t.cwe() == "CWE-078").count(), 4);
    // kept triples are a subsequence of the input
    let mut it = big.iter();
    for t in &out {
        assert!(it.any(|b| b == t));
    }

    let blank = sample_triples(1, "CWE-089")
        .pop()
        .unwrap()
        .with_masks(MaskVec::zeros(3), MaskVec::zeros(3))
        .unwrap();
    assert!(rebalance_clean(vec![blank], 5, &mut rng)
        .unwrap()
        .is_empty());
    assert!(rebalance_clean(vec![], 0, &mut rng).is_err());
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let commits = vec![
        commit(
            "fix weak key size",
            &[("k.py", WEAK_KEY)],
            &[("k.py", STRONG_KEY)],
        ),
        commit("add file", &[], &[("n.js", "x")]),
    ];
    save_commits(&commits, &path).unwrap();
    assert_eq!(load_commits(&path).unwrap(), commits);

    std::fs::write(
        &path,
        "{\"message\": \"m\", \"pre\": {}, \"post\": {}}\nnot json\n",
    )
    .unwrap();
    assert!(matches!(
        load_commits(&path),
        Err(Error::MalformedRecord { line: 1, .. })
    ));
}
