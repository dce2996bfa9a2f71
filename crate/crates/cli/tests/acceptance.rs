//! Acceptance suite: one line per criterion, non-zero exit if any fails.

// `ensure!(x <= tol)` fails on NaN, which is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sectune_cli::commands::{
    cmd_eval, cmd_mine, cmd_study, cmd_sweep_sven, cmd_synth, cmd_train, StudyOutput,
};
use sectune_cli::config::{EvalSection, ModelShape, PipelineSection, SweepSection, TrainSection};
use sectune_cli::{Mode, RunConfig};
use sectune_core::data::load_dataset;
use sectune_core::diffmask::{build_masks, token_diff, OpKind};
use sectune_core::eval::{apply_variant, format_prompt, pass_at_k, PromptVariant, Scenario};
use sectune_core::losses::{
    loss_sec, loss_std, loss_sven_kl, loss_sven_total, loss_vul, output_logit_grad,
    security_gradient, std_gradient, Objective, Side, SvenConfig,
};
use sectune_core::model::{ModelConfig, ModelState};
use sectune_core::synth::{self, PlantedFix};
use sectune_core::trainer::{oversample, oversample_indices, LossKind, StepRecord, TrainConfig};
use sectune_core::{ClassKey, InstructionSample, MaskVec, SecurityTriple, TokenSeq};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
type GradCheck<'a> = (&'a str, Vec<f64>, Box<dyn Fn(&[f64]) -> f64 + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn seq(xs: Vec<u32>) -> TokenSeq {
    TokenSeq::from(xs)
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 16,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// A triple over `vocab` whose outputs differ.
fn random_triple(rng: &mut ChaCha8Rng, vocab: u32) -> SecurityTriple {
    loop {
        let len = rng.gen_range(1..=3);
        let i = random_tokens(rng, vocab, len);
        let n = rng.gen_range(2..=5);
        let s = random_tokens(rng, vocab, n);
        let mut v = s.clone();
        for _ in 0..rng.gen_range(1..=3) {
            let at = rng.gen_range(0..v.len());
            v[at] = rng.gen_range(4..vocab);
        }
        if rng.gen_bool(0.3) {
            v.push(rng.gen_range(4..vocab));
        }
        if let Ok(t) = SecurityTriple::new(seq(i), seq(s), seq(v), "CWE-089", "py") {
            return t;
        }
    }
}

fn random_masks(rng: &mut ChaCha8Rng, t: SecurityTriple) -> SecurityTriple {
    let bits =
        |rng: &mut ChaCha8Rng, n: usize| MaskVec::new((0..n).map(|_| rng.gen_bool(0.5)).collect());
    let (a, b) = (t.secure_out().len(), t.vuln_out().len());
    let (ma, mb) = (bits(rng, a), bits(rng, b));
    t.with_masks(ma, mb).unwrap()
}

fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let vocab = 10;
    let c = tiny(vocab);
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let m = ModelState::init(c, seed).unwrap();
        let base = ModelState::init(c, seed + 50).unwrap();
        params = m.params().len();
        ensure!(params <= 5000, "tiny model has {params} parameters");
        let t = random_triple(&mut rng, vocab as u32);
        let s = InstructionSample::new(t.instruction().clone(), t.secure_out().clone()).unwrap();
        let sven = SvenConfig::new(1.6, &base).unwrap();
        let at = |p: &[f64]| ModelState::from_params(c, p.to_vec()).unwrap();

        let checks: Vec<GradCheck> = vec![
            (
                "std",
                std_gradient(&m, &s).unwrap().1,
                Box::new(|p| loss_std(&at(p), &s).unwrap().value),
            ),
            (
                "sec",
                sectune_core::losses::gradient(
                    &m,
                    t.instruction(),
                    t.secure_out(),
                    Objective::MaskedLikelihood(t.sec_mask()),
                )
                .unwrap()
                .1,
                Box::new(|p| loss_sec(&at(p), &t).unwrap().value),
            ),
            (
                "vul",
                sectune_core::losses::gradient(
                    &m,
                    t.instruction(),
                    t.vuln_out(),
                    Objective::Unlikelihood(t.vul_mask()),
                )
                .unwrap()
                .1,
                Box::new(|p| loss_vul(&at(p), &t).unwrap().value),
            ),
            (
                "sven_total",
                security_gradient(&m, &t, Some(&sven)).unwrap().1,
                Box::new(|p| loss_sven_total(&at(p), &t, &sven).unwrap().value),
            ),
        ];
        for (name, analytic, f) in checks {
            let numeric = central_differences(f, m.params(), 1e-5);
            let err = max_rel_err(&analytic, &numeric);
            ensure!(
                err < 1e-4,
                "seed {seed} {name}: max relative error {err:.2e}"
            );
            worst = worst.max(err);
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!(
        "3 models x 4 losses, {params} params, max rel err {worst:.2e}, {took:.1?}"
    ))
}

fn c2_mask_nullity() -> Outcome {
    let vocab = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = 0;
    for k in 0..200 {
        let m = ModelState::init(tiny(vocab), k).unwrap();
        let t = random_triple(&mut rng, vocab as u32);
        let t = if k % 2 == 0 {
            t
        } else {
            random_masks(&mut rng, t)
        };
        for (out, mask, obj) in [
            (
                t.secure_out(),
                t.sec_mask(),
                Objective::MaskedLikelihood(t.sec_mask()),
            ),
            (
                t.vuln_out(),
                t.vul_mask(),
                Objective::Unlikelihood(t.vul_mask()),
            ),
        ] {
            let (_, g) = output_logit_grad(&m, t.instruction(), out, obj).unwrap();
            for (pos, row) in g.chunks(vocab).enumerate() {
                if !mask.get(pos) {
                    rows += 1;
                    ensure!(
                        row.iter().all(|&x| x == 0.0),
                        "triple {k}: non-zero gradient at masked-out position {pos}"
                    );
                }
            }
        }
    }
    Ok(format!(
        "{rows} masked-out logit rows exactly zero over 200 triples"
    ))
}

fn c3_reduction() -> Outcome {
    let vocab = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models: Vec<ModelState> = (0..5)
        .map(|k| ModelState::init(tiny(vocab), k).unwrap())
        .collect();
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let m = &models[k % 5];
        let base = &models[(k + 1) % 5];
        let t = random_triple(&mut rng, vocab as u32);
        let n = t.secure_out().len();
        let ones = t
            .clone()
            .with_masks(MaskVec::ones(n), t.vul_mask().clone())
            .unwrap();
        let s = InstructionSample::new(t.instruction().clone(), t.secure_out().clone()).unwrap();
        let d = (loss_sec(m, &ones).unwrap().value - loss_std(m, &s).unwrap().value).abs();
        ensure!(
            d <= 1e-12,
            "input {k}: all-ones L_sec differs from L_std by {d:e}"
        );
        worst = worst.max(d);

        let w = rng.gen_range(0.0..30.0);
        let cfg = SvenConfig::new(w, base).unwrap();
        let total = loss_sven_total(m, &t, &cfg).unwrap();
        let by_terms = loss_sec(m, &t).unwrap().value
            + loss_vul(m, &t).unwrap().value
            + w * (loss_sven_kl(m, base, &t, Side::Sec).unwrap().value
                + loss_sven_kl(m, base, &t, Side::Vul).unwrap().value);
        let d2 = (total.value - by_terms).abs();
        let d3 = (total.value - total.contributions.iter().sum::<f64>()).abs();
        ensure!(
            d2 <= 1e-12 && d3 <= 1e-12,
            "input {k}: SVEN total off its terms by {d2:e} / {d3:e}"
        );
        worst = worst.max(d2).max(d3);
    }
    Ok(format!("1000 inputs, max deviation {worst:.1e}"))
}

fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let mut rest = b.iter();
        if (0..a.len())
            .filter(|i| mask >> i & 1 == 1)
            .all(|i| rest.any(|y| *y == a[i]))
        {
            best = n;
        }
    }
    best
}

fn diff_agrees(a: &[u32], b: &[u32]) -> Result<(), String> {
    let want = brute_lcs(a, b);
    let script = token_diff(a, b);
    ensure!(
        script.lcs_len() == want,
        "{a:?} vs {b:?}: lcs {} != {want}",
        script.lcs_len()
    );
    for op in &script.ops {
        if op.kind == OpKind::Equal {
            ensure!(
                a[op.a.clone()] == b[op.b.clone()],
                "{a:?} vs {b:?}: unequal Equal op"
            );
        }
    }
    let (ma, mb) = build_masks(&seq(a.to_vec()), &seq(b.to_vec()));
    let kept = |s: &[u32], m: &MaskVec| -> Vec<u32> {
        s.iter()
            .enumerate()
            .filter(|(i, _)| !m.get(*i))
            .map(|(_, t)| *t)
            .collect()
    };
    let (ka, kb) = (kept(a, &ma), kept(b, &mb));
    ensure!(
        ka == kb && ka.len() == want,
        "{a:?} vs {b:?}: unmasked tokens are not a longest common subsequence"
    );
    Ok(())
}

fn c4_diff_oracle() -> Outcome {
    let start = Instant::now();
    let mut seqs: Vec<Vec<u32>> = vec![vec![]];
    let mut layer: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..4 {
        layer = layer
            .iter()
            .flat_map(|s| (0..3).map(move |x| [s.as_slice(), &[x]].concat()))
            .collect();
        seqs.extend(layer.iter().cloned());
    }
    for a in &seqs {
        for b in &seqs {
            diff_agrees(a, b)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let v = rng.gen_range(2..=6);
        let mut draw = || -> Vec<u32> {
            (0..rng.gen_range(0..=12))
                .map(|_| rng.gen_range(0..v))
                .collect()
        };
        let (a, b) = (draw(), draw());
        diff_agrees(&a, &b)?;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!(
        "{} exhaustive pairs + 10000 random, {took:.1?}",
        seqs.len() * seqs.len()
    ))
}

fn c5_oversampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0;
    for round in 0..25 {
        let cwes = ["CWE-022", "CWE-078", "CWE-089", "CWE-326"];
        let mut d = Vec::new();
        for cwe in cwes.iter().take(rng.gen_range(1..=4)) {
            for lang in ["py", "js"] {
                for _ in 0..rng.gen_range(1..=45) {
                    let t = random_triple(&mut rng, 30);
                    d.push(
                        SecurityTriple::new(
                            t.instruction().clone(),
                            t.secure_out().clone(),
                            t.vuln_out().clone(),
                            *cwe,
                            lang,
                        )
                        .unwrap(),
                    );
                }
            }
        }
        d.shuffle(&mut rng);
        let mut original: BTreeMap<ClassKey, usize> = BTreeMap::new();
        for t in &d {
            *original.entry(t.class_key()).or_default() += 1;
        }
        for k in [1, 5, 20, 40] {
            let idx = oversample_indices(&d, k, &mut rng).unwrap();
            let distinct: BTreeSet<usize> = idx.iter().copied().collect();
            ensure!(
                distinct == (0..d.len()).collect(),
                "round {round} k={k}: distinct samples changed"
            );
            let out = oversample(&d, k, &mut rng).unwrap();
            let mut counts: BTreeMap<ClassKey, usize> = BTreeMap::new();
            for t in &out {
                ensure!(
                    d.contains(t),
                    "round {round} k={k}: sample not from the input"
                );
                *counts.entry(t.class_key()).or_default() += 1;
            }
            for (key, &n) in &original {
                let got = counts.get(key).copied().unwrap_or(0);
                ensure!(
                    got == n.max(k),
                    "round {round} k={k} {key:?}: {got} != max({n}, {k})"
                );
            }
            ensure!(
                counts.len() == original.len(),
                "round {round}: class set changed"
            );
            cases += 1;
        }
    }
    Ok(format!("{cases} dataset/k combinations"))
}

fn c6_pass_at_k() -> Outcome {
    let mut checked = 0;
    for n in 1..=8usize {
        for c in 0..=n {
            for k in 1..=n {
                let (mut hit, mut total) = (0u32, 0u32);
                for subset in 0u32..(1 << n) {
                    if subset.count_ones() as usize == k {
                        total += 1;
                        hit += u32::from(subset & ((1 << c) - 1) != 0);
                    }
                }
                let want = hit as f64 / total as f64;
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                ensure!(
                    (got - want).abs() <= 1e-12,
                    "n={n} c={c} k={k}: {got} vs {want}"
                );
                checked += 1;
            }
        }
    }
    let a = pass_at_k(10, 5, 1).unwrap();
    let b = pass_at_k(4, 2, 2).unwrap();
    ensure!((a - 0.5).abs() <= 1e-12, "pass@1(10,5) = {a}");
    ensure!((b - 5.0 / 6.0).abs() <= 1e-12, "pass@2(4,2) = {b}");
    Ok(format!(
        "{checked} (n,c,k) triples, pass@1(10,5)={a}, pass@2(4,2)={b:.6}"
    ))
}

fn base_config(dir: &Path) -> RunConfig {
    RunConfig {
        seed: 0,
        out: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn c7_pipeline(dir: &Path) -> Outcome {
    let start = Instant::now();
    let mut cfg = base_config(dir);
    let synth = cmd_synth(&cfg).map_err(|e| e.to_string())?;
    cfg.pipeline = Some(PipelineSection {
        corpus: synth.commits.clone(),
        ..PipelineSection::default()
    });
    ensure!(
        cfg.pipeline.as_ref().unwrap().rules.max_lines == 40,
        "line threshold"
    );
    ensure!(
        cfg.pipeline.as_ref().unwrap().rules.max_files == 2,
        "file threshold"
    );
    let out = cmd_mine(&cfg).map_err(|e| e.to_string())?;
    let tok = sectune_core::minilang::tokenizer();
    let ds = load_dataset(&out.dataset, &tok).map_err(|e| e.to_string())?;
    let planted: Vec<PlantedFix> = fs::read_to_string(&synth.planted)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure!(
        out.funnel.commits == 200 && planted.len() == 20,
        "corpus shape {:?}",
        out.funnel
    );
    let got: BTreeSet<(String, String, String, String)> = ds
        .sec_samples
        .iter()
        .map(|t| {
            (
                tok.decode(t.instruction()),
                tok.decode(t.secure_out()),
                tok.decode(t.vuln_out()),
                t.cwe().to_string(),
            )
        })
        .collect();
    let want: BTreeSet<(String, String, String, String)> = planted
        .iter()
        .map(|p| {
            let i =
                sectune_core::Tokenizer::split(&synth::instruction(&p.language, &p.name)).join(" ");
            (i, p.secure.clone(), p.vulnerable.clone(), p.cwe.clone())
        })
        .collect();
    ensure!(
        ds.sec_samples.len() == 20,
        "mined {} triples",
        ds.sec_samples.len()
    );
    ensure!(got == want, "mined triples differ from the planted fixes");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    let f = out.funnel;
    Ok(format!(
        "funnel {} -> {} filtered -> {} analyzed -> {} verified -> {} triples, {took:.1?}",
        f.commits, f.filtered, f.analyzed, f.verified, f.triples
    ))
}

fn c8_study(study: &Result<(StudyOutput, Duration), String>) -> Outcome {
    let (out, took) = study.as_ref().map_err(Clone::clone)?;
    let r = &out.report.report;
    let get = |label: &str| r.row(label).ok_or(format!("no row {label}"));
    let (none, std, sc) = (get("none")?, get("standard-only")?, get("safecoder")?);
    let num = |v: Option<f64>, what: &str| v.ok_or(format!("{what} undefined"));
    let (s_std, s_sc) = (
        num(std.security, "standard-only security")?,
        num(sc.security, "safecoder security")?,
    );
    let (u_std, u_sc) = (
        num(std.utility, "standard-only utility")?,
        num(sc.utility, "safecoder utility")?,
    );
    let detail = format!(
        "security none {:.1} / standard-only {s_std:.1} / safecoder {s_sc:.1}; utility {:.1} / {u_std:.1} / {u_sc:.1}; {took:.1?}",
        none.security.unwrap_or(f64::NAN),
        none.utility.unwrap_or(f64::NAN)
    );
    ensure!(
        s_sc - s_std >= 25.0,
        "security gain {:.1} < 25 ({detail})",
        s_sc - s_std
    );
    ensure!(
        u_sc >= u_std - 3.0,
        "utility drop {:.1} > 3 ({detail})",
        u_std - u_sc
    );
    ensure!(*took < Duration::from_secs(600), "took {took:?}");
    Ok(detail)
}

fn sweep_config(dir: &Path, study: &StudyOutput, exponents: Vec<u32>) -> RunConfig {
    RunConfig {
        sweep: Some(SweepSection {
            base: study.base.clone(),
            sec_data: study.mined.dataset.clone(),
            scenarios: study.synth.scenarios.clone(),
            probes: study.synth.probes.clone(),
            exponents,
            config: TrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
                grad_accum_steps: 8,
                oversample_k: 20,
                ..TrainConfig::default()
            },
            n: 100,
            temperature: 0.4,
        }),
        ..base_config(dir)
    }
}

fn read_log(path: &Path) -> Vec<StepRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn c9_sweep(dir: &Path, study: &Result<(StudyOutput, Duration), String>) -> Outcome {
    let (study, _) = study.as_ref().map_err(Clone::clone)?;
    let start = Instant::now();
    let cfg = sweep_config(&dir.join("a"), study, (1..=8).collect());
    let out = cmd_sweep_sven(&cfg).map_err(|e| e.to_string())?;
    let points = &out.report.sweep;
    ensure!(points.len() == 8, "{} sweep points", points.len());
    let mut steps = 0;
    for p in points {
        ensure!(
            p.security.is_some() && p.utility.is_some(),
            "n={}: undefined score",
            p.exponent
        );
        ensure!(
            cfg.out.join(&p.checkpoint).exists(),
            "missing checkpoint {}",
            p.checkpoint
        );
        for r in read_log(&cfg.out.join(&p.log)) {
            ensure!(
                r.kind == LossKind::Sven,
                "n={}: step {} is not a SVEN step",
                p.exponent,
                r.step
            );
            let t = r.sven.ok_or(format!(
                "n={}: step {} has no SVEN terms",
                p.exponent, r.step
            ))?;
            let sum = t.sec + t.vul + t.kl_weight * (t.kl_sec + t.kl_vul);
            ensure!(
                (t.total - sum).abs() <= 1e-12 && (r.loss - t.total).abs() <= 1e-12,
                "n={}: step {} breaks the weighted sum",
                p.exponent,
                r.step
            );
            ensure!(
                t.kl_weight == p.kl_weight,
                "n={}: logged weight {}",
                p.exponent,
                t.kl_weight
            );
            steps += 1;
        }
    }
    ensure!(out.table.exists(), "no rendered curve");
    // rerun two points elsewhere; checkpoints must match byte for byte
    let again = cmd_sweep_sven(&sweep_config(&dir.join("b"), study, vec![1, 8]))
        .map_err(|e| e.to_string())?;
    for q in &again.report.sweep {
        let p = points.iter().find(|p| p.exponent == q.exponent).unwrap();
        let a = fs::read(cfg.out.join(&p.checkpoint)).unwrap();
        let b = fs::read(dir.join("b").join(&q.checkpoint)).unwrap();
        ensure!(a == b, "n={}: rerun checkpoint differs", q.exponent);
        ensure!(
            p.security == q.security && p.utility == q.utility,
            "n={}: rerun scores differ",
            q.exponent
        );
    }
    println!("{}", out.report.render().trim_end());
    let slope = out.report.slope.map_or("n/a".into(), |b| format!("{b:.3}"));
    Ok(format!(
        "8 points, {steps} logged steps satisfy the weighted sum, slope {slope}, {:.1?}",
        start.elapsed()
    ))
}

fn c10_templates() -> Outcome {
    let golden = |name: &str| {
        let p = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../core/tests/golden")
            .join(name);
        fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
    };
    ensure!(
        format_prompt("{instruction}", "{response}") == golden("prompt_template.txt"),
        "prompt template differs"
    );
    let s = Scenario {
        id: "x".into(),
        instruction: "Create a py function for this problem: hashes data".into(),
        prefix: "def hash_data ( data ) :".into(),
        cwe: "CWE-327".into(),
        language: "py".into(),
        detector: "rules".into(),
        validator: "function".into(),
        cwe_description: None,
    };
    let generic = apply_variant(&s, PromptVariant::SecGeneric).unwrap();
    let specific = apply_variant(&s, PromptVariant::SecSpecific).unwrap();
    ensure!(
        generic == format!("{} {}", s.instruction, golden("sec_generic.txt")),
        "sec-generic differs"
    );
    ensure!(
        specific == format!("{} {}", s.instruction, golden("sec_specific_cwe327.txt")),
        "sec-specific differs"
    );
    ensure!(
        apply_variant(&s, PromptVariant::FuncOnly).unwrap() == s.instruction,
        "func-only differs"
    );
    ensure!(
        sectune_core::pipeline::generate_inst_prompt("{o_sec}", "{o_vul}")
            == golden("generate_inst.txt"),
        "instruction-generation prompt differs"
    );
    Ok("prompt template, sec-generic, sec-specific and instruction-generation prompts byte-identical".into())
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(
                p.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&p).unwrap(),
            );
        }
    }
    out
}

fn c11_determinism(dir: &Path) -> Outcome {
    let run = || -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let mut cfg = base_config(dir);
        cfg.seed = 11;
        let synth = cmd_synth(&cfg).map_err(|e| e.to_string())?;
        cfg.pipeline = Some(PipelineSection {
            corpus: synth.commits.clone(),
            ..PipelineSection::default()
        });
        let mined = cmd_mine(&cfg).map_err(|e| e.to_string())?;
        cfg.train = Some(TrainSection {
            mode: Mode::Safecoder,
            std_data: Some(synth.standard.clone()),
            sec_data: Some(mined.dataset.clone()),
            model: ModelShape {
                d_model: 16,
                ..ModelShape::default()
            },
            config: TrainConfig {
                epochs: 2,
                grad_accum_steps: 4,
                oversample_k: 5,
                ..TrainConfig::default()
            },
            ..TrainSection::default()
        });
        let trained = cmd_train(&cfg).map_err(|e| e.to_string())?;
        cfg.eval = Some(EvalSection {
            checkpoint: trained.checkpoint.clone(),
            scenarios: synth.scenarios.clone(),
            probes: Some(synth.probes.clone()),
            n: 10,
            variants: PromptVariant::ALL.to_vec(),
            ..EvalSection::default()
        });
        cmd_eval(&cfg).map_err(|e| e.to_string())?;
        Ok(snapshot(dir))
    };
    let first = run()?;
    let second = run()?;
    ensure!(first.len() >= 8, "only {} output files", first.len());
    ensure!(
        first.keys().eq(second.keys()),
        "output file names differ between runs"
    );
    for (name, bytes) in &first {
        ensure!(
            second[name] == *bytes,
            "{} differs between runs",
            name.display()
        );
    }
    Ok(format!(
        "{} files (dataset, checkpoint, log, reports) byte-identical across reruns",
        first.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    for d in ["c7", "c8", "c9", "c11"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let study = {
        let start = Instant::now();
        catch_unwind(AssertUnwindSafe(|| {
            cmd_study(&base_config(&root.join("c8")))
        }))
        .map_err(|_| "study panicked".to_string())
        .and_then(|r| r.map_err(|e| e.to_string()))
        .map(|o| (o, start.elapsed()))
    };
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(c1_gradients)),
        ("mask nullity", Box::new(c2_mask_nullity)),
        ("reduction identity", Box::new(c3_reduction)),
        ("diff oracle", Box::new(c4_diff_oracle)),
        ("oversampling properties", Box::new(c5_oversampling)),
        ("pass@k oracle", Box::new(c6_pass_at_k)),
        (
            "pipeline soundness",
            Box::new(|| c7_pipeline(&root.join("c7"))),
        ),
        ("end-to-end micro-study", Box::new(|| c8_study(&study))),
        (
            "SVEN sweep",
            Box::new(|| c9_sweep(&root.join("c9"), &study)),
        ),
        ("template fidelity", Box::new(c10_templates)),
        (
            "determinism",
            Box::new(|| c11_determinism(&root.join("c11"))),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
