//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safedx_core::classifier::train::batch_loss_and_grad;
use safedx_core::classifier::{
    calibrate_threshold, diagnose, focal_loss, mc_dropout_predict, softmax,
    ClassifierModel, DiagnosisResult, DropoutMasks, McdConfig, ModelConfig, TrainingConfig, TrainingProfile,
};
use safedx_core::domain::{DiseaseLabel, LabelSet, PatientRecord, Vitals};
use safedx_core::generation::{GenerationParams, PlanSource, TreatmentPlan};
use safedx_core::metrics::{
    auc, bertscore, bertscore_f1, classification_report, flag_rate, mean_reciprocal_rank, precision_at_k,
    JudgedQuery, RankedJudgments, TokenEmbedder,
};
use safedx_core::pipeline::queue::replay;
use safedx_core::pipeline::{
    fit, CaseOutcome, CaseStatus, FitOutput, LabelDecision, Resolution, ReviewQueue, Stage, System, TrainingSettings,
};
use safedx_core::preprocess::FeaturizerConfig;
use safedx_core::retrieval::{cosine_similarity, search, DialogueEntry, EmbeddingIndex, Provenance};
use safedx_core::safety::{adjust_antibiotics, check_stewardship, fix_or_flag, scgs, Severity};
use safedx_core::Exec;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= tol, format!("{what}: {a} vs {b} (tol {tol:e})"))
}

struct Desk {
    fit: FitOutput,
    train_eval: Duration,
}

fn desk_training() -> TrainingSettings {
    TrainingSettings {
        profile: TrainingProfile::Desk,
        ..TrainingSettings::default()
    }
}

fn classification(desk: &mut Option<Desk>) -> Outcome {
    let ds = desk_dataset();
    let started = Instant::now();
    let fitted = fit(&ds, &desk_training(), Default::default(), Exec::Parallel).map_err(|e| e.to_string())?;
    let mcd = McdConfig::default();
    let diagnoses: Vec<DiagnosisResult> = fitted
        .val_features
        .features
        .iter()
        .map(|x| diagnose(&fitted.model, x, f64::INFINITY, &mcd, Exec::Parallel))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let predicted: Vec<usize> = diagnoses.iter().map(|d| d.label.index).collect();
    let classes = fitted.model.labels.len();
    let report = classification_report(&fitted.val_features.labels, &predicted, classes).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let split_ok = fitted.train.len() == 960 && fitted.validation.len() == 240;
    let detail = format!(
        "macro-F1 {:.4}, accuracy {:.4} on {} validation cases; train+eval {:.1}s",
        report.macro_f1,
        report.accuracy,
        predicted.len(),
        elapsed.as_secs_f64()
    );
    *desk = Some(Desk {
        fit: fitted,
        train_eval: elapsed,
    });
    check(split_ok, format!("unexpected split sizes; {detail}"))?;
    check(report.macro_f1 >= 0.90 && report.accuracy >= 0.90, detail.clone())?;
    check(elapsed <= Duration::from_secs(300), format!("over 5 min; {detail}"))?;
    Ok(detail)
}

fn calibration(desk: &Option<Desk>) -> Outcome {
    let desk = desk.as_ref().ok_or("no trained model")?;
    let model = &desk.fit.model;
    let val = &desk.fit.val_features.features;
    let mcd = McdConfig::default();
    let cal = calibrate_threshold(model, val, 0.18, &mcd, Exec::Parallel).map_err(|e| e.to_string())?;
    let results: Vec<DiagnosisResult> = val
        .iter()
        .map(|x| diagnose(model, x, cal.threshold, &mcd, Exec::Sequential))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let recomputed = flag_rate(&results).map_err(|e| e.to_string())?;
    let recount = results.iter().filter(|d| d.flagged).count();
    let detail = format!(
        "flag rate {:.4} ({} of {}), recount {recount}",
        cal.flag_rate(),
        cal.flagged,
        val.len()
    );
    check((cal.flag_rate() - 0.18).abs() <= 0.02, detail.clone())?;
    check(recount == cal.flagged, format!("recount mismatch; {detail}"))?;
    check(recomputed == cal.flag_rate(), format!("rate mismatch {recomputed}; {detail}"))?;
    Ok(detail)
}

fn gradient_oracle() -> Outcome {
    let mut mc = ModelConfig::new(24, 5);
    mc.vitals_hidden = 6;
    mc.trunk_hidden = 12;
    let labels = LabelSet::from_names(["a", "b", "c", "d", "e"]);
    let featurizer = FeaturizerConfig {
        dimension: 24,
        ..Default::default()
    };
    let mut model = ClassifierModel::new(mc.clone(), featurizer, labels, 21).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Non-zero biases so no unit sits exactly on a ReLU kink.
    for i in 0..model.num_params() {
        let v = model.param(i) + rng.gen_range(-0.05..0.05);
        model.set_param(i, v);
    }
    let xs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..mc.fused_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
    let masks: Vec<DropoutMasks> = (0..6).map(|_| DropoutMasks::sample(&mc, &mut rng)).collect();
    let mut cfg = TrainingConfig::profile(TrainingProfile::Default);
    cfg.focal_gamma = 2.0;
    cfg.focal_alpha = Some(vec![0.25, 0.5, 1.0, 0.75, 0.4]);

    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let mut grads = model.zero_grads();
    batch_loss_and_grad(&model, &refs, &ys, Some(&masks), &cfg, &mut grads);

    let h = 1e-6;
    let mut scratch = model.zero_grads();
    let mut worst: f64 = 0.0;
    let coords: Vec<usize> = (0..model.num_params()).collect();
    let picks: Vec<usize> = coords.choose_multiple(&mut rng, 150).copied().collect();
    let mut checked = 0;
    for &i in &picks {
        let p = model.param(i);
        model.set_param(i, p + h);
        let up = batch_loss_and_grad(&model, &refs, &ys, Some(&masks), &cfg, &mut scratch);
        model.set_param(i, p - h);
        let down = batch_loss_and_grad(&model, &refs, &ys, Some(&masks), &cfg, &mut scratch);
        model.set_param(i, p);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(i);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        checked += 1;
    }
    let detail = format!("{checked} coordinates, worst relative error {worst:.2e}");
    check(checked >= 100 && worst < 1e-4, detail.clone())?;
    Ok(detail)
}

fn focal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.gen_range(2..12);
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let target = rng.gen_range(0..c);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ce = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - logits[target];
        let fl = focal_loss(&softmax(&logits), target, &vec![1.0; c], 0.0).map_err(|e| e.to_string())?;
        worst = worst.max((fl - ce).abs());
    }
    check(worst <= 1e-9, format!("cross-entropy gap {worst:e}"))?;
    let two = |p: f64| vec![p, 1.0 - p];
    let ex = [
        (focal_loss(&two(1.0), 0, &[1.0, 1.0], 2.0), 0.0),
        (focal_loss(&two(0.5), 0, &[0.25, 0.25], 0.0), 0.25 * 2f64.ln()),
        (focal_loss(&two(0.9), 0, &[1.0, 1.0], 2.0), 0.01 * -(0.9f64.ln())),
    ];
    for (i, (got, want)) in ex.into_iter().enumerate() {
        close(got.map_err(|e| e.to_string())?, want, 1e-6, &format!("example {}", i + 1))?;
    }
    Ok(format!("1000 cases within {worst:.1e} of cross-entropy; 3 examples match"))
}

/// A model whose only stochastic units are one vitals unit and two trunk units.
fn tiny_dropout_model() -> Result<ClassifierModel, String> {
    let mut mc = ModelConfig::new(3, 3);
    mc.vitals_hidden = 1;
    mc.trunk_hidden = 2;
    mc.dropout_rate = 0.3;
    let labels = LabelSet::from_names(["x", "y", "z"]);
    let featurizer = FeaturizerConfig {
        dimension: 3,
        ..Default::default()
    };
    ClassifierModel::new(mc, featurizer, labels, 8).map_err(|e| e.to_string())
}

fn mcd() -> Outcome {
    let labels = LabelSet::from_names(["a", "b", "c", "d"]);
    let x: Vec<f64> = (0..42).map(|i| ((i * 5) % 7) as f64 / 7.0).collect();
    let still = untrained_model(&labels, 32, 0.0, 4);
    let r = mc_dropout_predict(&still, &x, &McdConfig::default(), Exec::Parallel).map_err(|e| e.to_string())?;
    check(r.variance.iter().all(|v| *v == 0.0) && r.uncertainty == 0.0, "dropout 0 left variance")?;

    let noisy = untrained_model(&labels, 32, 0.2, 4);
    let cfg = McdConfig {
        passes: 50,
        seed: 17,
        ..McdConfig::default()
    };
    let a = mc_dropout_predict(&noisy, &x, &cfg, Exec::Parallel).map_err(|e| e.to_string())?;
    let b = mc_dropout_predict(&noisy, &x, &cfg, Exec::Parallel).map_err(|e| e.to_string())?;
    let c = mc_dropout_predict(&noisy, &x, &cfg, Exec::Sequential).map_err(|e| e.to_string())?;
    let bits = |r: &safedx_core::classifier::MCDResult| {
        r.mean_probs.iter().chain(&r.variance).map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    check(bits(&a) == bits(&b) && bits(&a) == bits(&c), "seeded runs differ")?;

    // Exact expectation over all 2^3 masks.
    let model = tiny_dropout_model()?;
    let p = model.config.dropout_rate;
    let keep = 1.0 / (1.0 - p);
    let x = vec![0.6, -0.3, 0.9, 0.2, 0.8, 0.5, 0.4, 0.7, 0.1, 0.3, 1.0, 0.5, 0.0];
    let mut mean = [0.0; 3];
    let mut second = [0.0; 3];
    for bits in 0u32..8 {
        let unit = |k: u32| if bits >> k & 1 == 1 { keep } else { 0.0 };
        let weight: f64 = (0..3).map(|k| if bits >> k & 1 == 1 { 1.0 - p } else { p }).product();
        let masks = DropoutMasks {
            vitals: vec![unit(0)],
            trunk: vec![unit(1), unit(2)],
        };
        let probs = softmax(&model.forward_fused(&x, Some(&masks)));
        for j in 0..3 {
            mean[j] += weight * probs[j];
            second[j] += weight * probs[j] * probs[j];
        }
    }
    let t = 10_000;
    let sampled = mc_dropout_predict(
        &model,
        &x,
        &McdConfig {
            passes: t,
            seed: 3,
            ..McdConfig::default()
        },
        Exec::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_z: f64 = 0.0;
    for j in 0..3 {
        let se = ((second[j] - mean[j] * mean[j]).max(0.0) / t as f64).sqrt();
        let z = (sampled.mean_probs[j] - mean[j]).abs() / se.max(1e-15);
        worst_z = worst_z.max(z);
    }
    let detail = format!("dropout 0 exact; seeded runs bit-identical; enumeration |z| max {worst_z:.2} at T = {t}");
    check(worst_z < 3.0, detail.clone())?;
    Ok(detail)
}

fn brute_force(vectors: &[(String, Vec<f64>)], q: &[f64], k: usize, min_score: f64) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(String, f64)> = vectors
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            (id.clone(), dot / (norm(v) * norm(q)))
        })
        .filter(|(_, s)| *s >= min_score)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[allow(clippy::approx_constant)]
fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut threshold_hits = 0usize;
    for corpus in 0..1000 {
        let n = rng.gen_range(1..=512);
        let dim = rng.gen_range(2..=16);
        let mut vectors: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
        for i in 0..n {
            // Some exact duplicates so tie-breaking by id is exercised.
            let v = if i > 0 && rng.gen_bool(0.05) {
                vectors[rng.gen_range(0..i)].1.clone()
            } else {
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    if v.iter().any(|x| x.abs() > 1e-3) {
                        break v;
                    }
                }
            };
            vectors.push((format!("d{:05}", rng.gen_range(0..100_000) * 1000 + i), v));
        }
        let index = EmbeddingIndex::from_vectors(dim, vectors.clone(), Provenance::ExternalFile)
            .map_err(|e| e.to_string())?;
        let q: Vec<f64> = if rng.gen_bool(0.2) {
            vectors[rng.gen_range(0..n)].1.clone()
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let k = rng.gen_range(1..=n.min(20));
        let min_score = if corpus % 2 == 0 { 0.7 } else { -1.0 };
        let got = search(&index, &q, k, min_score, Exec::Parallel).map_err(|e| e.to_string())?;
        let want = brute_force(&vectors, &q, k, min_score);
        let got_ids: Vec<&str> = got.hits.iter().map(|h| h.id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
        check(got_ids == want_ids, format!("corpus {corpus}: ids/order differ"))?;
        for (h, (_, s)) in got.hits.iter().zip(&want) {
            close(h.score, *s, 1e-12, &format!("corpus {corpus} score"))?;
        }
        if min_score == 0.7 {
            check(got.hits.iter().all(|h| h.score >= 0.7), format!("corpus {corpus}: sub-threshold hit"))?;
            threshold_hits += got.hits.len();
        }
    }
    let fixtures = [
        ([1.0, 0.0], [1.0, 0.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 1.0], [1.0, 0.0], 0.707_106_78),
    ];
    for (u, v, want) in fixtures {
        let got = cosine_similarity(&u, &v).map_err(|e| e.to_string())?;
        close(got, want, 1e-8, "cosine fixture")?;
    }
    close(cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, 1e-9, "cosine")?;
    Ok(format!(
        "1000 corpora match brute force; {threshold_hits} hits at min_score 0.7 all qualify; cosine fixtures match"
    ))
}

/// Hand-set token vectors for the BERTScore fixture.
struct FixedTokens(HashMap<&'static str, Vec<f64>>);

impl TokenEmbedder for FixedTokens {
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
        text.split_whitespace().map(|t| self.0[t].clone()).collect()
    }
}

fn metrics() -> Outcome {
    let r = classification_report(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).map_err(|e| e.to_string())?;
    close(r.accuracy, 0.75, 1e-9, "accuracy")?;
    close(r.per_class[0].precision, 1.0, 1e-9, "class 0 precision")?;
    close(r.per_class[0].recall, 0.5, 1e-9, "class 0 recall")?;
    close(r.per_class[1].precision, 2.0 / 3.0, 1e-9, "class 1 precision")?;
    close(r.per_class[1].recall, 1.0, 1e-9, "class 1 recall")?;

    let q = |ret: &[&str], rel: &[&str]| JudgedQuery {
        retrieved: ret.iter().map(|s| s.to_string()).collect(),
        relevant: rel.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
    };
    let one = RankedJudgments::new(vec![q(&["a", "x", "b"], &["a", "b"])]).map_err(|e| e.to_string())?;
    close(precision_at_k(&one, 3).unwrap(), 2.0 / 3.0, 1e-9, "P@3")?;
    let ranks = RankedJudgments::new(vec![
        q(&["r"], &["r"]),
        q(&["x", "r"], &["r"]),
        q(&["x", "y", "z", "r"], &["r"]),
    ])
    .map_err(|e| e.to_string())?;
    close(mean_reciprocal_rank(&ranks).unwrap(), 1.75 / 3.0, 1e-9, "MRR")?;

    let a = auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).ok_or("AUC undefined")?;
    close(a, 0.75, 1e-9, "AUC")?;

    let emb = FixedTokens(HashMap::from([
        ("a", vec![1.0, 0.0]),
        ("b", vec![1.0, 0.0]),
        ("c", vec![1.0, 0.0]),
        ("d", vec![0.0, 1.0]),
    ]));
    // Greedy: P = (1 + 1) / 2, R = (1 + 0) / 2, F1 = 2/3.
    let s = bertscore("a b", "c d", &emb).map_err(|e| e.to_string())?;
    close(s.precision, 1.0, 1e-9, "BERTScore P")?;
    close(s.recall, 0.5, 1e-9, "BERTScore R")?;
    close(s.f1, 2.0 / 3.0, 1e-9, "BERTScore F1")?;
    close(
        bertscore_f1("fever and rash", "fever and rash", &safedx_core::metrics::HashingTokenEmbedder::default())
            .unwrap(),
        1.0,
        1e-9,
        "identical texts",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for set in 0..100 {
        let n = rng.gen_range(2..200);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..50) as f64) / 7.0 - 3.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let base = auc(&scores, &pos);
        let transforms: [fn(f64) -> f64; 3] = [|s| s.exp(), |s| s * s * s + 2.0 * s, |s| 1.0 / (1.0 + (-3.0 * s).exp())];
        for f in transforms {
            let moved: Vec<f64> = scores.iter().map(|s| f(*s)).collect();
            match (base, auc(&moved, &pos)) {
                (None, None) => {}
                (Some(x), Some(y)) => close(x, y, 1e-12, &format!("AUC invariance, set {set}"))?,
                _ => return Err(format!("AUC definedness changed on set {set}")),
            }
        }
    }
    Ok("report, P@k, MRR, AUC and BERTScore fixtures match; AUC invariant on 100 score sets".into())
}

fn safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut removed = 0usize;
    for case in 0..1000 {
        let data = fixture_safety(case as u64 % 25);
        let picks: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..10)).collect();
        let plan = TreatmentPlan::from_text(
            fixture_plan_text(&picks),
            PlanSource::BuiltinTemplate,
            GenerationParams::default(),
            &data.lexicon,
        );
        let dx = DiseaseLabel {
            index: 0,
            name: if rng.gen_bool(0.5) { "Dengue" } else { "Malaria" }.into(),
        };
        let report = data.screen(&plan, &dx).map_err(|e| e.to_string())?;
        let kept: Vec<&str> = report.adjusted_plan.drug_ids().collect();
        removed += plan.drugs.len() - kept.len().min(plan.drugs.len());
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if let Some(r) = data.ddi.lookup(kept[i], kept[j]) {
                    check(
                        r.severity < data.config.removal_level,
                        format!("case {case}: {} + {} retained at {}", kept[i], kept[j], r.severity),
                    )?;
                }
            }
        }
        let v1 = check_stewardship(&plan, &dx, &data.rules, &data.lexicon);
        let once = adjust_antibiotics(&plan, &v1, &data.lexicon);
        let v2 = check_stewardship(&once, &dx, &data.rules, &data.lexicon);
        check(adjust_antibiotics(&once, &v2, &data.lexicon) == once, format!("case {case}: adjust not idempotent"))?;
        let (rm, fl) = (Severity::Contraindicated, Severity::Major);
        let f1 = fix_or_flag(&once, &data.ddi, rm, fl, &data.lexicon).map_err(|e| e.to_string())?;
        let f2 = fix_or_flag(&f1.plan, &data.ddi, rm, fl, &data.lexicon).map_err(|e| e.to_string())?;
        check(f1.plan == f2.plan, format!("case {case}: fix_or_flag not idempotent"))?;
    }
    close(scgs(0.8, 0.3, 0.2, 1.0).unwrap().value, 0.8, 1e-12, "SCGS lambda 1")?;
    close(scgs(0.4, 0.0, 0.0, 0.0).unwrap().value, 1.0, 1e-12, "SCGS lambda 0")?;
    close(scgs(0.9, 0.2, 0.1, 0.5).unwrap().value, 0.80, 1e-12, "SCGS lambda 0.5")?;
    Ok(format!(
        "1000 plans, no retained pair at removal level ({removed} drug mentions dropped); idempotent; SCGS examples match"
    ))
}

fn is_fail_closed(o: &CaseOutcome) -> bool {
    let plan_safe = o.plan.is_none() || o.safety.is_some();
    let by_status = match o.status {
        CaseStatus::Completed => o.plan.is_some() && o.safety.is_some(),
        CaseStatus::Flagged | CaseStatus::Failed => o.plan.is_none() && o.safety.is_none(),
    };
    plan_safe && by_status
}

const DOWNSTREAM: [Stage; 10] = [
    Stage::ConstructQuery,
    Stage::Search,
    Stage::AssemblePrompt,
    Stage::Generate,
    Stage::CheckStewardship,
    Stage::Adjust,
    Stage::CheckDdi,
    Stage::FixOrFlag,
    Stage::RiskTerms,
    Stage::Score,
];

fn desk_system(desk: &Desk, threshold: f64, corpus: Vec<DialogueEntry>, queue: Option<ReviewQueue>) -> System {
    let mut settings = desk_settings();
    settings.mcd = McdConfig::default();
    system_with(desk.fit.model.clone(), threshold, settings, corpus, queue)
}

fn pipeline(desk: &Option<Desk>) -> Outcome {
    let desk = desk.as_ref().ok_or("no trained model")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("queue.jsonl");
    let queue = ReviewQueue::open(&path).map_err(|e| e.to_string())?;
    let cal = calibrate_threshold(
        &desk.fit.model,
        &desk.fit.val_features.features,
        0.18,
        &McdConfig::default(),
        Exec::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let system = desk_system(desk, cal.threshold, corpus(), Some(queue));
    let q = system.queue.as_ref().ok_or("no queue")?;
    let ds = desk_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut snapshots = vec![q.list(None)];
    let mut counts = [0usize; 3];
    let mut nsaid_removed = 0;
    for i in 0..500 {
        let record = random_record(&mut rng, &ds, DRUG_WORDS, format!("soak-{i:03}"));
        let reference = rng.gen_bool(0.3).then_some("Paracetamol, fluids and rest.");
        let out = system.run_case_with_reference(&record, reference);
        check(is_fail_closed(&out), format!("case {i}: plan without safety report"))?;
        match out.status {
            CaseStatus::Completed => counts[0] += 1,
            CaseStatus::Flagged => {
                counts[1] += 1;
                check(!DOWNSTREAM.iter().any(|s| out.ran(*s)), format!("case {i}: flagged case ran downstream"))?;
                check(out.retrieval.hits.is_empty(), format!("case {i}: flagged case retrieved"))?;
                snapshots.push(q.list(None));
                if rng.gen_bool(0.3) {
                    let resolution = Resolution {
                        label: LabelDecision::Confirmed,
                        plan: None,
                        notes: "reviewed".into(),
                    };
                    q.resolve(&out.case_id, resolution, "reviewer").map_err(|e| e.to_string())?;
                    snapshots.push(q.list(None));
                }
            }
            CaseStatus::Failed => counts[2] += 1,
        }
        if let Some(report) = &out.safety {
            if report.stewardship_violations.iter().any(|v| v.rule_id == "AS-DENGUE-NSAID") {
                nsaid_removed += 1;
                let lex = &system.safety.lexicon;
                check(
                    report.adjusted_plan.drug_ids().all(|d| !lex.has_class(d, "nsaid")),
                    format!("case {i}: NSAID kept for dengue"),
                )?;
            }
        }
    }
    check(counts.iter().all(|&c| c > 0), format!("soak did not exercise every status: {counts:?}"))?;

    // Crash at every record boundary and inside every record.
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut bounds = vec![0];
    bounds.extend(bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1));
    check(bounds.len() == snapshots.len(), "journal records and snapshots disagree")?;
    for (n, w) in bounds.windows(2).enumerate() {
        for cut in [w[0], (w[0] + w[1]) / 2, w[1] - 1] {
            let (state, valid) = replay(&bytes[..cut]).map_err(|e| e.to_string())?;
            check(valid == w[0], format!("prefix {cut}: valid length {valid}"))?;
            check(state.items() == snapshots[n].as_slice(), format!("prefix {cut}: state differs"))?;
        }
    }
    let (full, _) = replay(&bytes).map_err(|e| e.to_string())?;
    check(full.items() == snapshots.last().unwrap().as_slice(), "full replay differs")?;
    Ok(format!(
        "500 cases fail-closed ({} completed, {} flagged, {} failed, {nsaid_removed} dengue NSAID removals); \
         replay exact at {} journal prefixes",
        counts[0],
        counts[1],
        counts[2],
        3 * (bounds.len() - 1)
    ))
}

/// The desk corpus plus recombined variants, `n` entries in all.
fn enlarged_corpus(n: usize) -> Vec<DialogueEntry> {
    let base = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut out = base.clone();
    let mut i = 0;
    while out.len() < n {
        let a = base.choose(&mut rng).unwrap();
        let b = base.choose(&mut rng).unwrap();
        out.push(DialogueEntry {
            id: format!("syn-{i:04}"),
            patient_utterance: format!("{} {}", a.patient_utterance, b.patient_utterance),
            doctor_response: a.doctor_response.clone(),
            disease_tag: a.disease_tag.clone(),
        });
        i += 1;
    }
    out
}

fn latency(desk: &Option<Desk>) -> Outcome {
    let desk = desk.as_ref().ok_or("no trained model")?;
    // Never flag, so every case takes the full path.
    let system = desk_system(desk, f64::INFINITY, enlarged_corpus(1000), None);
    check(system.index.len() == 1000, format!("index has {} entries", system.index.len()))?;
    let ds = desk_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(250);
    let mut times = Vec::new();
    for i in 0..50 {
        let (record, _) = ds.records.choose(&mut rng).unwrap();
        let record = PatientRecord {
            id: format!("lat-{i}"),
            symptom_text: format!("{} I took ibuprofen.", record.symptom_text),
            vitals: Vitals {
                temperature: Some(101.5),
                ..Vitals::default()
            },
        };
        let started = Instant::now();
        let out = system.run_case(&record);
        times.push(started.elapsed());
        check(out.status == CaseStatus::Completed, format!("case {i} did not complete"))?;
    }
    times.sort();
    let max = *times.last().unwrap();
    let median = times[times.len() / 2];
    let detail = format!(
        "1000-entry index, 50 cases: median {:.1} ms, max {:.1} ms",
        median.as_secs_f64() * 1e3,
        max.as_secs_f64() * 1e3
    );
    check(max < Duration::from_millis(250), detail.clone())?;
    Ok(detail)
}

fn main() {
    let mut desk: Option<Desk> = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match &outcome {
            Ok(d) => println!("PASS  {name:<26} {d}"),
            Err(d) => println!("FAIL  {name:<26} {d}"),
        }
        results.push((name, outcome));
    };
    run("desk classification", &mut || classification(&mut desk));
    run("flag-rate calibration", &mut || calibration(&desk));
    run("gradient oracle", &mut gradient_oracle);
    run("focal loss", &mut focal);
    run("mc dropout", &mut mcd);
    run("retrieval oracle", &mut retrieval);
    run("metrics oracles", &mut metrics);
    run("safety exhaustiveness", &mut safety);
    run("pipeline invariants", &mut || pipeline(&desk));
    run("latency", &mut || latency(&desk));
    if let Some(d) = &desk {
        println!("note: desk train+eval took {:.1}s", d.train_eval.as_secs_f64());
    }
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
