mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use safedx_core::domain::{PatientRecord, Vitals};
use safedx_core::generation::ExternalGenerator;
use safedx_core::pipeline::queue::replay;
use safedx_core::pipeline::{
    CaseStatus, LabelDecision, PlanDecision, Resolution, ReviewQueue, ReviewStatus, Stage, System,
};

use common::*;

const DOWNSTREAM: [Stage; 11] = [
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
    Stage::Enqueue,
];

fn quick_system(threshold: f64, dropout: f64, queue: Option<ReviewQueue>) -> System {
    let ds = desk_dataset();
    let model = untrained_model(&ds.label_set, 256, dropout, 3);
    system_with(model, threshold, desk_settings(), corpus(), queue)
}

fn record(id: &str, text: &str) -> PatientRecord {
    PatientRecord {
        id: id.into(),
        symptom_text: text.into(),
        vitals: Vitals::default(),
    }
}

#[test]
fn unflagged_case_runs_every_stage_in_order() {
    let sys = quick_system(f64::INFINITY, 0.2, None);
    let out = sys.run_case_with_reference(
        &record("c1", "fever, joint pain and a rash. I took ibuprofen."),
        Some("Paracetamol and fluids."),
    );
    assert_eq!(out.status, CaseStatus::Completed);
    let order: Vec<Stage> = out.timings.iter().map(|t| t.stage).collect();
    assert_eq!(
        order,
        [
            Stage::Validate,
            Stage::Classify,
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
        ]
    );
    assert!(out.plan.is_some() && out.safety.is_some() && out.scgs.is_some());
    assert!(out.provenance.prompt.is_some());
    assert_eq!(out.provenance.evidence, out.retrieval.hits);
}

#[test]
fn flagged_case_is_queued_and_skips_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let queue = ReviewQueue::open(&dir.path().join("q.jsonl")).unwrap();
    // Uncertainty is never negative, so every case is flagged.
    let sys = quick_system(-1.0, 0.2, Some(queue));
    let out = sys.run_case(&record("f1", "headache and nausea"));
    assert_eq!(out.status, CaseStatus::Flagged);
    assert!(out.plan.is_none() && out.safety.is_none());
    assert!(out.retrieval.hits.is_empty());
    assert!(out.ran(Stage::Enqueue));
    for s in &DOWNSTREAM[..10] {
        assert!(!out.ran(*s), "{s:?} ran on a flagged case");
    }
    let q = sys.queue.as_ref().unwrap();
    let pending = q.list(Some(ReviewStatus::Pending));
    assert_eq!(pending.len(), 1);
    assert_eq!(pending[0].case_id, "f1");

    // Same id again: the journal refuses it and the outcome fails closed.
    let again = sys.run_case(&record("f1", "headache and nausea"));
    assert_eq!(again.status, CaseStatus::Failed);
    assert_eq!(again.failure.as_ref().unwrap().stage, Stage::Enqueue);
    assert!(again.is_fail_closed());
}

#[test]
fn validation_failure_names_the_stage() {
    let sys = quick_system(f64::INFINITY, 0.2, None);
    let mut r = record("v1", "cough");
    r.vitals.spo2 = Some(30.0);
    let out = sys.run_case(&r);
    assert_eq!(out.status, CaseStatus::Failed);
    let f = out.failure.unwrap();
    assert_eq!(f.stage, Stage::Validate);
    assert!(f.message.contains("spo2"), "{}", f.message);
    assert!(out.plan.is_none() && out.safety.is_none());
}

#[test]
fn outcomes_are_deterministic_modulo_timings() {
    let sys = quick_system(f64::INFINITY, 0.2, None);
    let r = record("d1", "itchy skin rash with red patches. I use ibuprofen and warfarin.");
    let a = sys.run_case_with_reference(&r, Some("Antihistamines."));
    let b = sys.run_case_with_reference(&r, Some("Antihistamines."));
    assert_eq!(a.without_timings(), b.without_timings());
}

#[test]
fn sequential_and_parallel_systems_agree() {
    let ds = desk_dataset();
    let mut seq = desk_settings();
    seq.sequential = true;
    let a = system_with(untrained_model(&ds.label_set, 256, 0.2, 3), f64::INFINITY, seq, corpus(), None);
    let b = quick_system(f64::INFINITY, 0.2, None);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let r = random_record(&mut rng, &ds, DRUG_WORDS, format!("s{i}"));
        assert_eq!(a.run_case(&r).without_timings(), b.run_case(&r).without_timings());
    }
}

#[test]
fn dropout_free_model_is_never_flagged() {
    let sys = quick_system(1e-12, 0.0, None);
    let out = sys.run_case(&record("z1", "blurred vision and frequent urination"));
    assert_eq!(out.status, CaseStatus::Completed);
    assert_eq!(out.diagnosis.unwrap().mcd.uncertainty, 0.0);
}

#[test]
fn unreachable_external_generator_falls_back_with_incident() {
    let ds = desk_dataset();
    let mut settings = desk_settings();
    settings.generator.external = Some(ExternalGenerator {
        url: "http://127.0.0.1:9/generate".into(),
        timeout_secs: 2.0,
    });
    let sys = system_with(untrained_model(&ds.label_set, 256, 0.2, 3), f64::INFINITY, settings, corpus(), None);
    let out = sys.run_case(&record("e1", "burning stomach pain after meals"));
    assert_eq!(out.status, CaseStatus::Completed);
    assert_eq!(out.incidents.len(), 1);
    assert!(out.incidents[0].contains("builtin used"));
    assert!(out.safety.is_some());
}

/// Byte offsets at which each journal line ends (exclusive).
fn line_ends(bytes: &[u8]) -> Vec<usize> {
    bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i + 1)
        .collect()
}

#[test]
fn journal_replay_matches_state_at_every_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let sys = quick_system(-1.0, 0.2, Some(ReviewQueue::open(&path).unwrap()));
    let q = sys.queue.as_ref().unwrap();

    // Snapshot the listing after every committed record.
    let mut snapshots = vec![q.list(None)];
    for i in 0..6 {
        sys.run_case(&record(&format!("j{i}"), "persistent cough with fever"));
        snapshots.push(q.list(None));
        if i % 2 == 1 {
            let resolution = Resolution {
                label: if i == 3 {
                    LabelDecision::Overridden { label: "Pneumonia".into() }
                } else {
                    LabelDecision::Confirmed
                },
                plan: Some(PlanDecision::Edited {
                    text: "Rest and fluids.".into(),
                }),
                notes: format!("note {i}"),
            };
            q.resolve(&format!("j{}", i - 1), resolution, "dr-a").unwrap();
            snapshots.push(q.list(None));
        }
    }
    let bytes = std::fs::read(&path).unwrap();
    let ends = line_ends(&bytes);
    assert_eq!(ends.len() + 1, snapshots.len());

    let mut starts = vec![0];
    starts.extend(&ends);
    for (n, window) in starts.windows(2).enumerate() {
        let (lo, hi) = (window[0], window[1]);
        // Clean cut after n records, then torn tails inside record n.
        for cut in [lo, lo + 1, (lo + hi) / 2, hi - 1] {
            let (state, valid) = replay(&bytes[..cut]).unwrap();
            assert_eq!(valid, lo, "cut {cut}");
            assert_eq!(state.items(), snapshots[n].as_slice(), "cut {cut}");

            let crash = dir.path().join(format!("crash-{cut}.jsonl"));
            std::fs::write(&crash, &bytes[..cut]).unwrap();
            let reopened = ReviewQueue::open(&crash).unwrap();
            assert_eq!(reopened.list(None), snapshots[n], "reopen at {cut}");
            assert_eq!(std::fs::metadata(&crash).unwrap().len() as usize, lo);
        }
    }
    let (full, _) = replay(&bytes).unwrap();
    assert_eq!(full.items(), snapshots.last().unwrap().as_slice());
}
