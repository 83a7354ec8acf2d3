//! Evaluation bundle: classification, calibration, retrieval and generation
//! metrics over the configured validation split, plus report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::training::{featurize, TrainingSettings};
use super::{io_err, require, CaseStatus, PipelineError, System};
use crate::classifier::{argmax, diagnose, DiagnosisResult, McdConfig};
use crate::domain::LabeledDataset;
use crate::exec::Exec;
use crate::metrics::{
    classification_report, flag_rate, mean_reciprocal_rank, precision_at_k, roc_auc_per_class, roc_curve,
    ClassificationReport, JudgedQuery, RankedJudgments,
};
use crate::retrieval::{search, Query};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    /// JSON Lines of `{"query": text, "relevant": [ids]}`.
    pub judgments: Option<PathBuf>,
    /// JSON Lines of `{"disease": name, "reference": text}`.
    pub references: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            judgments: None,
            references: None,
            output_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub k: usize,
    pub queries: usize,
    pub precision_at_k: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    /// Completed validation cases that had a reference treatment.
    pub cases: usize,
    pub mean_bertscore_f1: f64,
    pub mean_scgs: f64,
    pub mean_ddi_risk: f64,
    pub mean_as_violation: f64,
    pub pharmacist_flags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationBundle {
    pub labels: Vec<String>,
    pub validation_size: usize,
    pub classification: ClassificationReport,
    /// `None` where a class is absent from the validation truth.
    pub roc_auc: Vec<Option<f64>>,
    pub threshold: f64,
    pub flag_rate: f64,
    pub flagged: usize,
    /// Deterministic (dropout off) accuracy on the training half, a sanity check.
    pub train_accuracy: f64,
    pub retrieval: Option<RetrievalMetrics>,
    pub generation: Option<GenerationMetrics>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub roc_curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Deserialize)]
struct JudgmentLine {
    query: String,
    relevant: BTreeSet<String>,
}

#[derive(Deserialize)]
struct ReferenceLine {
    disease: String,
    reference: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<T>, PipelineError> {
    require(path, what)?;
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Runs the retrieval judgments against the system's index.
pub fn judge_retrieval(system: &System, path: &Path) -> Result<RankedJudgments, PipelineError> {
    let lines: Vec<JudgmentLine> = read_jsonl(path, "retrieval judgments")?;
    let rs = system.settings.retrieval;
    let mut queries = Vec::with_capacity(lines.len());
    for l in lines {
        let q = Query::embed(l.query, system.query_embedder())?;
        let hits = search(&system.index, &q.vector, rs.k, rs.min_score, system.exec())?;
        queries.push(JudgedQuery {
            retrieved: hits.hits.into_iter().map(|h| h.id).collect(),
            relevant: l.relevant,
        });
    }
    Ok(RankedJudgments::new(queries)?)
}

pub fn evaluate(
    system: &System,
    dataset: &LabeledDataset,
    training: &TrainingSettings,
    settings: &EvaluationSettings,
) -> Result<EvaluationBundle, PipelineError> {
    let exec = system.exec();
    let model = &system.model;
    let labels = model.labels.names().to_vec();
    let (train, validation) = training.split(dataset)?;
    let val = featurize(&system.preprocessor, &validation, &model.labels, exec)?;
    let mut notes = Vec::new();

    // Cases in parallel, passes sequential inside each case.
    let mcd: McdConfig = system.settings.mcd;
    let diagnoses: Vec<DiagnosisResult> = exec
        .map_slice(&val.features, |x| diagnose(model, x, system.threshold, &mcd, Exec::Sequential))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let predicted: Vec<usize> = diagnoses.iter().map(|d| d.label.index).collect();
    let probs: Vec<Vec<f64>> = diagnoses.iter().map(|d| d.mcd.mean_probs.clone()).collect();
    let classes = labels.len();
    let classification = classification_report(&val.labels, &predicted, classes)?;
    let roc_auc = roc_auc_per_class(&val.labels, &probs, classes)?;
    let roc_curves = (0..classes)
        .map(|c| roc_curve(&val.labels, &probs, classes, c))
        .collect::<Result<Vec<_>, _>>()?;
    let rate = flag_rate(&diagnoses)?;
    let flagged = diagnoses.iter().filter(|d| d.flagged).count();

    let train_feats = featurize(&system.preprocessor, &train, &model.labels, exec)?;
    let train_hits = exec
        .map_slice(&train_feats.features, |x| argmax(&model.forward_fused(x, None)))
        .into_iter()
        .zip(&train_feats.labels)
        .filter(|(p, t)| p == *t)
        .count();
    let train_accuracy = train_hits as f64 / train_feats.len().max(1) as f64;
    if train_accuracy < classification.accuracy {
        notes.push(format!(
            "training accuracy {train_accuracy:.4} is below validation accuracy {:.4}",
            classification.accuracy
        ));
    }

    let retrieval = match &settings.judgments {
        None => {
            notes.push("no retrieval judgments configured; retrieval metrics omitted".into());
            None
        }
        Some(path) => {
            let judged = judge_retrieval(system, path)?;
            if judged.is_empty() {
                notes.push("judged set is empty; retrieval metrics omitted".into());
                None
            } else {
                let k = system.settings.retrieval.k;
                Some(RetrievalMetrics {
                    k,
                    queries: judged.len(),
                    precision_at_k: precision_at_k(&judged, k)?,
                    mrr: mean_reciprocal_rank(&judged)?,
                })
            }
        }
    };

    let generation = match &settings.references {
        None => {
            notes.push("no reference treatments configured; generation metrics omitted".into());
            None
        }
        Some(path) => {
            let refs: BTreeMap<String, String> = read_jsonl::<ReferenceLine>(path, "reference treatments")?
                .into_iter()
                .map(|r| (r.disease.to_lowercase(), r.reference))
                .collect();
            let jobs: Vec<(usize, &String)> = validation
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| !diagnoses[*i].flagged)
                .filter_map(|(i, (_, label))| refs.get(&label.name.to_lowercase()).map(|r| (i, r)))
                .collect();
            let outcomes = exec.map_slice(&jobs, |&(i, reference)| {
                system.complete_case(&validation.records[i].0, diagnoses[i].clone(), Some(reference))
            });
            let scored: Vec<_> = outcomes
                .iter()
                .filter(|o| o.status == CaseStatus::Completed)
                .filter_map(|o| Some((o.scgs.as_ref()?, o.safety.as_ref()?)))
                .collect();
            let failed = outcomes.len() - scored.len();
            if failed > 0 {
                notes.push(format!("{failed} reference case(s) did not complete"));
            }
            if scored.is_empty() {
                notes.push("no completed validation case had a reference; generation metrics omitted".into());
                None
            } else {
                let n = scored.len() as f64;
                let mean = |f: &dyn Fn(&super::ScgsRecord) -> f64| scored.iter().map(|(s, _)| f(s)).sum::<f64>() / n;
                Some(GenerationMetrics {
                    cases: scored.len(),
                    mean_bertscore_f1: mean(&|s| s.bert_f1),
                    mean_scgs: mean(&|s| s.value),
                    mean_ddi_risk: mean(&|s| s.ddi_risk),
                    mean_as_violation: mean(&|s| s.as_violation),
                    pharmacist_flags: scored.iter().filter(|(_, r)| r.pharmacist_flag).count(),
                })
            }
        }
    };

    Ok(EvaluationBundle {
        labels,
        validation_size: val.len(),
        classification,
        roc_auc,
        threshold: system.threshold,
        flag_rate: rate,
        flagged,
        train_accuracy,
        retrieval,
        generation,
        notes,
        roc_curves,
    })
}

/// Writes `report.json`, `classification.txt`, `confusion.csv`, `roc_auc.csv`
/// and `roc_curves.csv` into `dir`.
pub fn write_reports(bundle: &EvaluationBundle, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut text = bundle.classification.to_text(&bundle.labels);
    let _ = writeln!(
        text,
        "\nflag rate {:.4} ({} of {}) at threshold {:.6e}",
        bundle.flag_rate, bundle.flagged, bundle.validation_size, bundle.threshold
    );
    if let Some(r) = &bundle.retrieval {
        let _ = writeln!(text, "P@{} {:.4}  MRR {:.4}  over {} queries", r.k, r.precision_at_k, r.mrr, r.queries);
    }
    if let Some(g) = &bundle.generation {
        let _ = writeln!(
            text,
            "BERTScore-F1 {:.4}  SCGS {:.4}  over {} cases",
            g.mean_bertscore_f1, g.mean_scgs, g.cases
        );
    }
    for n in &bundle.notes {
        let _ = writeln!(text, "note: {n}");
    }

    let mut auc = String::from("class,auc\n");
    for (name, a) in bundle.labels.iter().zip(&bundle.roc_auc) {
        let _ = writeln!(auc, "{},{}", csv_quote(name), a.map_or("absent".to_string(), |v| format!("{v:.6}")));
    }
    let mut curves = String::from("class,fpr,tpr\n");
    for (name, pts) in bundle.labels.iter().zip(&bundle.roc_curves) {
        for (fpr, tpr) in pts {
            let _ = writeln!(curves, "{},{fpr:.6},{tpr:.6}", csv_quote(name));
        }
    }

    let json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    let files = [
        ("report.json", json),
        ("classification.txt", text),
        ("confusion.csv", bundle.classification.confusion.to_csv(&bundle.labels)),
        ("roc_auc.csv", auc),
        ("roc_curves.csv", curves),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
    }
    Ok(written)
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
