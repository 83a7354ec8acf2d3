//! Prompt assembly, treatment generation and drug-mention extraction.

pub mod lexicon;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DiseaseLabel, Vitals};
use crate::retrieval::DialogueEntry;

pub use lexicon::{extract_drug_mentions, scan_mentions, DrugLexicon, DrugMention};

pub const DEFAULT_EVIDENCE_BUDGET: usize = 2000;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("drug lexicon: {0}")]
    Lexicon(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("generator unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub entry: DialogueEntry,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub symptoms: String,
    pub vitals: Vitals,
    /// Sorted by score, highest first.
    pub evidence: Vec<Evidence>,
    pub diagnosis: DiseaseLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub beam_size: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            beam_size: 3,
            temperature: 0.7,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanSource {
    BuiltinTemplate,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPlan {
    pub text: String,
    pub drugs: Vec<DrugMention>,
    pub source: PlanSource,
    pub generation_params: GenerationParams,
}

impl TreatmentPlan {
    pub fn drug_ids(&self) -> impl Iterator<Item = &str> {
        self.drugs.iter().map(|d| d.canonical.as_str())
    }

    pub fn from_text(
        text: String,
        source: PlanSource,
        generation_params: GenerationParams,
        lexicon: &DrugLexicon,
    ) -> Self {
        let drugs = extract_drug_mentions(&text, lexicon);
        Self {
            text,
            drugs,
            source,
            generation_params,
        }
    }
}

fn vitals_line(v: &Vitals) -> String {
    let mut parts = Vec::new();
    if let Some(t) = v.temperature {
        parts.push(format!("temperature {t} F"));
    }
    if let Some(s) = v.spo2 {
        parts.push(format!("SpO2 {s}%"));
    }
    if let Some(h) = v.heart_rate {
        parts.push(format!("heart rate {h} bpm"));
    }
    if let Some(a) = v.age {
        parts.push(format!("age {a}"));
    }
    if let Some(s) = v.sex {
        parts.push(format!("sex {}", s.as_str()));
    }
    if parts.is_empty() {
        "(none)".into()
    } else {
        parts.join("; ")
    }
}

fn evidence_line(rank: usize, ev: &Evidence) -> String {
    format!(
        "[{rank}] {} (score {:.4}): {}\n",
        ev.entry.id, ev.score, ev.entry.doctor_response
    )
}

/// Number of leading evidence entries whose rendered lines fit in `budget`
/// characters. Lower-scored entries sit at the end and are dropped first.
pub fn evidence_within_budget(evidence: &[Evidence], budget: usize) -> usize {
    let mut used = 0;
    for (i, ev) in evidence.iter().enumerate() {
        used += evidence_line(i + 1, ev).chars().count();
        if used > budget {
            return i;
        }
    }
    evidence.len()
}

pub fn assemble_prompt(ctx: &PromptContext, evidence_budget: usize) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "DIAGNOSIS: {}", ctx.diagnosis.name);
    let _ = writeln!(p, "SYMPTOMS: {}", ctx.symptoms.trim());
    let _ = writeln!(p, "VITALS: {}", vitals_line(&ctx.vitals));
    p.push_str("EVIDENCE:\n");
    let keep = evidence_within_budget(&ctx.evidence, evidence_budget);
    if keep == 0 {
        p.push_str("(none)\n");
    }
    for (i, ev) in ctx.evidence[..keep].iter().enumerate() {
        p.push_str(&evidence_line(i + 1, ev));
    }
    p
}

fn fallback_table() -> &'static BTreeMap<String, String> {
    static TABLE: OnceLock<BTreeMap<String, String>> = OnceLock::new();
    TABLE.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/fallback_treatments.json"))
            .expect("bundled fallback table is valid JSON")
    })
}

/// Bundled advice line for a disease, matched case-insensitively.
pub fn fallback_line(disease: &str) -> &'static str {
    fallback_table()
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(disease))
        .map(|(_, v)| v.as_str())
        .unwrap_or("Supportive care and clinical review")
}

fn template(disease: &str, response: &str) -> String {
    let body = response.trim().trim_end_matches(['.', ' ']);
    format!("For {disease}: {body}. Follow up with a clinician.")
}

/// Template over the top evidence response, or the bundled line when there is none.
pub fn generate_builtin(ctx: &PromptContext, lexicon: &DrugLexicon) -> TreatmentPlan {
    let disease = &ctx.diagnosis.name;
    let response = match ctx.evidence.first() {
        Some(ev) => ev.entry.doctor_response.as_str(),
        None => fallback_line(disease),
    };
    TreatmentPlan::from_text(
        template(disease, response),
        PlanSource::BuiltinTemplate,
        GenerationParams::default(),
        lexicon,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalGenerator {
    pub url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
}

fn default_timeout_secs() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub beam_size: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: Option<String>,
}

/// Calls the external generator. Any transport error, non-2xx status, or
/// missing/empty `text` is reported as unavailable.
pub fn generate_external(
    ctx: &PromptContext,
    endpoint: &ExternalGenerator,
    params: GenerationParams,
    evidence_budget: usize,
    lexicon: &DrugLexicon,
) -> Result<TreatmentPlan, GenerationError> {
    let unavailable = |e: &dyn std::fmt::Display| GenerationError::Unavailable(e.to_string());
    let request = GenerateRequest {
        prompt: assemble_prompt(ctx, evidence_budget),
        beam_size: params.beam_size,
        temperature: params.temperature,
        max_tokens: params.max_tokens,
    };
    let timeout = Duration::try_from_secs_f64(endpoint.timeout_secs).map_err(|e| unavailable(&e))?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut resp = agent
        .post(&endpoint.url)
        .send_json(&request)
        .map_err(|e| unavailable(&e))?;
    let body: GenerateResponse = resp.body_mut().read_json().map_err(|e| unavailable(&e))?;
    match body.text {
        Some(t) if !t.trim().is_empty() => Ok(TreatmentPlan::from_text(
            t,
            PlanSource::External,
            params,
            lexicon,
        )),
        _ => Err(GenerationError::Unavailable("response has no text".into())),
    }
}
