//! End-to-end case handling: classify, triage, retrieve, generate, screen.
//!
//! [`System::run_case`] is fail-closed. A stage error produces a
//! [`CaseStatus::Failed`] outcome that names the stage and carries no plan,
//! and a plan is only ever attached together with its safety report.

pub mod evaluate;
pub mod queue;
pub mod training;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, checkpoint, ClassifierError, ClassifierModel, DiagnosisResult, McdConfig};
use crate::domain::{DataError, PatientRecord};
use crate::exec::Exec;
use crate::generation::{
    assemble_prompt, generate_builtin, generate_external, DrugLexicon, Evidence, ExternalGenerator,
    GenerationError, GenerationParams, PlanSource, PromptContext, TreatmentPlan,
    DEFAULT_EVIDENCE_BUDGET,
};
use crate::metrics::{bertscore_f1, HashingTokenEmbedder, MetricsError};
use crate::preprocess::{PreprocessError, Preprocessor, SynonymDictionary};
use crate::retrieval::{
    self, build_index, construct_query, load_corpus, load_external_embeddings, search, DialogueEntry,
    EmbeddingIndex, Embedder, EntryText, HashingEmbedder, Hit, HttpEmbedder, Query, RetrievalError,
    RetrievalResult,
};
use crate::safety::{scgs, DdiDatabase, RuleSet, SafetyConfig, SafetyData, SafetyError, SafetyReport, SafetyStage};

pub use evaluate::{evaluate, write_reports, EvaluationBundle, EvaluationSettings};
pub use queue::{
    LabelDecision, PlanDecision, QueueError, Resolution, ReviewItem, ReviewQueue, ReviewStatus,
};
pub use training::{fit, CalibrationRecord, FitOutput, TrainingSettings};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {what}: {path}")]
    MissingArtifact { what: &'static str, path: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("safety: {0}")]
    Safety(#[from] SafetyError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("review queue: {0}")]
    Queue(#[from] QueueError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Bad input data or configuration, as opposed to an environment or
    /// service failure.
    pub fn is_data_error(&self) -> bool {
        match self {
            PipelineError::Io { .. } | PipelineError::Queue(QueueError::Io { .. }) => false,
            PipelineError::Retrieval(RetrievalError::Embedder(_) | RetrievalError::Io { .. }) => false,
            PipelineError::Generation(GenerationError::Unavailable(_) | GenerationError::Io { .. }) => false,
            PipelineError::Data(DataError::Io { .. }) => false,
            PipelineError::Classifier(ClassifierError::Io { .. } | ClassifierError::Diverged { .. }) => false,
            _ => true,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn require(path: &Path, what: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            what,
            path: path.display().to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub k: usize,
    pub min_score: f64,
    pub entry_text: EntryText,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            k: 5,
            min_score: 0.7,
            entry_text: EntryText::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    /// Builtin template generator when absent.
    pub external: Option<ExternalGenerator>,
    pub params: GenerationParams,
}

/// How query text becomes a vector. Must match the encoder behind the index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueryEmbedderSettings {
    #[default]
    Builtin,
    Http {
        url: String,
        #[serde(default = "default_embed_timeout")]
        timeout_secs: f64,
    },
}

fn default_embed_timeout() -> f64 {
    10.0
}

/// Runtime knobs shared by every case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub mcd: McdConfig,
    pub retrieval: RetrievalSettings,
    pub lambda: f64,
    pub generator: GeneratorSettings,
    pub evidence_budget: usize,
    pub safety: SafetyConfig,
    pub target_flag_rate: f64,
    /// Disable data-parallel loops.
    pub sequential: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            mcd: McdConfig::default(),
            retrieval: RetrievalSettings::default(),
            lambda: 0.5,
            generator: GeneratorSettings::default(),
            evidence_budget: DEFAULT_EVIDENCE_BUDGET,
            safety: SafetyConfig::default(),
            target_flag_rate: 0.18,
            sequential: false,
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.mcd.passes < 1 {
            return bad("mcd.passes must be >= 1".into());
        }
        if self.retrieval.k < 1 {
            return bad("retrieval.k must be >= 1".into());
        }
        if !(-1.0..=1.0).contains(&self.retrieval.min_score) {
            return bad(format!("retrieval.min_score {} outside [-1, 1]", self.retrieval.min_score));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.target_flag_rate > 0.0 && self.target_flag_rate < 1.0) {
            return bad(format!("target_flag_rate {} outside (0, 1)", self.target_flag_rate));
        }
        if self.safety.removal_level < self.safety.flag_level {
            return bad(format!(
                "safety.removal_level {} is below flag_level {}",
                self.safety.removal_level, self.safety.flag_level
            ));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// Config file contents. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    /// Precomputed entry embeddings; the index is built from the corpus when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub query_embedder: Option<QueryEmbedderSettings>,
    pub rules: PathBuf,
    pub ddi: PathBuf,
    pub lexicon: PathBuf,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
    /// Triage threshold; read from `calibration` when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default)]
    pub queue_journal: Option<PathBuf>,
    #[serde(flatten)]
    pub settings: Settings,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
}

impl SystemConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: SystemConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.settings.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        require(path, "config file")?;
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.model,
            &mut self.corpus,
            &mut self.rules,
            &mut self.ddi,
            &mut self.lexicon,
            &mut self.evaluation.output_dir,
        ] {
            fix(p);
        }
        for p in [
            &mut self.embeddings,
            &mut self.synonyms,
            &mut self.calibration,
            &mut self.queue_journal,
            &mut self.training.dataset,
            &mut self.training.history_csv,
            &mut self.evaluation.judgments,
            &mut self.evaluation.references,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn load_synonyms(&self) -> Result<SynonymDictionary, PipelineError> {
        match &self.synonyms {
            Some(p) => {
                require(p, "synonym dictionary")?;
                Ok(SynonymDictionary::load(p)?)
            }
            None => Ok(SynonymDictionary::default()),
        }
    }

    pub fn load_safety(&self) -> Result<SafetyData, PipelineError> {
        require(&self.lexicon, "drug lexicon")?;
        require(&self.rules, "stewardship rules")?;
        require(&self.ddi, "DDI database")?;
        let lexicon = DrugLexicon::load(&self.lexicon)?;
        let rules = RuleSet::load(&self.rules, &lexicon)?;
        let ddi = DdiDatabase::load(&self.ddi)?;
        Ok(SafetyData {
            lexicon,
            rules,
            ddi,
            config: self.settings.safety,
        })
    }

    /// Explicit threshold, else the calibration file.
    pub fn resolve_threshold(&self) -> Result<f64, PipelineError> {
        if let Some(t) = self.threshold {
            return Ok(t);
        }
        let Some(path) = &self.calibration else {
            return Err(PipelineError::Config(
                "no triage threshold: set `threshold` or `calibration` and run calibrate".into(),
            ));
        };
        require(path, "calibration file (run calibrate first)")?;
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let rec: CalibrationRecord =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Ok(rec.threshold)
    }
}

/// Pipeline steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Classify,
    Enqueue,
    ConstructQuery,
    Search,
    AssemblePrompt,
    Generate,
    CheckStewardship,
    Adjust,
    CheckDdi,
    FixOrFlag,
    RiskTerms,
    Score,
}

impl From<SafetyStage> for Stage {
    fn from(s: SafetyStage) -> Self {
        match s {
            SafetyStage::CheckStewardship => Stage::CheckStewardship,
            SafetyStage::Adjust => Stage::Adjust,
            SafetyStage::CheckDdi => Stage::CheckDdi,
            SafetyStage::FixOrFlag => Stage::FixOrFlag,
            SafetyStage::RiskTerms => Stage::RiskTerms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Completed,
    Flagged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScgsRecord {
    pub bert_f1: f64,
    pub ddi_risk: f64,
    pub as_violation: f64,
    pub lambda: f64,
    pub value: f64,
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseProvenance {
    pub index: retrieval::Provenance,
    pub query: Option<String>,
    pub evidence: Vec<Hit>,
    /// Evidence entries that fit the prompt budget.
    pub evidence_in_prompt: usize,
    pub prompt: Option<String>,
    pub generator: Option<PlanSource>,
    pub model_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub status: CaseStatus,
    pub diagnosis: Option<DiagnosisResult>,
    /// Empty when the case stopped before retrieval.
    pub retrieval: RetrievalResult,
    /// The plan as generated; set only together with `safety`.
    pub plan: Option<TreatmentPlan>,
    pub safety: Option<SafetyReport>,
    pub scgs: Option<ScgsRecord>,
    pub timings: Vec<StageTiming>,
    pub provenance: CaseProvenance,
    pub incidents: Vec<String>,
    pub failure: Option<StageFailure>,
}

impl CaseOutcome {
    /// The safety-adjusted plan, the only one fit to show.
    pub fn final_plan(&self) -> Option<&TreatmentPlan> {
        match (&self.plan, &self.safety) {
            (Some(_), Some(s)) => Some(&s.adjusted_plan),
            _ => None,
        }
    }

    pub fn ran(&self, stage: Stage) -> bool {
        self.timings.iter().any(|t| t.stage == stage)
    }

    /// No plan without a safety report.
    pub fn is_fail_closed(&self) -> bool {
        self.plan.is_none() || self.safety.is_some()
    }

    /// Copy with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> CaseOutcome {
        let mut c = self.clone();
        for t in &mut c.timings {
            t.micros = 0;
        }
        c
    }

    fn fail(mut self, stage: Stage, err: impl std::fmt::Display) -> Self {
        self.status = CaseStatus::Failed;
        self.plan = None;
        self.safety = None;
        self.scgs = None;
        self.failure = Some(StageFailure {
            stage,
            message: err.to_string(),
        });
        self
    }
}

struct Clock(Vec<StageTiming>);

impl Clock {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.push(stage, start.elapsed());
        out
    }

    fn push(&mut self, stage: Stage, d: Duration) {
        self.0.push(StageTiming {
            stage,
            micros: d.as_micros().min(u64::MAX as u128) as u64,
        });
    }
}

/// Everything a case needs, loaded once and shared read-only.
pub struct System {
    pub settings: Settings,
    pub model: ClassifierModel,
    pub preprocessor: Preprocessor,
    pub threshold: f64,
    pub index: EmbeddingIndex,
    corpus: HashMap<String, DialogueEntry>,
    query_embedder: Box<dyn Embedder>,
    pub safety: SafetyData,
    pub queue: Option<ReviewQueue>,
    model_crc32: u32,
}

impl std::fmt::Debug for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System")
            .field("labels", &self.model.labels.len())
            .field("index", &self.index.len())
            .field("threshold", &self.threshold)
            .finish_non_exhaustive()
    }
}

/// In-memory ingredients for [`System::assemble`].
pub struct SystemParts {
    pub settings: Settings,
    pub model: ClassifierModel,
    pub synonyms: SynonymDictionary,
    pub threshold: f64,
    pub corpus: Vec<DialogueEntry>,
    /// Built from the corpus with the model's featurizer when absent.
    pub index: Option<EmbeddingIndex>,
    /// The model's featurizer when absent.
    pub query_embedder: Option<Box<dyn Embedder>>,
    pub safety: SafetyData,
    pub queue: Option<ReviewQueue>,
}

impl System {
    pub fn load(config_path: &Path) -> Result<Self, PipelineError> {
        Self::from_config(&SystemConfig::load(config_path)?)
    }

    pub fn from_config(cfg: &SystemConfig) -> Result<Self, PipelineError> {
        require(&cfg.model, "model checkpoint (run train first)")?;
        require(&cfg.corpus, "dialogue corpus")?;
        let model = checkpoint::load(&cfg.model)?;
        let threshold = cfg.resolve_threshold()?;
        let corpus = load_corpus(&cfg.corpus)?;
        let index = match &cfg.embeddings {
            Some(p) => {
                require(p, "embeddings file")?;
                Some(load_external_embeddings(p)?)
            }
            None => None,
        };
        let query_embedder: Option<Box<dyn Embedder>> = match (&cfg.query_embedder, &cfg.embeddings) {
            (Some(QueryEmbedderSettings::Http { url, timeout_secs }), _) => {
                let dimension = index.as_ref().map_or(model.featurizer.dimension, |i| i.dimension());
                let timeout = Duration::try_from_secs_f64(*timeout_secs)
                    .map_err(|e| PipelineError::Config(format!("query_embedder.timeout_secs: {e}")))?;
                Some(Box::new(HttpEmbedder {
                    url: url.clone(),
                    dimension,
                    timeout,
                }))
            }
            (None, Some(p)) => {
                return Err(PipelineError::Config(format!(
                    "embeddings file {} needs a query_embedder matching its encoder \
                     (\"builtin\" if it was written by index-build)",
                    p.display()
                )))
            }
            _ => None,
        };
        let queue = match &cfg.queue_journal {
            Some(p) => Some(ReviewQueue::open(p)?),
            None => None,
        };
        Self::assemble(SystemParts {
            settings: cfg.settings.clone(),
            model,
            synonyms: cfg.load_synonyms()?,
            threshold,
            corpus,
            index,
            query_embedder,
            safety: cfg.load_safety()?,
            queue,
        })
    }

    pub fn assemble(parts: SystemParts) -> Result<Self, PipelineError> {
        parts.settings.validate()?;
        if parts.threshold.is_nan() {
            return Err(PipelineError::Config("threshold is NaN".into()));
        }
        let preprocessor = Preprocessor::new(parts.model.featurizer.clone())?.with_synonyms(parts.synonyms);
        let query_embedder = parts
            .query_embedder
            .unwrap_or_else(|| Box::new(HashingEmbedder::new(preprocessor.clone())));
        let index = match parts.index {
            Some(i) => i,
            None => build_index(&parts.corpus, query_embedder.as_ref(), parts.settings.retrieval.entry_text)?,
        };
        if index.dimension() != query_embedder.dimension() {
            return Err(PipelineError::Config(format!(
                "index dimension {} differs from query embedder dimension {}",
                index.dimension(),
                query_embedder.dimension()
            )));
        }
        let mut corpus = HashMap::with_capacity(parts.corpus.len());
        for e in parts.corpus {
            corpus.insert(e.id.clone(), e);
        }
        if let Some(missing) = index.ids().iter().find(|id| !corpus.contains_key(*id)) {
            return Err(PipelineError::Config(format!(
                "index entry {missing} has no dialogue in the corpus"
            )));
        }
        let model_crc32 = crc32fast::hash(&checkpoint::encode(&parts.model));
        let mut safety = parts.safety;
        safety.config = parts.settings.safety;
        Ok(Self {
            settings: parts.settings,
            model: parts.model,
            preprocessor,
            threshold: parts.threshold,
            index,
            corpus,
            query_embedder,
            safety,
            queue: parts.queue,
            model_crc32,
        })
    }

    pub fn exec(&self) -> Exec {
        self.settings.exec()
    }

    pub fn dialogue(&self, id: &str) -> Option<&DialogueEntry> {
        self.corpus.get(id)
    }

    pub fn query_embedder(&self) -> &dyn Embedder {
        self.query_embedder.as_ref()
    }

    pub fn diagnose(&self, record: &PatientRecord) -> Result<DiagnosisResult, ClassifierError> {
        classifier::classify(
            &self.model,
            &self.preprocessor,
            record,
            self.threshold,
            &self.settings.mcd,
            self.exec(),
        )
    }

    pub fn run_case(&self, record: &PatientRecord) -> CaseOutcome {
        self.run_case_with_reference(record, None)
    }

    /// With a reference treatment the outcome also carries the SCGS inputs and value.
    pub fn run_case_with_reference(&self, record: &PatientRecord, reference: Option<&str>) -> CaseOutcome {
        self.run(record, None, reference, true)
    }

    /// Continues from an existing diagnosis without touching the review queue.
    pub(crate) fn complete_case(
        &self,
        record: &PatientRecord,
        diagnosis: DiagnosisResult,
        reference: Option<&str>,
    ) -> CaseOutcome {
        self.run(record, Some(diagnosis), reference, false)
    }

    fn run(
        &self,
        record: &PatientRecord,
        known: Option<DiagnosisResult>,
        reference: Option<&str>,
        enqueue: bool,
    ) -> CaseOutcome {
        let rs = &self.settings.retrieval;
        let mut clock = Clock(Vec::new());
        let mut out = CaseOutcome {
            case_id: record.id.clone(),
            status: CaseStatus::Completed,
            diagnosis: None,
            retrieval: RetrievalResult::empty(rs.k, rs.min_score),
            plan: None,
            safety: None,
            scgs: None,
            timings: Vec::new(),
            provenance: CaseProvenance {
                index: self.index.provenance,
                query: None,
                evidence: Vec::new(),
                evidence_in_prompt: 0,
                prompt: None,
                generator: None,
                model_crc32: self.model_crc32,
            },
            incidents: Vec::new(),
            failure: None,
        };
        let result = self.stages(record, known, reference, enqueue, &mut clock, &mut out);
        out.timings = clock.0;
        match result {
            Ok(()) => out,
            Err((stage, msg)) => out.fail(stage, msg),
        }
    }

    fn stages(
        &self,
        record: &PatientRecord,
        known: Option<DiagnosisResult>,
        reference: Option<&str>,
        enqueue: bool,
        clock: &mut Clock,
        out: &mut CaseOutcome,
    ) -> Result<(), (Stage, String)> {
        let at = |stage: Stage| move |e: &dyn std::fmt::Display| (stage, e.to_string());

        clock
            .time(Stage::Validate, || record.validate())
            .map_err(|e| at(Stage::Validate)(&e))?;

        let diagnosis = match known {
            Some(d) => d,
            None => clock
                .time(Stage::Classify, || self.diagnose(record))
                .map_err(|e| at(Stage::Classify)(&e))?,
        };
        out.diagnosis = Some(diagnosis.clone());

        if diagnosis.flagged {
            out.status = CaseStatus::Flagged;
            if enqueue {
                if let Some(queue) = &self.queue {
                    let snapshot = out.clone();
                    clock
                        .time(Stage::Enqueue, || queue.enqueue(snapshot))
                        .map_err(|e| at(Stage::Enqueue)(&e))?;
                }
            }
            return Ok(());
        }

        let query = clock.time(Stage::ConstructQuery, || construct_query(&diagnosis.label, record));
        out.provenance.query = Some(query.clone());

        let retrieval = clock
            .time(Stage::Search, || {
                let q = Query::embed(query, self.query_embedder.as_ref())?;
                search(&self.index, &q.vector, self.settings.retrieval.k, self.settings.retrieval.min_score, self.exec())
            })
            .map_err(|e| at(Stage::Search)(&e))?;
        out.provenance.evidence = retrieval.hits.clone();
        out.retrieval = retrieval;

        let evidence: Vec<Evidence> = out
            .retrieval
            .hits
            .iter()
            .map(|h| Evidence {
                entry: self.corpus[&h.id].clone(),
                score: h.score,
            })
            .collect();
        let ctx = PromptContext {
            symptoms: record.symptom_text.clone(),
            vitals: record.vitals.clone(),
            evidence,
            diagnosis: diagnosis.label.clone(),
        };
        let budget = self.settings.evidence_budget;
        let prompt = clock.time(Stage::AssemblePrompt, || assemble_prompt(&ctx, budget));
        out.provenance.evidence_in_prompt = crate::generation::evidence_within_budget(&ctx.evidence, budget);
        out.provenance.prompt = Some(prompt);

        let lex = &self.safety.lexicon;
        let plan = clock.time(Stage::Generate, || match &self.settings.generator.external {
            None => generate_builtin(&ctx, lex),
            Some(endpoint) => {
                match generate_external(&ctx, endpoint, self.settings.generator.params, budget, lex) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("case {}: external generator failed, using builtin: {e}", record.id);
                        out.incidents.push(format!("external generator failed, builtin used: {e}"));
                        generate_builtin(&ctx, lex)
                    }
                }
            }
        });
        out.provenance.generator = Some(plan.source);

        let report = self
            .safety
            .screen_timed(&plan, &diagnosis.label, |stage, d| clock.push(stage.into(), d))
            .map_err(|(stage, e)| (Stage::from(stage), e.to_string()))?;

        if let Some(reference) = reference {
            let record = clock
                .time(Stage::Score, || -> Result<ScgsRecord, String> {
                    let f1 = bertscore_f1(&report.adjusted_plan.text, reference, &HashingTokenEmbedder::default())
                        .map_err(|e| e.to_string())?;
                    let s = scgs(f1, report.ddi_risk, report.as_violation, self.settings.lambda)
                        .map_err(|e| e.to_string())?;
                    Ok(ScgsRecord {
                        bert_f1: f1,
                        ddi_risk: report.ddi_risk,
                        as_violation: report.as_violation,
                        lambda: self.settings.lambda,
                        value: s.value,
                        raw: s.raw,
                    })
                })
                .map_err(|e| (Stage::Score, e))?;
            out.scgs = Some(record);
        }

        out.plan = Some(plan);
        out.safety = Some(report);
        Ok(())
    }
}
