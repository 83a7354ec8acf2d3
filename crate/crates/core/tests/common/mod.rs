#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safedx_core::classifier::{ClassifierModel, ModelConfig};
use safedx_core::domain::{load_symptom2disease, CsvSchema, LabelSet, LabeledDataset, PatientRecord, Sex, Vitals};
use safedx_core::generation::DrugLexicon;
use safedx_core::pipeline::{ReviewQueue, Settings, System, SystemParts};
use safedx_core::preprocess::{FeaturizerConfig, SynonymDictionary};
use safedx_core::retrieval::{load_corpus, DialogueEntry};
use safedx_core::safety::{DdiDatabase, RuleSet, SafetyConfig, SafetyData};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// `$SYMPTOM2DISEASE_CSV` when set, otherwise the bundled desk file.
pub fn dataset_path() -> PathBuf {
    std::env::var_os("SYMPTOM2DISEASE_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| data_dir().join("symptom2disease_desk.csv"))
}

pub fn desk_dataset() -> LabeledDataset {
    load_symptom2disease(&dataset_path(), &CsvSchema::default()).expect("desk dataset loads")
}

pub fn lexicon() -> DrugLexicon {
    DrugLexicon::load(&data_dir().join("drug_lexicon.json")).expect("lexicon loads")
}

pub fn safety_data() -> SafetyData {
    let lexicon = lexicon();
    let rules = RuleSet::load(&data_dir().join("stewardship_rules.json"), &lexicon).expect("rules load");
    let ddi = DdiDatabase::load(&data_dir().join("ddi.csv")).expect("ddi loads");
    SafetyData {
        lexicon,
        rules,
        ddi,
        config: SafetyConfig::default(),
    }
}

pub fn corpus() -> Vec<DialogueEntry> {
    load_corpus(&data_dir().join("dialogues.jsonl")).expect("corpus loads")
}

/// Randomly initialised model over the desk label set; small hashing space.
pub fn untrained_model(labels: &LabelSet, dimension: usize, dropout_rate: f64, seed: u64) -> ClassifierModel {
    let mut mc = ModelConfig::new(dimension, labels.len());
    mc.dropout_rate = dropout_rate;
    mc.trunk_hidden = 64;
    ClassifierModel::new(
        mc,
        FeaturizerConfig {
            dimension,
            ..Default::default()
        },
        labels.clone(),
        seed,
    )
    .expect("model config is valid")
}

pub fn desk_settings() -> Settings {
    let mut s = Settings::default();
    s.retrieval.min_score = 0.25;
    s.mcd.passes = 10;
    s
}

pub fn system_with(
    model: ClassifierModel,
    threshold: f64,
    settings: Settings,
    corpus: Vec<DialogueEntry>,
    queue: Option<ReviewQueue>,
) -> System {
    System::assemble(SystemParts {
        settings,
        model,
        synonyms: SynonymDictionary::default(),
        threshold,
        corpus,
        index: None,
        query_embedder: None,
        safety: safety_data(),
        queue,
    })
    .expect("system assembles")
}

/// Narrative from the dataset, optionally with an appended drug sentence and
/// random vitals; about one in ten records carries an out-of-range vital.
pub fn random_record<R: Rng>(rng: &mut R, ds: &LabeledDataset, lexicon_words: &[&str], id: String) -> PatientRecord {
    let (base, _) = ds.records.choose(rng).expect("nonempty dataset");
    let mut text = base.symptom_text.clone();
    if rng.gen_bool(0.6) {
        let n = rng.gen_range(1..=3);
        let drugs: Vec<&str> = lexicon_words.choose_multiple(rng, n).copied().collect();
        text.push_str(&format!(" I have been taking {}.", drugs.join(" and ")));
    }
    let mut vitals = Vitals::default();
    if rng.gen_bool(0.5) {
        vitals.temperature = Some(rng.gen_range(95.0..106.0));
    }
    if rng.gen_bool(0.3) {
        vitals.spo2 = Some(rng.gen_range(85.0..100.0));
    }
    if rng.gen_bool(0.3) {
        vitals.heart_rate = Some(rng.gen_range(50.0..140.0));
    }
    if rng.gen_bool(0.3) {
        vitals.age = Some(rng.gen_range(1.0..90.0));
    }
    if rng.gen_bool(0.3) {
        vitals.sex = Some(if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male });
    }
    if rng.gen_bool(0.1) {
        vitals.temperature = Some(rng.gen_range(20.0..40.0));
    }
    PatientRecord {
        id,
        symptom_text: text,
        vitals,
    }
}

pub const DRUG_WORDS: &[&str] = &[
    "ibuprofen",
    "aspirin",
    "naproxen",
    "paracetamol",
    "warfarin",
    "amoxicillin",
    "ciprofloxacin",
    "azithromycin",
    "fluconazole",
    "omeprazole",
    "metformin",
    "doxycycline",
    "prednisone",
    "clarithromycin",
    "simvastatin",
];

/// Invented drug names so the safety fixture cannot collide with the real lexicon.
pub const FIXTURE_DRUGS: [(&str, &[&str]); 10] = [
    ("amberol", &["nsaid"]),
    ("basilin", &["antibiotic"]),
    ("cedramycin", &["antibiotic"]),
    ("deltaprofen", &["nsaid"]),
    ("emberine", &[]),
    ("fjordazole", &["antifungal"]),
    ("grovestatin", &[]),
    ("heronide", &["antibiotic"]),
    ("ivorix", &[]),
    ("jadepril", &[]),
];

pub fn fixture_lexicon() -> DrugLexicon {
    DrugLexicon::from_entries(FIXTURE_DRUGS.iter().map(|(name, classes)| (*name, *name, classes.to_vec())))
        .expect("fixture lexicon is valid")
}

/// Random interaction table over the fixture drugs; pair columns are shuffled
/// so lookups must normalise order.
pub fn fixture_ddi(seed: u64) -> DdiDatabase {
    use safedx_core::safety::Severity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("drug_a,drug_b,severity,note\n");
    for i in 0..FIXTURE_DRUGS.len() {
        for j in i + 1..FIXTURE_DRUGS.len() {
            if rng.gen_bool(0.4) {
                let sev = Severity::ALL[rng.gen_range(0..4)];
                let (a, b) = if rng.gen_bool(0.5) { (i, j) } else { (j, i) };
                csv.push_str(&format!("{},{},{},n{i}{j}\n", FIXTURE_DRUGS[a].0, FIXTURE_DRUGS[b].0, sev.as_str()));
            }
        }
    }
    DdiDatabase::from_csv(csv.as_bytes()).expect("fixture ddi parses")
}

pub fn fixture_rules(lexicon: &DrugLexicon) -> RuleSet {
    RuleSet::from_json(
        r#"[{"id":"R-NSAID","scope":"Dengue","trigger":"nsaid","action":"forbid"},
            {"id":"R-SUB","scope":"*","trigger":"cedramycin","action":"substitute","with":"basilin"},
            {"id":"R-FLAG","scope":"*","trigger":"antifungal","action":"require_flag"}]"#,
        lexicon,
    )
    .expect("fixture rules are valid")
}

pub fn fixture_safety(seed: u64) -> SafetyData {
    let lexicon = fixture_lexicon();
    SafetyData {
        rules: fixture_rules(&lexicon),
        ddi: fixture_ddi(seed),
        lexicon,
        config: SafetyConfig::default(),
    }
}

/// Plan text naming `picks` (indices into the fixture drugs, repeats allowed).
pub fn fixture_plan_text(picks: &[usize]) -> String {
    if picks.is_empty() {
        return "Rest and oral fluids.".into();
    }
    let names: Vec<&str> = picks.iter().map(|&i| FIXTURE_DRUGS[i].0).collect();
    format!("Start {}, review in two days.", names.join(" and "))
}
