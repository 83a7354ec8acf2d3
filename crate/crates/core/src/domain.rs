//! Patient records, label sets and dataset ingestion for the symptom/label CSV format.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("stratification error: class '{class}' has {count} record(s), need at least 2")]
    Stratification { class: String, count: usize },
    #[error("invalid train fraction {0}; must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("vital '{field}' = {value} outside [{min}, {max}]")]
    VitalOutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    #[default]
    Unspecified,
}

impl Sex {
    pub fn parse(s: &str) -> Option<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Some(Sex::Male),
            "female" | "f" => Some(Sex::Female),
            "" | "unspecified" | "unknown" | "u" => Some(Sex::Unspecified),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unspecified => "unspecified",
        }
    }
}

/// Valid ranges for the numeric vitals, shared with the vitals encoder.
pub const TEMPERATURE_RANGE: (f64, f64) = (90.0, 110.0);
pub const SPO2_RANGE: (f64, f64) = (50.0, 100.0);
pub const HEART_RATE_RANGE: (f64, f64) = (20.0, 250.0);
pub const AGE_RANGE: (f64, f64) = (0.0, 120.0);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vitals {
    /// Degrees Fahrenheit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Percent oxygen saturation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spo2: Option<f64>,
    /// Beats per minute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
}

impl Vitals {
    pub fn validate(&self) -> Result<(), DataError> {
        let checks: [(&'static str, Option<f64>, (f64, f64)); 4] = [
            ("temperature", self.temperature, TEMPERATURE_RANGE),
            ("spo2", self.spo2, SPO2_RANGE),
            ("heart_rate", self.heart_rate, HEART_RATE_RANGE),
            ("age", self.age, AGE_RANGE),
        ];
        for (field, value, (min, max)) in checks {
            if let Some(v) = value {
                if !v.is_finite() || v < min || v > max {
                    return Err(DataError::VitalOutOfRange {
                        field,
                        value: v,
                        min,
                        max,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.temperature.is_none()
            && self.spo2.is_none()
            && self.heart_rate.is_none()
            && self.age.is_none()
            && matches!(self.sex, None | Some(Sex::Unspecified))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub symptom_text: String,
    #[serde(default)]
    pub vitals: Vitals,
}

impl PatientRecord {
    pub fn new(
        id: impl Into<String>,
        symptom_text: impl Into<String>,
        vitals: Vitals,
    ) -> Result<Self, DataError> {
        let record = Self {
            id: id.into(),
            symptom_text: symptom_text.into(),
            vitals,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.symptom_text.trim().is_empty() {
            return Err(DataError::InvalidRecord(format!(
                "record '{}' has empty symptom text",
                self.id
            )));
        }
        self.vitals.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiseaseLabel {
    pub index: usize,
    pub name: String,
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Ordered class names. Indices follow byte-wise lexicographic order of the names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self {
            names: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn label(&self, index: usize) -> Option<DiseaseLabel> {
        self.names.get(index).map(|name| DiseaseLabel {
            index,
            name: name.clone(),
        })
    }

    pub fn by_name(&self, name: &str) -> Option<DiseaseLabel> {
        self.index_of(name).and_then(|i| self.label(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub records: Vec<(PatientRecord, DiseaseLabel)>,
    pub label_set: LabelSet,
}

impl LabeledDataset {
    pub fn new(
        records: Vec<(PatientRecord, DiseaseLabel)>,
        label_set: LabelSet,
    ) -> Result<Self, DataError> {
        let mut ids = HashSet::new();
        for (rec, label) in &records {
            if label_set.label(label.index).as_ref() != Some(label) {
                return Err(DataError::InvalidRecord(format!(
                    "label {} ('{}') not in label set",
                    label.index, label.name
                )));
            }
            if !ids.insert(rec.id.as_str()) {
                return Err(DataError::InvalidRecord(format!(
                    "duplicate record id '{}'",
                    rec.id
                )));
            }
        }
        Ok(Self { records, label_set })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for (_, label) in &self.records {
            counts[label.index] += 1;
        }
        counts
    }

    /// Writes the dataset in the CSV layout understood by [`load_symptom2disease`]
    /// with `id` and vitals columns.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |e: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.into()))?;
        w.write_record(["id", "label", "text", "temperature", "spo2", "heart_rate", "age", "sex"])
            .map_err(|e| io_err(e.into()))?;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (rec, label) in &self.records {
            let v = &rec.vitals;
            w.write_record([
                rec.id.clone(),
                label.name.clone(),
                rec.symptom_text.clone(),
                num(v.temperature),
                num(v.spo2),
                num(v.heart_rate),
                num(v.age),
                v.sex.map(|s| s.as_str().to_string()).unwrap_or_default(),
            ])
            .map_err(|e| io_err(e.into()))?;
        }
        w.flush().map_err(io_err)
    }
}

/// Column mapping for the CSV loader.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub text_column: String,
    /// When absent, records are named `row-<n>` after their 1-based data row.
    #[serde(default)]
    pub id_column: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            text_column: "text".into(),
            id_column: None,
        }
    }
}

const VITAL_COLUMNS: [&str; 5] = ["temperature", "spo2", "heart_rate", "age", "sex"];
const IDENTIFYING_COLUMNS: [&str; 10] = [
    "name",
    "patient_name",
    "full_name",
    "ssn",
    "mrn",
    "address",
    "phone",
    "email",
    "dob",
    "date_of_birth",
];

/// Loads a `label,text` CSV (optionally with vitals columns).
///
/// Row numbers in errors are 1-based and count data rows only.
pub fn load_symptom2disease(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);

    for h in headers.iter() {
        if IDENTIFYING_COLUMNS.contains(&h.trim().to_ascii_lowercase().as_str()) {
            return Err(DataError::Schema(format!(
                "refusing identifying column '{}'",
                h.trim()
            )));
        }
    }
    let label_col = find(&schema.label_column)
        .ok_or_else(|| DataError::Schema(format!("missing column '{}'", schema.label_column)))?;
    let text_col = find(&schema.text_column)
        .ok_or_else(|| DataError::Schema(format!("missing column '{}'", schema.text_column)))?;
    let id_col = match &schema.id_column {
        Some(name) => Some(
            find(name).ok_or_else(|| DataError::Schema(format!("missing column '{name}'")))?,
        ),
        None => None,
    };
    let vital_cols: Vec<Option<usize>> = VITAL_COLUMNS.iter().map(|c| find(c)).collect();

    let mut raw = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::Row {
            row: row_no,
            message: e.to_string(),
        })?;
        let cell = |c: usize| row.get(c).unwrap_or("").trim();
        let text = cell(text_col);
        if text.is_empty() {
            return Err(DataError::Row {
                row: row_no,
                message: "empty symptom text".into(),
            });
        }
        let label = cell(label_col);
        if label.is_empty() {
            return Err(DataError::Row {
                row: row_no,
                message: "empty label".into(),
            });
        }
        let vitals = parse_vitals(&vital_cols, &row).map_err(|message| DataError::Row {
            row: row_no,
            message,
        })?;
        let id = match id_col {
            Some(c) => cell(c).to_string(),
            None => format!("row-{row_no}"),
        };
        let record = PatientRecord {
            id,
            symptom_text: text.to_string(),
            vitals,
        };
        record.validate().map_err(|e| DataError::Row {
            row: row_no,
            message: e.to_string(),
        })?;
        raw.push((record, label.to_string()));
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    let label_set = LabelSet::from_names(raw.iter().map(|(_, l)| l.clone()));
    let records = raw
        .into_iter()
        .map(|(rec, name)| {
            let label = label_set.by_name(&name).expect("label collected above");
            (rec, label)
        })
        .collect();
    LabeledDataset::new(records, label_set)
}

fn parse_vitals(cols: &[Option<usize>], row: &csv::StringRecord) -> Result<Vitals, String> {
    let get = |k: usize| cols[k].and_then(|c| row.get(c)).map(str::trim).unwrap_or("");
    let num = |k: usize| -> Result<Option<f64>, String> {
        let s = get(k);
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| format!("vital '{}' is not a number: '{s}'", VITAL_COLUMNS[k]))
    };
    let sex = match get(4) {
        "" => None,
        s => Some(Sex::parse(s).ok_or_else(|| format!("unrecognised sex value '{s}'"))?),
    };
    Ok(Vitals {
        temperature: num(0)?,
        spo2: num(1)?,
        heart_rate: num(2)?,
        age: num(3)?,
        sex,
    })
}

/// Per-class seeded split. Each class sends `round(fraction * n_c)` records to
/// training and the rest to validation; both halves keep input order.
pub fn stratified_split(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction(train_fraction));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.label_set.len()];
    for (i, (_, label)) in ds.records.iter().enumerate() {
        by_class[label.index].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(DataError::Stratification {
                class: ds.label_set.names()[class].clone(),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, pair) in ds.records.iter().enumerate() {
        if in_train[i] {
            train.push(pair.clone());
        } else {
            val.push(pair.clone());
        }
    }
    Ok((
        LabeledDataset {
            records: train,
            label_set: ds.label_set.clone(),
        },
        LabeledDataset {
            records: val,
            label_set: ds.label_set.clone(),
        },
    ))
}
