use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{edit_plan, SafetyError};
use crate::generation::{DrugLexicon, TreatmentPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Moderate,
    Major,
    Contraindicated,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::Minor,
        Severity::Moderate,
        Severity::Major,
        Severity::Contraindicated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Minor => "minor",
            Severity::Moderate => "moderate",
            Severity::Major => "major",
            Severity::Contraindicated => "contraindicated",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = SafetyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Severity::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SafetyError::Ddi(format!("unknown severity {s:?}")))
    }
}

/// Drug pair stored with the lexicographically smaller id first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DrugPair {
    pub a: String,
    pub b: String,
}

impl DrugPair {
    pub fn new(x: &str, y: &str) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Self {
            a: a.to_string(),
            b: b.to_string(),
        }
    }

    pub fn contains(&self, drug: &str) -> bool {
        self.a == drug || self.b == drug
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdiRecord {
    pub pair: DrugPair,
    pub severity: Severity,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DdiDatabase {
    records: Vec<DdiRecord>,
    index: HashMap<DrugPair, usize>,
}

#[derive(Deserialize)]
struct CsvRow {
    drug_a: String,
    drug_b: String,
    severity: String,
    #[serde(default)]
    note: String,
}

impl DdiDatabase {
    pub fn new(records: Vec<DdiRecord>) -> Result<Self, SafetyError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.pair.a == r.pair.b {
                return Err(SafetyError::Ddi(format!("record {} pairs {} with itself", i + 1, r.pair.a)));
            }
            if index.insert(r.pair.clone(), i).is_some() {
                return Err(SafetyError::Ddi(format!(
                    "duplicate pair ({}, {})",
                    r.pair.a, r.pair.b
                )));
            }
        }
        Ok(Self { records, index })
    }

    /// CSV with header `drug_a,drug_b,severity,note`.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self, SafetyError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| SafetyError::Ddi(format!("row {}: {e}", i + 2)))?;
            let (a, b) = (row.drug_a.trim(), row.drug_b.trim());
            if a.is_empty() || b.is_empty() {
                return Err(SafetyError::Ddi(format!("row {}: empty drug id", i + 2)));
            }
            records.push(DdiRecord {
                pair: DrugPair::new(a, b),
                severity: row.severity.parse()?,
                note: row.note,
            });
        }
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        let bytes = std::fs::read(path).map_err(|source| SafetyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        log::info!("DDI database {} crc32={:08x}", path.display(), crc32fast::hash(&bytes));
        Self::from_csv(bytes.as_slice())
    }

    pub fn records(&self) -> &[DdiRecord] {
        &self.records
    }

    pub fn lookup(&self, x: &str, y: &str) -> Option<&DdiRecord> {
        self.index.get(&DrugPair::new(x, y)).map(|&i| &self.records[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdiFinding {
    pub pair: DrugPair,
    pub severity: Severity,
    pub note: String,
}

/// Looks up every unordered pair of distinct plan drugs, in plan order.
pub fn check_ddi(plan: &TreatmentPlan, db: &DdiDatabase) -> Vec<DdiFinding> {
    let drugs: Vec<&str> = plan.drug_ids().collect();
    let mut out = Vec::new();
    for i in 0..drugs.len() {
        for j in i + 1..drugs.len() {
            if drugs[i] == drugs[j] {
                continue;
            }
            if let Some(r) = db.lookup(drugs[i], drugs[j]) {
                out.push(DdiFinding {
                    pair: r.pair.clone(),
                    severity: r.severity,
                    note: r.note.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Removed,
    Flagged,
    /// Below the flag level; kept without review.
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionedFinding {
    pub pair: DrugPair,
    pub severity: Severity,
    pub note: String,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixOutcome {
    pub plan: TreatmentPlan,
    pub pharmacist_flag: bool,
    pub findings: Vec<DispositionedFinding>,
}

/// While some pair is at or above `removal_level`, drops the later-listed drug
/// of the first such pair. Surviving pairs at or above `flag_level` are flagged.
pub fn fix_or_flag(
    plan: &TreatmentPlan,
    db: &DdiDatabase,
    removal_level: Severity,
    flag_level: Severity,
    lexicon: &DrugLexicon,
) -> Result<FixOutcome, SafetyError> {
    if removal_level < flag_level {
        return Err(SafetyError::Levels {
            removal: removal_level,
            flag: flag_level,
        });
    }
    let original = check_ddi(plan, db);
    let mut current = plan.clone();
    loop {
        let drugs: Vec<&str> = current.drug_ids().collect();
        let mut victim = None;
        'scan: for i in 0..drugs.len() {
            for j in i + 1..drugs.len() {
                if db
                    .lookup(drugs[i], drugs[j])
                    .is_some_and(|r| r.severity >= removal_level)
                {
                    victim = Some(drugs[j].to_string());
                    break 'scan;
                }
            }
        }
        let Some(victim) = victim else { break };
        // edit_plan always drops the victim, so the drug count strictly falls.
        current = edit_plan(&current, lexicon, |c| {
            (c == victim).then(|| format!("[REMOVED: interaction {removal_level}]"))
        });
    }
    let remaining: Vec<&str> = current.drug_ids().collect();
    let mut flag = false;
    let findings = original
        .into_iter()
        .map(|f| {
            let disposition = if !remaining.contains(&f.pair.a.as_str()) || !remaining.contains(&f.pair.b.as_str())
            {
                Disposition::Removed
            } else if f.severity >= flag_level {
                flag = true;
                Disposition::Flagged
            } else {
                Disposition::Accepted
            };
            DispositionedFinding {
                pair: f.pair,
                severity: f.severity,
                note: f.note,
                disposition,
            }
        })
        .collect();
    Ok(FixOutcome {
        plan: current,
        pharmacist_flag: flag,
        findings,
    })
}
