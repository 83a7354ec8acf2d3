use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{edit_plan, SafetyError};
use crate::domain::DiseaseLabel;
use crate::generation::{DrugLexicon, TreatmentPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RuleAction {
    Forbid,
    Substitute { with: String },
    RequireFlag,
}

impl RuleAction {
    /// Forbid and substitute change the plan; require_flag only flags it.
    pub fn is_corrective(&self) -> bool {
        !matches!(self, RuleAction::RequireFlag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StewardshipRule {
    pub id: String,
    /// Disease name, or `*` for every diagnosis.
    pub scope: String,
    /// Canonical drug id or drug class.
    pub trigger: String,
    #[serde(flatten)]
    pub action: RuleAction,
    #[serde(default)]
    pub rationale: String,
}

impl StewardshipRule {
    pub fn applies_to(&self, diagnosis: &DiseaseLabel) -> bool {
        self.scope == "*" || self.scope.eq_ignore_ascii_case(&diagnosis.name)
    }

    pub fn matches_drug(&self, drug: &str, lexicon: &DrugLexicon) -> bool {
        self.trigger == drug || lexicon.has_class(drug, &self.trigger)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleSet {
    pub rules: Vec<StewardshipRule>,
}

impl RuleSet {
    /// Rejects duplicate ids, empty scopes/triggers and substitution targets
    /// absent from the lexicon.
    pub fn new(rules: Vec<StewardshipRule>, lexicon: &DrugLexicon) -> Result<Self, SafetyError> {
        let mut ids = HashSet::new();
        for r in &rules {
            if r.id.trim().is_empty() {
                return Err(SafetyError::Rules("rule with empty id".into()));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(SafetyError::Rules(format!("duplicate rule id {}", r.id)));
            }
            if r.scope.trim().is_empty() || r.trigger.trim().is_empty() {
                return Err(SafetyError::Rules(format!("rule {} has an empty scope or trigger", r.id)));
            }
            if let RuleAction::Substitute { with } = &r.action {
                if !lexicon.contains_id(with) || lexicon.display_name(with).is_none() {
                    return Err(SafetyError::Rules(format!(
                        "rule {} substitutes {with}, which is not in the drug lexicon",
                        r.id
                    )));
                }
            }
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str, lexicon: &DrugLexicon) -> Result<Self, SafetyError> {
        let rules: Vec<StewardshipRule> =
            serde_json::from_str(text).map_err(|e| SafetyError::Rules(e.to_string()))?;
        Self::new(rules, lexicon)
    }

    pub fn load(path: &Path, lexicon: &DrugLexicon) -> Result<Self, SafetyError> {
        let bytes = std::fs::read(path).map_err(|source| SafetyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        log::info!(
            "stewardship rules {} crc32={:08x}",
            path.display(),
            crc32fast::hash(&bytes)
        );
        let text = String::from_utf8(bytes).map_err(|_| SafetyError::Rules("file is not UTF-8".into()))?;
        Self::from_json(&text, lexicon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub drug: String,
    pub action: RuleAction,
}

/// Every (rule, plan drug) firing, in rule order then plan order.
pub fn check_stewardship(
    plan: &TreatmentPlan,
    diagnosis: &DiseaseLabel,
    rules: &RuleSet,
    lexicon: &DrugLexicon,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for rule in rules.rules.iter().filter(|r| r.applies_to(diagnosis)) {
        for drug in plan.drug_ids() {
            if rule.matches_drug(drug, lexicon) {
                out.push(Violation {
                    rule_id: rule.id.clone(),
                    drug: drug.to_string(),
                    action: rule.action.clone(),
                });
            }
        }
    }
    out
}

/// Applies forbid (drug removed, text marked `[REMOVED: rule]`) and substitute
/// (drug rewritten to the target, marked `[SUBSTITUTED: rule]`) violations.
/// Forbid takes precedence over substitute for the same drug. Violations on
/// drugs no longer in the plan are ignored, which makes the operation idempotent.
pub fn adjust_antibiotics(
    plan: &TreatmentPlan,
    violations: &[Violation],
    lexicon: &DrugLexicon,
) -> TreatmentPlan {
    let present: HashSet<&str> = plan.drug_ids().collect();
    let mut actions: BTreeMap<String, (String, Option<String>)> = BTreeMap::new();
    for v in violations.iter().filter(|v| v.action == RuleAction::Forbid) {
        if present.contains(v.drug.as_str()) {
            actions.entry(v.drug.clone()).or_insert((v.rule_id.clone(), None));
        }
    }
    for v in violations {
        if let RuleAction::Substitute { with } = &v.action {
            if present.contains(v.drug.as_str()) && *with != v.drug {
                actions
                    .entry(v.drug.clone())
                    .or_insert((v.rule_id.clone(), Some(with.clone())));
            }
        }
    }
    if actions.is_empty() {
        return plan.clone();
    }
    edit_plan(plan, lexicon, |canonical| {
        actions.get(canonical).map(|(rule, target)| match target {
            None => format!("[REMOVED: {rule}]"),
            Some(t) => {
                let name = lexicon.display_name(t).unwrap_or_else(|| t.clone());
                format!("{name} [SUBSTITUTED: {rule}]")
            }
        })
    })
}
