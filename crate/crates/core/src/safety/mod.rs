//! Stewardship rules, drug-interaction screening, plan repair and the
//! safety-constrained generation score.

pub mod ddi;
pub mod rules;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DiseaseLabel;
use crate::generation::{scan_mentions, DrugLexicon, TreatmentPlan};

pub use ddi::{
    check_ddi, fix_or_flag, DdiDatabase, DdiFinding, DdiRecord, Disposition, DispositionedFinding,
    DrugPair, FixOutcome, Severity,
};
pub use rules::{adjust_antibiotics, check_stewardship, RuleAction, RuleSet, StewardshipRule, Violation};

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("stewardship rules: {0}")]
    Rules(String),
    #[error("DDI database: {0}")]
    Ddi(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("removal level {removal} is below flag level {flag}")]
    Levels { removal: Severity, flag: Severity },
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfUnitRange { name: &'static str, value: f64 },
}

/// Rewrites every text occurrence of drugs for which `replace` returns text,
/// then re-derives the drug list from the new text. Rewritten drugs never
/// survive, even if the text still names them somewhere unexpected.
pub(crate) fn edit_plan<F>(plan: &TreatmentPlan, lexicon: &DrugLexicon, replace: F) -> TreatmentPlan
where
    F: Fn(&str) -> Option<String>,
{
    let mut text = plan.text.clone();
    for m in scan_mentions(&plan.text, lexicon).into_iter().rev() {
        if let Some(r) = replace(&m.canonical) {
            text.replace_range(m.start..m.end, &r);
        }
    }
    let mut out = TreatmentPlan::from_text(text, plan.source, plan.generation_params, lexicon);
    out.drugs.retain(|d| replace(&d.canonical).is_none());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    pub ddi_risk: f64,
    pub as_violation: f64,
}

/// `ddi_risk`: share of distinct drug pairs at major or above (0 below two
/// drugs). `as_violation`: forbid/substitute firings per plan drug, at most 1.
pub fn compute_risk_terms(
    original: &TreatmentPlan,
    findings: &[DdiFinding],
    violations: &[Violation],
) -> RiskTerms {
    let drugs: HashSet<&str> = original.drug_ids().collect();
    let n = drugs.len();
    let ddi_risk = if n < 2 {
        0.0
    } else {
        let severe: HashSet<&DrugPair> = findings
            .iter()
            .filter(|f| f.severity >= Severity::Major)
            .filter(|f| drugs.contains(f.pair.a.as_str()) && drugs.contains(f.pair.b.as_str()))
            .map(|f| &f.pair)
            .collect();
        severe.len() as f64 / (n * (n - 1) / 2) as f64
    };
    let fired = violations.iter().filter(|v| v.action.is_corrective()).count();
    let as_violation = (fired as f64 / n.max(1) as f64).clamp(0.0, 1.0);
    RiskTerms {
        ddi_risk,
        as_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scgs {
    /// Clamped to [0, 1].
    pub value: f64,
    pub raw: f64,
}

/// `λ·F1 + (1-λ)·(1 - ddi_risk - as_violation)`.
pub fn scgs(bert_f1: f64, ddi_risk: f64, as_violation: f64, lambda: f64) -> Result<Scgs, SafetyError> {
    for (name, value) in [
        ("lambda", lambda),
        ("bert_f1", bert_f1),
        ("ddi_risk", ddi_risk),
        ("as_violation", as_violation),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(SafetyError::OutOfUnitRange { name, value });
        }
    }
    let raw = lambda * bert_f1 + (1.0 - lambda) * (1.0 - ddi_risk - as_violation);
    Ok(Scgs {
        value: raw.clamp(0.0, 1.0),
        raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub removal_level: Severity,
    pub flag_level: Severity,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            removal_level: Severity::Contraindicated,
            flag_level: Severity::Major,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub stewardship_violations: Vec<Violation>,
    pub ddi_findings: Vec<DispositionedFinding>,
    pub adjusted_plan: TreatmentPlan,
    pub pharmacist_flag: bool,
    pub ddi_risk: f64,
    pub as_violation: f64,
}

/// Read-only safety data shared by every case.
#[derive(Debug, Clone)]
pub struct SafetyData {
    pub lexicon: DrugLexicon,
    pub rules: RuleSet,
    pub ddi: DdiDatabase,
    pub config: SafetyConfig,
}

/// The screening steps, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyStage {
    CheckStewardship,
    Adjust,
    CheckDdi,
    FixOrFlag,
    RiskTerms,
}

impl SafetyData {
    /// Stewardship check, adjustment, interaction screening, fix-or-flag and
    /// risk terms, in that order. Risk terms describe the plan as generated.
    pub fn screen(&self, plan: &TreatmentPlan, diagnosis: &DiseaseLabel) -> Result<SafetyReport, SafetyError> {
        self.screen_timed(plan, diagnosis, |_, _| {})
            .map_err(|(_, e)| e)
    }

    /// [`SafetyData::screen`], reporting each finished stage and its duration
    /// to `on_stage`. Errors carry the stage that failed.
    pub fn screen_timed(
        &self,
        plan: &TreatmentPlan,
        diagnosis: &DiseaseLabel,
        mut on_stage: impl FnMut(SafetyStage, Duration),
    ) -> Result<SafetyReport, (SafetyStage, SafetyError)> {
        let mut clock = Instant::now();
        let mut done = |stage| {
            on_stage(stage, clock.elapsed());
            clock = Instant::now();
        };
        let violations = check_stewardship(plan, diagnosis, &self.rules, &self.lexicon);
        done(SafetyStage::CheckStewardship);
        let adjusted = adjust_antibiotics(plan, &violations, &self.lexicon);
        done(SafetyStage::Adjust);
        let original_findings = check_ddi(plan, &self.ddi);
        done(SafetyStage::CheckDdi);
        let fixed = fix_or_flag(
            &adjusted,
            &self.ddi,
            self.config.removal_level,
            self.config.flag_level,
            &self.lexicon,
        )
        .map_err(|e| (SafetyStage::FixOrFlag, e))?;
        done(SafetyStage::FixOrFlag);
        let risk = compute_risk_terms(plan, &original_findings, &violations);
        done(SafetyStage::RiskTerms);
        let rule_flag = violations.iter().any(|v| v.action == RuleAction::RequireFlag);
        Ok(SafetyReport {
            stewardship_violations: violations,
            ddi_findings: fixed.findings,
            adjusted_plan: fixed.plan,
            pharmacist_flag: rule_flag || fixed.pharmacist_flag,
            ddi_risk: risk.ddi_risk,
            as_violation: risk.as_violation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{GenerationParams, PlanSource};

    fn lex() -> DrugLexicon {
        DrugLexicon::from_entries([
            ("a", "a", vec!["x"]),
            ("b", "b", vec!["x"]),
            ("c", "c", vec!["y"]),
            ("nsaids", "nsaid-class-marker", vec!["nsaid"]),
            ("ibuprofen", "ibuprofen", vec!["nsaid"]),
            ("ciprofloxacin", "ciprofloxacin", vec!["antibiotic", "fluoroquinolone"]),
            ("amoxicillin", "amoxicillin", vec!["antibiotic"]),
        ])
        .unwrap()
    }

    fn plan(text: &str) -> TreatmentPlan {
        TreatmentPlan::from_text(text.into(), PlanSource::BuiltinTemplate, GenerationParams::default(), &lex())
    }

    fn db() -> DdiDatabase {
        DdiDatabase::from_csv(
            "drug_a,drug_b,severity,note\nb,a,contraindicated,x\nc,a,contraindicated,y\nb,c,major,z\n".as_bytes(),
        )
        .unwrap()
    }

    fn dengue() -> DiseaseLabel {
        DiseaseLabel {
            index: 0,
            name: "Dengue".into(),
        }
    }

    fn rules() -> RuleSet {
        RuleSet::from_json(
            r#"[{"id":"R1","scope":"Dengue","trigger":"nsaid","action":"forbid"},
                {"id":"R2","scope":"*","trigger":"ciprofloxacin","action":"substitute","with":"amoxicillin"},
                {"id":"R3","scope":"*","trigger":"fluoroquinolone","action":"require_flag"}]"#,
            &lex(),
        )
        .unwrap()
    }

    #[test]
    fn ddi_pairs_normalized() {
        let f = check_ddi(&plan("a, b and c"), &db());
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].pair, DrugPair::new("a", "b"));
        assert_eq!(f[0].pair.a, "a");
        assert!(check_ddi(&plan("only a"), &db()).is_empty());
        assert_eq!(db().lookup("a", "b"), db().lookup("b", "a"));
    }

    #[test]
    fn chain_fixpoint() {
        let out = fix_or_flag(&plan("a, b and c"), &db(), Severity::Contraindicated, Severity::Major, &lex()).unwrap();
        assert_eq!(out.plan.drug_ids().collect::<Vec<_>>(), ["a"]);
        assert!(!out.pharmacist_flag);
        assert!(out.findings.iter().all(|f| f.disposition == Disposition::Removed));
        let again = fix_or_flag(&out.plan, &db(), Severity::Contraindicated, Severity::Major, &lex()).unwrap();
        assert_eq!(again.plan, out.plan);
    }

    #[test]
    fn major_pair_flagged() {
        let out = fix_or_flag(&plan("b with c"), &db(), Severity::Contraindicated, Severity::Major, &lex()).unwrap();
        assert_eq!(out.plan.drugs.len(), 2);
        assert!(out.pharmacist_flag);
        assert_eq!(out.findings[0].disposition, Disposition::Flagged);
    }

    #[test]
    fn bad_levels_rejected() {
        assert!(fix_or_flag(&plan("a"), &db(), Severity::Minor, Severity::Major, &lex()).is_err());
    }

    #[test]
    fn stewardship_forbid_and_substitute() {
        let p = plan("Take ibuprofen and ciprofloxacin.");
        let v = check_stewardship(&p, &dengue(), &rules(), &lex());
        let ids: Vec<_> = v.iter().map(|v| v.rule_id.as_str()).collect();
        assert_eq!(ids, ["R1", "R2", "R3"]);
        let adj = adjust_antibiotics(&p, &v, &lex());
        assert_eq!(adj.text, "Take [REMOVED: R1] and amoxicillin [SUBSTITUTED: R2].");
        assert_eq!(adj.drug_ids().collect::<Vec<_>>(), ["amoxicillin"]);
        assert_eq!(adjust_antibiotics(&adj, &v, &lex()), adj);
        assert_eq!(adjust_antibiotics(&p, &[], &lex()), p);
    }

    #[test]
    fn substitute_target_must_exist() {
        let r = RuleSet::from_json(
            r#"[{"id":"R","scope":"*","trigger":"a","action":"substitute","with":"zzz"}]"#,
            &lex(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn risk_terms_examples() {
        let none = compute_risk_terms(&plan("rest"), &[], &[]);
        assert_eq!((none.ddi_risk, none.as_violation), (0.0, 0.0));
        let two = plan("b and c");
        let r = compute_risk_terms(&two, &check_ddi(&two, &db()), &[]);
        assert_eq!((r.ddi_risk, r.as_violation), (1.0, 0.0));
        let db1 = DdiDatabase::from_csv("drug_a,drug_b,severity,note\na,b,contraindicated,\n".as_bytes()).unwrap();
        let three = plan("a b c");
        let forbid = Violation {
            rule_id: "R".into(),
            drug: "c".into(),
            action: RuleAction::Forbid,
        };
        let r = compute_risk_terms(&three, &check_ddi(&three, &db1), &[forbid]);
        assert!((r.ddi_risk - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.as_violation - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scgs_examples() {
        assert_eq!(scgs(0.8, 0.3, 0.2, 1.0).unwrap().value, 0.8);
        assert_eq!(scgs(0.1, 0.0, 0.0, 0.0).unwrap().value, 1.0);
        assert!((scgs(0.9, 0.2, 0.1, 0.5).unwrap().value - 0.8).abs() < 1e-12);
        let neg = scgs(0.0, 0.9, 0.9, 0.0).unwrap();
        assert_eq!(neg.value, 0.0);
        assert!((neg.raw + 0.8).abs() < 1e-12);
        assert!(scgs(0.5, 0.0, 0.0, 1.5).is_err());
    }

    #[test]
    fn screen_sets_flag_for_require_flag_rule() {
        let data = SafetyData {
            lexicon: lex(),
            rules: rules(),
            ddi: db(),
            config: SafetyConfig::default(),
        };
        let r = data.screen(&plan("ciprofloxacin"), &dengue()).unwrap();
        assert!(r.pharmacist_flag);
        assert_eq!(r.adjusted_plan.drug_ids().collect::<Vec<_>>(), ["amoxicillin"]);
        assert_eq!(r.as_violation, 1.0);
    }
}
