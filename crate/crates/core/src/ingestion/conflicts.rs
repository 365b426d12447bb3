//! Header consistency rules applied per study.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::headers::HeaderFields;
use super::manifest::StudyRecord;
use super::rules::{infer_label_from_field, RuleTable, TextField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Conflict,
}

/// Rule identifiers; the declaration order is the report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictRule {
    /// (a) body part vs procedure step anatomy keywords disagree.
    AnatomyMismatch,
    /// (b) series description and protocol name imply different labels.
    LabelMismatch,
    /// (c) a required field is absent.
    MissingField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequiredField {
    BodyPartExamined,
    ProcedureStepDescription,
    SeriesDescription,
    ProtocolName,
}

impl RequiredField {
    fn is_present(self, h: &HeaderFields) -> bool {
        let v = match self {
            RequiredField::BodyPartExamined => &h.body_part_examined,
            RequiredField::ProcedureStepDescription => &h.procedure_step_description,
            RequiredField::SeriesDescription => &h.series_description,
            RequiredField::ProtocolName => &h.protocol_name,
        };
        v.as_deref().is_some_and(|s| !s.trim().is_empty())
    }

    fn name(self) -> &'static str {
        match self {
            RequiredField::BodyPartExamined => "body_part_examined",
            RequiredField::ProcedureStepDescription => "procedure_step_description",
            RequiredField::SeriesDescription => "series_description",
            RequiredField::ProtocolName => "protocol_name",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictRules {
    pub anatomy_mismatch: bool,
    pub label_mismatch: bool,
    pub missing_fields: bool,
    pub required_fields: Vec<RequiredField>,
    /// Anatomical lexicon: tokens that place a text in a region. Tokens not
    /// listed here never contribute to a conflict.
    pub regions: Vec<Region>,
    pub label_rules: RuleTable,
}

fn region(name: &str, keywords: &[&str]) -> Region {
    Region {
        name: name.to_string(),
        keywords: keywords.iter().map(|k| k.to_string()).collect(),
    }
}

impl ConflictRules {
    pub fn default_for(label_rules: RuleTable) -> Self {
        Self {
            anatomy_mismatch: true,
            label_mismatch: true,
            missing_fields: true,
            required_fields: vec![
                RequiredField::BodyPartExamined,
                RequiredField::ProcedureStepDescription,
                RequiredField::SeriesDescription,
                RequiredField::ProtocolName,
            ],
            regions: vec![
                region("brain", &["brain", "head", "neuro", "cranial", "skull", "cerebral", "wholebody"]),
                region(
                    "chest",
                    &["chest", "thorax", "thoracic", "lung", "lungs", "breast", "cardiac", "heart", "chestabdomen", "wholebody"],
                ),
                region(
                    "abdomen",
                    &[
                        "abdomen", "abd", "abdominal", "liver", "hepatic", "pancreas", "kidney", "renal",
                        "abdomenpelvis", "chestabdomen", "wholebody",
                    ],
                ),
                region(
                    "pelvis",
                    &["pelvis", "pelvic", "prostate", "uterus", "rectum", "rectal", "bladder", "abdomenpelvis", "wholebody"],
                ),
            ],
            label_rules,
        }
    }

    /// Regions named by a free-text field.
    pub fn regions_in(&self, text: &str) -> BTreeSet<&str> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_ascii_lowercase())
            .collect();
        self.regions
            .iter()
            .filter(|r| r.keywords.iter().any(|k| tokens.iter().any(|t| t == &k.to_ascii_lowercase())))
            .map(|r| r.name.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: ConflictRule,
    pub severity: Severity,
    pub series_uid: String,
    pub fields: Vec<String>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub study_uid: String,
    pub findings: Vec<Finding>,
}

impl ConflictReport {
    pub fn passes(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, severity: Severity) -> usize {
        self.findings.iter().filter(|f| f.severity == severity).count()
    }

    pub fn count_rule(&self, rule: ConflictRule) -> usize {
        self.findings.iter().filter(|f| f.rule == rule).count()
    }
}

impl fmt::Display for ConflictReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "study {}: {} finding(s)", self.study_uid, self.findings.len())?;
        for x in &self.findings {
            writeln!(f, "  [{:?}] {} {}", x.severity, x.series_uid, x.message)?;
        }
        Ok(())
    }
}

fn check_series(h: &HeaderFields, rules: &ConflictRules, out: &mut Vec<Finding>) {
    if rules.anatomy_mismatch {
        if let (Some(body), Some(proc_desc)) = (&h.body_part_examined, &h.procedure_step_description) {
            let a = rules.regions_in(body);
            let b = rules.regions_in(proc_desc);
            if !a.is_empty() && !b.is_empty() && a.is_disjoint(&b) {
                out.push(Finding {
                    rule: ConflictRule::AnatomyMismatch,
                    severity: Severity::Conflict,
                    series_uid: h.series_uid.clone(),
                    fields: vec!["body_part_examined".into(), "procedure_step_description".into()],
                    message: format!("body part '{body}' ({a:?}) disagrees with procedure step '{proc_desc}' ({b:?})"),
                });
            }
        }
    }
    if rules.label_mismatch {
        let by_desc = infer_label_from_field(h, &rules.label_rules, TextField::SeriesDescription);
        let by_proto = infer_label_from_field(h, &rules.label_rules, TextField::ProtocolName);
        if let (Some(a), Some(b)) = (by_desc, by_proto) {
            if a != b {
                out.push(Finding {
                    rule: ConflictRule::LabelMismatch,
                    severity: Severity::Conflict,
                    series_uid: h.series_uid.clone(),
                    fields: vec!["series_description".into(), "protocol_name".into()],
                    message: format!("series description implies {a}, protocol name implies {b}"),
                });
            }
        }
    }
    if rules.missing_fields {
        for f in &rules.required_fields {
            if !f.is_present(h) {
                out.push(Finding {
                    rule: ConflictRule::MissingField,
                    severity: Severity::Warning,
                    series_uid: h.series_uid.clone(),
                    fields: vec![f.name().into()],
                    message: format!("{} is missing", f.name()),
                });
            }
        }
    }
}

/// Applies the enabled rules to every series of a study. Findings are
/// ordered by rule, then series UID.
pub fn detect_conflicts(study: &StudyRecord, rules: &ConflictRules) -> ConflictReport {
    let mut findings = Vec::new();
    for s in &study.series {
        check_series(&s.headers, rules, &mut findings);
    }
    findings.sort_by(|a, b| (a.rule, &a.series_uid).cmp(&(b.rule, &b.series_uid)));
    ConflictReport {
        study_uid: study.study_uid.clone(),
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::manifest::{SeriesEntry, VolumeLocator};

    fn clean(series_uid: &str) -> HeaderFields {
        let mut h = HeaderFields::new("P1", "S1", series_uid);
        h.body_part_examined = Some("ABDOMEN".into());
        h.procedure_step_description = Some("MRI CHEST ABDOMEN PELVIS W WO CONTRAST".into());
        h.series_description = Some("t2_haste_tra".into());
        h.protocol_name = Some("t2_haste_tra_mbh".into());
        h
    }

    fn study(headers: Vec<HeaderFields>) -> StudyRecord {
        StudyRecord {
            patient_id: "P1".into(),
            study_uid: "S1".into(),
            incomplete: false,
            missing_classes: vec![],
            series: headers
                .into_iter()
                .map(|h| SeriesEntry {
                    series_uid: h.series_uid.clone(),
                    headers: h,
                    locator: VolumeLocator::Nifti { path: "x.nii.gz".into() },
                    label: None,
                })
                .collect(),
            rejected: vec![],
        }
    }

    fn rules() -> ConflictRules {
        ConflictRules::default_for(RuleTable::default_body())
    }

    #[test]
    fn brain_vs_abdomen() {
        let mut h = clean("1");
        h.body_part_examined = Some("BRAIN".into());
        h.procedure_step_description = Some("MRI Abdomen".into());
        let r = detect_conflicts(&study(vec![h]), &rules());
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].rule, ConflictRule::AnatomyMismatch);
        assert_eq!(r.findings[0].severity, Severity::Conflict);
    }

    #[test]
    fn consistent_study_passes() {
        let r = detect_conflicts(&study(vec![clean("1"), clean("2")]), &rules());
        assert!(r.passes(), "{r}");
    }

    #[test]
    fn missing_description_warns() {
        let mut h = clean("1");
        h.series_description = None;
        let r = detect_conflicts(&study(vec![h]), &rules());
        assert_eq!(r.count(Severity::Warning), 1);
        assert_eq!(r.count(Severity::Conflict), 0);
    }

    #[test]
    fn label_mismatch() {
        let mut h = clean("1");
        h.protocol_name = Some("ep2d_diff_b50_800".into());
        let r = detect_conflicts(&study(vec![h]), &rules());
        assert_eq!(r.count_rule(ConflictRule::LabelMismatch), 1);
    }

    #[test]
    fn unknown_keywords_never_fire() {
        let mut h = clean("1");
        h.body_part_examined = Some("EXTREMITY".into());
        h.procedure_step_description = Some("MRI knee".into());
        assert!(detect_conflicts(&study(vec![h]), &rules()).passes());
    }

    #[test]
    fn seeded_count_and_order() {
        let mut hs = Vec::new();
        for i in (0..7).rev() {
            let mut h = clean(&format!("1.{i}"));
            if i % 2 == 0 {
                h.body_part_examined = Some("HEAD".into());
            }
            if i == 3 {
                h.protocol_name = None;
            }
            hs.push(h);
        }
        let r = detect_conflicts(&study(hs), &rules());
        assert_eq!(r.count_rule(ConflictRule::AnatomyMismatch), 4);
        assert_eq!(r.count_rule(ConflictRule::MissingField), 1);
        let keys: Vec<_> = r.findings.iter().map(|f| (f.rule, f.series_uid.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(r.findings.last().unwrap().rule, ConflictRule::MissingField);
    }
}
