//! Header-based label inference: an ordered rule table where the first
//! matching rule wins and no match means "unknown".

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::headers::HeaderFields;
use super::labels::{LabelSet, SequenceLabel};
use super::IngestError;

/// Free-text header fields a rule can search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextField {
    SeriesDescription,
    ProtocolName,
}

impl TextField {
    fn get(self, h: &HeaderFields) -> Option<&str> {
        match self {
            TextField::SeriesDescription => h.series_description.as_deref(),
            TextField::ProtocolName => h.protocol_name.as_deref(),
        }
    }
}

fn default_fields() -> Vec<TextField> {
    vec![TextField::SeriesDescription, TextField::ProtocolName]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub label: String,
    /// Case-insensitive substrings; any one matching is enough.
    #[serde(default)]
    pub patterns: Vec<String>,
    #[serde(default = "default_fields")]
    pub fields: Vec<TextField>,
    /// When set (or when a bound is set) the header must carry a b-value.
    #[serde(default)]
    pub requires_b_value: bool,
    #[serde(default)]
    pub b_value_min: Option<f64>,
    #[serde(default)]
    pub b_value_max: Option<f64>,
}

impl LabelRule {
    fn new(label: &str, patterns: &[&str]) -> Self {
        Self {
            label: label.to_string(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            fields: default_fields(),
            requires_b_value: false,
            b_value_min: None,
            b_value_max: None,
        }
    }

    fn has_b_predicate(&self) -> bool {
        self.requires_b_value || self.b_value_min.is_some() || self.b_value_max.is_some()
    }

    fn text_matches(&self, h: &HeaderFields, fields: &[TextField]) -> bool {
        if self.patterns.is_empty() {
            return true;
        }
        fields.iter().filter(|f| self.fields.contains(f)).filter_map(|f| f.get(h)).any(|text| {
            let text = text.to_lowercase();
            self.patterns.iter().any(|p| text.contains(&p.to_lowercase()))
        })
    }

    fn b_matches(&self, h: &HeaderFields) -> bool {
        if !self.has_b_predicate() {
            return true;
        }
        match h.b_value {
            None => false,
            Some(b) => self.b_value_min.is_none_or(|lo| b >= lo) && self.b_value_max.is_none_or(|hi| b <= hi),
        }
    }

    /// True when this rule, considered on its own, accepts the header.
    pub fn matches(&self, h: &HeaderFields) -> bool {
        self.matches_on(h, &[TextField::SeriesDescription, TextField::ProtocolName])
    }

    fn matches_on(&self, h: &HeaderFields, fields: &[TextField]) -> bool {
        self.text_matches(h, fields) && self.b_matches(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    pub label_set: LabelSet,
    pub rules: Vec<LabelRule>,
}

impl RuleTable {
    /// Default body-profile table. Order matters: ADC before DWI (ADC maps
    /// are often named after their diffusion series), T2FS before T2W, and
    /// the b-value-only DWI rule last.
    pub fn default_body() -> Self {
        let mut dwi_by_b = LabelRule::new("DWI", &[]);
        dwi_by_b.requires_b_value = true;
        Self {
            label_set: LabelSet::Body,
            rules: vec![
                LabelRule::new("ADC", &["adc", "apparent diff"]),
                LabelRule::new("DWI", &["ep2d_diff", "dwi", "diffusion", "trace", "resolve"]),
                LabelRule::new("T2FS", &["t2_tse_fs", "t2fs", "t2_fs", "t2 fs", "stir", "spair", "t2_blade_fs"]),
                LabelRule::new("T2W", &["t2_tse", "t2_haste", "haste", "t2w", "t2_blade", "t2_"]),
                LabelRule::new("VDCE", &["venous", "vibe", "dce", "portal", "t1_post"]),
                dwi_by_b,
            ],
        }
    }

    pub fn default_brain() -> Self {
        Self {
            label_set: LabelSet::Brain,
            rules: vec![
                LabelRule::new("FLAIR", &["flair"]),
                LabelRule::new("T1CE", &["t1ce", "t1_post", "t1+c", "t1c", "gad", "contrast"]),
                LabelRule::new("T1", &["t1"]),
                LabelRule::new("T2", &["t2"]),
            ],
        }
    }

    pub fn default_for(label_set: LabelSet) -> Self {
        match label_set {
            LabelSet::Body => Self::default_body(),
            LabelSet::Brain => Self::default_brain(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, r) in self.rules.iter().enumerate() {
            if self.label_set.parse_label(&r.label).is_none() {
                return Err(format!("rule {i}: '{}' is not a {} class", r.label, self.label_set));
            }
            if r.fields.is_empty() && !r.patterns.is_empty() {
                return Err(format!("rule {i}: patterns given but no fields to search"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let table: RuleTable = toml::from_str(text).map_err(|e| e.to_string())?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let bad = |reason: String| IngestError::BadRules {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        Self::from_toml_str(&text).map_err(bad)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("rule tables serialize")
    }

    fn first_match(&self, h: &HeaderFields, fields: &[TextField]) -> Option<SequenceLabel> {
        self.rules
            .iter()
            .find(|r| r.matches_on(h, fields))
            .and_then(|r| self.label_set.parse_label(&r.label))
    }
}

/// First matching rule wins; `None` when nothing matches (never guesses).
pub fn infer_label_from_headers(h: &HeaderFields, table: &RuleTable) -> Option<SequenceLabel> {
    table.first_match(h, &[TextField::SeriesDescription, TextField::ProtocolName])
}

/// Inference restricted to a single text field; b-value predicates still apply.
pub fn infer_label_from_field(h: &HeaderFields, table: &RuleTable, field: TextField) -> Option<SequenceLabel> {
    field.get(h)?;
    table
        .rules
        .iter()
        .filter(|r| !r.patterns.is_empty())
        .find(|r| r.matches_on(h, &[field]))
        .and_then(|r| table.label_set.parse_label(&r.label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(desc: &str) -> HeaderFields {
        let mut h = HeaderFields::new("P", "S", "X");
        h.series_description = Some(desc.to_string());
        h
    }

    #[test]
    fn body_examples() {
        let t = RuleTable::default_body();
        assert_eq!(infer_label_from_headers(&header("t2_tse_tra"), &t).unwrap().value(), "T2W");
        let mut h = header("ep2d_diff_b800");
        h.b_value = Some(800.0);
        assert_eq!(infer_label_from_headers(&h, &t).unwrap().value(), "DWI");
        assert_eq!(infer_label_from_headers(&header("localizer"), &t), None);
    }

    #[test]
    fn ordering_resolves_overlaps() {
        let t = RuleTable::default_body();
        assert_eq!(infer_label_from_headers(&header("t2_tse_fs_tra"), &t).unwrap().value(), "T2FS");
        assert_eq!(infer_label_from_headers(&header("ep2d_diff_tra_ADC"), &t).unwrap().value(), "ADC");
        assert_eq!(infer_label_from_headers(&header("t1_vibe_fs_tra_venous"), &t).unwrap().value(), "VDCE");
        let mut h = HeaderFields::new("P", "S", "X");
        h.b_value = Some(50.0);
        assert_eq!(infer_label_from_headers(&h, &t).unwrap().value(), "DWI");
    }

    #[test]
    fn protocol_name_is_searched() {
        let t = RuleTable::default_body();
        let mut h = HeaderFields::new("P", "S", "X");
        h.protocol_name = Some("T2_HASTE_COR".into());
        assert_eq!(infer_label_from_headers(&h, &t).unwrap().value(), "T2W");
        assert_eq!(infer_label_from_field(&h, &t, TextField::SeriesDescription), None);
        assert_eq!(infer_label_from_field(&h, &t, TextField::ProtocolName).unwrap().value(), "T2W");
    }

    #[test]
    fn b_value_bounds() {
        let mut t = RuleTable::default_body();
        t.rules.insert(
            0,
            LabelRule {
                b_value_min: Some(1000.0),
                ..LabelRule::new("ADC", &["special"])
            },
        );
        let mut h = header("special");
        h.b_value = Some(999.0);
        // Falls through to the b-value-only DWI rule.
        assert_eq!(infer_label_from_headers(&h, &t).unwrap().value(), "DWI");
        h.b_value = None;
        assert_eq!(infer_label_from_headers(&h, &t), None);
        h.b_value = Some(1000.0);
        assert_eq!(infer_label_from_headers(&h, &t).unwrap().value(), "ADC");
    }

    /// For every rule, a header built from one of its patterns that no other
    /// rule accepts maps to that rule's label.
    #[test]
    fn every_rule_is_reachable() {
        for table in [RuleTable::default_body(), RuleTable::default_brain()] {
            for (i, rule) in table.rules.iter().enumerate() {
                let candidates: Vec<HeaderFields> = if rule.patterns.is_empty() {
                    let mut h = HeaderFields::new("P", "S", "X");
                    h.b_value = Some(0.0);
                    vec![h]
                } else {
                    rule.patterns.iter().map(|p| header(p)).collect()
                };
                let h = candidates
                    .into_iter()
                    .find(|h| table.rules.iter().enumerate().all(|(j, r)| (j == i) == r.matches(h)))
                    .unwrap_or_else(|| panic!("rule {i} ({}) has no isolated pattern", rule.label));
                assert_eq!(infer_label_from_headers(&h, &table).unwrap().value(), rule.label);
            }
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let t = RuleTable::default_brain();
        let back = RuleTable::from_toml_str(&t.to_toml_string()).unwrap();
        assert_eq!(back, t);
        let bad = "label_set = \"body\"\n[[rules]]\nlabel = \"FLAIR\"\npatterns = [\"flair\"]\n";
        assert!(RuleTable::from_toml_str(bad).unwrap_err().contains("FLAIR"));
        let unknown = "label_set = \"body\"\n[[rules]]\nlabel = \"ADC\"\npatern = [\"x\"]\n";
        assert!(RuleTable::from_toml_str(unknown).is_err());
    }
}
