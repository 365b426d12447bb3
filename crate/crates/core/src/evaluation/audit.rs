use serde::{Deserialize, Serialize};

use crate::ingestion::SequenceLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Agree,
    Disagree,
    HeaderUnknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditInput {
    pub series_uid: String,
    pub predicted: SequenceLabel,
    pub probabilities: Vec<f64>,
    /// Label inferred from headers, `None` when the rules found nothing.
    pub header: Option<SequenceLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub series_uid: String,
    pub status: AuditStatus,
    pub predicted: String,
    pub header: Option<String>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub agree: usize,
    pub disagree: usize,
    pub header_unknown: usize,
    pub disagreements: Vec<AuditEntry>,
    pub entries: Vec<AuditEntry>,
}

/// Compares image-based predictions with header-inferred labels.
pub fn audit_consistency(items: &[AuditInput]) -> AuditReport {
    let mut entries: Vec<AuditEntry> = items
        .iter()
        .map(|i| AuditEntry {
            series_uid: i.series_uid.clone(),
            status: match i.header {
                None => AuditStatus::HeaderUnknown,
                Some(h) if h == i.predicted => AuditStatus::Agree,
                Some(_) => AuditStatus::Disagree,
            },
            predicted: i.predicted.value().to_string(),
            header: i.header.map(|h| h.value().to_string()),
            probabilities: i.probabilities.clone(),
        })
        .collect();
    entries.sort_by(|a, b| a.series_uid.cmp(&b.series_uid));
    let count = |s| entries.iter().filter(|e| e.status == s).count();
    AuditReport {
        agree: count(AuditStatus::Agree),
        disagree: count(AuditStatus::Disagree),
        header_unknown: count(AuditStatus::HeaderUnknown),
        disagreements: entries.iter().filter(|e| e.status == AuditStatus::Disagree).cloned().collect(),
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::LabelSet;

    #[test]
    fn three_buckets() {
        let l = |n| LabelSet::Body.parse_label(n).unwrap();
        let items = vec![
            AuditInput { series_uid: "a".into(), predicted: l("T2W"), probabilities: vec![], header: Some(l("T2W")) },
            AuditInput { series_uid: "b".into(), predicted: l("ADC"), probabilities: vec![], header: Some(l("DWI")) },
            AuditInput { series_uid: "c".into(), predicted: l("ADC"), probabilities: vec![], header: None },
        ];
        let r = audit_consistency(&items);
        assert_eq!((r.agree, r.disagree, r.header_unknown), (1, 1, 1));
        assert_eq!(r.disagreements[0].header.as_deref(), Some("DWI"));
        assert_eq!(r.disagreements[0].predicted, "ADC");
    }
}
