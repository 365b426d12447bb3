use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::IngestError;

/// Normalized DICOM-derived metadata for one series.
///
/// Absent tags are `None`; strings are trimmed and `body_part_examined` is
/// upper-cased. Serialized with every key present, in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderFields {
    pub patient_id: String,
    pub study_uid: String,
    pub series_uid: String,
    pub body_part_examined: Option<String>,
    pub procedure_step_description: Option<String>,
    pub series_description: Option<String>,
    pub protocol_name: Option<String>,
    pub scanner_model: Option<String>,
    /// Diffusion weighting in s/mm².
    pub b_value: Option<f64>,
    pub echo_time_ms: Option<f64>,
    pub repetition_time_ms: Option<f64>,
}

impl HeaderFields {
    pub fn new(patient_id: &str, study_uid: &str, series_uid: &str) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            study_uid: study_uid.to_string(),
            series_uid: series_uid.to_string(),
            body_part_examined: None,
            procedure_step_description: None,
            series_description: None,
            protocol_name: None,
            scanner_model: None,
            b_value: None,
            echo_time_ms: None,
            repetition_time_ms: None,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        for (name, v) in [
            ("PatientID", &self.patient_id),
            ("StudyInstanceUID", &self.study_uid),
            ("SeriesInstanceUID", &self.series_uid),
        ] {
            if v.trim().is_empty() {
                return Err(IngestError::MissingIdentifier(name));
            }
        }
        if let Some(b) = self.b_value {
            if !(b.is_finite() && b >= 0.0) {
                return Err(IngestError::InvalidHeader(format!("b-value {b} is not a non-negative number")));
            }
        }
        for (name, v) in [("echo time", self.echo_time_ms), ("repetition time", self.repetition_time_ms)] {
            if let Some(t) = v {
                if !(t.is_finite() && t > 0.0) {
                    return Err(IngestError::InvalidHeader(format!("{name} {t} is not positive")));
                }
            }
        }
        Ok(())
    }
}

/// One slice's metadata and pixel payload, independent of the file format.
///
/// Attribute keys are DICOM keywords (`SeriesDescription`) for dictionary
/// tags and `GGGG,EEEE` upper-case hex for anything else; multi-valued
/// attributes are backslash-separated as in DICOM.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SliceRecord {
    pub attributes: BTreeMap<String, String>,
    pub rows: usize,
    pub columns: usize,
    /// Stored values, row-major (`rows x columns`), before rescale.
    pub pixels: Vec<f64>,
    pub source: Option<PathBuf>,
}

impl SliceRecord {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes
            .get(key)
            .map(|s| s.trim_matches(|c: char| c.is_whitespace() || c == '\0'))
            .filter(|s| !s.is_empty())
    }

    pub fn attr_numbers(&self, key: &str) -> Option<Vec<f64>> {
        let raw = self.attr(key)?;
        raw.split('\\').map(|p| p.trim().parse::<f64>().ok()).collect()
    }

    pub fn attr_number(&self, key: &str) -> Option<f64> {
        self.attr_numbers(key).and_then(|v| v.first().copied())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.attributes.insert(key.to_string(), value.into());
        self
    }
}

/// Where a b-value may be stored, tried in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BValueSource {
    /// (0018,9087) DiffusionBValue.
    Standard,
    /// Siemens (0019,100C).
    Siemens,
    /// GE (0043,1039), first value; values ≥ 1e9 carry a 1e9 offset.
    Ge,
    /// Philips (2001,1003).
    Philips,
}

pub const DEFAULT_BVALUE_RULES: [BValueSource; 4] =
    [BValueSource::Standard, BValueSource::Siemens, BValueSource::Ge, BValueSource::Philips];

impl BValueSource {
    pub fn key(self) -> &'static str {
        match self {
            BValueSource::Standard => "DiffusionBValue",
            BValueSource::Siemens => "0019,100C",
            BValueSource::Ge => "0043,1039",
            BValueSource::Philips => "2001,1003",
        }
    }

    fn read(self, rec: &SliceRecord) -> Option<f64> {
        let v = rec.attr_number(self.key())?;
        let v = match self {
            BValueSource::Ge if v >= 1e9 => v - 1e9,
            _ => v,
        };
        (v.is_finite() && v >= 0.0).then_some(v)
    }
}

fn text(rec: &SliceRecord, key: &str) -> Option<String> {
    rec.attr(key).map(|s| s.trim().to_string())
}

fn positive(rec: &SliceRecord, key: &str) -> Option<f64> {
    rec.attr_number(key).filter(|v| v.is_finite() && *v > 0.0)
}

/// Reads the normalized header fields from one slice record.
pub fn extract_headers(rec: &SliceRecord) -> Result<HeaderFields, IngestError> {
    extract_headers_with(rec, &DEFAULT_BVALUE_RULES)
}

pub fn extract_headers_with(rec: &SliceRecord, bvalue_rules: &[BValueSource]) -> Result<HeaderFields, IngestError> {
    let id = |key: &'static str| text(rec, key).ok_or(IngestError::MissingIdentifier(key));
    let h = HeaderFields {
        patient_id: id("PatientID")?,
        study_uid: id("StudyInstanceUID")?,
        series_uid: id("SeriesInstanceUID")?,
        body_part_examined: text(rec, "BodyPartExamined").map(|s| s.to_ascii_uppercase()),
        procedure_step_description: ["PerformedProcedureStepDescription", "ScheduledProcedureStepDescription", "RequestedProcedureDescription"]
            .iter()
            .find_map(|k| text(rec, k)),
        series_description: text(rec, "SeriesDescription"),
        protocol_name: text(rec, "ProtocolName"),
        scanner_model: text(rec, "ManufacturerModelName"),
        b_value: bvalue_rules.iter().find_map(|r| r.read(rec)),
        echo_time_ms: positive(rec, "EchoTime"),
        repetition_time_ms: positive(rec, "RepetitionTime"),
    };
    h.validate()?;
    Ok(h)
}
