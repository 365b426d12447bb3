//! Reading MRI series from disk, header extraction, label inference and
//! study manifests.

pub mod conflicts;
pub mod dicom;
pub mod headers;
pub mod labels;
pub mod manifest;
pub mod nifti;
pub mod rules;
pub mod slices;
pub mod volume;

use std::path::PathBuf;

pub use conflicts::{detect_conflicts, ConflictReport, ConflictRule, ConflictRules, Finding, Severity};
pub use headers::{extract_headers, extract_headers_with, BValueSource, HeaderFields, SliceRecord};
pub use labels::{LabelSet, SequenceLabel};
pub use manifest::{
    build_manifest, load_series, load_volume_file, read_label_sidecar, read_manifest, write_label_sidecar,
    write_manifest, LabelSource, LABELS_FILE, MANIFEST_FILE, RejectedSeries, SeriesEntry, StudyRecord, VolumeLocator,
};
pub use rules::{infer_label_from_headers, LabelRule, RuleTable, TextField};
pub use slices::assemble_series;
pub use volume::{AxisCode, AxisCodes, SeriesVolume};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("slices from different series: {0} and {1}")]
    MixedSeries(String, String),
    #[error("series {series_uid}: slice gap deviates {deviation:.4} mm from median {median:.4} mm")]
    NonUniformGap { series_uid: String, median: f64, deviation: f64 },
    #[error("series {series_uid}: two slices at position {position}")]
    DuplicatePosition { series_uid: String, position: f64 },
    #[error("missing identifier {0}")]
    MissingIdentifier(&'static str),
    #[error("missing attribute {0}")]
    MissingAttribute(String),
    #[error("inconsistent slices: {0}")]
    InconsistentSlices(String),
    #[error("no slices")]
    NoSlices,
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("{path} is not a 3-D volume: {detail}")]
    Not3D { path: PathBuf, detail: String },
    #[error("no studies found under {0}")]
    EmptyDataset(PathBuf),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("bad rule table {path}: {reason}")]
    BadRules { path: PathBuf, reason: String },
    #[error("bad label sidecar {path} line {line}: {reason}")]
    BadSidecar { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
