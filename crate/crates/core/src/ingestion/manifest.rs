//! Dataset manifests: one [`StudyRecord`] per study, JSON-lines on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::dicom::{is_dicom_file, read_dicom_file};
use super::headers::{HeaderFields, SliceRecord};
use super::labels::{LabelSet, SequenceLabel};
use super::nifti::read_nifti;
use super::rules::{infer_label_from_headers, RuleTable};
use super::slices::assemble_series;
use super::volume::SeriesVolume;
use super::IngestError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

/// Where a series' voxels live, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VolumeLocator {
    Nifti { path: String },
    Dicom { paths: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub series_uid: String,
    pub headers: HeaderFields,
    pub locator: VolumeLocator,
    pub label: Option<SequenceLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedSeries {
    pub series_uid: String,
    pub reason: String,
}

/// One imaging study. Key order on disk follows field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    pub study_uid: String,
    /// Set when some class of the active profile has no labeled series.
    pub incomplete: bool,
    pub missing_classes: Vec<String>,
    pub series: Vec<SeriesEntry>,
    pub rejected: Vec<RejectedSeries>,
}

impl StudyRecord {
    /// Recomputes `incomplete`/`missing_classes` for a profile.
    pub fn flag_missing(&mut self, label_set: LabelSet) {
        self.missing_classes = label_set
            .classes()
            .iter()
            .filter(|c| !self.series.iter().any(|s| s.label.is_some_and(|l| l.value() == **c)))
            .map(|c| c.to_string())
            .collect();
        self.incomplete = !self.missing_classes.is_empty();
    }
}

/// How ground-truth labels are attached while building a manifest.
#[derive(Clone, Debug)]
pub enum LabelSource {
    Rules(RuleTable),
    /// series_uid -> label, e.g. loaded with [`read_label_sidecar`].
    Sidecar { label_set: LabelSet, labels: HashMap<String, SequenceLabel> },
}

impl LabelSource {
    pub fn label_set(&self) -> LabelSet {
        match self {
            LabelSource::Rules(t) => t.label_set,
            LabelSource::Sidecar { label_set, .. } => *label_set,
        }
    }

    fn label_for(&self, h: &HeaderFields) -> Option<SequenceLabel> {
        match self {
            LabelSource::Rules(t) => infer_label_from_headers(h, t),
            LabelSource::Sidecar { labels, .. } => labels.get(&h.series_uid).copied(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarLine {
    series_uid: String,
    label: String,
}

/// Reads `{"series_uid": "...", "label": "T2FS"}` lines.
pub fn read_label_sidecar(path: &Path, label_set: LabelSet) -> Result<HashMap<String, SequenceLabel>, IngestError> {
    let bad = |line: usize, reason: String| IngestError::BadSidecar {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = fs::File::open(path).map_err(|e| bad(0, e.to_string()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        let label = label_set
            .parse_label(&rec.label)
            .ok_or_else(|| bad(i + 1, format!("'{}' is not a {label_set} class", rec.label)))?;
        out.insert(rec.series_uid, label);
    }
    Ok(out)
}

pub fn write_label_sidecar(path: &Path, labels: &[(String, SequenceLabel)]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (uid, label) in labels {
        let line = SidecarLine {
            series_uid: uid.clone(),
            label: label.value().to_string(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn dir_name(p: Option<&Path>) -> String {
    p.and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Per-directory scan result before labels are applied.
struct Scanned {
    series: Vec<SeriesEntry>,
    rejected: Vec<(Option<(String, String)>, RejectedSeries)>,
}

fn scan_dir(root: &Path, dir: &Path, files: &[PathBuf]) -> Scanned {
    let mut series = Vec::new();
    let mut rejected = Vec::new();
    let mut dicom: Vec<SliceRecord> = Vec::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = nifti_stem(&name) {
            let sidecar = dir.join(format!("{stem}.json"));
            let headers = if sidecar.exists() {
                fs::read_to_string(&sidecar)
                    .map_err(|e| e.to_string())
                    .and_then(|t| serde_json::from_str::<HeaderFields>(&t).map_err(|e| e.to_string()))
                    .and_then(|h| h.validate().map(|_| h).map_err(|e| e.to_string()))
            } else {
                Ok(HeaderFields::new(&dir_name(dir.parent()), &dir_name(Some(dir)), stem))
            };
            match headers {
                Ok(h) => series.push(SeriesEntry {
                    series_uid: h.series_uid.clone(),
                    headers: h,
                    locator: VolumeLocator::Nifti { path: relative(root, f) },
                    label: None,
                }),
                Err(reason) => {
                    log::warn!("rejecting {}: bad header sidecar: {reason}", f.display());
                    rejected.push((
                        None,
                        RejectedSeries {
                            series_uid: stem.to_string(),
                            reason: format!("{}: {reason}", relative(root, &sidecar)),
                        },
                    ));
                }
            }
        } else if name.ends_with(".json") || name.ends_with(".jsonl") {
            continue;
        } else if is_dicom_file(f) {
            match read_dicom_file(f) {
                Ok(rec) => dicom.push(rec),
                Err(e) => {
                    log::warn!("rejecting {}: {e}", f.display());
                    rejected.push((
                        None,
                        RejectedSeries {
                            series_uid: String::new(),
                            reason: format!("{}: {e}", relative(root, f)),
                        },
                    ));
                }
            }
        }
    }

    let mut groups: BTreeMap<String, Vec<SliceRecord>> = BTreeMap::new();
    for rec in dicom {
        let uid = rec.attr("SeriesInstanceUID").unwrap_or("").to_string();
        groups.entry(uid).or_default().push(rec);
    }
    for (uid, slices) in groups {
        let owner = slices
            .first()
            .and_then(|s| Some((s.attr("PatientID")?.to_string(), s.attr("StudyInstanceUID")?.to_string())));
        match assemble_series(&slices) {
            Ok((_, h)) => {
                let mut paths: Vec<String> =
                    slices.iter().filter_map(|s| s.source.as_ref()).map(|p| relative(root, p)).collect();
                paths.sort();
                series.push(SeriesEntry {
                    series_uid: h.series_uid.clone(),
                    headers: h,
                    locator: VolumeLocator::Dicom { paths },
                    label: None,
                });
            }
            Err(e) => {
                log::warn!("rejecting series {uid} in {}: {e}", dir.display());
                rejected.push((owner, RejectedSeries { series_uid: uid, reason: e.to_string() }));
            }
        }
    }
    Scanned { series, rejected }
}

/// Scans `root` for study directories (any directory holding NIfTI volumes
/// or DICOM files) and builds one record per (patient, study). Records are
/// ordered by `(patient_id, study_uid)`, series by UID.
pub fn build_manifest(root: &Path, labels: &LabelSource) -> Result<Vec<StudyRecord>, IngestError> {
    if !root.is_dir() {
        return Err(IngestError::UnreadableFile {
            path: root.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let mut by_dir: BTreeMap<PathBuf, Vec<PathBuf>> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| IngestError::UnreadableFile {
            path: root.to_path_buf(),
            reason: e.to_string(),
        })?;
        if entry.file_type().is_file() {
            let p = entry.into_path();
            if let Some(parent) = p.parent() {
                by_dir.entry(parent.to_path_buf()).or_default().push(p);
            }
        }
    }
    let scanned: Vec<(PathBuf, Scanned)> = by_dir
        .into_par_iter()
        .map(|(dir, files)| {
            let s = scan_dir(root, &dir, &files);
            (dir, s)
        })
        .collect();

    let label_set = labels.label_set();
    let mut studies: BTreeMap<(String, String), StudyRecord> = BTreeMap::new();
    let mut orphans = Vec::new();
    for (dir, s) in scanned {
        for mut entry in s.series {
            entry.label = labels.label_for(&entry.headers);
            let key = (entry.headers.patient_id.clone(), entry.headers.study_uid.clone());
            studies
                .entry(key.clone())
                .or_insert_with(|| StudyRecord {
                    patient_id: key.0,
                    study_uid: key.1,
                    incomplete: false,
                    missing_classes: vec![],
                    series: vec![],
                    rejected: vec![],
                })
                .series
                .push(entry);
        }
        for (owner, rej) in s.rejected {
            let key = owner.unwrap_or_else(|| (dir_name(dir.parent()), dir_name(Some(&dir))));
            orphans.push((key, rej));
        }
    }
    for (key, rej) in orphans {
        match studies.get_mut(&key) {
            Some(study) => study.rejected.push(rej),
            None => log::warn!("series rejected outside any study: {} ({})", rej.series_uid, rej.reason),
        }
    }
    if studies.is_empty() {
        return Err(IngestError::EmptyDataset(root.to_path_buf()));
    }
    let mut out: Vec<StudyRecord> = studies.into_values().collect();
    for study in &mut out {
        study.series.sort_by(|a, b| a.series_uid.cmp(&b.series_uid));
        study.rejected.sort_by(|a, b| (&a.series_uid, &a.reason).cmp(&(&b.series_uid, &b.reason)));
        study.flag_missing(label_set);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, studies: &[StudyRecord]) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for s in studies {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<StudyRecord>, IngestError> {
    let bad = |reason: String| IngestError::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Loads a single-volume file and canonicalizes it to RAS.
pub fn load_volume_file(path: &Path) -> Result<SeriesVolume, IngestError> {
    Ok(read_nifti(path)?.canonicalize())
}

/// Loads the voxels behind a manifest entry, canonicalized to RAS.
pub fn load_series(root: &Path, locator: &VolumeLocator) -> Result<SeriesVolume, IngestError> {
    match locator {
        VolumeLocator::Nifti { path } => load_volume_file(&root.join(path)),
        VolumeLocator::Dicom { paths } => {
            let slices = paths
                .iter()
                .map(|p| read_dicom_file(&root.join(p)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(assemble_series(&slices)?.0.canonicalize())
        }
    }
}
