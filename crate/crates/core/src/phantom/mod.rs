//! Synthetic multi-parametric studies with sequence-specific intensity
//! signatures over a shared per-study anatomy.
//!
//! Randomness: every study draws from a ChaCha8 stream keyed by
//! SplitMix64 expansions of `(seed, FNV-1a(patient_id), study_index)`, and
//! each series from a sub-stream of that, so datasets are reproducible
//! across platforms and independent of generation order.

mod anatomy;
mod render;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingestion::manifest::{write_label_sidecar, write_manifest, LABELS_FILE, MANIFEST_FILE};
use crate::ingestion::nifti::write_nifti;
use crate::ingestion::{HeaderFields, LabelSet, SeriesEntry, SeriesVolume, StudyRecord, VolumeLocator};
use crate::rng::{derive_seed, hash_str, SeededRng};

pub use anatomy::{Anatomy, Tissue, TISSUES};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 3 patients for a patient-level split, got {0}")]
    TooFewPatients(usize),
    #[error("cannot write {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
}

/// DWI signal model `S0 * exp(-b * ADC)` per tissue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diffusion {
    /// Apparent diffusion coefficient per tissue (fat..lesion), mm^2/s.
    pub adc: [f64; 6],
    /// Candidate b-value ranges (s/mm^2); each study uses a random subset.
    pub b_ranges: Vec<[f64; 2]>,
    /// Inclusive range for the number of b-values per study.
    pub count: [usize; 2],
    /// Drawn b-values are rounded to a multiple of this.
    pub b_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub label: String,
    /// Mean intensity per tissue, in the order fat, muscle, organ, fluid,
    /// vessel, lesion (for DWI: the b = 0 signal).
    pub tissue: [f64; 6],
    pub background_mean: f64,
    pub background_sigma: f64,
    /// Noise standard deviation relative to the brightest tissue.
    pub noise_sigma: f64,
    /// Magnitude (Rician) noise instead of clamped Gaussian noise.
    pub rician: bool,
    /// Correlation length of the multiplicative texture, in voxels.
    pub texture_granularity: f64,
    pub texture_amplitude: f64,
    pub lesion_multiplier: f64,
    pub diffusion: Option<Diffusion>,
    pub series_description: String,
    pub protocol_name: String,
    pub echo_time_ms: f64,
    pub repetition_time_ms: f64,
}

/// Renders some volumes of `source` with the signature of `target`,
/// making them indistinguishable by design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardMode {
    pub source: String,
    pub target: String,
    /// Only volumes with b-value at most this are affected.
    pub b_max: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub label_set: LabelSet,
    pub signatures: Vec<ClassSignature>,
    /// Lesions per study (inclusive); lesions belong to the shared anatomy.
    pub lesion_count: [usize; 2],
    pub lesion_radius_mm: [f64; 2],
    /// In-plane matrix size range (square), voxels.
    pub shape_xy: [usize; 2],
    pub shape_z: [usize; 2],
    pub spacing_xy: [f64; 2],
    pub spacing_z: [f64; 2],
    /// Per-series global gain range.
    pub gain: [f64; 2],
    pub hard_mode: Option<HardMode>,
    pub body_part: String,
    pub procedure: String,
    pub conflict_body_part: String,
    pub scanners: Vec<String>,
    pub seed: u64,
}

fn sig(label: &str, tissue: [f64; 6], bg: (f64, f64), noise: f64, texture: (f64, f64), desc: (&str, &str), te_tr: (f64, f64)) -> ClassSignature {
    ClassSignature {
        label: label.to_string(),
        tissue,
        background_mean: bg.0,
        background_sigma: bg.1,
        noise_sigma: noise,
        rician: true,
        texture_granularity: texture.0,
        texture_amplitude: texture.1,
        lesion_multiplier: 1.0,
        diffusion: None,
        series_description: desc.0.to_string(),
        protocol_name: desc.1.to_string(),
        echo_time_ms: te_tr.0,
        repetition_time_ms: te_tr.1,
    }
}

impl PhantomSpec {
    /// Body profile: venous DCE, T2w, T2FS, DWI (1-3 b-values) and ADC.
    pub fn default_body(seed: u64) -> Self {
        let vdce = sig("VDCE", [70.0, 320.0, 620.0, 80.0, 950.0, 380.0], (8.0, 4.0), 0.03, (3.0, 0.08), ("t1_vibe_fs_tra_venous", "vibe_dynamic_venous"), (1.3, 3.9));
        let t2w = sig("T2W", [760.0, 160.0, 260.0, 1000.0, 60.0, 520.0], (10.0, 5.0), 0.03, (2.5, 0.10), ("t2_haste_tra", "t2_haste_tra_mbh"), (90.0, 1400.0));
        let t2fs = sig("T2FS", [110.0, 150.0, 300.0, 950.0, 60.0, 620.0], (8.0, 4.0), 0.03, (2.5, 0.10), ("t2_tse_fs_tra", "t2_tse_fs_tra"), (80.0, 4000.0));
        let mut dwi = sig("DWI", [40.0, 110.0, 200.0, 520.0, 30.0, 420.0], (15.0, 8.0), 0.10, (4.0, 0.12), ("ep2d_diff_b{b}_tra", "ep2d_diff_b50_400_800"), (60.0, 5000.0));
        dwi.diffusion = Some(Diffusion {
            adc: [0.2e-3, 1.4e-3, 1.1e-3, 3.0e-3, 2.5e-3, 0.7e-3],
            b_ranges: vec![[0.0, 200.0], [400.0, 800.0], [800.0, 1400.0]],
            count: [1, 3],
            b_step: 50.0,
        });
        let mut adc = sig("ADC", [300.0, 1400.0, 1100.0, 3000.0, 2500.0, 700.0], (0.0, 0.0), 0.08, (3.0, 0.15), ("ep2d_diff_tra_ADC", "ep2d_diff_adc"), (60.0, 5000.0));
        adc.rician = false;
        Self {
            label_set: LabelSet::Body,
            signatures: vec![vdce, t2w, t2fs, dwi, adc],
            lesion_count: [0, 3],
            lesion_radius_mm: [5.0, 15.0],
            shape_xy: [48, 72],
            shape_z: [12, 20],
            spacing_xy: [2.5, 3.75],
            spacing_z: [6.0, 9.0],
            gain: [0.9, 1.1],
            hard_mode: None,
            body_part: "ABDOMEN".into(),
            procedure: "MRI CHEST ABDOMEN PELVIS W WO CONTRAST".into(),
            conflict_body_part: "BRAIN".into(),
            scanners: vec!["Aera".into(), "Verio".into(), "Biograph_mMR".into()],
            seed,
        }
    }

    /// Body profile where most low-b DWI volumes carry the T2FS signature.
    pub fn hard_body(seed: u64) -> Self {
        Self {
            hard_mode: Some(HardMode {
                source: "DWI".into(),
                target: "T2FS".into(),
                b_max: 200.0,
                probability: 0.6,
            }),
            ..Self::default_body(seed)
        }
    }

    /// Brain profile (T1, T1CE, T2, FLAIR) on the same synthetic anatomy.
    pub fn default_brain(seed: u64) -> Self {
        let t1 = sig("T1", [800.0, 350.0, 500.0, 120.0, 150.0, 420.0], (8.0, 4.0), 0.03, (3.0, 0.08), ("t1_mprage_sag", "t1_mprage_sag_p2"), (2.5, 1900.0));
        let t1ce = sig("T1CE", [800.0, 380.0, 560.0, 120.0, 900.0, 850.0], (8.0, 4.0), 0.03, (3.0, 0.08), ("t1_mprage_post_gad", "t1_mprage_gad"), (2.5, 1900.0));
        let t2 = sig("T2", [500.0, 200.0, 350.0, 1000.0, 80.0, 700.0], (10.0, 5.0), 0.03, (2.5, 0.10), ("t2_tse_tra", "t2_tse_tra_p2"), (95.0, 6000.0));
        let flair = sig("FLAIR", [450.0, 220.0, 380.0, 60.0, 80.0, 900.0], (10.0, 5.0), 0.04, (2.5, 0.10), ("t2_flair_tra", "t2_flair_dark_fluid"), (85.0, 9000.0));
        Self {
            label_set: LabelSet::Brain,
            signatures: vec![t1, t1ce, t2, flair],
            body_part: "HEAD".into(),
            procedure: "MRI BRAIN W WO CONTRAST".into(),
            conflict_body_part: "ABDOMEN".into(),
            ..Self::default_body(seed)
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        let mut seen = BTreeSet::new();
        for s in &self.signatures {
            if self.label_set.parse_label(&s.label).is_none() {
                return bad(format!("signature label '{}' is not a {} class", s.label, self.label_set));
            }
            if !seen.insert(self.label_set.parse_label(&s.label).unwrap().class_index()) {
                return bad(format!("duplicate signature for '{}'", s.label));
            }
            if s.tissue.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || s.background_mean < 0.0 {
                return bad(format!("{}: intensities must be non-negative", s.label));
            }
            if [s.background_sigma, s.noise_sigma, s.texture_amplitude].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("{}: sigmas must be >= 0", s.label));
            }
            if !(s.lesion_multiplier > 0.0) || !(s.texture_granularity > 0.0) {
                return bad(format!("{}: multipliers and granularity must be > 0", s.label));
            }
            if let Some(d) = &s.diffusion {
                if d.b_ranges.is_empty() || d.count[0] < 1 || d.count[0] > d.count[1] || d.count[1] > d.b_ranges.len() {
                    return bad(format!("{}: b-value count {:?} incompatible with {} ranges", s.label, d.count, d.b_ranges.len()));
                }
                if d.b_ranges.iter().any(|r| !(0.0 <= r[0] && r[0] <= r[1])) || !(d.b_step > 0.0) {
                    return bad(format!("{}: invalid b-value ranges", s.label));
                }
            }
        }
        if seen.len() != self.label_set.num_classes() {
            return bad(format!("need one signature per {} class", self.label_set));
        }
        for (name, r) in [("shape_xy", self.shape_xy), ("shape_z", self.shape_z)] {
            if !(8 <= r[0] && r[0] <= r[1] && r[1] <= 512) {
                return bad(format!("{name} {r:?} must lie within [8, 512]"));
            }
        }
        for (name, r) in [
            ("spacing_xy", self.spacing_xy),
            ("spacing_z", self.spacing_z),
            ("gain", self.gain),
            ("lesion_radius_mm", self.lesion_radius_mm),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} {r:?} must be a positive ordered range"));
            }
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion_count {:?} is not ordered", self.lesion_count));
        }
        if let Some(h) = &self.hard_mode {
            for l in [&h.source, &h.target] {
                if !self.signatures.iter().any(|s| &s.label == l) {
                    return bad(format!("hard mode refers to unknown class '{l}'"));
                }
            }
            if !(0.0..=1.0).contains(&h.probability) {
                return bad("hard mode probability must lie in [0, 1]".into());
            }
        }
        if self.scanners.is_empty() {
            return bad("at least one scanner model is required".into());
        }
        Ok(())
    }

    fn signature(&self, label: &str) -> &ClassSignature {
        self.signatures.iter().find(|s| s.label == label).expect("validated label")
    }
}

pub fn patient_id(index: usize) -> String {
    format!("P{:04}", index + 1)
}

pub fn study_uid(patient: &str, study_index: usize) -> String {
    format!("{patient}.{}", study_index + 1)
}

/// One rendered series with its metadata.
#[derive(Clone, Debug)]
pub struct GeneratedSeries {
    pub entry: SeriesEntry,
    pub volume: SeriesVolume,
    /// Signature actually used to render (differs from the label in hard
    /// mode).
    pub rendered_as: String,
}

#[derive(Clone, Debug)]
pub struct GeneratedStudy {
    pub patient_id: String,
    pub study_uid: String,
    pub series: Vec<GeneratedSeries>,
}

impl GeneratedStudy {
    pub fn record(&self, label_set: LabelSet) -> StudyRecord {
        let mut r = StudyRecord {
            patient_id: self.patient_id.clone(),
            study_uid: self.study_uid.clone(),
            incomplete: false,
            missing_classes: vec![],
            series: self.series.iter().map(|s| s.entry.clone()).collect(),
            rejected: vec![],
        };
        r.flag_missing(label_set);
        r
    }
}

/// One volume per class plus extra DWI b-values, deterministic per
/// `(seed, patient_id, study_index)`.
pub fn generate_study(spec: &PhantomSpec, patient_id: &str, study_index: usize) -> Result<GeneratedStudy, PhantomError> {
    spec.validate()?;
    let study_seed = derive_seed(spec.seed, &[hash_str(patient_id), study_index as u64]);
    let mut rng = SeededRng::new(study_seed);
    let anatomy = Anatomy::generate(spec, &mut rng);
    let study = study_uid(patient_id, study_index);
    let scanner = spec.scanners[rng.below(spec.scanners.len())].clone();

    // (signature label, b-value) per series, in signature order.
    let mut plan: Vec<(&ClassSignature, Option<f64>)> = Vec::new();
    for s in &spec.signatures {
        match &s.diffusion {
            None => plan.push((s, None)),
            Some(d) => {
                let n = rng.range_inclusive(d.count[0], d.count[1]);
                let mut ranges: Vec<usize> = (0..d.b_ranges.len()).collect();
                rng.shuffle(&mut ranges);
                let mut picks: Vec<usize> = ranges[..n].to_vec();
                picks.sort();
                for r in picks {
                    let [lo, hi] = d.b_ranges[r];
                    let b = ((rng.range(lo, hi) / d.b_step).round() * d.b_step).clamp(lo, hi);
                    plan.push((s, Some(b)));
                }
            }
        }
    }

    let mut series = Vec::with_capacity(plan.len());
    for (n, (s, b)) in plan.into_iter().enumerate() {
        let mut srng = SeededRng::derived(study_seed, &[n as u64 + 1]);
        let mut render_sig = s;
        if let (Some(h), Some(b)) = (&spec.hard_mode, b) {
            if h.source == s.label && b <= h.b_max && srng.uniform() < h.probability {
                render_sig = spec.signature(&h.target);
            }
        }
        let volume = render::render(&anatomy, render_sig, if render_sig.label == s.label { b } else { None }, spec, &mut srng);
        let series_uid = format!("{study}.{}", n + 1);
        let mut h = HeaderFields::new(patient_id, &study, &series_uid);
        h.body_part_examined = Some(spec.body_part.clone());
        h.procedure_step_description = Some(spec.procedure.clone());
        let bt = b.map(|b| format!("{b:.0}")).unwrap_or_default();
        h.series_description = Some(s.series_description.replace("{b}", &bt));
        h.protocol_name = Some(s.protocol_name.replace("{b}", &bt));
        h.scanner_model = Some(scanner.clone());
        h.b_value = b;
        h.echo_time_ms = Some(s.echo_time_ms);
        h.repetition_time_ms = Some(s.repetition_time_ms);
        let label = spec.label_set.parse_label(&s.label);
        let path = format!("{patient_id}/{study}/{series_uid}.nii.gz");
        series.push(GeneratedSeries {
            entry: SeriesEntry {
                series_uid,
                headers: h,
                locator: VolumeLocator::Nifti { path },
                label,
            },
            volume,
            rendered_as: render_sig.label.clone(),
        });
    }
    Ok(GeneratedStudy {
        patient_id: patient_id.to_string(),
        study_uid: study,
        series,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetCard {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub n_patients: usize,
    pub studies_per_patient: usize,
    pub conflict_fraction: f64,
    /// Studies whose headers were given a deliberate conflict.
    pub conflict_studies: Vec<String>,
    /// Series rendered with another class's signature (hard mode).
    pub mimic_series: Vec<String>,
    pub n_series: usize,
    pub generator: String,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub studies: Vec<StudyRecord>,
    pub card: DatasetCard,
}

fn unwritable(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Unwritable {
        path: path.to_path_buf(),
        source,
    }
}

/// Studies chosen for seeded header conflicts: `round(fraction * n)` of
/// them, by seeded shuffle.
pub fn conflict_studies(spec: &PhantomSpec, studies: &[String], fraction: f64) -> BTreeSet<String> {
    let mut order: Vec<String> = studies.to_vec();
    order.sort();
    SeededRng::derived(spec.seed, &[0xc0ff]).shuffle(&mut order);
    let n = ((fraction.clamp(0.0, 1.0) * order.len() as f64).round() as usize).min(order.len());
    order.into_iter().take(n).collect()
}

/// Writes `<out>/<patient>/<study>/<series>.nii.gz` (+ `.json` header
/// sidecars), `labels.jsonl`, `manifest.jsonl` and `dataset_card.json`.
/// Each study directory appears atomically.
pub fn generate_dataset(
    spec: &PhantomSpec,
    out: &Path,
    n_patients: usize,
    studies_per_patient: usize,
    conflict_fraction: f64,
) -> Result<GeneratedDataset, PhantomError> {
    spec.validate()?;
    if n_patients < 3 {
        return Err(PhantomError::TooFewPatients(n_patients));
    }
    if studies_per_patient == 0 {
        return Err(PhantomError::InvalidSpec("studies_per_patient must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&conflict_fraction) {
        return Err(PhantomError::InvalidSpec("conflict fraction must lie in [0, 1]".into()));
    }
    fs::create_dir_all(out).map_err(unwritable(out))?;
    let keys: Vec<(String, usize)> = (0..n_patients)
        .flat_map(|p| (0..studies_per_patient).map(move |s| (patient_id(p), s)))
        .collect();
    let uids: Vec<String> = keys.iter().map(|(p, s)| study_uid(p, *s)).collect();
    let conflicts = conflict_studies(spec, &uids, conflict_fraction);

    let results = keys
        .par_iter()
        .map(|(p, s)| -> Result<(StudyRecord, Vec<String>), PhantomError> {
            let mut study = generate_study(spec, p, *s)?;
            if conflicts.contains(&study.study_uid) {
                let mut rng = SeededRng::derived(spec.seed, &[0xc0ff, hash_str(&study.study_uid)]);
                let i = rng.below(study.series.len());
                study.series[i].entry.headers.body_part_examined = Some(spec.conflict_body_part.clone());
            }
            write_study(out, &study)?;
            let mimics = study
                .series
                .iter()
                .filter(|s| s.entry.label.is_some_and(|l| l.value() != s.rendered_as))
                .map(|s| s.entry.series_uid.clone())
                .collect();
            Ok((study.record(spec.label_set), mimics))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut studies = Vec::with_capacity(results.len());
    let mut mimic_series = Vec::new();
    for (r, m) in results {
        studies.push(r);
        mimic_series.extend(m);
    }
    studies.sort_by(|a, b| (&a.patient_id, &a.study_uid).cmp(&(&b.patient_id, &b.study_uid)));
    mimic_series.sort();

    let labels: Vec<_> = studies
        .iter()
        .flat_map(|s| s.series.iter().filter_map(|e| Some((e.series_uid.clone(), e.label?))))
        .collect();
    let lp = out.join(LABELS_FILE);
    write_label_sidecar(&lp, &labels).map_err(unwritable(&lp))?;
    let mp = out.join(MANIFEST_FILE);
    write_manifest(&mp, &studies).map_err(unwritable(&mp))?;
    let card = DatasetCard {
        spec: spec.clone(),
        seed: spec.seed,
        n_patients,
        studies_per_patient,
        conflict_fraction,
        conflict_studies: conflicts.into_iter().collect(),
        mimic_series,
        n_series: labels.len(),
        generator: "ChaCha8 streams keyed by SplitMix64(seed, FNV-1a(patient_id), study_index, series_index)".into(),
    };
    let cp = out.join("dataset_card.json");
    let text = serde_json::to_string_pretty(&card).expect("card serializes") + "\n";
    fs::write(&cp, text).map_err(unwritable(&cp))?;
    Ok(GeneratedDataset {
        root: out.to_path_buf(),
        studies,
        card,
    })
}

fn write_study(out: &Path, study: &GeneratedStudy) -> Result<(), PhantomError> {
    let pdir = out.join(&study.patient_id);
    let final_dir = pdir.join(&study.study_uid);
    let tmp = pdir.join(format!(".{}.tmp", study.study_uid));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(unwritable(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(unwritable(&tmp))?;
    for s in &study.series {
        let uid = &s.entry.series_uid;
        let vp = tmp.join(format!("{uid}.nii.gz"));
        write_nifti(&vp, &s.volume, &s.entry.headers.series_description.clone().unwrap_or_default()).map_err(unwritable(&vp))?;
        let hp = tmp.join(format!("{uid}.json"));
        let text = serde_json::to_string_pretty(&s.entry.headers).expect("headers serialize") + "\n";
        fs::write(&hp, text).map_err(unwritable(&hp))?;
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(unwritable(&final_dir))?;
    }
    fs::rename(&tmp, &final_dir).map_err(unwritable(&final_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{detect_conflicts, ConflictRule, ConflictRules, RuleTable, infer_label_from_headers};

    #[test]
    fn study_counts_and_labels() {
        let spec = PhantomSpec::default_body(3);
        for p in 0..12 {
            let s = generate_study(&spec, &patient_id(p), 0).unwrap();
            assert!((5..=7).contains(&s.series.len()), "{}", s.series.len());
            let dwi = s.series.iter().filter(|x| x.entry.label.unwrap().value() == "DWI").count();
            assert!((1..=3).contains(&dwi));
            let rec = s.record(LabelSet::Body);
            assert!(!rec.incomplete, "{:?}", rec.missing_classes);
            for x in &s.series {
                let h = &x.entry.headers;
                h.validate().unwrap();
                assert_eq!(infer_label_from_headers(h, &RuleTable::default_body()), x.entry.label);
                assert_eq!(x.volume.dims(), s.series[0].volume.dims());
                assert!(x.volume.voxels().iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn deterministic_per_key() {
        let spec = PhantomSpec::default_body(11);
        let a = generate_study(&spec, "P0007", 1).unwrap();
        let b = generate_study(&spec, "P0007", 1).unwrap();
        assert_eq!(a.series.len(), b.series.len());
        for (x, y) in a.series.iter().zip(&b.series) {
            assert_eq!(x.volume, y.volume);
            assert_eq!(x.entry, y.entry);
        }
        let c = generate_study(&spec, "P0007", 2).unwrap();
        assert_ne!(a.series[0].volume.voxels(), c.series[0].volume.voxels());
    }

    #[test]
    fn no_lesions_when_range_is_zero() {
        let mut spec = PhantomSpec::default_body(5);
        spec.lesion_count = [0, 0];
        let mut rng = SeededRng::new(1);
        for _ in 0..5 {
            let a = Anatomy::generate(&spec, &mut rng);
            assert_eq!(a.lesions, 0);
            assert_eq!(a.count(Tissue::Lesion), 0);
        }
        spec.lesion_count = [2, 2];
        let a = Anatomy::generate(&spec, &mut rng);
        assert_eq!(a.lesions, 2);
    }

    #[test]
    fn invalid_specs() {
        let mut s = PhantomSpec::default_body(1);
        s.signatures[0].noise_sigma = -1.0;
        assert!(matches!(s.validate(), Err(PhantomError::InvalidSpec(_))));
        let mut s = PhantomSpec::default_body(1);
        s.signatures[1].lesion_multiplier = 0.0;
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::default_body(1);
        s.shape_xy = [4, 16];
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::default_body(1);
        s.shape_z = [8, 513];
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::default_body(1);
        s.signatures.pop();
        assert!(s.validate().is_err());
        PhantomSpec::hard_body(1).validate().unwrap();
        PhantomSpec::default_brain(1).validate().unwrap();
    }

    #[test]
    fn too_few_patients() {
        let dir = tempfile::tempdir().unwrap();
        let r = generate_dataset(&PhantomSpec::default_body(1), dir.path(), 2, 1, 0.0);
        assert!(matches!(r, Err(PhantomError::TooFewPatients(2))));
    }

    #[test]
    fn seeded_conflicts_are_exactly_flagged() {
        let mut spec = PhantomSpec::default_body(9);
        spec.shape_xy = [8, 8];
        spec.shape_z = [8, 8];
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&spec, dir.path(), 50, 1, 0.1).unwrap();
        assert_eq!(ds.studies.len(), 50);
        assert!(ds.studies.iter().all(|s| !s.incomplete));
        assert_eq!(ds.card.conflict_studies.len(), 5);
        let rules = ConflictRules::default_for(RuleTable::default_body());
        let flagged: Vec<String> = ds
            .studies
            .iter()
            .filter(|s| detect_conflicts(s, &rules).count_rule(ConflictRule::AnatomyMismatch) > 0)
            .map(|s| s.study_uid.clone())
            .collect();
        assert_eq!(flagged, ds.card.conflict_studies);
        assert!(ds.studies.iter().all(|s| {
            let r = detect_conflicts(s, &rules);
            r.count_rule(ConflictRule::LabelMismatch) == 0 && r.count_rule(ConflictRule::MissingField) == 0
        }));
    }

    #[test]
    fn hard_mode_mimics_low_b_dwi() {
        let spec = PhantomSpec::hard_body(2);
        let mut mimics = 0;
        for p in 0..30 {
            for s in generate_study(&spec, &patient_id(p), 0).unwrap().series {
                if s.rendered_as != s.entry.label.unwrap().value() {
                    assert_eq!(s.rendered_as, "T2FS");
                    assert!(s.entry.headers.b_value.unwrap() <= 200.0);
                    mimics += 1;
                }
            }
        }
        assert!(mimics > 0);
    }
}
