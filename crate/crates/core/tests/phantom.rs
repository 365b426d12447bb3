use mriseq::ingestion::{read_manifest, load_series, LabelSet, MANIFEST_FILE};
use mriseq::phantom::{generate_dataset, generate_study, patient_id, PhantomSpec};

/// Mean and standard deviation of all voxels, in log space.
fn features(v: &[f64]) -> [f64; 2] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    [(mean + 1.0).ln(), (var.sqrt() + 1.0).ln()]
}

/// Nearest-centroid accuracy with centroids fit on the first `n_train`
/// patients and scored on the rest.
fn centroid_accuracy(spec: &PhantomSpec, n_train: usize, n_test: usize) -> f64 {
    let classes = spec.label_set.num_classes();
    let mut sums = vec![[0.0; 2]; classes];
    let mut counts = vec![0usize; classes];
    for p in 0..n_train {
        for s in generate_study(spec, &patient_id(p), 0).unwrap().series {
            let c = s.entry.label.unwrap().class_index();
            let f = features(s.volume.voxels());
            sums[c][0] += f[0];
            sums[c][1] += f[1];
            counts[c] += 1;
        }
    }
    let centroids: Vec<[f64; 2]> = sums.iter().zip(&counts).map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64]).collect();
    let (mut right, mut total) = (0, 0);
    for p in n_train..n_train + n_test {
        for s in generate_study(spec, &patient_id(p), 0).unwrap().series {
            let f = features(s.volume.voxels());
            let pred = (0..classes)
                .min_by(|&a, &b| {
                    let d = |c: usize| (f[0] - centroids[c][0]).powi(2) + (f[1] - centroids[c][1]).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            right += usize::from(pred == s.entry.label.unwrap().class_index());
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn default_signatures_are_separable_by_centroids() {
    let acc = centroid_accuracy(&PhantomSpec::default_body(7), 30, 20);
    println!("nearest-centroid accuracy (default): {acc:.3}");
    assert!(acc >= 0.90, "{acc}");
}

#[test]
fn hard_mode_is_harder_for_centroids() {
    let easy = centroid_accuracy(&PhantomSpec::default_body(7), 30, 20);
    let hard = centroid_accuracy(&PhantomSpec::hard_body(7), 30, 20);
    println!("nearest-centroid accuracy: default {easy:.3}, hard {hard:.3}");
    assert!(hard < easy);
}

#[test]
fn dataset_on_disk_round_trips_through_ingestion() {
    let mut spec = PhantomSpec::default_body(4);
    spec.shape_xy = [12, 16];
    spec.shape_z = [8, 10];
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec, dir.path(), 3, 2, 0.0).unwrap();
    assert_eq!(ds.studies.len(), 6);
    let manifest = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, ds.studies);
    let again = generate_study(&spec, "P0002", 1).unwrap();
    let rec = manifest.iter().find(|s| s.study_uid == "P0002.2").unwrap();
    for (entry, gen) in rec.series.iter().zip(&again.series) {
        let v = load_series(dir.path(), &entry.locator).unwrap();
        assert_eq!(v.dims(), gen.volume.dims());
        assert_eq!(v.voxels(), gen.volume.voxels());
        assert_eq!(entry.label.unwrap().label_set(), LabelSet::Body);
    }
    assert!(dir.path().join("dataset_card.json").exists());
}
