use super::headers::{extract_headers, HeaderFields, SliceRecord};
use super::volume::{AxisCode, AxisCodes, SeriesVolume};
use super::IngestError;

/// Maximum allowed deviation of any inter-slice gap from the median gap,
/// as a fraction of the median.
pub const GAP_TOLERANCE: f64 = 0.10;

/// Positions closer than this (mm) count as the same slice.
const DUPLICATE_EPS_MM: f64 = 1e-4;

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lps_to_ras(v: [f64; 3]) -> [f64; 3] {
    [-v[0], -v[1], v[2]]
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn triple(rec: &SliceRecord, key: &str, len: usize) -> Option<Vec<f64>> {
    rec.attr_numbers(key).filter(|v| v.len() == len && v.iter().all(|x| x.is_finite()))
}

/// Stacks the slices of one series into a volume in acquisition orientation.
///
/// Slices are ordered by their position projected on the slice normal, the
/// slice spacing is the median gap, and rescale slope/intercept is applied
/// per slice.
pub fn assemble_series(slices: &[SliceRecord]) -> Result<(SeriesVolume, HeaderFields), IngestError> {
    let first = slices.first().ok_or(IngestError::NoSlices)?;
    let series_uid = first
        .attr("SeriesInstanceUID")
        .ok_or(IngestError::MissingIdentifier("SeriesInstanceUID"))?;
    for s in slices {
        let uid = s.attr("SeriesInstanceUID").unwrap_or("");
        if uid != series_uid {
            return Err(IngestError::MixedSeries(series_uid.to_string(), uid.to_string()));
        }
        if s.rows != first.rows || s.columns != first.columns {
            return Err(IngestError::InconsistentSlices(format!(
                "slice grid {}x{} differs from {}x{}",
                s.rows, s.columns, first.rows, first.columns
            )));
        }
        if s.rows == 0 || s.columns == 0 || s.pixels.len() != s.rows * s.columns {
            return Err(IngestError::InconsistentSlices(format!(
                "{} pixels for a {}x{} grid",
                s.pixels.len(),
                s.rows,
                s.columns
            )));
        }
    }

    let iop = triple(first, "ImageOrientationPatient", 6).unwrap_or_else(|| vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let row_dir = [iop[0], iop[1], iop[2]];
    let col_dir = [iop[3], iop[4], iop[5]];
    let normal = cross(row_dir, col_dir);
    if dot(normal, normal) < 1e-6 {
        return Err(IngestError::InconsistentSlices("degenerate ImageOrientationPatient".into()));
    }

    let mut placed: Vec<(f64, [f64; 3], &SliceRecord)> = Vec::with_capacity(slices.len());
    for s in slices {
        let (pos, ipp) = match triple(s, "ImagePositionPatient", 3) {
            Some(p) => {
                let p = [p[0], p[1], p[2]];
                (dot(p, normal), p)
            }
            None => {
                let loc = s
                    .attr_number("SliceLocation")
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| IngestError::MissingAttribute("ImagePositionPatient".into()))?;
                (loc, [0.0, 0.0, loc])
            }
        };
        placed.push((pos, ipp, s));
    }
    placed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let gaps: Vec<f64> = placed.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if let Some(i) = gaps.iter().position(|g| g.abs() < DUPLICATE_EPS_MM) {
        return Err(IngestError::DuplicatePosition {
            series_uid: series_uid.to_string(),
            position: placed[i].0,
        });
    }
    let slice_spacing = if gaps.is_empty() {
        [first.attr_number("SpacingBetweenSlices"), first.attr_number("SliceThickness")]
            .into_iter()
            .flatten()
            .find(|v| v.is_finite() && *v > 0.0)
            .unwrap_or(1.0)
    } else {
        let med = median(&gaps);
        let deviation = gaps.iter().map(|g| (g - med).abs()).fold(0.0, f64::max);
        if deviation > GAP_TOLERANCE * med {
            return Err(IngestError::NonUniformGap {
                series_uid: series_uid.to_string(),
                median: med,
                deviation,
            });
        }
        med
    };

    let ps = triple(first, "PixelSpacing", 2).ok_or_else(|| IngestError::MissingAttribute("PixelSpacing".into()))?;
    // PixelSpacing is (between rows, between columns); x runs along a row.
    let spacing = [ps[1], ps[0], slice_spacing];

    let (rows, cols) = (first.rows, first.columns);
    let mut voxels = Vec::with_capacity(rows * cols * placed.len());
    for (_, _, s) in &placed {
        let slope = s.attr_number("RescaleSlope").filter(|v| v.is_finite() && *v != 0.0).unwrap_or(1.0);
        let intercept = s.attr_number("RescaleIntercept").filter(|v| v.is_finite()).unwrap_or(0.0);
        voxels.extend(s.pixels.iter().map(|p| p * slope + intercept));
    }

    let axes = AxisCodes([
        AxisCode::from_ras_direction(lps_to_ras(row_dir)),
        AxisCode::from_ras_direction(lps_to_ras(col_dir)),
        AxisCode::from_ras_direction(lps_to_ras(normal)),
    ]);
    if !axes.is_valid() {
        return Err(IngestError::InconsistentSlices(format!("oblique orientation {iop:?} has no dominant axes")));
    }
    let volume = SeriesVolume::new(
        [cols, rows, placed.len()],
        spacing,
        lps_to_ras(placed[0].1),
        axes,
        voxels,
    )?;
    let headers = extract_headers(placed[0].2)?;
    Ok((volume, headers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    pub(crate) fn slice(series: &str, z: f64, fill: f64) -> SliceRecord {
        let mut s = SliceRecord {
            rows: 2,
            columns: 3,
            pixels: vec![fill; 6],
            ..Default::default()
        };
        s.set("PatientID", "P1")
            .set("StudyInstanceUID", "1.2")
            .set("SeriesInstanceUID", series)
            .set("ImageOrientationPatient", "1\\0\\0\\0\\1\\0")
            .set("ImagePositionPatient", format!("-10\\-20\\{z}"))
            .set("PixelSpacing", "0.8\\0.7");
        s
    }

    #[test]
    fn sorts_shuffled_uniform_slices() {
        let mut slices: Vec<SliceRecord> = (0..36).map(|i| slice("1.2.3", i as f64 * 7.8, i as f64)).collect();
        SeededRng::new(5).shuffle(&mut slices);
        let (v, h) = assemble_series(&slices).unwrap();
        assert_eq!(v.dims(), [3, 2, 36]);
        assert!((v.spacing()[2] - 7.8).abs() < 1e-9);
        assert_eq!(v.spacing()[0], 0.7);
        assert_eq!(v.spacing()[1], 0.8);
        for z in 0..36 {
            assert_eq!(v.get(0, 0, z), z as f64);
        }
        assert_eq!(h.series_uid, "1.2.3");
        assert_eq!(v.axes().to_string(), "LPS");
        assert_eq!(v.origin(), [10.0, 20.0, 0.0]);
    }

    #[test]
    fn permutation_invariant() {
        let base: Vec<SliceRecord> = (0..9).map(|i| slice("9", 3.0 * i as f64, (i * i) as f64)).collect();
        let (reference, _) = assemble_series(&base).unwrap();
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let mut s = base.clone();
            rng.shuffle(&mut s);
            assert_eq!(assemble_series(&s).unwrap().0, reference);
        }
    }

    #[test]
    fn duplicate_position_rejected() {
        let slices = vec![slice("1", 5.0, 0.0), slice("1", 5.0, 1.0)];
        assert!(matches!(assemble_series(&slices), Err(IngestError::DuplicatePosition { .. })));
    }

    #[test]
    fn missing_slice_rejected() {
        // gaps {7.8, 7.8, 15.6}: median 7.8, worst deviation 7.8 > 0.78
        let zs = [0.0, 7.8, 15.6, 31.2];
        let slices: Vec<_> = zs.iter().map(|&z| slice("1", z, 0.0)).collect();
        match assemble_series(&slices) {
            Err(IngestError::NonUniformGap { median, deviation, .. }) => {
                assert!((median - 7.8).abs() < 1e-12);
                assert!((deviation - 7.8).abs() < 1e-12);
            }
            other => panic!("expected NonUniformGap, got {other:?}"),
        }
    }

    #[test]
    fn small_jitter_tolerated() {
        let zs = [0.0, 7.8, 15.7, 23.4];
        let slices: Vec<_> = zs.iter().map(|&z| slice("1", z, 0.0)).collect();
        assert!(assemble_series(&slices).is_ok());
    }

    #[test]
    fn mixed_series_rejected() {
        let slices = vec![slice("1", 0.0, 0.0), slice("2", 1.0, 0.0)];
        assert!(matches!(assemble_series(&slices), Err(IngestError::MixedSeries(..))));
    }

    #[test]
    fn rescale_applied() {
        let mut s = slice("1", 0.0, 10.0);
        s.set("RescaleSlope", "2").set("RescaleIntercept", "-5");
        let (v, _) = assemble_series(&[s]).unwrap();
        assert!(v.voxels().iter().all(|&x| x == 15.0));
        assert_eq!(v.spacing()[2], 1.0);
    }

    #[test]
    fn empty_input() {
        assert!(matches!(assemble_series(&[]), Err(IngestError::NoSlices)));
    }
}
