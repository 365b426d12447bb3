//! Geometric and intensity normalization of a volume into a fixed-shape
//! model input: canonicalize, resample, crop/pad, percentile-normalize.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fingerprint::fingerprint;
use crate::ingestion::nifti::write_nifti;
use crate::ingestion::SeriesVolume;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// (sx, sy, sz) in mm.
    pub target_spacing: [f64; 3],
    /// (X, Y, Z) in voxels.
    pub target_shape: [usize; 3],
    /// (p_low, p_high) in percent.
    pub percentile_window: [f64; 2],
    pub pad_value: f64,
    pub interpolation: Interpolation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [1.5, 1.5, 7.8],
            target_shape: [256, 256, 36],
            percentile_window: [1.0, 99.0],
            pad_value: 0.0,
            interpolation: Interpolation::Trilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let [lo, hi] = self.percentile_window;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "percentile_window ({lo}, {hi}) must satisfy 0 <= low < high <= 100"
            )));
        }
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(PreprocessError::InvalidConfig(format!(
                "target_spacing {:?} must be positive",
                self.target_spacing
            )));
        }
        if self.target_shape.contains(&0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "target_shape {:?} must be at least 1 on every axis",
                self.target_shape
            )));
        }
        if !self.pad_value.is_finite() {
            return Err(PreprocessError::InvalidConfig("pad_value must be finite".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    /// Model input shape (Z, Y, X).
    pub fn input_shape(&self) -> [usize; 3] {
        let [x, y, z] = self.target_shape;
        [z, y, x]
    }
}

/// Output length of one axis under resampling.
pub fn resampled_len(n: usize, s_in: f64, s_out: f64) -> usize {
    ((n as f64 * s_in / s_out).round() as usize).max(1)
}

/// Linear resampling weights along one axis: for every output index, the
/// two input neighbours and the weight of the upper one. Output voxel `j`
/// sits at `j * s_out` mm from voxel 0, edge-clamped.
fn axis_taps(n_in: usize, n_out: usize, s_in: f64, s_out: f64, mode: Interpolation) -> Vec<(usize, usize, f64)> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let p = (j as f64 * s_out / s_in).clamp(0.0, last);
            match mode {
                Interpolation::Nearest => {
                    let i = p.round() as usize;
                    (i, i, 0.0)
                }
                Interpolation::Trilinear => {
                    let i0 = p.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, p - i0 as f64)
                }
            }
        })
        .collect()
}

/// Interpolates along one axis of an x-fastest grid.
fn resample_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut out_dims = dims;
    out_dims[axis] = taps.len();
    let [ox, oy, oz] = out_dims;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut pos = [x, y, z];
                let (i0, i1, w) = taps[pos[axis]];
                pos[axis] = 0;
                let base = pos[0] + dims[0] * (pos[1] + dims[1] * pos[2]);
                let a = data[base + i0 * stride];
                out.push(if w == 0.0 { a } else { a + (data[base + i1 * stride] - a) * w });
            }
        }
    }
    out
}

/// Resamples to `target_spacing` with trilinear interpolation, keeping the
/// origin (center of voxel 0) fixed.
pub fn resample(v: &SeriesVolume, target_spacing: [f64; 3]) -> SeriesVolume {
    resample_with(v, target_spacing, Interpolation::Trilinear)
}

pub fn resample_with(v: &SeriesVolume, target_spacing: [f64; 3], mode: Interpolation) -> SeriesVolume {
    let mut dims = v.dims();
    let spacing = v.spacing();
    let mut data = v.voxels().to_vec();
    for axis in 0..3 {
        let n_out = resampled_len(dims[axis], spacing[axis], target_spacing[axis]);
        if n_out == dims[axis] && spacing[axis] == target_spacing[axis] {
            continue;
        }
        let taps = axis_taps(dims[axis], n_out, spacing[axis], target_spacing[axis], mode);
        data = resample_axis(&data, dims, axis, &taps);
        dims[axis] = n_out;
    }
    SeriesVolume::from_parts(dims, target_spacing, v.origin(), v.axes(), data)
}

/// Start index in the input of output voxel 0 along one axis; negative
/// means leading padding.
pub fn crop_pad_offset(n_in: usize, n_target: usize) -> isize {
    if n_in >= n_target {
        ((n_in - n_target) / 2) as isize
    } else {
        -(((n_target - n_in) / 2) as isize)
    }
}

/// Center-crops or pads each axis independently to `target_shape`; the odd
/// remainder goes to the trailing side. Retained voxels keep their physical
/// positions.
pub fn crop_or_pad(v: &SeriesVolume, target_shape: [usize; 3], pad_value: f64) -> SeriesVolume {
    let dims = v.dims();
    if dims == target_shape {
        return v.clone();
    }
    let start: Vec<isize> = (0..3).map(|a| crop_pad_offset(dims[a], target_shape[a])).collect();
    let [tx, ty, tz] = target_shape;
    let src = v.voxels();
    let mut out = vec![pad_value; tx * ty * tz];
    let inside = |o: usize, a: usize| -> Option<usize> {
        let i = o as isize + start[a];
        (i >= 0 && (i as usize) < dims[a]).then_some(i as usize)
    };
    // Valid output x range is contiguous; copy rows in one go.
    let x_lo = (-start[0]).max(0) as usize;
    let x_hi = ((dims[0] as isize - start[0]).min(tx as isize)).max(x_lo as isize) as usize;
    for z in 0..tz {
        let Some(iz) = inside(z, 2) else { continue };
        for y in 0..ty {
            let Some(iy) = inside(y, 1) else { continue };
            if x_hi > x_lo {
                let ix0 = (x_lo as isize + start[0]) as usize;
                let s = ix0 + dims[0] * (iy + dims[1] * iz);
                let d = x_lo + tx * (y + ty * z);
                out[d..d + (x_hi - x_lo)].copy_from_slice(&src[s..s + (x_hi - x_lo)]);
            }
        }
    }
    let mut origin = v.origin();
    let spacing = v.spacing();
    for (a, code) in v.axes().0.iter().enumerate() {
        let sign = if code.is_positive() { 1.0 } else { -1.0 };
        origin[code.world_axis()] += sign * start[a] as f64 * spacing[a];
    }
    SeriesVolume::from_parts(target_shape, spacing, origin, v.axes(), out)
}

/// Linear-interpolation percentile (`p` in percent) of unsorted values.
/// Equivalent to indexing the sorted values at `p/100 * (n-1)`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut buf = values.to_vec();
    percentile_in_place(&mut buf, p)
}

fn percentile_in_place(buf: &mut [f64], p: f64) -> f64 {
    let n = buf.len();
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut a, rest) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return a;
    }
    let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
    a + (b - a) * frac
}

/// Returns `(a, b)`, the low and high percentiles of the voxels.
pub fn percentile_window(values: &[f64], p_low: f64, p_high: f64) -> (f64, f64) {
    let mut buf = values.to_vec();
    let a = percentile_in_place(&mut buf, p_low);
    let b = percentile_in_place(&mut buf, p_high);
    (a, b)
}

/// Maps `[a, b]` (the percentile window) to `[0, 1]` with clamping; a
/// degenerate window yields all zeros.
pub fn normalize_percentile(v: &SeriesVolume, p_low: f64, p_high: f64) -> SeriesVolume {
    let (a, b) = percentile_window(v.voxels(), p_low, p_high);
    let data = if b > a {
        let scale = 1.0 / (b - a);
        v.voxels().iter().map(|&x| ((x - a) * scale).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.len()]
    };
    SeriesVolume::from_parts(v.dims(), v.spacing(), v.origin(), v.axes(), data)
}

/// Full pipeline to a `(1, Z, Y, X)` tensor in `[0, 1]`.
pub fn preprocess_pipeline(v: &SeriesVolume, cfg: &PreprocessConfig) -> Result<Tensor, PreprocessError> {
    Ok(to_tensor(preprocess_volume(v, cfg)?))
}

/// The pipeline's final volume, before conversion to a tensor.
pub fn preprocess_volume(v: &SeriesVolume, cfg: &PreprocessConfig) -> Result<SeriesVolume, PreprocessError> {
    cfg.validate()?;
    let canon = v.canonicalize();
    let resampled = resample_with(&canon, cfg.target_spacing, cfg.interpolation);
    let fitted = crop_or_pad(&resampled, cfg.target_shape, cfg.pad_value);
    let [lo, hi] = cfg.percentile_window;
    Ok(normalize_percentile(&fitted, lo, hi))
}

/// x-fastest voxels are already `(Z, Y, X)` row-major.
pub fn to_tensor(v: SeriesVolume) -> Tensor {
    let [x, y, z] = v.dims();
    Tensor::new(vec![1, z, y, x], v.into_voxels())
}

#[derive(Serialize)]
struct DumpMeta<'a> {
    series_uid: &'a str,
    config_fingerprint: String,
    config: &'a PreprocessConfig,
}

/// Writes `<dir>/<series_uid>.nii.gz` plus a `.json` metadata sidecar.
pub fn dump_debug(
    dir: &Path,
    series_uid: &str,
    processed: &SeriesVolume,
    cfg: &PreprocessConfig,
) -> Result<PathBuf, PreprocessError> {
    let wrap = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PreprocessError::Write { path, source }
    };
    fs::create_dir_all(dir).map_err(wrap(dir))?;
    let vol = dir.join(format!("{series_uid}.nii.gz"));
    write_nifti(&vol, processed, "preprocessed").map_err(wrap(&vol))?;
    let meta = DumpMeta {
        series_uid,
        config_fingerprint: cfg.fingerprint(),
        config: cfg,
    };
    let side = dir.join(format!("{series_uid}.json"));
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, text).map_err(wrap(&side))?;
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::AxisCodes;

    fn vol(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f64) -> SeriesVolume {
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        SeriesVolume::new(dims, spacing, [1.0, 2.0, 3.0], AxisCodes::RAS, data).unwrap()
    }

    #[test]
    fn resample_identity_and_dims() {
        let v = vol([5, 4, 3], [1.0, 2.0, 3.0], |x, y, z| (x * 7 + y * 3 + z) as f64);
        assert_eq!(resample(&v, [1.0, 2.0, 3.0]), v);
        let r = resample(&vol([512, 2, 1], [0.75, 1.0, 1.0], |x, _, _| x as f64), [1.5, 1.0, 1.0]);
        assert_eq!(r.dims(), [256, 2, 1]);
        assert_eq!(r.origin(), [1.0, 2.0, 3.0]);
        // Linear ramps are reproduced exactly where no clamping occurs.
        assert!((r.get(10, 0, 0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn resample_minimum_one() {
        let r = resample(&vol([2, 2, 2], [1.0; 3], |_, _, _| 1.0), [10.0, 10.0, 10.0]);
        assert_eq!(r.dims(), [1, 1, 1]);
    }

    #[test]
    fn crop_and_pad_offsets() {
        assert_eq!(crop_pad_offset(300, 256), 22);
        assert_eq!(crop_pad_offset(40, 36), 2);
        assert_eq!(crop_pad_offset(200, 256), -28);
        assert_eq!(crop_pad_offset(30, 36), -3);
        let v = vol([5, 3, 1], [2.0, 1.0, 1.0], |x, y, _| (10 * y + x) as f64);
        let c = crop_or_pad(&v, [2, 6, 1], -1.0);
        assert_eq!(c.dims(), [2, 6, 1]);
        // x offset 1, y leading pad 1, trailing pad 2.
        assert_eq!(c.get(0, 0, 0), -1.0);
        assert_eq!(c.get(0, 1, 0), 1.0);
        assert_eq!(c.get(1, 3, 0), 22.0);
        assert_eq!(c.get(1, 4, 0), -1.0);
        assert_eq!(c.origin(), [1.0 + 2.0, 2.0 - 1.0, 3.0]);
    }

    #[test]
    fn percentile_matches_numpy_linear() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        // numpy.percentile(range(1, 1001), 1) == 10.99
        assert!((percentile(&v, 1.0) - 10.99).abs() < 1e-12);
        assert!((percentile(&v, 99.0) - 990.01).abs() < 1e-9);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 1000.0);
        assert_eq!(percentile(&[3.0], 50.0), 3.0);
    }

    #[test]
    fn normalization_cases() {
        let c = vol([3, 3, 3], [1.0; 3], |_, _, _| 7.0);
        assert!(normalize_percentile(&c, 1.0, 99.0).voxels().iter().all(|&x| x == 0.0));
        let b = vol([4, 1, 1], [1.0; 3], |x, _, _| (x % 2) as f64);
        assert_eq!(normalize_percentile(&b, 0.0, 100.0).voxels(), b.voxels());
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let mut c = PreprocessConfig::default();
        c.percentile_window = [99.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = PreprocessConfig::default();
        c.target_shape = [0, 1, 1];
        assert!(c.validate().is_err());
        assert_eq!(PreprocessConfig::default().input_shape(), [36, 256, 256]);
    }
}
