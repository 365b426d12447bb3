use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::IngestError;

/// Anatomical direction of increasing voxel index along one axis, in the
/// RAS+ world frame (x to the patient's right is `R`, ... ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    /// World axis (0 = x, 1 = y, 2 = z) this code points along.
    pub fn world_axis(self) -> usize {
        match self {
            AxisCode::R | AxisCode::L => 0,
            AxisCode::A | AxisCode::P => 1,
            AxisCode::S | AxisCode::I => 2,
        }
    }

    /// True for R, A, S (increasing index moves toward +x/+y/+z in RAS).
    pub fn is_positive(self) -> bool {
        matches!(self, AxisCode::R | AxisCode::A | AxisCode::S)
    }

    /// Dominant direction of a RAS-frame direction vector.
    pub fn from_ras_direction(d: [f64; 3]) -> AxisCode {
        let k = (0..3)
            .max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()))
            .unwrap_or(0);
        let pos = d[k] >= 0.0;
        match (k, pos) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (_, true) => AxisCode::S,
            (_, false) => AxisCode::I,
        }
    }

    fn letter(self) -> char {
        match self {
            AxisCode::R => 'R',
            AxisCode::L => 'L',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Orientation triple, one code per voxel axis (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AxisCodes(pub [AxisCode; 3]);

impl AxisCodes {
    pub const RAS: AxisCodes = AxisCodes([AxisCode::R, AxisCode::A, AxisCode::S]);

    pub fn is_valid(&self) -> bool {
        let mut seen = [false; 3];
        for c in self.0 {
            seen[c.world_axis()] = true;
        }
        seen.iter().all(|s| *s)
    }
}

impl fmt::Display for AxisCodes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0 {
            write!(f, "{}", c.letter())?;
        }
        Ok(())
    }
}

impl FromStr for AxisCodes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let codes: Vec<AxisCode> = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'R' => Ok(AxisCode::R),
                'L' => Ok(AxisCode::L),
                'A' => Ok(AxisCode::A),
                'P' => Ok(AxisCode::P),
                'S' => Ok(AxisCode::S),
                'I' => Ok(AxisCode::I),
                other => Err(format!("unknown axis code '{other}'")),
            })
            .collect::<Result<_, _>>()?;
        let arr: [AxisCode; 3] = codes
            .try_into()
            .map_err(|_| format!("orientation '{s}' must have three letters"))?;
        let out = AxisCodes(arr);
        if !out.is_valid() {
            return Err(format!("orientation '{s}' repeats an axis"));
        }
        Ok(out)
    }
}

impl Serialize for AxisCodes {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AxisCodes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 3D scalar voxel grid. Voxels are stored with x varying fastest:
/// `index = x + nx * (y + ny * z)`. `origin` is the RAS position (mm) of the
/// center of voxel (0, 0, 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    axes: AxisCodes,
    voxels: Vec<f64>,
}

impl SeriesVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        axes: AxisCodes,
        voxels: Vec<f64>,
    ) -> Result<Self, IngestError> {
        if dims.contains(&0) {
            return Err(IngestError::InvalidVolume(format!("empty axis in dims {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(IngestError::InvalidVolume(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(IngestError::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(IngestError::InvalidVolume("non-finite origin".into()));
        }
        if !axes.is_valid() {
            return Err(IngestError::InvalidVolume(format!("degenerate orientation {axes}")));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::InvalidVolume(format!("non-finite voxel at index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            axes,
            voxels,
        })
    }

    /// Trusted constructor for kernels whose outputs are valid by
    /// construction.
    pub(crate) fn from_parts(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        axes: AxisCodes,
        voxels: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(voxels.len(), dims.iter().product::<usize>());
        Self {
            dims,
            spacing,
            origin,
            axes,
            voxels,
        }
    }

    /// Canonical-orientation volume from a constant fill; handy in tests.
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self, IngestError> {
        Self::new(dims, spacing, [0.0; 3], AxisCodes::RAS, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn axes(&self) -> AxisCodes {
        self.axes
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    /// Reorients voxels so the axes read R, A, S (flip and permute only;
    /// oblique directions are snapped to their dominant axis beforehand).
    pub fn canonicalize(&self) -> SeriesVolume {
        if self.axes == AxisCodes::RAS {
            return self.clone();
        }
        // src_axis[k]: which voxel axis points along world axis k.
        let mut src_axis = [0usize; 3];
        for (i, code) in self.axes.0.iter().enumerate() {
            src_axis[code.world_axis()] = i;
        }
        let flip: [bool; 3] = std::array::from_fn(|k| !self.axes.0[src_axis[k]].is_positive());
        let dims: [usize; 3] = std::array::from_fn(|k| self.dims[src_axis[k]]);
        let spacing: [f64; 3] = std::array::from_fn(|k| self.spacing[src_axis[k]]);
        let mut origin = self.origin;
        for k in 0..3 {
            if flip[k] {
                origin[k] -= (dims[k] - 1) as f64 * spacing[k];
            }
        }
        let mut voxels = Vec::with_capacity(self.voxels.len());
        let mut src = [0usize; 3];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let out = [x, y, z];
                    for k in 0..3 {
                        src[src_axis[k]] = if flip[k] { dims[k] - 1 - out[k] } else { out[k] };
                    }
                    voxels.push(self.get(src[0], src[1], src[2]));
                }
            }
        }
        SeriesVolume {
            dims,
            spacing,
            origin,
            axes: AxisCodes::RAS,
            voxels,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], axes: AxisCodes) -> SeriesVolume {
        let n = dims.iter().product();
        SeriesVolume::new(dims, [1.0, 2.0, 3.0], [10.0, 20.0, 30.0], axes, (0..n).map(|v| v as f64).collect())
            .unwrap()
    }

    #[test]
    fn rejects_invalid_volumes() {
        assert!(SeriesVolume::new([0, 1, 1], [1.0; 3], [0.0; 3], AxisCodes::RAS, vec![]).is_err());
        assert!(SeriesVolume::new([1, 1, 1], [0.0, 1.0, 1.0], [0.0; 3], AxisCodes::RAS, vec![1.0]).is_err());
        assert!(SeriesVolume::new([1, 1, 1], [1.0; 3], [0.0; 3], AxisCodes::RAS, vec![f64::NAN]).is_err());
        assert!(SeriesVolume::new([2, 1, 1], [1.0; 3], [0.0; 3], AxisCodes::RAS, vec![1.0]).is_err());
    }

    #[test]
    fn orientation_strings() {
        let a: AxisCodes = "LPS".parse().unwrap();
        assert_eq!(a.to_string(), "LPS");
        assert!("RRS".parse::<AxisCodes>().is_err());
        assert!("RA".parse::<AxisCodes>().is_err());
    }

    #[test]
    fn canonicalize_identity_for_ras() {
        let v = ramp([3, 4, 5], AxisCodes::RAS);
        assert_eq!(v.canonicalize(), v);
    }

    #[test]
    fn canonicalize_flips_and_moves_origin() {
        let v = ramp([3, 2, 2], "LAS".parse().unwrap());
        let c = v.canonicalize();
        assert_eq!(c.axes(), AxisCodes::RAS);
        assert_eq!(c.dims(), [3, 2, 2]);
        // voxel 0 of the canonical volume is the old x = 2 voxel
        assert_eq!(c.get(0, 0, 0), v.get(2, 0, 0));
        assert_eq!(c.origin(), [10.0 - 2.0 * 1.0, 20.0, 30.0]);
    }

    #[test]
    fn canonicalize_permutes() {
        // voxel axes point along (S, R, A)
        let v = ramp([2, 3, 4], "SRA".parse().unwrap());
        let c = v.canonicalize();
        assert_eq!(c.dims(), [3, 4, 2]);
        assert_eq!(c.spacing(), [2.0, 3.0, 1.0]);
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..3 {
                    assert_eq!(c.get(x, y, z), v.get(z, x, y));
                }
            }
        }
    }
}
