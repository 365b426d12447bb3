//! NIfTI-1 single-file volumes (`.nii`, `.nii.gz`).
//!
//! The reader accepts either byte order, the common scalar datatypes, and
//! sform/qform/pixdim geometry (in that order of preference). The writer
//! emits little-endian float32 data with an sform affine.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::volume::{AxisCode, AxisCodes, SeriesVolume};
use super::IngestError;

const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Datatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Datatype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            256 => Datatype::I8,
            512 => Datatype::U16,
            768 => Datatype::U32,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            Datatype::U8 | Datatype::I8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::I32 | Datatype::U32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn decode<B: ByteOrder>(self, b: &[u8]) -> f64 {
        match self {
            Datatype::U8 => f64::from(b[0]),
            Datatype::I8 => f64::from(b[0] as i8),
            Datatype::I16 => f64::from(B::read_i16(b)),
            Datatype::U16 => f64::from(B::read_u16(b)),
            Datatype::I32 => f64::from(B::read_i32(b)),
            Datatype::U32 => f64::from(B::read_u32(b)),
            Datatype::F32 => f64::from(B::read_f32(b)),
            Datatype::F64 => B::read_f64(b),
        }
    }
}

fn unreadable(path: &Path, reason: impl Into<String>) -> IngestError {
    IngestError::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IngestError> {
    let raw = fs::read(path).map_err(|e| unreadable(path, e.to_string()))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| unreadable(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Quaternion (b, c, d) plus qfac to a 3x3 rotation times spacing.
fn qform_matrix(b: f64, c: f64, d: f64, qfac: f64, pixdim: [f64; 3]) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * scale[j]))
}

fn parse<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<SeriesVolume, IngestError> {
    let i16_at = |off: usize| B::read_i16(&bytes[off..]);
    let f32_at = |off: usize| f64::from(B::read_f32(&bytes[off..]));

    let dim: [i64; 8] = std::array::from_fn(|i| i64::from(i16_at(40 + 2 * i)));
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(unreadable(path, format!("invalid dim[0] = {rank}")));
    }
    let sizes: Vec<usize> = (1..=rank as usize).map(|i| dim[i].max(0) as usize).collect();
    if sizes.contains(&0) {
        return Err(unreadable(path, format!("zero-length axis in dims {sizes:?}")));
    }
    if sizes.len() < 3 {
        return Err(IngestError::Not3D {
            path: path.to_path_buf(),
            detail: format!("rank {} with dims {sizes:?}", sizes.len()),
        });
    }
    // trailing singleton dimensions (e.g. a 4D file with one time point) are squeezed
    if sizes[3..].iter().any(|&n| n != 1) {
        return Err(IngestError::Not3D {
            path: path.to_path_buf(),
            detail: format!("dims {sizes:?} do not squeeze to three axes"),
        });
    }
    let dims = [sizes[0], sizes[1], sizes[2]];

    let code = i16_at(70);
    let datatype = Datatype::from_code(code).ok_or_else(|| unreadable(path, format!("unsupported datatype {code}")))?;
    let vox_offset = f32_at(108).max(HEADER_SIZE as f64) as usize;
    let n = dims[0] * dims[1] * dims[2];
    let need = vox_offset + n * datatype.width();
    if bytes.len() < need {
        return Err(unreadable(path, format!("truncated: {} bytes, expected {need}", bytes.len())));
    }
    let slope = f32_at(112);
    let inter = f32_at(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    let voxels: Vec<f64> = bytes[vox_offset..need]
        .chunks_exact(datatype.width())
        .map(|c| datatype.decode::<B>(c) * slope + inter)
        .collect();

    let pixdim: [f64; 4] = std::array::from_fn(|i| f32_at(76 + 4 * i));
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let (columns, origin): ([[f64; 3]; 3], [f64; 3]) = if sform_code > 0 {
        let rows: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| f32_at(280 + 16 * r + 4 * c)));
        (std::array::from_fn(|c| std::array::from_fn(|r| rows[r][c])), [rows[0][3], rows[1][3], rows[2][3]])
    } else if qform_code > 0 {
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let m = qform_matrix(f32_at(256), f32_at(260), f32_at(264), qfac, [pixdim[1], pixdim[2], pixdim[3]]);
        (std::array::from_fn(|c| std::array::from_fn(|r| m[r][c])), [f32_at(268), f32_at(272), f32_at(276)])
    } else {
        let s = [pixdim[1], pixdim[2], pixdim[3]];
        (std::array::from_fn(|c| std::array::from_fn(|r| if r == c { s[c] } else { 0.0 })), [0.0; 3])
    };
    let spacing: [f64; 3] = std::array::from_fn(|c| {
        let v = columns[c];
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    });
    let spacing = spacing.map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 });
    let axes = AxisCodes(std::array::from_fn(|c| AxisCode::from_ras_direction(columns[c])));
    if !axes.is_valid() {
        return Err(unreadable(path, "affine has no dominant axis per voxel axis"));
    }
    SeriesVolume::new(dims, spacing, origin, axes, voxels)
}

/// Reads a volume in its stored orientation.
pub fn read_nifti(path: &Path) -> Result<SeriesVolume, IngestError> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(unreadable(path, format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(unreadable(path, "not a NIfTI-1 file (sizeof_hdr != 348)"))
    }
}

/// Encodes a volume as an uncompressed NIfTI-1 byte image (float32).
pub fn encode_nifti(v: &SeriesVolume, description: &str) -> Vec<u8> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = v.dims();
    let dim = [3i16, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], 16);
    LittleEndian::write_i16(&mut h[72..], 32);
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    let desc = description.as_bytes();
    let len = desc.len().min(79);
    h[148..148 + len].copy_from_slice(&desc[..len]);
    LittleEndian::write_i16(&mut h[254..], 1);
    let origin = v.origin();
    let mut srow = [[0.0f32; 4]; 3];
    for (axis, code) in v.axes().0.iter().enumerate() {
        let sign = if code.is_positive() { 1.0 } else { -1.0 };
        srow[code.world_axis()][axis] = (sign * sp[axis]) as f32;
    }
    for r in 0..3 {
        srow[r][3] = origin[r] as f32;
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], srow[r][c]);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(v.len() * 4);
    for &x in v.voxels() {
        h.extend_from_slice(&(x as f32).to_le_bytes());
    }
    h
}

/// Writes `.nii` or, for paths ending in `.gz`, gzip-compressed `.nii.gz`.
pub fn write_nifti(path: &Path, v: &SeriesVolume, description: &str) -> std::io::Result<()> {
    let bytes = encode_nifti(v, description);
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::with_capacity(bytes.len() / 4), Compression::fast());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)
    } else {
        fs::write(path, bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> SeriesVolume {
        let dims = [4, 3, 2];
        SeriesVolume::new(
            dims,
            [1.5, 2.0, 7.5],
            [-10.0, 5.0, 2.5],
            "LPS".parse().unwrap(),
            (0..24).map(|i| i as f64 * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_gz_and_plain() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, &ramp(), "test").unwrap();
            let back = read_nifti(&p).unwrap();
            assert_eq!(back, ramp());
        }
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        let bytes = encode_nifti(&ramp(), "");
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_nifti(&p), Err(IngestError::UnreadableFile { .. })));
        fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(read_nifti(&p), Err(IngestError::UnreadableFile { .. })));
        let gz = dir.path().join("t.nii.gz");
        write_nifti(&gz, &ramp(), "").unwrap();
        let raw = fs::read(&gz).unwrap();
        fs::write(&gz, &raw[..raw.len() / 2]).unwrap();
        assert!(matches!(read_nifti(&gz), Err(IngestError::UnreadableFile { .. })));
    }

    #[test]
    fn two_dimensional_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.nii");
        let mut bytes = encode_nifti(&ramp(), "");
        LittleEndian::write_i16(&mut bytes[40..], 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(IngestError::Not3D { .. })));
    }

    #[test]
    fn four_d_with_one_frame_squeezes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t1.nii");
        let mut bytes = encode_nifti(&ramp(), "");
        LittleEndian::write_i16(&mut bytes[40..], 4);
        fs::write(&p, &bytes).unwrap();
        assert_eq!(read_nifti(&p).unwrap().dims(), [4, 3, 2]);
        LittleEndian::write_i16(&mut bytes[48..], 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(IngestError::Not3D { .. })));
    }

    #[test]
    fn qform_only_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.nii");
        let mut bytes = encode_nifti(&ramp(), "");
        LittleEndian::write_i16(&mut bytes[254..], 0);
        LittleEndian::write_i16(&mut bytes[252..], 1);
        // 180 degrees about z: x and y flip, which is what LPS means in RAS
        LittleEndian::write_f32(&mut bytes[256..], 0.0);
        LittleEndian::write_f32(&mut bytes[260..], 0.0);
        LittleEndian::write_f32(&mut bytes[264..], 1.0);
        LittleEndian::write_f32(&mut bytes[268..], -10.0);
        LittleEndian::write_f32(&mut bytes[272..], 5.0);
        LittleEndian::write_f32(&mut bytes[276..], 2.5);
        fs::write(&p, &bytes).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.axes().to_string(), "LPS");
        assert_eq!(v.spacing(), [1.5, 2.0, 7.5]);
        assert_eq!(v.origin(), [-10.0, 5.0, 2.5]);
    }

    #[test]
    fn int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let mut h = encode_nifti(&SeriesVolume::filled([2, 1, 1], [1.0; 3], 0.0).unwrap(), "");
        h.truncate(DEFAULT_VOX_OFFSET);
        LittleEndian::write_i16(&mut h[70..], 4);
        LittleEndian::write_f32(&mut h[112..], 2.0);
        LittleEndian::write_f32(&mut h[116..], 1.0);
        h.extend_from_slice(&(-3i16).to_le_bytes());
        h.extend_from_slice(&(7i16).to_le_bytes());
        fs::write(&p, &h).unwrap();
        assert_eq!(read_nifti(&p).unwrap().voxels(), &[-5.0, 15.0]);
    }
}
