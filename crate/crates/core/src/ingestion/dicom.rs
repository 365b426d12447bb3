//! Minimal DICOM part-10 reader and writer.
//!
//! Covers what series ingestion needs: implicit and explicit VR little
//! endian transfer syntaxes, sequences (skipped), and native (uncompressed)
//! single-frame monochrome pixel data. Encapsulated pixel data is rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::headers::SliceRecord;
use super::IngestError;

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";
const IMPLEMENTATION_CLASS_UID: &str = "1.2.826.0.1.3680043.9.7433.1.1";

const PIXEL_DATA: (u16, u16) = (0x7FE0, 0x0010);
const ITEM: (u16, u16) = (0xFFFE, 0xE000);
const ITEM_DELIMITATION: (u16, u16) = (0xFFFE, 0xE00D);
const SEQUENCE_DELIMITATION: (u16, u16) = (0xFFFE, 0xE0DD);
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// Tags the ingestion layer understands, with their keyword and VR.
const DICTIONARY: &[(u16, u16, &str, &str)] = &[
    (0x0008, 0x0016, "SOPClassUID", "UI"),
    (0x0008, 0x0018, "SOPInstanceUID", "UI"),
    (0x0008, 0x0020, "StudyDate", "DA"),
    (0x0008, 0x0060, "Modality", "CS"),
    (0x0008, 0x0070, "Manufacturer", "LO"),
    (0x0008, 0x1030, "StudyDescription", "LO"),
    (0x0008, 0x103E, "SeriesDescription", "LO"),
    (0x0008, 0x1090, "ManufacturerModelName", "LO"),
    (0x0010, 0x0020, "PatientID", "LO"),
    (0x0018, 0x0015, "BodyPartExamined", "CS"),
    (0x0018, 0x0050, "SliceThickness", "DS"),
    (0x0018, 0x0080, "RepetitionTime", "DS"),
    (0x0018, 0x0081, "EchoTime", "DS"),
    (0x0018, 0x0088, "SpacingBetweenSlices", "DS"),
    (0x0018, 0x1030, "ProtocolName", "LO"),
    (0x0018, 0x9087, "DiffusionBValue", "FD"),
    (0x0019, 0x100C, "0019,100C", "IS"),
    (0x0020, 0x000D, "StudyInstanceUID", "UI"),
    (0x0020, 0x000E, "SeriesInstanceUID", "UI"),
    (0x0020, 0x0011, "SeriesNumber", "IS"),
    (0x0020, 0x0013, "InstanceNumber", "IS"),
    (0x0020, 0x0032, "ImagePositionPatient", "DS"),
    (0x0020, 0x0037, "ImageOrientationPatient", "DS"),
    (0x0020, 0x1041, "SliceLocation", "DS"),
    (0x0028, 0x0002, "SamplesPerPixel", "US"),
    (0x0028, 0x0004, "PhotometricInterpretation", "CS"),
    (0x0028, 0x0008, "NumberOfFrames", "IS"),
    (0x0028, 0x0010, "Rows", "US"),
    (0x0028, 0x0011, "Columns", "US"),
    (0x0028, 0x0030, "PixelSpacing", "DS"),
    (0x0028, 0x0100, "BitsAllocated", "US"),
    (0x0028, 0x0101, "BitsStored", "US"),
    (0x0028, 0x0102, "HighBit", "US"),
    (0x0028, 0x0103, "PixelRepresentation", "US"),
    (0x0028, 0x1052, "RescaleIntercept", "DS"),
    (0x0028, 0x1053, "RescaleSlope", "DS"),
    (0x0032, 0x1060, "RequestedProcedureDescription", "LO"),
    (0x0040, 0x0007, "ScheduledProcedureStepDescription", "LO"),
    (0x0040, 0x0254, "PerformedProcedureStepDescription", "LO"),
    (0x0043, 0x1039, "0043,1039", "IS"),
    (0x2001, 0x1003, "2001,1003", "FL"),
];

fn lookup_tag(group: u16, element: u16) -> Option<(&'static str, &'static str)> {
    DICTIONARY
        .iter()
        .find(|(g, e, _, _)| *g == group && *e == element)
        .map(|(_, _, k, vr)| (*k, *vr))
}

fn lookup_keyword(key: &str) -> Option<(u16, u16, &'static str)> {
    DICTIONARY.iter().find(|(_, _, k, _)| *k == key).map(|(g, e, _, vr)| (*g, *e, *vr))
}

fn tag_key(group: u16, element: u16) -> String {
    format!("{group:04X},{element:04X}")
}

fn parse_tag_key(key: &str) -> Option<(u16, u16)> {
    let (g, e) = key.split_once(',')?;
    Some((u16::from_str_radix(g, 16).ok()?, u16::from_str_radix(e, 16).ok()?))
}

fn has_long_length(vr: &str) -> bool {
    matches!(vr, "OB" | "OD" | "OF" | "OL" | "OV" | "OW" | "SQ" | "SV" | "UC" | "UN" | "UR" | "UT" | "UV")
}

fn is_text_vr(vr: &str) -> bool {
    matches!(
        vr,
        "AE" | "AS" | "CS" | "DA" | "DS" | "DT" | "IS" | "LO" | "LT" | "PN" | "SH" | "ST" | "TM" | "UC" | "UI" | "UR" | "UT"
    )
}

#[derive(Debug)]
struct ParseError(String);

type ParseResult<T> = Result<T, ParseError>;

fn err<T>(msg: impl Into<String>) -> ParseResult<T> {
    Err(ParseError(msg.into()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    explicit: bool,
}

struct Element<'a> {
    tag: (u16, u16),
    vr: String,
    /// `None` for undefined-length values.
    value: Option<&'a [u8]>,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> ParseResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return err(format!("unexpected end of data at byte {} (need {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> ParseResult<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    fn u32(&mut self) -> ParseResult<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn peek_group(&self) -> Option<u16> {
        (self.pos + 2 <= self.buf.len()).then(|| LittleEndian::read_u16(&self.buf[self.pos..]))
    }

    fn element(&mut self) -> ParseResult<Element<'a>> {
        let tag = (self.u16()?, self.u16()?);
        if tag.0 == 0xFFFE {
            // item and delimiter tags never carry a VR
            let len = self.u32()?;
            let value = if len == UNDEFINED_LENGTH { None } else { Some(self.take(len as usize)?) };
            return Ok(Element { tag, vr: String::new(), value });
        }
        let (vr, len) = if self.explicit {
            let vr = String::from_utf8_lossy(self.take(2)?).into_owned();
            if has_long_length(&vr) {
                self.take(2)?;
                (vr, self.u32()?)
            } else {
                (vr, u32::from(self.u16()?))
            }
        } else {
            let vr = lookup_tag(tag.0, tag.1).map(|(_, vr)| vr).unwrap_or("UN");
            (vr.to_string(), self.u32()?)
        };
        if len == UNDEFINED_LENGTH {
            if tag == PIXEL_DATA {
                return err("encapsulated (compressed) pixel data is not supported");
            }
            self.skip_undefined_sequence()?;
            return Ok(Element { tag, vr, value: None });
        }
        let value = self.take(len as usize)?;
        Ok(Element { tag, vr, value: Some(value) })
    }

    /// Skips items until the sequence delimiter.
    fn skip_undefined_sequence(&mut self) -> ParseResult<()> {
        loop {
            let el = self.element()?;
            match el.tag {
                SEQUENCE_DELIMITATION => return Ok(()),
                ITEM if el.value.is_none() => self.skip_undefined_item()?,
                ITEM => {}
                other => return err(format!("unexpected tag {} inside sequence", tag_key(other.0, other.1))),
            }
        }
    }

    fn skip_undefined_item(&mut self) -> ParseResult<()> {
        loop {
            if self.at_end() {
                return err("unterminated sequence item");
            }
            let el = self.element()?;
            if el.tag == ITEM_DELIMITATION {
                return Ok(());
            }
        }
    }
}

fn decode_text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .trim_end_matches(['\0', ' '])
        .trim_start()
        .to_string()
}

fn decode_binary(vr: &str, bytes: &[u8]) -> Option<String> {
    let width = match vr {
        "US" | "SS" => 2,
        "UL" | "SL" | "FL" => 4,
        "FD" => 8,
        _ => return None,
    };
    let parts: Vec<String> = bytes
        .chunks_exact(width)
        .map(|c| match vr {
            "US" => LittleEndian::read_u16(c).to_string(),
            "SS" => LittleEndian::read_i16(c).to_string(),
            "UL" => LittleEndian::read_u32(c).to_string(),
            "SL" => LittleEndian::read_i32(c).to_string(),
            "FL" => LittleEndian::read_f32(c).to_string(),
            _ => LittleEndian::read_f64(c).to_string(),
        })
        .collect();
    Some(parts.join("\\"))
}

fn parse(bytes: &[u8]) -> ParseResult<SliceRecord> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return err("missing DICM part-10 preamble");
    }
    let mut cur = Cursor { buf: bytes, pos: 132, explicit: true };
    let mut transfer_syntax = None;
    while cur.peek_group() == Some(0x0002) {
        let el = cur.element()?;
        if el.tag == (0x0002, 0x0010) {
            transfer_syntax = el.value.map(decode_text);
        }
    }
    cur.explicit = match transfer_syntax.as_deref() {
        Some(EXPLICIT_VR_LE) => true,
        Some(IMPLICIT_VR_LE) | None => false,
        Some(other) => return err(format!("unsupported transfer syntax {other}")),
    };

    let mut attributes = BTreeMap::new();
    let mut pixel_bytes: Option<&[u8]> = None;
    while !cur.at_end() {
        let el = cur.element()?;
        let Some(value) = el.value else { continue };
        if el.tag == PIXEL_DATA {
            pixel_bytes = Some(value);
            continue;
        }
        let known = lookup_tag(el.tag.0, el.tag.1);
        let key = known.map(|(k, _)| k.to_string()).unwrap_or_else(|| tag_key(el.tag.0, el.tag.1));
        // UN (or implicit) values of dictionary tags decode with the dictionary VR
        let vr = match (el.vr.as_str(), known) {
            ("UN", Some((_, vr))) => vr,
            (vr, _) => vr,
        };
        if is_text_vr(vr) {
            attributes.insert(key, decode_text(value));
        } else if let Some(s) = decode_binary(vr, value) {
            attributes.insert(key, s);
        }
    }

    let mut rec = SliceRecord { attributes, ..Default::default() };
    if let Some(px) = pixel_bytes {
        decode_pixels(&mut rec, px)?;
    }
    Ok(rec)
}

fn decode_pixels(rec: &mut SliceRecord, px: &[u8]) -> ParseResult<()> {
    let num = |k: &str| rec.attr_number(k).map(|v| v as usize);
    let rows = num("Rows").ok_or_else(|| ParseError("pixel data without Rows".into()))?;
    let cols = num("Columns").ok_or_else(|| ParseError("pixel data without Columns".into()))?;
    if num("SamplesPerPixel").unwrap_or(1) != 1 {
        return err("only single-sample (monochrome) pixel data is supported");
    }
    if num("NumberOfFrames").unwrap_or(1) != 1 {
        return err("multi-frame images are not supported");
    }
    let bits = num("BitsAllocated").unwrap_or(16);
    let signed = num("PixelRepresentation").unwrap_or(0) == 1;
    let n = rows * cols;
    let need = n * bits / 8;
    if bits % 8 != 0 || px.len() < need {
        return err(format!("pixel data holds {} bytes, {rows}x{cols}x{bits}-bit needs {need}", px.len()));
    }
    let pixels: Vec<f64> = match (bits, signed) {
        (8, false) => px[..n].iter().map(|&b| f64::from(b)).collect(),
        (8, true) => px[..n].iter().map(|&b| f64::from(b as i8)).collect(),
        (16, false) => px.chunks_exact(2).take(n).map(|c| f64::from(LittleEndian::read_u16(c))).collect(),
        (16, true) => px.chunks_exact(2).take(n).map(|c| f64::from(LittleEndian::read_i16(c))).collect(),
        (32, false) => px.chunks_exact(4).take(n).map(|c| f64::from(LittleEndian::read_u32(c))).collect(),
        (32, true) => px.chunks_exact(4).take(n).map(|c| f64::from(LittleEndian::read_i32(c))).collect(),
        _ => return err(format!("unsupported BitsAllocated {bits}")),
    };
    rec.rows = rows;
    rec.columns = cols;
    rec.pixels = pixels;
    Ok(())
}

/// True when the file carries the part-10 `DICM` marker.
pub fn is_dicom_file(path: &Path) -> bool {
    let mut head = [0u8; 132];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head[128..132] == b"DICM")
        .unwrap_or(false)
}

pub fn parse_dicom(bytes: &[u8]) -> Result<SliceRecord, IngestError> {
    parse(bytes).map_err(|e| IngestError::UnreadableFile {
        path: "<memory>".into(),
        reason: e.0,
    })
}

pub fn read_dicom_file(path: &Path) -> Result<SliceRecord, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rec = parse(&bytes).map_err(|e| IngestError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.0,
    })?;
    rec.source = Some(path.to_path_buf());
    Ok(rec)
}

fn push_element(out: &mut Vec<u8>, tag: (u16, u16), vr: &str, value: &[u8]) {
    let mut hdr = [0u8; 4];
    LittleEndian::write_u16(&mut hdr[..2], tag.0);
    LittleEndian::write_u16(&mut hdr[2..], tag.1);
    out.extend_from_slice(&hdr);
    out.extend_from_slice(vr.as_bytes());
    if has_long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn encode_value(vr: &str, text: &str) -> io::Result<Vec<u8>> {
    let bad = |e: String| io::Error::new(io::ErrorKind::InvalidInput, e);
    let mut bytes = match vr {
        "US" | "SS" | "UL" | "SL" | "FL" | "FD" => {
            let mut b = Vec::new();
            for part in text.split('\\') {
                let v: f64 = part.trim().parse().map_err(|_| bad(format!("'{part}' is not numeric ({vr})")))?;
                match vr {
                    "US" => b.extend_from_slice(&(v as u16).to_le_bytes()),
                    "SS" => b.extend_from_slice(&(v as i16).to_le_bytes()),
                    "UL" => b.extend_from_slice(&(v as u32).to_le_bytes()),
                    "SL" => b.extend_from_slice(&(v as i32).to_le_bytes()),
                    "FL" => b.extend_from_slice(&(v as f32).to_le_bytes()),
                    _ => b.extend_from_slice(&v.to_le_bytes()),
                }
            }
            b
        }
        _ => text.as_bytes().to_vec(),
    };
    if bytes.len() % 2 == 1 {
        bytes.push(if vr == "UI" { 0 } else { b' ' });
    }
    Ok(bytes)
}

/// Serializes a slice as an explicit VR little endian part-10 file with
/// 16-bit signed pixel data. Stored pixel values must fit in `i16`.
pub fn encode_dicom(rec: &SliceRecord) -> io::Result<Vec<u8>> {
    if rec.pixels.len() != rec.rows * rec.columns {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "pixel count does not match the grid"));
    }
    let mut elements: BTreeMap<(u16, u16), (&str, Vec<u8>)> = BTreeMap::new();
    for (key, value) in &rec.attributes {
        let (tag, vr) = match lookup_keyword(key) {
            Some((g, e, vr)) => ((g, e), vr),
            None => {
                let tag = parse_tag_key(key)
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("unknown attribute '{key}'")))?;
                (tag, "LO")
            }
        };
        elements.insert(tag, (vr, encode_value(vr, value)?));
    }
    let has_sop_class = elements.contains_key(&(0x0008, 0x0016));
    let mut set = |k: &str, v: String| -> io::Result<()> {
        let (g, e, vr) = lookup_keyword(k).expect("pixel module keywords are in the dictionary");
        elements.insert((g, e), (vr, encode_value(vr, &v)?));
        Ok(())
    };
    set("SamplesPerPixel", "1".into())?;
    set("PhotometricInterpretation", "MONOCHROME2".into())?;
    set("Rows", rec.rows.to_string())?;
    set("Columns", rec.columns.to_string())?;
    set("BitsAllocated", "16".into())?;
    set("BitsStored", "16".into())?;
    set("HighBit", "15".into())?;
    set("PixelRepresentation", "1".into())?;
    if !has_sop_class {
        set("SOPClassUID", MR_IMAGE_STORAGE.into())?;
    }
    let mut px = Vec::with_capacity(rec.pixels.len() * 2);
    for &p in &rec.pixels {
        let r = p.round();
        if !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&r) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("pixel value {p} does not fit 16 bits")));
        }
        px.extend_from_slice(&(r as i16).to_le_bytes());
    }
    elements.insert(PIXEL_DATA, ("OW", px));

    let sop_class = rec.attr("SOPClassUID").unwrap_or(MR_IMAGE_STORAGE);
    let sop_instance = rec
        .attr("SOPInstanceUID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}.{}", rec.attr("SeriesInstanceUID").unwrap_or("2.25"), rec.attr("InstanceNumber").unwrap_or("1")));
    let mut meta = Vec::new();
    push_element(&mut meta, (0x0002, 0x0001), "OB", &[0, 1]);
    push_element(&mut meta, (0x0002, 0x0002), "UI", &encode_value("UI", sop_class)?);
    push_element(&mut meta, (0x0002, 0x0003), "UI", &encode_value("UI", &sop_instance)?);
    push_element(&mut meta, (0x0002, 0x0010), "UI", &encode_value("UI", EXPLICIT_VR_LE)?);
    push_element(&mut meta, (0x0002, 0x0012), "UI", &encode_value("UI", IMPLEMENTATION_CLASS_UID)?);

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    push_element(&mut out, (0x0002, 0x0000), "UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (tag, (vr, value)) in &elements {
        push_element(&mut out, *tag, vr, value);
    }
    Ok(out)
}

pub fn write_dicom_file(path: &Path, rec: &SliceRecord) -> io::Result<()> {
    fs::write(path, encode_dicom(rec)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SliceRecord {
        let mut r = SliceRecord {
            rows: 2,
            columns: 3,
            pixels: vec![0.0, 1.0, -2.0, 300.0, 4.0, 5.0],
            ..Default::default()
        };
        r.set("PatientID", "P7")
            .set("StudyInstanceUID", "1.2.840.1")
            .set("SeriesInstanceUID", "1.2.840.1.5")
            .set("SeriesDescription", "ep2d_diff_b800")
            .set("BodyPartExamined", "ABDOMEN")
            .set("DiffusionBValue", "800")
            .set("ImagePositionPatient", "-1.5\\2\\30.25")
            .set("PixelSpacing", "0.75\\0.75")
            .set("0019,100C", "800");
        r
    }

    #[test]
    fn explicit_round_trip() {
        let rec = sample();
        let bytes = encode_dicom(&rec).unwrap();
        let back = parse_dicom(&bytes).unwrap();
        assert_eq!(back.rows, 2);
        assert_eq!(back.columns, 3);
        assert_eq!(back.pixels, rec.pixels);
        for key in ["PatientID", "SeriesDescription", "BodyPartExamined", "ImagePositionPatient", "0019,100C"] {
            assert_eq!(back.attr(key), rec.attr(key), "{key}");
        }
        assert_eq!(back.attr_number("DiffusionBValue"), Some(800.0));
    }

    /// Hand-built implicit VR file with an undefined-length sequence.
    #[test]
    fn implicit_vr_with_sequence() {
        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        let mut meta = Vec::new();
        push_element(&mut meta, (0x0002, 0x0010), "UI", &encode_value("UI", IMPLICIT_VR_LE).unwrap());
        push_element(&mut out, (0x0002, 0x0000), "UL", &(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let implicit = |out: &mut Vec<u8>, g: u16, e: u16, v: &[u8]| {
            out.extend_from_slice(&g.to_le_bytes());
            out.extend_from_slice(&e.to_le_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
        };
        implicit(&mut out, 0x0008, 0x103E, b"t2_tse_tra ");
        // (0008,1140) sequence of undefined length with one undefined-length item
        out.extend_from_slice(&0x0008u16.to_le_bytes());
        out.extend_from_slice(&0x1140u16.to_le_bytes());
        out.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        out.extend_from_slice(&0xFFFEu16.to_le_bytes());
        out.extend_from_slice(&0xE000u16.to_le_bytes());
        out.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        implicit(&mut out, 0x0008, 0x1150, b"1.2\0");
        implicit(&mut out, 0xFFFE, 0xE00D, b"");
        implicit(&mut out, 0xFFFE, 0xE0DD, b"");
        implicit(&mut out, 0x0010, 0x0020, b"PX");
        implicit(&mut out, 0x0028, 0x0010, &1u16.to_le_bytes());
        implicit(&mut out, 0x0028, 0x0011, &2u16.to_le_bytes());
        implicit(&mut out, 0x0028, 0x0100, &8u16.to_le_bytes());
        implicit(&mut out, 0x7FE0, 0x0010, &[7, 9]);
        let rec = parse_dicom(&out).unwrap();
        assert_eq!(rec.attr("SeriesDescription"), Some("t2_tse_tra"));
        assert_eq!(rec.attr("PatientID"), Some("PX"));
        assert_eq!(rec.pixels, vec![7.0, 9.0]);
    }

    #[test]
    fn truncated_and_foreign_files() {
        let bytes = encode_dicom(&sample()).unwrap();
        assert!(parse_dicom(&bytes[..bytes.len() - 5]).is_err());
        assert!(parse_dicom(b"not a dicom file").is_err());
    }

    #[test]
    fn unsupported_transfer_syntax() {
        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        push_element(&mut out, (0x0002, 0x0010), "UI", &encode_value("UI", "1.2.840.10008.1.2.4.50").unwrap());
        let e = parse_dicom(&out).unwrap_err().to_string();
        assert!(e.contains("transfer syntax"), "{e}");
    }
}
