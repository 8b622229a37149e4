//! Native volume files and a minimal single-frame float32 NIfTI-1 reader.
//!
//! Native layout, little-endian: `"NVOL"`, `u32 × 3` dims, `f32 × 3` voxel
//! size in mm, `u8` tissue code, `u8` smoothed flag, `u8` label code, then
//! the `f32` payload with x fastest.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Label, Tissue, Volume};
use crate::error::{Error, Result};

pub const NATIVE_MAGIC: &[u8; 4] = b"NVOL";
const NATIVE_HEADER: usize = 4 + 12 + 12 + 3;

const NIFTI_HEADER: usize = 348;
const NIFTI_FLOAT32: i16 = 16;

pub fn encode_native(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(NATIVE_HEADER + 4 * v.len());
    out.extend_from_slice(NATIVE_MAGIC);
    for &d in &v.dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &s in &v.voxel_mm {
        out.write_f32::<LittleEndian>(s).unwrap();
    }
    out.push(v.tissue.code());
    out.push(u8::from(v.smoothed));
    out.push(Label::code(v.label));
    for &x in &v.values {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
    out
}

pub fn decode_native(bytes: &[u8]) -> Result<Volume> {
    let what = "native volume";
    if bytes.len() < NATIVE_HEADER {
        return Err(Error::parse(
            what,
            format!("expected a {NATIVE_HEADER}-byte header, found {} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != NATIVE_MAGIC {
        return Err(Error::parse(what, format!("bad magic {:?}", &bytes[..4])));
    }
    let mut r = &bytes[4..NATIVE_HEADER];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().unwrap() as usize;
    }
    let mut voxel_mm = [0f32; 3];
    for s in &mut voxel_mm {
        *s = r.read_f32::<LittleEndian>().unwrap();
    }
    let tissue = Tissue::from_code(r[0])
        .ok_or_else(|| Error::parse(what, format!("unknown tissue code {}", r[0])))?;
    let smoothed = match r[1] {
        0 => false,
        1 => true,
        c => return Err(Error::parse(what, format!("smoothed flag must be 0 or 1, got {c}"))),
    };
    let label = Label::from_code(r[2])
        .ok_or_else(|| Error::parse(what, format!("unknown label code {}", r[2])))?;
    let payload = &bytes[NATIVE_HEADER..];
    let values = read_payload(what, dims, payload, false)?;
    let mut v = Volume::new(dims, voxel_mm, values).map_err(|e| Error::parse(what, e.to_string()))?;
    v.tissue = tissue;
    v.smoothed = smoothed;
    v.label = label;
    Ok(v)
}

fn read_payload(what: &str, dims: [usize; 3], payload: &[u8], big_endian: bool) -> Result<Vec<f32>> {
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(what, format!("dims {dims:?} overflow the addressable size")))?;
    if payload.len() != expected {
        return Err(Error::parse(
            what,
            format!(
                "dims {dims:?} need {expected} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut values = vec![0f32; expected / 4];
    if big_endian {
        BigEndian::read_f32_into(payload, &mut values);
    } else {
        LittleEndian::read_f32_into(payload, &mut values);
    }
    Ok(values)
}

/// Writes the native format.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_native(v)).map_err(|e| Error::io(path, e))
}

/// Reads a native file, or a NIfTI-1 file recognized by its header size.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(NATIVE_MAGIC) {
        decode_native(&bytes)
    } else {
        read_nifti(&bytes)
    }
}

/// Parses a single-file (`n+1`) NIfTI-1 image holding one float32 frame.
/// Intensity scaling is applied when the header sets a nonzero slope.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume> {
    let what = "nifti";
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::parse(
            what,
            format!("expected a {NIFTI_HEADER}-byte header, found {} bytes", bytes.len()),
        ));
    }
    let big_endian = match (LittleEndian::read_i32(bytes), BigEndian::read_i32(bytes)) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => return Err(Error::parse(what, format!("sizeof_hdr is {n}, expected 348"))),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::parse(
            what,
            format!("bad magic {:?}, expected single-file \"n+1\"", &bytes[344..348]),
        ));
    }
    let i16_at = |o: usize| {
        if big_endian {
            BigEndian::read_i16(&bytes[o..])
        } else {
            LittleEndian::read_i16(&bytes[o..])
        }
    };
    let f32_at = |o: usize| {
        if big_endian {
            BigEndian::read_f32(&bytes[o..])
        } else {
            LittleEndian::read_f32(&bytes[o..])
        }
    };
    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::parse(what, format!("dim[0] = {rank} is out of range")));
    }
    let extent = |i: usize| if i as i16 <= rank { dim[i] } else { 1 };
    if (4..=7).any(|i| extent(i) != 1) {
        return Err(Error::parse(what, "only single-frame 3-D images are supported"));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let e = extent(a + 1);
        if e < 1 {
            return Err(Error::parse(what, format!("dim[{}] = {e} is not positive", a + 1)));
        }
        *d = e as usize;
    }
    let datatype = i16_at(70);
    if datatype != NIFTI_FLOAT32 {
        return Err(Error::parse(
            what,
            format!("unsupported datatype {datatype}; only float32 (16) is read"),
        ));
    }
    let mut voxel_mm = [0f32; 3];
    for (a, s) in voxel_mm.iter_mut().enumerate() {
        let p = f32_at(76 + 4 * (a + 1)).abs();
        *s = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }
    let offset = f32_at(108);
    if !(offset.is_finite() && offset >= NIFTI_HEADER as f32) {
        return Err(Error::parse(what, format!("vox_offset {offset} is invalid")));
    }
    let offset = offset as usize;
    if offset > bytes.len() {
        return Err(Error::parse(
            what,
            format!("vox_offset {offset} is past the end of a {}-byte file", bytes.len()),
        ));
    }
    let payload_len = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(what, format!("dims {dims:?} overflow the addressable size")))?;
    let payload = &bytes[offset..];
    if payload.len() < payload_len {
        return Err(Error::parse(
            what,
            format!(
                "dims {dims:?} need {payload_len} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut values = read_payload(what, dims, &payload[..payload_len], big_endian)?;
    let (slope, inter) = (f32_at(112), f32_at(116));
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Volume::new(dims, voxel_mm, values)
}
