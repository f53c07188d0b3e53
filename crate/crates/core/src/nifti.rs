//! Single-file NIfTI-1 reading and writing.
//!
//! Reads are tolerant: either endianness (detected via `sizeof_hdr`), any of
//! the five supported datatypes, optional gzip wrapping (magic `1f 8b`), and
//! `scl_slope`/`scl_inter` intensity scaling. Writes are canonical: float32,
//! little-endian, `vox_offset` 352, magic `n+1\0`, sform carrying the
//! volume's affine. `read(write(v))` reproduces `v` bit-exactly.
//!
//! Geometry policy: sform wins when present; qform parameters are carried
//! through but never interpreted; with no sform the affine falls back to
//! diag(spacing) at a zero origin.

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use std::io::{Read, Write};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

/// NIfTI-1 datatype codes supported by this reader.
pub mod datatype {
    pub const UINT8: i16 = 2;
    pub const INT16: i16 = 4;
    pub const INT32: i16 = 8;
    pub const FLOAT32: i16 = 16;
    pub const FLOAT64: i16 = 64;
}

/// Header field byte offsets (NIfTI-1).
mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// The NIfTI-1 fields this pipeline reads, writes, or carries through.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Canonical header for writing `vol` as float32.
    pub fn for_volume(vol: &Volume3D, seed: Option<&NiftiHeader>) -> NiftiHeader {
        let [nx, ny, nz] = vol.geom.extents;
        let mut pixdim = [0.0f32; 8];
        pixdim[0] = 1.0; // qfac
        pixdim[1] = vol.geom.spacing[0];
        pixdim[2] = vol.geom.spacing[1];
        pixdim[3] = vol.geom.spacing[2];
        let srow = [vol.geom.affine[0], vol.geom.affine[1], vol.geom.affine[2]];
        let base = seed.cloned();
        NiftiHeader {
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype: datatype::FLOAT32,
            bitpix: 32,
            pixdim,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: base.as_ref().map_or(0x0a, |h| h.xyzt_units), // mm | sec
            descrip: base.as_ref().map_or([0u8; 80], |h| h.descrip),
            qform_code: base.as_ref().map_or(0, |h| h.qform_code),
            sform_code: base.as_ref().map_or(1, |h| h.sform_code.max(1)),
            quatern: base.as_ref().map_or([0.0; 3], |h| h.quatern),
            qoffset: base.as_ref().map_or([0.0; 3], |h| h.qoffset),
            srow,
            magic: MAGIC,
        }
    }
}

fn element_size(dt: i16) -> Result<usize> {
    Ok(match dt {
        datatype::UINT8 => 1,
        datatype::INT16 => 2,
        datatype::INT32 => 4,
        datatype::FLOAT32 => 4,
        datatype::FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn parse_header<E: ByteOrder>(b: &[u8]) -> NiftiHeader {
    let mut dim = [0i16; 8];
    let mut pixdim = [0.0f32; 8];
    for i in 0..8 {
        dim[i] = E::read_i16(&b[offset::DIM + 2 * i..]);
        pixdim[i] = E::read_f32(&b[offset::PIXDIM + 4 * i..]);
    }
    let mut srow = [[0.0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = E::read_f32(&b[offset::SROW_X + 16 * r + 4 * c..]);
        }
    }
    let mut descrip = [0u8; 80];
    descrip.copy_from_slice(&b[offset::DESCRIP..offset::DESCRIP + 80]);
    NiftiHeader {
        dim,
        datatype: E::read_i16(&b[offset::DATATYPE..]),
        bitpix: E::read_i16(&b[offset::BITPIX..]),
        pixdim,
        vox_offset: E::read_f32(&b[offset::VOX_OFFSET..]),
        scl_slope: E::read_f32(&b[offset::SCL_SLOPE..]),
        scl_inter: E::read_f32(&b[offset::SCL_INTER..]),
        xyzt_units: b[offset::XYZT_UNITS],
        descrip,
        qform_code: E::read_i16(&b[offset::QFORM_CODE..]),
        sform_code: E::read_i16(&b[offset::SFORM_CODE..]),
        quatern: [
            E::read_f32(&b[offset::QUATERN_B..]),
            E::read_f32(&b[offset::QUATERN_B + 4..]),
            E::read_f32(&b[offset::QUATERN_B + 8..]),
        ],
        qoffset: [
            E::read_f32(&b[offset::QOFFSET_X..]),
            E::read_f32(&b[offset::QOFFSET_X + 4..]),
            E::read_f32(&b[offset::QOFFSET_X + 8..]),
        ],
        srow,
        magic: [b[offset::MAGIC], b[offset::MAGIC + 1], b[offset::MAGIC + 2], b[offset::MAGIC + 3]],
    }
}

fn decode_payload<E: ByteOrder>(raw: &[u8], dt: i16, n: usize) -> Vec<f64> {
    match dt {
        datatype::UINT8 => raw[..n].iter().map(|&v| v as f64).collect(),
        datatype::INT16 => (0..n).map(|i| E::read_i16(&raw[2 * i..]) as f64).collect(),
        datatype::INT32 => (0..n).map(|i| E::read_i32(&raw[4 * i..]) as f64).collect(),
        datatype::FLOAT32 => (0..n).map(|i| E::read_f32(&raw[4 * i..]) as f64).collect(),
        datatype::FLOAT64 => (0..n).map(|i| E::read_f64(&raw[8 * i..])).collect(),
        _ => unreachable!("datatype checked before decoding"),
    }
}

fn read_decompressed(bytes: &[u8]) -> Result<(NiftiHeader, Volume3D)> {
    if bytes.len() < VOX_OFFSET {
        return Err(Error::TruncatedData { expected: VOX_OFFSET, actual: bytes.len() });
    }
    let le = LittleEndian::read_i32(&bytes[offset::SIZEOF_HDR..]);
    let big_endian = match le {
        348 => false,
        _ if BigEndian::read_i32(&bytes[offset::SIZEOF_HDR..]) == 348 => true,
        _ => return Err(Error::BadMagic),
    };
    let header = if big_endian {
        parse_header::<BigEndian>(bytes)
    } else {
        parse_header::<LittleEndian>(bytes)
    };
    if header.magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let elem = element_size(header.datatype)?;
    if header.dim[0] != 3 {
        return Err(Error::RankNotThree(header.dim[0]));
    }
    let extents = [header.dim[1], header.dim[2], header.dim[3]];
    if extents.iter().any(|&e| e < 1) {
        return Err(Error::GeometryMismatch(format!("non-positive extent in dim {extents:?}")));
    }
    let extents = [extents[0] as usize, extents[1] as usize, extents[2] as usize];
    let nvox = extents[0] * extents[1] * extents[2];

    let off = header.vox_offset;
    if !off.is_finite() || off < HEADER_SIZE as f32 {
        return Err(Error::BadMagic);
    }
    let off = off as usize;
    let need = off + nvox * elem;
    if bytes.len() < need {
        return Err(Error::TruncatedData { expected: need, actual: bytes.len() });
    }

    let raw = &bytes[off..];
    let mut values = if big_endian {
        decode_payload::<BigEndian>(raw, header.datatype, nvox)
    } else {
        decode_payload::<LittleEndian>(raw, header.datatype, nvox)
    };
    // slope 0 means "no scaling"; a (1, 0) pair is skipped so float payloads
    // survive bit-exactly (including negative zero).
    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();

    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::GeometryMismatch(format!("non-positive pixdim {spacing:?}")));
    }
    let affine = if header.sform_code > 0 {
        [
            header.srow[0],
            header.srow[1],
            header.srow[2],
            [0.0, 0.0, 0.0, 1.0],
        ]
    } else {
        Geometry::axis_aligned(extents, spacing).affine
    };
    let vol = Volume3D::new(Geometry { extents, spacing, affine }, data)?;

    // Return the endian-corrected header with bitpix normalized to datatype.
    let mut header = header;
    header.bitpix = (elem * 8) as i16;
    Ok((header, vol))
}

/// Decode a single-file NIfTI-1 volume from bytes (gzip detected
/// transparently). Only rank-3 volumes are accepted.
pub fn read_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume3D)> {
    if is_gzip(bytes) {
        let mut plain = Vec::new();
        flate2::read::MultiGzDecoder::new(bytes).read_to_end(&mut plain)?;
        read_decompressed(&plain)
    } else {
        read_decompressed(bytes)
    }
}

fn write_header(h: &NiftiHeader, out: &mut Vec<u8>) {
    let mut b = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut b[offset::SIZEOF_HDR..], 348);
    b[38] = b'r'; // "regular" flag, conventional
    for i in 0..8 {
        LittleEndian::write_i16(&mut b[offset::DIM + 2 * i..], h.dim[i]);
        LittleEndian::write_f32(&mut b[offset::PIXDIM + 4 * i..], h.pixdim[i]);
    }
    LittleEndian::write_i16(&mut b[offset::DATATYPE..], h.datatype);
    LittleEndian::write_i16(&mut b[offset::BITPIX..], h.bitpix);
    LittleEndian::write_f32(&mut b[offset::VOX_OFFSET..], h.vox_offset);
    LittleEndian::write_f32(&mut b[offset::SCL_SLOPE..], h.scl_slope);
    LittleEndian::write_f32(&mut b[offset::SCL_INTER..], h.scl_inter);
    b[offset::XYZT_UNITS] = h.xyzt_units;
    b[offset::DESCRIP..offset::DESCRIP + 80].copy_from_slice(&h.descrip);
    LittleEndian::write_i16(&mut b[offset::QFORM_CODE..], h.qform_code);
    LittleEndian::write_i16(&mut b[offset::SFORM_CODE..], h.sform_code);
    for i in 0..3 {
        LittleEndian::write_f32(&mut b[offset::QUATERN_B + 4 * i..], h.quatern[i]);
        LittleEndian::write_f32(&mut b[offset::QOFFSET_X + 4 * i..], h.qoffset[i]);
    }
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut b[offset::SROW_X + 16 * r + 4 * c..], h.srow[r][c]);
        }
    }
    b[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(&h.magic);
    out.extend_from_slice(&b);
    out.extend_from_slice(&[0u8; 4]); // no extensions
}

/// Encode `vol` as canonical float32 little-endian NIfTI-1 bytes.
/// `header_seed` carries provenance fields (descrip, units, qform) through.
pub fn write_nifti(vol: &Volume3D, header_seed: Option<&NiftiHeader>) -> Vec<u8> {
    let header = NiftiHeader::for_volume(vol, header_seed);
    let mut out = Vec::with_capacity(VOX_OFFSET + vol.data.len() * 4);
    write_header(&header, &mut out);
    let mut payload = vec![0u8; vol.data.len() * 4];
    LittleEndian::write_f32_into(&vol.data, &mut payload);
    out.extend_from_slice(&payload);
    out
}

/// Read a `.nii` or `.nii.gz` file.
pub fn read_nifti_file(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume3D)> {
    let bytes = std::fs::read(path)?;
    read_nifti(&bytes)
}

/// Write a `.nii` file, gzip-compressed when the path ends in `.gz`.
pub fn write_nifti_file(
    path: impl AsRef<Path>,
    vol: &Volume3D,
    header_seed: Option<&NiftiHeader>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_nifti(vol, header_seed);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes)?;
        std::fs::write(path, enc.finish()?)?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}
