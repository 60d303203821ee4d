//! Single-file little-endian NIfTI-1 (`.nii`) and FSL bval/bvec text I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{DwiVolume, GradientTable, Grid3, Volume3};

pub const HEADER_SIZE: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QOFFSET: usize = 268;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parse a NIfTI-1 image held in memory. 4D files come back as a
/// multi-channel volume with one channel per frame.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file too short for a NIfTI-1 header ({} bytes)", bytes.len())));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != b"n+1\0" {
        return Err(Error::Format("magic is not \"n+1\\0\" (only single-file .nii supported)".into()));
    }

    let mut dim = [0i16; 8];
    for (n, d) in dim.iter_mut().enumerate() {
        *d = i16_at(bytes, OFF_DIM + 2 * n);
    }
    let rank = dim[0];
    if !(3..=4).contains(&rank) {
        return Err(Error::Unsupported(format!("dim[0] = {rank}, only 3D and 4D images supported")));
    }
    let extents: Vec<usize> = (1..=rank as usize)
        .map(|n| if dim[n] < 1 { Err(Error::Corrupt(format!("dim[{n}] = {}", dim[n]))) } else { Ok(dim[n] as usize) })
        .collect::<Result<_>>()?;
    let frames = if rank == 4 { extents[3] } else { 1 };

    let datatype = i16_at(bytes, OFF_DATATYPE);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("datatype {other}"))),
    };

    let mut pixdim = [0f64; 3];
    for (n, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(bytes, OFF_PIXDIM + 4 * (n + 1)) as f64;
        if !(*p > 0.0) {
            // Some writers leave pixdim at zero; fall back to unit spacing.
            *p = 1.0;
        }
    }

    let qform_code = i16_at(bytes, OFF_QFORM_CODE);
    let sform_code = i16_at(bytes, OFF_SFORM_CODE);
    let origin = if qform_code > 0 {
        [0, 1, 2].map(|n| f32_at(bytes, OFF_QOFFSET + 4 * n) as f64)
    } else if sform_code > 0 {
        [0, 1, 2].map(|n| f32_at(bytes, OFF_SROW + 16 * n + 12) as f64)
    } else {
        [0.0; 3]
    };

    let grid =
        Grid3::new([extents[0], extents[1], extents[2]], pixdim, origin).map_err(|e| Error::Corrupt(e.to_string()))?;

    let vox_offset = f32_at(bytes, OFF_VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Corrupt(format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let count = grid.len() * frames;
    let needed = start + count * elem;
    if bytes.len() < needed {
        return Err(Error::Corrupt(format!(
            "header declares {count} voxels ({needed} bytes) but file has {} bytes",
            bytes.len()
        )));
    }

    let slope = f32_at(bytes, OFF_SCL_SLOPE);
    let inter = f32_at(bytes, OFF_SCL_INTER);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let payload = &bytes[start..needed];
    let mut data: Vec<f32> = match datatype {
        DT_FLOAT32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        DT_INT16 => payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        _ => payload.iter().map(|&b| b as f32).collect(),
    };
    if scaled {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = slope * *v + inter;
        }
    }
    Volume3::new(grid, frames, data).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3> {
    let bytes = fs::read(path.as_ref())?;
    parse_nifti(&bytes)
}

/// Read a 4D image and attach its gradient table.
pub fn read_dwi(path: impl AsRef<Path>, bval: impl AsRef<Path>, bvec: impl AsRef<Path>) -> Result<DwiVolume> {
    let series = read_nifti(path)?;
    let table = read_gradients(bval, bvec)?;
    DwiVolume::from_series(series, table)
}

/// Encode a volume as float32 NIfTI-1: 348-byte header immediately followed by data.
pub fn encode_nifti(v: &Volume3) -> Result<Vec<u8>> {
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("refusing to write non-finite data".into()));
    }
    let g = v.grid();
    for (n, &d) in g.dims.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::Unsupported(format!("dim {n} = {d} exceeds NIfTI-1 limit")));
        }
    }
    if v.channels() > i16::MAX as usize {
        return Err(Error::Unsupported("too many frames for NIfTI-1".into()));
    }
    let mut h = vec![0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let rank: i16 = if v.channels() > 1 { 4 } else { 3 };
    let dim: [i16; 8] = [rank, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, v.channels() as i16, 1, 1, 1];
    for (n, d) in dim.iter().enumerate() {
        h[OFF_DIM + 2 * n..OFF_DIM + 2 * n + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[OFF_BITPIX..OFF_BITPIX + 2].copy_from_slice(&32i16.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (n, p) in pixdim.iter().enumerate() {
        h[OFF_PIXDIM + 4 * n..OFF_PIXDIM + 4 * n + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&(HEADER_SIZE as f32).to_le_bytes());
    h[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&1f32.to_le_bytes());
    h[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&0f32.to_le_bytes());
    // mm + seconds
    h[OFF_XYZT_UNITS] = 2 | 8;
    h[OFF_QFORM_CODE..OFF_QFORM_CODE + 2].copy_from_slice(&1i16.to_le_bytes());
    // quatern_b/c/d stay zero: identity rotation.
    for n in 0..3 {
        let off = OFF_QOFFSET + 4 * n;
        h[off..off + 4].copy_from_slice(&(g.origin[n] as f32).to_le_bytes());
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn write_nifti(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(v)?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_dwi(d: &DwiVolume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(&d.to_series(), path)
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("not a number: {t:?}"))))
                .collect()
        })
        .collect()
}

/// Parse FSL-style b-values (one row) and b-vectors (three rows).
pub fn parse_gradients(bval_text: &str, bvec_text: &str) -> Result<GradientTable> {
    let bval_rows = parse_rows(bval_text)?;
    let bvals: Vec<f64> = match bval_rows.len() {
        1 => bval_rows.into_iter().next().unwrap_or_default(),
        // a single column is also common
        n if n > 1 && bval_rows.iter().all(|r| r.len() == 1) => bval_rows.into_iter().map(|r| r[0]).collect(),
        n => return Err(Error::Format(format!("bval file has {n} rows, expected 1"))),
    };
    let rows = parse_rows(bvec_text)?;
    if rows.len() != 3 {
        return Err(Error::Format(format!("bvec file has {} rows, expected 3", rows.len())));
    }
    if rows.iter().any(|r| r.len() != bvals.len()) {
        return Err(Error::Format(format!(
            "bvec rows have lengths {:?}, expected {}",
            rows.iter().map(Vec::len).collect::<Vec<_>>(),
            bvals.len()
        )));
    }
    let bvecs = (0..bvals.len()).map(|n| [rows[0][n], rows[1][n], rows[2][n]]).collect();
    GradientTable::new(bvals, bvecs)
}

pub fn read_gradients(bval_path: impl AsRef<Path>, bvec_path: impl AsRef<Path>) -> Result<GradientTable> {
    let bval = fs::read_to_string(bval_path.as_ref())?;
    let bvec = fs::read_to_string(bvec_path.as_ref())?;
    parse_gradients(&bval, &bvec)
}

pub fn format_gradients(t: &GradientTable) -> (String, String) {
    let join = |it: &mut dyn Iterator<Item = f64>| it.map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    let bval = join(&mut t.bvals().iter().copied()) + "\n";
    let mut bvec = String::new();
    for c in 0..3 {
        bvec.push_str(&join(&mut t.bvecs().iter().map(|g| g[c])));
        bvec.push('\n');
    }
    (bval, bvec)
}

pub fn write_gradients(t: &GradientTable, bval_path: impl AsRef<Path>, bvec_path: impl AsRef<Path>) -> Result<()> {
    let (bval, bvec) = format_gradients(t);
    fs::write(bval_path.as_ref(), bval)?;
    fs::write(bvec_path.as_ref(), bvec)?;
    Ok(())
}
