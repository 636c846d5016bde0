//! Minimal NIfTI-1 reader/writer for the narrow subset this project needs:
//! little-endian single-file `.nii` / `.nii.gz`, axis-aligned grids, scalar
//! volumes (uint8, int16, int32, float32, float64) and displacement fields
//! stored as 4D volumes with dim[4] = 3 and a `disp:` tag in `descrip`.
//!
//! Big-endian files, `.hdr`/`.img` pairs and oblique orientations are
//! rejected with distinct messages rather than silently misread.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::transform::DisplacementField;
use crate::volume::{IntensityUnits, LabelMask, Volume3};

const HEADER_SIZE: usize = 348;
/// Writer places voxel data right after the 4-byte extension flag.
const VOX_OFFSET_OUT: usize = 352;
/// Cap on decompressed file size so a tiny gzip bomb cannot exhaust memory.
const MAX_DECOMPRESSED: u64 = 1 << 30;

mod dt {
    pub const UINT8: i16 = 2;
    pub const INT16: i16 = 4;
    pub const INT32: i16 = 8;
    pub const FLOAT32: i16 = 16;
    pub const FLOAT64: i16 = 64;
}

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

#[derive(Debug, Clone)]
pub enum LoadedNifti {
    Volume(Volume3),
    Mask(LabelMask),
    Field(DisplacementField),
}

fn rd_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn rd_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn rd_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Nifti(msg.into())
}

/// Parse an in-memory `.nii` or `.nii.gz` byte stream.
///
/// This is the untrusted-input entry point the fuzz targets drive; every
/// failure path must return an error rather than panic or over-allocate.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<LoadedNifti> {
    let decompressed;
    let raw: &[u8] = if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        let n = GzDecoder::new(bytes)
            .take(MAX_DECOMPRESSED + 1)
            .read_to_end(&mut out)
            .map_err(|e| bad(format!("gzip: {e}")))?;
        if n as u64 > MAX_DECOMPRESSED {
            return Err(bad("gzip stream expands beyond the 1 GiB limit"));
        }
        decompressed = out;
        &decompressed
    } else {
        bytes
    };

    if raw.len() < HEADER_SIZE {
        return Err(bad(format!("truncated header ({} bytes, need {HEADER_SIZE})", raw.len())));
    }

    let sizeof_hdr = rd_i32(raw, offset::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(bad("big-endian NIfTI unsupported"));
        }
        return Err(bad(format!("not a NIfTI-1 file (sizeof_hdr = {sizeof_hdr})")));
    }
    let magic = &raw[offset::MAGIC..offset::MAGIC + 4];
    if magic != b"n+1\0" {
        if magic == b"ni1\0" {
            return Err(bad("detached .hdr/.img pairs unsupported"));
        }
        return Err(bad("bad magic, expected \"n+1\\0\""));
    }

    let ndim = rd_i16(raw, offset::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("invalid dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let mut dims_raw = [1usize; 7];
    for i in 0..ndim {
        let d = rd_i16(raw, offset::DIM + 2 * (i + 1));
        if d < 1 {
            return Err(bad(format!("non-positive dim[{}] = {d}", i + 1)));
        }
        dims_raw[i] = d as usize;
    }
    if ndim < 3 {
        return Err(bad(format!("expected a 3D volume, file is {ndim}D")));
    }

    let descrip = String::from_utf8_lossy(&raw[offset::DESCRIP..offset::DESCRIP + 80]).to_string();
    let is_field = ndim == 4 && dims_raw[3] == 3 && descrip.contains("disp:");
    let components = if is_field { 3 } else { 1 };
    if !is_field && dims_raw[3..].iter().any(|&d| d != 1) {
        if ndim == 4 && dims_raw[3] == 3 {
            return Err(bad("4D volume with dim[4] = 3 but no displacement tag in descrip"));
        }
        return Err(bad(format!("unsupported {ndim}D layout (non-singleton trailing dims)")));
    }

    let datatype = rd_i16(raw, offset::DATATYPE);
    let bitpix = rd_i16(raw, offset::BITPIX);
    let bytes_per: usize = match datatype {
        dt::UINT8 => 1,
        dt::INT16 => 2,
        dt::INT32 => 4,
        dt::FLOAT32 => 4,
        dt::FLOAT64 => 8,
        other => return Err(bad(format!("unsupported datatype code {other}"))),
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(bad(format!("bitpix {bitpix} inconsistent with datatype {datatype}")));
    }

    let mut spacing = [0f64; 3];
    for k in 0..3 {
        let s = rd_f32(raw, offset::PIXDIM + 4 * (k + 1));
        if !s.is_finite() || s <= 0.0 {
            return Err(bad(format!("non-positive pixdim[{}] = {s}", k + 1)));
        }
        spacing[k] = s as f64;
    }

    let origin = read_origin(raw, spacing)?;
    let grid = Grid3::new([dims_raw[0], dims_raw[1], dims_raw[2]], spacing, origin)
        .map_err(|e| bad(format!("bad grid: {e}")))?;
    let nvox = grid.len();

    let vox_offset_f = rd_f32(raw, offset::VOX_OFFSET);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_SIZE as f32 || vox_offset_f.fract() != 0.0 {
        return Err(bad(format!("invalid vox_offset {vox_offset_f}")));
    }
    let vox_offset = vox_offset_f as usize;
    let need = nvox
        .checked_mul(components)
        .and_then(|n| n.checked_mul(bytes_per))
        .ok_or_else(|| bad("voxel count overflow"))?;
    if raw.len() < vox_offset || raw.len() - vox_offset < need {
        return Err(bad(format!(
            "truncated data: need {need} bytes at offset {vox_offset}, file has {}",
            raw.len()
        )));
    }
    let payload = &raw[vox_offset..vox_offset + need];

    let mut slope = rd_f32(raw, offset::SCL_SLOPE) as f64;
    let inter = rd_f32(raw, offset::SCL_INTER) as f64;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(bad("non-finite scl_slope/scl_inter"));
    }
    if slope == 0.0 {
        slope = 1.0;
    }
    let trivial_scale = slope == 1.0 && inter == 0.0;

    if is_field {
        return decode_field(payload, datatype, grid, nvox, &descrip).map(LoadedNifti::Field);
    }

    // Integer label masks keep their raw values; anything scaled or floating
    // point is a scalar intensity volume.
    if (datatype == dt::UINT8 || datatype == dt::INT32) && trivial_scale {
        let labels: Vec<u32> = match datatype {
            dt::UINT8 => payload.iter().map(|&v| v as u32).collect(),
            _ => {
                let mut out = Vec::with_capacity(nvox);
                for i in 0..nvox {
                    let v = rd_i32(payload, 4 * i);
                    if v < 0 {
                        return Err(bad(format!("negative label {v} at voxel {i}")));
                    }
                    out.push(v as u32);
                }
                out
            }
        };
        let mask = LabelMask::new(grid, labels).map_err(|e| bad(e.to_string()))?;
        return Ok(LoadedNifti::Mask(mask));
    }

    let mut data = Vec::with_capacity(nvox);
    match datatype {
        dt::UINT8 => {
            for &v in payload {
                data.push(v as f64 * slope + inter);
            }
        }
        dt::INT16 => {
            for i in 0..nvox {
                let v = rd_i16(payload, 2 * i) as f64;
                data.push(v * slope + inter);
            }
        }
        dt::INT32 => {
            for i in 0..nvox {
                let v = rd_i32(payload, 4 * i) as f64;
                data.push(v * slope + inter);
            }
        }
        dt::FLOAT32 => {
            for i in 0..nvox {
                let v = rd_f32(payload, 4 * i) as f64;
                data.push(v * slope + inter);
            }
        }
        dt::FLOAT64 => {
            for i in 0..nvox {
                let v = f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap());
                data.push(v * slope + inter);
            }
        }
        _ => unreachable!(),
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite voxel value at index {i}")));
    }

    // CT files carry Hounsfield units: int16 by convention, floats only when
    // tagged. Construction clamps HU data to [-1024, 3071].
    let units = if datatype == dt::INT16 || descrip.contains("units:HU") {
        IntensityUnits::Hu
    } else {
        IntensityUnits::Dimensionless
    };
    let vol = Volume3::new(grid, data, units).map_err(|e| bad(e.to_string()))?;
    Ok(LoadedNifti::Volume(vol))
}

fn read_origin(raw: &[u8], spacing: [f64; 3]) -> Result<[f64; 3]> {
    let sform_code = rd_i16(raw, offset::SFORM_CODE);
    let qform_code = rd_i16(raw, offset::QFORM_CODE);
    if sform_code > 0 {
        let mut srow = [[0f64; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rd_f32(raw, offset::SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        for r in 0..3 {
            let diag = srow[r][r];
            if diag <= 0.0 {
                return Err(bad("oblique or flipped orientation unsupported (non-positive sform diagonal)"));
            }
            for c in 0..3 {
                if c != r && srow[r][c].abs() > 1e-3 * diag {
                    return Err(bad("oblique orientation unsupported (non-diagonal sform)"));
                }
            }
            if (diag - spacing[r]).abs() > 1e-3 * spacing[r] {
                return Err(bad(format!(
                    "sform spacing {diag} disagrees with pixdim {}",
                    spacing[r]
                )));
            }
        }
        return Ok([srow[0][3], srow[1][3], srow[2][3]]);
    }
    if qform_code > 0 {
        for k in 0..3 {
            let q = rd_f32(raw, offset::QUATERN_B + 4 * k);
            if q.abs() > 1e-6 {
                return Err(bad("oblique orientation unsupported (non-identity quaternion)"));
            }
        }
        let qfac = rd_f32(raw, offset::PIXDIM);
        if qfac < 0.0 {
            return Err(bad("flipped z orientation unsupported (negative qfac)"));
        }
    }
    let mut origin = [0f64; 3];
    for k in 0..3 {
        let o = rd_f32(raw, offset::QOFFSET_X + 4 * k) as f64;
        if !o.is_finite() {
            return Err(bad("non-finite qoffset"));
        }
        origin[k] = o;
    }
    Ok(origin)
}

fn decode_field(
    payload: &[u8],
    datatype: i16,
    grid: Grid3,
    nvox: usize,
    descrip: &str,
) -> Result<DisplacementField> {
    let read_at = |i: usize| -> Result<f64> {
        let v = match datatype {
            dt::FLOAT32 => rd_f32(payload, 4 * i) as f64,
            dt::FLOAT64 => f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap()),
            other => return Err(bad(format!("displacement field with integer datatype {other}"))),
        };
        if !v.is_finite() {
            return Err(bad(format!("non-finite displacement component at index {i}")));
        }
        Ok(v)
    };
    let in_mm = if descrip.contains("disp:voxel") {
        false
    } else if descrip.contains("disp:mm") {
        true
    } else {
        return Err(bad("displacement tag must be disp:voxel or disp:mm"));
    };
    let mut u = vec![[0f64; 3]; nvox];
    for c in 0..3 {
        let scale = if in_mm { 1.0 / grid.spacing[c] } else { 1.0 };
        for i in 0..nvox {
            u[i][c] = read_at(c * nvox + i)? * scale;
        }
    }
    Ok(DisplacementField { grid, u })
}

/// Load any supported object from a `.nii` / `.nii.gz` file.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<LoadedNifti> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_nifti_bytes(&bytes).map_err(|e| match e {
        Error::Nifti(msg) => Error::Nifti(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Load a scalar intensity volume. Label files are converted to dimensionless
/// intensities; displacement fields are rejected.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    match load_nifti(path)? {
        LoadedNifti::Volume(v) => Ok(v),
        LoadedNifti::Mask(m) => {
            let data = m.labels.iter().map(|&l| l as f64).collect();
            Volume3::new(m.grid, data, IntensityUnits::Dimensionless)
        }
        LoadedNifti::Field(_) => Err(Error::Nifti(format!(
            "{}: vector field, expected scalar",
            path.display()
        ))),
    }
}

/// Load a label mask. Scalar volumes are accepted only when every value is a
/// non-negative integer.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    match load_nifti(path)? {
        LoadedNifti::Mask(m) => Ok(m),
        LoadedNifti::Volume(v) => {
            let mut labels = Vec::with_capacity(v.data.len());
            for (i, &x) in v.data.iter().enumerate() {
                if x < 0.0 || x.fract() != 0.0 || x > i32::MAX as f64 {
                    return Err(Error::Nifti(format!(
                        "{}: non-integer label value {x} at voxel {i}",
                        path.display()
                    )));
                }
                labels.push(x as u32);
            }
            LabelMask::new(v.grid, labels)
        }
        LoadedNifti::Field(_) => Err(Error::Nifti(format!(
            "{}: vector field, expected labels",
            path.display()
        ))),
    }
}

/// Load a displacement field (4D, dim[4] = 3, `disp:` tag).
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    match load_nifti(path)? {
        LoadedNifti::Field(f) => Ok(f),
        _ => Err(Error::Nifti(format!(
            "{}: scalar volume, expected a displacement field",
            path.display()
        ))),
    }
}

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(h: &mut [u8], at: usize, v: i32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn build_header(grid: &Grid3, datatype: i16, bitpix: i16, field: bool, descrip: &str) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET_OUT];
    put_i32(&mut h, offset::SIZEOF_HDR, HEADER_SIZE as i32);
    put_i16(&mut h, offset::DIM, if field { 4 } else { 3 });
    for k in 0..3 {
        put_i16(&mut h, offset::DIM + 2 * (k + 1), grid.dims[k] as i16);
    }
    put_i16(&mut h, offset::DIM + 8, if field { 3 } else { 1 });
    for k in 5..8 {
        put_i16(&mut h, offset::DIM + 2 * k, 1);
    }
    put_i16(&mut h, offset::DATATYPE, datatype);
    put_i16(&mut h, offset::BITPIX, bitpix);
    put_f32(&mut h, offset::PIXDIM, 1.0);
    for k in 0..3 {
        put_f32(&mut h, offset::PIXDIM + 4 * (k + 1), grid.spacing[k] as f32);
    }
    put_f32(&mut h, offset::VOX_OFFSET, VOX_OFFSET_OUT as f32);
    put_f32(&mut h, offset::SCL_SLOPE, 1.0);
    put_f32(&mut h, offset::SCL_INTER, 0.0);
    h[offset::XYZT_UNITS] = 2; // millimetres
    let desc = descrip.as_bytes();
    let n = desc.len().min(79);
    h[offset::DESCRIP..offset::DESCRIP + n].copy_from_slice(&desc[..n]);
    put_i16(&mut h, offset::QFORM_CODE, 0);
    put_i16(&mut h, offset::SFORM_CODE, 1);
    for k in 0..3 {
        put_f32(&mut h, offset::QOFFSET_X + 4 * k, grid.origin[k] as f32);
        put_f32(&mut h, offset::SROW_X + 16 * k + 4 * k, grid.spacing[k] as f32);
        put_f32(&mut h, offset::SROW_X + 16 * k + 12, grid.origin[k] as f32);
    }
    h[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"n+1\0");
    h
}

fn grid_fits_header(grid: &Grid3) -> Result<()> {
    for &d in &grid.dims {
        if d > i16::MAX as usize {
            return Err(Error::Domain(format!("dim {d} exceeds NIfTI-1 int16 limit")));
        }
    }
    Ok(())
}

pub fn volume_to_bytes(vol: &Volume3) -> Result<Vec<u8>> {
    grid_fits_header(&vol.grid)?;
    let descrip = match vol.units {
        IntensityUnits::Hu => "units:HU",
        IntensityUnits::Dimensionless => "",
    };
    let mut out = build_header(&vol.grid, dt::FLOAT64, 64, false, descrip);
    out.reserve(vol.data.len() * 8);
    for &v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn mask_to_bytes(mask: &LabelMask) -> Result<Vec<u8>> {
    grid_fits_header(&mask.grid)?;
    let mut out = build_header(&mask.grid, dt::INT32, 32, false, "");
    out.reserve(mask.labels.len() * 4);
    for &l in &mask.labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    Ok(out)
}

pub fn field_to_bytes(field: &DisplacementField) -> Result<Vec<u8>> {
    grid_fits_header(&field.grid)?;
    let mut out = build_header(&field.grid, dt::FLOAT64, 64, true, "disp:voxel");
    out.reserve(field.u.len() * 24);
    for c in 0..3 {
        for u in &field.u {
            out.extend_from_slice(&u[c].to_le_bytes());
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        std::io::Write::write_all(&mut enc, bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume3) -> Result<()> {
    write_bytes(path.as_ref(), &volume_to_bytes(vol)?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_bytes(path.as_ref(), &mask_to_bytes(mask)?)
}

pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    write_bytes(path.as_ref(), &field_to_bytes(field)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::identity_field;

    /// Hand-built header for oracle tests, independent of `build_header`.
    fn raw_file(dims: [i16; 3], datatype: i16, bitpix: i16, payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        put_i32(&mut h, 0, 348);
        put_i16(&mut h, 40, 3);
        put_i16(&mut h, 42, dims[0]);
        put_i16(&mut h, 44, dims[1]);
        put_i16(&mut h, 46, dims[2]);
        put_i16(&mut h, 70, datatype);
        put_i16(&mut h, 72, bitpix);
        for k in 1..=3 {
            put_f32(&mut h, 76 + 4 * k, 1.0);
        }
        put_f32(&mut h, 108, 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn reads_handbuilt_float32_zeros() {
        let payload = vec![0u8; 4 * 4 * 4 * 4];
        let bytes = raw_file([4, 4, 4], 16, 32, &payload);
        match read_nifti_bytes(&bytes).unwrap() {
            LoadedNifti::Volume(v) => {
                assert_eq!(v.grid.dims, [4, 4, 4]);
                assert_eq!(v.grid.spacing, [1.0, 1.0, 1.0]);
                assert!(v.data.iter().all(|&x| x == 0.0));
                assert_eq!(v.units, IntensityUnits::Dimensionless);
            }
            other => panic!("expected volume, got {other:?}"),
        }
    }

    #[test]
    fn applies_slope_and_intercept() {
        let mut payload = Vec::new();
        for _ in 0..27 {
            payload.extend_from_slice(&600i16.to_le_bytes());
        }
        let mut bytes = raw_file([3, 3, 3], 4, 16, &payload);
        put_f32(&mut bytes, 112, 2.0);
        put_f32(&mut bytes, 116, -1000.0);
        match read_nifti_bytes(&bytes).unwrap() {
            LoadedNifti::Volume(v) => {
                assert_eq!(v.data[13], 200.0);
                assert_eq!(v.units, IntensityUnits::Hu);
            }
            other => panic!("expected volume, got {other:?}"),
        }
    }

    #[test]
    fn clamps_hounsfield_range_on_load() {
        let mut payload = Vec::new();
        for _ in 0..27 {
            payload.extend_from_slice(&i16::MAX.to_le_bytes());
        }
        let bytes = raw_file([3, 3, 3], 4, 16, &payload);
        match read_nifti_bytes(&bytes).unwrap() {
            LoadedNifti::Volume(v) => assert_eq!(v.data[0], crate::volume::HU_MAX),
            other => panic!("expected volume, got {other:?}"),
        }
    }

    #[test]
    fn uint8_is_a_mask() {
        let payload: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
        let bytes = raw_file([3, 3, 3], 2, 8, &payload);
        match read_nifti_bytes(&bytes).unwrap() {
            LoadedNifti::Mask(m) => assert_eq!(m.labels[4], 1),
            other => panic!("expected mask, got {other:?}"),
        }
    }

    #[test]
    fn distinct_errors_for_malformed_files() {
        let payload = vec![0u8; 4 * 27];
        let good = raw_file([3, 3, 3], 16, 32, &payload);

        let err = read_nifti_bytes(&good[..100]).unwrap_err().to_string();
        assert!(err.contains("truncated header"), "{err}");

        let mut big_endian = good.clone();
        put_i32(&mut big_endian, 0, 348i32.swap_bytes());
        let err = read_nifti_bytes(&big_endian).unwrap_err().to_string();
        assert!(err.contains("big-endian"), "{err}");

        let mut bad_magic = good.clone();
        bad_magic[344..348].copy_from_slice(b"xxxx");
        let err = read_nifti_bytes(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut pair = good.clone();
        pair[344..348].copy_from_slice(b"ni1\0");
        let err = read_nifti_bytes(&pair).unwrap_err().to_string();
        assert!(err.contains(".hdr/.img"), "{err}");

        let mut odd_type = good.clone();
        put_i16(&mut odd_type, 70, 32); // complex64
        put_i16(&mut odd_type, 72, 64);
        let err = read_nifti_bytes(&odd_type).unwrap_err().to_string();
        assert!(err.contains("unsupported datatype"), "{err}");

        let err = read_nifti_bytes(&good[..good.len() - 8]).unwrap_err().to_string();
        assert!(err.contains("truncated data"), "{err}");

        let mut zero_pix = good.clone();
        put_f32(&mut zero_pix, 80, 0.0);
        let err = read_nifti_bytes(&zero_pix).unwrap_err().to_string();
        assert!(err.contains("pixdim"), "{err}");

        let mut nan_vox = good;
        nan_vox[352..356].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = read_nifti_bytes(&nan_vox).unwrap_err().to_string();
        assert!(err.contains("non-finite voxel"), "{err}");
    }

    #[test]
    fn rejects_oblique_sform() {
        let payload = vec![0u8; 4 * 27];
        let mut bytes = raw_file([3, 3, 3], 16, 32, &payload);
        put_i16(&mut bytes, 254, 1);
        // a rotated sform: significant off-diagonal terms
        put_f32(&mut bytes, 280, 0.9);
        put_f32(&mut bytes, 284, 0.4);
        put_f32(&mut bytes, 296 + 4, 1.0);
        put_f32(&mut bytes, 312 + 8, 1.0);
        let err = read_nifti_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("oblique"), "{err}");
    }

    #[test]
    fn four_d_without_tag_is_rejected() {
        let grid = Grid3::isotropic([3, 3, 3], 1.0).unwrap();
        let mut bytes = field_to_bytes(&identity_field(&grid)).unwrap();
        // blank out the descrip tag
        for b in &mut bytes[offset::DESCRIP..offset::DESCRIP + 80] {
            *b = 0;
        }
        let err = read_nifti_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("no displacement tag"), "{err}");
    }

    #[test]
    fn field_round_trip_and_typed_loads() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::new([4, 5, 6], [1.0, 1.5, 2.0], [3.0, -2.0, 0.5]).unwrap();
        let mut f = identity_field(&grid);
        for (i, u) in f.u.iter_mut().enumerate() {
            u[0] = (i as f64 * 0.37).sin();
            u[1] = -0.25 * i as f64;
            u[2] = 1.0 / (1.0 + i as f64);
        }
        let p = dir.path().join("field.nii.gz");
        save_field(&p, &f).unwrap();
        let g = load_field(&p).unwrap();
        assert_eq!(f.grid, g.grid);
        assert_eq!(f.u, g.u);

        let err = load_volume(&p).unwrap_err().to_string();
        assert!(err.contains("vector field, expected scalar"), "{err}");
    }

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::new([5, 4, 3], [0.5, 1.0, 1.25], [-7.0, 2.5, 11.0]).unwrap();
        let data: Vec<f64> = (0..grid.len()).map(|i| (i as f64 * 1.7).cos() * 900.0).collect();
        let v = Volume3::new(grid, data, IntensityUnits::Hu).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&p, &v).unwrap();
            let w = load_volume(&p).unwrap();
            assert_eq!(v.grid, w.grid);
            assert_eq!(v.units, w.units);
            assert!(v.data.iter().zip(&w.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn mask_round_trip_and_float_mask_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::isotropic([4, 4, 4], 1.0).unwrap();
        let labels: Vec<u32> = (0..64).map(|i| (i * 40000) as u32).collect();
        let m = LabelMask::new(grid.clone(), labels).unwrap();
        let p = dir.path().join("m.nii.gz");
        save_mask(&p, &m).unwrap();
        let r = load_mask(&p).unwrap();
        assert_eq!(m.labels, r.labels);

        let v = Volume3::constant(grid, 2.5, IntensityUnits::Dimensionless).unwrap();
        let pv = dir.path().join("v.nii");
        save_volume(&pv, &v).unwrap();
        let err = load_mask(&pv).unwrap_err().to_string();
        assert!(err.contains("non-integer label value"), "{err}");
    }

    #[test]
    fn gzip_detection_is_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid3::isotropic([3, 3, 3], 1.0).unwrap();
        let v = Volume3::constant(grid, 1.0, IntensityUnits::Dimensionless).unwrap();
        // gzipped bytes under a .nii name still load
        let bytes = volume_to_bytes(&v).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        std::io::Write::write_all(&mut enc, &bytes).unwrap();
        let gz = enc.finish().unwrap();
        let p = dir.path().join("sneaky.nii");
        std::fs::write(&p, gz).unwrap();
        assert!(load_volume(&p).is_ok());
    }
}
