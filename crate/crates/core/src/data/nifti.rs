//! Single-file NIfTI-1 (`.nii`, uncompressed), float32 and uint8 only.
//!
//! Extents map as `dim[1..=3] = (W, H, D)` and spacing as
//! `pixdim[1..=3] = (sw, sh, sd)`. Orientation fields are carried through
//! untouched. Both byte orders are accepted on read; writes are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Orientation, VolumeGrid};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const UNITS_METER: u8 = 1;
const UNITS_MM: u8 = 2;
const UNITS_MICRON: u8 = 3;

#[derive(Clone, Copy, PartialEq)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.endian == Endian::Big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

struct Header {
    extents: [usize; 3],
    spacing: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f32,
    inter: f32,
    endian: Endian,
    orientation: Orientation,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file is {} bytes, shorter than a NIfTI-1 header", bytes.len())));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian::Big
    } else {
        return Err(Error::format(path, "bad sizeof_hdr; not a NIfTI-1 file"));
    };
    let r = Reader { bytes, endian };
    match &bytes[344..348] {
        m if m == MAGIC => {}
        b"ni1\0" => return Err(Error::format(path, "two-file NIfTI (.hdr/.img) is not supported")),
        m => return Err(Error::format(path, format!("bad magic {m:?}"))),
    }
    let ndim = r.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim}; expected a 3-D volume")));
    }
    let mut extents = [0usize; 3];
    for (axis, slot) in [3usize, 2, 1].into_iter().zip(extents.iter_mut()) {
        let d = r.i16(40 + 2 * axis);
        if d <= 0 {
            return Err(Error::format(path, format!("dim[{axis}] = {d} must be positive")));
        }
        *slot = d as usize;
    }
    for axis in 4..=ndim as usize {
        let d = r.i16(40 + 2 * axis);
        if d != 1 {
            return Err(Error::format(path, format!("dim[{axis}] = {d}; only single 3-D volumes are supported")));
        }
    }
    let datatype = r.i16(70);
    let bitpix = r.i16(72);
    match (datatype, bitpix) {
        (DT_FLOAT32, 32) | (DT_UINT8, 8) => {}
        (DT_FLOAT32 | DT_UINT8, b) => {
            return Err(Error::format(path, format!("bitpix {b} inconsistent with datatype {datatype}")))
        }
        (d, _) => return Err(Error::format(path, format!("unsupported datatype {d}; need float32 (16) or uint8 (2)"))),
    }
    let unit_scale = match r.bytes[123] & 0x07 {
        UNITS_METER => 1000.0,
        UNITS_MICRON => 1e-3,
        _ => 1.0,
    };
    let mut spacing = [0.0f64; 3];
    for (axis, slot) in [3usize, 2, 1].into_iter().zip(spacing.iter_mut()) {
        // Widen via the shortest decimal form so spacings such as 0.117 mm
        // come back as the f64 the caller wrote, not as 0.11699999868...
        let p = shortest_f64(r.f32(76 + 4 * axis)) * unit_scale;
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::format(path, format!("pixdim[{axis}] = {p} must be positive")));
        }
        *slot = p;
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("vox_offset {vox_offset} is not valid for a single-file volume")));
    }
    let mut srow = [[0.0f32; 4]; 3];
    for (row, vals) in srow.iter_mut().enumerate() {
        for (k, v) in vals.iter_mut().enumerate() {
            *v = r.f32(280 + 16 * row + 4 * k);
        }
    }
    let orientation = Orientation {
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        qfac: r.f32(76),
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        srow,
    };
    Ok(Header {
        extents,
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        slope: r.f32(112),
        inter: r.f32(116),
        endian,
        orientation,
    })
}

fn shortest_f64(v: f32) -> f64 {
    format!("{v}").parse().unwrap_or(v as f64)
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let n: usize = header.extents.iter().product();
    let width = if header.datatype == DT_FLOAT32 { 4 } else { 1 };
    let end = header.vox_offset + n * width;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            format!("truncated: need {end} bytes for {:?} voxels, file has {}", header.extents, bytes.len()),
        ));
    }
    let data = bytes[header.vox_offset..end].to_vec();
    Ok((header, data))
}

fn decode_f32(data: &[u8], endian: Endian) -> impl Iterator<Item = f32> + '_ {
    data.chunks_exact(4).map(move |c| {
        let b: [u8; 4] = c.try_into().unwrap();
        match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    })
}

/// Reads a scalar volume. Intensity scaling (`scl_slope`, `scl_inter`) is
/// applied when the slope is non-zero.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    let (h, data) = read_file(path)?;
    let mut values: Vec<f64> = if h.datatype == DT_FLOAT32 {
        decode_f32(&data, h.endian).map(f64::from).collect()
    } else {
        data.iter().map(|&b| b as f64).collect()
    };
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::format(path, format!("voxel {i} is NaN")));
    }
    if h.slope != 0.0 && h.slope.is_finite() && (h.slope != 1.0 || h.inter != 0.0) {
        let (a, b) = (h.slope as f64, h.inter as f64);
        values.iter_mut().for_each(|v| *v = a * *v + b);
    }
    let mut grid = VolumeGrid::new(h.extents, h.spacing, values)?;
    grid.orientation = h.orientation;
    Ok(grid)
}

/// Reads a label volume stored as uint8 with values in {0, 1, 2}.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (h, data) = read_file(path)?;
    if h.datatype != DT_UINT8 {
        return Err(Error::format(path, "label volumes must be stored as uint8"));
    }
    let mut labels = LabelVolume::new(h.extents, h.spacing, data).map_err(|e| Error::format(path, e.to_string()))?;
    labels.orientation = h.orientation;
    Ok(labels)
}

fn encode_header(extents: [usize; 3], spacing: [f64; 3], orientation: &Orientation, datatype: i16) -> Result<Vec<u8>> {
    let mut b = vec![0u8; VOX_OFFSET];
    let mut put = |at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
    put(0, &348i32.to_le_bytes());
    put(38, b"r");
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for (axis, &e) in [3usize, 2, 1].iter().zip(&extents) {
        dim[*axis] = i16::try_from(e)
            .map_err(|_| Error::InvalidArgument(format!("extent {e} exceeds the NIfTI-1 limit of {}", i16::MAX)))?;
    }
    for (k, d) in dim.iter().enumerate() {
        put(40 + 2 * k, &d.to_le_bytes());
    }
    put(70, &datatype.to_le_bytes());
    let bitpix: i16 = if datatype == DT_FLOAT32 { 32 } else { 8 };
    put(72, &bitpix.to_le_bytes());
    let mut pixdim = [1.0f32; 8];
    pixdim[0] = orientation.qfac;
    for (axis, &s) in [3usize, 2, 1].iter().zip(&spacing) {
        pixdim[*axis] = s as f32;
    }
    for (k, p) in pixdim.iter().enumerate() {
        put(76 + 4 * k, &p.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(123, &[UNITS_MM]);
    put(252, &orientation.qform_code.to_le_bytes());
    put(254, &orientation.sform_code.to_le_bytes());
    for k in 0..3 {
        put(256 + 4 * k, &orientation.quatern[k].to_le_bytes());
        put(268 + 4 * k, &orientation.qoffset[k].to_le_bytes());
    }
    for (row, vals) in orientation.srow.iter().enumerate() {
        for (k, v) in vals.iter().enumerate() {
            put(280 + 16 * row + 4 * k, &v.to_le_bytes());
        }
    }
    put(344, MAGIC);
    Ok(b)
}

/// Writes a scalar volume as float32. Values are rounded to the nearest
/// float32, so only float32-representable values round-trip bit-exactly.
pub fn write_volume(grid: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = grid.values().iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("voxel {i} is NaN; refusing to write {}", path.display())));
    }
    let mut bytes = encode_header(grid.extents(), grid.spacing(), &grid.orientation, DT_FLOAT32)?;
    bytes.reserve(grid.len() * 4);
    for &v in grid.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = encode_header(labels.extents(), labels.spacing(), &labels.orientation, DT_UINT8)?;
    bytes.extend_from_slice(labels.labels());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
