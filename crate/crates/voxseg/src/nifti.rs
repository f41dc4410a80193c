//! Single-file NIfTI-1 reader and writer, with optional gzip container.
//!
//! Only the fields this pipeline needs are interpreted: dimensions, datatype,
//! voxel spacing, data offset, and intensity scaling. Orientation (qform /
//! sform) is deliberately ignored; volumes are processed in stored index
//! order with the first axis fastest-varying. Extensions are skipped, not
//! interpreted. Dual-file (`ni1`) and NIfTI-2 inputs are rejected.
//!
//! The parser is total: any byte string yields either a [`Volume`] or one of
//! the enumerated errors, never a panic.

use std::fmt;
use std::io::Read;
use std::path::Path;

/// Size of a NIfTI-1 header; data starts at `vox_offset >= 352` in
/// single-file volumes (348-byte header plus a 4-byte extension flag).
pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;

const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_DUAL: &[u8; 4] = b"ni1\0";

#[derive(Debug)]
pub enum NiftiError {
    /// Not a single-file NIfTI-1 volume.
    BadMagic(String),
    /// Datatype code outside the supported set, or bitpix inconsistent.
    UnsupportedDatatype(i16),
    /// File shorter than the header promises.
    Truncated(String),
    /// Rank outside 1..=4 or non-positive extents.
    BadDims(i16),
    Io(std::io::Error),
}

impl fmt::Display for NiftiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NiftiError::BadMagic(msg) => write!(f, "not a single-file NIfTI-1 volume: {msg}"),
            NiftiError::UnsupportedDatatype(code) => {
                write!(f, "unsupported NIfTI datatype code {code}")
            }
            NiftiError::Truncated(msg) => write!(f, "truncated NIfTI data: {msg}"),
            NiftiError::BadDims(rank) => write!(f, "unsupported dimensionality {rank}"),
            NiftiError::Io(e) => write!(f, "I/O failure: {e}"),
        }
    }
}

impl std::error::Error for NiftiError {}

impl From<std::io::Error> for NiftiError {
    fn from(e: std::io::Error) -> Self {
        NiftiError::Io(e)
    }
}

/// The five voxel element kinds this pipeline supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl ElementKind {
    pub fn nifti_code(self) -> i16 {
        match self {
            ElementKind::U8 => 2,
            ElementKind::I16 => 4,
            ElementKind::I32 => 8,
            ElementKind::F32 => 16,
            ElementKind::F64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            ElementKind::U8 => 8,
            ElementKind::I16 => 16,
            ElementKind::I32 | ElementKind::F32 => 32,
            ElementKind::F64 => 64,
        }
    }

    pub fn byte_width(self) -> usize {
        self.bitpix() as usize / 8
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(ElementKind::U8),
            4 => Some(ElementKind::I16),
            8 => Some(ElementKind::I32),
            16 => Some(ElementKind::F32),
            64 => Some(ElementKind::F64),
            _ => None,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, ElementKind::U8 | ElementKind::I16 | ElementKind::I32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::I32(v) => v.len(),
            VolumeData::F32(v) => v.len(),
            VolumeData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            VolumeData::U8(_) => ElementKind::U8,
            VolumeData::I16(_) => ElementKind::I16,
            VolumeData::I32(_) => ElementKind::I32,
            VolumeData::F32(_) => ElementKind::F32,
            VolumeData::F64(_) => ElementKind::F64,
        }
    }
}

/// Decoded volume: extents in stored order (first axis fastest-varying),
/// typed voxel buffer, and voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Vec<usize>,
    pub data: VolumeData,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn element_kind(&self) -> ElementKind {
        self.data.kind()
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Voxels widened to f32 (used by the preprocessing pipeline).
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::F32(v) => v.clone(),
            VolumeData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> Cursor<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        if self.swap {
            i16::from_be_bytes(raw)
        } else {
            i16::from_le_bytes(raw)
        }
    }

    fn i32_at(&self, off: usize) -> i32 {
        let raw = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.swap {
            i32::from_be_bytes(raw)
        } else {
            i32::from_le_bytes(raw)
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        f32::from_bits(self.i32_at(off) as u32)
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Parses a possibly gzip-compressed single-file NIfTI-1 byte string.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume, NiftiError> {
    if is_gzip(bytes) {
        let mut decoder = flate2::read::GzDecoder::new(bytes);
        let mut plain = Vec::new();
        decoder
            .read_to_end(&mut plain)
            .map_err(|e| NiftiError::Truncated(format!("gzip container: {e}")))?;
        parse_nifti_plain(&plain)
    } else {
        parse_nifti_plain(bytes)
    }
}

fn parse_nifti_plain(bytes: &[u8]) -> Result<Volume, NiftiError> {
    if bytes.len() < DATA_OFFSET {
        return Err(NiftiError::Truncated(format!(
            "{} bytes, need at least {DATA_OFFSET}",
            bytes.len()
        )));
    }

    // Endianness probe (NIfTI-1 convention): a native read of dim[0] outside
    // 1..=7 or a wrong header size means the file was written byte-swapped.
    let mut cur = Cursor { bytes, swap: false };
    let le_plausible = cur.i32_at(0) == HEADER_SIZE as i32 && (1..=7).contains(&cur.i16_at(40));
    if !le_plausible {
        cur.swap = true;
        let be_plausible =
            cur.i32_at(0) == HEADER_SIZE as i32 && (1..=7).contains(&cur.i16_at(40));
        if !be_plausible {
            return Err(NiftiError::BadMagic(format!(
                "header size {} (or byte-swapped {})",
                i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
                i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
            )));
        }
    }

    let magic: [u8; 4] = [bytes[344], bytes[345], bytes[346], bytes[347]];
    if &magic == MAGIC_DUAL {
        return Err(NiftiError::BadMagic(
            "dual-file (.hdr/.img) volumes are not supported".into(),
        ));
    }
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(format!("magic {:?}", magic)));
    }

    let rank = cur.i16_at(40);
    if !(1..=4).contains(&rank) {
        return Err(NiftiError::BadDims(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for axis in 0..rank as usize {
        let extent = cur.i16_at(42 + 2 * axis);
        if extent < 1 {
            return Err(NiftiError::BadDims(extent));
        }
        shape.push(extent as usize);
    }

    let datatype = cur.i16_at(70);
    let bitpix = cur.i16_at(72);
    let kind = ElementKind::from_code(datatype).ok_or(NiftiError::UnsupportedDatatype(datatype))?;
    if bitpix != kind.bitpix() {
        return Err(NiftiError::UnsupportedDatatype(datatype));
    }

    let mut spacing = [1.0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let p = cur.f32_at(76 + 4 * (axis + 1));
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }

    let vox_offset = cur.f32_at(108);
    if !vox_offset.is_finite() || vox_offset < DATA_OFFSET as f32 {
        return Err(NiftiError::BadMagic(format!(
            "vox_offset {vox_offset} below {DATA_OFFSET}"
        )));
    }
    let offset = vox_offset as usize;

    let voxels: u64 = shape.iter().try_fold(1u64, |acc, &e| {
        acc.checked_mul(e as u64)
            .filter(|&v| v <= (1u64 << 40))
    })
    .ok_or_else(|| NiftiError::Truncated("voxel count overflow".into()))?;
    let needed = voxels as usize * kind.byte_width();
    if bytes.len() < offset || bytes.len() - offset < needed {
        return Err(NiftiError::Truncated(format!(
            "need {needed} data bytes at offset {offset}, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[offset..offset + needed];
    let swap = cur.swap;

    let data = match kind {
        ElementKind::U8 => VolumeData::U8(payload.to_vec()),
        ElementKind::I16 => VolumeData::I16(
            payload
                .chunks_exact(2)
                .map(|c| {
                    let raw = [c[0], c[1]];
                    if swap {
                        i16::from_be_bytes(raw)
                    } else {
                        i16::from_le_bytes(raw)
                    }
                })
                .collect(),
        ),
        ElementKind::I32 => VolumeData::I32(
            payload
                .chunks_exact(4)
                .map(|c| {
                    let raw = [c[0], c[1], c[2], c[3]];
                    if swap {
                        i32::from_be_bytes(raw)
                    } else {
                        i32::from_le_bytes(raw)
                    }
                })
                .collect(),
        ),
        ElementKind::F32 => VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| {
                    let raw = [c[0], c[1], c[2], c[3]];
                    if swap {
                        f32::from_be_bytes(raw)
                    } else {
                        f32::from_le_bytes(raw)
                    }
                })
                .collect(),
        ),
        ElementKind::F64 => VolumeData::F64(
            payload
                .chunks_exact(8)
                .map(|c| {
                    let raw = [c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]];
                    if swap {
                        f64::from_be_bytes(raw)
                    } else {
                        f64::from_le_bytes(raw)
                    }
                })
                .collect(),
        ),
    };

    let mut volume = Volume {
        shape,
        data,
        spacing,
    };

    // Affine intensity scaling is applied at read time, promoting to f32.
    let slope = cur.f32_at(112);
    let inter = cur.f32_at(116);
    let scaling_active =
        slope.is_finite() && inter.is_finite() && slope != 0.0 && (slope, inter) != (1.0, 0.0);
    if scaling_active {
        let scaled: Vec<f32> = match &volume.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as f32 * slope + inter).collect(),
            VolumeData::I16(v) => v.iter().map(|&x| x as f32 * slope + inter).collect(),
            VolumeData::I32(v) => v.iter().map(|&x| x as f32 * slope + inter).collect(),
            VolumeData::F32(v) => v.iter().map(|&x| x * slope + inter).collect(),
            VolumeData::F64(v) => v.iter().map(|&x| (x as f32) * slope + inter).collect(),
        };
        volume.data = VolumeData::F32(scaled);
    }

    Ok(volume)
}

/// Reads a `.nii` or `.nii.gz` volume from disk.
pub fn read_nifti(path: &Path) -> Result<Volume, NiftiError> {
    let bytes = std::fs::read(path)?;
    parse_nifti(&bytes)
}

/// Serializes a volume as an uncompressed single-file NIfTI-1 byte string
/// (little-endian, `vox_offset` 352, no intensity scaling).
pub fn nifti_bytes(volume: &Volume) -> Result<Vec<u8>, NiftiError> {
    let rank = volume.shape.len();
    if !(1..=4).contains(&rank) {
        return Err(NiftiError::BadDims(rank as i16));
    }
    if volume.voxel_count() != volume.data.len() {
        return Err(NiftiError::Truncated(format!(
            "shape {:?} vs {} voxels",
            volume.shape,
            volume.data.len()
        )));
    }
    let kind = volume.element_kind();

    let mut header = [0u8; HEADER_SIZE];
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());

    let mut dim = [1i16; 8];
    dim[0] = rank as i16;
    for (axis, &extent) in volume.shape.iter().enumerate() {
        if extent == 0 || extent > i16::MAX as usize {
            return Err(NiftiError::BadDims(extent as i16));
        }
        dim[axis + 1] = extent as i16;
    }
    for (i, d) in dim.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }

    header[70..72].copy_from_slice(&kind.nifti_code().to_le_bytes());
    header[72..74].copy_from_slice(&kind.bitpix().to_le_bytes());

    let mut pixdim = [1.0f32; 8];
    pixdim[1] = volume.spacing[0];
    pixdim[2] = volume.spacing[1];
    pixdim[3] = volume.spacing[2];
    for (i, p) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }

    header[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    header[116..120].copy_from_slice(&0.0f32.to_le_bytes());
    header[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = Vec::with_capacity(DATA_OFFSET + volume.data.len() * kind.byte_width());
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; 4]); // no extensions
    match &volume.data {
        VolumeData::U8(v) => out.extend_from_slice(v),
        VolumeData::I16(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::I32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes a volume to disk; a `.gz` suffix selects the gzip container.
pub fn write_nifti(volume: &Volume, path: &Path) -> Result<(), NiftiError> {
    let bytes = nifti_bytes(volume)?;
    let gz = path
        .to_str()
        .map(|s| s.ends_with(".gz"))
        .unwrap_or(false);
    if gz {
        use std::io::Write;
        let mut encoder =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        encoder.write_all(&bytes)?;
        std::fs::write(path, encoder.finish()?)?;
    } else {
        std::fs::write(path, &bytes)?;
    }
    Ok(())
}
