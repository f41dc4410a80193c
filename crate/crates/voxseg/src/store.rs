//! On-disk binary formats.
//!
//! Sample store (`SMP1`): magic `SMP1`, u32 rank, u32 extents, u8 element
//! kind code (0=u8, 1=i16, 2=i32, 3=f32, 4=f64), then the little-endian
//! payload. One sample is a directory holding `image.smp` (f32,
//! `[3, D, H, W]`), `mask.smp` (u8, `[D, H, W]`), and a one-line `meta.txt`
//! with the subject id.
//!
//! Checkpoints (`CKPT`): magic `CKPT`, u32 parameter count, then per
//! parameter: u32 name length, name bytes, u32 rank, u32 extents, and the
//! f32 little-endian payload, in registry order.

use std::fmt;
use std::fs;
use std::path::Path;

use voxseg_core::model::Param;
use voxseg_core::preprocess::Sample;
use voxseg_core::tensor::{LabelGrid, Tensor};

const SAMPLE_MAGIC: &[u8; 4] = b"SMP1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

pub const IMAGE_FILE: &str = "image.smp";
pub const MASK_FILE: &str = "mask.smp";
pub const META_FILE: &str = "meta.txt";

#[derive(Debug)]
pub enum StoreError {
    CorruptSample(String),
    CorruptCheckpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::CorruptSample(msg) => write!(f, "corrupt sample: {msg}"),
            StoreError::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            StoreError::Io(e) => write!(f, "I/O failure: {e}"),
        }
    }
}

impl std::error::Error for StoreError {}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum KindCode {
    U8 = 0,
    F32 = 3,
}

fn encode_array(shape: &[usize], kind: KindCode, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 4 * shape.len() + 1 + payload.len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(kind as u8);
    out.extend_from_slice(payload);
    out
}

struct Array {
    shape: Vec<usize>,
    kind: u8,
    payload: Vec<u8>,
}

fn decode_array(bytes: &[u8], what: &str) -> Result<Array, StoreError> {
    let corrupt = |msg: String| StoreError::CorruptSample(format!("{what}: {msg}"));
    if bytes.len() < 9 {
        return Err(corrupt(format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(corrupt(format!("magic {:?}", &bytes[..4])));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(corrupt(format!("rank {rank}")));
    }
    let header_len = 8 + 4 * rank + 1;
    if bytes.len() < header_len {
        return Err(corrupt("header truncated".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let off = 8 + 4 * axis;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let kind = bytes[8 + 4 * rank];
    let width = match kind {
        0 => 1,
        1 => 2,
        2 | 3 => 4,
        4 => 8,
        other => return Err(corrupt(format!("element kind code {other}"))),
    };
    let count: usize = shape.iter().product();
    let needed = count
        .checked_mul(width)
        .ok_or_else(|| corrupt("voxel count overflow".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() != needed {
        return Err(corrupt(format!(
            "payload {} bytes, shape {:?} needs {needed}",
            payload.len(),
            shape
        )));
    }
    Ok(Array {
        shape,
        kind,
        payload: payload.to_vec(),
    })
}

/// Writes `image.smp`, `mask.smp`, and `meta.txt` under `dir`.
pub fn save_sample(sample: &Sample, dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir)?;
    let image = sample.image.data();
    let mut payload = Vec::with_capacity(image.len() * 4);
    for v in image {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(
        dir.join(IMAGE_FILE),
        encode_array(sample.image.shape(), KindCode::F32, &payload),
    )?;
    let ms = sample.mask.shape();
    fs::write(
        dir.join(MASK_FILE),
        encode_array(&[ms[0], ms[1], ms[2]], KindCode::U8, sample.mask.data()),
    )?;
    fs::write(
        dir.join(META_FILE),
        format!("subject_id={}\n", sample.subject_id),
    )?;
    Ok(())
}

/// Loads the sample stored under `dir`. The id recorded in `meta.txt` wins;
/// `fallback_id` names the sample when the metadata line is absent.
pub fn load_sample(dir: &Path, fallback_id: &str) -> Result<Sample, StoreError> {
    let image = decode_array(&fs::read(dir.join(IMAGE_FILE))?, "image")?;
    if image.kind != KindCode::F32 as u8 {
        return Err(StoreError::CorruptSample(format!(
            "image kind code {}, expected f32",
            image.kind
        )));
    }
    if image.shape.len() != 4 {
        return Err(StoreError::CorruptSample(format!(
            "image rank {}, expected 4",
            image.shape.len()
        )));
    }
    let values: Vec<f32> = image
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let image_tensor = Tensor::from_vec(&image.shape, values);

    let mask = decode_array(&fs::read(dir.join(MASK_FILE))?, "mask")?;
    if mask.kind != KindCode::U8 as u8 || mask.shape.len() != 3 {
        return Err(StoreError::CorruptSample(format!(
            "mask kind {} rank {}, expected u8 rank 3",
            mask.kind,
            mask.shape.len()
        )));
    }
    let mask_grid = LabelGrid::new(
        [mask.shape[0], mask.shape[1], mask.shape[2]],
        mask.payload,
    );

    let subject_id = match fs::read_to_string(dir.join(META_FILE)) {
        Ok(text) => text
            .lines()
            .find_map(|l| l.strip_prefix("subject_id=").map(str::to_owned))
            .unwrap_or_else(|| fallback_id.to_owned()),
        Err(_) => fallback_id.to_owned(),
    };

    Ok(Sample {
        image: image_tensor,
        mask: mask_grid,
        subject_id,
    })
}

/// Stores a predicted label grid in the same array container.
pub fn save_label_grid(grid: &LabelGrid, path: &Path) -> Result<(), StoreError> {
    let s = grid.shape();
    fs::write(
        path,
        encode_array(&[s[0], s[1], s[2]], KindCode::U8, grid.data()),
    )?;
    Ok(())
}

pub fn load_label_grid(path: &Path) -> Result<LabelGrid, StoreError> {
    let arr = decode_array(&fs::read(path)?, "label grid")?;
    if arr.kind != KindCode::U8 as u8 || arr.shape.len() != 3 {
        return Err(StoreError::CorruptSample(format!(
            "label grid kind {} rank {}",
            arr.kind,
            arr.shape.len()
        )));
    }
    Ok(LabelGrid::new(
        [arr.shape[0], arr.shape[1], arr.shape[2]],
        arr.payload,
    ))
}

/// Serializes named parameters in registry order.
pub fn checkpoint_bytes(params: &[Param<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(params: &[Param<f32>], path: &Path) -> Result<(), StoreError> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, StoreError> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, StoreError> {
    let corrupt = |msg: String| StoreError::CorruptCheckpoint(msg);
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], StoreError> {
        if bytes.len() - *off < n {
            return Err(StoreError::CorruptCheckpoint(format!(
                "needed {n} bytes at offset {off}, file has {}",
                bytes.len()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };

    if take(&mut off, 4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(corrupt(format!("name length {name_len}")));
        }
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|e| corrupt(format!("name not UTF-8: {e}")))?;
        let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(corrupt(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut off, n * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)));
    }
    if off != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(params)
}
