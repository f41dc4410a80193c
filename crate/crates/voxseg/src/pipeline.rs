//! Per-subject preprocessing driver: locate the four NIfTI files, normalize
//! and stack the modalities, remap and crop the mask, apply the
//! labeled-voxel ratio filter, and persist accepted samples in the SMP1
//! store with an accepted-subjects manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use voxseg_core::preprocess::{
    center_crop, minmax_normalize, nonzero_label_ratio, remap_labels, stack_modalities,
    Modality, PreprocessConfig, PreprocessError, Sample,
};
use voxseg_core::tensor::Tensor;

use crate::nifti::{read_nifti, NiftiError, Volume};
use crate::store::{save_sample, StoreError};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug)]
pub enum PipelineError {
    Nifti(NiftiError),
    Preprocess(PreprocessError),
    Store(StoreError),
    Io(std::io::Error),
    /// Mask volume is not integer-typed or holds values outside 0..=255.
    MaskKind(String),
    MissingFile(PathBuf),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Nifti(e) => write!(f, "{e}"),
            PipelineError::Preprocess(e) => write!(f, "{e}"),
            PipelineError::Store(e) => write!(f, "{e}"),
            PipelineError::Io(e) => write!(f, "I/O failure: {e}"),
            PipelineError::MaskKind(msg) => write!(f, "bad mask volume: {msg}"),
            PipelineError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<NiftiError> for PipelineError {
    fn from(e: NiftiError) -> Self {
        PipelineError::Nifti(e)
    }
}
impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        PipelineError::Preprocess(e)
    }
}
impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        PipelineError::Store(e)
    }
}
impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e)
    }
}

/// The four files of one BraTS-style subject.
#[derive(Clone, Debug)]
pub struct Subject {
    pub subject_id: String,
    pub t2_path: PathBuf,
    pub t1ce_path: PathBuf,
    pub flair_path: PathBuf,
    pub mask_path: PathBuf,
}

fn find_volume(dir: &Path, id: &str, suffix: &str) -> Result<PathBuf, PipelineError> {
    for ext in [".nii.gz", ".nii"] {
        let candidate = dir.join(format!("{id}_{suffix}{ext}"));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(PipelineError::MissingFile(
        dir.join(format!("{id}_{suffix}.nii[.gz]")),
    ))
}

impl Subject {
    /// Locates `<root>/<id>/<id>_{t2,t1ce,flair,seg}.nii(.gz)`.
    pub fn locate(root: &Path, id: &str) -> Result<Subject, PipelineError> {
        let dir = root.join(id);
        Ok(Subject {
            subject_id: id.to_owned(),
            t2_path: find_volume(&dir, id, "t2")?,
            t1ce_path: find_volume(&dir, id, "t1ce")?,
            flair_path: find_volume(&dir, id, "flair")?,
            mask_path: find_volume(&dir, id, "seg")?,
        })
    }

    fn path_for(&self, modality: Modality) -> &Path {
        match modality {
            Modality::T2 => &self.t2_path,
            Modality::T1ce => &self.t1ce_path,
            Modality::Flair => &self.flair_path,
        }
    }
}

/// Subdirectory names under `root`, sorted for a deterministic order.
pub fn discover_subject_ids(root: &Path) -> Result<Vec<String>, PipelineError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn volume_as_spatial_tensor(vol: &Volume) -> Result<Tensor<f32>, PipelineError> {
    if vol.shape.len() != 3 {
        return Err(PipelineError::Preprocess(PreprocessError::ShapeMismatch(
            format!("expected a 3D volume, got {:?}", vol.shape),
        )));
    }
    // NIfTI stores x fastest; exposing [D,H,W] = [nz,ny,nx] keeps the flat
    // buffer unchanged with W the contiguous axis.
    let shape = [vol.shape[2], vol.shape[1], vol.shape[0]];
    Ok(Tensor::from_vec(&shape, vol.to_f32()))
}

fn mask_to_u8(vol: &Volume) -> Result<Vec<u8>, PipelineError> {
    use crate::nifti::VolumeData;
    match &vol.data {
        VolumeData::U8(v) => Ok(v.clone()),
        VolumeData::I16(v) => v
            .iter()
            .map(|&x| {
                u8::try_from(x).map_err(|_| {
                    PipelineError::MaskKind(format!("mask value {x} outside 0..=255"))
                })
            })
            .collect(),
        VolumeData::I32(v) => v
            .iter()
            .map(|&x| {
                u8::try_from(x).map_err(|_| {
                    PipelineError::MaskKind(format!("mask value {x} outside 0..=255"))
                })
            })
            .collect(),
        other => Err(PipelineError::MaskKind(format!(
            "mask must be integer-typed, found {:?}",
            other.kind()
        ))),
    }
}

/// Full preprocessing of one subject. Returns `None` when the cropped mask's
/// nonzero-label ratio does not exceed the threshold (subject skipped).
pub fn preprocess_subject(
    subject: &Subject,
    config: &PreprocessConfig,
) -> Result<Option<Sample>, PipelineError> {
    config.validate()?;

    let mut normalized = Vec::with_capacity(config.modalities.len());
    for &modality in &config.modalities {
        let vol = read_nifti(subject.path_for(modality))?;
        let tensor = volume_as_spatial_tensor(&vol)?;
        normalized.push(minmax_normalize(&tensor)?);
    }

    let mask_vol = read_nifti(&subject.mask_path)?;
    if !mask_vol.element_kind().is_integer() {
        return Err(PipelineError::MaskKind(format!(
            "segmentation volume is {:?}, expected an integer kind",
            mask_vol.element_kind()
        )));
    }
    if mask_vol.shape.len() != 3 {
        return Err(PipelineError::Preprocess(PreprocessError::ShapeMismatch(
            format!("mask volume is {:?}, expected 3D", mask_vol.shape),
        )));
    }
    let mask_shape = [mask_vol.shape[2], mask_vol.shape[1], mask_vol.shape[0]];
    let mask = remap_labels(mask_shape, &mask_to_u8(&mask_vol)?)?;

    let image = stack_modalities(&normalized)?;
    let (image, mask) = center_crop(&image, &mask, config.crop_target)?;

    let ratio = nonzero_label_ratio(&mask);
    if ratio <= config.label_ratio_threshold {
        return Ok(None);
    }

    let sample = Sample {
        image,
        mask,
        subject_id: subject.subject_id.clone(),
    };
    sample.validate(config.extent_divisor)?;
    Ok(Some(sample))
}

#[derive(Debug, Default)]
pub struct PreprocessSummary {
    pub accepted: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<(String, String)>,
}

/// Preprocesses every subject under `in_root`, writing accepted samples and
/// the manifest under `out_root`. Failing subjects are reported and do not
/// stop the rest.
pub fn run_preprocess(
    in_root: &Path,
    out_root: &Path,
    config: &PreprocessConfig,
    log: impl FnMut(&str),
) -> Result<PreprocessSummary, PipelineError> {
    run_preprocess_threaded(in_root, out_root, config, 1, log)
}

/// Per-subject fan-out across `threads` workers. Subjects are independent
/// (one file set in, one sample directory out); results are folded back in
/// subject-id order so the manifest and summary stay deterministic.
pub fn run_preprocess_threaded(
    in_root: &Path,
    out_root: &Path,
    config: &PreprocessConfig,
    threads: usize,
    mut log: impl FnMut(&str),
) -> Result<PreprocessSummary, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_root)?;
    let ids = discover_subject_ids(in_root)?;
    let threads = threads.max(1).min(ids.len().max(1));

    let process = |id: &str| -> Result<Option<f64>, PipelineError> {
        let subject = Subject::locate(in_root, id)?;
        match preprocess_subject(&subject, config)? {
            Some(sample) => {
                let ratio = nonzero_label_ratio(&sample.mask);
                save_sample(&sample, &out_root.join(id))?;
                Ok(Some(ratio))
            }
            None => Ok(None),
        }
    };

    // One result slot per subject, filled by whichever worker takes it.
    let mut results: Vec<Option<Result<Option<f64>, PipelineError>>> =
        (0..ids.len()).map(|_| None).collect();
    if threads <= 1 {
        for (slot, id) in results.iter_mut().zip(&ids) {
            *slot = Some(process(id));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Option<f64>, PipelineError>>>> =
            (0..ids.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= ids.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(process(&ids[i]));
                });
            }
        });
        for (slot, cell) in results.iter_mut().zip(slots) {
            *slot = cell.into_inner().unwrap();
        }
    }

    let mut summary = PreprocessSummary::default();
    for (id, outcome) in ids.into_iter().zip(results) {
        match outcome.expect("every subject processed") {
            Ok(Some(ratio)) => {
                log(&format!("accepted {id} (label ratio {ratio:.4})"));
                summary.accepted.push(id);
            }
            Ok(None) => {
                log(&format!(
                    "skipped {id} (label ratio at or below {})",
                    config.label_ratio_threshold
                ));
                summary.skipped.push(id);
            }
            Err(e) => {
                log(&format!("failed {id}: {e}"));
                summary.failures.push((id, e.to_string()));
            }
        }
    }

    let manifest: String = summary
        .accepted
        .iter()
        .map(|id| format!("{id}\n"))
        .collect();
    fs::write(out_root.join(MANIFEST_FILE), manifest)?;
    Ok(summary)
}

/// Loads every sample listed in the manifest under `data_root`.
pub fn load_manifest_samples(data_root: &Path) -> Result<Vec<Sample>, PipelineError> {
    let manifest = fs::read_to_string(data_root.join(MANIFEST_FILE))?;
    let mut samples = Vec::new();
    for id in manifest.lines().filter(|l| !l.trim().is_empty()) {
        samples.push(crate::store::load_sample(&data_root.join(id), id)?);
    }
    Ok(samples)
}
