//! Preprocessing math for BraTS-style subjects: per-volume min-max
//! normalization, label remapping (4 -> 3), modality stacking, centered
//! cropping, and the nonzero-label ratio filter. File ingestion and the
//! per-subject driver live in the companion crate; everything here is pure.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{LabelGrid, Tensor};

/// MRI modalities stacked into the network input, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    T2,
    T1ce,
    Flair,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T2 => "t2",
            Modality::T1ce => "t1ce",
            Modality::Flair => "flair",
        }
    }
}

/// Default channel order: T2, T1CE, FLAIR. T1 carries no tumor signal and is
/// not stacked.
pub const DEFAULT_MODALITIES: [Modality; 3] = [Modality::T2, Modality::T1ce, Modality::Flair];

#[derive(Clone, Debug, PartialEq)]
pub enum PreprocessError {
    NonFiniteInput,
    UnknownLabel(u8),
    ShapeMismatch(String),
    TargetTooLarge(String),
    BadConfig(String),
}

impl core::fmt::Display for PreprocessError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PreprocessError::NonFiniteInput => write!(f, "volume contains NaN or infinity"),
            PreprocessError::UnknownLabel(v) => {
                write!(f, "mask value {v} outside the expected set {{0,1,2,4}}")
            }
            PreprocessError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            PreprocessError::TargetTooLarge(msg) => write!(f, "crop target too large: {msg}"),
            PreprocessError::BadConfig(msg) => write!(f, "bad preprocess config: {msg}"),
        }
    }
}

impl core::error::Error for PreprocessError {}

/// Crop target, acceptance threshold, and modality order. `extent_divisor`
/// is 64 for real data; dev mode relaxes it to 16 so 32-cubed fixtures run
/// end to end.
#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub crop_target: [usize; 3],
    pub label_ratio_threshold: f64,
    pub modalities: Vec<Modality>,
    pub extent_divisor: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_target: [128, 128, 128],
            label_ratio_threshold: 0.01,
            modalities: DEFAULT_MODALITIES.to_vec(),
            extent_divisor: 64,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.extent_divisor == 0 {
            return Err(PreprocessError::BadConfig("extent divisor is zero".into()));
        }
        for &side in &self.crop_target {
            if side == 0 || side % self.extent_divisor != 0 {
                return Err(PreprocessError::BadConfig(format!(
                    "crop target {:?} must be positive multiples of {}",
                    self.crop_target, self.extent_divisor
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_ratio_threshold) {
            return Err(PreprocessError::BadConfig(format!(
                "label ratio threshold {} outside [0, 1)",
                self.label_ratio_threshold
            )));
        }
        if self.modalities.len() != 3 {
            return Err(PreprocessError::BadConfig(format!(
                "expected 3 modalities, got {}",
                self.modalities.len()
            )));
        }
        Ok(())
    }
}

/// Preprocessed subject: stacked intensities in [0,1] and the remapped mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelGrid,
    pub subject_id: String,
}

impl Sample {
    /// Checks every Sample invariant: 3 channels, values in [0,1], spatial
    /// extents divisible by `divisor` and equal to the mask extents.
    pub fn validate(&self, divisor: usize) -> Result<(), PreprocessError> {
        let shape = self.image.shape();
        if shape.len() != 4 || shape[0] != 3 {
            return Err(PreprocessError::ShapeMismatch(format!(
                "image shape {:?}, expected [3, D, H, W]",
                shape
            )));
        }
        let spatial = [shape[1], shape[2], shape[3]];
        if spatial != self.mask.shape() {
            return Err(PreprocessError::ShapeMismatch(format!(
                "image spatial {:?} vs mask {:?}",
                spatial,
                self.mask.shape()
            )));
        }
        for &side in &spatial {
            if side % divisor != 0 {
                return Err(PreprocessError::BadConfig(format!(
                    "extent {side} not divisible by {divisor}"
                )));
            }
        }
        if self
            .image
            .data()
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(PreprocessError::NonFiniteInput);
        }
        if let Some(&bad) = self.mask.data().iter().find(|&&v| v > 3) {
            return Err(PreprocessError::UnknownLabel(bad));
        }
        Ok(())
    }
}

/// Rescales a whole volume to [0,1] via (v - min) / (max - min). A constant
/// volume maps to all zeros rather than NaN.
pub fn minmax_normalize(volume: &Tensor<f32>) -> Result<Tensor<f32>, PreprocessError> {
    if !volume.all_finite() {
        return Err(PreprocessError::NonFiniteInput);
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in volume.data() {
        min = min.min(v);
        max = max.max(v);
    }
    if volume.is_empty() || max == min {
        return Ok(Tensor::zeros(volume.shape()));
    }
    let inv = 1.0 / (max - min);
    Ok(volume.map(|v| (v - min) * inv))
}

/// Reassigns mask value 4 to 3 and leaves 0,1,2 unchanged. Any other value
/// violates the BraTS labeling convention and is rejected.
pub fn remap_labels(shape: [usize; 3], mask: &[u8]) -> Result<LabelGrid, PreprocessError> {
    let mut out = Vec::with_capacity(mask.len());
    for &v in mask {
        out.push(match v {
            0 | 1 | 2 => v,
            4 => 3,
            other => return Err(PreprocessError::UnknownLabel(other)),
        });
    }
    Ok(LabelGrid::new(shape, out))
}

/// Stacks same-shaped volumes into a `[C, D, H, W]` tensor; channel `c` is
/// the c-th input, unmodified.
pub fn stack_modalities(volumes: &[Tensor<f32>]) -> Result<Tensor<f32>, PreprocessError> {
    let first = volumes
        .first()
        .ok_or_else(|| PreprocessError::ShapeMismatch("no volumes to stack".into()))?;
    if first.shape().len() != 3 {
        return Err(PreprocessError::ShapeMismatch(format!(
            "expected [D, H, W] volumes, got {:?}",
            first.shape()
        )));
    }
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.shape() != first.shape() {
            return Err(PreprocessError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                v.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(v.data());
    }
    let s = first.shape();
    Ok(Tensor::from_vec(&[volumes.len(), s[0], s[1], s[2]], data))
}

/// Centered crop window: start index floor((src - tgt) / 2) per axis.
pub fn crop_window(source: [usize; 3], target: [usize; 3]) -> Result<[usize; 3], PreprocessError> {
    for axis in 0..3 {
        if target[axis] > source[axis] {
            return Err(PreprocessError::TargetTooLarge(format!(
                "target {:?} exceeds source {:?}",
                target, source
            )));
        }
    }
    Ok([
        (source[0] - target[0]) / 2,
        (source[1] - target[1]) / 2,
        (source[2] - target[2]) / 2,
    ])
}

/// Crops image and mask with the identical centered window.
pub fn center_crop(
    image: &Tensor<f32>,
    mask: &LabelGrid,
    target: [usize; 3],
) -> Result<(Tensor<f32>, LabelGrid), PreprocessError> {
    let shape = image.shape();
    if shape.len() != 4 {
        return Err(PreprocessError::ShapeMismatch(format!(
            "expected [C, D, H, W] image, got {:?}",
            shape
        )));
    }
    let channels = shape[0];
    let src = [shape[1], shape[2], shape[3]];
    if src != mask.shape() {
        return Err(PreprocessError::ShapeMismatch(format!(
            "image spatial {:?} vs mask {:?}",
            src,
            mask.shape()
        )));
    }
    let start = crop_window(src, target)?;
    let [td, th, tw] = target;
    let (sh, sw) = (src[1], src[2]);
    let src_vox = src[0] * sh * sw;

    let mut image_out = Vec::with_capacity(channels * td * th * tw);
    for c in 0..channels {
        let ch = &image.data()[c * src_vox..(c + 1) * src_vox];
        for z in 0..td {
            for y in 0..th {
                let row = ((start[0] + z) * sh + start[1] + y) * sw + start[2];
                image_out.extend_from_slice(&ch[row..row + tw]);
            }
        }
    }
    let mut mask_out = Vec::with_capacity(td * th * tw);
    for z in 0..td {
        for y in 0..th {
            let row = ((start[0] + z) * sh + start[1] + y) * sw + start[2];
            mask_out.extend_from_slice(&mask.data()[row..row + tw]);
        }
    }
    Ok((
        Tensor::from_vec(&[channels, td, th, tw], image_out),
        LabelGrid::new(target, mask_out),
    ))
}

/// Fraction of voxels with a nonzero label, evaluated exactly in f64.
pub fn nonzero_label_ratio(mask: &LabelGrid) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let nonzero = mask.data().iter().filter(|&&v| v != 0).count();
    nonzero as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn normalize_affine_rescale() {
        let v = Tensor::from_vec(&[1, 1, 3], vec![2.0, 4.0, 6.0]);
        let out = minmax_normalize(&v).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_volume_is_all_zeros() {
        let v = Tensor::from_vec(&[1, 1, 3], vec![5.0; 3]);
        let out = minmax_normalize(&v).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_spans_unit_interval() {
        let mut rng = Rng::new(2);
        let data: Vec<f32> = (0..512).map(|_| rng.range_f64(-40.0, 900.0) as f32).collect();
        let v = Tensor::from_vec(&[8, 8, 8], data);
        let out = minmax_normalize(&v).unwrap();
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &x in out.data() {
            min = min.min(x);
            max = max.max(x);
        }
        assert!(min.abs() < 1e-7, "min {min}");
        assert!((max - 1.0).abs() < 1e-7, "max {max}");
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = Rng::new(13);
        let data: Vec<f32> = (0..216).map(|_| rng.range_f64(10.0, 200.0) as f32).collect();
        let v = Tensor::from_vec(&[6, 6, 6], data);
        let once = minmax_normalize(&v).unwrap();
        let twice = minmax_normalize(&once).unwrap();
        for (&a, &b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_nan() {
        let v = Tensor::from_vec(&[1, 1, 2], vec![f32::NAN, 1.0]);
        assert_eq!(minmax_normalize(&v), Err(PreprocessError::NonFiniteInput));
    }

    #[test]
    fn remap_moves_four_to_three() {
        let out = remap_labels([1, 1, 4], &[0, 1, 2, 4]).unwrap();
        assert_eq!(out.data(), &[0, 1, 2, 3]);
    }

    #[test]
    fn remap_keeps_background_and_preserves_counts() {
        let zeros = remap_labels([1, 1, 3], &[0, 0, 0]).unwrap();
        assert_eq!(zeros.data(), &[0, 0, 0]);

        let mut rng = Rng::new(9);
        let choices = [0u8, 1, 2, 4];
        let raw: Vec<u8> = (0..600).map(|_| choices[rng.below(4)]).collect();
        let remapped = remap_labels([6, 10, 10], &raw).unwrap();
        // The bijection {0,1,2,4} -> {0,1,2,3} preserves per-class counts.
        for &(src, dst) in [(0u8, 0u8), (1, 1), (2, 2), (4, 3)].iter() {
            let before = raw.iter().filter(|&&v| v == src).count();
            let after = remapped.data().iter().filter(|&&v| v == dst).count();
            assert_eq!(before, after, "count changed for label {src}");
        }
    }

    #[test]
    fn remap_rejects_label_three() {
        assert_eq!(
            remap_labels([1, 1, 1], &[3]),
            Err(PreprocessError::UnknownLabel(3))
        );
    }

    #[test]
    fn stack_orders_channels() {
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]);
        let c = Tensor::from_vec(&[1, 1, 2], vec![5.0, 6.0]);
        let s = stack_modalities(&[a, b.clone(), c]).unwrap();
        assert_eq!(s.shape(), &[3, 1, 1, 2]);
        assert_eq!(&s.data()[2..4], b.data());
    }

    #[test]
    fn stack_rejects_mismatched_extents() {
        let a = Tensor::<f32>::zeros(&[4, 4, 4]);
        let b = Tensor::<f32>::zeros(&[4, 4, 5]);
        assert!(matches!(
            stack_modalities(&[a, b]),
            Err(PreprocessError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn crop_window_is_floored_center() {
        assert_eq!(
            crop_window([70, 70, 70], [64, 64, 64]).unwrap(),
            [3, 3, 3]
        );
        assert_eq!(crop_window([64, 64, 64], [64, 64, 64]).unwrap(), [0, 0, 0]);
        assert!(matches!(
            crop_window([63, 64, 64], [64, 64, 64]),
            Err(PreprocessError::TargetTooLarge(_))
        ));
    }

    fn indexed_mask(shape: [usize; 3]) -> LabelGrid {
        let n = shape.iter().product::<usize>();
        LabelGrid::new(shape, (0..n).map(|i| (i % 4) as u8).collect())
    }

    #[test]
    fn crop_uses_identical_window_for_image_and_mask() {
        let src = [6usize, 6, 6];
        let n: usize = src.iter().product();
        let image = Tensor::from_vec(
            &[1, 6, 6, 6],
            (0..n).map(|i| i as f32 / n as f32).collect(),
        );
        let mask = indexed_mask(src);
        let (ci, cm) = center_crop(&image, &mask, [4, 4, 4]).unwrap();
        // Window starts at (1,1,1): cropped voxel (z,y,x) == source (z+1,y+1,x+1).
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let src_idx = ((z + 1) * 6 + y + 1) * 6 + x + 1;
                    let dst_idx = (z * 4 + y) * 4 + x;
                    assert_eq!(cm.data()[dst_idx], mask.data()[src_idx]);
                    assert_eq!(ci.data()[dst_idx], image.data()[src_idx]);
                }
            }
        }
    }

    #[test]
    fn crop_at_source_size_is_identity() {
        let image = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| i as f32 / 16.0).collect());
        let mask = indexed_mask([2, 2, 2]);
        let (ci, cm) = center_crop(&image, &mask, [2, 2, 2]).unwrap();
        assert_eq!(ci, image);
        assert_eq!(cm, mask);
    }

    #[test]
    fn crop_commutes_with_remap() {
        let mut rng = Rng::new(21);
        let src = [8usize, 8, 8];
        let n: usize = src.iter().product();
        let choices = [0u8, 1, 2, 4];
        let raw: Vec<u8> = (0..n).map(|_| choices[rng.below(4)]).collect();
        let image = Tensor::zeros(&[1, 8, 8, 8]);

        // remap(crop(m)) built by cropping the raw mask first.
        let raw_as_grid = LabelGrid::new(src, raw.iter().map(|&v| v.min(3)).collect());
        let _ = raw_as_grid; // crop operates on the raw grid below
        let raw_grid = LabelGrid::new(src, raw.clone());
        let (_, cropped_raw) = center_crop(&image, &raw_grid, [4, 4, 4]).unwrap();
        let remap_after = remap_labels([4, 4, 4], cropped_raw.data()).unwrap();

        // crop(remap(m)).
        let remapped = remap_labels(src, &raw).unwrap();
        let (_, crop_after) = center_crop(&image, &remapped, [4, 4, 4]).unwrap();

        assert_eq!(remap_after, crop_after);
    }

    #[test]
    fn ratio_is_exact_rational() {
        let mut data = vec![0u8; 1000];
        for slot in data.iter_mut().take(15) {
            *slot = 2;
        }
        let mask = LabelGrid::new([10, 10, 10], data);
        assert_eq!(nonzero_label_ratio(&mask), 0.015);
        assert_eq!(nonzero_label_ratio(&LabelGrid::zeros([2, 2, 2])), 0.0);
        let all = LabelGrid::new([1, 1, 4], vec![1, 2, 3, 1]);
        assert_eq!(nonzero_label_ratio(&all), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PreprocessConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.crop_target = [100, 128, 128];
        assert!(cfg.validate().is_err());
        cfg.crop_target = [32, 32, 32];
        assert!(cfg.validate().is_err(), "32 not divisible by 64");
        cfg.extent_divisor = 16;
        assert!(cfg.validate().is_ok(), "dev divisor accepts 32");
        cfg.label_ratio_threshold = 1.0;
        assert!(cfg.validate().is_err());
    }
}
