//! Axial slice overlays as binary PPM (P6): grayscale FLAIR background with
//! class-colored labels blended at 50%. Label 1 is red, 2 green, 3 yellow.

use std::fs;
use std::io;
use std::path::Path;

use voxseg_core::preprocess::{Modality, DEFAULT_MODALITIES};
use voxseg_core::tensor::{LabelGrid, Tensor};

/// 50% blend palette for labels 1..=3.
const PALETTE: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [255, 255, 0]];

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes)
}

/// Renders one axial slice (fixed depth index) of a `[3, D, H, W]` image in
/// [0,1] with its labels.
pub fn render_slice(image: &Tensor<f32>, labels: &LabelGrid, z: usize) -> Vec<u8> {
    let shape = image.shape();
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    assert!(z < d);
    let voxels = d * h * w;
    let flair_channel = DEFAULT_MODALITIES
        .iter()
        .position(|&m| m == Modality::Flair)
        .unwrap();
    let flair = &image.data()[flair_channel * voxels..(flair_channel + 1) * voxels];

    let mut rgb = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let idx = (z * h + y) * w + x;
            let gray = (flair[idx].clamp(0.0, 1.0) * 255.0) as u16;
            let label = labels.data()[idx];
            if label == 0 {
                let g = gray as u8;
                rgb.extend_from_slice(&[g, g, g]);
            } else {
                let color = PALETTE[(label - 1) as usize];
                for c in 0..3 {
                    rgb.push(((gray + color[c] as u16) / 2) as u8);
                }
            }
        }
    }
    rgb
}

/// Writes one PPM per axial slice (`slice_0000.ppm` ...); returns the count.
pub fn write_overlays(
    image: &Tensor<f32>,
    labels: &LabelGrid,
    out_dir: &Path,
) -> io::Result<usize> {
    fs::create_dir_all(out_dir)?;
    let depth = image.shape()[1];
    for z in 0..depth {
        let rgb = render_slice(image, labels, z);
        let (h, w) = (image.shape()[2], image.shape()[3]);
        write_ppm(&out_dir.join(format!("slice_{z:04}.ppm")), w, h, &rgb)?;
    }
    Ok(depth)
}
