//! Synthetic BraTS-style subjects for desk-scale runs: three modality
//! volumes of smoothed noise carrying class-correlated intensity signatures,
//! plus a mask of concentric ellipsoidal "tumor" shells labeled 1 (necrotic
//! core), 4 (enhancing rim, exercising the 4 -> 3 remap), and 2 (edema).
//! Volumes are written as gzipped NIfTI in the standard subject layout, so
//! the full ingestion path runs unchanged.

use std::path::Path;

use voxseg_core::rng::Rng;

use crate::nifti::{write_nifti, NiftiError, Volume, VolumeData};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub subjects: usize,
    pub extent: usize,
    pub seed: u64,
    /// Approximate fraction of voxels covered by the tumor; steer it above
    /// or below the acceptance threshold to exercise the ratio filter.
    pub tumor_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 2,
            extent: 64,
            seed: 7,
            tumor_frac: 0.03,
        }
    }
}

pub struct SynthSubject {
    pub t2: Vec<f32>,
    pub t1ce: Vec<f32>,
    pub flair: Vec<f32>,
    pub mask: Vec<u8>,
}

/// One pass of a 3-tap box blur along each axis.
fn box_blur(data: &mut Vec<f32>, e: usize) {
    let idx = |z: usize, y: usize, x: usize| (z * e + y) * e + x;
    let mut tmp = data.clone();
    // x axis
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(e - 1);
                tmp[idx(z, y, x)] =
                    (data[idx(z, y, lo)] + data[idx(z, y, x)] + data[idx(z, y, hi)]) / 3.0;
            }
        }
    }
    // y axis
    for z in 0..e {
        for y in 0..e {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(e - 1);
            for x in 0..e {
                data[idx(z, y, x)] =
                    (tmp[idx(z, lo, x)] + tmp[idx(z, y, x)] + tmp[idx(z, hi, x)]) / 3.0;
            }
        }
    }
    // z axis
    for z in 0..e {
        let lo = z.saturating_sub(1);
        let hi = (z + 1).min(e - 1);
        for y in 0..e {
            for x in 0..e {
                tmp[idx(z, y, x)] =
                    (data[idx(lo, y, x)] + data[idx(z, y, x)] + data[idx(hi, y, x)]) / 3.0;
            }
        }
    }
    *data = tmp;
}

fn noise_field(rng: &mut Rng, e: usize) -> Vec<f32> {
    let mut field: Vec<f32> = (0..e * e * e)
        .map(|_| rng.range_f64(0.0, 1.0) as f32)
        .collect();
    box_blur(&mut field, e);
    box_blur(&mut field, e);
    field
}

/// Builds one subject's volumes in memory.
pub fn synth_subject(rng: &mut Rng, extent: usize, tumor_frac: f64) -> SynthSubject {
    let e = extent;
    let n = e * e * e;
    let center = e as f64 / 2.0;

    // Tumor center jitters around the volume center; the outer semi-axis is
    // sized so the ellipsoid covers roughly tumor_frac of the volume.
    let jitter = e as f64 / 10.0;
    let cx = center + rng.range_f64(-jitter, jitter);
    let cy = center + rng.range_f64(-jitter, jitter);
    let cz = center + rng.range_f64(-jitter, jitter);
    let stretch = [
        rng.range_f64(0.85, 1.18),
        rng.range_f64(0.85, 1.18),
        rng.range_f64(0.85, 1.18),
    ];
    let vol_product: f64 = stretch.iter().product();
    let r0 = (3.0 * tumor_frac * n as f64 / (4.0 * std::f64::consts::PI * vol_product)).cbrt();
    let axes = [r0 * stretch[0], r0 * stretch[1], r0 * stretch[2]];

    // Brain envelope: a large centered ellipsoid; outside is empty space.
    let brain_r = 0.46 * e as f64;

    let mut mask = vec![0u8; n];
    let mut t2 = noise_field(rng, e);
    let mut t1ce = noise_field(rng, e);
    let mut flair = noise_field(rng, e);

    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let i = (z * e + y) * e + x;
                let (dz, dy, dx) = (z as f64 - cz, y as f64 - cy, x as f64 - cx);
                let rho = ((dx / axes[0]).powi(2)
                    + (dy / axes[1]).powi(2)
                    + (dz / axes[2]).powi(2))
                .sqrt();

                let (bz, by, bx) = (z as f64 - center, y as f64 - center, x as f64 - center);
                let brain = (bx * bx + by * by + bz * bz).sqrt() < brain_r;
                if !brain {
                    t2[i] = 0.0;
                    t1ce[i] = 0.0;
                    flair[i] = 0.0;
                    continue;
                }
                // Baseline tissue intensity.
                t2[i] = 0.2 + 0.35 * t2[i];
                t1ce[i] = 0.2 + 0.35 * t1ce[i];
                flair[i] = 0.2 + 0.35 * flair[i];

                // Concentric shells: necrotic core, enhancing rim (stored as
                // the raw BraTS value 4), surrounding edema. Each class gets
                // a distinct modality signature well above the noise floor.
                let label = if rho < 0.45 {
                    1u8
                } else if rho < 0.75 {
                    4
                } else if rho < 1.0 {
                    2
                } else {
                    0
                };
                mask[i] = label;
                match label {
                    1 => {
                        t2[i] += 0.9;
                        t1ce[i] += 0.1;
                    }
                    4 => {
                        t1ce[i] += 0.9;
                        flair[i] += 0.35;
                    }
                    2 => {
                        flair[i] += 0.9;
                        t2[i] += 0.3;
                    }
                    _ => {}
                }
            }
        }
    }

    SynthSubject {
        t2,
        t1ce,
        flair,
        mask,
    }
}

/// Writes `subjects` synthetic subjects under `root` in the BraTS layout
/// `<root>/<id>/<id>_{t2,t1ce,flair,seg}.nii.gz`. Returns the subject ids.
pub fn generate(root: &Path, cfg: &SynthConfig) -> Result<Vec<String>, NiftiError> {
    let mut master = Rng::new(cfg.seed);
    let mut ids = Vec::with_capacity(cfg.subjects);
    for index in 0..cfg.subjects {
        let mut rng = master.fork(index as u64);
        let subject = synth_subject(&mut rng, cfg.extent, cfg.tumor_frac);
        let id = format!("synth_{index:03}");
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir)?;

        let shape = vec![cfg.extent; 3];
        let spacing = [1.0f32; 3];
        for (name, data) in [
            ("t2", &subject.t2),
            ("t1ce", &subject.t1ce),
            ("flair", &subject.flair),
        ] {
            let vol = Volume {
                shape: shape.clone(),
                data: VolumeData::F32(data.clone()),
                spacing,
            };
            write_nifti(&vol, &dir.join(format!("{id}_{name}.nii.gz")))?;
        }
        let mask_vol = Volume {
            shape,
            data: VolumeData::U8(subject.mask.clone()),
            spacing,
        };
        write_nifti(&mask_vol, &dir.join(format!("{id}_seg.nii.gz")))?;
        ids.push(id);
    }
    Ok(ids)
}
