//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured margin. Paper-scale headline numbers require
//! the full BraTS 2020 dataset and datacenter hardware; acceptance here is
//! property-based plus scaled-down experiments on synthetic volumes.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use voxseg::nifti::{nifti_bytes, parse_nifti, ElementKind, Volume, VolumeData};
use voxseg::pipeline::{preprocess_subject, run_preprocess, Subject};
use voxseg::report::csv_column;
use voxseg::store::{load_label_grid, load_sample};
use voxseg::synth::{generate, SynthConfig};
use voxseg::trainer::{train, Clock, EarlyStopper, TrainConfig};
use voxseg_core::attention::{multihead_attention_detailed, AttentionWeights};
use voxseg_core::gradcheck::{max_relative_error, numerical_gradient, DEFAULT_STEP};
use voxseg_core::metrics;
use voxseg_core::model::{ModelConfig, UNet3DMHA};
use voxseg_core::preprocess::{
    minmax_normalize, nonzero_label_ratio, remap_labels, PreprocessConfig,
};
use voxseg_core::rng::Rng;
use voxseg_core::tape::{Tape, ValueId};
use voxseg_core::tensor::{LabelGrid, Tensor};

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(lo, hi)).collect())
}

/// Worst relative error of d(build)/d(each input) against central
/// finite differences in f64.
fn grad_err(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &ids);
    tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).expect("missing gradient").to_vec();
        let eval = |point: &[f64]| -> f64 {
            let mut probe = inputs.to_vec();
            probe[i] = Tensor::from_vec(input.shape(), point.to_vec());
            let mut t = Tape::new();
            let ids: Vec<ValueId> = probe.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let root = build(&mut t, &ids);
            t.value(root).data()[0]
        };
        let numeric = numerical_gradient(input.data(), eval, DEFAULT_STEP);
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-7));
    }
    worst
}

fn random_one_hot(rng: &mut Rng, classes: usize, locations: usize) -> Tensor<f64> {
    let mut data = vec![0.0; classes * locations];
    for s in 0..locations {
        data[rng.below(classes) * locations + s] = 1.0;
    }
    Tensor::from_vec(&[classes, locations], data)
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let mut rng = Rng::new(2001);
    let tol = 1e-4;
    let mut worst_name = "";
    let mut worst = 0.0f64;
    let mut record = |name: &'static str, err: f64, limit: f64| {
        assert!(err < limit, "{name}: relative error {err} exceeds {limit}");
        if err > worst {
            worst = err;
            worst_name = name;
        }
    };

    // conv3d through input, weight, and bias.
    {
        let input = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let weight = rand_tensor(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
        let bias = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let probe = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let err = grad_err(&[input, weight, bias], |tape, ids| {
            let y = tape.conv3d(ids[0], ids[1], ids[2]).unwrap();
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("conv3d", err, tol);
    }
    // relu away from the kink.
    {
        let data: Vec<f64> = (0..32)
            .map(|_| {
                let v = rng.range_f64(0.05, 1.0);
                if rng.below(2) == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[32], data);
        let probe = rand_tensor(&mut rng, &[32], -1.0, 1.0);
        let err = grad_err(&[x], |tape, ids| {
            let y = tape.relu(ids[0]);
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("relu", err, tol);
    }
    // maxpool3d away from ties.
    {
        let n = 2 * 4 * 4 * 4;
        let data: Vec<f64> = (0..n)
            .map(|i| rng.range_f64(-1.0, 1.0) + i as f64 * 1e-3)
            .collect();
        let x = Tensor::from_vec(&[2, 4, 4, 4], data);
        let probe = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let err = grad_err(&[x], |tape, ids| {
            let y = tape.maxpool3d(ids[0]).unwrap();
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("maxpool3d", err, tol);
    }
    // upsample.
    {
        let x = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
        let err = grad_err(&[x], |tape, ids| {
            let y = tape.upsample3d(ids[0]).unwrap();
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("upsample3d", err, tol);
    }
    // concat_channels through both inputs.
    {
        let a = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[5, 2, 2, 2], -1.0, 1.0);
        let err = grad_err(&[a, b], |tape, ids| {
            let y = tape.concat_channels(ids[0], ids[1]).unwrap();
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("concat_channels", err, tol);
    }
    // softmax over channels.
    {
        let x = rand_tensor(&mut rng, &[4, 2, 2, 2], -2.0, 2.0);
        let probe = rand_tensor(&mut rng, &[4, 2, 2, 2], -1.0, 1.0);
        let err = grad_err(&[x], |tape, ids| {
            let y = tape.softmax_channels(ids[0]).unwrap();
            tape.weighted_sum(y, probe.clone()).unwrap()
        });
        record("softmax_channels", err, tol);
    }
    // multi-head attention through all four projections and both token sets.
    {
        let (n_q, n_kv, d_model, heads) = (3, 4, 8, 2);
        let q = rand_tensor(&mut rng, &[n_q, d_model], -1.0, 1.0);
        let kv = rand_tensor(&mut rng, &[n_kv, d_model], -1.0, 1.0);
        let mats: Vec<Tensor<f64>> = (0..4)
            .map(|_| rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5))
            .collect();
        let probe = rand_tensor(&mut rng, &[n_q, d_model], -1.0, 1.0);
        let inputs: Vec<Tensor<f64>> =
            [q, kv].into_iter().chain(mats.into_iter()).collect();
        let err = grad_err(&inputs, |tape, ids| {
            let w = AttentionWeights {
                w_q: ids[2],
                w_k: ids[3],
                w_v: ids[4],
                w_o: ids[5],
            };
            let out = multihead_attention_detailed(tape, ids[0], ids[1], heads, w)
                .unwrap()
                .output;
            tape.weighted_sum(out, probe.clone()).unwrap()
        });
        record("multihead_attention", err, tol);
    }
    // Both losses through softmax.
    {
        let (classes, locations) = (4, 8);
        let logits = rand_tensor(&mut rng, &[classes, locations], -1.5, 1.5);
        let target = random_one_hot(&mut rng, classes, locations);
        let t2 = target.clone();
        let err = grad_err(&[logits.clone()], |tape, ids| {
            let p = tape.softmax_channels(ids[0]).unwrap();
            tape.cross_entropy(p, t2.clone()).unwrap()
        });
        record("cross_entropy", err, tol);
        let err = grad_err(&[logits], |tape, ids| {
            let p = tape.softmax_channels(ids[0]).unwrap();
            tape.dice_loss(p, target.clone()).unwrap()
        });
        record("dice_loss", err, tol);
    }
    // End-to-end model slice on a 16-cubed micro config, f64, tol 1e-3.
    {
        let config = ModelConfig {
            base_filters: 4,
            input_extent: [16, 16, 16],
            ..ModelConfig::default()
        };
        let model: UNet3DMHA<f64> = UNet3DMHA::build(config, 3030).unwrap();
        let image = rand_tensor(&mut rng, &[3, 16, 16, 16], 0.0, 1.0);
        let voxels = 16 * 16 * 16;
        let mut target = vec![0.0; 4 * voxels];
        for s in 0..voxels {
            target[rng.below(4) * voxels + s] = 1.0;
        }
        let target = Tensor::from_vec(&[4, 16, 16, 16], target);
        let slot = model
            .params()
            .iter()
            .position(|p| p.name == "dec1.conv1.weight")
            .unwrap();

        let loss_of = |m: &UNet3DMHA<f64>| -> f64 {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, false);
            let x = tape.leaf(image.clone(), false);
            let probs = m.forward(&mut tape, &bound, x).unwrap();
            let ce = tape.cross_entropy(probs, target.clone()).unwrap();
            let dl = tape.dice_loss(probs, target.clone()).unwrap();
            let root = tape.add(ce, dl).unwrap();
            tape.value(root).data()[0]
        };
        let analytic = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.leaf(image.clone(), false);
            let probs = model.forward(&mut tape, &bound, x).unwrap();
            let ce = tape.cross_entropy(probs, target.clone()).unwrap();
            let dl = tape.dice_loss(probs, target.clone()).unwrap();
            let root = tape.add(ce, dl).unwrap();
            tape.backward(root).unwrap();
            tape.grad(bound.ids()[slot]).unwrap().to_vec()
        };
        let len = model.params()[slot].tensor.len();
        let h = 1e-5;
        // Entries far below the slice's gradient scale only measure
        // cancellation noise; floor the denominator accordingly.
        let grad_scale = analytic.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        let mut model_worst = 0.0f64;
        for pick in 0..4 {
            let idx = (pick * 7919) % len;
            let mut plus = model.cast::<f64>();
            plus.params_mut()[slot].tensor.data_mut()[idx] += h;
            let mut minus = model.cast::<f64>();
            minus.params_mut()[slot].tensor.data_mut()[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = analytic[idx]
                .abs()
                .max(numeric.abs())
                .max(1e-3 * grad_scale)
                .max(1e-12);
            model_worst = model_worst.max((analytic[idx] - numeric).abs() / denom);
        }
        record("model end-to-end", model_worst, 1e-3);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s, budget 120s");
    println!(
        "[PASS] criterion 1: gradient suite, worst relative error {worst:.2e} ({worst_name}), {elapsed:.1}s"
    );
}

#[test]
fn criterion_02_shape_and_normalization() {
    let started = Instant::now();
    let cfg = ModelConfig::default();
    let model: UNet3DMHA<f32> = UNet3DMHA::build(cfg.clone(), 2002).unwrap();
    let mut rng = Rng::new(7);
    let n = 3 * 64 * 64 * 64;
    let image = Tensor::from_vec(
        &[3, 64, 64, 64],
        (0..n).map(|_| rng.next_f64() as f32).collect(),
    );
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.leaf(image, false);
    let (probs, trace) = model.forward_traced(&mut tape, &bound, x).unwrap();

    assert_eq!(tape.value(probs).shape(), &[4, 64, 64, 64]);
    let voxels = 64 * 64 * 64;
    let data = tape.value(probs).data();
    let mut worst_sum = 0.0f32;
    for s in 0..voxels {
        let sum: f32 = (0..4).map(|k| data[k * voxels + s]).sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    assert!(worst_sum < 1e-5, "channel sums off by {worst_sum}");

    for &(level, channels, extent) in trace.encoder.iter().chain(trace.decoder.iter()) {
        let side = 64 >> level;
        assert_eq!(channels, cfg.base_filters << level, "level {level} channels");
        assert_eq!(extent, [side, side, side], "level {level} extent");
    }
    assert_eq!(trace.bottleneck.0, cfg.base_filters << cfg.levels);
    let bottom = 64 >> cfg.levels;
    assert_eq!(trace.bottleneck.1, [bottom, bottom, bottom]);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "shape suite took {elapsed:.1}s, budget 60s");
    println!(
        "[PASS] criterion 2: 3x64^3 -> 4x64^3, worst channel-sum error {worst_sum:.1e}, extents telescope, {elapsed:.1}s"
    );
}

#[test]
fn criterion_03_overfit_capacity() {
    let started = Instant::now();
    // Two synthetic 32-cubed subjects through the real preprocessing path.
    let root = std::env::temp_dir().join("voxseg_accept_overfit");
    let _ = fs::remove_dir_all(&root);
    generate(
        &root,
        &SynthConfig {
            subjects: 2,
            extent: 32,
            seed: 303,
            tumor_frac: 0.05,
        },
    )
    .unwrap();
    let pre = PreprocessConfig {
        crop_target: [32, 32, 32],
        extent_divisor: 16, // dev mode
        ..PreprocessConfig::default()
    };
    let samples: Vec<_> = (0..2)
        .map(|i| {
            let subject = Subject::locate(&root, &format!("synth_{i:03}")).unwrap();
            preprocess_subject(&subject, &pre)
                .unwrap()
                .expect("synthetic tumors exceed the ratio threshold")
        })
        .collect();
    fs::remove_dir_all(&root).ok();

    // Default desk model (base 16), Adam lr 1e-3, batch 2, <= 300 steps.
    let model_cfg = ModelConfig {
        input_extent: [32, 32, 32],
        ..ModelConfig::default()
    };
    let mut model = UNet3DMHA::build(model_cfg, 2003).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        epochs: 300, // one optimizer step per epoch at batch 2 over 2 samples
        patience: 10_000,
        val_fraction: 0.0,
        seed: 42,
        loss_mix: 1.0,
        dice_stop: Some(0.95),
    };
    let outcome = train(&mut model, &samples, &config, Clock::Virtual).unwrap();
    let steps = outcome.run_log.epochs.len();
    let best_dice = outcome
        .run_log
        .epochs
        .iter()
        .map(|e| e.train_macro_dice())
        .fold(0.0f64, f64::max);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        best_dice > 0.95,
        "train macro soft-Dice reached only {best_dice:.4} in {steps} steps"
    );
    assert!(steps <= 300, "needed {steps} steps");
    assert!(elapsed < 600.0, "overfit took {elapsed:.1}s, budget 600s");
    println!(
        "[PASS] criterion 3: overfit macro soft-Dice {best_dice:.4} after {steps} steps, {elapsed:.1}s"
    );
}

#[test]
fn criterion_04_metrics_oracle_equivalence() {
    let mut rng = Rng::new(2004);
    let n = 16 * 16 * 16;
    for case in 0..100 {
        let pred_data: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        let truth_data: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        let pred = LabelGrid::new([16, 16, 16], pred_data.clone());
        let truth = LabelGrid::new([16, 16, 16], truth_data.clone());
        for class_id in 0..4u8 {
            // Brute-force per-voxel tally.
            let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..n {
                match (pred_data[i] == class_id, truth_data[i] == class_id) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            let c = metrics::confusion_counts(&pred, &truth, class_id).unwrap();
            assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_), "case {case}");

            // Every Eq. 2-7 value as an exact integer ratio.
            assert_eq!(
                metrics::accuracy(&c).unwrap(),
                (tp + tn) as f64 / n as f64
            );
            assert_eq!(
                metrics::precision(&c),
                if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 }
            );
            assert_eq!(
                metrics::sensitivity(&c),
                if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 }
            );
            assert_eq!(
                metrics::specificity(&c),
                if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 }
            );
            let iou = metrics::iou(&pred, &truth, class_id).unwrap();
            let dice = metrics::dice(&pred, &truth, class_id).unwrap();
            assert_eq!(
                iou,
                if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 }
            );
            assert_eq!(
                dice,
                if 2 * tp + fp + fn_ == 0 {
                    1.0
                } else {
                    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
                }
            );
            assert!(
                (dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12,
                "dice/iou identity violated"
            );
        }
    }
    println!("[PASS] criterion 4: 100 random label-grid pairs match the brute-force tally exactly");
}

#[test]
fn criterion_05_bce_analytic_value() {
    let probs = vec![0.5; 4096];
    let truth = vec![true; 4096];
    let loss = metrics::bce_loss(&probs, &truth).unwrap();
    let err = (loss - std::f64::consts::LN_2).abs();
    assert!(err < 1e-9, "bce(y=1, p=0.5) off by {err}");
    println!("[PASS] criterion 5: bce(y=1, p=0.5) = ln 2 within {err:.1e}");
}

#[test]
fn criterion_06_preprocessing_properties() {
    let mut rng = Rng::new(2006);

    // Normalization spans [0,1]; constant volumes map to zero.
    for _ in 0..20 {
        let data: Vec<f32> = (0..512)
            .map(|_| rng.range_f64(-100.0, 2000.0) as f32)
            .collect();
        let out = minmax_normalize(&Tensor::from_vec(&[8, 8, 8], data)).unwrap();
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in out.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo.abs() < 1e-7 && (hi - 1.0).abs() < 1e-7);
    }
    let flat = minmax_normalize(&Tensor::from_vec(&[2, 2, 2], vec![3.0; 8])).unwrap();
    assert!(flat.data().iter().all(|&v| v == 0.0));

    // Remap eliminates 4 and preserves counts under the bijection.
    let choices = [0u8, 1, 2, 4];
    let raw: Vec<u8> = (0..4096).map(|_| choices[rng.below(4)]).collect();
    let remapped = remap_labels([16, 16, 16], &raw).unwrap();
    assert!(remapped.data().iter().all(|&v| v != 4));
    for &(src, dst) in &[(0u8, 0u8), (1, 1), (2, 2), (4, 3)] {
        let before = raw.iter().filter(|&&v| v == src).count();
        let after = remapped.data().iter().filter(|&&v| v == dst).count();
        assert_eq!(before, after);
    }

    // Crops are divisible by 64 (or 16 in dev mode) by config validation.
    assert!(PreprocessConfig::default().validate().is_ok());
    let bad = PreprocessConfig {
        crop_target: [96, 128, 128],
        ..PreprocessConfig::default()
    };
    assert!(bad.validate().is_err(), "96 is not a multiple of 64");

    // Ratio filter: constructed fixtures straddling the 1% threshold on a
    // 1000-voxel grid where 1% is exactly representable.
    let make_mask = |nonzero: usize| {
        let mut data = vec![0u8; 1000];
        for slot in data.iter_mut().take(nonzero) {
            *slot = 2;
        }
        LabelGrid::new([10, 10, 10], data)
    };
    let threshold = 0.01;
    let above = make_mask(11); // 1.1%
    let exactly_at = make_mask(10); // 1.0% exactly
    let below = make_mask(9); // 0.9%
    assert_eq!(nonzero_label_ratio(&exactly_at), 0.01);
    // The accept rule is strictly greater-than: only the 1.1% fixture passes.
    assert!(nonzero_label_ratio(&above) > threshold);
    assert!(!(nonzero_label_ratio(&exactly_at) > threshold));
    assert!(!(nonzero_label_ratio(&below) > threshold));

    println!("[PASS] criterion 6: normalization, remap bijection, crop divisibility, and ratio filter hold");
}

#[test]
fn criterion_07_nifti_round_trip_and_fuzz() {
    // Round trip all five kinds.
    let kinds = [
        ElementKind::U8,
        ElementKind::I16,
        ElementKind::I32,
        ElementKind::F32,
        ElementKind::F64,
    ];
    for kind in kinds {
        let n = 2 * 3 * 4;
        let data = match kind {
            ElementKind::U8 => VolumeData::U8((0..n).map(|i| i as u8).collect()),
            ElementKind::I16 => VolumeData::I16((0..n).map(|i| i as i16 - 7).collect()),
            ElementKind::I32 => VolumeData::I32((0..n).map(|i| i as i32 * 3).collect()),
            ElementKind::F32 => VolumeData::F32((0..n).map(|i| i as f32 / 3.0).collect()),
            ElementKind::F64 => VolumeData::F64((0..n).map(|i| i as f64 / 7.0).collect()),
        };
        let v = Volume {
            shape: vec![2, 3, 4],
            data,
            spacing: [1.0; 3],
        };
        assert_eq!(
            parse_nifti(&nifti_bytes(&v).unwrap()).unwrap(),
            v,
            "round trip for {kind:?}"
        );
    }

    // Byte-swapped fixture parses identically (endianness equivalence).
    let v = Volume {
        shape: vec![3, 3, 3],
        data: VolumeData::I16((0..27).map(|i| i as i16 * 11 - 99).collect()),
        spacing: [1.0; 3],
    };
    let le = nifti_bytes(&v).unwrap();
    let mut be = le.clone();
    for (start, width, count) in [
        (0usize, 4usize, 1usize),
        (40, 2, 8),
        (70, 2, 1),
        (72, 2, 1),
        (76, 4, 8),
        (108, 4, 1),
        (112, 4, 1),
        (116, 4, 1),
    ] {
        for i in 0..count {
            be[start + i * width..start + (i + 1) * width].reverse();
        }
    }
    let mut off = 352;
    while off + 2 <= be.len() {
        be.swap(off, off + 1);
        off += 2;
    }
    assert_eq!(parse_nifti(&be).unwrap(), v, "byte-swapped parse");

    // 1000 random byte strings: enumerated errors or a volume, never a panic.
    let mut rng = Rng::new(2007);
    for case in 0..1000 {
        let len = rng.below(4096);
        let mut bytes: Vec<u8> = (0..len).map(|_| (rng.next_u64() & 0xff) as u8).collect();
        if case % 3 == 0 && bytes.len() >= 352 {
            bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
            bytes[40..42].copy_from_slice(&(1 + (case % 7) as i16).to_le_bytes());
            if case % 6 == 0 {
                bytes[344..348].copy_from_slice(b"n+1\0");
            }
        }
        let _ = parse_nifti(&bytes);
    }
    println!("[PASS] criterion 7: round trips, endianness equivalence, and 1000-case fuzz sweep");
}

#[test]
fn criterion_08_determinism_and_early_stopping() {
    // Two full cmd_train runs with identical seed/config.
    let bin = env!("CARGO_BIN_EXE_voxseg");
    let root = std::env::temp_dir().join("voxseg_accept_determinism");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let raw = root.join("raw");
    let data = root.join("data");
    let ok = |out: std::process::Output, what: &str| {
        assert!(
            out.status.success(),
            "{what}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    ok(
        Command::new(bin)
            .args([
                "synth-data", "--out", raw.to_str().unwrap(), "--subjects", "2", "--extent",
                "16", "--seed", "11", "--tumor-frac", "0.05", "--dev",
            ])
            .output()
            .unwrap(),
        "synth-data",
    );
    ok(
        Command::new(bin)
            .args([
                "preprocess", "--in", raw.to_str().unwrap(), "--out", data.to_str().unwrap(),
                "--crop", "16,16,16", "--dev",
            ])
            .output()
            .unwrap(),
        "preprocess",
    );
    let train_into = |dir: &PathBuf| {
        ok(
            Command::new(bin)
                .args([
                    "train", "--data", data.to_str().unwrap(), "--out", dir.to_str().unwrap(),
                    "--base-filters", "4", "--epochs", "3", "--val-fraction", "0.0", "--seed",
                    "123",
                ])
                .output()
                .unwrap(),
            "train",
        );
    };
    let run_a = root.join("a");
    let run_b = root.join("b");
    train_into(&run_a);
    train_into(&run_b);
    let csv_a = fs::read(run_a.join("runlog.csv")).unwrap();
    let csv_b = fs::read(run_b.join("runlog.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "run logs differ between identical runs");
    fs::remove_dir_all(&root).ok();

    // Early stopping on a scripted validation-loss plateau.
    let losses = [0.9, 0.7, 0.55, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
    let patience = 4;
    let mut stopper = EarlyStopper::new(patience);
    let mut stopped_at = None;
    for (i, &l) in losses.iter().enumerate() {
        if stopper.update(i + 1, l) {
            stopped_at = Some(i + 1);
            break;
        }
    }
    let argmin = 4; // scripted minimum
    assert_eq!(stopper.best_epoch, argmin, "best epoch must be the argmin");
    assert_eq!(
        stopped_at,
        Some(argmin + patience),
        "stop fires exactly patience epochs past the best"
    );
    println!("[PASS] criterion 8: byte-identical run logs and early stop at best_epoch + patience");
}

#[test]
fn criterion_09_attention_invariants() {
    let mut rng = Rng::new(2009);
    let d_model = 8;

    // Single key: weights are exactly 1.
    {
        let mut tape = Tape::new();
        let q = tape.leaf(rand_tensor(&mut rng, &[3, d_model], -1.0, 1.0), false);
        let kv = tape.leaf(rand_tensor(&mut rng, &[1, d_model], -1.0, 1.0), false);
        let w = AttentionWeights {
            w_q: tape.leaf(rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5), false),
            w_k: tape.leaf(rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5), false),
            w_v: tape.leaf(rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5), false),
            w_o: tape.leaf(rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5), false),
        };
        let out = multihead_attention_detailed(&mut tape, q, kv, 2, w).unwrap();
        for attn in &out.head_weights {
            for &v in tape.value(*attn).data() {
                assert_eq!(v, 1.0, "single-key attention weight must be exactly 1");
            }
        }
    }

    // Row-stochastic weights and kv-permutation invariance.
    let q_data = rand_tensor(&mut rng, &[3, d_model], -1.0, 1.0);
    let kv_data = rand_tensor(&mut rng, &[5, d_model], -1.0, 1.0);
    let mats: Vec<Tensor<f64>> = (0..4)
        .map(|_| rand_tensor(&mut rng, &[d_model, d_model], -0.5, 0.5))
        .collect();
    let run = |kv: Tensor<f64>| -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let q = tape.leaf(q_data.clone(), false);
        let kv = tape.leaf(kv, false);
        let w = AttentionWeights {
            w_q: tape.leaf(mats[0].clone(), false),
            w_k: tape.leaf(mats[1].clone(), false),
            w_v: tape.leaf(mats[2].clone(), false),
            w_o: tape.leaf(mats[3].clone(), false),
        };
        let out = multihead_attention_detailed(&mut tape, q, kv, 4, w).unwrap();
        let weights = out
            .head_weights
            .iter()
            .map(|id| tape.value(*id).data().to_vec())
            .collect();
        (tape.value(out.output).data().to_vec(), weights)
    };
    let (base, weights) = run(kv_data.clone());
    for head in &weights {
        for row in head.chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "attention row sums to {sum}");
        }
    }
    let mut permuted = Vec::new();
    for r in 0..5 {
        let src = (r + 3) % 5;
        permuted.extend_from_slice(&kv_data.data()[src * d_model..(src + 1) * d_model]);
    }
    let (rotated, _) = run(Tensor::from_vec(&[5, d_model], permuted));
    let mut worst = 0.0f64;
    for (a, b) in base.iter().zip(&rotated) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-6, "kv permutation changed outputs by {worst}");
    println!(
        "[PASS] criterion 9: single-key weight exact, rows stochastic, kv-permutation drift {worst:.1e}"
    );
}

#[test]
fn criterion_10_pipeline_consistency() {
    let bin = env!("CARGO_BIN_EXE_voxseg");
    let root = std::env::temp_dir().join("voxseg_accept_pipeline");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let ok = |out: std::process::Output, what: &str| {
        assert!(
            out.status.success(),
            "{what}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let raw = root.join("raw");
    let data = root.join("data");
    ok(
        Command::new(bin)
            .args([
                "synth-data", "--out", raw.to_str().unwrap(), "--subjects", "2", "--extent",
                "32", "--seed", "17", "--tumor-frac", "0.05", "--dev",
            ])
            .output()
            .unwrap(),
        "synth-data",
    );
    ok(
        Command::new(bin)
            .args([
                "preprocess", "--in", raw.to_str().unwrap(), "--out", data.to_str().unwrap(),
                "--crop", "32,32,32", "--dev",
            ])
            .output()
            .unwrap(),
        "preprocess",
    );
    let run_dir = root.join("run");
    ok(
        Command::new(bin)
            .args([
                "train", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
                "--base-filters", "4", "--epochs", "2", "--val-fraction", "0.0",
            ])
            .output()
            .unwrap(),
        "train",
    );
    let ckpt = run_dir.join("best.ckpt");

    // Single-subject dataset for the comparison.
    let single = root.join("single");
    fs::create_dir_all(&single).unwrap();
    fs::write(single.join("manifest.txt"), "synth_000\n").unwrap();
    fs_extra_copy(&data.join("synth_000"), &single.join("synth_000"));

    let pred_dir = root.join("pred");
    ok(
        Command::new(bin)
            .args([
                "predict", "--in", single.join("synth_000").to_str().unwrap(), "--ckpt",
                ckpt.to_str().unwrap(), "--out", pred_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap(),
        "predict",
    );
    let eval_dir = root.join("eval");
    ok(
        Command::new(bin)
            .args([
                "evaluate", "--data", single.to_str().unwrap(), "--ckpt",
                ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap(),
        "evaluate",
    );

    // In-memory dice of the saved prediction against the stored truth.
    let pred = load_label_grid(&pred_dir.join("pred.smp")).unwrap();
    let sample = load_sample(&single.join("synth_000"), "synth_000").unwrap();
    let report_csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    let mut worst = 0.0f64;
    for (slot, name) in ["dice_necrotic", "dice_edema", "dice_enhancing"]
        .iter()
        .enumerate()
    {
        let from_cmd = csv_column(&report_csv, name).expect("dice column");
        let in_memory =
            metrics::dice(&pred, &sample.mask, (slot + 1) as u8).unwrap();
        worst = worst.max((from_cmd - in_memory).abs());
    }
    assert!(
        worst < 1e-6,
        "cmd_evaluate and in-memory dice diverge by {worst}"
    );
    fs::remove_dir_all(&root).ok();
    println!("[PASS] criterion 10: predict -> evaluate reproduces in-memory dice within {worst:.1e}");
}

/// Minimal recursive copy (fixtures only).
fn fs_extra_copy(src: &PathBuf, dst: &PathBuf) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap().flatten() {
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            fs_extra_copy(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), &to).unwrap();
        }
    }
}
