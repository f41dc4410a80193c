//! Manual timing probe (run with --ignored --nocapture).

use std::time::Instant;

use voxseg::synth::{synth_subject, SynthConfig};
use voxseg::trainer::{train, Clock, TrainConfig};
use voxseg_core::model::{ModelConfig, UNet3DMHA};
use voxseg_core::preprocess::{
    center_crop, minmax_normalize, nonzero_label_ratio, remap_labels, stack_modalities,
    Sample,
};
use voxseg_core::rng::Rng;
use voxseg_core::tensor::Tensor;

fn synth_sample(seed: u64, extent: usize) -> Sample {
    let mut rng = Rng::new(seed);
    let s = synth_subject(&mut rng, extent, 0.04);
    let shape = [extent, extent, extent];
    let vols: Vec<Tensor<f32>> = [&s.t2, &s.t1ce, &s.flair]
        .iter()
        .map(|d| minmax_normalize(&Tensor::from_vec(&shape, (*d).clone())).unwrap())
        .collect();
    let mask = remap_labels(shape, &s.mask).unwrap();
    let image = stack_modalities(&vols).unwrap();
    let (image, mask) = center_crop(&image, &mask, shape).unwrap();
    let _ = nonzero_label_ratio(&mask);
    Sample {
        image,
        mask,
        subject_id: format!("probe{seed}"),
    }
}

#[test]
#[ignore]
fn step_timing_probe() {
    let _ = SynthConfig::default();
    let samples = vec![synth_sample(1, 32), synth_sample(2, 32)];
    let config = ModelConfig {
        input_extent: [32, 32, 32],
        ..ModelConfig::default()
    };
    let mut model: UNet3DMHA<f32> = UNet3DMHA::build(config, 7).unwrap();
    println!("params: {}", model.param_count());

    let t0 = Instant::now();
    let tc = TrainConfig {
        epochs: 5,
        val_fraction: 0.0,
        patience: 100,
        dice_stop: None,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &samples, &tc, Clock::Wall).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("5 epochs (1 step each) in {dt:.2}s => {:.2}s/step", dt / 5.0);
    for e in &outcome.run_log.epochs {
        println!(
            "epoch {}: loss {:.4} acc {:.4} dice {:?}",
            e.epoch, e.train_loss, e.train_acc, e.train_dice
        );
    }
}

#[test]
#[ignore]
fn overfit_trajectory() {
    let samples = vec![synth_sample(1, 32), synth_sample(2, 32)];
    let config = ModelConfig {
        input_extent: [32, 32, 32],
        ..ModelConfig::default()
    };
    let mut model: UNet3DMHA<f32> = UNet3DMHA::build(config, 7).unwrap();
    let t0 = Instant::now();
    let tc = TrainConfig {
        epochs: 300,
        val_fraction: 0.0,
        patience: 10_000,
        dice_stop: Some(0.95),
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &samples, &tc, Clock::Wall).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for e in &outcome.run_log.epochs {
        if e.epoch % 5 == 0 || e.epoch < 12 || e.train_macro_dice() > 0.9 {
            println!(
                "epoch {:3}: loss {:.4} acc {:.4} macro_dice {:.4} [{:.3} {:.3} {:.3}]",
                e.epoch,
                e.train_loss,
                e.train_acc,
                e.train_macro_dice(),
                e.train_dice[0],
                e.train_dice[1],
                e.train_dice[2]
            );
        }
    }
    println!(
        "total {:.1}s for {} epochs; reached_dice_target={}",
        dt,
        outcome.run_log.epochs.len(),
        outcome.run_log.reached_dice_target
    );
}
