//! Training driver: seeded dataset splits, the mini-batch Adam loop with a
//! combined cross-entropy + soft-Dice objective, per-epoch train/validation
//! logging, early stopping on validation loss, and best-checkpoint
//! retention. A learning-rate x batch-size grid runner trains one fresh
//! model per cell.

use std::fmt;
use std::time::Instant;

use voxseg_core::adam::{AdamError, AdamState};
use voxseg_core::metrics::{MetricsError, MetricsReport, ReportAccumulator, TUMOR_CLASSES};
use voxseg_core::model::{predict_labels, ModelError, UNet3DMHA};
use voxseg_core::preprocess::Sample;
use voxseg_core::rng::Rng;
use voxseg_core::tape::{Tape, TapeError};
use voxseg_core::tensor::{LabelGrid, Tensor};

#[derive(Debug)]
pub enum TrainError {
    TooFewSamples(usize),
    ShapeMismatch(String),
    NonFiniteLoss { epoch: usize, step: usize },
    Model(ModelError),
    Tape(TapeError),
    Adam(AdamError),
    Metrics(MetricsError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::TooFewSamples(n) => write!(f, "need at least 2 samples, got {n}"),
            TrainError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            TrainError::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tape(e) => write!(f, "{e}"),
            TrainError::Adam(e) => write!(f, "{e}"),
            TrainError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}
impl From<AdamError> for TrainError {
    fn from(e: AdamError) -> Self {
        TrainError::Adam(e)
    }
}
impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}

/// Training hyperparameters. `val_fraction` 0.0 validates on the training
/// set itself (overfit fixtures) by reusing the training-pass metrics as
/// the validation columns; `loss_mix` is the dice weight in
/// `loss = CE + loss_mix * dice`; `dice_stop` ends the run once the
/// training macro soft-Dice exceeds the target.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub loss_mix: f64,
    pub dice_stop: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 30,
            patience: 5,
            val_fraction: 0.2,
            seed: 42,
            loss_mix: 1.0,
            dice_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.patience == 0 || self.epochs == 0 {
            return Err(TrainError::ShapeMismatch(
                "batch_size, patience, and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::ShapeMismatch(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Wall timing source. The virtual clock reports 0.0 so that run logs are
/// byte-identical across reruns; opt into real timing with `Clock::Wall`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clock {
    Virtual,
    Wall,
}

impl Clock {
    fn start(self) -> Option<Instant> {
        match self {
            Clock::Virtual => None,
            Clock::Wall => Some(Instant::now()),
        }
    }

    fn elapsed(self, start: &Option<Instant>) -> f64 {
        match start {
            None => 0.0,
            Some(t) => t.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Soft Dice per tumor class (necrotic, edema, enhancing) on the
    /// training pass.
    pub train_dice: [f64; 3],
    pub val_dice: [f64; 3],
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn train_macro_dice(&self) -> f64 {
        self.train_dice.iter().sum::<f64>() / 3.0
    }
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the minimum validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when `dice_stop` ended the run before the epoch budget.
    pub reached_dice_target: bool,
}

impl RunLog {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn last(&self) -> &EpochLog {
        self.epochs.last().expect("run log has at least one epoch")
    }
}

pub struct TrainOutcome {
    pub run_log: RunLog,
    /// Parameter snapshot at the best epoch, in registry order.
    pub best_params: Vec<(String, Tensor<f32>)>,
}

/// Validation-loss early stopping: stop after `patience` epochs without a
/// strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns true when training should
    /// stop (the current epoch is exactly `patience` past the best one).
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }
}

/// Deterministic shuffled split; `val_fraction` 0.0 means the validation
/// list aliases the training list.
pub fn split_dataset(
    samples: &[Sample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::TooFewSamples(samples.len()));
    }
    let n = samples.len();
    if val_fraction == 0.0 {
        let all: Vec<usize> = (0..n).collect();
        return Ok((all.clone(), all));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed).fork(0x511);
    rng.shuffle(&mut order);
    let mut val_count = (n as f64 * val_fraction).round() as usize;
    val_count = val_count.clamp(1, n - 1);
    let val = order[..val_count].to_vec();
    let train = order[val_count..].to_vec();
    Ok((train, val))
}

/// One-hot encoding of a label grid as a `[4, D, H, W]` f32 tensor.
pub fn one_hot_target(mask: &LabelGrid) -> Tensor<f32> {
    let s = mask.shape();
    let voxels = mask.len();
    let mut data = vec![0.0f32; 4 * voxels];
    for (i, &label) in mask.data().iter().enumerate() {
        data[label as usize * voxels + i] = 1.0;
    }
    Tensor::from_vec(&[4, s[0], s[1], s[2]], data)
}

/// Loss, voxel accuracy, and per-class soft-Dice sums for one forward pass.
struct SampleEval {
    loss: f64,
    correct: u64,
    voxels: u64,
    // (intersection, pred sum, truth sum) per tumor class.
    soft: [[f64; 3]; 3],
}

fn eval_from_probs(probs: &Tensor<f32>, mask: &LabelGrid, loss: f64) -> SampleEval {
    let voxels = mask.len();
    let pred = predict_labels(probs);
    let correct = pred
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(a, b)| a == b)
        .count() as u64;

    let mut soft = [[0.0f64; 3]; 3];
    for (slot, &class_id) in TUMOR_CLASSES.iter().enumerate() {
        let channel = &probs.data()[class_id as usize * voxels..(class_id as usize + 1) * voxels];
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut t_sum = 0.0;
        for (&p, &t) in channel.iter().zip(mask.data()) {
            let p = p as f64;
            p_sum += p;
            if t == class_id {
                inter += p;
                t_sum += 1.0;
            }
        }
        soft[slot] = [inter, p_sum, t_sum];
    }
    SampleEval {
        loss,
        correct,
        voxels: voxels as u64,
        soft,
    }
}

/// Aggregates per-sample evaluations into epoch-level metrics.
#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    samples: usize,
    correct: u64,
    voxels: u64,
    soft: [[f64; 3]; 3],
}

impl EpochStats {
    fn add(&mut self, e: &SampleEval) {
        self.loss_sum += e.loss;
        self.samples += 1;
        self.correct += e.correct;
        self.voxels += e.voxels;
        for k in 0..3 {
            for j in 0..3 {
                self.soft[k][j] += e.soft[k][j];
            }
        }
    }

    fn loss(&self) -> f64 {
        self.loss_sum / self.samples.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.voxels.max(1) as f64
    }

    fn dice(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let [inter, p_sum, t_sum] = self.soft[k];
            out[k] = (2.0 * inter + 1e-6) / (p_sum + t_sum + 1e-6);
        }
        out
    }
}

fn check_sample_shapes(model: &UNet3DMHA<f32>, samples: &[Sample]) -> Result<(), TrainError> {
    let cfg = model.config();
    let expect = [
        cfg.in_channels,
        cfg.input_extent[0],
        cfg.input_extent[1],
        cfg.input_extent[2],
    ];
    for s in samples {
        if s.image.shape() != expect {
            return Err(TrainError::ShapeMismatch(format!(
                "sample {} has shape {:?}, model expects {:?}",
                s.subject_id,
                s.image.shape(),
                expect
            )));
        }
    }
    Ok(())
}

/// Forward + losses for one sample. Returns the evaluation and, when
/// `grads` is set, runs backward and accumulates parameter gradients.
fn run_sample(
    model: &UNet3DMHA<f32>,
    sample: &Sample,
    loss_mix: f64,
    grads: Option<&mut [Vec<f32>]>,
) -> Result<SampleEval, TrainError> {
    let trainable = grads.is_some();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let x = tape.leaf(sample.image.clone(), false);
    let pass = model.forward_full(&mut tape, &bound, x)?;
    let probs = pass.probs;
    let target = one_hot_target(&sample.mask);

    // Cross-entropy is fused with the softmax so its gradient survives
    // saturated probabilities; its value equals the probs-space form.
    let ce = tape.cross_entropy_logits(pass.logits, target.clone())?;
    let root = if loss_mix != 0.0 {
        let dl = tape.dice_loss(probs, target)?;
        let scaled = tape.scale(dl, loss_mix as f32);
        tape.add(ce, scaled)?
    } else {
        ce
    };
    let loss = tape.value(root).data()[0] as f64;
    let eval = eval_from_probs(tape.value(probs), &sample.mask, loss);

    if let Some(acc) = grads {
        tape.backward(root)?;
        for (slot, &id) in bound.ids().iter().enumerate() {
            if let Some(g) = tape.grad(id) {
                for (a, &v) in acc[slot].iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
    Ok(eval)
}

/// Forward-only pass over a sample list; returns (loss, accuracy, dice).
pub fn validation_pass(
    model: &UNet3DMHA<f32>,
    samples: &[Sample],
    loss_mix: f64,
) -> Result<(f64, f64, [f64; 3]), TrainError> {
    let mut stats = EpochStats::default();
    for sample in samples {
        stats.add(&run_sample(model, sample, loss_mix, None)?);
    }
    Ok((stats.loss(), stats.accuracy(), stats.dice()))
}

/// Trains in place. The model ends at its final-epoch parameters; the best
/// validation-loss snapshot is returned alongside the run log.
pub fn train(
    model: &mut UNet3DMHA<f32>,
    samples: &[Sample],
    config: &TrainConfig,
    clock: Clock,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_sample_shapes(model, samples)?;
    let (train_idx, val_idx) = split_dataset(samples, config.val_fraction, config.seed)?;

    let param_lens: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
    let mut adam = AdamState::new(config.learning_rate as f32, &param_lens);
    let mut shuffle_rng = Rng::new(config.seed).fork(0xba7c4);
    let mut stopper = EarlyStopper::new(config.patience);

    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut best_params: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut stopped_early = false;
    let mut reached_dice_target = false;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let t0 = clock.start();
        let mut order = train_idx.clone();
        shuffle_rng.shuffle(&mut order);

        // Per-sample losses keyed by dataset index so the epoch mean is
        // independent of the shuffle order.
        let mut train_stats = EpochStats::default();
        let mut evals: Vec<(usize, SampleEval)> = Vec::with_capacity(order.len());

        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut grad_acc: Vec<Vec<f32>> =
                param_lens.iter().map(|&n| vec![0.0f32; n]).collect();
            for &idx in batch {
                let eval = run_sample(
                    model,
                    &samples[idx],
                    config.loss_mix,
                    Some(&mut grad_acc),
                )?;
                if !eval.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step });
                }
                evals.push((idx, eval));
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grad_acc {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            let mut tensors: Vec<Tensor<f32>> = model
                .params()
                .iter()
                .map(|p| p.tensor.clone())
                .collect();
            let grad_refs: Vec<&[f32]> = grad_acc.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut tensors, &grad_refs)?;
            for (param, tensor) in model.params_mut().iter_mut().zip(tensors) {
                param.tensor = tensor;
            }
        }

        evals.sort_by_key(|(idx, _)| *idx);
        for (_, eval) in &evals {
            train_stats.add(eval);
        }

        // With val_fraction == 0 the validation set aliases the training
        // set; reuse the training-pass aggregates instead of re-running
        // every forward pass.
        let (val_loss, val_acc, val_dice) = if config.val_fraction == 0.0 {
            (train_stats.loss(), train_stats.accuracy(), train_stats.dice())
        } else {
            let val_samples: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
            let mut stats = EpochStats::default();
            for s in &val_samples {
                stats.add(&run_sample(model, s, config.loss_mix, None)?);
            }
            (stats.loss(), stats.accuracy(), stats.dice())
        };
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, step });
        }

        let log = EpochLog {
            epoch,
            train_loss: train_stats.loss(),
            val_loss,
            train_acc: train_stats.accuracy(),
            val_acc,
            train_dice: train_stats.dice(),
            val_dice,
            wall_seconds: clock.elapsed(&t0),
        };
        let train_macro = log.train_macro_dice();
        epochs.push(log);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect();
        }
        if stopper.update(epoch, val_loss) {
            stopped_early = true;
            break;
        }
        if let Some(target) = config.dice_stop {
            if train_macro > target {
                reached_dice_target = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        run_log: RunLog {
            config: config.clone(),
            epochs,
            best_epoch,
            stopped_early,
            reached_dice_target,
        },
        best_params,
    })
}

/// Aggregated evaluation over samples: all confusion counts and soft sums
/// are summed before any ratio is taken.
pub fn evaluate(model: &UNet3DMHA<f32>, samples: &[Sample]) -> Result<MetricsReport, TrainError> {
    check_sample_shapes(model, samples)?;
    let mut acc = ReportAccumulator::new();
    for sample in samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.leaf(sample.image.clone(), false);
        let probs = model.forward(&mut tape, &bound, x)?;
        let pred = predict_labels(tape.value(probs));
        acc.add_sample(&pred, &sample.mask, tape.value(probs))?;
    }
    Ok(acc.finish()?)
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub run_log: RunLog,
}

/// Trains one fresh model per (learning rate, batch size) cell. Cells are
/// fully independent: each gets its own seeded build and its own run.
pub fn run_grid(
    build: impl Fn(u64) -> Result<UNet3DMHA<f32>, ModelError>,
    samples: &[Sample],
    learning_rates: &[f64],
    batch_sizes: &[usize],
    base: &TrainConfig,
    clock: Clock,
) -> Result<Vec<GridCell>, TrainError> {
    let mut cells = Vec::new();
    for &lr in learning_rates {
        for &batch in batch_sizes {
            let mut model = build(base.seed)?;
            let config = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                ..base.clone()
            };
            let outcome = train(&mut model, samples, &config, clock)?;
            cells.push(GridCell {
                learning_rate: lr,
                batch_size: batch,
                run_log: outcome.run_log,
            });
        }
    }
    Ok(cells)
}

/// Final-epoch summary table, one row per grid cell.
pub fn grid_summary(cells: &[GridCell]) -> String {
    let mut out = String::from("lr\tbatch\ttrain_acc\tval_acc\ttrain_loss\tval_loss\n");
    for cell in cells {
        let last = cell.run_log.last();
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            cell.learning_rate,
            cell.batch_size,
            last.train_acc,
            last.val_acc,
            last.train_loss,
            last.val_loss
        ));
    }
    out
}

pub const RUNLOG_HEADER: &str =
    "epoch,train_loss,train_acc,val_loss,val_acc,dice_necrotic,dice_edema,dice_enhancing,wall_seconds";

/// Serializes epoch logs in the documented CSV column order. Dice columns
/// are the training-pass soft-Dice values.
pub fn runlog_to_csv(log: &RunLog) -> String {
    let mut out = String::from(RUNLOG_HEADER);
    out.push('\n');
    for e in &log.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            e.epoch,
            e.train_loss,
            e.train_acc,
            e.val_loss,
            e.val_acc,
            e.train_dice[0],
            e.train_dice[1],
            e.train_dice[2],
            e.wall_seconds
        ));
    }
    out
}

/// Parses a run-log CSV (used by the plot command).
pub fn parse_runlog_csv(text: &str) -> Result<Vec<EpochLog>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty CSV")?;
    if header.trim() != RUNLOG_HEADER {
        return Err(format!("unexpected header: {header}"));
    }
    let mut epochs = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(format!("line {}: {} fields", lineno + 2, fields.len()));
        }
        let parse = |s: &str| -> Result<f64, String> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: {e}", lineno + 2))
        };
        epochs.push(EpochLog {
            epoch: parse(fields[0])? as usize,
            train_loss: parse(fields[1])?,
            train_acc: parse(fields[2])?,
            val_loss: parse(fields[3])?,
            val_acc: parse(fields[4])?,
            train_dice: [parse(fields[5])?, parse(fields[6])?, parse(fields[7])?],
            val_dice: [0.0; 3],
            wall_seconds: parse(fields[8])?,
        });
    }
    if epochs.is_empty() {
        return Err("CSV has no epoch rows".into());
    }
    Ok(epochs)
}
