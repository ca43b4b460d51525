//! Single training runs, evaluation and run records.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::reference;
use crate::instrument::{self, CaptureKind, CaptureWindows, IcsProxyRecord, Recorder, DEFAULT_WINDOW};
use crate::norm::Mode;
use crate::optim::{zero_grads, AdamParams, Optimizer};
use crate::resnet::{LayerPosition, Model, ModelConfig};
use crate::tape::Tape;

pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const INSTRUMENTATION_DIR: &str = "instrumentation";
pub const HISTOGRAM_FILE: &str = "histograms.csv";
pub const ICS_FILE: &str = "ics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Output file names, relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: Option<String>,
    pub instrumentation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub adam: AdamParams,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub final_validation_accuracy: f64,
    pub best_validation_accuracy: f64,
    pub best_epoch: usize,
    /// Full-scale accuracy reported for the same model, scheme and batch size.
    pub reference_accuracy: Option<f64>,
    pub off_grid: Vec<String>,
    pub ics: Vec<IcsProxyRecord>,
    pub artifacts: Artifacts,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        RunRecord { wall_time_secs: 0.0, ..self.clone() } == RunRecord { wall_time_secs: 0.0, ..other.clone() }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run records serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: Model,
    pub snapshots: Vec<instrument::HistogramSnapshot>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits for every example, in dataset order.
pub fn predict(model: &mut Model, dataset: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    model.set_mode(Mode::Eval);
    let mut out = Vec::with_capacity(dataset.len());
    for batch in BatchIterator::sequential(dataset, batch_size.min(dataset.len()), false)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let logits = model.forward(&mut tape, x)?;
        let k = tape.shape(logits)[1];
        out.extend(tape.value(logits).chunks_exact(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Eval-mode accuracy `correct / total`.
pub fn accuracy(model: &mut Model, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.num_classes() != model.config().num_classes {
        return Err(Error::Format(format!(
            "model predicts {} classes, dataset has {}",
            model.config().num_classes,
            dataset.num_classes()
        )));
    }
    let logits = predict(model, dataset, batch_size)?;
    let correct = logits.iter().zip(dataset.labels()).filter(|(row, &l)| argmax(row) == l as usize).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Loads a checkpoint and scores it on `dataset`.
pub fn evaluate(checkpoint_path: &Path, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let mut model = checkpoint::load(checkpoint_path)?;
    accuracy(&mut model, dataset, batch_size)
}

/// Gradient of the classifier weight on `batch` after every other trainable
/// parameter has taken the optimizer step, computed on throwaway copies.
fn ics_after_update(
    model: &Model,
    optimizer: &Optimizer,
    images: &crate::tensor::Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut shadow = model.clone();
    let mut opt = optimizer.clone();
    let target = shadow.layer_weight(LayerPosition::Final);
    let others: Vec<_> = shadow.params().trainable().into_iter().filter(|&id| id != target).collect();
    opt.step_params(shadow.params_mut(), &others)?;
    zero_grads(shadow.params_mut());
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let logits = shadow.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss, shadow.params_mut())?;
    instrument::read_layer(&shadow, LayerPosition::Final, CaptureKind::Gradients)
}

/// Trains one configuration on the given splits.
pub fn train(config: &TrainConfig, train: &Dataset, validation: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let model_config = config.model_config()?;
    let mut model = Model::build(&model_config, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr)?;
    if config.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training examples",
            config.batch_size,
            train.len()
        )));
    }
    let steps_per_epoch = train.len() / config.batch_size;
    let mut recorder = (config.instrument || config.ics)
        .then(|| CaptureWindows::first_epoch(steps_per_epoch, DEFAULT_WINDOW).map(|w| Recorder::new(config.run_id(), w)))
        .transpose()?;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut ics = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        model.set_mode(Mode::Train);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        for batch in BatchIterator::shuffled(train, config.batch_size, config.seed + epoch as u64, true)? {
            step += 1;
            zero_grads(model.params_mut());
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let logits = model.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            tape.backward(loss, model.params_mut())?;

            loss_sum += tape.value(loss)[0];
            batches += 1;
            let k = tape.shape(logits)[1];
            correct += tape
                .value(logits)
                .chunks_exact(k)
                .zip(&batch.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            seen += batch.labels.len();

            if let Some(rec) = recorder.as_mut().filter(|r| epoch == 0 && r.wants(step)) {
                if config.instrument {
                    for position in [LayerPosition::Input, LayerPosition::Final] {
                        for kind in [CaptureKind::Weights, CaptureKind::Gradients] {
                            rec.capture(&model, position, kind, step)?;
                        }
                    }
                }
                if config.ics {
                    let before = instrument::read_layer(&model, LayerPosition::Final, CaptureKind::Gradients)?;
                    let after = ics_after_update(&model, &optimizer, &batch.images, &batch.labels)?;
                    ics.push(instrument::ics_proxy(step, &before, &after)?);
                }
            }
            optimizer.step(model.params_mut())?;
        }
        let validation_accuracy = accuracy(&mut model, validation, config.eval_batch_size)?;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / seen as f64,
            validation_accuracy,
        });
    }

    let snapshots = match &recorder {
        Some(rec) if config.instrument => rec.snapshots(config.bins)?,
        _ => Vec::new(),
    };
    let last = epochs.last().expect("at least one epoch");
    let (best_epoch, best) = epochs
        .iter()
        .map(|e| (e.epoch, e.validation_accuracy))
        .fold((0, f64::NEG_INFINITY), |acc, (e, a)| if a > acc.1 { (e, a) } else { acc });
    let record = RunRecord {
        run_id: config.run_id(),
        config: config.clone(),
        model: model_config,
        adam: optimizer.adam_params(),
        train_examples: train.len(),
        validation_examples: validation.len(),
        steps: step,
        final_validation_accuracy: last.validation_accuracy,
        best_validation_accuracy: best,
        best_epoch,
        reference_accuracy: reference::lookup(&config.model, config.norm, config.batch_size)
            .map(|r| r.validation_accuracy),
        off_grid: config.off_grid(),
        epochs,
        ics,
        artifacts: Artifacts::default(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { record, model, snapshots })
}

/// Writes `<dir>/record.json`, `<dir>/model.ckpt` and, when present,
/// `<dir>/instrumentation/*.csv`, filling in the record's artifact paths.
pub fn persist(output: &mut RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&output.model, &dir.join(CHECKPOINT_FILE))?;
    output.record.artifacts.checkpoint = Some(CHECKPOINT_FILE.into());
    if output.record.config.instrument || output.record.config.ics {
        let inst = dir.join(INSTRUMENTATION_DIR);
        fs::create_dir_all(&inst).map_err(|e| Error::io(&inst, e))?;
        if output.record.config.instrument {
            instrument::export_csv(&output.snapshots, &inst.join(HISTOGRAM_FILE))?;
            output.record.artifacts.instrumentation.push(format!("{INSTRUMENTATION_DIR}/{HISTOGRAM_FILE}"));
        }
        if output.record.config.ics {
            write_ics_csv(&output.record.ics, &inst.join(ICS_FILE))?;
            output.record.artifacts.instrumentation.push(format!("{INSTRUMENTATION_DIR}/{ICS_FILE}"));
        }
    }
    output.record.write(&dir.join(RECORD_FILE))
}

fn write_ics_csv(rows: &[IcsProxyRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if rows.is_empty() {
        w.write_record(["step", "l2_delta", "cosine_similarity"]).map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the configured data, trains, and optionally persists under
/// `<out>/<run_id>/`.
pub fn train_run(config: &TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let (train_set, validation) = config.data.load()?;
    let mut output = train(config, &train_set, &validation)
        .map_err(|e| annotate(e, config))?;
    if let Some(out) = out {
        persist(&mut output, &out.join(config.run_id()))?;
    }
    Ok(output.record)
}

/// Prefixes degenerate-batch failures with the offending config.
pub(crate) fn annotate(e: Error, config: &TrainConfig) -> Error {
    match e {
        Error::DegenerateBatch(msg) => Error::DegenerateBatch(format!(
            "{msg} (config: {})",
            serde_json::to_string(config).unwrap_or_else(|_| config.run_id())
        )),
        other => other,
    }
}
