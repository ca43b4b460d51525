//! Weight and gradient snapshots of the input (stem) and final (classifier)
//! layers over the first and last updates of the first epoch, plus the
//! gradient-change proxy for internal covariate shift.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resnet::{LayerPosition, Model};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Late,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureKind {
    Weights,
    Gradients,
}

impl CaptureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CaptureKind::Weights => "weights",
            CaptureKind::Gradients => "gradients",
        }
    }
}

/// Copies the current weights or gradients of one layer.
pub fn read_layer(model: &Model, position: LayerPosition, kind: CaptureKind) -> Result<Vec<f64>> {
    let tensor = model.params().get(model.layer_weight(position));
    match kind {
        CaptureKind::Weights => Ok(tensor.data().to_vec()),
        CaptureKind::Gradients => tensor
            .grad()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Usage(format!("{} layer has no gradient to capture", position.as_str()))),
    }
}

/// Step windows (1-based, inclusive) during which captures are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureWindows {
    pub early: (usize, usize),
    pub late: (usize, usize),
}

impl CaptureWindows {
    /// The first and last `window` updates of an epoch of `steps_per_epoch`
    /// updates.
    pub fn first_epoch(steps_per_epoch: usize, window: usize) -> Result<Self> {
        if steps_per_epoch == 0 || window == 0 {
            return Err(Error::Config("capture windows need positive step counts".into()));
        }
        let w = window.min(steps_per_epoch);
        Ok(CaptureWindows { early: (1, w), late: (steps_per_epoch - w + 1, steps_per_epoch) })
    }

    /// Phases containing `step`; short epochs can put a step in both.
    pub fn phases(&self, step: usize) -> Vec<Phase> {
        let mut out = Vec::new();
        if (self.early.0..=self.early.1).contains(&step) {
            out.push(Phase::Early);
        }
        if (self.late.0..=self.late.1).contains(&step) {
            out.push(Phase::Late);
        }
        out
    }

    pub fn last_step(&self) -> usize {
        self.late.1
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Accumulated {
    values: Vec<f64>,
    first_step: usize,
    last_step: usize,
}

/// Accumulates captures per (layer, phase, kind) across the windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Recorder {
    run_id: String,
    windows: CaptureWindows,
    buffers: BTreeMap<(LayerPosition, Phase, CaptureKind), Accumulated>,
}

impl Recorder {
    pub fn new(run_id: impl Into<String>, windows: CaptureWindows) -> Self {
        Recorder { run_id: run_id.into(), windows, buffers: BTreeMap::new() }
    }

    pub fn windows(&self) -> &CaptureWindows {
        &self.windows
    }

    pub fn wants(&self, step: usize) -> bool {
        !self.windows.phases(step).is_empty()
    }

    /// Copies one layer's weights or gradients at `step` and appends them to
    /// every window containing the step. Returns the copied buffer.
    pub fn capture(&mut self, model: &Model, position: LayerPosition, kind: CaptureKind, step: usize) -> Result<Vec<f64>> {
        let phases = self.windows.phases(step);
        if phases.is_empty() {
            return Err(Error::Usage(format!("step {step} is outside the capture windows {:?}", self.windows)));
        }
        let values = read_layer(model, position, kind)?;
        for phase in phases {
            let acc = self.buffers.entry((position, phase, kind)).or_default();
            if acc.values.is_empty() {
                acc.first_step = step;
            }
            acc.last_step = step;
            acc.values.extend_from_slice(&values);
        }
        Ok(values)
    }

    /// Histograms of every non-empty buffer, in (layer, phase, kind) order.
    pub fn snapshots(&self, num_bins: usize) -> Result<Vec<HistogramSnapshot>> {
        self.buffers
            .iter()
            .filter(|(_, acc)| !acc.values.is_empty())
            .map(|(&(layer_position, phase, kind), acc)| {
                Ok(HistogramSnapshot {
                    run_id: self.run_id.clone(),
                    layer_position,
                    phase,
                    kind,
                    histogram: histogram(&acc.values, num_bins)?,
                    step_range: (acc.first_step, acc.last_step),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Uniform bins over `[min, max]`, half-open except the last which is
/// closed. A constant buffer yields one bin `[v − 0.5, v + 0.5]`.
pub fn histogram(values: &[f64], num_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Input("cannot histogram an empty buffer".into()));
    }
    if num_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("histogram buffer holds non-finite values".into()));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if min == max {
        return Ok(Histogram {
            edges: vec![min - 0.5, min + 0.5],
            counts: vec![values.len() as u64],
            mean,
            std,
            min,
            max,
        });
    }
    let width = (max - min) / num_bins as f64;
    let mut edges: Vec<f64> = (0..=num_bins).map(|i| min + width * i as f64).collect();
    edges[num_bins] = max;
    let mut counts = vec![0u64; num_bins];
    for &v in values {
        let mut bin = (((v - min) / width).floor() as usize).min(num_bins - 1);
        // Keep the bin consistent with the stored edges under rounding.
        while bin > 0 && v < edges[bin] {
            bin -= 1;
        }
        while bin + 1 < num_bins && v >= edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts, mean, std, min, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub run_id: String,
    pub layer_position: LayerPosition,
    pub phase: Phase,
    pub kind: CaptureKind,
    pub histogram: Histogram,
    pub step_range: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcsProxyRecord {
    pub step: usize,
    pub l2_delta: f64,
    /// Absent when either gradient is the zero vector.
    pub cosine_similarity: Option<f64>,
}

/// Distance and cosine similarity between a layer's gradient before and
/// after the preceding layers are updated.
pub fn ics_proxy(step: usize, before: &[f64], after: &[f64]) -> Result<IcsProxyRecord> {
    if before.len() != after.len() {
        return Err(Error::Input(format!("gradient lengths differ: {} vs {}", before.len(), after.len())));
    }
    let l2_delta = before.iter().zip(after).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let dot: f64 = before.iter().zip(after).map(|(a, b)| a * b).sum();
    let na: f64 = before.iter().map(|a| a * a).sum();
    let nb: f64 = after.iter().map(|b| b * b).sum();
    let cosine_similarity = (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb).sqrt()).clamp(-1.0, 1.0));
    Ok(IcsProxyRecord { step, l2_delta, cosine_similarity })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    run_id: String,
    layer_position: String,
    phase: String,
    kind: String,
    row_type: String,
    bin_lo: Option<f64>,
    bin_hi: Option<f64>,
    count: Option<u64>,
    mean: Option<f64>,
    std: Option<f64>,
    min: Option<f64>,
    max: Option<f64>,
    first_step: usize,
    last_step: usize,
}

pub const CSV_HEADER: [&str; 14] = [
    "run_id",
    "layer_position",
    "phase",
    "kind",
    "row_type",
    "bin_lo",
    "bin_hi",
    "count",
    "mean",
    "std",
    "min",
    "max",
    "first_step",
    "last_step",
];

/// Writes one `bin` row per histogram bin followed by one `summary` row per
/// snapshot, snapshots in the given order.
pub fn export_csv(snapshots: &[HistogramSnapshot], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for s in snapshots {
        let base = CsvRow {
            run_id: s.run_id.clone(),
            layer_position: s.layer_position.as_str().into(),
            phase: s.phase.as_str().into(),
            kind: s.kind.as_str().into(),
            row_type: "bin".into(),
            bin_lo: None,
            bin_hi: None,
            count: None,
            mean: None,
            std: None,
            min: None,
            max: None,
            first_step: s.step_range.0,
            last_step: s.step_range.1,
        };
        let h = &s.histogram;
        for (i, &count) in h.counts.iter().enumerate() {
            w.serialize(CsvRow { bin_lo: Some(h.edges[i]), bin_hi: Some(h.edges[i + 1]), count: Some(count), ..base.clone() })
                .map_err(csv_err)?;
        }
        w.serialize(CsvRow {
            row_type: "summary".into(),
            count: Some(h.total()),
            mean: Some(h.mean),
            std: Some(h.std),
            min: Some(h.min),
            max: Some(h.max),
            ..base
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Format(format!("unexpected value '{s}' in histogram CSV")))
}

/// Parses a file written by [`export_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<HistogramSnapshot>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    let mut pending: Option<(Vec<f64>, Vec<u64>)> = None;
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let missing = || Error::Format(format!("{}: incomplete {} row", path.display(), row.row_type));
        match row.row_type.as_str() {
            "bin" => {
                let (edges, counts) = pending.get_or_insert_with(Default::default);
                let lo = row.bin_lo.ok_or_else(missing)?;
                if edges.is_empty() {
                    edges.push(lo);
                }
                edges.push(row.bin_hi.ok_or_else(missing)?);
                counts.push(row.count.ok_or_else(missing)?);
            }
            "summary" => {
                let (edges, counts) = pending.take().ok_or_else(missing)?;
                out.push(HistogramSnapshot {
                    run_id: row.run_id.clone(),
                    layer_position: parse_enum(&row.layer_position)?,
                    phase: parse_enum(&row.phase)?,
                    kind: parse_enum(&row.kind)?,
                    histogram: Histogram {
                        edges,
                        counts,
                        mean: row.mean.ok_or_else(missing)?,
                        std: row.std.ok_or_else(missing)?,
                        min: row.min.ok_or_else(missing)?,
                        max: row.max.ok_or_else(missing)?,
                    },
                    step_range: (row.first_step, row.last_step),
                });
            }
            other => return Err(Error::Format(format!("{}: unknown row type '{other}'", path.display()))),
        }
    }
    if pending.is_some() {
        return Err(Error::Format(format!("{}: bins without a summary row", path.display())));
    }
    Ok(out)
}
