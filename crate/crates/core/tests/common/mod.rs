//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use normlab::data::{BatchIterator, Dataset};
use normlab::optim::{zero_grads, Optimizer};
use normlab::resnet::Model;
use normlab::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Denominators below this are clamped so that near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[gap, gap + 1)` and random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = gap + rng.gen_range(0.0..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `Σ_i Σ r_i ⊙ out_i` on `tape` with fixed random weights `r`.
fn weighted_loss(tape: &mut Tape, outs: &[Var], weights: &[Tensor]) -> Var {
    let mut total: Option<Var> = None;
    for (out, w) in outs.iter().zip(weights) {
        let w = tape.constant(w.clone());
        let prod = tape.mul(*out, w).unwrap();
        let s = tape.sum(prod).unwrap();
        total = Some(match total {
            Some(t) => tape.add(t, s).unwrap(),
            None => s,
        });
    }
    total.unwrap()
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport { max_rel_err: self.max_rel_err.max(other.max_rel_err), checked: self.checked + other.checked }
    }
}

/// Compares reverse-mode gradients of `Σ r ⊙ op(inputs)` against central
/// differences for every element of every input (and every trainable
/// parameter in `store`, when one is given).
pub fn fd_check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], store: Option<&ParamStore>, op: F) -> FdReport
where
    F: Fn(&mut Tape, &[Var], &ParamStore) -> Vec<Var>,
{
    let empty = ParamStore::new();
    let base_store = store.cloned().unwrap_or(empty);

    let record = |inputs: &[Tensor], store: &ParamStore, weights: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let outs = op(&mut tape, &vars, store);
        let loss = weighted_loss(&mut tape, &outs, weights);
        (tape, vars, loss)
    };
    let loss_at = |inputs: &[Tensor], store: &ParamStore, weights: &[Tensor]| {
        let (tape, _, loss) = record(inputs, store, weights);
        tape.value(loss)[0]
    };

    // Draw the weights from the output shapes of a first pass.
    let weights: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let outs = op(&mut tape, &vars, &base_store);
        outs.iter().map(|o| uniform(rng, tape.shape(*o), -1.0, 1.0)).collect()
    };

    let (tape, vars, loss) = record(inputs, &base_store, &weights);
    let grads = tape.gradients(loss).unwrap();
    let mut param_grads = base_store.clone();
    param_grads.zero_grads();
    tape.backward(loss, &mut param_grads).unwrap();

    let mut report = FdReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("every input receives a gradient").to_vec();
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (loss_at(&plus, &base_store, &weights) - loss_at(&minus, &base_store, &weights)) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    for id in base_store.trainable() {
        let analytic = param_grads.get(id).grad().expect("trainable parameter receives a gradient").to_vec();
        for j in 0..base_store.get(id).numel() {
            let mut plus = base_store.clone();
            plus.get_mut(id).data_mut()[j] += FD_STEP;
            let mut minus = base_store.clone();
            minus.get_mut(id).data_mut()[j] -= FD_STEP;
            let numeric = (loss_at(inputs, &plus, &weights) - loss_at(inputs, &minus, &weights)) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    report
}

/// Runs `steps` optimizer updates on shuffled batches, cycling epochs, and
/// returns the loss of each step.
pub fn train_steps(model: &mut Model, opt: &mut Optimizer, data: &Dataset, batch: usize, steps: usize, seed: u64) -> Vec<f64> {
    let mut losses = Vec::with_capacity(steps);
    let mut epoch = 0;
    while losses.len() < steps {
        for b in BatchIterator::shuffled(data, batch, seed + epoch, true).unwrap() {
            if losses.len() == steps {
                break;
            }
            zero_grads(model.params_mut());
            let mut tape = Tape::new();
            let x = tape.constant(b.images);
            let logits = model.forward(&mut tape, x).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &b.labels).unwrap();
            tape.backward(loss, model.params_mut()).unwrap();
            opt.step(model.params_mut()).unwrap();
            losses.push(tape.value(loss)[0]);
        }
        epoch += 1;
    }
    losses
}

/// Every parameter value, in store order.
pub fn flat_params(model: &Model) -> Vec<f64> {
    model.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Every running statistic, in site order.
pub fn flat_running_stats(model: &Model) -> Vec<f64> {
    model
        .norm_states()
        .into_iter()
        .flat_map(|(_, n)| n.running_mean().iter().chain(n.running_var()).copied().collect::<Vec<_>>())
        .collect()
}

pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Uniform bins over `[min, max]`; half-open except the closed last bin.
pub fn oracle_histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let bin = (0..bins - 1).find(|&i| v < lo + width * (i + 1) as f64).unwrap_or(bins - 1);
        counts[bin] += 1;
    }
    counts
}
