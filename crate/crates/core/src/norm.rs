//! The four interchangeable normalization schemes.
//!
//! | scheme           | learnable scale/shift | batch normalization |
//! |------------------|-----------------------|---------------------|
//! | `BatchNorm`      | yes                   | yes                 |
//! | `AffineLayer`    | yes                   | no                  |
//! | `BatchNormMinus` | no (frozen at 1, 0)   | yes                 |
//! | `None`           | no                    | no (identity)       |
//!
//! Statistics are per channel over the batch and spatial axes. Running
//! statistics are exponential moving averages of the biased batch variance
//! and mean, and replace the batch statistics in eval mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormScheme {
    #[serde(rename = "batchnorm")]
    BatchNorm,
    #[serde(rename = "affine")]
    AffineLayer,
    #[serde(rename = "batchnorm-minus")]
    BatchNormMinus,
    #[serde(rename = "none")]
    None,
}

impl NormScheme {
    pub const ALL: [NormScheme; 4] =
        [NormScheme::BatchNorm, NormScheme::AffineLayer, NormScheme::BatchNormMinus, NormScheme::None];

    /// Whether the scheme carries trainable scale and shift.
    pub fn reparameterizes(self) -> bool {
        matches!(self, NormScheme::BatchNorm | NormScheme::AffineLayer)
    }

    /// Whether the scheme standardizes activations with batch statistics.
    pub fn renormalizes(self) -> bool {
        matches!(self, NormScheme::BatchNorm | NormScheme::BatchNormMinus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormScheme::BatchNorm => "batchnorm",
            NormScheme::AffineLayer => "affine",
            NormScheme::BatchNormMinus => "batchnorm-minus",
            NormScheme::None => "none",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            NormScheme::BatchNorm => 0,
            NormScheme::AffineLayer => 1,
            NormScheme::BatchNormMinus => 2,
            NormScheme::None => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        NormScheme::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown normalization code {code}")))
    }
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "batchnorm" | "bn" => Ok(NormScheme::BatchNorm),
            "affine" | "affinelayer" | "affine-layer" => Ok(NormScheme::AffineLayer),
            "batchnorm-minus" | "batchnormminus" | "bn-minus" => Ok(NormScheme::BatchNormMinus),
            "none" | "identity" => Ok(NormScheme::None),
            other => Err(Error::Config(format!("unknown normalization scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One normalization site: scheme, scale/shift parameter handles and
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    scheme: NormScheme,
    num_channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    epsilon: f64,
    momentum: f64,
    mode: Mode,
}

/// Builds a normalization site with `gamma = 1`, `beta = 0`, running mean 0
/// and running variance 1. Scale and shift are registered in `store` as
/// `<name>.gamma` / `<name>.beta`, trainable only for schemes that
/// re-parameterize.
pub fn make_norm_layer(
    store: &mut ParamStore,
    name: &str,
    scheme: NormScheme,
    channels: usize,
    epsilon: f64,
    momentum: f64,
) -> Result<NormState> {
    if channels == 0 {
        return Err(Error::Config("normalization needs at least one channel".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::Config(format!("momentum must lie in (0, 1], got {momentum}")));
    }
    let trainable = scheme.reparameterizes();
    let gamma = store.add(
        format!("{name}.gamma"),
        Tensor::full(vec![channels], 1.0)?.with_requires_grad(trainable),
    );
    let beta = store.add(
        format!("{name}.beta"),
        Tensor::zeros(vec![channels])?.with_requires_grad(trainable),
    );
    Ok(NormState {
        scheme,
        num_channels: channels,
        gamma,
        beta,
        running_mean: vec![0.0; channels],
        running_var: vec![1.0; channels],
        epsilon,
        momentum,
        mode: Mode::Train,
    })
}

impl NormState {
    pub fn scheme(&self) -> NormScheme {
        self.scheme
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Overrides epsilon. Zero is accepted here, unlike at construction, so
    /// that closed-form checks can run without the stabilizer.
    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(())
    }

    /// Replaces the running statistics, e.g. when restoring a checkpoint.
    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.num_channels || var.len() != self.num_channels {
            return Err(Error::Config(format!(
                "running statistics need {} channels, got {} and {}",
                self.num_channels,
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("running variance must be non-negative".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Whether scale and shift currently receive gradient updates.
    pub fn trainable(&self, store: &ParamStore) -> bool {
        store.get(self.gamma).requires_grad()
    }

    /// Freezes or unfreezes scale and shift. Schemes without a learnable
    /// affine part cannot be unfrozen.
    pub fn set_affine_trainable(&self, store: &mut ParamStore, trainable: bool) -> Result<()> {
        if trainable && !self.scheme.reparameterizes() {
            return Err(Error::Config(format!("{} keeps its scale and shift frozen", self.scheme)));
        }
        store.get_mut(self.gamma).set_requires_grad(trainable);
        store.get_mut(self.beta).set_requires_grad(trainable);
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        let channels = match shape {
            [_, c] | [_, c, _, _] => *c,
            _ => return Err(Error::Config(format!("normalization expects [N,C,H,W] input, got {shape:?}"))),
        };
        if channels != self.num_channels {
            return Err(Error::Config(format!(
                "normalization built for {} channels received {channels}",
                self.num_channels
            )));
        }
        Ok(())
    }

    /// Runs the layer in its current mode.
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.mode {
            Mode::Train => self.forward_train(tape, store, x),
            Mode::Eval => self.forward_eval(tape, store, x),
        }
    }

    /// Training-mode forward pass using batch statistics. Normalizing
    /// schemes fold the batch statistics into the running averages.
    pub fn forward_train(&mut self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if self.mode != Mode::Train {
            return Err(Error::Usage("training forward on an eval-mode normalization layer".into()));
        }
        self.check_input(tape, x)?;
        if self.scheme.renormalizes() {
            let per_channel = tape.value(x).len() / self.num_channels;
            if per_channel < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "{} needs at least 2 values per channel, got {per_channel}",
                    self.scheme
                )));
            }
        }
        match self.scheme {
            NormScheme::None => Ok(x),
            NormScheme::AffineLayer => self.affine(tape, store, x),
            NormScheme::BatchNorm | NormScheme::BatchNormMinus => {
                let (mean, var) = tape.channel_stats(x)?;
                let (batch_mean, batch_var) = (tape.value(mean).to_vec(), tape.value(var).to_vec());
                let z = tape.normalize(x, mean, var, self.epsilon)?;
                self.update_running_stats(&batch_mean, &batch_var);
                if self.scheme == NormScheme::BatchNorm {
                    self.affine(tape, store, z)
                } else {
                    Ok(z)
                }
            }
        }
    }

    /// Eval-mode forward pass. Normalizing schemes use the running statistics,
    /// so each example's output is independent of the rest of its batch.
    pub fn forward_eval(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("eval forward on a train-mode normalization layer".into()));
        }
        self.check_input(tape, x)?;
        match self.scheme {
            NormScheme::None => Ok(x),
            NormScheme::AffineLayer => self.affine(tape, store, x),
            NormScheme::BatchNorm | NormScheme::BatchNormMinus => {
                let c = self.num_channels;
                let mean = tape.constant(Tensor::new(vec![c], self.running_mean.clone())?);
                let var = tape.constant(Tensor::new(vec![c], self.running_var.clone())?);
                let z = tape.normalize(x, mean, var, self.epsilon)?;
                if self.scheme == NormScheme::BatchNorm {
                    self.affine(tape, store, z)
                } else {
                    Ok(z)
                }
            }
        }
    }

    fn affine(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.channel_affine(x, gamma, beta)
    }

    /// `running ← (1 − momentum)·running + momentum·batch`, for mean and
    /// biased variance independently.
    pub fn update_running_stats(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn layer(scheme: NormScheme, c: usize) -> (ParamStore, NormState) {
        let mut store = ParamStore::new();
        let state = make_norm_layer(&mut store, "n", scheme, c, DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        (store, state)
    }

    fn run(state: &mut NormState, store: &ParamStore, shape: Vec<usize>, data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, data).unwrap());
        let y = state.forward(&mut tape, store, x).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn capability_matrix() {
        use NormScheme::*;
        let table = [(BatchNorm, true, true), (AffineLayer, true, false), (BatchNormMinus, false, true), (None, false, false)];
        for (s, re_param, re_norm) in table {
            assert_eq!(s.reparameterizes(), re_param, "{s}");
            assert_eq!(s.renormalizes(), re_norm, "{s}");
            assert_eq!(s.as_str().parse::<NormScheme>().unwrap(), s);
            assert_eq!(NormScheme::from_code(s.code()).unwrap(), s);
        }
    }

    #[test]
    fn construction_rules() {
        let (store, s) = layer(NormScheme::BatchNormMinus, 8);
        assert!(!s.trainable(&store));
        assert_eq!(store.get(s.gamma()).data(), &[1.0; 8]);
        assert_eq!(store.get(s.beta()).data(), &[0.0; 8]);
        assert_eq!(s.running_mean(), &[0.0; 8]);
        assert_eq!(s.running_var(), &[1.0; 8]);
        let (store, s) = layer(NormScheme::BatchNorm, 8);
        assert!(s.trainable(&store));
        let (store, s) = layer(NormScheme::None, 8);
        assert!(!s.trainable(&store));

        let mut store = ParamStore::new();
        for (eps, mom) in [(0.0, 0.1), (-1e-5, 0.1), (1e-5, 0.0), (1e-5, 1.5)] {
            let r = make_norm_layer(&mut store, "x", NormScheme::BatchNorm, 4, eps, mom);
            assert!(matches!(r, Err(Error::Config(_))), "eps={eps} mom={mom}");
        }
        assert!(make_norm_layer(&mut store, "x", NormScheme::BatchNorm, 0, 1e-5, 0.1).is_err());
        assert!(s.set_affine_trainable(&mut ParamStore::new(), true).is_err());
    }

    #[test]
    fn batchnorm_closed_form() {
        let (store, mut s) = layer(NormScheme::BatchNorm, 1);
        s.set_epsilon(0.0).unwrap();
        let y = run(&mut s, &store, vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        // (x − 2) / sqrt(2/3)
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }

        let (store, mut s) = layer(NormScheme::BatchNorm, 1);
        let y = run(&mut s, &store, vec![3, 1, 1, 1], vec![5.0; 3]);
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn affine_and_identity() {
        let (mut store, mut s) = layer(NormScheme::AffineLayer, 1);
        store.get_mut(s.gamma()).data_mut()[0] = 2.0;
        store.get_mut(s.beta()).data_mut()[0] = -1.0;
        let y = run(&mut s, &store, vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(y, vec![1.0, 3.0, 5.0]);
        assert_eq!(s.running_mean(), &[0.0]);

        let (store, mut s) = layer(NormScheme::None, 2);
        let data = vec![0.1, -7.0, 3.25, f64::MIN_POSITIVE, 1e300, -0.0, 2.0, 9.0];
        let y = run(&mut s, &store, vec![2, 2, 1, 2], data.clone());
        assert!(y.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn degenerate_batch_and_mode_errors() {
        let (store, mut s) = layer(NormScheme::BatchNorm, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 1, 1]).unwrap());
        assert!(matches!(s.forward_train(&mut tape, &store, x), Err(Error::DegenerateBatch(_))));
        let (store, mut s) = layer(NormScheme::AffineLayer, 2);
        assert!(s.forward_train(&mut tape, &store, x).is_ok());
        s.set_mode(Mode::Eval);
        assert!(matches!(s.forward_train(&mut tape, &store, x), Err(Error::Usage(_))));
        let bad = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]).unwrap());
        assert!(matches!(s.forward(&mut tape, &store, bad), Err(Error::Config(_))));
    }

    #[test]
    fn eval_uses_running_stats() {
        let (store, mut s) = layer(NormScheme::BatchNorm, 1);
        s.set_epsilon(0.0).unwrap();
        s.set_mode(Mode::Eval);
        let x = vec![0.3, -1.2, 4.0];
        assert_eq!(run(&mut s, &store, vec![3, 1, 1, 1], x.clone()), x);

        let (store, mut s) = layer(NormScheme::BatchNormMinus, 1);
        s.set_epsilon(0.0).unwrap();
        s.set_running_stats(vec![2.0], vec![4.0]).unwrap();
        s.set_mode(Mode::Eval);
        assert_eq!(run(&mut s, &store, vec![1, 1, 1, 1], vec![4.0]), vec![1.0]);
    }

    #[test]
    fn eval_split_batch_matches_joint() {
        let (store, mut s) = layer(NormScheme::BatchNorm, 2);
        s.set_running_stats(vec![0.5, -1.0], vec![2.0, 0.25]).unwrap();
        s.set_mode(Mode::Eval);
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let joint = run(&mut s, &store, vec![4, 2, 1, 2], data.clone());
        let a = run(&mut s, &store, vec![2, 2, 1, 2], data[..8].to_vec());
        let b = run(&mut s, &store, vec![2, 2, 1, 2], data[8..].to_vec());
        assert_eq!(joint, [a, b].concat());
    }

    #[test]
    fn running_stat_updates() {
        let mut store = ParamStore::new();
        let mut s = make_norm_layer(&mut store, "n", NormScheme::BatchNorm, 1, 1e-5, 1.0).unwrap();
        s.update_running_stats(&[3.0], &[0.5]);
        assert_eq!((s.running_mean(), s.running_var()), (&[3.0][..], &[0.5][..]));

        let (_, mut s) = layer(NormScheme::BatchNorm, 1);
        s.update_running_stats(&[1.0], &[1.0]);
        assert!((s.running_mean()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn running_mean_converges_to_population_mean() {
        let (store, mut s) = layer(NormScheme::BatchNormMinus, 1);
        let dist = Normal::new(3.0, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..500 {
            let batch: Vec<f64> = (0..32).map(|_| dist.sample(&mut rng)).collect();
            run(&mut s, &store, vec![32, 1, 1, 1], batch);
        }
        let rel = (s.running_mean()[0] - 3.0).abs() / 3.0;
        assert!(rel < 0.05, "running mean {} off by {rel}", s.running_mean()[0]);
        assert!(s.running_var()[0] >= 0.0);
    }
}
