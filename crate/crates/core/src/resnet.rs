//! Residual networks built from basic or bottleneck blocks, with every
//! normalization site filled by one [`NormScheme`].
//!
//! Layout: 3×3 stride-1 stem conv → norm → ReLU, four stages with strides
//! 1, 2, 2, 2, global average pool, linear classifier. Inside blocks the
//! order is conv → norm → ReLU, and the final ReLU follows the residual
//! addition.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{make_norm_layer, Mode, NormScheme, NormState, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const BOTTLENECK_EXPANSION: usize = 4;
const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::Config(format!("unknown block kind '{other}'"))),
        }
    }
}

/// Geometry of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub norm_scheme: NormScheme,
}

impl BlockSpec {
    pub fn basic(in_channels: usize, width: usize, stride: usize, norm_scheme: NormScheme) -> Self {
        BlockSpec { kind: BlockKind::Basic, in_channels, mid_channels: width, out_channels: width, stride, norm_scheme }
    }

    pub fn bottleneck(in_channels: usize, mid: usize, stride: usize, norm_scheme: NormScheme) -> Self {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            in_channels,
            mid_channels: mid,
            out_channels: mid * BOTTLENECK_EXPANSION,
            stride,
            norm_scheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate block spec {self:?}")));
        }
        let expected = match self.kind {
            BlockKind::Basic => self.mid_channels,
            BlockKind::Bottleneck => self.mid_channels * BOTTLENECK_EXPANSION,
        };
        if self.out_channels != expected {
            return Err(Error::Config(format!(
                "{} block with {} mid channels must output {expected}, not {}",
                self.kind, self.mid_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_blocks: Vec<usize>,
    pub block_kind: BlockKind,
    pub norm_scheme: NormScheme,
    pub num_classes: usize,
    pub base_width: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 6] =
        ["resnet18", "resnet34", "resnet50", "resnet101", "resnet-tiny", "resnet-tiny-bottleneck"];

    pub fn new(stage_blocks: Vec<usize>, block_kind: BlockKind, norm_scheme: NormScheme, num_classes: usize, base_width: usize) -> Self {
        ModelConfig {
            stage_blocks,
            block_kind,
            norm_scheme,
            num_classes,
            base_width,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Named layouts. The two `tiny` presets are one block per stage at
    /// width 16.
    pub fn preset(name: &str, norm_scheme: NormScheme, num_classes: usize) -> Result<Self> {
        use BlockKind::*;
        let (blocks, kind, width) = match name.to_ascii_lowercase().as_str() {
            "resnet18" => (vec![2, 2, 2, 2], Basic, 64),
            "resnet34" => (vec![3, 4, 6, 3], Basic, 64),
            "resnet50" => (vec![3, 4, 6, 3], Bottleneck, 64),
            "resnet101" => (vec![3, 4, 23, 3], Bottleneck, 64),
            "resnet-tiny" => (vec![1, 1, 1, 1], Basic, 16),
            "resnet-tiny-bottleneck" => (vec![1, 1, 1, 1], Bottleneck, 16),
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        Ok(ModelConfig::new(blocks, kind, norm_scheme, num_classes, width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != 4 || self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!("stage_blocks must be 4 positive counts, got {:?}", self.stage_blocks)));
        }
        if self.num_classes == 0 || self.base_width == 0 {
            return Err(Error::Config("num_classes and base_width must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "invalid normalization constants epsilon={} momentum={}",
                self.epsilon, self.momentum
            )));
        }
        Ok(())
    }

    /// Block specs in execution order.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let mut specs = Vec::new();
        let mut in_channels = self.base_width;
        for (stage, &count) in self.stage_blocks.iter().enumerate() {
            let width = self.base_width << stage;
            for b in 0..count {
                let stride = if b == 0 { STAGE_STRIDES[stage] } else { 1 };
                let spec = match self.block_kind {
                    BlockKind::Basic => BlockSpec::basic(in_channels, width, stride, self.norm_scheme),
                    BlockKind::Bottleneck => BlockSpec::bottleneck(in_channels, width, stride, self.norm_scheme),
                };
                in_channels = spec.out_channels;
                specs.push(spec);
            }
        }
        specs
    }

    pub fn feature_channels(&self) -> usize {
        let top = self.base_width << 3;
        match self.block_kind {
            BlockKind::Basic => top,
            BlockKind::Bottleneck => top * BOTTLENECK_EXPANSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: String,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        // Kaiming-uniform with ReLU gain.
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..c_out * fan_in).map(|_| dist.sample(rng)).collect();
        let weight = store.add(name, Tensor::new(vec![c_out, c_in, k, k], data)?.with_requires_grad(true));
        Ok(ConvLayer { weight, stride, padding: (k - 1) / 2 })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, self.stride, self.padding)
    }
}

/// A residual block with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    spec: BlockSpec,
    convs: Vec<ConvLayer>,
    norms: Vec<(String, NormState)>,
    shortcut: Option<(ConvLayer, String, NormState)>,
}

impl Block {
    /// Allocates the block's parameters in `store` under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        spec: BlockSpec,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let layout: Vec<(usize, usize, usize, usize)> = match spec.kind {
            BlockKind::Basic => vec![
                (spec.in_channels, spec.mid_channels, 3, spec.stride),
                (spec.mid_channels, spec.out_channels, 3, 1),
            ],
            BlockKind::Bottleneck => vec![
                (spec.in_channels, spec.mid_channels, 1, 1),
                (spec.mid_channels, spec.mid_channels, 3, spec.stride),
                (spec.mid_channels, spec.out_channels, 1, 1),
            ],
        };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, (c_in, c_out, k, stride)) in layout.into_iter().enumerate() {
            convs.push(ConvLayer::new(store, rng, format!("{prefix}.conv{}.weight", i + 1), c_in, c_out, k, stride)?);
            let name = format!("{prefix}.norm{}", i + 1);
            norms.push((name.clone(), make_norm_layer(store, &name, spec.norm_scheme, c_out, epsilon, momentum)?));
        }
        let shortcut = if spec.has_projection() {
            let conv = ConvLayer::new(
                store,
                rng,
                format!("{prefix}.shortcut.conv.weight"),
                spec.in_channels,
                spec.out_channels,
                1,
                spec.stride,
            )?;
            let name = format!("{prefix}.shortcut.norm");
            let norm = make_norm_layer(store, &name, spec.norm_scheme, spec.out_channels, epsilon, momentum)?;
            Some((conv, name, norm))
        } else {
            None
        };
        Ok(Block { spec, convs, norms, shortcut })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    /// Conv weight handles, residual branch first then the projection.
    pub fn conv_weights(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .chain(self.shortcut.iter().map(|(c, _, _)| c))
            .map(|c| c.weight)
            .collect()
    }

    /// `relu(F(x) + shortcut(x))`.
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [_, c, _, _] if *c == self.spec.in_channels => {}
            shape => {
                return Err(Error::Config(format!(
                    "block expects {} input channels, got shape {shape:?}",
                    self.spec.in_channels
                )))
            }
        }
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, (conv, (_, norm))) in self.convs.iter().zip(self.norms.iter_mut()).enumerate() {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        let skip = match &mut self.shortcut {
            Some((conv, _, norm)) => {
                let s = conv.forward(tape, store, x)?;
                norm.forward(tape, store, s)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormState> {
        self.norms.iter_mut().map(|(_, n)| n).chain(self.shortcut.iter_mut().map(|(_, _, n)| n))
    }

    fn named_norms(&self) -> impl Iterator<Item = (&str, &NormState)> {
        self.norms
            .iter()
            .map(|(name, n)| (name.as_str(), n))
            .chain(self.shortcut.iter().map(|(_, name, n)| (name.as_str(), n)))
    }
}

/// A complete classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    stem: ConvLayer,
    stem_norm: NormState,
    blocks: Vec<Block>,
    stage_lengths: Vec<usize>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    mode: Mode,
}

/// Layer whose parameters are captured by the instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPosition {
    /// The stem convolution.
    Input,
    /// The classifier head weight.
    Final,
}

impl LayerPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerPosition::Input => "input",
            LayerPosition::Final => "final",
        }
    }
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (eps, mom) = (config.epsilon, config.momentum);
        let stem = ConvLayer::new(&mut params, &mut rng, "stem.conv.weight".into(), 3, config.base_width, 3, 1)?;
        let stem_norm = make_norm_layer(&mut params, "stem.norm", config.norm_scheme, config.base_width, eps, mom)?;
        let specs = config.block_specs();
        let mut blocks = Vec::with_capacity(specs.len());
        let mut idx = 0;
        for (stage, &count) in config.stage_blocks.iter().enumerate() {
            for b in 0..count {
                let prefix = format!("stage{}.block{}", stage + 1, b + 1);
                blocks.push(Block::new(&mut params, &mut rng, &prefix, specs[idx], eps, mom)?);
                idx += 1;
            }
        }
        let features = config.feature_channels();
        let bound = 1.0 / (features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..config.num_classes * features).map(|_| dist.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..config.num_classes).map(|_| dist.sample(&mut rng)).collect();
        let fc_weight = params.add("fc.weight", Tensor::new(vec![config.num_classes, features], w)?.with_requires_grad(true));
        let fc_bias = params.add("fc.bias", Tensor::new(vec![config.num_classes], b)?.with_requires_grad(true));
        Ok(Model {
            config: config.clone(),
            params,
            stem,
            stem_norm,
            blocks,
            stage_lengths: config.stage_blocks.clone(),
            fc_weight,
            fc_bias,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for n in self.norms_mut() {
            n.set_mode(mode);
        }
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormState> {
        std::iter::once(&mut self.stem_norm).chain(self.blocks.iter_mut().flat_map(Block::norms_mut))
    }

    /// Every normalization site with its parameter-name prefix.
    pub fn norm_states(&self) -> Vec<(&str, &NormState)> {
        std::iter::once(("stem.norm", &self.stem_norm))
            .chain(self.blocks.iter().flat_map(Block::named_norms))
            .collect()
    }

    pub(crate) fn norm_states_mut(&mut self) -> Vec<&mut NormState> {
        self.norms_mut().collect()
    }

    /// Freezes the scale and shift of every normalization site, turning
    /// BatchNorm into a reference implementation of BatchNorm-minus.
    pub fn freeze_norm_affine(&mut self) {
        let states: Vec<NormState> = self.norm_states().into_iter().map(|(_, n)| n.clone()).collect();
        for n in states {
            n.set_affine_trainable(&mut self.params, false).expect("freezing is always allowed");
        }
    }

    /// Zeroes the classifier weight and bias.
    pub fn zero_classifier(&mut self) {
        for id in [self.fc_weight, self.fc_bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn layer_weight(&self, position: LayerPosition) -> ParamId {
        match position {
            LayerPosition::Input => self.stem.weight,
            LayerPosition::Final => self.fc_weight,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Logits for a `[N, 3, H, W]` batch; in train mode normalization layers
    /// use batch statistics and update their running averages.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_traced(tape, x).map(|(logits, _)| logits)
    }

    /// Like [`Model::forward`], also returning each stage's output.
    pub fn forward_traced(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        match tape.shape(x) {
            [_, 3, _, _] => {}
            shape => return Err(Error::Input(format!("model expects [N,3,H,W] images, got {shape:?}"))),
        }
        let params = &self.params;
        let mut h = self.stem.forward(tape, params, x)?;
        h = self.stem_norm.forward(tape, params, h)?;
        h = tape.relu(h)?;
        let mut stage_outputs = Vec::with_capacity(4);
        let mut blocks = self.blocks.iter_mut();
        for &count in &self.stage_lengths {
            for block in blocks.by_ref().take(count) {
                h = block.forward(tape, params, h)?;
            }
            stage_outputs.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(params, self.fc_weight);
        let b = tape.param(params, self.fc_bias);
        Ok((tape.linear(pooled, w, b)?, stage_outputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 3, size, size], data).unwrap()
    }

    #[test]
    fn presets_and_bottleneck_widths() {
        let r50 = ModelConfig::preset("resnet50", NormScheme::BatchNorm, 10).unwrap();
        assert_eq!(r50.stage_blocks, vec![3, 4, 6, 3]);
        let r34 = ModelConfig::preset("resnet34", NormScheme::BatchNorm, 10).unwrap();
        assert_eq!(r34.stage_blocks, r50.stage_blocks);
        assert_eq!(r34.block_kind, BlockKind::Basic);
        assert_eq!(ModelConfig::preset("resnet101", NormScheme::None, 10).unwrap().stage_blocks, vec![3, 4, 23, 3]);
        assert!(ModelConfig::preset("resnet152", NormScheme::None, 10).is_err());

        let spec = BlockSpec::bottleneck(256, 64, 1, NormScheme::BatchNorm);
        assert_eq!(spec.out_channels, 256);
        assert!(!spec.has_projection());
        assert!(BlockSpec::bottleneck(64, 64, 1, NormScheme::BatchNorm).has_projection());
        assert!(BlockSpec::basic(16, 32, 2, NormScheme::None).has_projection());
        let mut bad = BlockSpec::basic(16, 16, 1, NormScheme::None);
        bad.out_channels = 32;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_residual_block_is_relu_of_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BlockSpec::basic(4, 4, 1, NormScheme::None);
        let mut block = Block::new(&mut store, &mut rng, "b", spec, 1e-5, 0.1).unwrap();
        for id in block.conv_weights() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 4 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 4, 5, 5], data.clone()).unwrap());
        let y = block.forward(&mut tape, &store, x).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y), expected.as_slice());

        let bad = tape.constant(Tensor::zeros(vec![1, 3, 5, 5]).unwrap());
        assert!(matches!(block.forward(&mut tape, &store, bad), Err(Error::Config(_))));
    }

    #[test]
    fn block_output_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BlockSpec::bottleneck(8, 4, 2, NormScheme::BatchNorm);
        let mut block = Block::new(&mut store, &mut rng, "b", spec, 1e-5, 0.1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 8, 6, 6], 0.5).unwrap());
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 3, 3]);
    }

    #[test]
    fn resnet18_logits_shape_and_stage_extents() {
        let config = ModelConfig::preset("resnet18", NormScheme::BatchNorm, 10).unwrap();
        let mut model = Model::build(&config, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(images(4, 32, 0));
        let (logits, stages) = model.forward_traced(&mut tape, x).unwrap();
        assert_eq!(tape.shape(logits), &[4, 10]);
        let extents: Vec<usize> = stages.iter().map(|&s| tape.shape(s)[2]).collect();
        assert_eq!(extents, vec![32, 16, 8, 4]);
    }

    #[test]
    fn depth_and_seed_contracts() {
        let r18 = Model::build(&ModelConfig::preset("resnet18", NormScheme::BatchNorm, 10).unwrap(), 0).unwrap();
        let tiny_cfg = ModelConfig::new(vec![1, 1, 1, 1], BlockKind::Basic, NormScheme::BatchNorm, 10, 64);
        let tiny = Model::build(&tiny_cfg, 0).unwrap();
        assert!(r18.num_params() > tiny.num_params());

        let a = Model::build(&tiny_cfg, 42).unwrap();
        let b = Model::build(&tiny_cfg, 42).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = Model::build(&tiny_cfg, 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn scheme_never_changes_shapes() {
        let mut reference: Option<Vec<Vec<usize>>> = None;
        for scheme in NormScheme::ALL {
            for kind in [BlockKind::Basic, BlockKind::Bottleneck] {
                let config = ModelConfig::new(vec![1, 1, 1, 1], kind, scheme, 10, 4);
                let mut model = Model::build(&config, 0).unwrap();
                let mut tape = Tape::new();
                let x = tape.constant(images(2, 16, 1));
                let (logits, stages) = model.forward_traced(&mut tape, x).unwrap();
                let stage_shapes: Vec<Vec<usize>> = stages.iter().map(|&s| tape.shape(s)[2..].to_vec()).collect();
                assert_eq!(tape.shape(logits), &[2, 10]);
                match &reference {
                    Some(r) => assert_eq!(&stage_shapes, r),
                    None => reference = Some(stage_shapes),
                }
            }
        }
    }

    #[test]
    fn rejects_non_rgb_input() {
        let config = ModelConfig::preset("resnet-tiny", NormScheme::None, 10).unwrap();
        let mut model = Model::build(&config, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 1, 8, 8]).unwrap());
        assert!(matches!(model.forward(&mut tape, x), Err(Error::Input(_))));
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let config = ModelConfig::preset("resnet-tiny", NormScheme::BatchNorm, 10).unwrap();
        let mut model = Model::build(&config, 5).unwrap();
        model.zero_classifier();
        let mut tape = Tape::new();
        let x = tape.constant(images(3, 8, 2));
        let logits = model.forward(&mut tape, x).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let loss = tape.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn train_mode_moves_running_stats_eval_does_not() {
        let config = ModelConfig::preset("resnet-tiny", NormScheme::BatchNorm, 10).unwrap();
        let mut model = Model::build(&config, 5).unwrap();
        let before: Vec<Vec<f64>> = model.norm_states().iter().map(|(_, n)| n.running_mean().to_vec()).collect();
        model.set_mode(Mode::Eval);
        let mut tape = Tape::new();
        let x = tape.constant(images(2, 8, 3));
        model.forward(&mut tape, x).unwrap();
        let after_eval: Vec<Vec<f64>> = model.norm_states().iter().map(|(_, n)| n.running_mean().to_vec()).collect();
        assert_eq!(before, after_eval);
        model.set_mode(Mode::Train);
        model.forward(&mut tape, x).unwrap();
        let after_train: Vec<Vec<f64>> = model.norm_states().iter().map(|(_, n)| n.running_mean().to_vec()).collect();
        assert_ne!(before, after_train);
    }
}
