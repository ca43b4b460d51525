//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever
//! the backward rule needs. Operands always precede their consumers, so a
//! single reverse sweep over the node list visits each node exactly once.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{ParamId, ParamStore, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry },
    Linear { input: usize, weight: usize, bias: usize },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    GlobalAvgPool(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    ChannelMean(usize),
    ChannelVar { input: usize, mean: usize },
    Normalize { input: usize, mean: usize, var: usize, eps: f64 },
    ChannelAffine { input: usize, gamma: usize, beta: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of every differentiable leaf, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

/// Splits `[N, C, H, W]` (or `[N, C]`) into `(N, C, H·W)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Config(format!("expected [N,C] or [N,C,H,W] tensor, got {shape:?}"))),
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(var.index)
            .ok_or_else(|| Error::Usage("variable is not recorded on this tape".into()))
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[self.checked(var)].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[self.checked(var)].shape
    }

    pub fn to_tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[self.checked(var)];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn checked(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        var.index
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf { param: None }, false)
    }

    /// Records a free differentiable leaf whose gradient is reported by
    /// [`Tape::gradients`].
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf { param: None }, true)
    }

    /// Records a copy of a stored parameter. Gradients flow back into the
    /// store on [`Tape::backward`] when the parameter requires them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id) }, t.requires_grad())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (self.node(input)?, self.node(kernel)?);
        let geom = ConvGeometry::new(&x.shape, &k.shape, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, &x.value, &k.value);
        let needs = x.needs_grad || k.needs_grad;
        Ok(self.push(geom.output_shape(), out, Op::Conv2d { input: input.index, kernel: kernel.index, geom }, needs))
    }

    /// `input · weightᵀ + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.node(input)?, self.node(weight)?, self.node(bias)?);
        let (n, f_in, f_out) = match (x.shape.as_slice(), w.shape.as_slice(), b.shape.as_slice()) {
            ([n, fi], [fo, fi2], [fo2]) if fi == fi2 && fo == fo2 => (*n, *fi, *fo),
            _ => {
                return Err(Error::Config(format!(
                    "linear dimension mismatch: input {:?}, weight {:?}, bias {:?}",
                    x.shape, w.shape, b.shape
                )))
            }
        };
        let mut out = vec![0.0; n * f_out];
        for i in 0..n {
            let row = &x.value[i * f_in..(i + 1) * f_in];
            for o in 0..f_out {
                let wrow = &w.value[o * f_in..(o + 1) * f_in];
                out[i * f_out + o] = row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>() + b.value[o];
            }
        }
        let needs = x.needs_grad || w.needs_grad || b.needs_grad;
        Ok(self.push(
            vec![n, f_out],
            out,
            Op::Linear { input: input.index, weight: weight.index, bias: bias.index },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let out = x.value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, needs) = (x.shape.clone(), x.needs_grad);
        Ok(self.push(shape, out, Op::Relu(input.index), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.node(a)?, self.node(b)?);
        if x.shape != y.shape {
            return Err(Error::Config(format!("add shape mismatch: {:?} vs {:?}", x.shape, y.shape)));
        }
        let out = x.value.iter().zip(&y.value).map(|(p, q)| p + q).collect();
        let (shape, needs) = (x.shape.clone(), x.needs_grad || y.needs_grad);
        Ok(self.push(shape, out, Op::Add(a.index, b.index), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.node(a)?, self.node(b)?);
        if x.shape != y.shape {
            return Err(Error::Config(format!("mul shape mismatch: {:?} vs {:?}", x.shape, y.shape)));
        }
        let out = x.value.iter().zip(&y.value).map(|(p, q)| p * q).collect();
        let (shape, needs) = (x.shape.clone(), x.needs_grad || y.needs_grad);
        Ok(self.push(shape, out, Op::Mul(a.index, b.index), needs))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let total = x.value.iter().sum();
        let needs = x.needs_grad;
        Ok(self.push(vec![1], vec![total], Op::Sum(input.index), needs))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input)?;
        let [n, c, h, w] = x.shape[..] else {
            return Err(Error::Config(format!("global_avg_pool expects [N,C,H,W], got {:?}", x.shape)));
        };
        let hw = h * w;
        let out = x.value.chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let needs = x.needs_grad;
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(input.index), needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.node(logits)?;
        let [n, k] = x.shape[..] else {
            return Err(Error::Config(format!("softmax_cross_entropy expects [N,K], got {:?}", x.shape)));
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x.value[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            loss += denom.ln() - (row[labels[i]] - max);
        }
        let needs = x.needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss / n as f64],
            Op::SoftmaxCrossEntropy { logits: logits.index, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Per-channel mean and biased variance over every axis except C.
    pub fn channel_stats(&mut self, input: Var) -> Result<(Var, Var)> {
        let x = self.node(input)?;
        let (n, c, hw) = channel_layout(&x.shape)?;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                acc += x.value[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = acc / m;
            let mut sq = 0.0;
            for b in 0..n {
                sq += x.value[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = sq / m;
        }
        let needs = x.needs_grad;
        let mean_var = self.push(vec![c], mean, Op::ChannelMean(input.index), needs);
        let var_var = self.push(vec![c], var, Op::ChannelVar { input: input.index, mean: mean_var.index }, needs);
        Ok((mean_var, var_var))
    }

    /// `(x − mean_c) / sqrt(var_c + eps)` with per-channel `mean` and `var`.
    pub fn normalize(&mut self, input: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let (x, mu, s2) = (self.node(input)?, self.node(mean)?, self.node(var)?);
        let (n, c, hw) = channel_layout(&x.shape)?;
        if mu.shape != [c] || s2.shape != [c] {
            return Err(Error::Config(format!(
                "normalize expects [{c}] statistics, got {:?} and {:?}",
                mu.shape, s2.shape
            )));
        }
        let mut out = vec![0.0; x.value.len()];
        for b in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (s2.value[ch] + eps).sqrt();
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (x.value[i] - mu.value[ch]) * inv;
                }
            }
        }
        let needs = x.needs_grad || mu.needs_grad || s2.needs_grad;
        let shape = x.shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::Normalize { input: input.index, mean: mean.index, var: var.index, eps },
            needs,
        ))
    }

    /// `gamma_c · x + beta_c`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.node(input)?, self.node(gamma)?, self.node(beta)?);
        let (n, c, hw) = channel_layout(&x.shape)?;
        if g.shape != [c] || b.shape != [c] {
            return Err(Error::Config(format!(
                "channel_affine expects [{c}] scale and shift, got {:?} and {:?}",
                g.shape, b.shape
            )));
        }
        let mut out = vec![0.0; x.value.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = g.value[ch] * x.value[i] + b.value[ch];
                }
            }
        }
        let needs = x.needs_grad || g.needs_grad || b.needs_grad;
        let shape = x.shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::ChannelAffine { input: input.index, gamma: gamma.index, beta: beta.index },
            needs,
        ))
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", root.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        if !root.needs_grad {
            return Ok(grads);
        }
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |i: usize| self.nodes[i].needs_grad;
        let send = |grads: &mut [Option<Vec<f64>>], i: usize, delta: Vec<f64>| match &mut grads[i] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    dy,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    send(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    send(grads, *kernel, dk);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (&self.nodes[*input], &self.nodes[*weight]);
                let (n, f_in) = (x.shape[0], x.shape[1]);
                let f_out = w.shape[0];
                if wants(*input) {
                    let mut dx = vec![0.0; n * f_in];
                    for i in 0..n {
                        for o in 0..f_out {
                            let g = dy[i * f_out + o];
                            let wrow = &w.value[o * f_in..(o + 1) * f_in];
                            dx[i * f_in..(i + 1) * f_in].iter_mut().zip(wrow).for_each(|(d, w)| *d += g * w);
                        }
                    }
                    send(grads, *input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; f_out * f_in];
                    for i in 0..n {
                        let row = &x.value[i * f_in..(i + 1) * f_in];
                        for o in 0..f_out {
                            let g = dy[i * f_out + o];
                            dw[o * f_in..(o + 1) * f_in].iter_mut().zip(row).for_each(|(d, x)| *d += g * x);
                        }
                    }
                    send(grads, *weight, dw);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; f_out];
                    for i in 0..n {
                        db.iter_mut().zip(&dy[i * f_out..(i + 1) * f_out]).for_each(|(d, g)| *d += g);
                    }
                    send(grads, *bias, db);
                }
            }
            Op::Relu(input) => {
                let x = &self.nodes[*input].value;
                let dx = x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                send(grads, *input, dx);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(grads, *a, dy.to_vec());
                }
                if wants(*b) {
                    send(grads, *b, dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if wants(*a) {
                    send(grads, *a, y.iter().zip(dy).map(|(y, g)| y * g).collect());
                }
                if wants(*b) {
                    send(grads, *b, x.iter().zip(dy).map(|(x, g)| x * g).collect());
                }
            }
            Op::Sum(input) => {
                let n = self.nodes[*input].value.len();
                send(grads, *input, vec![dy[0]; n]);
            }
            Op::GlobalAvgPool(input) => {
                let shape = &self.nodes[*input].shape;
                let hw = shape[2] * shape[3];
                let scale = 1.0 / hw as f64;
                let dx = dy.iter().flat_map(|&g| std::iter::repeat(g * scale).take(hw)).collect();
                send(grads, *input, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                send(grads, *logits, dx);
            }
            Op::ChannelMean(input) => {
                let x = &self.nodes[*input];
                let (n, c, hw) = channel_layout(&x.shape).expect("validated at record time");
                let inv_m = 1.0 / (n * hw) as f64;
                let mut dx = vec![0.0; x.value.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        dx[base..base + hw].fill(dy[ch] * inv_m);
                    }
                }
                send(grads, *input, dx);
            }
            Op::ChannelVar { input, mean } => {
                // d var / d x_k = 2 (x_k − μ) / m; the path through μ sums to zero.
                let x = &self.nodes[*input];
                let mu = &self.nodes[*mean].value;
                let (n, c, hw) = channel_layout(&x.shape).expect("validated at record time");
                let two_over_m = 2.0 / (n * hw) as f64;
                let mut dx = vec![0.0; x.value.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = dy[ch] * two_over_m * (x.value[i] - mu[ch]);
                        }
                    }
                }
                send(grads, *input, dx);
            }
            Op::Normalize { input, mean, var, eps } => {
                let x = &self.nodes[*input];
                let mu = &self.nodes[*mean].value;
                let s2 = &self.nodes[*var].value;
                let (n, c, hw) = channel_layout(&x.shape).expect("validated at record time");
                let mut dx = wants(*input).then(|| vec![0.0; x.value.len()]);
                let mut dmu = vec![0.0; c];
                let mut dvar = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (s2[ch] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g += dy[i];
                            sum_gx += dy[i] * (x.value[i] - mu[ch]);
                            if let Some(dx) = dx.as_mut() {
                                dx[i] = dy[i] * inv;
                            }
                        }
                    }
                    dmu[ch] = -sum_g * inv;
                    dvar[ch] = -0.5 * sum_gx * inv * inv * inv;
                }
                if let Some(dx) = dx {
                    send(grads, *input, dx);
                }
                if wants(*mean) {
                    send(grads, *mean, dmu);
                }
                if wants(*var) {
                    send(grads, *var, dvar);
                }
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = &self.nodes[*input];
                let g = &self.nodes[*gamma].value;
                let (n, c, hw) = channel_layout(&x.shape).expect("validated at record time");
                let mut dx = wants(*input).then(|| vec![0.0; x.value.len()]);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dg[ch] += dy[i] * x.value[i];
                            db[ch] += dy[i];
                            if let Some(dx) = dx.as_mut() {
                                dx[i] = dy[i] * g[ch];
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    send(grads, *input, dx);
                }
                if wants(*gamma) {
                    send(grads, *gamma, dg);
                }
                if wants(*beta) {
                    send(grads, *beta, db);
                }
            }
        }
    }

    /// Back-propagates from a scalar `loss` and adds the resulting gradients
    /// into every reachable trainable parameter of `store`. Gradients
    /// accumulate across calls until the store is zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf { param: Some(id) }) = (g, &self.nodes[idx].op) {
                if id.index() >= store.len() {
                    return Err(Error::Usage("tape references a parameter missing from the store".into()));
                }
                let t = store.get_mut(*id);
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// differentiable leaf without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let mut grads = self.sweep(loss)?;
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}
