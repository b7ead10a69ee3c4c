//! Sequential model description, parameters, and range-restricted forward and
//! backward passes.
//!
//! Layers are indexed from 1 to `L`. A prefix up to layer `l` applies layers
//! `1..=l`; the matching suffix applies `l+1..=L`, so the two partition the
//! model and compose to the full forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel_size: usize, stride: usize, padding: usize, activation: Activation },
    Flatten,
    Dense { units: usize, activation: Activation },
}

impl LayerSpec {
    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Conv2d { activation, .. } | LayerSpec::Dense { activation, .. } => *activation,
            LayerSpec::Flatten => Activation::None,
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerSpec::Flatten)
    }
}

/// An ordered stack of layers together with the per-sample input shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the per-sample shape entering layer `i + 1`; the last
    /// entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = NnError;
    fn try_from(raw: RawModelSpec) -> Result<Self, NnError> {
        ModelSpec::new(raw.input_shape, raw.layers)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(spec: ModelSpec) -> Self {
        RawModelSpec { input_shape: spec.input_shape, layers: spec.layers }
    }
}

impl ModelSpec {
    /// Validates a layer stack against a per-sample input shape `(H, W, C)`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(NnError::Config(format!("input shape must be (height, width, channels), got {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(NnError::Config("model has no layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = match *layer {
                LayerSpec::Conv2d { out_channels, kernel_size, stride, padding, .. } => {
                    if cur.len() != 3 {
                        return Err(NnError::Config(format!(
                            "layer {}: conv2d needs a (h, w, c) input, got {cur:?}",
                            i + 1
                        )));
                    }
                    if out_channels == 0 || kernel_size == 0 || stride == 0 {
                        return Err(NnError::Config(format!("layer {}: conv2d sizes must be positive", i + 1)));
                    }
                    let (h, w) = (cur[0] + 2 * padding, cur[1] + 2 * padding);
                    if h < kernel_size || w < kernel_size {
                        return Err(NnError::Config(format!(
                            "layer {}: kernel {kernel_size} larger than padded input {h}x{w}",
                            i + 1
                        )));
                    }
                    vec![(h - kernel_size) / stride + 1, (w - kernel_size) / stride + 1, out_channels]
                }
                LayerSpec::Flatten => {
                    if cur.len() != 3 {
                        return Err(NnError::Config(format!("layer {}: flatten needs a (h, w, c) input", i + 1)));
                    }
                    vec![cur.iter().product()]
                }
                LayerSpec::Dense { units, .. } => {
                    if cur.len() != 1 {
                        return Err(NnError::Config(format!("layer {}: dense needs a flat input, got {cur:?}", i + 1)));
                    }
                    if units == 0 {
                        return Err(NnError::Config(format!("layer {}: dense units must be positive", i + 1)));
                    }
                    vec![units]
                }
            };
            shapes.push(next);
        }
        let last = layers.last().unwrap();
        if !matches!(last, LayerSpec::Dense { activation: Activation::None, .. }) {
            return Err(NnError::Config("final layer must be dense with no activation".into()));
        }
        Ok(Self { input_shape, layers, shapes })
    }

    /// Builds a conv/dense stack where every layer but the last uses ReLU.
    ///
    /// `convs` holds `(channels, kernel, stride, padding)` per conv layer and
    /// `dense` the widths of the dense layers, the last being the class count.
    pub fn conv_stack(
        input_shape: Vec<usize>,
        convs: &[(usize, usize, usize, usize)],
        dense: &[usize],
    ) -> Result<Self, NnError> {
        let mut layers: Vec<LayerSpec> = convs
            .iter()
            .map(|&(c, k, s, p)| LayerSpec::Conv2d {
                out_channels: c,
                kernel_size: k,
                stride: s,
                padding: p,
                activation: Activation::Relu,
            })
            .collect();
        if !convs.is_empty() || input_shape.len() == 3 {
            layers.push(LayerSpec::Flatten);
        }
        for (i, &units) in dense.iter().enumerate() {
            let activation = if i + 1 == dense.len() { Activation::None } else { Activation::Relu };
            layers.push(LayerSpec::Dense { units, activation });
        }
        Self::new(input_shape, layers)
    }

    /// `[C1(8); C2(16); C3(32); flatten; F1(32); F2(16); F3(classes)]`.
    pub fn m1(input_shape: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        Self::conv_stack(input_shape, &[(8, 3, 2, 1), (16, 3, 2, 1), (32, 3, 2, 1)], &[32, 16, classes])
    }

    /// `[C1(16); C2(64); C3(128); flatten; F1(128); F2(32); F3(classes)]`.
    pub fn m2(input_shape: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        Self::conv_stack(input_shape, &[(16, 3, 2, 1), (64, 3, 2, 1), (128, 3, 2, 1)], &[128, 32, classes])
    }

    /// Small M1-shaped stack for tiny grid inputs: three stride-1 convs.
    pub fn desk(input_shape: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        Self::conv_stack(input_shape, &[(4, 3, 1, 1), (8, 3, 1, 1), (8, 3, 1, 1)], &[16, 8, classes])
    }

    /// Parses a compact layer list such as
    /// `conv(8,3,2,1); conv(16,3); flatten; dense(32); dense(10)`.
    ///
    /// `conv(c,k)` defaults to stride 1 and padding `k/2`. ReLU follows every
    /// layer except the last.
    pub fn parse(text: &str, input_shape: Vec<usize>) -> Result<Self, NnError> {
        let tokens: Vec<&str> = text.split(';').map(str::trim).filter(|t| !t.is_empty()).collect();
        let mut layers = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            let (name, args) = match tok.find('(') {
                Some(open) => {
                    let close =
                        tok.strip_suffix(')').ok_or_else(|| NnError::Config(format!("unterminated layer '{tok}'")))?;
                    let args: Result<Vec<usize>, _> =
                        close[open + 1..].split(',').map(|a| a.trim().parse::<usize>()).collect();
                    let args = args.map_err(|_| NnError::Config(format!("bad layer arguments in '{tok}'")))?;
                    (&tok[..open], args)
                }
                None => (*tok, Vec::new()),
            };
            let layer = match (name.trim(), args.as_slice()) {
                ("conv", [c, k]) => LayerSpec::Conv2d {
                    out_channels: *c,
                    kernel_size: *k,
                    stride: 1,
                    padding: k / 2,
                    activation: Activation::Relu,
                },
                ("conv", [c, k, s, p]) => LayerSpec::Conv2d {
                    out_channels: *c,
                    kernel_size: *k,
                    stride: *s,
                    padding: *p,
                    activation: Activation::Relu,
                },
                ("flatten", []) => LayerSpec::Flatten,
                ("dense", [u]) => LayerSpec::Dense { units: *u, activation: Activation::Relu },
                _ => return Err(NnError::Config(format!("unrecognized layer '{tok}'"))),
            };
            layers.push(layer);
        }
        if let Some(LayerSpec::Dense { activation, .. }) = layers.last_mut() {
            *activation = Activation::None;
        }
        Self::new(input_shape, layers)
    }

    /// Number of layers `L` (flatten included).
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &LayerSpec {
        &self.layers[l - 1]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of layer `l`; `l = 0` is the model input.
    pub fn output_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn is_flatten(&self, l: usize) -> bool {
        matches!(self.layer(l), LayerSpec::Flatten)
    }

    /// Short layer label: `C<i>` for the i-th conv, `F<i>` for the i-th
    /// dense layer, `flatten` otherwise.
    pub fn layer_name(&self, l: usize) -> String {
        let kind = |f: fn(&LayerSpec) -> bool| self.layers[..l].iter().filter(|x| f(x)).count();
        match self.layer(l) {
            LayerSpec::Conv2d { .. } => {
                format!("C{}", kind(|x| matches!(x, LayerSpec::Conv2d { .. })))
            }
            LayerSpec::Dense { .. } => {
                format!("F{}", kind(|x| matches!(x, LayerSpec::Dense { .. })))
            }
            LayerSpec::Flatten => "flatten".to_string(),
        }
    }

    /// Resolves a label produced by [`layer_name`](Self::layer_name) (case-insensitive)
    /// or a plain 1-based index.
    pub fn resolve_layer(&self, name: &str) -> Result<usize, NnError> {
        let name = name.trim();
        if let Ok(idx) = name.parse::<usize>() {
            if (1..=self.num_layers()).contains(&idx) {
                return Ok(idx);
            }
        }
        (1..=self.num_layers())
            .find(|&l| self.layer_name(l).eq_ignore_ascii_case(name))
            .ok_or_else(|| NnError::Argument(format!("no layer named '{name}'")))
    }

    pub fn num_params(&self) -> usize {
        (1..=self.num_layers())
            .map(|l| self.block_shapes(l).map_or(0, |(w, b)| w.iter().product::<usize>() + b[0]))
            .sum()
    }

    /// Weight and bias shapes for layer `l`, if it has parameters.
    pub fn block_shapes(&self, l: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let input = self.output_shape(l - 1);
        match *self.layer(l) {
            LayerSpec::Conv2d { out_channels, kernel_size, .. } => {
                Some((vec![out_channels, kernel_size, kernel_size, input[2]], vec![out_channels]))
            }
            LayerSpec::Dense { units, .. } => Some((vec![units, input[0]], vec![units])),
            LayerSpec::Flatten => None,
        }
    }

    fn fan_in(&self, l: usize) -> usize {
        let input = self.output_shape(l - 1);
        match *self.layer(l) {
            LayerSpec::Conv2d { kernel_size, .. } => kernel_size * kernel_size * input[2],
            LayerSpec::Dense { .. } => input[0],
            LayerSpec::Flatten => 0,
        }
    }

    fn check_batch(&self, t: &Tensor, l: usize) -> bool {
        t.rank() >= 1 && t.sample_shape() == self.output_shape(l)
    }
}

/// Weight and bias of one parameterized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamBlock {
    fn zeros_like(&self) -> Self {
        Self { weight: Tensor::zeros(self.weight.shape().to_vec()), bias: Tensor::zeros(self.bias.shape().to_vec()) }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(self.bias.data())
    }

    fn value_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight.data_mut()[i]
        } else {
            &mut self.bias.data_mut()[i - nw]
        }
    }
}

/// Parameter blocks indexed by layer; parameterless layers hold `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    blocks: Vec<Option<ParamBlock>>,
}

/// Gradients laid out like [`ModelParams`]; blocks outside the requested
/// range are `None`.
pub type Gradients = ModelParams;

impl ModelParams {
    /// He-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`) and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let blocks = (1..=spec.num_layers())
            .map(|l| {
                spec.block_shapes(l).map(|(ws, bs)| {
                    let limit = (6.0 / spec.fan_in(l) as f64).sqrt();
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    ParamBlock { weight: Tensor::new(ws, data).unwrap(), bias: Tensor::zeros(bs) }
                })
            })
            .collect();
        Self { blocks }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let blocks = (1..=spec.num_layers())
            .map(|l| {
                spec.block_shapes(l).map(|(ws, bs)| ParamBlock { weight: Tensor::zeros(ws), bias: Tensor::zeros(bs) })
            })
            .collect();
        Self { blocks }
    }

    /// A gradient container with no blocks present.
    pub fn empty(num_layers: usize) -> Self {
        Self { blocks: vec![None; num_layers] }
    }

    pub fn zeros_like(&self) -> Self {
        Self { blocks: self.blocks.iter().map(|b| b.as_ref().map(ParamBlock::zeros_like)).collect() }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Block for layer `l`, 1-based.
    pub fn block(&self, l: usize) -> Option<&ParamBlock> {
        self.blocks[l - 1].as_ref()
    }

    pub fn block_mut(&mut self, l: usize) -> Option<&mut ParamBlock> {
        self.blocks[l - 1].as_mut()
    }

    pub fn blocks(&self) -> &[Option<ParamBlock>] {
        &self.blocks
    }

    /// Prefix slice: blocks of layers `1..=l`.
    pub fn prefix(&self, l: usize) -> &[Option<ParamBlock>] {
        &self.blocks[..l]
    }

    /// Suffix slice: blocks of layers `l+1..=L`.
    pub fn suffix(&self, l: usize) -> &[Option<ParamBlock>] {
        &self.blocks[l..]
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().flatten().map(ParamBlock::len).sum()
    }

    /// All values in layer order (weights then bias per block).
    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().flat_map(|b| b.values().copied()).collect()
    }

    /// Mutable access to the `i`-th value in [`flat`](Self::flat) order.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for block in self.blocks.iter_mut().flatten() {
            if i < block.len() {
                return block.value_mut(i);
            }
            i -= block.len();
        }
        panic!("parameter index out of range");
    }

    /// Layer (1-based) owning the `i`-th flat value.
    pub fn layer_of_flat(&self, mut i: usize) -> usize {
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(b) = block {
                if i < b.len() {
                    return l + 1;
                }
                i -= b.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// True when every present value is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|b| b.values().all(|&v| v == 0.0))
    }

    /// Bit-for-bit equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.weight.shape() == b.weight.shape()
                        && a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            })
    }

    /// Bitwise equality restricted to layers `lo..=hi`.
    pub fn layers_bitwise_eq(&self, other: &Self, lo: usize, hi: usize) -> bool {
        (lo..=hi).all(|l| match (self.block(l), other.block(l)) {
            (None, None) => true,
            (Some(a), Some(b)) => a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        })
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape(),
                _ => false,
            })
    }

    /// Element-wise arithmetic mean, accumulated as a running mean in the
    /// given order so that identical inputs average to themselves exactly.
    pub fn mean(models: &[&ModelParams]) -> Result<ModelParams, NnError> {
        let first = models.first().ok_or_else(|| NnError::Argument("cannot average zero models".into()))?;
        if models.iter().any(|m| !m.same_layout(first)) {
            return Err(NnError::Argument("cannot average models with different layouts".into()));
        }
        let mut out = (*first).clone();
        for (k, m) in models.iter().enumerate().skip(1) {
            let count = (k + 1) as f64;
            for (acc, src) in out.blocks.iter_mut().zip(&m.blocks) {
                if let (Some(acc), Some(src)) = (acc, src) {
                    running_mean(acc.weight.data_mut(), src.weight.data(), count);
                    running_mean(acc.bias.data_mut(), src.bias.data(), count);
                }
            }
        }
        Ok(out)
    }
}

fn running_mean(acc: &mut [f64], src: &[f64], count: f64) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += (s - *a) / count;
    }
}

/// Inclusive 1-based range of layers whose parameter gradients are wanted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRange {
    lo: usize,
    hi: usize,
}

impl ParamRange {
    pub fn layers(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn all(spec: &ModelSpec) -> Self {
        Self { lo: 1, hi: spec.num_layers() }
    }

    /// No parameter gradients; useful when only the input gradient matters.
    pub fn none() -> Self {
        Self { lo: 1, hi: 0 }
    }

    pub fn contains(&self, l: usize) -> bool {
        self.lo <= l && l <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }
}

/// Recorded intermediates of a forward pass over layers `from+1..=to`.
#[derive(Clone, Debug)]
struct Trace {
    from: usize,
    to: usize,
    /// Input to each applied layer, in order.
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: Gradients,
    /// Gradient with respect to the forward pass input, when requested.
    pub input_grad: Option<Tensor>,
}

/// Records one forward pass so that a backward pass can follow.
///
/// The parameters passed to [`backward`](Tape::backward) must be the ones used
/// for the recorded forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    trace: Option<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies layers `from+1..=to` to `x` and records the intermediates.
    pub fn forward(
        &mut self,
        spec: &ModelSpec,
        params: &ModelParams,
        x: &Tensor,
        from: usize,
        to: usize,
    ) -> Result<&Tensor, NnError> {
        check_range(spec, from, to)?;
        if !spec.check_batch(x, from) {
            return Err(NnError::Argument(format!(
                "input shape {:?} does not match layer {from} output {:?}",
                x.sample_shape(),
                spec.output_shape(from)
            )));
        }
        let mut inputs = Vec::with_capacity(to - from);
        let output = run_layers(spec, params, x.clone(), from, to, Some(&mut inputs));
        self.trace = Some(Trace { from, to, inputs, output });
        Ok(&self.trace.as_ref().unwrap().output)
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.trace.as_ref().map(|t| &t.output)
    }

    /// Backpropagates `grad_output` (d loss / d output) through the recorded
    /// layers. Gradients are produced only for layers inside `wanted`; every
    /// other block is `None`.
    pub fn backward(
        &self,
        spec: &ModelSpec,
        params: &ModelParams,
        grad_output: &Tensor,
        wanted: ParamRange,
        want_input_grad: bool,
    ) -> Result<Backward, NnError> {
        let trace =
            self.trace.as_ref().ok_or_else(|| NnError::Usage("backward called before any forward pass".into()))?;
        if grad_output.shape() != trace.output.shape() {
            return Err(NnError::Argument(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_output.shape(),
                trace.output.shape()
            )));
        }
        let mut grads = ModelParams::empty(spec.num_layers());
        let lowest_param = (trace.from + 1..=trace.to).find(|&l| wanted.contains(l) && spec.layer(l).has_params());
        let stop = if want_input_grad { Some(trace.from + 1) } else { lowest_param };
        let Some(stop) = stop else {
            return Ok(Backward { grads, input_grad: None });
        };

        let mut g = grad_output.clone();
        for l in (stop..=trace.to).rev() {
            let layer = spec.layer(l);
            let input = &trace.inputs[l - trace.from - 1];
            if layer.activation() == Activation::Relu {
                // relu'(z) from the post-activation value: the next layer's input
                // or the trace output.
                let post = if l == trace.to { &trace.output } else { &trace.inputs[l - trace.from] };
                for (gv, &pv) in g.data_mut().iter_mut().zip(post.data()) {
                    if pv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let need_dx = l > stop || want_input_grad;
            let need_dw = wanted.contains(l);
            let (block_grad, dx) = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let p = params.block(l).expect("conv block");
                    conv_backward(input, p, &g, stride, padding, need_dw, need_dx)
                }
                LayerSpec::Dense { .. } => {
                    let p = params.block(l).expect("dense block");
                    dense_backward(input, p, &g, need_dw, need_dx)
                }
                LayerSpec::Flatten => {
                    let dx = if need_dx { Some(g.clone().reshape(input.shape().to_vec())?) } else { None };
                    (None, dx)
                }
            };
            if let Some(bg) = block_grad {
                grads.blocks[l - 1] = Some(bg);
            }
            match dx {
                Some(dx) => g = dx,
                None => break,
            }
        }
        let input_grad = if want_input_grad { Some(g) } else { None };
        Ok(Backward { grads, input_grad })
    }
}

fn check_range(spec: &ModelSpec, from: usize, to: usize) -> Result<(), NnError> {
    if from > to || to > spec.num_layers() {
        return Err(NnError::Argument(format!(
            "layer range {}..={to} invalid for a {}-layer model",
            from + 1,
            spec.num_layers()
        )));
    }
    Ok(())
}

/// Activations after layer `l` (post-activation; raw logits when `l = L`).
pub fn forward_prefix(spec: &ModelSpec, params: &ModelParams, x: &Tensor, l: usize) -> Result<Tensor, NnError> {
    if l == 0 || l > spec.num_layers() {
        return Err(NnError::Argument(format!("layer {l} outside 1..={}", spec.num_layers())));
    }
    if !spec.check_batch(x, 0) {
        return Err(NnError::Config(format!(
            "input sample shape {:?} does not match model input {:?}",
            x.sample_shape(),
            spec.input_shape()
        )));
    }
    Ok(run_layers(spec, params, x.clone(), 0, l, None))
}

/// Applies layers `l+1..=L` to `h`, the output of layer `l`.
pub fn forward_suffix(spec: &ModelSpec, params: &ModelParams, h: &Tensor, l: usize) -> Result<Tensor, NnError> {
    if l == 0 || l > spec.num_layers() {
        return Err(NnError::Argument(format!("layer {l} outside 1..={}", spec.num_layers())));
    }
    if !spec.check_batch(h, l) {
        return Err(NnError::Argument(format!(
            "activation shape {:?} does not match layer {l} output {:?}",
            h.sample_shape(),
            spec.output_shape(l)
        )));
    }
    Ok(run_layers(spec, params, h.clone(), l, spec.num_layers(), None))
}

/// Applies layers `from+1..=to` without recording.
pub fn forward_range(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor, NnError> {
    check_range(spec, from, to)?;
    if !spec.check_batch(x, from) {
        return Err(NnError::Argument(format!(
            "input shape {:?} does not match layer {from} output {:?}",
            x.sample_shape(),
            spec.output_shape(from)
        )));
    }
    Ok(run_layers(spec, params, x.clone(), from, to, None))
}

/// Full forward pass to logits.
pub fn forward(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Tensor, NnError> {
    forward_prefix(spec, params, x, spec.num_layers())
}

fn run_layers(
    spec: &ModelSpec,
    params: &ModelParams,
    mut x: Tensor,
    from: usize,
    to: usize,
    mut record: Option<&mut Vec<Tensor>>,
) -> Tensor {
    for l in from + 1..=to {
        let layer = spec.layer(l);
        let mut y = match *layer {
            LayerSpec::Conv2d { stride, padding, .. } => {
                conv_forward(&x, params.block(l).expect("conv block"), stride, padding)
            }
            LayerSpec::Dense { .. } => dense_forward(&x, params.block(l).expect("dense block")),
            LayerSpec::Flatten => {
                let b = x.batch();
                let w = x.row_len();
                x.clone().reshape(vec![b, w]).unwrap()
            }
        };
        if layer.activation() == Activation::Relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(x);
        }
        x = y;
    }
    x
}

fn dense_forward(x: &Tensor, p: &ParamBlock) -> Tensor {
    let (units, width) = (p.weight.shape()[0], p.weight.shape()[1]);
    let b = x.batch();
    let w = p.weight.data();
    let bias = p.bias.data();
    let mut out = Vec::with_capacity(b * units);
    for row in x.rows() {
        for u in 0..units {
            let wr = &w[u * width..(u + 1) * width];
            let mut acc = bias[u];
            for (a, c) in wr.iter().zip(row) {
                acc += a * c;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![b, units], out).unwrap()
}

fn dense_backward(
    x: &Tensor,
    p: &ParamBlock,
    g: &Tensor,
    need_dw: bool,
    need_dx: bool,
) -> (Option<ParamBlock>, Option<Tensor>) {
    let (units, width) = (p.weight.shape()[0], p.weight.shape()[1]);
    let mut dw = need_dw.then(|| p.zeros_like());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let w = p.weight.data();
    for n in 0..x.batch() {
        let xr = x.row(n);
        let gr = g.row(n);
        if let Some(dw) = dw.as_mut() {
            let (dwt, dbt) = (dw.weight.data_mut(), dw.bias.data_mut());
            for u in 0..units {
                let gu = gr[u];
                dbt[u] += gu;
                if gu != 0.0 {
                    for (d, &xv) in dwt[u * width..(u + 1) * width].iter_mut().zip(xr) {
                        *d += gu * xv;
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxr = &mut dx.data_mut()[n * width..(n + 1) * width];
            for u in 0..units {
                let gu = gr[u];
                if gu != 0.0 {
                    for (d, &wv) in dxr.iter_mut().zip(&w[u * width..(u + 1) * width]) {
                        *d += gu * wv;
                    }
                }
            }
        }
    }
    (dw, dx)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, p: &ParamBlock, stride: usize, pad: usize) -> Self {
        let s = x.shape();
        let (h, w, cin) = (s[1], s[2], s[3]);
        let (cout, k) = (p.weight.shape()[0], p.weight.shape()[1]);
        Self { h, w, cin, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1, cout, k, stride, pad }
    }

    /// Input coordinate for output position `o` and kernel offset `kk`, if
    /// it falls inside the unpadded input.
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        (o * self.stride + kk).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

fn conv_forward(x: &Tensor, p: &ParamBlock, stride: usize, pad: usize) -> Tensor {
    let g = ConvGeom::new(x, p, stride, pad);
    let b = x.batch();
    let (xd, wd, bias) = (x.data(), p.weight.data(), p.bias.data());
    let mut out = vec![0.0; b * g.ho * g.wo * g.cout];
    for n in 0..b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                let acc = &mut out[o..o + g.cout];
                acc.copy_from_slice(bias);
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, g.w) else {
                            continue;
                        };
                        let xi = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let xs = &xd[xi..xi + g.cin];
                        for (co, a) in acc.iter_mut().enumerate() {
                            let wi = ((co * g.k + ky) * g.k + kx) * g.cin;
                            let ws = &wd[wi..wi + g.cin];
                            let mut s = 0.0;
                            for (wv, xv) in ws.iter().zip(xs) {
                                s += wv * xv;
                            }
                            *a += s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, g.ho, g.wo, g.cout], out).unwrap()
}

fn conv_backward(
    x: &Tensor,
    p: &ParamBlock,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_dw: bool,
    need_dx: bool,
) -> (Option<ParamBlock>, Option<Tensor>) {
    let g = ConvGeom::new(x, p, stride, pad);
    let mut dw = need_dw.then(|| p.zeros_like());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let (xd, wd, gd) = (x.data(), p.weight.data(), grad.data());
    for n in 0..x.batch() {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                let go = &gd[o..o + g.cout];
                if let Some(dw) = dw.as_mut() {
                    for (d, gv) in dw.bias.data_mut().iter_mut().zip(go) {
                        *d += gv;
                    }
                }
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, g.w) else {
                            continue;
                        };
                        let xi = ((n * g.h + iy) * g.w + ix) * g.cin;
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let wi = ((co * g.k + ky) * g.k + kx) * g.cin;
                            if let Some(dw) = dw.as_mut() {
                                let dws = &mut dw.weight.data_mut()[wi..wi + g.cin];
                                for (d, xv) in dws.iter_mut().zip(&xd[xi..xi + g.cin]) {
                                    *d += gv * xv;
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxs = &mut dx.data_mut()[xi..xi + g.cin];
                                for (d, wv) in dxs.iter_mut().zip(&wd[wi..wi + g.cin]) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, dx)
}
