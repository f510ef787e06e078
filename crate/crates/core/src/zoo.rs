//! Architectures and the graph executor.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s plus a named weight
//! table. Graphs for the built-in architectures are produced by the builders
//! here and are addressed by string id (`cnn-lite`, `mobilevit-xs`,
//! `channel-mean`), which is all a saved model needs to record about its
//! topology.

use alloc::borrow::Cow;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionConfig, AttentionWeights, TransformerWeights, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::ops::{self, Activation, ConvSpec, PoolMode};
use crate::quant::{self, QuantParams};
use crate::rng;
use crate::tensor::{Nhwc, Tensor, TensorData};

/// Default square input side for both cactus architectures.
pub const INPUT_SIDE: usize = 256;

pub const CNN_LITE_ID: &str = "cnn-lite";
pub const MOBILEVIT_XS_ID: &str = "mobilevit-xs";
pub const CHANNEL_MEAN_ID: &str = "channel-mean";

/// Class labels used whenever a three-class model is built without explicit labels.
pub const CACTUS_LABELS: [&str; 3] = ["Affected", "Healthy", "NoCactus"];

#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    pub tensor: Tensor,
    /// Present for i8 tensors.
    pub quant: Option<QuantParams>,
}

impl Weight {
    pub fn f32(tensor: Tensor) -> Self {
        Weight { tensor, quant: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobileVitBlockSpec {
    pub prefix: String,
    pub channels: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub attention: AttentionConfig,
    pub activation: Activation,
}

impl MobileVitBlockSpec {
    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn layer_name(&self, l: usize, suffix: &str) -> String {
        format!("{}.layers.{l}.{suffix}", self.prefix)
    }

    pub fn dim(&self) -> usize {
        self.attention.embed_dim
    }

    /// Every weight the block reads with its shape.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, d, h) = (self.channels, self.dim(), self.mlp_hidden);
        let mut v = vec![
            (self.name("local.weight"), vec![3, 3, c, c]),
            (self.name("local.bias"), vec![c]),
            (self.name("proj_in.weight"), vec![1, 1, c, d]),
        ];
        for l in 0..self.depth {
            v.extend([
                (self.layer_name(l, "ln1.gamma"), vec![d]),
                (self.layer_name(l, "ln1.beta"), vec![d]),
                (self.layer_name(l, "attn.wq"), vec![d, d]),
                (self.layer_name(l, "attn.wk"), vec![d, d]),
                (self.layer_name(l, "attn.wv"), vec![d, d]),
                (self.layer_name(l, "attn.wo"), vec![d, d]),
                (self.layer_name(l, "ln2.gamma"), vec![d]),
                (self.layer_name(l, "ln2.beta"), vec![d]),
                (self.layer_name(l, "mlp.fc1.weight"), vec![d, h]),
                (self.layer_name(l, "mlp.fc1.bias"), vec![h]),
                (self.layer_name(l, "mlp.fc2.weight"), vec![h, d]),
                (self.layer_name(l, "mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.extend([
            (self.name("norm.gamma"), vec![d]),
            (self.name("norm.beta"), vec![d]),
            (self.name("proj_out.weight"), vec![1, 1, d, c]),
            (self.name("proj_out.bias"), vec![c]),
            (self.name("fusion.weight"), vec![3, 3, 2 * c, c]),
            (self.name("fusion.bias"), vec![c]),
        ]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Dense or grouped convolution; depthwise when `groups == cin`.
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
    },
    Pool {
        window: usize,
        stride: usize,
        mode: PoolMode,
    },
    Activation(Activation),
    LayerNorm {
        gamma: String,
        beta: String,
    },
    Linear {
        weight: String,
        bias: Option<String>,
    },
    /// `x + body(x)`.
    Residual(Vec<LayerSpec>),
    MobileVitBlock(MobileVitBlockSpec),
    /// Collapses everything after the batch axis.
    Flatten,
    GlobalAvgPool,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            LayerKind::Conv { spec, .. } if spec.groups > 1 => "depthwise_conv",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Activation(_) => "activation",
            LayerKind::LayerNorm { .. } => "layer_norm",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Residual(_) => "residual",
            LayerKind::MobileVitBlock(_) => "mobilevit_block",
            LayerKind::Flatten => "flatten",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Names of the weight tensors this layer reads.
    pub fn weight_names(&self) -> Vec<String> {
        match &self.kind {
            LayerKind::Conv { weight, bias, .. } | LayerKind::Linear { weight, bias } => {
                let mut v = vec![weight.clone()];
                v.extend(bias.iter().cloned());
                v
            }
            LayerKind::LayerNorm { gamma, beta } => vec![gamma.clone(), beta.clone()],
            LayerKind::Residual(body) => body.iter().flat_map(|l| l.weight_names()).collect(),
            LayerKind::MobileVitBlock(b) => b.weight_shapes().into_iter().map(|(n, _)| n).collect(),
            _ => Vec::new(),
        }
    }
}

/// A built-in architecture, addressable by string id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Three conv blocks (64/128/256 channels), global average pool, linear head.
    CnnLite,
    /// MobileViT-XS hybrid.
    MobileVitXs,
    /// Weightless probe: logits are the per-channel means of the input.
    ChannelMean,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::CnnLite, Architecture::MobileVitXs, Architecture::ChannelMean];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::CnnLite => CNN_LITE_ID,
            Architecture::MobileVitXs => MOBILEVIT_XS_ID,
            Architecture::ChannelMean => CHANNEL_MEAN_ID,
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.id() == id).ok_or_else(|| Error::UnknownArch(id.to_string()))
    }

    pub fn default_input_shape(self) -> [usize; 4] {
        [1, INPUT_SIDE, INPUT_SIDE, 3]
    }

    /// Layers and expected weight table for this architecture.
    pub fn layout(self, num_classes: usize, input_shape: [usize; 4]) -> Result<Layout> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let layout = match self {
            Architecture::CnnLite => cnn_lite_layout(num_classes, input_shape[3]),
            Architecture::MobileVitXs => mobilevit_xs_layout(num_classes, input_shape[3])?,
            Architecture::ChannelMean => {
                if input_shape[3] != num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "channel-mean needs num_classes == input channels ({})",
                        input_shape[3]
                    )));
                }
                Layout { layers: vec![LayerSpec::new("pool", LayerKind::GlobalAvgPool)], weights: Vec::new() }
            }
        };
        Ok(layout)
    }

    pub fn build(self, num_classes: usize, seed: u64) -> Result<ModelGraph> {
        self.build_with_input(num_classes, seed, self.default_input_shape())
    }

    /// Builds with seeded uniform fan-in-scaled weights, `a = sqrt(6 / fan_in)`.
    pub fn build_with_input(self, num_classes: usize, seed: u64, input_shape: [usize; 4]) -> Result<ModelGraph> {
        let layout = self.layout(num_classes, input_shape)?;
        let mut rng = rng::seeded(seed);
        let mut weights = BTreeMap::new();
        for spec in &layout.weights {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::FanIn(fan_in) => {
                    let a = libm::sqrtf(6.0 / fan_in as f32);
                    (0..n).map(|_| rng::symmetric_uniform(&mut rng, a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            weights.insert(spec.name.clone(), Weight::f32(Tensor::new(spec.shape.clone(), data)?));
        }
        ModelGraph::new(self.id(), layout.layers, weights, input_shape, default_labels(num_classes))
    }

    /// Reassembles a graph from a stored weight table, checking that the
    /// table holds exactly the tensors the architecture expects.
    pub fn assemble(
        self,
        labels: Vec<String>,
        input_shape: [usize; 4],
        weights: BTreeMap<String, Weight>,
    ) -> Result<ModelGraph> {
        let layout = self.layout(labels.len(), input_shape)?;
        for spec in &layout.weights {
            let w = weights.get(&spec.name).ok_or_else(|| Error::MissingWeight(spec.name.clone()))?;
            if w.tensor.shape() != spec.shape.as_slice() {
                return Err(Error::WeightShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: w.tensor.shape().to_vec(),
                });
            }
        }
        if weights.len() != layout.weights.len() {
            let expected: BTreeSet<&str> = layout.weights.iter().map(|w| w.name.as_str()).collect();
            let extra = weights.keys().find(|k| !expected.contains(k.as_str())).cloned().unwrap_or_default();
            return Err(Error::InvalidArgument(format!("unexpected weight tensor `{extra}` for {}", self.id())));
        }
        ModelGraph::new(self.id(), layout.layers, weights, input_shape, labels)
    }
}

pub fn default_labels(num_classes: usize) -> Vec<String> {
    if num_classes == CACTUS_LABELS.len() {
        CACTUS_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class_{i}")).collect()
    }
}

pub fn build_lightweight_cnn(num_classes: usize, seed: u64) -> Result<ModelGraph> {
    Architecture::CnnLite.build(num_classes, seed)
}

pub fn build_mobilevit_xs(num_classes: usize, seed: u64) -> Result<ModelGraph> {
    Architecture::MobileVitXs.build(num_classes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub layers: Vec<LayerSpec>,
    /// In initialization order.
    pub weights: Vec<WeightSpec>,
}

impl Layout {
    fn conv(
        &mut self,
        into: Option<&mut Vec<LayerSpec>>,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
    ) {
        let weight = format!("{name}.weight");
        let fan_in = spec.kernel_h * spec.kernel_w * (cin / spec.groups);
        self.weights.push(WeightSpec {
            name: weight.clone(),
            shape: spec.weight_shape(cin, cout),
            init: Init::FanIn(fan_in),
        });
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            self.weights.push(WeightSpec { name: b.clone(), shape: vec![cout], init: Init::Zeros });
            b
        });
        let layer = LayerSpec::new(name, LayerKind::Conv { spec, weight, bias });
        match into {
            Some(v) => v.push(layer),
            None => self.layers.push(layer),
        }
    }

    fn act(into: &mut Vec<LayerSpec>, name: &str, a: Activation) {
        into.push(LayerSpec::new(format!("{name}.act"), LayerKind::Activation(a)));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.weights.push(WeightSpec { name: weight.clone(), shape: vec![din, dout], init: Init::FanIn(din) });
        self.weights.push(WeightSpec { name: bias.clone(), shape: vec![dout], init: Init::Zeros });
        self.layers.push(LayerSpec::new(name, LayerKind::Linear { weight, bias: Some(bias) }));
    }
}

/// Each block is conv3x3/s2 -> ReLU -> conv3x3 -> ReLU -> maxpool 2x2.
/// The stride on the block's first conv keeps per-image compute below the
/// hybrid model's; channel widths and parameter count do not depend on it.
fn cnn_lite_layout(num_classes: usize, in_channels: usize) -> Layout {
    let mut l = Layout { layers: Vec::new(), weights: Vec::new() };
    let mut cin = in_channels;
    for (i, cout) in [64, 128, 256].into_iter().enumerate() {
        let b = format!("block{}", i + 1);
        for (j, stride) in [(1, 2), (2, 1)] {
            let name = format!("{b}.conv{j}");
            l.conv(None, &name, cin, cout, ConvSpec::square(3, stride), true);
            Layout::act(&mut l.layers, &name, Activation::Relu);
            cin = cout;
        }
        l.layers
            .push(LayerSpec::new(format!("{b}.pool"), LayerKind::Pool { window: 2, stride: 2, mode: PoolMode::Max }));
    }
    l.layers.push(LayerSpec::new("gap", LayerKind::GlobalAvgPool));
    l.linear("head", cin, num_classes);
    l
}

const MV2_EXPANSION: usize = 4;
const MVIT_HEADS: usize = 4;
const MVIT_PATCH: usize = 2;
const MVIT_MLP_RATIO: usize = 3;

fn inverted_residual(l: &mut Layout, name: &str, cin: usize, cout: usize, stride: usize) {
    let hidden = cin * MV2_EXPANSION;
    let mut body = Vec::new();
    l.conv(Some(&mut body), &format!("{name}.expand"), cin, hidden, ConvSpec::square(1, 1), true);
    Layout::act(&mut body, &format!("{name}.expand"), Activation::Silu);
    l.conv(Some(&mut body), &format!("{name}.dw"), hidden, hidden, ConvSpec::depthwise(3, stride, hidden), true);
    Layout::act(&mut body, &format!("{name}.dw"), Activation::Silu);
    l.conv(Some(&mut body), &format!("{name}.project"), hidden, cout, ConvSpec::square(1, 1), true);
    if stride == 1 && cin == cout {
        l.layers.push(LayerSpec::new(name, LayerKind::Residual(body)));
    } else {
        l.layers.extend(body);
    }
}

fn mobilevit_block(l: &mut Layout, name: &str, channels: usize, dim: usize, depth: usize) -> Result<()> {
    let spec = MobileVitBlockSpec {
        prefix: name.to_string(),
        channels,
        depth,
        mlp_hidden: dim * MVIT_MLP_RATIO,
        attention: AttentionConfig::new(dim, MVIT_HEADS, MVIT_PATCH)?,
        activation: Activation::Silu,
    };
    for (wname, shape) in spec.weight_shapes() {
        let init = if wname.ends_with(".gamma") {
            Init::Ones
        } else if wname.ends_with(".beta") || wname.ends_with(".bias") {
            Init::Zeros
        } else {
            let fan_in = match shape.len() {
                4 => shape[0] * shape[1] * shape[2],
                _ => shape[0],
            };
            Init::FanIn(fan_in)
        };
        l.weights.push(WeightSpec { name: wname, shape, init });
    }
    l.layers.push(LayerSpec::new(name, LayerKind::MobileVitBlock(spec)));
    Ok(())
}

/// Stem, inverted-residual stages and three MobileViT blocks
/// (dims 96/120/144, depths 2/4/3), 1x1 expansion to 384, pooled linear head.
fn mobilevit_xs_layout(num_classes: usize, in_channels: usize) -> Result<Layout> {
    let mut l = Layout { layers: Vec::new(), weights: Vec::new() };
    l.conv(None, "stem", in_channels, 16, ConvSpec::square(3, 2), true);
    Layout::act(&mut l.layers, "stem", Activation::Silu);
    inverted_residual(&mut l, "stage1.0", 16, 32, 1);
    inverted_residual(&mut l, "stage2.0", 32, 48, 2);
    inverted_residual(&mut l, "stage2.1", 48, 48, 1);
    inverted_residual(&mut l, "stage2.2", 48, 48, 1);
    inverted_residual(&mut l, "stage3.0", 48, 64, 2);
    mobilevit_block(&mut l, "stage3.mvit", 64, 96, 2)?;
    inverted_residual(&mut l, "stage4.0", 64, 80, 2);
    mobilevit_block(&mut l, "stage4.mvit", 80, 120, 4)?;
    inverted_residual(&mut l, "stage5.0", 80, 96, 2);
    mobilevit_block(&mut l, "stage5.mvit", 96, 144, 3)?;
    l.conv(None, "head.expand", 96, 384, ConvSpec::square(1, 1), true);
    Layout::act(&mut l.layers, "head.expand", Activation::Silu);
    l.layers.push(LayerSpec::new("gap", LayerKind::GlobalAvgPool));
    l.linear("head.fc", 384, num_classes);
    Ok(l)
}

/// Executable model: layers, weights, input shape and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: String,
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, Weight>,
    input_shape: [usize; 4],
    class_labels: Vec<String>,
}

impl ModelGraph {
    /// Validates weight references, the static shape check and the label count.
    pub fn new(
        arch: impl Into<String>,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, Weight>,
        input_shape: [usize; 4],
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let g = ModelGraph { arch: arch.into(), layers, weights, input_shape, class_labels };
        for layer in &g.layers {
            for name in layer.weight_names() {
                if !g.weights.contains_key(&name) {
                    return Err(Error::MissingWeight(name));
                }
            }
        }
        for (name, w) in &g.weights {
            if w.tensor.dtype() == crate::DType::I8 && w.quant.is_none() {
                return Err(Error::InvalidArgument(format!("i8 tensor `{name}` has no quantization parameters")));
            }
        }
        let shapes = g.infer_shapes()?;
        let out = shapes.last().map(Vec::as_slice).unwrap_or(&input_shape[..]);
        let width = match out {
            [_, c] => *c,
            s => return Err(Error::InvalidShape(format!("final layer must produce [N, classes] logits, got {s:?}"))),
        };
        if width != g.class_labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} class labels for a head of width {width}",
                g.class_labels.len()
            )));
        }
        Ok(g)
    }

    pub(crate) fn with_weights(&self, weights: BTreeMap<String, Weight>) -> Result<Self> {
        ModelGraph::new(self.arch.clone(), self.layers.clone(), weights, self.input_shape, self.class_labels.clone())
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, Weight> {
        &self.weights
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn count_params(&self) -> usize {
        count_params(self)
    }

    /// Bytes of weight payload at the current storage dtypes.
    pub fn weight_bytes(&self) -> usize {
        self.weights.values().map(|w| w.tensor.byte_len()).sum()
    }

    /// Copy with every weight widened/dequantized to f32.
    pub fn dequantized(&self) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for name in self.weights.keys() {
            let t = self.resolve(name)?.into_owned();
            let t = match t.data() {
                TensorData::F32(_) => t,
                _ => Tensor::new(t.shape().to_vec(), t.into_f32_vec()?)?,
            };
            weights.insert(name.clone(), Weight::f32(t));
        }
        self.with_weights(weights)
    }

    /// A weight ready for the kernels: f32/f16 borrowed, i8 dequantized.
    fn resolve(&self, name: &str) -> Result<Cow<'_, Tensor>> {
        let w = self.weights.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        match (&w.tensor.data(), &w.quant) {
            (TensorData::I8(_), Some(qp)) => Ok(Cow::Owned(quant::dequantize(&w.tensor, qp)?)),
            (TensorData::I8(_), None) => {
                Err(Error::InvalidArgument(format!("i8 tensor `{name}` has no quantization parameters")))
            }
            _ => Ok(Cow::Borrowed(&w.tensor)),
        }
    }

    fn weight_shape(&self, name: &str) -> Result<&[usize]> {
        self.weights.get(name).map(|w| w.tensor.shape()).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Output shape after every top-level layer, computed without running it.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = self.layer_shape(layer, &shape).map_err(|e| e.in_layer(i, layer.kind_name()))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn layer_shape(&self, layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
        let op = layer.kind_name();
        match &layer.kind {
            LayerKind::Conv { spec, weight, bias } => {
                let d = Nhwc::from_shape(input, op)?;
                let ws = self.weight_shape(weight)?;
                if ws.len() != 4 || ws[0] != spec.kernel_h || ws[1] != spec.kernel_w || ws[2] * spec.groups != d.c {
                    return Err(Error::shape(
                        op,
                        "weights",
                        format!("weight {ws:?} incompatible with input {input:?}"),
                    ));
                }
                if spec.groups == 0 || ws[3] % spec.groups != 0 {
                    return Err(Error::shape(op, "groups", format!("groups {} vs cout {}", spec.groups, ws[3])));
                }
                if let Some(b) = bias {
                    if self.weight_shape(b)? != [ws[3]] {
                        return Err(Error::shape(op, "bias", format!("bias `{b}` must be [{}]", ws[3])));
                    }
                }
                let (oh, _) = spec.out_extent(d.h, spec.kernel_h)?;
                let (ow, _) = spec.out_extent(d.w, spec.kernel_w)?;
                Ok(vec![d.n, oh, ow, ws[3]])
            }
            LayerKind::Pool { window, stride, .. } => {
                let d = Nhwc::from_shape(input, op)?;
                if *window == 0 || *stride == 0 || *window > d.h || *window > d.w {
                    return Err(Error::shape(op, "spatial", format!("window {window} on {}x{}", d.h, d.w)));
                }
                Ok(vec![d.n, (d.h - window) / stride + 1, (d.w - window) / stride + 1, d.c])
            }
            LayerKind::Activation(_) | LayerKind::Softmax => Ok(input.to_vec()),
            LayerKind::LayerNorm { gamma, beta } => {
                let last = *input.last().unwrap_or(&0);
                if self.weight_shape(gamma)? != [last] || self.weight_shape(beta)? != [last] {
                    return Err(Error::shape(op, "feature", format!("gamma/beta must be [{last}]")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Linear { weight, bias } => {
                let ws = self.weight_shape(weight)?;
                let last = *input.last().unwrap_or(&0);
                if ws.len() != 2 || ws[0] != last {
                    return Err(Error::shape(op, "inner dimension", format!("weight {ws:?} vs input {input:?}")));
                }
                if let Some(b) = bias {
                    if self.weight_shape(b)? != [ws[1]] {
                        return Err(Error::shape(op, "bias", format!("bias `{b}` must be [{}]", ws[1])));
                    }
                }
                let mut s = input.to_vec();
                *s.last_mut().expect("non-empty") = ws[1];
                Ok(s)
            }
            LayerKind::Residual(body) => {
                let mut s = input.to_vec();
                for inner in body {
                    s = self.layer_shape(inner, &s)?;
                }
                if s != input {
                    return Err(Error::shape(op, "residual", format!("body maps {input:?} to {s:?}")));
                }
                Ok(s)
            }
            LayerKind::MobileVitBlock(b) => {
                let d = Nhwc::from_shape(input, op)?;
                if d.c != b.channels {
                    return Err(Error::shape(
                        op,
                        "channels",
                        format!("input has {} channels, block expects {}", d.c, b.channels),
                    ));
                }
                if d.h % b.attention.patch_h != 0 || d.w % b.attention.patch_w != 0 {
                    return Err(Error::shape(
                        op,
                        "spatial",
                        format!("{}x{} not divisible by the patch size; pad or resize the input", d.h, d.w),
                    ));
                }
                for (name, shape) in b.weight_shapes() {
                    let found = self.weight_shape(&name)?;
                    if found != shape.as_slice() {
                        return Err(Error::WeightShape { name, expected: shape, found: found.to_vec() });
                    }
                }
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            LayerKind::GlobalAvgPool => {
                let d = Nhwc::from_shape(input, op)?;
                Ok(vec![d.n, d.c])
            }
        }
    }

    /// Runs the graph on an NHWC batch and returns `[N, classes]` logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, None)
    }

    /// Like [`forward`](Self::forward) but records the shape after every layer.
    pub fn forward_traced(&self, batch: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut trace = Vec::new();
        let out = self.run(batch, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(&self, batch: &Tensor, mut trace: Option<&mut Vec<Vec<usize>>>) -> Result<Tensor> {
        let d = Nhwc::of(batch, "forward")?;
        let [_, h, w, c] = self.input_shape;
        if (d.h, d.w, d.c) != (h, w, c) {
            return Err(Error::shape(
                "forward",
                "input",
                format!("batch {:?} does not match model input [N, {h}, {w}, {c}]", batch.shape()),
            ));
        }
        let mut x = Cow::Borrowed(batch);
        for (i, layer) in self.layers.iter().enumerate() {
            let y = self.apply(layer, &x).map_err(|e| e.in_layer(i, layer.kind_name()))?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(y.shape().to_vec());
            }
            x = Cow::Owned(y);
        }
        Ok(x.into_owned())
    }

    fn apply(&self, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        match &layer.kind {
            LayerKind::Conv { spec, weight, bias } => {
                let w = self.resolve(weight)?;
                let b = bias.as_deref().map(|b| self.resolve(b)).transpose()?;
                ops::conv2d(x, &w, b.as_deref(), spec)
            }
            LayerKind::Pool { window, stride, mode } => ops::pool2d(x, *window, *stride, *mode),
            LayerKind::Activation(a) => ops::apply_activation(x, *a),
            LayerKind::LayerNorm { gamma, beta } => {
                ops::layer_norm(x, &*self.resolve(gamma)?, &*self.resolve(beta)?, LAYER_NORM_EPS)
            }
            LayerKind::Linear { weight, bias } => {
                let w = self.resolve(weight)?;
                let b = bias.as_deref().map(|b| self.resolve(b)).transpose()?;
                ops::linear(x, &w, b.as_deref())
            }
            LayerKind::Residual(body) => {
                let mut y = Cow::Borrowed(x);
                for inner in body {
                    y = Cow::Owned(self.apply(inner, &y)?);
                }
                let mut y = y.into_owned();
                if y.shape() != x.shape() {
                    return Err(Error::shape("residual", "shape", format!("{:?} vs {:?}", y.shape(), x.shape())));
                }
                let xs = x.widened("residual")?;
                for (a, b) in y.as_f32_mut()?.iter_mut().zip(xs.iter()) {
                    *a += b;
                }
                Ok(y)
            }
            LayerKind::MobileVitBlock(b) => self.mobilevit_block(b, x),
            LayerKind::Flatten => {
                let n = x.shape()[0];
                let rest = x.len() / n;
                x.clone().reshape(vec![n, rest])
            }
            LayerKind::GlobalAvgPool => ops::global_avg_pool(x),
            LayerKind::Softmax => ops::softmax(x),
        }
    }

    fn mobilevit_block(&self, b: &MobileVitBlockSpec, x: &Tensor) -> Result<Tensor> {
        let d = Nhwc::of(x, "mobilevit_block")?;
        let r = |s: &str| self.resolve(&b.name(s));
        let conv = |t: &Tensor, w: &str, bias: Option<&str>, spec: ConvSpec| -> Result<Tensor> {
            let w = r(w)?;
            let bias = bias.map(r).transpose()?;
            ops::conv2d(t, &w, bias.as_deref(), &spec)
        };
        let mut local = conv(x, "local.weight", Some("local.bias"), ConvSpec::square(3, 1))?;
        ops::activate_in_place(local.as_f32_mut()?, b.activation);
        let proj = conv(&local, "proj_in.weight", None, ConvSpec::square(1, 1))?;

        let (ph, pw) = (b.attention.patch_h, b.attention.patch_w);
        let mut seq = attention::unfold_patches(&proj, ph, pw)?;
        for l in 0..b.depth {
            let names: Vec<String> = [
                "ln1.gamma",
                "ln1.beta",
                "attn.wq",
                "attn.wk",
                "attn.wv",
                "attn.wo",
                "ln2.gamma",
                "ln2.beta",
                "mlp.fc1.weight",
                "mlp.fc1.bias",
                "mlp.fc2.weight",
                "mlp.fc2.bias",
            ]
            .iter()
            .map(|s| b.layer_name(l, s))
            .collect();
            let t = names.iter().map(|n| self.resolve(n)).collect::<Result<Vec<_>>>()?;
            let w = TransformerWeights {
                ln1_gamma: &t[0],
                ln1_beta: &t[1],
                attn: AttentionWeights { wq: &t[2], wk: &t[3], wv: &t[4], wo: &t[5] },
                ln2_gamma: &t[6],
                ln2_beta: &t[7],
                fc1_w: &t[8],
                fc1_b: &t[9],
                fc2_w: &t[10],
                fc2_b: &t[11],
            };
            seq = attention::transformer_block(&seq, &w, &b.attention, b.activation)?;
        }
        let seq = ops::layer_norm(&seq, &*r("norm.gamma")?, &*r("norm.beta")?, LAYER_NORM_EPS)?;
        let folded = attention::fold_patches(&seq, d.h, d.w, ph, pw)?;
        let mut out = conv(&folded, "proj_out.weight", Some("proj_out.bias"), ConvSpec::square(1, 1))?;
        ops::activate_in_place(out.as_f32_mut()?, b.activation);
        let cat = concat_channels(x, &out)?;
        let mut fused = conv(&cat, "fusion.weight", Some("fusion.bias"), ConvSpec::square(3, 1))?;
        ops::activate_in_place(fused.as_f32_mut()?, b.activation);
        Ok(fused)
    }
}

/// Channel-wise concatenation `[a, b]` of two NHWC tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (Nhwc::of(a, "concat")?, Nhwc::of(b, "concat")?);
    if (da.n, da.h, da.w) != (db.n, db.h, db.w) {
        return Err(Error::shape("concat", "spatial", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (xa, xb) = (a.widened("concat")?, b.widened("concat")?);
    let mut out = Vec::with_capacity(xa.len() + xb.len());
    for (pa, pb) in xa.chunks_exact(da.c).zip(xb.chunks_exact(db.c)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(vec![da.n, da.h, da.w, da.c + db.c], out)
}

/// Total element count over the weight table.
pub fn count_params(model: &ModelGraph) -> usize {
    model.weights.values().map(|w| w.tensor.len()).sum()
}
