//! Declarative construction of small classification networks.
//!
//! Builders produce a [`ModelGraph`] whose flat parameter array is
//! partitioned into disjoint (layer index, parameter kind) groups. The layer
//! index is 1-based and counts trainable layers only; a batch-norm attached
//! to a linear or convolution layer shares that layer's index.

use crate::error::ModelError;
use crate::graph::{Layer, LayerSlots, LossKind, ModelGraph, ParameterStore, Span};
use crate::rng;
use rand::Rng;

/// Parameter kinds used for gradient-norm grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Convolution,
    FullyConnected,
    Bias,
    BatchNormScale,
    BatchNormShift,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Convolution => "convolution",
            ParamKind::FullyConnected => "fully-connected",
            ParamKind::Bias => "bias",
            ParamKind::BatchNormScale => "batchnorm-scale",
            ParamKind::BatchNormShift => "batchnorm-shift",
        }
    }
}

/// One contiguous parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterGroup {
    /// 1-based trainable-layer index.
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

struct Builder {
    layers: Vec<Layer>,
    slots: Vec<LayerSlots>,
    groups: Vec<ParameterGroup>,
    offset: usize,
    layer_index: usize,
    bn_slots: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            layers: Vec::new(),
            slots: Vec::new(),
            groups: Vec::new(),
            offset: 0,
            layer_index: 0,
            bn_slots: Vec::new(),
        }
    }

    fn group(&mut self, kind: ParamKind, len: usize) -> Span {
        let span = Span {
            offset: self.offset,
            len,
        };
        self.groups.push(ParameterGroup {
            layer: self.layer_index,
            kind,
            offset: self.offset,
            len,
        });
        self.offset += len;
        span
    }

    fn linear(&mut self, inputs: usize, outputs: usize) {
        self.layer_index += 1;
        let w = self.group(ParamKind::FullyConnected, inputs * outputs);
        let b = self.group(ParamKind::Bias, outputs);
        self.layers.push(Layer::Linear {
            inputs,
            outputs,
            bias: true,
        });
        self.slots.push(LayerSlots::Linear { w, b: Some(b) });
    }

    fn conv(&mut self, in_channels: usize, out_channels: usize) {
        self.layer_index += 1;
        let w = self.group(ParamKind::Convolution, in_channels * out_channels * 9);
        let b = self.group(ParamKind::Bias, out_channels);
        self.layers.push(Layer::Conv3x3 {
            in_channels,
            out_channels,
        });
        self.slots.push(LayerSlots::Conv { w, b });
    }

    /// Batch-norm attached to the current trainable layer.
    fn batchnorm(&mut self, features: usize) {
        let scale = self.group(ParamKind::BatchNormScale, features);
        let shift = self.group(ParamKind::BatchNormShift, features);
        let slot = self.bn_slots.len();
        self.bn_slots.push(features);
        self.layers.push(Layer::BatchNorm { features });
        self.slots.push(LayerSlots::BatchNorm { scale, shift, slot });
    }

    fn plain(&mut self, layer: Layer) {
        self.layers.push(layer);
        self.slots.push(LayerSlots::None);
    }

    fn finish(self, input_shape: Vec<usize>, output_dim: usize, loss: LossKind) -> ModelGraph {
        let param_count = self.offset;
        let mut group_of = vec![0u32; param_count];
        for (gi, g) in self.groups.iter().enumerate() {
            for slot in &mut group_of[g.offset..g.offset + g.len] {
                *slot = gi as u32;
            }
        }
        ModelGraph {
            layers: self.layers,
            slots: self.slots,
            loss,
            input_shape,
            output_dim,
            groups: self.groups,
            group_of,
            param_count,
            layer_count: self.layer_index,
            bn_slots: self.bn_slots,
        }
    }
}

/// Multilayer perceptron with ReLU activations. An empty `hidden` list gives
/// plain logistic regression. Input of any rank is flattened first.
pub fn build_mlp(
    input_dim: usize,
    hidden: &[usize],
    class_count: usize,
    use_batchnorm: bool,
) -> Result<ModelGraph, ModelError> {
    if input_dim == 0 {
        return Err(ModelError::NonPositiveDim("input_dim"));
    }
    if class_count == 0 {
        return Err(ModelError::NonPositiveDim("class_count"));
    }
    if hidden.contains(&0) {
        return Err(ModelError::NonPositiveDim("hidden"));
    }
    let mut b = Builder::new();
    b.plain(Layer::Flatten);
    let mut width = input_dim;
    for &h in hidden {
        b.linear(width, h);
        if use_batchnorm {
            b.batchnorm(h);
        }
        b.plain(Layer::Relu);
        width = h;
    }
    b.linear(width, class_count);
    Ok(b.finish(vec![input_dim], class_count, LossKind::CrossEntropy))
}

/// Convolutional classifier: one conv(3x3) + batchnorm + ReLU + maxpool block
/// per channel entry, then a fully-connected classifier on the flattened
/// activations. An empty channel list degenerates to a classifier on the
/// flattened input.
pub fn build_small_cnn(
    input_shape: (usize, usize, usize),
    channels: &[usize],
    class_count: usize,
) -> Result<ModelGraph, ModelError> {
    let (c, h, w) = input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(ModelError::NonPositiveDim("input_shape"));
    }
    if class_count == 0 {
        return Err(ModelError::NonPositiveDim("class_count"));
    }
    if channels.contains(&0) {
        return Err(ModelError::NonPositiveDim("channels"));
    }
    let blocks = channels.len();
    let div = 1usize << blocks;
    if !h.is_multiple_of(div) {
        return Err(ModelError::Indivisible { extent: h, blocks });
    }
    if !w.is_multiple_of(div) {
        return Err(ModelError::Indivisible { extent: w, blocks });
    }
    let mut b = Builder::new();
    let (mut ci, mut hh, mut ww) = (c, h, w);
    for &co in channels {
        b.conv(ci, co);
        b.batchnorm(co);
        b.plain(Layer::Relu);
        b.plain(Layer::MaxPool2);
        ci = co;
        hh /= 2;
        ww /= 2;
    }
    b.plain(Layer::Flatten);
    b.linear(ci * hh * ww, class_count);
    Ok(b.finish(vec![c, h, w], class_count, LossKind::CrossEntropy))
}

/// Regression model mapping a fixed scalar input through one linear layer,
/// paired with the squared-error loss. Used by oracle-style tests that need
/// an exactly quadratic objective in the parameters.
pub fn build_linear_regression(
    inputs: usize,
    outputs: usize,
    bias: bool,
) -> Result<ModelGraph, ModelError> {
    if inputs == 0 || outputs == 0 {
        return Err(ModelError::NonPositiveDim("dims"));
    }
    let mut b = Builder::new();
    b.layer_index += 1;
    let w = b.group(ParamKind::FullyConnected, inputs * outputs);
    let bspan = if bias {
        Some(b.group(ParamKind::Bias, outputs))
    } else {
        None
    };
    b.layers.push(Layer::Linear {
        inputs,
        outputs,
        bias,
    });
    b.slots.push(LayerSlots::Linear { w, b: bspan });
    Ok(b.finish(vec![inputs], outputs, LossKind::SquaredError))
}

/// Deterministic parameter initialization: He-uniform fan-in scaling for
/// weight groups, zeros for biases and batch-norm shifts, ones for
/// batch-norm scales. Only weight groups consume randomness, in group order.
pub fn init_params(graph: &ModelGraph, seed: u64) -> ParameterStore {
    let mut values = vec![0.0; graph.param_count()];
    let mut stream = rng::stream(seed, &[rng::fnv1a(b"he-uniform")]);
    for ((layer, slots), _) in graph
        .layers
        .iter()
        .zip(&graph.slots)
        .zip(0..)
    {
        match (layer, slots) {
            (Layer::Linear { inputs, .. }, LayerSlots::Linear { w, .. }) => {
                let limit = (6.0 / *inputs as f64).sqrt();
                for v in &mut values[w.offset..w.offset + w.len] {
                    *v = stream.random_range(-limit..limit);
                }
            }
            (Layer::Conv3x3 { in_channels, .. }, LayerSlots::Conv { w, .. }) => {
                let limit = (6.0 / (*in_channels as f64 * 9.0)).sqrt();
                for v in &mut values[w.offset..w.offset + w.len] {
                    *v = stream.random_range(-limit..limit);
                }
            }
            (Layer::BatchNorm { .. }, LayerSlots::BatchNorm { scale, .. }) => {
                for v in &mut values[scale.offset..scale.offset + scale.len] {
                    *v = 1.0;
                }
            }
            _ => {}
        }
    }
    ParameterStore::new(values)
}
