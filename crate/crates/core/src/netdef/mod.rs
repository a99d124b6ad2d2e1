//! Architecture descriptors, synapse masks and parameter/FLOP accounting.

pub mod bundled;
mod fnet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::AnchorPrior;
use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Activation, Tensor};

pub use fnet::{from_bytes, load_network, save_network, to_bytes, MAGIC};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
            activation: Activation::Linear,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn dense_params(&self) -> u64 {
        (self.kernel_len() + self.out_channels) as u64
    }
}

/// Detection head: marks the preceding output as an `S×S` grid with `A`
/// anchor slots of `5 + C` raw values each. Anchor priors are optional here;
/// callers may supply their own.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
    pub priors: Vec<AnchorPrior>,
}

impl HeadSpec {
    pub fn channels(&self) -> usize {
        self.anchors * (5 + self.classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool2,
    Pointwise(Activation),
    DetectHead(HeadSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::Pointwise(_) => "pointwise",
            LayerSpec::DetectHead(_) => "detect",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: [usize; 3]) -> std::result::Result<[usize; 3], String> {
        let [c, h, w] = input;
        match self {
            LayerSpec::Conv(conv) => {
                if conv.in_channels == 0 || conv.out_channels == 0 || conv.kernel == 0 || conv.stride == 0 {
                    return Err(format!("conv extents must be positive: {conv:?}"));
                }
                if conv.in_channels != c {
                    return Err(format!("conv expects {} input channels, got shape {input:?}", conv.in_channels));
                }
                let oh = conv_out_extent(h, conv.kernel, conv.stride, conv.pad);
                let ow = conv_out_extent(w, conv.kernel, conv.stride, conv.pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok([conv.out_channels, oh, ow]),
                    _ => Err(format!("conv output extent not positive for input {input:?}")),
                }
            }
            LayerSpec::MaxPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    Err(format!("maxpool2 needs even extents, got {input:?}"))
                } else {
                    Ok([c, h / 2, w / 2])
                }
            }
            LayerSpec::Pointwise(_) => Ok(input),
            LayerSpec::DetectHead(head) => {
                if head.grid == 0 || head.anchors == 0 || head.classes == 0 {
                    return Err(format!("detect head extents must be positive: {head:?}"));
                }
                if !head.priors.is_empty() && head.priors.len() != head.anchors {
                    return Err(format!("detect head declares {} anchors but {} priors", head.anchors, head.priors.len()));
                }
                if c != head.channels() || h != head.grid || w != head.grid {
                    return Err(format!(
                        "detect head expects [{}, {}, {}], got {input:?}",
                        head.channels(),
                        head.grid,
                        head.grid
                    ));
                }
                Ok(input)
            }
        }
    }
}

/// An ordered layer list with a declared input shape. Construction checks that
/// the shape propagates through every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDescriptor {
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
}

impl NetworkDescriptor {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self {
            name: name.into(),
            input_shape,
            layers,
        };
        if input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape {input_shape:?} has a zero extent")));
        }
        for (i, layer) in net.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::DetectHead(_)) && i + 1 != net.layers.len() {
                return Err(Error::layer(i, "detect head must be the last layer"));
            }
        }
        net.shapes_for(input_shape)?;
        Ok(net)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Shapes at every layer boundary for `input`: element `i` is the input of
    /// layer `i`, the last element is the network output.
    pub fn shapes_for(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input);
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(cur).map_err(|m| Error::layer(i, m))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> [usize; 3] {
        *self
            .shapes_for(self.input_shape)
            .expect("validated at construction")
            .last()
            .expect("non-empty")
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvSpec)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            LayerSpec::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn head(&self) -> Option<&HeadSpec> {
        match self.layers.last() {
            Some(LayerSpec::DetectHead(h)) => Some(h),
            _ => None,
        }
    }

    pub fn with_priors(mut self, priors: Vec<AnchorPrior>) -> Result<Self> {
        match self.layers.last_mut() {
            Some(LayerSpec::DetectHead(h)) => {
                if priors.len() != h.anchors {
                    return Err(Error::InvalidArgument(format!(
                        "head has {} anchors, got {} priors",
                        h.anchors,
                        priors.len()
                    )));
                }
                h.priors = priors;
                Ok(self)
            }
            _ => Err(Error::InvalidArgument(format!("network {} has no detect head", self.name))),
        }
    }
}

/// Kernel, bias and optional existence mask of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    kernel: Tensor,
    bias: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl ConvWeights {
    pub fn new(kernel: Tensor, bias: Vec<f32>) -> Self {
        Self { kernel, bias, mask: None }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    /// Mutates kernel values in place; masked synapses are re-zeroed afterwards.
    pub fn update_kernel(&mut self, f: impl FnOnce(&mut [f32])) {
        f(self.kernel.data_mut());
        self.enforce_mask();
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Installs a mask and zeroes every synapse it removes.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.kernel.len() {
            return Err(Error::shape("mask vs kernel", &[mask.len()], self.kernel.shape()));
        }
        for (w, &keep) in self.kernel.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *w = 0.0;
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Number of kernel entries that exist (mask 1, or all if unmasked).
    pub fn live_synapses(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.kernel.len(),
        }
    }

    pub fn density(&self) -> f64 {
        self.live_synapses() as f64 / self.kernel.len() as f64
    }

    fn enforce_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &keep) in self.kernel.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

/// Per-layer weights aligned with a descriptor's layer list (`None` for
/// layers without parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    layers: Vec<Option<ConvWeights>>,
}

impl WeightStore {
    pub fn from_layers(layers: Vec<Option<ConvWeights>>) -> Self {
        Self { layers }
    }

    /// He-normal kernels and zero biases, reproducible from `seed`.
    pub fn init(net: &NetworkDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv(conv) => {
                    let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f32;
                    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
                    let kernel = Tensor::from_fn(conv.kernel_shape().to_vec(), |_| normal.sample(&mut rng));
                    Some(ConvWeights::new(kernel, vec![0.0; conv.out_channels]))
                }
                _ => None,
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Option<ConvWeights>] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&ConvWeights> {
        self.layers.get(index).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut ConvWeights> {
        self.layers.get_mut(index).and_then(Option::as_mut)
    }

    pub fn is_masked(&self) -> bool {
        self.layers.iter().flatten().any(|l| l.mask.is_some())
    }

    /// Checks that every conv layer of `net` has weights of the right shape.
    pub fn validate(&self, net: &NetworkDescriptor) -> Result<()> {
        if self.layers.len() != net.layers().len() {
            return Err(Error::InvalidArgument(format!(
                "weight store has {} layers, descriptor has {}",
                self.layers.len(),
                net.layers().len()
            )));
        }
        for (i, (layer, weights)) in net.layers().iter().zip(&self.layers).enumerate() {
            match (layer, weights) {
                (LayerSpec::Conv(conv), Some(w)) => {
                    if w.kernel.shape() != conv.kernel_shape() {
                        return Err(Error::layer(
                            i,
                            format!("kernel shape {:?}, expected {:?}", w.kernel.shape(), conv.kernel_shape()),
                        ));
                    }
                    if w.bias.len() != conv.out_channels {
                        return Err(Error::layer(
                            i,
                            format!("bias length {}, expected {}", w.bias.len(), conv.out_channels),
                        ));
                    }
                }
                (LayerSpec::Conv(_), None) => return Err(Error::layer(i, "missing weights for conv layer")),
                (_, Some(_)) => return Err(Error::layer(i, "weights given for a layer without parameters")),
                (_, None) => {}
            }
        }
        Ok(())
    }

    pub fn total_synapses(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.kernel.len()).sum()
    }

    pub fn live_synapses(&self) -> usize {
        self.layers.iter().flatten().map(ConvWeights::live_synapses).sum()
    }
}

/// Parameter count: conv kernels plus biases. With a store, only kernel entries
/// whose mask bit is set are counted.
pub fn count_params(net: &NetworkDescriptor, store: Option<&WeightStore>) -> u64 {
    net.conv_layers()
        .map(|(i, conv)| match store.and_then(|s| s.layer(i)) {
            Some(w) => (w.live_synapses() + conv.out_channels) as u64,
            None => conv.dense_params(),
        })
        .sum()
}

/// Per-layer accounting line, as printed by `profile`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LayerProfile {
    pub index: usize,
    pub kind: &'static str,
    pub output_shape: [usize; 3],
    pub params: u64,
    pub flops: u64,
    /// `flops` scaled by the layer's mask density.
    pub effective_flops: f64,
}

/// Per-layer FLOPs at `input`: convs cost `2·kh·kw·C_in·C_out·H_out·W_out`,
/// pooling and standalone pointwise layers one op per output element, the
/// detect head nothing.
pub fn profile_layers(net: &NetworkDescriptor, input: [usize; 3], store: Option<&WeightStore>) -> Result<Vec<LayerProfile>> {
    let shapes = net.shapes_for(input)?;
    Ok(net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let [oc, oh, ow] = shapes[i + 1];
            let out_elems = (oc * oh * ow) as u64;
            let (params, flops, density) = match layer {
                LayerSpec::Conv(conv) => {
                    let w = store.and_then(|s| s.layer(i));
                    let params = match w {
                        Some(w) => (w.live_synapses() + conv.out_channels) as u64,
                        None => conv.dense_params(),
                    };
                    let flops = 2 * (conv.kernel * conv.kernel * conv.in_channels) as u64 * out_elems;
                    (params, flops, w.map_or(1.0, ConvWeights::density))
                }
                LayerSpec::MaxPool2 | LayerSpec::Pointwise(_) => (0, out_elems, 1.0),
                LayerSpec::DetectHead(_) => (0, 0, 1.0),
            };
            LayerProfile {
                index: i,
                kind: layer.kind(),
                output_shape: shapes[i + 1],
                params,
                flops,
                effective_flops: flops as f64 * density,
            }
        })
        .collect())
}

/// Dense-equivalent FLOPs of one forward pass at `input`; masks are ignored.
pub fn count_flops(net: &NetworkDescriptor, input: [usize; 3]) -> Result<u64> {
    Ok(profile_layers(net, input, None)?.iter().map(|l| l.flops).sum())
}

/// FLOPs with each conv layer scaled by its mask density. Reporting only.
pub fn effective_flops(net: &NetworkDescriptor, input: [usize; 3], store: &WeightStore) -> Result<f64> {
    Ok(profile_layers(net, input, Some(store))?.iter().map(|l| l.effective_flops).sum())
}
