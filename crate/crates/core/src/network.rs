//! Sequential layer stacks, recorded forward passes and NBC1 checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "NBC1";
const CHECKPOINT_VERSION: u32 = 1;

/// Channel widths of the two encoder convolutions.
pub const ENCODER_WIDTHS: [usize; 2] = [16, 32];

/// Kernel, stride and padding shared by every convolution the builders emit.
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { spec: ConvSpec, weights: Tensor, bias: Tensor },
    Dense { weights: Tensor, bias: Tensor },
    Relu,
    GlobalAvgPool,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, Layer::Relu)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv { spec, weights, bias } => {
                spec.validate()?;
                if input.len() != 3 || input[0] != spec.in_channels {
                    return Err(Error::shape(format!(
                        "conv expects {}xHxW input, previous layer yields {input:?}",
                        spec.in_channels
                    )));
                }
                weights.expect_shape(&spec.weight_shape(), "conv weights")?;
                bias.expect_shape(&[spec.out_channels], "conv bias")?;
                Ok(vec![spec.out_channels, spec.out_extent(input[1])?, spec.out_extent(input[2])?])
            }
            Layer::Dense { weights, bias } => {
                if weights.ndim() != 2 || input != [weights.shape()[1]] {
                    return Err(Error::shape(format!(
                        "dense weights {:?} do not accept input {input:?}",
                        weights.shape()
                    )));
                }
                bias.expect_shape(&[weights.shape()[0]], "dense bias")?;
                Ok(vec![weights.shape()[0]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(Error::shape(format!("pooling expects CxHxW, got {input:?}")));
                }
                Ok(vec![input[0]])
            }
        }
    }

    /// Evaluates this layer on one input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { spec, weights, bias } => kernels::conv2d_forward(input, weights, bias, spec),
            Layer::Dense { weights, bias } => kernels::dense_forward(input, weights, bias),
            Layer::Relu => Ok(kernels::relu_forward(input)),
            Layer::GlobalAvgPool => kernels::global_avg_pool_forward(input),
        }
    }

    /// Exact adjoint of a linear layer with respect to its input.
    ///
    /// ReLU layers are excluded: their propagation rule is chosen by the caller.
    pub fn linear_adjoint(&self, record: &LayerRecord, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { spec, weights, .. } => kernels::conv2d_backward_input(&record.input, weights, spec, grad_out),
            Layer::Dense { weights, .. } => kernels::dense_backward_input(&record.input, weights, grad_out),
            Layer::GlobalAvgPool => kernels::global_avg_pool_backward(record.input.shape(), grad_out),
            Layer::Relu => Err(Error::invalid("ReLU has no rule-independent adjoint")),
        }
    }

    fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }

    fn descriptor(&self) -> LayerDesc {
        match self {
            Layer::Conv { spec, .. } => LayerDesc::Conv { spec: *spec },
            Layer::Dense { weights, .. } => {
                LayerDesc::Dense { inputs: weights.shape()[1], outputs: weights.shape()[0] }
            }
            Layer::Relu => LayerDesc::Relu,
            Layer::GlobalAvgPool => LayerDesc::GlobalAvgPool,
        }
    }
}

/// Input and output of one layer during a recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub input: Tensor,
    pub output: Tensor,
}

/// Per-layer activations of a forward pass, in execution order.
///
/// Empty when the pass was run without recording.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    pub records: Vec<LayerRecord>,
}

impl ActivationTrace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Parameter gradients, one slot per layer (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<(Tensor, Tensor)>>,
}

impl Gradients {
    pub fn zeros_like(net: &SequentialNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| l.params().map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()))))
            .collect();
        Gradients { layers }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient sets cover different layer counts"));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            match (mine, theirs) {
                (Some((w, b)), Some((ow, ob))) => {
                    w.add_assign(ow)?;
                    b.add_assign(ob)?;
                }
                (None, None) => {}
                _ => return Err(Error::shape("gradient sets disagree on parameterized layers")),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.scale(factor);
            b.scale(factor);
        }
    }

    /// All gradient values flattened in layer order (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().flat_map(|(w, b)| w.data().iter().chain(b.data()).copied()).collect()
    }
}

/// Ordered stack of layers with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialNet {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl SequentialNet {
    /// Validates shape composition and builds the net.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::shape(format!("layer {i} ({}): {e}", layer.name())))?;
            if next.contains(&0) {
                return Err(Error::shape(format!("layer {i} collapses to {next:?}")));
            }
            shapes.push(next);
        }
        Ok(SequentialNet { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least one shape")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape entering each layer, followed by the final output shape.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// All parameters flattened in layer order (weights then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }

    pub fn parameters_finite(&self) -> bool {
        self.layers.iter().filter_map(Layer::params).all(|(w, b)| w.is_finite() && b.is_finite())
    }

    /// Overwrites all parameters from a flat vector in [`flat_parameters`](Self::flat_parameters) order.
    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "expected {} parameter values, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.layers.iter_mut().filter_map(Layer::params_mut) {
            for t in [w, b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Runs the net, optionally recording every layer's input and output.
    pub fn forward(&self, input: &Tensor, record: bool) -> Result<(Tensor, ActivationTrace)> {
        input.expect_shape(&self.input_shape, "network input")?;
        let mut trace = ActivationTrace::default();
        let mut current = input.clone();
        for layer in &self.layers {
            let next = layer.forward(&current)?;
            if record {
                trace.records.push(LayerRecord { input: current, output: next.clone() });
            }
            current = next;
        }
        Ok((current, trace))
    }

    /// Checks that `trace` was produced by a recorded forward pass of this net.
    pub fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "trace has {} records for a {}-layer net",
                trace.len(),
                self.layers.len()
            )));
        }
        for (i, rec) in trace.records.iter().enumerate() {
            if rec.input.shape() != self.shapes[i].as_slice() || rec.output.shape() != self.shapes[i + 1].as_slice() {
                return Err(Error::invalid(format!("trace record {i} does not match the net's shapes")));
            }
            if i > 0 && !trace.records[i - 1].output.bit_eq(&rec.input) {
                return Err(Error::invalid(format!("trace record {i} is not chained to record {}", i - 1)));
            }
        }
        Ok(())
    }

    /// Chain-rule backward pass from an output gradient.
    ///
    /// Returns the input gradient together with all parameter gradients.
    pub fn backward(&self, trace: &ActivationTrace, grad_out: &Tensor) -> Result<(Tensor, Gradients)> {
        self.check_trace(trace)?;
        grad_out.expect_shape(self.output_shape(), "output gradient")?;
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, rec)) in self.layers.iter().zip(&trace.records).enumerate().rev() {
            g = match layer {
                Layer::Conv { spec, weights, .. } => {
                    let c = kernels::conv2d_backward(&rec.input, weights, spec, &g)?;
                    grads[i] = Some((c.weights, c.bias));
                    c.input
                }
                Layer::Dense { weights, .. } => {
                    let d = kernels::dense_backward(&rec.input, weights, &g)?;
                    grads[i] = Some((d.weights, d.bias));
                    d.input
                }
                Layer::Relu => kernels::relu_backward(&rec.output, &g)?,
                Layer::GlobalAvgPool => kernels::global_avg_pool_backward(rec.input.shape(), &g)?,
            };
        }
        Ok((g, Gradients { layers: grads }))
    }

    /// Plain SGD step: `p <- p - lr * grad`.
    pub fn apply_sgd(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("gradient layer count does not match the net"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer.params_mut(), g) {
                (Some((w, b)), Some((gw, gb))) => {
                    sgd_step(w, gw, learning_rate)?;
                    sgd_step(b, gb, learning_rate)?;
                }
                (None, None) => {}
                _ => return Err(Error::shape("gradient does not match layer parameters")),
            }
        }
        Ok(())
    }

    /// Serializes the net as an NBC1 checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::descriptor).collect(),
        };
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for (weights, bias) in self.layers.iter().filter_map(Layer::params) {
            weights.write_nbt(&mut w)?;
            bias.write_nbt(&mut w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut magic = String::new();
        r.read_line(&mut magic)?;
        if magic.trim_end_matches('\n') != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {:?}", magic.trim_end())));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(Error::format("truncated checkpoint header"));
        }
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for (i, desc) in header.layers.iter().enumerate() {
            let mut read_param = |expected: &[usize], what: &str| -> Result<Tensor> {
                let t = Tensor::read_nbt(&mut r).map_err(|e| Error::format(format!("layer {i} {what}: {e}")))?;
                if t.shape() != expected {
                    return Err(Error::format(format!(
                        "layer {i} {what}: declared shape {expected:?}, stored {:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            layers.push(match *desc {
                LayerDesc::Conv { spec } => {
                    spec.validate().map_err(|e| Error::format(e.to_string()))?;
                    let weights = read_param(&spec.weight_shape(), "weights")?;
                    let bias = read_param(&[spec.out_channels], "bias")?;
                    Layer::Conv { spec, weights, bias }
                }
                LayerDesc::Dense { inputs, outputs } => {
                    let weights = read_param(&[outputs, inputs], "weights")?;
                    let bias = read_param(&[outputs], "bias")?;
                    Layer::Dense { weights, bias }
                }
                LayerDesc::Relu => Layer::Relu,
                LayerDesc::GlobalAvgPool => Layer::GlobalAvgPool,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        SequentialNet::new(header.input_shape, layers)
            .map_err(|e| Error::format(format!("checkpoint architecture: {e}")))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_checkpoint(bytes)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn digest(&self) -> String {
        crate::sha256_hex(&self.to_checkpoint_bytes())
    }
}

fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    grad.expect_shape(param.shape(), "parameter gradient")?;
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Conv {
        #[serde(flatten)]
        spec: ConvSpec,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    GlobalAvgPool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerDesc>,
}

/// He-style uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn conv_layer(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize) -> Layer {
    let spec = ConvSpec::new(in_channels, out_channels, CONV_KERNEL, CONV_STRIDE, CONV_PADDING);
    let fan_in = in_channels * CONV_KERNEL * CONV_KERNEL;
    Layer::Conv { spec, weights: he_uniform(rng, &spec.weight_shape(), fan_in), bias: Tensor::zeros(&[out_channels]) }
}

fn dense_layer(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense { weights: he_uniform(rng, &[outputs, inputs], inputs), bias: Tensor::zeros(&[outputs]) }
}

fn check_image_shape(input_shape: &[usize]) -> Result<()> {
    if input_shape.len() != 3 || input_shape.contains(&0) {
        return Err(Error::shape(format!("expected a CxHxW input shape, got {input_shape:?}")));
    }
    Ok(())
}

/// Conv→ReLU ×3 (stride 2), global average pool, dense logits.
pub fn build_classifier(
    input_shape: &[usize],
    channel_widths: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<SequentialNet> {
    check_image_shape(input_shape)?;
    if channel_widths.len() != 3 {
        return Err(Error::invalid(format!("classifier needs exactly 3 channel widths, got {}", channel_widths.len())));
    }
    if channel_widths.contains(&0) {
        return Err(Error::invalid("channel widths must be positive"));
    }
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = input_shape[0];
    for &width in channel_widths {
        layers.push(conv_layer(&mut rng, channels, width));
        layers.push(Layer::Relu);
        channels = width;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(dense_layer(&mut rng, channels, num_classes));
    SequentialNet::new(input_shape.to_vec(), layers)
}

/// Conv→ReLU ×2 (stride 2), global average pool, dense latent vector.
pub fn build_encoder(input_shape: &[usize], latent_dim: usize, seed: u64) -> Result<SequentialNet> {
    check_image_shape(input_shape)?;
    if latent_dim == 0 {
        return Err(Error::invalid("latent_dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = input_shape[0];
    for width in ENCODER_WIDTHS {
        layers.push(conv_layer(&mut rng, channels, width));
        layers.push(Layer::Relu);
        channels = width;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(dense_layer(&mut rng, channels, latent_dim));
    SequentialNet::new(input_shape.to_vec(), layers)
}

/// Dense→ReLU→Dense from a latent vector to a flattened image of `output_shape`.
pub fn build_decoder(latent_dim: usize, hidden: usize, output_shape: &[usize], seed: u64) -> Result<SequentialNet> {
    if latent_dim == 0 || hidden == 0 {
        return Err(Error::invalid("decoder dimensions must be >= 1"));
    }
    let out: usize = output_shape.iter().product();
    if out == 0 {
        return Err(Error::shape(format!("invalid decoder output shape {output_shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![dense_layer(&mut rng, latent_dim, hidden), Layer::Relu, dense_layer(&mut rng, hidden, out)];
    SequentialNet::new(vec![latent_dim], layers)
}
