//! Gradient saliency with selectable ReLU propagation rules.
//!
//! A saliency map is computed in three steps: a recorded forward pass, a
//! backward walk where linear layers use their exact adjoints and ReLU layers
//! apply a [`PropagationRule`], and a [`FinalizationMode`] that either keeps
//! the input gradient as is or multiplies it by the input.
//!
//! | method       | rule                 | finalization    |
//! |--------------|----------------------|-----------------|
//! | `vanilla`    | `1(a > 0)`           | identity        |
//! | `guided`     | `1(a > 0)·1(R > 0)`  | identity        |
//! | `rectgrad`   | `1(a·R > tau)`       | multiply input  |
//! | `nobias`     | `1(a·R > tau)`       | identity        |
//! | `inputxgrad` | `1(a > 0)`           | multiply input  |
//!
//! Any multiply-input method scores exactly zero wherever the network input
//! is zero, whatever the gradient there.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ActivationTrace, Layer, SequentialNet};
use crate::par;
use crate::tensor::Tensor;

/// Quantile used by the default percentile threshold policy.
pub const DEFAULT_PERCENTILE: f64 = 0.9;

/// How the rectified rule picks its per-layer threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Absolute {
        tau: f64,
    },
    /// q-quantile of the layer's activation-gradient products.
    Percentile {
        q: f64,
    },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile { q: DEFAULT_PERCENTILE }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Absolute { tau } if !tau.is_finite() => {
                Err(Error::invalid(format!("threshold must be finite, got {tau}")))
            }
            ThresholdPolicy::Percentile { q } if !(0.0..1.0).contains(&q) => {
                Err(Error::invalid(format!("percentile q must lie in [0, 1), got {q}")))
            }
            _ => Ok(()),
        }
    }
}

/// Quantile with linear interpolation between order statistics.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Resolves the threshold for one ReLU layer from its `a·R` products.
pub fn select_threshold(policy: &ThresholdPolicy, products: &Tensor) -> Result<f64> {
    policy.validate()?;
    match *policy {
        ThresholdPolicy::Absolute { tau } => Ok(tau),
        ThresholdPolicy::Percentile { q } => {
            if products.is_empty() {
                return Err(Error::Empty("percentile threshold over no products".into()));
            }
            Ok(quantile(products.data(), q))
        }
    }
}

/// Gating applied when backpropagating through a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PropagationRule {
    /// Chain rule: pass where the activation is positive.
    Vanilla,
    /// Pass where both the activation and the incoming gradient are positive.
    Guided,
    /// Pass where the activation-gradient product exceeds the threshold.
    Rectified { policy: ThresholdPolicy },
}

impl PropagationRule {
    pub fn name(&self) -> &'static str {
        match self {
            PropagationRule::Vanilla => "vanilla",
            PropagationRule::Guided => "guided",
            PropagationRule::Rectified { .. } => "rectified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalizationMode {
    /// `M_i = x_i · R_0^i`
    MultiplyInput,
    /// `M_i = R_0^i`
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    #[default]
    Mean,
    MeanAbs,
}

impl FromStr for ChannelReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ChannelReduction::Mean),
            "mean_abs" | "mean-abs" => Ok(ChannelReduction::MeanAbs),
            other => Err(Error::invalid(format!("unknown channel reduction {other:?}"))),
        }
    }
}

/// Named saliency methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Guided,
    RectGrad,
    NoBias,
    InputXGrad,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Vanilla, Method::Guided, Method::RectGrad, Method::NoBias, Method::InputXGrad];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Guided => "guided",
            Method::RectGrad => "rectgrad",
            Method::NoBias => "nobias",
            Method::InputXGrad => "inputxgrad",
        }
    }

    /// Propagation rule, using `policy` for the rectified methods.
    pub fn rule(self, policy: ThresholdPolicy) -> PropagationRule {
        match self {
            Method::Vanilla | Method::InputXGrad => PropagationRule::Vanilla,
            Method::Guided => PropagationRule::Guided,
            Method::RectGrad | Method::NoBias => PropagationRule::Rectified { policy },
        }
    }

    pub fn finalization(self) -> FinalizationMode {
        match self {
            Method::RectGrad | Method::InputXGrad => FinalizationMode::MultiplyInput,
            Method::Vanilla | Method::Guided | Method::NoBias => FinalizationMode::Identity,
        }
    }

    pub fn request(self, policy: ThresholdPolicy) -> AttributionRequest {
        AttributionRequest {
            method: Some(self),
            rule: self.rule(policy),
            finalization: self.finalization(),
            reduction: Some(ChannelReduction::Mean),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::invalid(format!("unknown method {s:?} (expected vanilla|guided|rectgrad|nobias|inputxgrad)"))
        })
    }
}

/// A fully specified attribution: rule, finalization and optional channel reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub method: Option<Method>,
    pub rule: PropagationRule,
    pub finalization: FinalizationMode,
    pub reduction: Option<ChannelReduction>,
}

impl AttributionRequest {
    pub fn new(rule: PropagationRule, finalization: FinalizationMode) -> Self {
        AttributionRequest { method: None, rule, finalization, reduction: None }
    }

    pub fn with_reduction(mut self, reduction: Option<ChannelReduction>) -> Self {
        self.reduction = reduction;
        self
    }
}

/// What a saliency map explains: a class logit or an arbitrary output direction.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// Gradient seed at the output, e.g. a concept direction.
    Seed(Tensor),
}

impl Target {
    /// Output-layer gradient of the target score.
    pub fn seed(&self, output: &Tensor) -> Result<Tensor> {
        match self {
            Target::Class(index) => class_score_seed(output, *index),
            Target::Seed(seed) => {
                seed.expect_shape(output.shape(), "target seed")?;
                Ok(seed.clone())
            }
        }
    }

    /// Scalar score: the class logit, or `<output, seed>`.
    pub fn score(&self, output: &Tensor) -> Result<f64> {
        match self {
            Target::Class(index) => {
                class_score_seed(output, *index)?;
                Ok(output.data()[*index])
            }
            Target::Seed(seed) => {
                seed.expect_shape(output.shape(), "target seed")?;
                output.dot(seed)
            }
        }
    }
}

/// One-hot gradient seed selecting the pre-softmax logit of `class_index`.
pub fn class_score_seed(logits: &Tensor, class_index: usize) -> Result<Tensor> {
    if class_index >= logits.len() {
        return Err(Error::invalid(format!("class {class_index} out of range for {} outputs", logits.len())));
    }
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[class_index] = 1.0;
    Ok(seed)
}

/// Applies `rule` at one ReLU, given its recorded output `activation`.
///
/// `tau` is only read by the rectified rule; gating uses a strict `>`.
pub fn relu_backprop_step(rule: &PropagationRule, activation: &Tensor, grad_in: &Tensor, tau: f64) -> Result<Tensor> {
    match rule {
        PropagationRule::Vanilla => activation.zip_map(grad_in, |a, r| if a > 0.0 { r } else { 0.0 }),
        PropagationRule::Guided => activation.zip_map(grad_in, |a, r| if a > 0.0 && r > 0.0 { r } else { 0.0 }),
        PropagationRule::Rectified { .. } => activation.zip_map(grad_in, |a, r| if a * r > tau { r } else { 0.0 }),
    }
}

/// Result of a rule-based backward walk.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop {
    /// Gradient at the input layer.
    pub input_grad: Tensor,
    /// Resolved threshold per ReLU layer, in forward order (rectified rule only).
    pub taus: Vec<f64>,
    /// Gradient arriving at each layer's output, indexed by layer.
    pub layer_grads: Vec<Tensor>,
}

/// Walks `net` backwards from `seed` using the recorded `trace`.
pub fn backpropagate(
    net: &SequentialNet,
    trace: &ActivationTrace,
    seed: &Tensor,
    rule: &PropagationRule,
) -> Result<Backprop> {
    net.check_trace(trace)?;
    seed.expect_shape(net.output_shape(), "seed")?;
    if let PropagationRule::Rectified { policy } = rule {
        policy.validate()?;
    }
    let n = net.layers().len();
    let mut layer_grads = vec![Tensor::zeros(&[1]); n];
    let mut taus = Vec::new();
    let mut g = seed.clone();
    for (i, (layer, rec)) in net.layers().iter().zip(&trace.records).enumerate().rev() {
        layer_grads[i] = g.clone();
        g = match layer {
            Layer::Relu => {
                let tau = match rule {
                    PropagationRule::Rectified { policy } => {
                        let products = rec.output.zip_map(&g, |a, r| a * r)?;
                        let tau = select_threshold(policy, &products)?;
                        taus.push(tau);
                        tau
                    }
                    _ => 0.0,
                };
                relu_backprop_step(rule, &rec.output, &g, tau)?
            }
            other => other.linear_adjoint(rec, &g)?,
        };
    }
    taus.reverse();
    Ok(Backprop { input_grad: g, taus, layer_grads })
}

/// Provenance stored alongside every saliency map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDescriptor {
    pub method: Option<Method>,
    pub rule: String,
    pub threshold_policy: Option<ThresholdPolicy>,
    pub taus: Vec<f64>,
    pub finalization: FinalizationMode,
    pub reduction: Option<ChannelReduction>,
}

impl MethodDescriptor {
    fn from_request(request: &AttributionRequest, taus: Vec<f64>) -> Self {
        let threshold_policy = match request.rule {
            PropagationRule::Rectified { policy } => Some(policy),
            _ => None,
        };
        MethodDescriptor {
            method: request.method,
            rule: request.rule.name().to_string(),
            threshold_policy,
            taus,
            finalization: request.finalization,
            reduction: request.reduction,
        }
    }
}

/// Per-input-feature importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub scores: Tensor,
    pub method: MethodDescriptor,
    /// `H x W` channel reduction of `scores`, when requested.
    pub reduced: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar<'a> {
    shape: Vec<usize>,
    #[serde(flatten)]
    method: std::borrow::Cow<'a, MethodDescriptor>,
}

impl SaliencyMap {
    /// Reduced map if present, otherwise the raw scores.
    pub fn display_scores(&self) -> &Tensor {
        self.reduced.as_ref().unwrap_or(&self.scores)
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let sidecar = Sidecar { shape: self.scores.shape().to_vec(), method: std::borrow::Cow::Borrowed(&self.method) };
        Ok(serde_json::to_string_pretty(&sidecar)?)
    }

    /// Writes scores as NBT1 at `path` and the JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        self.scores.save(path)?;
        std::fs::write(sidecar, self.sidecar_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let scores = Tensor::load(path)?;
        let text = std::fs::read_to_string(sidecar)?;
        let parsed: Sidecar<'static> =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("saliency sidecar: {e}")))?;
        if parsed.shape != scores.shape() {
            return Err(Error::format("sidecar shape does not match the scores tensor"));
        }
        let method = parsed.method.into_owned();
        let reduced = match method.reduction {
            Some(mode) if scores.ndim() == 3 => Some(reduce_channels(&scores, mode)?),
            _ => None,
        };
        Ok(SaliencyMap { scores, method, reduced })
    }
}

/// Turns the input gradient into scores.
pub fn finalize(input_grad: &Tensor, input: &Tensor, mode: FinalizationMode) -> Result<Tensor> {
    input_grad.expect_shape(input.shape(), "finalize")?;
    match mode {
        FinalizationMode::MultiplyInput => input.zip_map(input_grad, |x, r| x * r),
        FinalizationMode::Identity => Ok(input_grad.clone()),
    }
}

/// Averages a `C x H x W` map over channels (or averages absolute values).
pub fn reduce_channels(scores: &Tensor, mode: ChannelReduction) -> Result<Tensor> {
    if scores.ndim() != 3 {
        return Err(Error::shape(format!("channel reduction needs CxHxW, got {:?}", scores.shape())));
    }
    let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let plane = h * w;
    let data = scores.data();
    let out = (0..plane)
        .map(|p| {
            let sum: f64 = (0..c)
                .map(|ch| {
                    let v = data[ch * plane + p];
                    match mode {
                        ChannelReduction::Mean => v,
                        ChannelReduction::MeanAbs => v.abs(),
                    }
                })
                .sum();
            sum / c as f64
        })
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Full pipeline: recorded forward, seed, rule-based backward, finalization, reduction.
pub fn attribute(
    net: &SequentialNet,
    input: &Tensor,
    target: &Target,
    request: &AttributionRequest,
) -> Result<SaliencyMap> {
    let (output, trace) = net.forward(input, true)?;
    let seed = target.seed(&output)?;
    let bp = backpropagate(net, &trace, &seed, &request.rule)?;
    let scores = finalize(&bp.input_grad, input, request.finalization)?;
    let reduced = match request.reduction {
        Some(mode) if scores.ndim() == 3 => Some(reduce_channels(&scores, mode)?),
        _ => None,
    };
    Ok(SaliencyMap { scores, method: MethodDescriptor::from_request(request, bp.taus), reduced })
}

/// Attribution with a named method and threshold policy.
pub fn attribute_method(
    net: &SequentialNet,
    input: &Tensor,
    target: &Target,
    method: Method,
    policy: ThresholdPolicy,
) -> Result<SaliencyMap> {
    attribute(net, input, target, &method.request(policy))
}

/// Plain gradient times input.
pub fn input_times_gradient(net: &SequentialNet, input: &Tensor, target: &Target) -> Result<SaliencyMap> {
    attribute_method(net, input, target, Method::InputXGrad, ThresholdPolicy::default())
}

/// Target score of `input` under `net`.
pub fn target_score(net: &SequentialNet, input: &Tensor, target: &Target) -> Result<f64> {
    let (output, _) = net.forward(input, false)?;
    target.score(&output)
}

/// Central-difference gradient of the target score, one coordinate at a time.
pub fn finite_difference_gradient(net: &SequentialNet, input: &Tensor, target: &Target, step: f64) -> Result<Tensor> {
    if step.is_nan() || step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    input.expect_shape(net.input_shape(), "network input")?;
    target_score(net, input, target)?;
    let values = par::map_range(input.len(), |i| -> Result<f64> {
        let mut probe = input.clone();
        let x = probe.data()[i];
        probe.data_mut()[i] = x + step;
        let up = target_score(net, &probe, target)?;
        probe.data_mut()[i] = x - step;
        let down = target_score(net, &probe, target)?;
        Ok((up - down) / (2.0 * step))
    });
    let data = values.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::new(input.shape().to_vec(), data)
}
