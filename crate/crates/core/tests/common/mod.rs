#![allow(dead_code)]

use nobias_core::network::{build_classifier, SequentialNet};
use nobias_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// A classifier with random widths over a random 1- or 3-channel input of at
/// least 144 coordinates.
pub fn random_classifier(rng: &mut ChaCha8Rng) -> SequentialNet {
    let channels = if rng.gen_bool(0.5) { 1 } else { 3 };
    let size = if channels == 1 { rng.gen_range(12..=16) } else { rng.gen_range(8..=12) };
    let widths: Vec<usize> = (0..3).map(|_| rng.gen_range(2..=6)).collect();
    let classes = rng.gen_range(2..=4);
    build_classifier(&[channels, size, size], &widths, classes, rng.gen()).unwrap()
}

/// Which ReLU units are active, in forward order.
pub fn relu_pattern(net: &SequentialNet, input: &Tensor) -> Vec<bool> {
    let (_, trace) = net.forward(input, true).unwrap();
    net.layers()
        .iter()
        .zip(&trace.records)
        .filter(|(layer, _)| layer.is_relu())
        .flat_map(|(_, rec)| rec.output.data().iter().map(|&a| a > 0.0).collect::<Vec<_>>())
        .collect()
}

/// True when moving coordinate `i` by `+-step` crosses no ReLU kink.
pub fn kink_free(net: &SequentialNet, input: &Tensor, i: usize, step: f64) -> bool {
    let base = relu_pattern(net, input);
    [step, -step].iter().all(|&d| {
        let mut probe = input.clone();
        probe.data_mut()[i] += d;
        relu_pattern(net, &probe) == base
    })
}

/// Central difference of a scalar function of one tensor coordinate.
pub fn central_difference(x: &Tensor, i: usize, step: f64, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut probe = x.clone();
    probe.data_mut()[i] = x.data()[i] + step;
    let up = f(&probe);
    probe.data_mut()[i] = x.data()[i] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Distinct random coordinates `0..n`, at most `count` of them.
pub fn sample_coordinates(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

use nobias_core::attribution::{
    attribute, finite_difference_gradient, AttributionRequest, FinalizationMode, PropagationRule, Target,
    ThresholdPolicy,
};

/// Worst relative error between the vanilla gradient map and central
/// differences at `count` kink-free coordinates of a random input.
pub fn vanilla_vs_finite_differences(
    net: &SequentialNet,
    target: &Target,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> (f64, usize) {
    let input = uniform(rng, net.input_shape(), -1.0, 1.0);
    let request = AttributionRequest::new(PropagationRule::Vanilla, FinalizationMode::Identity);
    let map = attribute(net, &input, target, &request).unwrap();
    let fd = finite_difference_gradient(net, &input, target, FD_STEP).unwrap();
    let mut coords: Vec<usize> = sample_coordinates(rng, input.len(), input.len())
        .into_iter()
        .filter(|&i| kink_free(net, &input, i, FD_STEP))
        .collect();
    coords.truncate(count);
    let worst = coords.iter().map(|&i| rel_err(map.scores.data()[i], fd.data()[i])).fold(0.0, f64::max);
    (worst, coords.len())
}

pub fn rectified(policy: ThresholdPolicy, finalization: FinalizationMode) -> AttributionRequest {
    AttributionRequest::new(PropagationRule::Rectified { policy }, finalization)
}
