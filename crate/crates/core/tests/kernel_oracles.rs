mod common;

use common::{central_difference, rel_err, rng, sample_coordinates, uniform, FD_STEP, FD_TOLERANCE};
use nobias_core::kernels::*;
use nobias_core::Tensor;
use rand::Rng;

/// Direct nested-loop cross-correlation with explicit bounds checks.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (i * stride + ki) as isize - pad as isize;
                            let col = (j * stride + kj) as isize - pad as isize;
                            if r < 0 || col < 0 || r >= h as isize || col >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((oc * c + ic) * k + ki) * k + kj]
                                * x.data()[(ic * h + r as usize) * wd + col as usize];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

#[test]
fn conv_forward_matches_naive_oracle() {
    let mut r = rng(11);
    for case in 0..25 {
        let spec = if case == 0 {
            ConvSpec::new(2, 3, 3, 2, 1)
        } else {
            ConvSpec::new(r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..3), r.gen_range(0..2))
        };
        let size = if case == 0 { 5 } else { r.gen_range(spec.kernel_size.max(3)..9) };
        let x = uniform(&mut r, &[spec.in_channels, size, size], -1.0, 1.0);
        let w = uniform(&mut r, &spec.weight_shape(), -1.0, 1.0);
        let b = uniform(&mut r, &[spec.out_channels], -1.0, 1.0);
        let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let slow = naive_conv(&x, &w, &b, spec.stride, spec.padding);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) <= 1e-12, "case {case}: {}", fast.max_abs_diff(&slow));
    }
}

#[test]
fn dense_forward_matches_naive_matvec() {
    let mut r = rng(12);
    let x = uniform(&mut r, &[7], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 7], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let y = dense_forward(&x, &w, &b).unwrap();
    for i in 0..4 {
        let mut acc = b.data()[i];
        for j in 0..7 {
            acc += w.data()[i * 7 + j] * x.data()[j];
        }
        assert!((y.data()[i] - acc).abs() <= 1e-12);
    }
}

fn check_coords(name: &str, analytic: &Tensor, coords: &[usize], fd: impl Fn(usize) -> f64) {
    for &i in coords {
        let (a, n) = (analytic.data()[i], fd(i));
        assert!(rel_err(a, n) <= FD_TOLERANCE, "{name}[{i}]: analytic {a} vs finite difference {n}");
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut r = rng(13);
    let mut checked = 0;
    for _ in 0..4 {
        let spec = ConvSpec::new(r.gen_range(1..4), r.gen_range(2..5), 3, r.gen_range(1..3), 1);
        let x = uniform(&mut r, &[spec.in_channels, 7, 7], -1.0, 1.0);
        let w = uniform(&mut r, &spec.weight_shape(), -1.0, 1.0);
        let b = uniform(&mut r, &[spec.out_channels], -1.0, 1.0);
        let out_shape = conv2d_forward(&x, &w, &b, &spec).unwrap().shape().to_vec();
        let g = uniform(&mut r, &out_shape, -1.0, 1.0);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| conv2d_forward(x, w, b, &spec).unwrap().dot(&g).unwrap();
        let grads = conv2d_backward(&x, &w, &spec, &g).unwrap();
        assert!(grads.input.bit_eq(&conv2d_backward_input(&x, &w, &spec, &g).unwrap()));

        let coords = sample_coordinates(&mut r, x.len(), 40);
        check_coords("conv input", &grads.input, &coords, |i| central_difference(&x, i, FD_STEP, |p| loss(p, &w, &b)));
        checked += coords.len();
        let coords = sample_coordinates(&mut r, w.len(), 40);
        check_coords("conv weights", &grads.weights, &coords, |i| {
            central_difference(&w, i, FD_STEP, |p| loss(&x, p, &b))
        });
        checked += coords.len();
        let coords: Vec<usize> = (0..b.len()).collect();
        check_coords("conv bias", &grads.bias, &coords, |i| central_difference(&b, i, FD_STEP, |p| loss(&x, &w, p)));
        checked += coords.len();
    }
    assert!(checked >= 100);
}

#[test]
fn dense_backward_matches_finite_differences() {
    let mut r = rng(14);
    let mut checked = 0;
    for _ in 0..3 {
        let (m, n) = (r.gen_range(2..8), r.gen_range(5..20));
        let x = uniform(&mut r, &[n], -1.0, 1.0);
        let w = uniform(&mut r, &[m, n], -1.0, 1.0);
        let b = uniform(&mut r, &[m], -1.0, 1.0);
        let g = uniform(&mut r, &[m], -1.0, 1.0);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dense_forward(x, w, b).unwrap().dot(&g).unwrap();
        let grads = dense_backward(&x, &w, &g).unwrap();
        assert!(grads.input.bit_eq(&dense_backward_input(&x, &w, &g).unwrap()));
        let all = |len| (0..len).collect::<Vec<_>>();
        check_coords("dense input", &grads.input, &all(n), |i| central_difference(&x, i, FD_STEP, |p| loss(p, &w, &b)));
        check_coords("dense weights", &grads.weights, &all(m * n), |i| {
            central_difference(&w, i, FD_STEP, |p| loss(&x, p, &b))
        });
        check_coords("dense bias", &grads.bias, &all(m), |i| central_difference(&b, i, FD_STEP, |p| loss(&x, &w, p)));
        checked += n + m * n + m;
    }
    assert!(checked >= 100);
}

#[test]
fn pool_and_relu_backward_match_finite_differences() {
    let mut r = rng(15);
    let x = uniform(&mut r, &[3, 6, 5], -1.0, 1.0);
    let g = uniform(&mut r, &[3], -1.0, 1.0);
    let grad = global_avg_pool_backward(x.shape(), &g).unwrap();
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coords("pool input", &grad, &coords, |i| {
        central_difference(&x, i, FD_STEP, |p| global_avg_pool_forward(p).unwrap().dot(&g).unwrap())
    });

    // Keep inputs away from the kink so that +-step never changes sign.
    let data = (0..120).map(|_| r.gen_range(0.01..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let x = Tensor::new(vec![120], data).unwrap();
    let g = uniform(&mut r, &[120], -1.0, 1.0);
    let grad = relu_backward(&relu_forward(&x), &g).unwrap();
    let coords: Vec<usize> = (0..120).collect();
    check_coords("relu input", &grad, &coords, |i| {
        central_difference(&x, i, FD_STEP, |p| relu_forward(p).dot(&g).unwrap())
    });
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(16);
    let mut checked = 0;
    for _ in 0..25 {
        let k = r.gen_range(2..8);
        let logits = uniform(&mut r, &[k], -4.0, 4.0);
        let label = r.gen_range(0..k);
        let (_, grad) = softmax_cross_entropy(&logits, label).unwrap();
        let coords: Vec<usize> = (0..k).collect();
        check_coords("softmax logits", &grad, &coords, |i| {
            central_difference(&logits, i, FD_STEP, |p| softmax_cross_entropy(p, label).unwrap().0)
        });
        checked += k;
    }
    assert!(checked >= 100);
}
