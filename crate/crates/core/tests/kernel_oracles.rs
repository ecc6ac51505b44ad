//! Kernel-level oracle equivalence and gradient correctness.
//!
//! Forward convolutions are checked against a naive nested-loop oracle,
//! transposed convolutions against a zero-insertion oracle and an
//! independent bicubic resampler, and every backward against central
//! finite differences.

mod common;

use common::*;
use prn_core::tensorops::{
    bicubic_deconv_init_channels, conv2d_forward, deconv2d_backward, deconv2d_forward,
    deconv_kernel_size, leaky_relu, leaky_relu_backward, ConvSpec, LayerParams, Padding, Tensor,
};
use rand::Rng;

#[test]
fn conv_forward_matches_naive_oracle_on_random_shapes() {
    let mut rng = rng(101);
    let mut worst = 0.0f64;
    for case in 0..120 {
        let n = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=8);
        let c_out = rng.random_range(1..=8);
        let h = rng.random_range(3..=16);
        let w = rng.random_range(3..=16);
        let k = [1usize, 3, 5][rng.random_range(0..3)];
        let d = rng.random_range(1..=3);
        // Keep the dilated kernel inside the padded input.
        if (k - 1) * d + 1 > h.min(w) + (k - 1) * d {
            continue;
        }
        let spec = ConvSpec::same(c_in, c_out, k, d);
        let input = rand_tensor(&mut rng, n, c_in, h, w);
        let params = random_layer(&mut rng, spec);
        let fast = conv2d_forward(&input, &params).unwrap();
        let slow = naive_conv2d(&input, &params);
        assert_eq!(fast.shape(), slow.shape(), "case {case}");
        assert_eq!(fast.shape(), (n, c_out, h, w), "same padding keeps dims");
        let diff = max_abs_diff(fast.data(), slow.data());
        worst = worst.max(diff);
        assert!(diff <= 1e-5, "case {case}: diff {diff}");
        assert!(fast.all_finite());
    }
    println!("conv oracle worst abs diff: {worst:.3e}");
}

#[test]
fn deconv_forward_matches_zero_insertion_oracle() {
    let mut rng = rng(202);
    let mut worst = 0.0f64;
    for case in 0..80 {
        let stride = rng.random_range(2..=4);
        let n = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=6);
        let c_out = rng.random_range(1..=3);
        let h = rng.random_range(2..=9);
        let w = rng.random_range(2..=9);
        let k = rng.random_range(stride..=9);
        let spec = ConvSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel: (k, k),
            dilation: 1,
            stride,
            padding: Padding::none(),
        };
        let input = rand_tensor(&mut rng, n, c_in, h, w);
        let params = random_layer(&mut rng, spec);
        let fast = deconv2d_forward(&input, &params, stride).unwrap();
        let slow = zero_insertion_deconv(&input, &params, stride);
        assert_eq!(fast.shape(), (n, c_out, stride * h, stride * w));
        assert_eq!(fast.shape(), slow.shape());
        let diff = max_abs_diff(fast.data(), slow.data());
        worst = worst.max(diff);
        assert!(diff <= 1e-5, "case {case} (stride {stride}, k {k}): {diff}");
    }
    println!("deconv oracle worst abs diff: {worst:.3e}");
}

#[test]
fn bicubic_deconv_matches_independent_resampler() {
    for scale in 2..=4usize {
        let params = bicubic_deconv_init_channels(scale, 1).unwrap();
        assert_eq!(params.spec.kernel.0, deconv_kernel_size(scale));
        let plane = texture_image(20, 20, scale as u64 * 31);
        let input = plane.to_tensor();
        let up = deconv2d_forward(&input, &params, scale).unwrap();
        let reference = bicubic_ref(&plane, 20 * scale, 20 * scale);
        let production = prn_core::imagepipe::bicubic_resize(&plane, 20 * scale, 20 * scale);
        let m = 3 * scale; // clamp-vs-zero-pad border behavior differs
        let (ow, oh) = (20 * scale, 20 * scale);
        let mut worst_ref = 0.0f64;
        let mut worst_prod = 0.0f64;
        for y in m..oh - m {
            for x in m..ow - m {
                let d1 = (up.at(0, 0, y, x) as f64 - reference.at(y, x) as f64).abs();
                let d2 = (up.at(0, 0, y, x) as f64 - production.at(y, x) as f64).abs();
                worst_ref = worst_ref.max(d1);
                worst_prod = worst_prod.max(d2);
            }
        }
        assert!(
            worst_ref <= 1e-3,
            "scale {scale}: deconv vs direct resampler {worst_ref}"
        );
        assert!(
            worst_prod <= 1e-3,
            "scale {scale}: deconv vs production resampler {worst_prod}"
        );
        println!("bicubic deconv x{scale}: vs oracle {worst_ref:.2e}, vs production {worst_prod:.2e}");
    }
}

#[test]
fn production_bicubic_matches_direct_oracle() {
    let plane = texture_image(30, 22, 77);
    for (ow, oh) in [(10, 8), (60, 44), (45, 13), (90, 66)] {
        let a = prn_core::imagepipe::bicubic_resize(&plane, ow, oh);
        let b = bicubic_ref(&plane, ow, oh);
        let diff = max_abs_diff(a.data(), b.data());
        assert!(diff <= 1e-3, "{ow}x{oh}: {diff}");
    }
}

#[test]
fn conv_is_linear_with_zero_bias() {
    let mut rng = rng(303);
    let spec = ConvSpec::same(3, 4, 3, 1);
    let params = prn_core::tensorops::xavier_init(spec, 9); // zero bias
    let x = rand_tensor(&mut rng, 1, 3, 10, 10);
    let y = rand_tensor(&mut rng, 1, 3, 10, 10);
    let (a, b) = (0.7f32, -1.3f32);
    let mut combo = x.clone();
    for (cv, (&xv, &yv)) in combo
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(y.data().iter()))
    {
        *cv = a * xv + b * yv;
    }
    let lhs = conv2d_forward(&combo, &params).unwrap();
    let cx = conv2d_forward(&x, &params).unwrap();
    let cy = conv2d_forward(&y, &params).unwrap();
    let rhs: Vec<f32> = cx
        .data()
        .iter()
        .zip(cy.data().iter())
        .map(|(&u, &v)| a * u + b * v)
        .collect();
    assert!(max_abs_diff(lhs.data(), &rhs) <= 1e-4);
}

#[test]
fn dilation_impulse_support_spans_effective_kernel() {
    for (k, d) in [(3usize, 1usize), (3, 2), (3, 3), (5, 2), (5, 1)] {
        let extent = (k - 1) * d + 1;
        let size = 4 * extent + 1;
        let mut input = Tensor::zeros(1, 1, size, size);
        *input.at_mut(0, 0, size / 2, size / 2) = 1.0;
        let params = LayerParams::new(
            ConvSpec::same(1, 1, k, d),
            Tensor::filled(1, 1, k, k, 1.0),
            vec![0.0],
        )
        .unwrap();
        let out = conv2d_forward(&input, &params).unwrap();
        let (mut lo_y, mut hi_y) = (usize::MAX, 0);
        let (mut lo_x, mut hi_x) = (usize::MAX, 0);
        for y in 0..size {
            for x in 0..size {
                if out.at(0, 0, y, x) != 0.0 {
                    lo_y = lo_y.min(y);
                    hi_y = hi_y.max(y);
                    lo_x = lo_x.min(x);
                    hi_x = hi_x.max(x);
                }
            }
        }
        assert_eq!(hi_y - lo_y + 1, extent, "k={k} d={d}");
        assert_eq!(hi_x - lo_x + 1, extent, "k={k} d={d}");
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let cases = [
        ConvSpec::same(2, 3, 3, 1),
        ConvSpec::same(1, 4, 5, 1),
        ConvSpec::same(3, 2, 3, 2), // dilated
        ConvSpec::same(2, 2, 1, 1), // shrink-style 1x1
    ];
    for (i, spec) in cases.into_iter().enumerate() {
        let worst = check_conv_gradients(spec, 400 + i as u64, 60);
        assert!(worst <= 1e-3, "case {i}: worst rel err {worst}");
        println!("conv grad case {i}: worst rel err {worst:.2e}");
    }
}

#[test]
fn deconv_gradients_match_finite_differences() {
    for (i, (k, stride)) in [(5usize, 2usize), (7, 3), (9, 4)].into_iter().enumerate() {
        let spec = ConvSpec {
            in_channels: 3,
            out_channels: 1,
            kernel: (k, k),
            dilation: 1,
            stride,
            padding: Padding::none(),
        };
        let worst = check_deconv_gradients(spec, stride, 500 + i as u64, 60);
        assert!(worst <= 1e-3, "k={k} stride={stride}: worst rel err {worst}");
        println!("deconv grad k={k} s={stride}: worst rel err {worst:.2e}");
    }
}

#[test]
fn leaky_relu_gradient_matches_finite_differences() {
    let mut rng = rng(606);
    let input = rand_tensor(&mut rng, 1, 2, 6, 6);
    let input64 = F64Tensor::from_tensor(&input);
    let slope = 0.2f32;
    let out = leaky_relu(&input, slope);
    let g = leaky_relu_backward(&input, &out, slope).unwrap();
    let fwd = |x: &F64Tensor| leaky_f64(x, slope as f64);
    let mut worst = 0.0f64;
    for &i in &sample_indices(&mut rng, input.numel(), 100) {
        // Skip coordinates within eps of the kink; the derivative jump
        // there makes central differences meaningless.
        if input.data()[i].abs() < 2e-3 {
            continue;
        }
        worst = worst.max(rel_err(g.data()[i] as f64, fd_input(&fwd, &input64, i, 1e-3)));
    }
    assert!(worst <= 1e-3, "worst rel err {worst}");
}

#[test]
fn deconv_grad_input_is_the_adjoint_strided_conv() {
    // The input gradient of the transposed convolution must equal an
    // ordinary strided convolution of grad_out with the spatially flipped,
    // channel-transposed kernels.
    let mut rng = rng(707);
    let stride = 3usize;
    let k = 7usize;
    let spec = ConvSpec {
        in_channels: 4,
        out_channels: 2,
        kernel: (k, k),
        dilation: 1,
        stride,
        padding: Padding::none(),
    };
    let input = rand_tensor(&mut rng, 1, 4, 6, 5);
    let params = random_layer(&mut rng, spec);
    let grad_out = rand_tensor(&mut rng, 1, 2, 18, 15);
    let (gi, _, _) = deconv2d_backward(&input, &params, stride, &grad_out).unwrap();

    let delta = (k - stride) / 2;
    let mut flipped = Tensor::zeros(4, 2, k, k);
    for oc in 0..2 {
        for ic in 0..4 {
            for ky in 0..k {
                for kx in 0..k {
                    *flipped.at_mut(ic, oc, k - 1 - ky, k - 1 - kx) =
                        params.weights.at(oc, ic, ky, kx);
                }
            }
        }
    }
    let adjoint_spec = ConvSpec {
        in_channels: 2,
        out_channels: 4,
        kernel: (k, k),
        dilation: 1,
        stride,
        padding: Padding {
            top: delta,
            bottom: k - stride - delta,
            left: delta,
            right: k - stride - delta,
        },
    };
    let adjoint = LayerParams::new(adjoint_spec, flipped, vec![0.0; 4]).unwrap();
    let conv_gi = conv2d_forward(&grad_out, &adjoint).unwrap();
    assert_eq!(conv_gi.shape(), gi.shape());
    assert!(max_abs_diff(conv_gi.data(), gi.data()) <= 1e-5);
}
