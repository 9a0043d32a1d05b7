use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotlight_core::model::ModelConfig;
use spotlight_core::tensor::{grad_check_many, Conv2dParams, GradCheckOptions, Tape, Tensor};

/// Direct-sum cross-correlation over an explicitly zero-padded copy of `x`.
fn naive_conv(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    p: Conv2dParams,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * p.padding.0, w + 2 * p.padding.1);
    let mut padded = vec![0.0; c_in * ph * pw];
    for c in 0..c_in {
        for r in 0..h {
            for s in 0..w {
                padded[(c * ph + r + p.padding.0) * pw + s + p.padding.1] = x[(c * h + r) * w + s];
            }
        }
    }
    let eh = (kh - 1) * p.dilation + 1;
    let ew = (kw - 1) * p.dilation + 1;
    let oh = (ph - eh) / p.stride.0 + 1;
    let ow = (pw - ew) / p.stride.1 + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for a in 0..kh {
                        for b in 0..kw {
                            let r = i * p.stride.0 + a * p.dilation;
                            let s = j * p.stride.1 + b * p.dilation;
                            acc += k[((o * c_in + c) * kh + a) * kw + b]
                                * padded[(c * ph + r) * pw + s];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matches_direct_sum_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < 100 {
        let c_in = rng.random_range(1..=3);
        let c_out = rng.random_range(1..=3);
        let (h, w) = (5, 7);
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let p = Conv2dParams {
            dilation: rng.random_range(1..=3),
            stride: (rng.random_range(1..=2), rng.random_range(1..=3)),
            padding: (rng.random_range(0..=2), rng.random_range(0..=2)),
        };
        if (kh - 1) * p.dilation + 1 > h + 2 * p.padding.0
            || (kw - 1) * p.dilation + 1 > w + 2 * p.padding.1
        {
            continue;
        }
        let x = random(&mut rng, c_in * h * w);
        let k = random(&mut rng, c_out * c_in * kh * kw);
        let (want, oh, ow) = naive_conv(&x, (c_in, h, w), &k, (c_out, kh, kw), p);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[c_in, h, w], x).unwrap());
        let kv = tape.constant(Tensor::new(&[c_out, c_in, kh, kw], k).unwrap());
        let y = tape.conv2d(xv, kv, p).unwrap();
        assert_eq!(tape.shape(y), &[c_out, oh, ow], "{p:?}");
        for (got, want) in tape.data(y).iter().zip(&want) {
            assert!((got - want).abs() < 1e-6, "{p:?}: {got} vs {want}");
        }
        checked += 1;
    }
}

#[test]
fn oversized_kernel_is_a_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let p = Conv2dParams {
        dilation: 2,
        ..Conv2dParams::unit()
    };
    assert!(tape.conv2d(x, k, p).is_err());
}

#[test]
fn identity_kernel_keeps_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 4 * 9);
    for d in 1..4 {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[1, 4, 9], x.clone()).unwrap());
        let kv = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let p = Conv2dParams {
            dilation: d,
            ..Conv2dParams::unit()
        };
        let y = tape.conv2d(xv, kv, p).unwrap();
        assert_eq!(tape.data(y), &x[..]);
    }
}

/// Width of the non-zero response to a single interior impulse through a
/// stack of all-ones `1×k` kernels with the given dilations.
fn impulse_support(k: usize, dilations: &[usize]) -> usize {
    let width = 1 + 2 * dilations.iter().map(|d| (k - 1) * d).sum::<usize>() + 8;
    let mut x = vec![0.0; width];
    x[width / 2] = 1.0;
    let mut tape = Tape::new();
    let mut v = tape.constant(Tensor::new(&[1, 1, width], x).unwrap());
    for &d in dilations {
        let kv = tape.constant(Tensor::ones(&[1, 1, 1, k]));
        let p = Conv2dParams {
            dilation: d,
            stride: (1, 1),
            padding: (0, d * (k - 1) / 2),
        };
        v = tape.conv2d(v, kv, p).unwrap();
    }
    let out = tape.data(v);
    let first = out.iter().position(|&a| a != 0.0).unwrap();
    let last = out.iter().rposition(|&a| a != 0.0).unwrap();
    last - first + 1
}

#[test]
fn impulse_support_matches_receptive_field_formula() {
    for (k, dilations) in [
        (3, vec![1, 2, 4]),
        (3, vec![1, 1, 1]),
        (5, vec![1, 3]),
        (3, vec![2, 2, 2, 2]),
    ] {
        let want = 1 + dilations.iter().map(|d| (k - 1) * d).sum::<usize>();
        assert_eq!(impulse_support(k, &dilations), want, "k={k} {dilations:?}");
    }
    assert_eq!(impulse_support(3, &[1, 2, 4]), 15);
}

#[test]
fn model_receptive_field_matches_impulse_response() {
    // one 3×3 layer, then a dilated strided one; all-ones kernels, no BN
    let mut config = ModelConfig::tiny(5, 40, 4, 3);
    config.encoder[1].dilation = 3;
    let (_, cols) = config.receptive_field();
    let (_, out_w) = config.feature_grid().unwrap();
    let width = config.input_width;
    for src in [3usize, 17, 20, 36] {
        let mut x = vec![0.0; 5 * width];
        x[2 * width + src] = 1.0;
        let mut tape = Tape::new();
        let mut v = tape.constant(Tensor::new(&[1, 5, width], x).unwrap());
        for layer in &config.encoder {
            let kv = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
            v = tape.conv2d(v, kv, layer.conv_params()).unwrap();
        }
        let out = tape.data(v);
        for j in 0..out_w {
            let hit = (0..tape.shape(v)[1]).any(|r| out[r * out_w + j] != 0.0);
            assert_eq!(hit, cols.contains(j, src), "source {src}, column {j}");
        }
    }
}

#[test]
fn default_encoder_sees_every_input_column() {
    let config = ModelConfig::standard(5, 400, 10, 4);
    let (_, cols) = config.receptive_field();
    let (_, out_w) = config.feature_grid().unwrap();
    assert_eq!(out_w, 50);
    for c in 0..400 {
        assert!((0..out_w).any(|j| cols.contains(j, c)), "column {c} unseen");
    }
}

fn check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(
        &mut Tape,
        &[spotlight_core::Var],
    ) -> Result<spotlight_core::Var, spotlight_core::TensorError>,
{
    let report = grad_check_many(f, inputs, GradCheckOptions::default()).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape, random(rng, shape.iter().product())).unwrap()
}

/// Random weights for a weighted-sum readout, so every output coordinate
/// gets a distinct upstream gradient.
fn readout(
    tape: &mut Tape,
    y: spotlight_core::Var,
    seed: u64,
) -> Result<spotlight_core::Var, spotlight_core::TensorError> {
    let n = tape.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::new(tape.shape(y), random(&mut rng, n)).unwrap());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn conv_gradients(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&mut rng, &[2, 2, 5, 7]);
        let k = tensor(&mut rng, &[3, 2, 3, 3]);
        let p = Conv2dParams { dilation: 2, stride: (1, 2), padding: (2, 1) };
        let err = check(|t, v| { let y = t.conv2d(v[0], v[1], p)?; readout(t, y, seed) }, &[x, k]);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn matmul_and_bias_gradients(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[4, 2]), tensor(&mut rng, &[2])];
        let err = check(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_bias(y, v[2])?;
            readout(t, y, seed)
        }, &ins);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn smooth_activation_gradients(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&mut rng, &[6]);
        for act in 0..2 {
            let err = check(|t, v| {
                let y = if act == 0 { t.sigmoid(v[0]) } else { t.tanh(v[0]) };
                readout(t, y, seed)
            }, core::slice::from_ref(&x));
            prop_assert!(err < 1e-4, "{}", err);
        }
    }

    #[test]
    fn relu_gradient_away_from_zero(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..8).map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        }).collect();
        let x = Tensor::new(&[8], data).unwrap();
        let report = grad_check_many(|t, v| { let y = t.relu(v[0]); readout(t, y, seed) },
            &[x], GradCheckOptions::default()).unwrap();
        prop_assert!(report.excluded.is_empty());
        prop_assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn softmax_cross_entropy_gradient(seed in 0u64..1_000_000, label in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&mut rng, &[5]);
        let err = check(|t, v| { let p = t.softmax(v[0])?; t.cross_entropy(p, label) }, &[x]);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn embedding_and_sum_gradients(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<u32> = (0..6).map(|_| rng.random_range(0..=4)).collect();
        let ins = [tensor(&mut rng, &[4, 2]), tensor(&mut rng, &[1, 2, 2, 3])];
        let err = check(|t, v| {
            let e = t.embed(v[0], &cells, (1, 2, 3))?;
            let s = t.add_n(&[e, v[1], e])?;
            let s = t.scale(s, 0.5);
            let s = t.sigmoid(s);
            readout(t, s, seed)
        }, &ins);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn batch_norm_gradients(seed in 0u64..1_000_000) {
        use spotlight_core::tensor::NormMode;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [tensor(&mut rng, &[2, 3, 2, 3]), tensor(&mut rng, &[3]), tensor(&mut rng, &[3])];
        let err = check(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train, None)?;
            readout(t, y, seed)
        }, &ins);
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn row_ops_gradients(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [tensor(&mut rng, &[4, 3]), tensor(&mut rng, &[4])];
        let err = check(|t, v| {
            let w = t.scale_rows(v[0], v[1])?;
            let s = t.sum_rows(w)?;
            let q = t.reshape(v[1], &[1, 4])?;
            let c = t.concat(&[s, q])?;
            let z = t.slice_cols(c, 1, 5)?;
            let z = t.tanh(z);
            readout(t, z, seed)
        }, &ins);
        prop_assert!(err < 1e-4, "{}", err);
    }
}
