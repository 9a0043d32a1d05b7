use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotlight_core::model::network::{self, BoundParams, DecoderState};
use spotlight_core::model::{self, ModelConfig, ParameterSet, StopReason};
use spotlight_core::pathway::InputImage;
use spotlight_core::tensor::{NormMode, Tape, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_input(config: &ModelConfig, rng: &mut ChaCha8Rng, density: f64) -> InputImage {
    let cells = (0..config.input_height * config.input_width)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..=config.vocab_size as u32)
            } else {
                0
            }
        })
        .collect();
    InputImage {
        height: config.input_height,
        width: config.input_width,
        cells,
    }
}

fn zeroed(config: &ModelConfig) -> ParameterSet {
    let mut p = ParameterSet::init(config, 0).unwrap();
    for t in p.learnable_mut() {
        t.data_mut().fill(0.0);
    }
    p
}

#[test]
fn forget_bias_alone_scales_the_cell() {
    let mut config = ModelConfig::tiny(5, 8, 6, 3);
    config.lstm_hidden = 1;
    let mut params = zeroed(&config);
    params.decoder.bias.data_mut()[1] = 1.0;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let context = tape.constant(Tensor::zeros(&[1, config.feature_channels()]));
    let state = DecoderState {
        hidden: tape.constant(Tensor::zeros(&[1, 1])),
        cell: tape.constant(Tensor::ones(&[1, 1])),
        prev_token: tape.constant(Tensor::zeros(&[1, 3])),
    };
    let (logits, next) =
        network::lstm_step(&mut tape, &config, context, state, &bound.decoder).unwrap();
    let c1 = tape.data(next.cell)[0];
    assert!((c1 - 0.731_058_578_630_004_9).abs() < 1e-12, "{c1}");
    assert!((tape.data(next.hidden)[0] - 0.5 * c1.tanh()).abs() < 1e-12);
    assert_eq!(tape.data(logits), &[0.0, 0.0, 0.0]);
}

#[test]
fn zero_parameters_give_zero_state() {
    let config = ModelConfig::tiny(5, 8, 6, 3);
    let params = zeroed(&config);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let context = tape.constant(Tensor::filled(&[1, 4], 0.7));
    let state = DecoderState::initial(&mut tape, &config);
    let (logits, next) =
        network::lstm_step(&mut tape, &config, context, state, &bound.decoder).unwrap();
    assert!(tape.data(next.hidden).iter().all(|&v| v == 0.0));
    assert!(tape.data(next.cell).iter().all(|&v| v == 0.0));
    assert!(tape.data(logits).iter().all(|&v| v == 0.0));
}

#[test]
fn two_unit_cell_matches_hand_gates() {
    // F = 1 context, K = 2 classes, hidden 2
    let mut config = ModelConfig::tiny(5, 8, 6, 2);
    config.encoder.truncate(1);
    config.encoder[0].filters = 1;
    config.lstm_hidden = 2;
    let mut params = zeroed(&config);
    let wx: Vec<f64> = (0..3 * 8)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0)
        .collect();
    let wh: Vec<f64> = (0..2 * 8)
        .map(|i| ((i * 5 % 9) as f64 - 4.0) / 8.0)
        .collect();
    let b: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 7.0).collect();
    let wo = [0.3, -0.2, 0.5, 0.1];
    params.decoder.w_input.data_mut().copy_from_slice(&wx);
    params.decoder.w_hidden.data_mut().copy_from_slice(&wh);
    params.decoder.bias.data_mut().copy_from_slice(&b);
    params.decoder.w_out.data_mut().copy_from_slice(&wo);
    params
        .decoder
        .b_out
        .data_mut()
        .copy_from_slice(&[0.05, -0.05]);

    let x = [0.8, 0.0, 1.0]; // context, then one-hot of class 1
    let h0 = [0.2, -0.4];
    let c0 = [0.5, -1.0];
    let mut z = b.clone();
    for (j, zj) in z.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *zj += xi * wx[i * 8 + j];
        }
        for (i, hi) in h0.iter().enumerate() {
            *zj += hi * wh[i * 8 + j];
        }
    }
    let mut c1 = [0.0; 2];
    let mut h1 = [0.0; 2];
    for u in 0..2 {
        let (i, f, g, o) = (
            sigmoid(z[u]),
            sigmoid(z[2 + u]),
            z[4 + u].tanh(),
            sigmoid(z[6 + u]),
        );
        c1[u] = f * c0[u] + i * g;
        h1[u] = o * c1[u].tanh();
    }
    let logits = [
        h1[0] * wo[0] + h1[1] * wo[2] + 0.05,
        h1[0] * wo[1] + h1[1] * wo[3] - 0.05,
    ];

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let context = tape.constant(Tensor::matrix(1, 1, &[0.8]).unwrap());
    let state = DecoderState {
        hidden: tape.constant(Tensor::matrix(1, 2, &h0).unwrap()),
        cell: tape.constant(Tensor::matrix(1, 2, &c0).unwrap()),
        prev_token: network::one_hot(&mut tape, 2, 1),
    };
    let (out, next) =
        network::lstm_step(&mut tape, &config, context, state, &bound.decoder).unwrap();
    for (got, want) in tape.data(next.cell).iter().zip(c1) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in tape.data(next.hidden).iter().zip(h1) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in tape.data(out).iter().zip(logits) {
        assert!((got - want).abs() < 1e-12);
    }
}

fn attention_setup(
    f: usize,
    a: usize,
    hidden: usize,
) -> (
    Tape,
    spotlight_core::model::network::BoundAttention,
    Vec<Tensor>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let ts = vec![t(&[f, a]), t(&[hidden, a]), t(&[a]), t(&[a, 1])];
    let mut tape = Tape::new();
    let att = spotlight_core::model::network::BoundAttention {
        w_feature: tape.constant(ts[0].clone()),
        w_hidden: tape.constant(ts[1].clone()),
        bias: tape.constant(ts[2].clone()),
        v: tape.constant(ts[3].clone()),
    };
    (tape, att, ts)
}

#[test]
fn attention_scores_match_hand_formula() {
    let (f, a, hd) = (3, 4, 2);
    let (mut tape, att, ts) = attention_setup(f, a, hd);
    let feats = [0.5, -1.0, 0.25, 2.0, 0.0, -0.5];
    let h = [0.3, -0.7];
    let av = tape.constant(Tensor::matrix(2, f, &feats).unwrap());
    let hv = tape.constant(Tensor::matrix(1, hd, &h).unwrap());
    let scores = network::attention_score(&mut tape, av, hv, &att).unwrap();
    let (wa, wh, bias, v) = (ts[0].data(), ts[1].data(), ts[2].data(), ts[3].data());
    for j in 0..2 {
        let mut s = 0.0;
        for k in 0..a {
            let mut pre = bias[k];
            for c in 0..f {
                pre += feats[j * f + c] * wa[c * a + k];
            }
            for c in 0..hd {
                pre += h[c] * wh[c * a + k];
            }
            s += v[k] * pre.tanh();
        }
        assert!((tape.data(scores)[j] - s).abs() < 1e-12);
    }
}

#[test]
fn zero_projections_give_constant_scores_and_v_scales_linearly() {
    let (f, a, hd) = (3, 4, 2);
    let (mut tape, mut att, ts) = attention_setup(f, a, hd);
    att.w_feature = tape.constant(Tensor::zeros(&[f, a]));
    att.w_hidden = tape.constant(Tensor::zeros(&[hd, a]));
    let av = tape
        .constant(Tensor::matrix(3, f, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0, 9.0, 9.0, 9.0]).unwrap());
    let hv = tape.constant(Tensor::matrix(1, hd, &[5.0, -5.0]).unwrap());
    let scores = network::attention_score(&mut tape, av, hv, &att).unwrap();
    let want: f64 = ts[2]
        .data()
        .iter()
        .zip(ts[3].data())
        .map(|(b, v)| v * b.tanh())
        .sum();
    assert!(tape.data(scores).iter().all(|s| (s - want).abs() < 1e-12));

    let (mut tape, att, ts) = attention_setup(f, a, hd);
    let av = tape
        .constant(Tensor::matrix(3, f, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0, 0.5, 0.5, 0.5]).unwrap());
    let hv = tape.constant(Tensor::matrix(1, hd, &[0.1, 0.2]).unwrap());
    let base = network::attention_score(&mut tape, av, hv, &att).unwrap();
    let base = tape.data(base).to_vec();
    let scaled_v = Tensor::new(&[a, 1], ts[3].data().iter().map(|v| v * -2.5).collect()).unwrap();
    let att2 = spotlight_core::model::network::BoundAttention {
        v: tape.constant(scaled_v),
        ..att
    };
    let scaled = network::attention_score(&mut tape, av, hv, &att2).unwrap();
    for (s, b) in tape.data(scaled).iter().zip(&base) {
        assert!((s - -2.5 * b).abs() < 1e-12);
    }
}

#[test]
fn mask_and_context_examples() {
    let mut tape = Tape::new();
    let scores = tape.constant(Tensor::vector(&[0.0, 3f64.ln()]));
    let p = network::attention_mask(&mut tape, scores).unwrap();
    assert!((tape.data(p)[0] - 0.25).abs() < 1e-12);
    assert!((tape.data(p)[1] - 0.75).abs() < 1e-12);

    let shifted = tape.constant(Tensor::vector(&[1e3, 1e3 + 3f64.ln()]));
    let q = network::attention_mask(&mut tape, shifted).unwrap();
    for (x, y) in tape.data(p).iter().zip(tape.data(q)) {
        assert!((x - y).abs() < 1e-9);
    }

    let rows = [1.0, 2.0, -3.0, 0.5, 4.0, 1.0];
    let a = tape.constant(Tensor::matrix(3, 2, &rows).unwrap());
    let uniform = tape.constant(Tensor::filled(&[3], 1.0 / 3.0));
    let (_, ctx) = network::attention_apply(&mut tape, a, uniform).unwrap();
    assert!((tape.data(ctx)[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((tape.data(ctx)[1] - 7.0 / 6.0).abs() < 1e-12);

    let one_hot = tape.constant(Tensor::vector(&[0.0, 1.0, 0.0]));
    let (weighted, ctx) = network::attention_apply(&mut tape, a, one_hot).unwrap();
    assert_eq!(tape.data(ctx), &[-3.0, 0.5]);
    assert_eq!(tape.data(weighted), &[0.0, 0.0, -3.0, 0.5, 0.0, 0.0]);

    let p3 = tape.constant(Tensor::vector(&[0.2, 0.3, 0.5]));
    let (_, ctx) = network::attention_apply(&mut tape, a, p3).unwrap();
    assert!((tape.data(ctx)[0] - (0.2 - 0.9 + 2.0)).abs() < 1e-12);
    assert!((tape.data(ctx)[1] - (0.4 + 0.15 + 0.5)).abs() < 1e-12);
}

#[test]
fn all_zero_image_encodes_to_zero() {
    let config = ModelConfig::tiny(5, 16, 9, 4);
    let params = ParameterSet::init(&config, 2).unwrap();
    let x = InputImage {
        height: 5,
        width: 16,
        cells: vec![0; 80],
    };
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, false);
        let (a, _) =
            network::encode_features(&mut tape, &config, &params, &bound, &[&x], mode).unwrap();
        assert!(tape.data(a).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn default_encoder_geometry() {
    let config = ModelConfig::standard(5, 400, 30, 4);
    let params = ParameterSet::init(&config, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_input(&config, &mut rng, 0.07);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let (a, _) =
        network::encode_features(&mut tape, &config, &params, &bound, &[&x], NormMode::Eval)
            .unwrap();
    assert_eq!(tape.shape(a), &[1, 64, 5, 50]);
    let sf = network::sample_features(&mut tape, a, 0, &bound.attention).unwrap();
    assert_eq!(tape.shape(sf.a), &[250, 64]);
    assert_eq!(config.locations().unwrap(), 250);
}

#[test]
fn features_change_only_inside_the_receptive_field() {
    let config = ModelConfig::standard(5, 120, 12, 4);
    let params = ParameterSet::init(&config, 4).unwrap();
    let (_, cols) = config.receptive_field();
    let (fh, fw) = config.feature_grid().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_input(&config, &mut rng, 0.1);
    let features = |x: &InputImage| {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, false);
        let (a, _) =
            network::encode_features(&mut tape, &config, &params, &bound, &[x], NormMode::Eval)
                .unwrap();
        tape.data(a).to_vec()
    };
    let before = features(&x);
    for (row, col) in [(0, 0), (2, 37), (4, 119), (3, 64)] {
        let mut y = x.clone();
        y.cells[row * 120 + col] = if x.get(row, col) == 7 { 8 } else { 7 };
        let after = features(&y);
        let spatial = fh * fw;
        for j in 0..fw {
            let changed = (0..before.len()).any(|i| i % spatial % fw == j && before[i] != after[i]);
            if !cols.contains(j, col) {
                assert!(!changed, "cell ({row}, {col}) moved feature column {j}");
            }
        }
        assert!(
            (0..before.len()).any(|i| before[i] != after[i]),
            "perturbation invisible"
        );
    }
}

#[test]
fn one_hot_masks_land_inside_their_receptive_field() {
    use spotlight_core::model::{AttentionMask, MaskProjection};
    for width in [400, 97] {
        let config = ModelConfig::standard(5, width, 10, 4);
        let (rows_rf, cols_rf) = config.receptive_field();
        let (fh, fw) = config.feature_grid().unwrap();
        let projections = [
            MaskProjection::nearest(fh, fw, 5, width),
            MaskProjection::for_model(&config).unwrap(),
        ];
        for i in 0..fh {
            for j in 0..fw {
                let mut mask = AttentionMask {
                    rows: fh,
                    cols: fw,
                    values: vec![0.0; fh * fw],
                };
                mask.values[i * fw + j] = 1.0;
                let nearest = mask.upsample(5, width);
                let best = nearest.iter().cloned().fold(0.0, f64::max);
                let argmax = nearest.iter().position(|&v| v == best).unwrap();
                assert!(cols_rf.contains(j, argmax % width) && rows_rf.contains(i, argmax / width));
                for p in &projections {
                    let heat = p.project(&mask).unwrap();
                    for (cell, &v) in heat.iter().enumerate() {
                        if v > 0.0 {
                            assert!(
                                cols_rf.contains(j, cell % width),
                                "width {width}: ({i}, {j}) lit column {}",
                                cell % width
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn initial_loss_is_near_log_k() {
    let config = ModelConfig::tiny(5, 16, 12, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0.0;
    let n = 40;
    for s in 0..n {
        let params = ParameterSet::init(&config, s).unwrap();
        let x = random_input(&config, &mut rng, 0.2);
        let labels = [rng.random_range(0..4usize), 4];
        total += model::forward_train(&config, &params, &x, &labels, NormMode::Eval)
            .unwrap()
            .loss;
    }
    let mean = total / n as f64;
    assert!((mean - 5f64.ln()).abs() < 0.3, "{mean}");
}

#[test]
fn single_label_is_single_step_classification() {
    let mut config = ModelConfig::tiny(5, 16, 12, 5);
    config.max_len = 1;
    let params = ParameterSet::init(&config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(&config, &mut rng, 0.2);
    let out = model::forward_train(&config, &params, &x, &[2], NormMode::Eval).unwrap();
    assert_eq!(out.distributions.len(), 1);
    assert!((out.loss + out.distributions[0][2].ln()).abs() < 1e-12);
    let pred = model::predict(&config, &params, &x).unwrap();
    assert_eq!(pred.distributions.len(), 1);
}

#[test]
fn end_on_first_step_stops_early() {
    let config = ModelConfig::tiny(5, 16, 12, 5);
    let mut params = ParameterSet::init(&config, 1).unwrap();
    params.decoder.b_out.data_mut()[4] = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&config, &mut rng, 0.2);
    let pred = model::predict(&config, &params, &x).unwrap();
    assert_eq!(pred.distributions.len(), 1);
    assert_eq!(pred.masks.len(), 1);
    assert_eq!(pred.stop, StopReason::End);
    assert_eq!(pred.classes(), vec![4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_are_distributions(seed in 0u64..1_000_000, density in 0.0f64..0.6) {
        let config = ModelConfig::tiny(5, 16, 20, 5);
        let params = ParameterSet::init(&config, seed % 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&config, &mut rng, density);
        let out = model::predict(&config, &params, &x).unwrap();
        prop_assert_eq!(out.distributions.len(), out.masks.len());
        for (d, m) in out.distributions.iter().zip(&out.masks) {
            prop_assert!((m.values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn teacher_forcing_reproduces_free_running(seed in 0u64..1_000_000) {
        let config = ModelConfig::tiny(5, 16, 20, 5);
        let params = ParameterSet::init(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let x = random_input(&config, &mut rng, 0.3);
        let pred = model::predict(&config, &params, &x).unwrap();
        let labels = pred.classes();
        let forced = model::forward_train(&config, &params, &x, &labels, NormMode::Eval).unwrap();
        prop_assert_eq!(&forced.distributions, &pred.distributions);
        prop_assert_eq!(&forced.masks, &pred.masks);
    }

    #[test]
    fn mask_scores_are_shift_invariant(scores in proptest::collection::vec(-30.0f64..30.0, 1..40), shift in -500.0f64..500.0) {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(&scores));
        let shifted: Vec<f64> = scores.iter().map(|v| v + shift).collect();
        let t = tape.constant(Tensor::vector(&shifted));
        let p = network::attention_mask(&mut tape, s).unwrap();
        let q = network::attention_mask(&mut tape, t).unwrap();
        prop_assert!((tape.data(p).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in tape.data(p).iter().zip(tape.data(q)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
