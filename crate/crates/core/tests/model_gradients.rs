//! Analytic gradients against central finite differences, in double precision.

mod common;

use attnsync::model::nn::Mode;
use attnsync::model::{loss_and_grad, Adam, Architecture, ConvBlock, ModelConfig, TrainConfig};
use common::{check, random, randomize_running_stats, tiny_hybrid, Check, MAX_REL};

fn assert_ok(label: &str, c: Check) {
    eprintln!("{label}: max rel err {:.2e} over {} entries, {} re-checked at h/10", c.max_rel, c.checked, c.kinks);
    assert!(c.checked > 0, "{label}: nothing checked");
    assert!(c.max_rel < MAX_REL, "{label}: max rel err {:e} at {}", c.max_rel, c.worst);
}

#[test]
fn full_hybrid_training_mode() {
    let cfg = tiny_hybrid(40, 64);
    let net = cfg.build().unwrap();
    let params = cfg.init_params().unwrap();
    let x = random(8 * 40 * 64, 11, 1.5);
    let y = random(8, 12, 1.0);
    assert_ok("hybrid/train", check(&net, &params, &x, &y, Mode::Train, &[]));
}

#[test]
fn full_hybrid_inference_mode_with_running_stats() {
    let cfg = tiny_hybrid(40, 64);
    let net = cfg.build().unwrap();
    let mut params = cfg.init_params().unwrap();
    randomize_running_stats(&net, &mut params, 5);
    let x = random(4 * 40 * 64, 13, 1.5);
    let y = random(4, 14, 1.0);
    assert_ok("hybrid/infer", check(&net, &params, &x, &y, Mode::Infer, &[]));
}

#[test]
fn each_layer_type_in_isolation() {
    // A small grid exercises uneven pooling and single-step recurrences.
    let cfg = ModelConfig {
        architecture: Architecture::Hybrid {
            conv: vec![ConvBlock { channels: 3, kernel: 5, pool: 3 }],
            lstm_hidden: 5,
            dense: vec![],
        },
        input_rows: 7,
        input_cols: 11,
        seed: 9,
    };
    let net = cfg.build().unwrap();
    let params = cfg.init_params().unwrap();
    let x = random(5 * 7 * 11, 21, 2.0);
    let y = random(5, 22, 1.0);
    for group in [
        &["conv1.weight", "conv1.bias"][..],
        &["bn1.gamma", "bn1.beta"],
        &["lstm.weight_ih", "lstm.weight_hh", "lstm.bias"],
        &["out.weight", "out.bias"],
    ] {
        assert_ok(group[0], check(&net, &params, &x, &y, Mode::Train, group));
        assert_ok(group[0], check(&net, &params, &x, &y, Mode::Infer, group));
    }
}

#[test]
fn mlp_dense_layers() {
    let cfg = ModelConfig {
        architecture: Architecture::Mlp { hidden: vec![6, 5] },
        input_rows: 4,
        input_cols: 64,
        seed: 1,
    };
    let net = cfg.build().unwrap();
    let params = cfg.init_params().unwrap();
    let x = random(6 * 4 * 64, 31, 1.0);
    let y = random(6, 32, 1.0);
    assert_ok("mlp", check(&net, &params, &x, &y, Mode::Train, &[]));
}

#[test]
fn output_bias_gradient_is_mean_residual() {
    let cfg = ModelConfig { architecture: Architecture::Mlp { hidden: vec![] }, input_rows: 2, input_cols: 64, seed: 4 };
    let net = cfg.build().unwrap();
    let params = cfg.init_params().unwrap();
    let x = random(5 * 128, 41, 1.0);
    let y = random(5, 42, 1.0);
    let (_, grad, _) = loss_and_grad(&net, &params, &x, &y, Mode::Infer).unwrap();
    let pass = net.forward(&params, &x, 5, Mode::Infer);
    let expect: f64 = pass.output().iter().zip(&y).map(|(p, t)| 2.0 * (p - t)).sum::<f64>() / 5.0;
    let b = net.layout.get("out.bias").unwrap();
    assert!((grad[b.offset] - expect).abs() < 1e-15);
}

#[test]
fn gradient_vanishes_at_a_perfect_fit_in_inference_mode() {
    let cfg = tiny_hybrid(40, 64);
    let net = cfg.build().unwrap();
    let params = cfg.init_params().unwrap();
    let x = random(3 * 40 * 64, 51, 1.0);
    let y = net.forward(&params, &x, 3, Mode::Infer).into_output();
    let (loss, grad, _) = loss_and_grad(&net, &params, &x, &y, Mode::Infer).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn adam_step_matches_hand_computation() {
    // f(a, b) = (a - 1)^2 + 2 (b + 2)^2 from (0, 0); lr 0.1. Expected values
    // worked out with exact rational arithmetic for two steps.
    let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
    let mut adam = Adam::new(&cfg, vec![true, true]);
    let mut p = [0.0f64, 0.0];
    let grad = |p: &[f64; 2]| [2.0 * (p[0] - 1.0), 4.0 * (p[1] + 2.0)];
    let g = grad(&p);
    adam.step(&mut p, &g);
    assert!((p[0] - 0.099_999_999_500_000_002_5).abs() < 1e-12, "{}", p[0]);
    assert!((p[1] + 0.099_999_999_875_000_000_16).abs() < 1e-12, "{}", p[1]);
    let g = grad(&p);
    adam.step(&mut p, &g);
    assert!((p[0] - 0.199_587_771_308_207_854_8).abs() < 1e-12, "{}", p[0]);
    assert!((p[1] + 0.199_833_514_136_995_419_4).abs() < 1e-12, "{}", p[1]);
}

#[test]
fn adam_skips_frozen_entries() {
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(&cfg, vec![true, false]);
    let mut p = [1.0f64, 1.0];
    adam.step(&mut p, &[0.5f64, 0.5]);
    assert!(p[0] < 1.0);
    assert_eq!(p[1], 1.0);
}
