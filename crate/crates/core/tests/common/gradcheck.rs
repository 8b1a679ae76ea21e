//! Central finite-difference checks of every hand-written backward pass.
//! Each check panics on failure and returns the number of random shapes
//! it covered.
//!
//! Each check contracts the output with a fixed random vector to get a
//! scalar, perturbs every input coordinate by `H` in `f64`, and compares with
//! the analytic gradient. The error of a gradient tensor is
//! `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.

use pesto_core::losses::{self, LossConfig, Weighting};
use pesto_core::model::Arch;
use pesto_core::tensor::*;
use pesto_core::trainer::batch_gradients;
use pesto_core::{ModelConfig, Network, TrainBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const H_BATCH: f64 = 1e-5;
pub const CASES: u64 = 24;
const BATCH_CASES: u64 = 8;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn contract(r: &[f64], out: &[f64]) -> f64 {
    r.iter().zip(out).map(|(a, b)| a * b).sum()
}

/// Numerical gradient of `f` at `x`.
fn numeric(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + H;
            let up = f(&xp);
            xp[i] = x[i] - H;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn assert_close(what: &str, analytic: &[f64], numeric: &[f64]) {
    let e = rel_error(analytic, numeric);
    assert!(e < TOL, "{what}: relative error {e:.3e}");
}

pub fn conv1d() -> u64 {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let ks = [1, 3, 5, 7][rng.gen_range(0..4)];
        let bins = rng.gen_range(5..40);
        let conv = Conv1d::new(c_in, c_out, ks, bins).unwrap();
        let x = randn(&mut rng, c_in * bins);
        let w = randn(&mut rng, conv.weight_len());
        let b = randn(&mut rng, c_out);
        let r = randn(&mut rng, c_out * bins);
        let value = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut out = vec![0.0; c_out * bins];
            conv.forward(x, w, b, &mut out);
            contract(&r, &out)
        };
        let (mut gx, mut gw, mut gb) = (vec![0.0; x.len()], vec![0.0; w.len()], vec![0.0; b.len()]);
        conv.backward(&x, &w, &r, Some(&mut gx), &mut gw, &mut gb);
        let tag = format!("conv c_in={c_in} c_out={c_out} k={ks} bins={bins}");
        assert_close(&tag, &gx, &numeric(&x, &|v| value(v, &w, &b)));
        assert_close(&tag, &gw, &numeric(&w, &|v| value(&x, v, &b)));
        assert_close(&tag, &gb, &numeric(&b, &|v| value(&x, &w, v)));
    }
    CASES
}

pub fn layernorm() -> u64 {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(3..50);
        let x: Vec<f64> = randn(&mut rng, n).iter().map(|v| 10.0 * v - 40.0).collect();
        let gain = randn(&mut rng, n);
        let bias = randn(&mut rng, n);
        let r = randn(&mut rng, n);
        let value = |x: &[f64], g: &[f64], b: &[f64]| {
            let mut out = vec![0.0; n];
            layernorm_forward(x, g, b, 1e-5, &mut out);
            contract(&r, &out)
        };
        let mut out = vec![0.0; n];
        let stats = layernorm_forward(&x, &gain, &bias, 1e-5, &mut out);
        let (mut gx, mut gg, mut gb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        layernorm_backward(&x, &gain, stats, &r, Some(&mut gx), &mut gg, &mut gb);
        assert_close("layernorm x", &gx, &numeric(&x, &|v| value(v, &gain, &bias)));
        assert_close("layernorm gain", &gg, &numeric(&gain, &|v| value(&x, v, &bias)));
        assert_close("layernorm bias", &gb, &numeric(&bias, &|v| value(&x, &gain, v)));
    }
    CASES
}

pub fn pointwise_layers() -> u64 {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.gen_range(2..60);
        // Stay clear of the kink at zero.
        let x: Vec<f64> = randn(&mut rng, n)
            .into_iter()
            .map(|v| if v.abs() < 0.01 { 0.5 } else { v })
            .collect();
        let r = randn(&mut rng, n);

        let leaky = |x: &[f64]| {
            let mut out = vec![0.0; n];
            leaky_relu_forward(x, 0.3, &mut out);
            contract(&r, &out)
        };
        let mut g = vec![0.0; n];
        leaky_relu_backward(&x, 0.3, &r, &mut g);
        assert_close("leaky relu", &g, &numeric(&x, &leaky));

        let mask_seed = rng.gen::<u64>();
        let drop = |x: &[f64]| {
            let (mut mask, mut out) = (vec![0.0; n], vec![0.0; n]);
            dropout_forward(x, 0.2, true, &mut ChaCha8Rng::seed_from_u64(mask_seed), &mut mask, &mut out).unwrap();
            contract(&r, &out)
        };
        let (mut mask, mut out) = (vec![0.0; n], vec![0.0; n]);
        dropout_forward(&x, 0.2, true, &mut ChaCha8Rng::seed_from_u64(mask_seed), &mut mask, &mut out).unwrap();
        let mut g = vec![0.0; n];
        dropout_backward(&mask, &r, &mut g);
        assert_close("dropout", &g, &numeric(&x, &drop));

        let soft = |x: &[f64]| {
            let mut out = vec![0.0; n];
            softmax_forward(x, &mut out);
            contract(&r, &out)
        };
        let mut y = vec![0.0; n];
        softmax_forward(&x, &mut y);
        let mut g = vec![0.0; n];
        softmax_backward(&y, &r, &mut g);
        assert_close("softmax", &g, &numeric(&x, &soft));
    }
    CASES
}

pub fn linear_layers() -> u64 {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.gen_range(1..40);
        let m = rng.gen_range(1..40);
        let x = randn(&mut rng, n);
        let r = randn(&mut rng, m);

        let fc = ToeplitzFc::new(n, m).unwrap();
        let a = randn(&mut rng, fc.n_diagonals());
        let value = |x: &[f64], a: &[f64]| {
            let mut out = vec![0.0; m];
            fc.forward(x, a, &mut out);
            contract(&r, &out)
        };
        let (mut gx, mut ga) = (vec![0.0; n], vec![0.0; a.len()]);
        fc.backward(&x, &a, &r, Some(&mut gx), &mut ga);
        let tag = format!("toeplitz n={n} m={m}");
        assert_close(&tag, &gx, &numeric(&x, &|v| value(v, &a)));
        assert_close(&tag, &ga, &numeric(&a, &|v| value(&x, v)));

        let w = randn(&mut rng, m * n);
        let value = |x: &[f64], w: &[f64]| {
            let mut out = vec![0.0; m];
            dense_forward(x, w, m, &mut out);
            contract(&r, &out)
        };
        let (mut gx, mut gw) = (vec![0.0; n], vec![0.0; w.len()]);
        dense_backward(&x, &w, m, &r, Some(&mut gx), &mut gw);
        assert_close("dense x", &gx, &numeric(&x, &|v| value(v, &w)));
        assert_close("dense w", &gw, &numeric(&w, &|v| value(&x, v)));
    }
    CASES
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; logits.len()];
    softmax_forward(logits, &mut y);
    y
}

/// Chain a distribution gradient back to logits.
fn to_logits(y: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    softmax_backward(y, g, &mut out);
    out
}

/// Losses are checked as functions of logits: a step of `H` directly on
/// small probabilities would leave the simplex.
pub fn losses() -> u64 {
    let mut checked_linear_branch = false;
    let mut checked_quadratic_branch = false;
    let mut cases = 0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let d = rng.gen_range(8..40);
        let k = rng.gen_range(-(d as i64) / 3..=(d as i64) / 3);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (y, yk) = (softmax(&a), softmax(&b));
        let mut cfg = LossConfig::default();
        // Alternate thresholds so both Huber branches are exercised.
        cfg.tau = if seed % 2 == 0 { 0.1 } else { 10.0 };
        let e = losses::phi(&yk, cfg.alpha) / losses::phi(&y, cfg.alpha) - cfg.alpha.powi(k as i32);
        if (e.abs() - cfg.tau).abs() < 1e-2 {
            continue;
        }
        cases += 1;
        checked_linear_branch |= e.abs() > cfg.tau;
        checked_quadratic_branch |= e.abs() < cfg.tau;

        let (_, gy, gyk) = losses::loss_equiv_grad(&y, &yk, k, &cfg);
        let num_a = numeric(&a, &|v| losses::loss_equiv(&softmax(v), &yk, k, &cfg));
        let num_b = numeric(&b, &|v| losses::loss_equiv(&y, &softmax(v), k, &cfg));
        assert_close("equiv y", &to_logits(&y, &gy), &num_a);
        assert_close("equiv y_k", &to_logits(&yk, &gyk), &num_b);

        let (_, gy, gyk) = losses::loss_sce_grad(&y, &yk, k, 1e-12);
        let num_a = numeric(&a, &|v| losses::loss_sce(&softmax(v), &yk, k, 1e-12));
        let num_b = numeric(&b, &|v| losses::loss_sce(&y, &softmax(v), k, 1e-12));
        assert_close("sce y", &to_logits(&y, &gy), &num_a);
        assert_close("sce y_k", &to_logits(&yk, &gyk), &num_b);

        let (_, gy, gyt) = losses::loss_inv_grad(&y, &yk, 1e-12);
        let num_a = numeric(&a, &|v| losses::loss_inv(&softmax(v), &yk, 1e-12));
        let num_b = numeric(&b, &|v| losses::loss_inv(&y, &softmax(v), 1e-12));
        assert_close("inv y", &to_logits(&y, &gy), &num_a);
        assert_close("inv y_tilde", &to_logits(&yk, &gyt), &num_b);
    }
    assert!(checked_linear_branch && checked_quadratic_branch);
    cases
}

fn random_model(rng: &mut ChaCha8Rng, toeplitz: bool) -> ModelConfig {
    let n_conv = rng.gen_range(1..5);
    let bins = rng.gen_range(12..30);
    ModelConfig {
        in_bins: bins,
        conv_channels: (0..n_conv).map(|_| rng.gen_range(1..4)).collect(),
        kernel_sizes: (0..n_conv).map(|_| [1, 3, 5][rng.gen_range(0..3)]).collect(),
        residual_layers: rng.gen_range(0..=n_conv),
        out_dim: bins,
        toeplitz,
        ..ModelConfig::default()
    }
}

/// Whole network in training mode. Coordinates whose `+-H` perturbation
/// moves any leaky-ReLU input across zero are skipped, since the central
/// difference is not a derivative there; most coordinates must remain.
pub fn whole_network() -> u64 {
    let (mut checked, mut skipped) = (0usize, 0usize);
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let cfg = random_model(&mut rng, seed % 4 != 3);
        let arch = Arch::new(&cfg).unwrap();
        let store = arch.init_params(seed);
        let mut w: Vec<Vec<f64>> = store.values::<f64>();
        // Zero biases put dropped units exactly on the leaky-ReLU kink.
        for (p, (name, _)) in arch.shapes().iter().enumerate() {
            if name.ends_with("bias") {
                w[p] = randn(&mut rng, w[p].len());
            }
        }
        let x: Vec<f64> = randn(&mut rng, cfg.in_bins).iter().map(|v| 20.0 * v - 50.0).collect();
        let r = randn(&mut rng, cfg.out_dim);
        let drop_seed = rng.gen::<u64>();
        let run = |w: &[Vec<f64>], x: &[f64]| {
            let mut tr = arch.new_trace::<f64>();
            arch.forward(w, x, true, &mut ChaCha8Rng::seed_from_u64(drop_seed), &mut tr)
                .unwrap();
            tr
        };
        let signs = |w: &[Vec<f64>], x: &[f64]| -> Vec<bool> { run(w, x).pre_activations().map(|z| z >= 0.0).collect() };
        let tr = run(&w, &x);
        let mut grads = arch.zero_grads::<f64>();
        let mut gx = vec![0.0; cfg.in_bins];
        arch.backward(&w, &tr, &r, &mut grads, Some(&mut gx));

        // (analytic, numeric) pairs of smooth coordinates, per tensor.
        let mut compare = |name: &str, analytic: &[f64], eval: &dyn Fn(usize, f64) -> (f64, Vec<bool>, Vec<bool>)| {
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for (i, &g) in analytic.iter().enumerate() {
                let (up, s_up, s_down) = eval(i, H);
                let (down, _, _) = eval(i, -H);
                if s_up != s_down {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                a.push(g);
                n.push((up - down) / (2.0 * H));
            }
            assert_close(&format!("network {:?} {:?} res={} toeplitz={} {name}", cfg.conv_channels, cfg.kernel_sizes, cfg.residual_layers, cfg.toeplitz), &a, &n);
        };
        compare("input", &gx, &|i, h| {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            (contract(&r, &run(&w, &xp).probs), signs(&w, &xp), signs(&w, &xm))
        });
        for (p, (name, _)) in arch.shapes().iter().enumerate() {
            compare(name, &grads[p], &|i, h| {
                let mut wp = w.clone();
                wp[p][i] += h;
                let mut wm = w.clone();
                wm[p][i] -= h;
                (contract(&r, &run(&wp, &x).probs), signs(&wp, &x), signs(&wm, &x))
            });
        }
    }
    assert!(skipped * 20 < checked, "too many kink crossings: {skipped} of {}", checked + skipped);
    CASES
}

/// The full objective through all three views, against differences of the
/// reported loss with respect to the stored (f32) parameters. Kinks cannot
/// be masked through this interface, so the step is smaller.
pub fn batch_objective() -> u64 {
    for seed in 0..BATCH_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let cfg = random_model(&mut rng, true);
        let mut net = Network::new(&cfg, seed).unwrap();
        for p in 0..net.params.len() {
            if net.params.iter().nth(p).unwrap().0.ends_with("bias") {
                let len = net.params.at(p).len();
                net.params.at_mut(p).data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            }
        }
        let n = 3;
        let bins = cfg.in_bins;
        let mut row = || -> Vec<f32> { (0..n * bins).map(|_| rng.gen_range(-80.0..0.0)).collect() };
        let batch = TrainBatch {
            x: row(),
            x_aug: row(),
            x_shift_aug: row(),
            k: vec![-2, 0, 3],
            bins,
        };
        let seeds = [11, 12, 13];
        let mut loss = LossConfig::default();
        loss.weighting = Weighting::Fixed;
        loss.lambda_sce = 0.5;
        loss.tau = 100.0;
        let (_, grads) = batch_gradients::<f64>(&net, &loss, &batch, &seeds).unwrap();
        let total = |net: &Network| batch_gradients::<f64>(net, &loss, &batch, &seeds).unwrap().0.total;

        for p in 0..net.params.len() {
            let len = net.params.at(p).len();
            let mut num = vec![0.0; len];
            for j in 0..len {
                let w0 = net.params.at(p).data[j];
                let (up, down) = ((w0 as f64 + H_BATCH) as f32, (w0 as f64 - H_BATCH) as f32);
                let mut np = net.clone();
                np.params.at_mut(p).data[j] = up;
                let fu = total(&np);
                np.params.at_mut(p).data[j] = down;
                let fd = total(&np);
                num[j] = (fu - fd) / (up as f64 - down as f64);
            }
            assert_close(&format!("batch objective param {p}"), &grads[p], &num);
        }
    }
    BATCH_CASES
}
