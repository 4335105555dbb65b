//! Gradient checks of every tape primitive and of the tiny classifier
//! against f64 central differences of independent reference kernels.

use are_core::model::{bind_params, forward_tape, init_params, BnMode, Mode, ModelConfig};
use are_core::numerics::GradTape;
use rand::Rng;

use super::*;

pub const TOL: f64 = 1e-3;
const ZERO_GRAD_FLOOR: f64 = 1e-4;

fn abs_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub const INSTANCES: u64 = 20;

fn case_matmul(s: u64) -> f64 {
    let mut r = rng(s);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let a = rand_vec(&mut r, m * k, 1.0);
    let b = rand_vec(&mut r, k * n, 1.0);
    grad_check(
        &[(vec![m, k], a), (vec![k, n], b)],
        s,
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
        &|x| oracle::matmul(&x[0], &x[1], m, k, n),
    )
}

fn case_transpose(s: u64) -> f64 {
    let mut r = rng(s);
    let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
    grad_check(
        &[(vec![m, n], rand_vec(&mut r, m * n, 1.0))],
        s,
        &|t, v| t.transpose(v[0]).unwrap(),
        &|x| oracle::transpose(&x[0], m, n),
    )
}

fn case_add(s: u64) -> f64 {
    let mut r = rng(s);
    let n = r.gen_range(1..12);
    grad_check(
        &[(vec![n], rand_vec(&mut r, n, 1.0)), (vec![n], rand_vec(&mut r, n, 1.0))],
        s,
        &|t, v| t.add(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
    )
}

fn case_sum(s: u64) -> f64 {
    let mut r = rng(s);
    let n = r.gen_range(1..12);
    grad_check(
        &[(vec![n], rand_vec(&mut r, n, 1.0))],
        s,
        &|t, v| t.sum(v[0]).unwrap(),
        &|x| vec![x[0].iter().sum()],
    )
}

fn case_reshape(s: u64) -> f64 {
    let mut r = rng(s);
    let (a, b) = (r.gen_range(1..4), r.gen_range(1..4));
    grad_check(
        &[(vec![a, b], rand_vec(&mut r, a * b, 1.0))],
        s,
        &|t, v| t.reshape(v[0], &[b * a]).unwrap(),
        &|x| x[0].clone(),
    )
}

fn case_mask(s: u64) -> f64 {
    let mut r = rng(s);
    let n = r.gen_range(1..12);
    let m = rand_vec(&mut r, n, 2.0);
    let mf: Vec<f32> = m.iter().map(|&v| v as f32).collect();
    let m64: Vec<f64> = mf.iter().map(|&v| f64::from(v)).collect();
    grad_check(
        &[(vec![n], rand_vec(&mut r, n, 1.0))],
        s,
        &|t, v| t.mask(v[0], mf.clone()).unwrap(),
        &|x| x[0].iter().zip(&m64).map(|(a, b)| a * b).collect(),
    )
}

fn case_relu(s: u64) -> f64 {
    let mut r = rng(s);
    let n = r.gen_range(2..16);
    grad_check(
        &[(vec![n], rand_vec_off_zero(&mut r, n))],
        s,
        &|t, v| t.relu(v[0]).unwrap(),
        &|x| oracle::relu(&x[0]),
    )
}

fn case_elu(s: u64) -> f64 {
    let mut r = rng(s);
    let n = r.gen_range(2..16);
    grad_check(
        &[(vec![n], rand_vec_off_zero(&mut r, n))],
        s,
        &|t, v| t.elu(v[0], 1.0).unwrap(),
        &|x| oracle::elu(&x[0], 1.0),
    )
}

fn case_avg_pool(s: u64) -> f64 {
    let mut r = rng(s);
    let (rows, k, to) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
    let t = k * to;
    grad_check(
        &[(vec![rows, t], rand_vec(&mut r, rows * t, 1.0))],
        s,
        &|tp, v| tp.avg_pool(v[0], k).unwrap(),
        &|x| oracle::avg_pool(&x[0], t, k),
    )
}

fn case_conv_temporal(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, rr, t, f, l) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(4..12), r.gen_range(1..4), r.gen_range(1..6));
    let pad = r.gen_range(0..l);
    grad_check(
        &[(vec![b, rr, t], rand_vec(&mut r, b * rr * t, 1.0)), (vec![f, l], rand_vec(&mut r, f * l, 1.0))],
        s,
        &|tp, v| tp.conv_temporal(v[0], v[1], pad).unwrap(),
        &|x| oracle::conv_temporal(&x[0], &x[1], b, rr, t, f, l, pad),
    )
}

fn case_conv_depthwise(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, m, t, l) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(4..12), r.gen_range(1..6));
    let pad = r.gen_range(0..l);
    grad_check(
        &[(vec![b, m, t], rand_vec(&mut r, b * m * t, 1.0)), (vec![m, l], rand_vec(&mut r, m * l, 1.0))],
        s,
        &|tp, v| tp.conv_depthwise(v[0], v[1], pad).unwrap(),
        &|x| oracle::conv_depthwise(&x[0], &x[1], b, m, t, l, pad),
    )
}

fn case_channel_mix(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, g, cin, d, t) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..3), r.gen_range(1..6));
    grad_check(
        &[
            (vec![b, g, cin, t], rand_vec(&mut r, b * g * cin * t, 1.0)),
            (vec![g * d, cin], rand_vec(&mut r, g * d * cin, 1.0)),
        ],
        s,
        &|tp, v| tp.channel_mix(v[0], v[1], g).unwrap(),
        &|x| oracle::channel_mix(&x[0], &x[1], b, g, cin, d, t),
    )
}

fn case_dense(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, n, k) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..4));
    grad_check(
        &[
            (vec![b, n], rand_vec(&mut r, b * n, 1.0)),
            (vec![k, n], rand_vec(&mut r, k * n, 1.0)),
            (vec![k], rand_vec(&mut r, k, 1.0)),
        ],
        s,
        &|tp, v| tp.dense(v[0], v[1], v[2]).unwrap(),
        &|x| oracle::dense(&x[0], &x[1], &x[2], b, n, k),
    )
}

fn case_batch_norm(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, c, inner) = (r.gen_range(2..4), r.gen_range(1..4), r.gen_range(2..6));
    grad_check(
        &[
            (vec![b, c, inner], rand_vec(&mut r, b * c * inner, 1.0)),
            (vec![c], rand_vec(&mut r, c, 1.5)),
            (vec![c], rand_vec(&mut r, c, 1.0)),
        ],
        s,
        &|tp, v| tp.batch_norm(v[0], v[1], v[2]).unwrap().0,
        &|x| oracle::batch_norm(&x[0], &x[1], &x[2], b, c, inner),
    )
}

fn case_channel_affine(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, c, inner) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6));
    let mean: Vec<f32> = rand_vec(&mut r, c, 1.0).iter().map(|&v| v as f32).collect();
    let var: Vec<f32> = (0..c).map(|_| r.gen_range(0.2f32..2.0)).collect();
    let (m64, v64): (Vec<f64>, Vec<f64>) = (
        mean.iter().map(|&v| f64::from(v)).collect(),
        var.iter().map(|&v| f64::from(v)).collect(),
    );
    grad_check(
        &[
            (vec![b, c, inner], rand_vec(&mut r, b * c * inner, 1.0)),
            (vec![c], rand_vec(&mut r, c, 1.5)),
            (vec![c], rand_vec(&mut r, c, 1.0)),
        ],
        s,
        &|tp, v| tp.channel_affine(v[0], v[1], v[2], &mean, &var).unwrap(),
        &|x| oracle::channel_affine(&x[0], &x[1], &x[2], &m64, &v64, b, c, inner),
    )
}

fn case_softmax_cross_entropy(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, k) = (r.gen_range(1..5), r.gen_range(2..5));
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
    grad_check(
        &[(vec![b, k], rand_vec(&mut r, b * k, 2.0))],
        s,
        &|tp, v| tp.softmax_cross_entropy(v[0], &targets).unwrap(),
        &|x| vec![oracle::softmax_ce(&x[0], k, &targets)],
    )
}

fn case_mean_softmax_nll(s: u64) -> f64 {
    let mut r = rng(s);
    let (b, k, m) = (r.gen_range(1..4), r.gen_range(2..5), r.gen_range(1..4));
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = (0..m).map(|_| (vec![b, k], rand_vec(&mut r, b * k, 2.0))).collect();
    grad_check(
        &inputs,
        s,
        &|tp, v| tp.mean_softmax_nll(v, &targets).unwrap(),
        &|x| vec![oracle::mean_softmax_nll(x, k, &targets)],
    )
}

/// Named primitive checks; each maps an instance seed to its worst relative error.
pub fn primitive_cases() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("matmul", case_matmul),
        ("transpose", case_transpose),
        ("add", case_add),
        ("sum", case_sum),
        ("reshape", case_reshape),
        ("mask", case_mask),
        ("relu", case_relu),
        ("elu", case_elu),
        ("avg_pool", case_avg_pool),
        ("conv_temporal", case_conv_temporal),
        ("conv_depthwise", case_conv_depthwise),
        ("channel_mix", case_channel_mix),
        ("dense", case_dense),
        ("batch_norm", case_batch_norm),
        ("channel_affine", case_channel_affine),
        ("softmax_cross_entropy", case_softmax_cross_entropy),
        ("mean_softmax_nll", case_mean_softmax_nll),
    ]
}

/// Tiny classifier: c = 4, t = 32, K = 2, batch 3.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(4, 32, 2);
    cfg.dropout_rate = 0.0;
    cfg
}

pub fn tiny_model_check(seed: u64, batch_stats: bool) -> f64 {
    let mut cfg = tiny_config();
    if !batch_stats {
        cfg.bn_mode = BnMode::Running;
    }
    let mut params = init_params(&cfg, seed).unwrap();
    let mut r = rng(seed);
    // Non-trivial running statistics and affine terms.
    for i in 0..params.len() {
        let name = ModelParams::names()[i].to_string();
        let t = params.tensor_at_mut(i);
        if name.ends_with("running_var") || name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        }
    }
    let b = 3;
    let x = rand_vec(&mut r, b * 4 * 32, 1.0);
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..2)).collect();

    let mut tape = GradTape::new();
    let vars = bind_params(&mut tape, &params, true);
    let xv = tape.param(tensor(&[b, 4, 32], &x));
    let mode = if batch_stats {
        Mode::Train { dropout_seed: 0 }
    } else {
        Mode::Eval
    };
    let fwd = forward_tape(&mut tape, &params, &cfg, &vars, xv, mode).unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();

    let p64 = model_params_f64(&params);
    let mut inputs = p64.clone();
    inputs.push(x.clone());
    let xi = inputs.len() - 1;
    let f = |xs: &[Vec<f64>]| {
        let logits = model_forward_f64(&cfg, &xs[..xi], &xs[xi], b, batch_stats);
        oracle::softmax_ce(&logits, 2, &targets)
    };
    // The f64 oracle must reproduce the tape's loss before gradients mean anything.
    let l64 = f(&inputs);
    let l32 = f64::from(tape.value(loss).data()[0]);
    assert!((l64 - l32).abs() < 1e-4 * l64.abs().max(1.0), "loss {l32} vs oracle {l64}");

    let mut worst = 0.0f64;
    for i in params.trainable_indices() {
        let g: Vec<f64> = to64(grads.get(vars[i]).unwrap());
        let fd = central_diff(&inputs, i, &f);
        // With batch statistics bn2 normalises bn1's affine terms away, so
        // their exact gradient is zero; compare those against an absolute floor.
        let e = rel_err(&g, &fd).min(abs_err(&g, &fd) / ZERO_GRAD_FLOOR);
        worst = worst.max(e);
    }
    let gx = to64(grads.get(xv).unwrap());
    worst.max(rel_err(&gx, &central_diff(&inputs, xi, &f)))
}

