//! Shared helpers for the integration tests: f64 reference implementations of
//! the tape primitives and of the classifier, central-difference gradient
//! checks, and small synthetic fixtures.
#![allow(dead_code)]

use are_core::data::{Trial, TrialSet};
use are_core::model::{ModelConfig, ModelParams};
use are_core::numerics::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

/// Values bounded away from zero, for piecewise primitives.
pub fn rand_vec_off_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..1.5);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Reference kernels over flat row-major buffers.
pub mod oracle {
    use super::BN_EPS;

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v.max(0.0)).collect()
    }

    pub fn elu(x: &[f64], alpha: f64) -> Vec<f64> {
        x.iter().map(|&v| if v > 0.0 { v } else { alpha * v.exp_m1() }).collect()
    }

    pub fn avg_pool(x: &[f64], t: usize, k: usize) -> Vec<f64> {
        let rows = x.len() / t;
        let to = t / k;
        let mut out = vec![0.0; rows * to];
        for r in 0..rows {
            for j in 0..to {
                out[r * to + j] = (0..k).map(|i| x[r * t + j * k + i]).sum::<f64>() / k as f64;
            }
        }
        out
    }

    fn conv_row(x: &[f64], w: &[f64], pad: usize) -> Vec<f64> {
        let t = x.len();
        (0..t)
            .map(|tau| {
                w.iter()
                    .enumerate()
                    .map(|(k, &wk)| {
                        let src = tau as isize + k as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            wk * x[src as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// `(b, r, t) ⊛ (f, l) → (b, f, r, t)`.
    pub fn conv_temporal(x: &[f64], w: &[f64], b: usize, r: usize, t: usize, f: usize, l: usize, pad: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * f * r * t);
        for bi in 0..b {
            for fi in 0..f {
                for ri in 0..r {
                    let s = (bi * r + ri) * t;
                    out.extend(conv_row(&x[s..s + t], &w[fi * l..(fi + 1) * l], pad));
                }
            }
        }
        out
    }

    /// `(b, m, t) ⊛ (m, l) → (b, m, t)`.
    pub fn conv_depthwise(x: &[f64], w: &[f64], b: usize, m: usize, t: usize, l: usize, pad: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * m * t);
        for bi in 0..b {
            for mi in 0..m {
                let s = (bi * m + mi) * t;
                out.extend(conv_row(&x[s..s + t], &w[mi * l..(mi + 1) * l], pad));
            }
        }
        out
    }

    /// `x` as `(b, groups, cin, t)`, `w` as `(groups · d, cin)`.
    pub fn channel_mix(x: &[f64], w: &[f64], b: usize, groups: usize, cin: usize, d: usize, t: usize) -> Vec<f64> {
        let rows = groups * d;
        let mut out = vec![0.0; b * rows * t];
        for bi in 0..b {
            for g in 0..groups {
                for j in 0..d {
                    let o = g * d + j;
                    for ci in 0..cin {
                        for k in 0..t {
                            out[(bi * rows + o) * t + k] += w[o * cin + ci] * x[((bi * groups + g) * cin + ci) * t + k];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn batch_norm(x: &[f64], gamma: &[f64], beta: &[f64], b: usize, c: usize, inner: usize) -> Vec<f64> {
        let n = (b * inner) as f64;
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let idx = |bi: usize, k: usize| (bi * c + ch) * inner + k;
            let mut mu = 0.0;
            for bi in 0..b {
                for k in 0..inner {
                    mu += x[idx(bi, k)];
                }
            }
            mu /= n;
            let mut var = 0.0;
            for bi in 0..b {
                for k in 0..inner {
                    var += (x[idx(bi, k)] - mu).powi(2);
                }
            }
            var /= n;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            for bi in 0..b {
                for k in 0..inner {
                    out[idx(bi, k)] = gamma[ch] * (x[idx(bi, k)] - mu) * istd + beta[ch];
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn channel_affine(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        mean: &[f64],
        var: &[f64],
        b: usize,
        c: usize,
        inner: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
                for k in 0..inner {
                    let i = (bi * c + ch) * inner + k;
                    out[i] = gamma[ch] * (x[i] - mean[ch]) * istd + beta[ch];
                }
            }
        }
        out
    }

    pub fn dense(x: &[f64], w: &[f64], bias: &[f64], b: usize, n: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            for ki in 0..k {
                out[bi * k + ki] = bias[ki] + (0..n).map(|j| x[bi * n + j] * w[ki * n + j]).sum::<f64>();
            }
        }
        out
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn softmax_ce(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
        let b = targets.len();
        targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -softmax(&logits[i * k..(i + 1) * k])[y].ln())
            .sum::<f64>()
            / b as f64
    }

    pub fn mean_softmax_nll(members: &[Vec<f64>], k: usize, targets: &[usize]) -> f64 {
        let b = targets.len();
        targets
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let q = members
                    .iter()
                    .map(|l| softmax(&l[i * k..(i + 1) * k])[y])
                    .sum::<f64>()
                    / members.len() as f64;
                -q.ln()
            })
            .sum::<f64>()
            / b as f64
    }
}

/// f64 forward pass of the classifier. `batch_stats` selects batch-statistic
/// normalization (training, no dropout) over the stored running statistics.
pub fn model_forward_f64(cfg: &ModelConfig, p: &[Vec<f64>], x: &[f64], b: usize, batch_stats: bool) -> Vec<f64> {
    let (c, t) = (cfg.n_channels, cfg.n_timepoints);
    let f1 = cfg.temporal_filters;
    let f2 = cfg.n_spatial_maps();
    let (l1, l2) = (cfg.temporal_kernel_len, cfg.separable_kernel_len);
    let bn = |h: &[f64], layer: usize, ch: usize, inner: usize| {
        let base = [1, 6, 12][layer];
        if batch_stats {
            oracle::batch_norm(h, &p[base], &p[base + 1], b, ch, inner)
        } else {
            oracle::channel_affine(h, &p[base], &p[base + 1], &p[base + 2], &p[base + 3], b, ch, inner)
        }
    };
    let h = oracle::conv_temporal(x, &p[0], b, c, t, f1, l1, (l1 - 1) / 2);
    let h = bn(&h, 0, f1, c * t);
    let h = oracle::channel_mix(&h, &p[5], b, f1, c, f2 / f1, t);
    let h = bn(&h, 1, f2, t);
    let h = oracle::avg_pool(&oracle::elu(&h, 1.0), t, cfg.pool1);
    let t2 = t / cfg.pool1;
    let h = oracle::conv_depthwise(&h, &p[10], b, f2, t2, l2, (l2 - 1) / 2);
    let h = oracle::channel_mix(&h, &p[11], b, 1, f2, f2, t2);
    let h = bn(&h, 2, f2, t2);
    let h = oracle::avg_pool(&oracle::elu(&h, 1.0), t2, cfg.pool2);
    oracle::dense(&h, &p[16], &p[17], b, cfg.feature_len(), cfg.n_classes)
}

pub fn model_params_f64(params: &ModelParams) -> Vec<Vec<f64>> {
    params.tensors().iter().map(|(_, t)| to64(t)).collect()
}

/// Relative error `‖a − b‖ / max(‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

/// Central differences of `f` around `inputs[which]`.
pub fn central_diff(inputs: &[Vec<f64>], which: usize, f: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|j| {
            let orig = work[which][j];
            work[which][j] = orig + FD_STEP;
            let up = f(&work);
            work[which][j] = orig - FD_STEP;
            let down = f(&work);
            work[which][j] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between tape gradients and f64 central differences,
/// over every input. `build` records the primitive on the tape; `reference`
/// is its f64 oracle. Non-scalar outputs are reduced with fixed random weights.
pub fn grad_check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    build: &dyn Fn(&mut GradTape, &[Var]) -> Var,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| tape.param(tensor(s, v))).collect();
    let out = build(&mut tape, &vars);
    let n_out = tape.value(out).len();
    let weights = rand_vec(&mut rng(seed ^ 0xfeed), n_out, 1.0);
    let loss = if n_out == 1 && tape.value(out).ndim() == 0 {
        out
    } else {
        let m = tape.mask(out, weights.iter().map(|&w| w as f32).collect()).unwrap();
        tape.sum(m).unwrap()
    };
    let grads = tape.backward(loss).unwrap();
    let scalar = n_out == 1 && tape.value(out).ndim() == 0;
    let values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let f = |xs: &[Vec<f64>]| {
        let y = reference(xs);
        if scalar {
            y[0]
        } else {
            y.iter().zip(&weights).map(|(a, w)| a * w).sum()
        }
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = to64(grads.get(*v).unwrap());
        let fd = central_diff(&values, i, &f);
        worst = worst.max(rel_err(&g, &fd));
    }
    worst
}

/// Balanced two-class, multi-user set whose classes differ only by the sign
/// of a fixed spatial-temporal template.
pub fn separable_set(c: usize, t: usize, per_class: usize, users: usize, seed: u64) -> TrialSet {
    let mut r = rng(seed);
    let template = rand_vec(&mut r, c * t, 1.0);
    let mut trials = Vec::new();
    for u in 0..users {
        for i in 0..2 * per_class {
            let y = i % 2;
            let s = if y == 0 { 1.0 } else { -1.0 };
            let data: Vec<f64> = template.iter().map(|v| s * v + 0.3 * r.gen_range(-1.0..1.0)).collect();
            trials.push(Trial::new(tensor(&[c, t], &data), y as u16 + 1, u as u16 + 1, 128.0).unwrap());
        }
    }
    TrialSet::new("separable", trials, 2, users).unwrap()
}

pub mod gradcheck;

/// A CE-trained desk model on three synthetic users, plus the aligned set it
/// was trained on.
pub fn ce_model(seed: u64, epochs: usize) -> (are_core::model::Model, TrialSet) {
    use are_core::alignment::align_per_user;
    use are_core::data::{generate_synthetic, SynthSpec};
    use are_core::training::{train_model, Start, TrainConfig};
    let spec = SynthSpec {
        n_users: 3,
        trials_per_class_per_user: 10,
        ..SynthSpec::desk(seed)
    };
    let ts = align_per_user(&generate_synthetic(&spec).unwrap()).unwrap();
    let mc = ModelConfig::desk(ts.n_channels(), ts.n_timepoints(), ts.n_classes());
    let tc = TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 3e-3,
        ..TrainConfig::new(seed)
    };
    let model = train_model(Start::Fresh(&mc), &ts, &tc, None).unwrap().model;
    (model, ts)
}
