use rand::Rng;

use super::config::{BnMode, ModelConfig};
use super::params::{ModelParams, ParamSlot};
use crate::error::{ensure, Result};
use crate::numerics::{BatchStats, GradTape, Tensor, Var};
use crate::seed::SeedKey;

/// Chunk size for evaluation-mode inference. With `BnMode::Batch` the
/// normalization statistics are those of each chunk.
pub const EVAL_BATCH: usize = 64;

const ELU_ALPHA: f32 = 1.0;
const BN_BASES: [ParamSlot; 3] = [ParamSlot::Bn1Gamma, ParamSlot::Bn2Gamma, ParamSlot::Bn3Gamma];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active with masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Statistics chosen by [`ModelConfig::bn_mode`]; no dropout.
    Eval,
}

/// Output of a taped forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// One entry per batch-norm layer in train mode, empty otherwise.
    pub bn_stats: Vec<BatchStats>,
}

/// Records every parameter tensor on `tape`. Running statistics are always
/// constants; the rest are differentiable when `trainable` is set.
pub fn bind_params(tape: &mut GradTape, params: &ModelParams, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|(name, t)| {
            if trainable && !ModelParams::is_bn_stat(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

struct Pass<'a> {
    tape: &'a mut GradTape,
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    vars: &'a [Var],
    mode: Mode,
    stats: Vec<BatchStats>,
}

impl Pass<'_> {
    fn var(&self, s: ParamSlot) -> Var {
        self.vars[s as usize]
    }

    fn bn(&mut self, x: Var, layer: usize) -> Result<Var> {
        let base = BN_BASES[layer] as usize;
        let (g, b) = (self.vars[base], self.vars[base + 1]);
        let training = matches!(self.mode, Mode::Train { .. });
        if training || self.cfg.bn_mode == BnMode::Batch {
            let (y, st) = self.tape.batch_norm(x, g, b)?;
            if training {
                self.stats.push(st);
            }
            Ok(y)
        } else {
            let mean = self.params.tensor_at(base + 2).data();
            let var = self.params.tensor_at(base + 3).data();
            self.tape.channel_affine(x, g, b, mean, var)
        }
    }

    fn dropout(&mut self, x: Var, layer: u64) -> Result<Var> {
        let p = self.cfg.dropout_rate;
        let Mode::Train { dropout_seed } = self.mode else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = SeedKey::new(dropout_seed).with(layer).rng();
        let mask = (0..self.tape.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        self.tape.mask(x, mask)
    }

    fn run(&mut self, x: Var) -> Result<Var> {
        let cfg = self.cfg;
        let b = self.tape.value(x).shape()[0];
        let (l1, l2) = (cfg.temporal_kernel_len, cfg.separable_kernel_len);

        let h = self.tape.conv_temporal(x, self.var(ParamSlot::TemporalConv), (l1 - 1) / 2)?;
        let h = self.bn(h, 0)?;
        let h = self.tape.channel_mix(h, self.var(ParamSlot::Spatial), cfg.temporal_filters)?;
        let h = self.bn(h, 1)?;
        let h = self.tape.elu(h, ELU_ALPHA)?;
        let h = self.tape.avg_pool(h, cfg.pool1)?;
        let h = self.dropout(h, 0)?;

        let h = self.tape.conv_depthwise(h, self.var(ParamSlot::SepDepthwise), (l2 - 1) / 2)?;
        let h = self.tape.channel_mix(h, self.var(ParamSlot::SepPointwise), 1)?;
        let h = self.bn(h, 2)?;
        let h = self.tape.elu(h, ELU_ALPHA)?;
        let h = self.tape.avg_pool(h, cfg.pool2)?;
        let h = self.dropout(h, 1)?;

        let h = self.tape.reshape(h, &[b, cfg.feature_len()])?;
        self.tape.dense(h, self.var(ParamSlot::DenseWeight), self.var(ParamSlot::DenseBias))
    }
}

/// Differentiable forward pass of `x` (shape `(b, c, t)`) on `tape`, using
/// parameter handles from [`bind_params`].
pub fn forward_tape(
    tape: &mut GradTape,
    params: &ModelParams,
    cfg: &ModelConfig,
    vars: &[Var],
    x: Var,
    mode: Mode,
) -> Result<Forward> {
    let shape = tape.value(x).shape().to_vec();
    ensure!(
        shape.len() == 3 && shape[1] == cfg.n_channels && shape[2] == cfg.n_timepoints && shape[0] >= 1,
        Validation,
        "batch shape {shape:?} does not match model input (b, {}, {})",
        cfg.n_channels,
        cfg.n_timepoints
    );
    ensure!(vars.len() == params.len(), Usage, "parameter handles do not match the model");
    let mut pass = Pass {
        tape,
        params,
        cfg,
        vars,
        mode,
        stats: Vec::new(),
    };
    let logits = pass.run(x)?;
    Ok(Forward {
        logits,
        bn_stats: pass.stats,
    })
}

/// Forward pass without gradient bookkeeping beyond the throwaway tape.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Vec<BatchStats>)> {
    let mut tape = GradTape::new();
    let vars = bind_params(&mut tape, params, false);
    let x = tape.constant(batch.clone());
    let out = forward_tape(&mut tape, params, cfg, &vars, x, mode)?;
    Ok((tape.value(out.logits).clone(), out.bn_stats))
}

/// Exponential moving average update of the running statistics.
pub fn update_running_stats(params: &mut ModelParams, cfg: &ModelConfig, stats: &[BatchStats]) -> Result<()> {
    ensure!(stats.len() == 3, Usage, "expected statistics for 3 batch-norm layers, got {}", stats.len());
    let m = cfg.bn_momentum;
    for (layer, st) in stats.iter().enumerate() {
        let base = BN_BASES[layer] as usize;
        for (r, &v) in params.tensor_at_mut(base + 2).data_mut().iter_mut().zip(&st.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in params.tensor_at_mut(base + 3).data_mut().iter_mut().zip(&st.var) {
            *r = ((1.0 - m) * *r + m * v).max(f32::MIN_POSITIVE);
        }
    }
    Ok(())
}

/// Evaluation-mode logits, processed in chunks of [`EVAL_BATCH`].
pub fn predict_logits(params: &ModelParams, cfg: &ModelConfig, batch: &Tensor) -> Result<Tensor> {
    let b = batch.shape().first().copied().unwrap_or(0);
    ensure!(b >= 1, Validation, "empty batch");
    let per = batch.len() / b;
    let mut out = Vec::with_capacity(b * cfg.n_classes);
    for start in (0..b).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(b);
        let mut shape = batch.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_parts(shape, batch.data()[start * per..end * per].to_vec())?;
        let (logits, _) = forward(params, cfg, &chunk, Mode::Eval)?;
        out.extend_from_slice(logits.data());
    }
    Tensor::from_parts(vec![b, cfg.n_classes], out)
}

/// Row-wise softmax with max subtraction, evaluated in `f64`.
pub fn softmax(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, _) = logits.dims2()?;
    Ok((0..b)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect())
}

/// Mean cross-entropy of `logits` against 1-based `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[u16]) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    ensure!(labels.len() == b, Dimension, "{} labels for {b} rows", labels.len());
    ensure!(
        labels.iter().all(|&y| y >= 1 && usize::from(y) <= k),
        Validation,
        "labels must lie in 1..={k}"
    );
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let lse = m + row.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln();
        loss += lse - f64::from(row[usize::from(y) - 1]);
    }
    Ok(loss / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig::desk(4, 32, 2)
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[3, 4]);
        let l = cross_entropy(&logits, &[1, 2, 4]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1, 1]).is_err());
        assert!(cross_entropy(&logits, &[5, 1, 1]).is_err());
    }

    #[test]
    fn zero_weights_give_bias_only_logits() {
        let cfg = tiny();
        let mut p = init_params(&cfg, 0).unwrap();
        for i in p.trainable_indices() {
            if !p.tensors()[i].0.ends_with("gamma") {
                p.tensor_at_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::zeros(&[2, 4, 32]);
        let (logits, _) = forward(&p, &cfg, &x, Mode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny();
        let p = init_params(&cfg, 5).unwrap();
        let x = Tensor::new(vec![3, 4, 32], (0..384).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect())
            .unwrap();
        let a = predict_logits(&p, &cfg, &x).unwrap();
        let b = predict_logits(&p, &cfg, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let cfg = tiny();
        let mut p = init_params(&cfg, 5).unwrap();
        let x = Tensor::new(vec![3, 4, 32], (0..384).map(|i| (i % 7) as f32).collect()).unwrap();
        let (_, stats) = forward(&p, &cfg, &x, Mode::Train { dropout_seed: 1 }).unwrap();
        assert_eq!(stats.len(), 3);
        let before = p.clone();
        update_running_stats(&mut p, &cfg, &stats).unwrap();
        assert_ne!(before.slot(ParamSlot::Bn1Mean), p.slot(ParamSlot::Bn1Mean));
        assert!(p.slot(ParamSlot::Bn3Var).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn wrong_shape_is_validation_error() {
        let cfg = tiny();
        let p = init_params(&cfg, 5).unwrap();
        let err = forward(&p, &cfg, &Tensor::zeros(&[1, 3, 32]), Mode::Eval).unwrap_err();
        assert_eq!(err.kind(), "validation");
    }
}
