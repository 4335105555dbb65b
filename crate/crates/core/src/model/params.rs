use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;
use crate::seed::SeedKey;

/// Fixed positions of each tensor inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum ParamSlot {
    TemporalConv,
    Bn1Gamma,
    Bn1Beta,
    Bn1Mean,
    Bn1Var,
    Spatial,
    Bn2Gamma,
    Bn2Beta,
    Bn2Mean,
    Bn2Var,
    SepDepthwise,
    SepPointwise,
    Bn3Gamma,
    Bn3Beta,
    Bn3Mean,
    Bn3Var,
    DenseWeight,
    DenseBias,
}

const NAMES: [&str; 18] = [
    "temporal.weight",
    "bn1.gamma",
    "bn1.beta",
    "bn1.running_mean",
    "bn1.running_var",
    "spatial.weight",
    "bn2.gamma",
    "bn2.beta",
    "bn2.running_mean",
    "bn2.running_var",
    "separable.depthwise",
    "separable.pointwise",
    "bn3.gamma",
    "bn3.beta",
    "bn3.running_mean",
    "bn3.running_var",
    "dense.weight",
    "dense.bias",
];

/// Named parameter tensors in a fixed order, batch-norm running statistics included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tensors: Vec<(String, Tensor)>,
}

pub(crate) fn expected_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let f1 = cfg.temporal_filters;
    let f2 = cfg.n_spatial_maps();
    let bn = |n: usize| vec![vec![n]; 4];
    let mut s = vec![vec![f1, cfg.temporal_kernel_len]];
    s.extend(bn(f1));
    s.push(vec![f2, cfg.n_channels]);
    s.extend(bn(f2));
    s.push(vec![f2, cfg.separable_kernel_len]);
    s.push(vec![f2, f2]);
    s.extend(bn(f2));
    s.push(vec![cfg.n_classes, cfg.feature_len()]);
    s.push(vec![cfg.n_classes]);
    s
}

fn fan_in(slot: usize, cfg: &ModelConfig) -> Option<usize> {
    match slot {
        0 => Some(cfg.temporal_kernel_len),
        5 => Some(cfg.n_channels),
        10 => Some(cfg.separable_kernel_len),
        11 => Some(cfg.n_spatial_maps()),
        16 => Some(cfg.feature_len()),
        _ => None,
    }
}

impl ModelParams {
    /// Builds params from named tensors, checking names, order and shapes.
    pub fn from_named(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = expected_shapes(cfg);
        ensure!(
            tensors.len() == shapes.len(),
            Dimension,
            "expected {} parameter tensors, got {}",
            shapes.len(),
            tensors.len()
        );
        for (i, ((name, t), shape)) in tensors.iter().zip(&shapes).enumerate() {
            ensure!(name == NAMES[i], Validation, "tensor {i} is '{name}', expected '{}'", NAMES[i]);
            ensure!(
                t.shape() == shape.as_slice(),
                Dimension,
                "'{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            );
            if Self::is_bn_stat(name) && name.ends_with("running_var") {
                ensure!(
                    t.data().iter().all(|&v| v > 0.0),
                    Validation,
                    "'{name}' must be positive"
                );
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn names() -> &'static [&'static str] {
        &NAMES
    }

    pub fn is_bn_stat(name: &str) -> bool {
        name.ends_with("running_mean") || name.ends_with("running_var")
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn slot(&self, s: ParamSlot) -> &Tensor {
        &self.tensors[s as usize].1
    }

    pub fn slot_mut(&mut self, s: ParamSlot) -> &mut Tensor {
        &mut self.tensors[s as usize].1
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Validation(format!("no parameter named '{name}'")))
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i].1
    }

    /// Indices of the tensors updated by gradient descent.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.tensors.len())
            .filter(|&i| !Self::is_bn_stat(&self.tensors[i].0))
            .collect()
    }

    /// Mutable references to the trainable tensors, in [`Self::trainable_indices`] order.
    pub fn trainable_refs_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors
            .iter_mut()
            .filter(|(n, _)| !Self::is_bn_stat(n))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Fan-in scaled uniform initialization, `U(−√(6/fan_in), √(6/fan_in))`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let shapes = expected_shapes(cfg);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.into_iter().enumerate() {
        let name = NAMES[i];
        let n: usize = shape.iter().product();
        let data = match fan_in(i, cfg) {
            Some(fi) => {
                let bound = (6.0 / fi as f64).sqrt() as f32;
                let mut rng = SeedKey::new(seed).with_str(name).rng();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            None if name.ends_with("gamma") || name.ends_with("running_var") => vec![1.0; n],
            None => vec![0.0; n],
        };
        tensors.push((name.to_string(), Tensor::from_parts(shape, data)?));
    }
    Ok(ModelParams { tensors })
}
