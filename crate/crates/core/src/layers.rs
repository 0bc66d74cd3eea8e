//! Parameterized building blocks. Each layer only holds [`ParamId`]s; values
//! live in the owning [`ParamStore`].

use alloc::format;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{BatchNormParams, Graph, NormMode, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialization for weight and bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim.max(1) as f64);
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::from_vec(&[out_dim, in_dim], w).unwrap());
        let bias = bias.then(|| {
            let b = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
            store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::from_vec(&[out_dim], b).unwrap())
        });
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w, false, true)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He (fan-out) normal initialization, no bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = libm::sqrt(2.0 / (out_ch * kernel * kernel) as f64);
        let normal = Normal::new(0.0, std).unwrap();
        let w = (0..out_ch * in_ch * kernel * kernel).map(|_| normal.sample(rng)).collect();
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w).unwrap());
        Self { weight, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        g.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub params: BatchNormParams,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool, momentum: f64, eps: f64) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.weight"), ParamKind::NormScale, Tensor::full(&[channels], 1.0))),
                Some(store.add(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(&[channels]))),
            )
        } else {
            (None, None)
        };
        let running_mean = store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[channels]));
        let running_var = store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(&[channels], 1.0));
        Self { params: BatchNormParams { gamma, beta, running_mean, running_var, eps }, momentum }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, train: bool) -> Result<Var> {
        let mode = if train { NormMode::Train { momentum: self.momentum } } else { NormMode::Eval };
        g.batch_norm(x, &self.params, mode)
    }
}
