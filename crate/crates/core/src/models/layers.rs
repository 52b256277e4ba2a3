use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::EngineRng;
use crate::tensor::{Conv2dSpec, Tensor};

/// Forward-pass mode. Dropout draws from the supplied stream when training.
pub enum Mode<'a> {
    Train(&'a mut EngineRng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Train(rng) => x.dropout(rate, true, &mut **rng),
            Mode::Eval => Ok(x.clone()),
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: Conv2dSpec,
}

impl Conv {
    /// Normal init with the given standard deviation and zero bias.
    pub fn init(rng: &mut EngineRng, cin: usize, cout: usize, k: usize, spec: Conv2dSpec, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f32> = (0..cout * cin * k * k).map(|_| normal.sample(rng) as f32).collect();
        Ok(Conv {
            weight: Tensor::parameter(w, &[cout, cin, k, k])?,
            bias: Tensor::parameter(vec![0.0; cout], &[cout])?,
            spec,
        })
    }

    /// He (fan-in) init: `std = sqrt(2 / (cin * k * k))`.
    pub fn he(rng: &mut EngineRng, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::init(rng, cin, cout, k, spec, std)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn push_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
