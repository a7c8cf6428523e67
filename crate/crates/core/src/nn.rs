//! Parameterized layers that register their tensors in a [`ParamRegistry`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{Element, ParamRegistry, Tensor};
use crate::util::{fnv1a64, rng_for};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Weight initializer. Every tensor draws from its own stream keyed by
/// `(seed, name)`, so adding or removing unrelated layers never changes the
/// values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    /// Zero-mean uniform with bound `√(6 / fan_in)`.
    pub fn fan_in_uniform<T: Element>(&self, name: &str, len: usize, fan_in: usize) -> Vec<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(self.seed, &[fnv1a64(name.as_bytes())]);
        (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect()
    }

    /// Zero-mean uniform with the given standard deviation.
    pub fn small_uniform<T: Element>(&self, name: &str, len: usize, std: f64) -> Vec<T> {
        let bound = std * 3f64.sqrt();
        let mut rng = rng_for(self.seed, &[fnv1a64(name.as_bytes())]);
        (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        registry: &mut ParamRegistry<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        init: Init,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let wname = format!("{name}.weight");
        let data = init.fan_in_uniform(&wname, out_channels * fan_in, fan_in);
        let weight = registry.register(
            wname,
            Tensor::param(data, &[out_channels, in_channels, kernel, kernel])?,
            true,
        )?;
        let bias = if with_bias {
            Some(registry.register(
                format!("{name}.bias"),
                Tensor::param(vec![T::zero(); out_channels], &[out_channels])?,
                false,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(registry: &mut ParamRegistry<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: registry.register(
                format!("{name}.gamma"),
                Tensor::param(vec![T::one(); channels], &[channels])?,
                false,
            )?,
            beta: registry.register(
                format!("{name}.beta"),
                Tensor::param(vec![T::zero(); channels], &[channels])?,
                false,
            )?,
            running_mean: registry
                .register_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?)?,
            running_var: registry
                .register_buffer(format!("{name}.running_var"), Tensor::full(T::one(), &[channels])?)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        ops::batch_norm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            mode,
            BN_MOMENTUM,
            BN_EPSILON,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(
        registry: &mut ParamRegistry<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let data = init.fan_in_uniform(&wname, out_features * in_features, in_features);
        Self::from_weights(registry, name, data, in_features, out_features)
    }

    /// Output layer with small weights so a fresh model starts near uniform.
    pub fn head(
        registry: &mut ParamRegistry<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f64,
        init: Init,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let data = init.small_uniform(&wname, out_features * in_features, std);
        Self::from_weights(registry, name, data, in_features, out_features)
    }

    fn from_weights(
        registry: &mut ParamRegistry<T>,
        name: &str,
        data: Vec<T>,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        Ok(Linear {
            weight: registry.register(wname, Tensor::param(data, &[out_features, in_features])?, true)?,
            bias: registry.register(
                format!("{name}.bias"),
                Tensor::param(vec![T::zero(); out_features], &[out_features])?,
                false,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}
