//! Parameter-holding layers and initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::conv;
use crate::nn::ops;
use crate::nn::tensor::{Parameter, Real, Tensor};
use crate::rng::RngStream;

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)). Draws are made in
/// f64 so f32 and f64 runs consume identical RNG streams.
pub fn xavier_uniform<T: Real>(
    rng: &RngStream,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng.rng();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::cast(r.gen_range(-a..a)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Standard-normal draws (test helper and synthetic inputs).
pub fn sample_normal<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::cast(v)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// 1D convolution layer with "same-style" padding `floor(k/2)`.
pub struct Conv1d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(
        rng: &RngStream,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = xavier_uniform(
            &rng.split("weight"),
            vec![out_channels, in_channels, kernel],
            in_channels * kernel,
            out_channels * kernel,
        )
        .requires_grad();
        Conv1d {
            weight,
            bias: bias.then(|| Tensor::zeros(vec![out_channels]).requires_grad()),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv::conv1d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::new(format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push(Parameter::new(format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Depthwise 1D convolution (one kernel per channel).
pub struct DepthwiseConv1d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> DepthwiseConv1d<T> {
    pub fn new(rng: &RngStream, channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        let weight = xavier_uniform(
            &rng.split("weight"),
            vec![channels, kernel],
            kernel,
            kernel,
        )
        .requires_grad();
        DepthwiseConv1d {
            weight,
            bias: bias.then(|| Tensor::zeros(vec![channels]).requires_grad()),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv::conv1d_depthwise(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::new(format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push(Parameter::new(format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Fully connected layer `y = x W^T + b`.
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &RngStream, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = xavier_uniform(
            &rng.split("weight"),
            vec![out_features, in_features],
            in_features,
            out_features,
        )
        .requires_grad();
        Linear {
            weight,
            bias: bias.then(|| Tensor::zeros(vec![out_features]).requires_grad()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::new(format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push(Parameter::new(format!("{prefix}.bias"), b.clone()));
        }
    }
}
