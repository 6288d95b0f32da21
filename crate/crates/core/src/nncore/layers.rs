use crate::Result;

use super::{
    conv2d, conv2d_backward, dense, dense_backward, depthwise_conv2d, depthwise_conv2d_backward,
    he_uniform, Padding, Parameter, Real, Tensor,
};

/// Convolution layer owning its filters (`O×C×k×k`) and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub pad: Padding,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform filters and zero bias, seeded by `(seed, name)`.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        seed: u64,
    ) -> Self {
        let weight = he_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, seed, name);
        Conv2d {
            weight: Parameter::new(weight),
            bias: Parameter::new(Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.pad)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight.value, self.stride, self.pad, dy)?;
        self.weight.grad.add_assign(&g.dw);
        self.bias.grad.add_assign(&g.db);
        Ok(g.dx)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Depthwise convolution layer (`C×1×k×k`).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv2d<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub pad: Padding,
}

impl<T: Real> DepthwiseConv2d<T> {
    pub fn new(name: &str, ch: usize, k: usize, stride: usize, pad: Padding, seed: u64) -> Self {
        let weight = he_uniform(&[ch, 1, k, k], k * k, seed, name);
        DepthwiseConv2d {
            weight: Parameter::new(weight),
            bias: Parameter::new(Tensor::zeros(&[ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        depthwise_conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.pad)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = depthwise_conv2d_backward(x, &self.weight.value, self.stride, self.pad, dy)?;
        self.weight.grad.add_assign(&g.dw);
        self.bias.grad.add_assign(&g.db);
        Ok(g.dx)
    }

    pub fn cast<U: Real>(&self) -> DepthwiseConv2d<U> {
        DepthwiseConv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Fully connected layer, `F×K` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, seed: u64) -> Self {
        Dense {
            weight: Parameter::new(he_uniform(&[inputs, outputs], inputs, seed, name)),
            bias: Parameter::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = dense_backward(x, &self.weight.value, dy)?;
        self.weight.grad.add_assign(&g.dw);
        self.bias.grad.add_assign(&g.db);
        Ok(g.dx)
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
