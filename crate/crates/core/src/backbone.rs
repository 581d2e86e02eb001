//! Small convolutional encoder producing the four-scale feature pyramid.
//!
//! Each stage downsamples by two with a strided 3x3 convolution followed by
//! a stride-1 refinement convolution, both gated by a smooth gaussian-error
//! activation; stage 1 uses two strided convolutions to reach 1/4 scale in
//! one stage. Capacity is deliberately small — the interesting machinery
//! lives in the decoder — but channel widths are configurable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{xavier_uniform, Parameter, Tensor};

/// Encoder maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution, with
/// strictly increasing channel counts.
pub struct FeaturePyramid<T: Scalar> {
    pub e1: Tensor<T>,
    pub e2: Tensor<T>,
    pub e3: Tensor<T>,
    pub e4: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level(&self, stage: usize) -> &Tensor<T> {
        match stage {
            1 => &self.e1,
            2 => &self.e2,
            3 => &self.e3,
            4 => &self.e4,
            _ => panic!("pyramid stage {stage} out of range"),
        }
    }
}

/// One 3x3 convolution's weights.
#[derive(Clone)]
pub struct Conv2dParams<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Conv2dParams {
            weight: Parameter {
                name: format!("{name}.weight"),
                tensor: xavier_uniform(&[3, 3, cin, cout], 9 * cin, 9 * cout, rng),
            },
            bias: Parameter {
                name: format!("{name}.bias"),
                tensor: Tensor::leaf(&[cout], vec![T::ZERO; cout]).unwrap(),
            },
        }
    }

    pub fn apply(&self, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        x.conv2d(&self.weight.tensor, &self.bias.tensor, stride)
    }

    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone)]
pub struct Backbone<T: Scalar> {
    stages: Vec<(Conv2dParams<T>, Conv2dParams<T>)>,
    channels: Vec<usize>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng>(channels: &[usize], rng: &mut R) -> Result<Self> {
        if channels.len() != 4 {
            return Err(Error::Config(format!("backbone needs 4 channel counts, got {channels:?}")));
        }
        if !channels.windows(2).all(|w| w[0] < w[1]) || channels[0] == 0 {
            return Err(Error::Config(format!(
                "backbone channels must strictly increase, got {channels:?}"
            )));
        }
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let base = format!("backbone.stage{}", i + 1);
            stages.push((
                Conv2dParams::new(&format!("{base}.conv1"), cin, cout, rng),
                Conv2dParams::new(&format!("{base}.conv2"), cout, cout, rng),
            ));
            cin = cout;
        }
        Ok(Backbone { stages, channels: channels.to_vec() })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// `[H, W, 3] -> FeaturePyramid`; H and W must be divisible by 32.
    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::dimension("encode", format!("expected [H, W, 3], got {shape:?}")));
        }
        if shape[0] % 32 != 0 || shape[1] % 32 != 0 {
            return Err(Error::contract(
                "encode",
                format!("extents ({}, {}) not divisible by 32", shape[0], shape[1]),
            ));
        }
        let mut maps = Vec::with_capacity(4);
        let mut x = image.clone();
        for (i, (conv1, conv2)) in self.stages.iter().enumerate() {
            let stride2 = if i == 0 { 2 } else { 1 };
            x = conv1.apply(&x, 2)?.gelu();
            x = conv2.apply(&x, stride2)?.gelu();
            maps.push(x.clone());
        }
        let mut it = maps.into_iter();
        Ok(FeaturePyramid {
            e1: it.next().unwrap(),
            e2: it.next().unwrap(),
            e3: it.next().unwrap(),
            e4: it.next().unwrap(),
        })
    }

    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        for (c1, c2) in &self.stages {
            c1.visit(f);
            c2.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        for (c1, c2) in &mut self.stages {
            c1.visit_mut(f);
            c2.visit_mut(f);
        }
    }
}
