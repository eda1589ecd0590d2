//! Convolutional encoder: concat(I_t, M_t) down to a latent grid at 1/s
//! resolution.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One convolution with its parameters held outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3dLayer {
    /// Uniform fan-in initialization, zero bias.
    pub fn init(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel * kernel) as f64;
        let limit = 1.0 / fan_in.sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel * kernel)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Conv3dLayer {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        vec![
            (format!("{}.weight", self.name), self.weight_shape(), &self.weight),
            (format!("{}.bias", self.name), vec![self.out_channels], &self.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        let shape = self.weight_shape();
        if trainable {
            (
                tape.param(&self.weight, &shape),
                tape.param(&self.bias, &[self.out_channels]),
            )
        } else {
            (
                tape.constant(self.weight.clone(), &shape),
                tape.constant(self.bias.clone(), &[self.out_channels]),
            )
        }
    }

    pub fn forward(&self, tape: &mut Tape, wvar: Var, bvar: Var, x: Var) -> Result<Var> {
        tape.conv3d(x, wvar, bvar, self.stride, self.padding)
    }
}

/// Stem convolution, one stride-2 block per factor of two in `downsample`,
/// then a projection to the latent channel count. ReLU after every layer but
/// the projection, so latent values carry sign.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Conv3dLayer>,
}

impl Encoder {
    pub fn init(
        latent_channels: usize,
        downsample: usize,
        stem_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if downsample == 0 || !downsample.is_power_of_two() {
            return Err(Error::invalid(
                "encoder",
                format!("downsample {downsample} must be a power of two"),
            ));
        }
        if latent_channels == 0 || stem_channels == 0 {
            return Err(Error::invalid("encoder", "channel counts must be positive"));
        }
        let mut layers = Vec::new();
        layers.push(Conv3dLayer::init(
            "encoder.stem",
            2,
            stem_channels,
            3,
            1,
            1,
            rng,
        ));
        let mut width = stem_channels;
        for i in 0..downsample.trailing_zeros() {
            let next = stem_channels * 2;
            layers.push(Conv3dLayer::init(
                &format!("encoder.down{i}"),
                width,
                next,
                3,
                2,
                1,
                rng,
            ));
            width = next;
        }
        layers.push(Conv3dLayer::init(
            "encoder.proj",
            width,
            latent_channels,
            3,
            1,
            1,
            rng,
        ));
        Ok(Encoder { layers })
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        self.layers.iter().flat_map(|l| l.named_tensors()).collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.named_tensors_mut())
            .collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| {
                let (w, b) = l.register(tape, trainable);
                [w, b]
            })
            .collect()
    }

    /// `input` is `[2,D,H,W]`; output `[C, D/s, H/s, W/s]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::invalid(
                "encoder_forward",
                format!("expected {} tensors, got {}", 2 * self.layers.len(), vars.len()),
            ));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, vars[2 * i], vars[2 * i + 1], x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}
