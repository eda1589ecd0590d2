//! Conditioned neural field: latent grid plus sine MLP decoding signed
//! distance at arbitrary points.
//!
//! A decoded value is f(concat(x, z(x))) where z(x) is a trilinear read of
//! the latent grid at normalized coordinates x. The decoder is five fully-
//! connected layers: sine activations after the first four (frequency
//! `omega_first` on the first, 1 after), linear scalar output.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sdf::voxel_center_coord;

/// Latent grid handle on a tape: `[channels, dims]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentGrid {
    pub channels: usize,
    pub dims: [usize; 3],
    pub var: Var,
}

impl LatentGrid {
    pub fn new(tape: &Tape, var: Var) -> Result<Self> {
        let shape = tape.shape(var);
        if shape.len() != 4 {
            return Err(Error::invalid(
                "latent_grid",
                format!("expected [C,d,h,w], got {shape:?}"),
            ));
        }
        Ok(LatentGrid {
            channels: shape[0],
            dims: [shape[1], shape[2], shape[3]],
            var,
        })
    }
}

pub const DECODER_LAYERS: usize = 5;

/// Decoder parameters kept outside any tape so they can be updated between
/// steps and checkpointed. `layers[i]` is (weight `[out,in]`, bias `[out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMlp {
    pub in_features: usize,
    pub hidden: usize,
    pub omega_first: f64,
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DecoderMlp {
    /// Layer widths for a given latent channel count.
    fn dims(in_features: usize, hidden: usize) -> Vec<(usize, usize)> {
        vec![
            (hidden, in_features),
            (hidden, hidden),
            (hidden, hidden),
            (hidden, hidden),
            (1, hidden),
        ]
    }

    /// Sine-network initialization: first layer U(-1/in, 1/in), later layers
    /// U(-sqrt(6/in), sqrt(6/in)), zero biases.
    pub fn init(
        latent_channels: usize,
        hidden: usize,
        omega_first: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let in_features = 3 + latent_channels;
        let layers = Self::dims(in_features, hidden)
            .into_iter()
            .enumerate()
            .map(|(i, (out, inp))| {
                let limit = if i == 0 {
                    1.0 / inp as f64
                } else {
                    (6.0 / inp as f64).sqrt()
                };
                let w = (0..out * inp)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                (w, vec![0.0; out])
            })
            .collect();
        DecoderMlp {
            in_features,
            hidden,
            omega_first,
            layers,
        }
    }

    /// Named tensors in registration order, for checkpoints and optimizers.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let dims = Self::dims(self.in_features, self.hidden);
        let mut out = Vec::new();
        for (i, ((w, b), (o, inp))) in self.layers.iter().zip(dims).enumerate() {
            out.push((format!("decoder.l{i}.weight"), vec![o, inp], w));
            out.push((format!("decoder.l{i}.bias"), vec![o], b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    (format!("decoder.l{i}.weight"), w),
                    (format!("decoder.l{i}.bias"), b),
                ]
            })
            .collect()
    }

    /// Push all tensors onto a tape. Trainable registration produces params
    /// that accumulate gradients; inference uses constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, shape, values)| {
                if trainable {
                    tape.param(values, &shape)
                } else {
                    tape.constant(values.clone(), &shape)
                }
            })
            .collect()
    }

    /// Apply the MLP to `[P, 3+C]` inputs, giving `[P, 1]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != 2 * DECODER_LAYERS {
            return Err(Error::invalid(
                "decoder_forward",
                format!("expected {} tensors, got {}", 2 * DECODER_LAYERS, vars.len()),
            ));
        }
        let mut x = input;
        for i in 0..DECODER_LAYERS {
            x = tape.linear(x, vars[2 * i], vars[2 * i + 1])?;
            if i + 1 < DECODER_LAYERS {
                let omega = if i == 0 { self.omega_first } else { 1.0 };
                x = tape.sine(x, omega);
            }
        }
        Ok(x)
    }
}

/// Trilinear read of the latent grid at `[P,3]` normalized points -> `[P,C]`.
pub fn query_latent(tape: &mut Tape, z: &LatentGrid, points: Var) -> Result<Var> {
    tape.grid_sample(z.var, points)
}

/// Decode signed distance at each point: f(concat(x, z(x))) -> `[P,1]`.
pub fn decode_sdf(
    tape: &mut Tape,
    mlp: &DecoderMlp,
    mlp_vars: &[Var],
    z: &LatentGrid,
    points: Var,
) -> Result<Var> {
    if tape.value(z.var).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { op: "decode_sdf" });
    }
    if tape.value(points).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { op: "decode_sdf" });
    }
    if z.channels + 3 != mlp.in_features {
        return Err(Error::invalid(
            "decode_sdf",
            format!(
                "decoder expects {} input features, latent supplies {}",
                mlp.in_features,
                z.channels + 3
            ),
        ));
    }
    let sampled = query_latent(tape, z, points)?;
    let joined = tape.concat(points, sampled, 1)?;
    mlp.forward(tape, mlp_vars, joined)
}

/// Largest point batch decoded at once by `decode_full_grid`.
pub const DECODE_CHUNK: usize = 65_536;

/// Evaluate the field at every voxel center of `out_shape`, row-major.
/// Chunked batching only; values are bit-identical to the pointwise path.
pub fn decode_full_grid(
    tape: &mut Tape,
    mlp: &DecoderMlp,
    mlp_vars: &[Var],
    z: &LatentGrid,
    out_shape: [usize; 3],
) -> Result<Vec<f64>> {
    let [d, h, w] = out_shape;
    let total = d * h * w;
    let mut values = Vec::with_capacity(total);
    let mut coords = Vec::with_capacity(DECODE_CHUNK * 3);
    let flush = |tape: &mut Tape, coords: &mut Vec<f64>, values: &mut Vec<f64>| -> Result<()> {
        if coords.is_empty() {
            return Ok(());
        }
        let n = coords.len() / 3;
        let pts = tape.constant(std::mem::take(coords), &[n, 3]);
        let out = decode_sdf(tape, mlp, mlp_vars, z, pts)?;
        values.extend_from_slice(tape.value(out));
        Ok(())
    };
    for zd in 0..d {
        for y in 0..h {
            for x in 0..w {
                coords.push(voxel_center_coord(zd, d));
                coords.push(voxel_center_coord(y, h));
                coords.push(voxel_center_coord(x, w));
                if coords.len() == DECODE_CHUNK * 3 {
                    flush(tape, &mut coords, &mut values)?;
                }
            }
        }
    }
    flush(tape, &mut coords, &mut values)?;
    Ok(values)
}
