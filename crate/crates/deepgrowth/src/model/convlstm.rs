//! Convolutional LSTM over latent grids, with a 1x1x1 readout projecting the
//! final hidden state back to latent channels.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::encoder::Conv3dLayer;

/// One cell: a fused gate convolution over concat(x, h) producing the four
/// gates stacked along channels in (input, forget, candidate, output) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmLayer {
    pub gates: Conv3dLayer,
    pub in_channels: usize,
    pub hidden: usize,
}

impl ConvLstmLayer {
    pub fn init(index: usize, in_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut gates = Conv3dLayer::init(
            &format!("convlstm.l{index}.gates"),
            in_channels + hidden,
            4 * hidden,
            3,
            1,
            1,
            rng,
        );
        // Forget-gate bias starts positive so early sequences retain state.
        for b in gates.bias[hidden..2 * hidden].iter_mut() {
            *b = 1.0;
        }
        ConvLstmLayer {
            gates,
            in_channels,
            hidden,
        }
    }

    /// One recurrent step. `x: [in,d,h,w]`, states `[hidden,d,h,w]`.
    /// Returns (h', c').
    fn step(
        &self,
        tape: &mut Tape,
        wvar: Var,
        bvar: Var,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let joined = tape.concat(x, h, 0)?;
        let gates = self.gates.forward(tape, wvar, bvar, joined)?;
        let hc = self.hidden;
        let i_raw = tape.narrow(gates, 0, 0, hc)?;
        let f_raw = tape.narrow(gates, 0, hc, hc)?;
        let g_raw = tape.narrow(gates, 0, 2 * hc, hc)?;
        let o_raw = tape.narrow(gates, 0, 3 * hc, hc)?;
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let retained = tape.mul(f, c)?;
        let written = tape.mul(i, g)?;
        let c_next = tape.add(retained, written)?;
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act)?;
        Ok((h_next, c_next))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstm3d {
    pub layers: Vec<ConvLstmLayer>,
    pub readout: Conv3dLayer,
}

impl ConvLstm3d {
    /// `in_channels` is the latent channel count plus any time-code
    /// channels; `out_channels` is the latent channel count the readout
    /// restores.
    pub fn init(
        num_layers: usize,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 {
            return Err(Error::invalid(
                "convlstm",
                "layer count and hidden width must be positive",
            ));
        }
        let layers = (0..num_layers)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { hidden };
                ConvLstmLayer::init(i, cin, hidden, rng)
            })
            .collect();
        let readout = Conv3dLayer::init("convlstm.readout", hidden, out_channels, 1, 1, 0, rng);
        Ok(ConvLstm3d { layers, readout })
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| l.gates.named_tensors())
            .collect();
        out.extend(self.readout.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<_> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.gates.named_tensors_mut())
            .collect();
        out.extend(self.readout.named_tensors_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut vars: Vec<Var> = self
            .layers
            .iter()
            .flat_map(|l| {
                let (w, b) = l.gates.register(tape, trainable);
                [w, b]
            })
            .collect();
        let (w, b) = self.readout.register(tape, trainable);
        vars.push(w);
        vars.push(b);
        vars
    }

    /// Run the whole sequence (already time-conditioned inputs, one per
    /// step) and project the final hidden state. States are zero per
    /// sequence.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], steps: &[Var]) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() + 2 {
            return Err(Error::invalid(
                "convlstm_forward",
                format!(
                    "expected {} tensors, got {}",
                    2 * self.layers.len() + 2,
                    vars.len()
                ),
            ));
        }
        if steps.is_empty() {
            return Err(Error::invalid("convlstm_forward", "empty sequence"));
        }
        let spatial = tape.shape(steps[0])[1..].to_vec();
        let mut states: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|l| {
                let n = l.hidden * spatial.iter().product::<usize>();
                let shape = [&[l.hidden], &spatial[..]].concat();
                let h = tape.constant(vec![0.0; n], &shape);
                let c = tape.constant(vec![0.0; n], &shape);
                (h, c)
            })
            .collect();
        let mut last_h = states[0].0;
        for &x in steps {
            let mut carry = x;
            for (li, layer) in self.layers.iter().enumerate() {
                let (h, c) = states[li];
                let (h2, c2) = layer.step(tape, vars[2 * li], vars[2 * li + 1], carry, h, c)?;
                states[li] = (h2, c2);
                carry = h2;
            }
            last_h = carry;
        }
        let n = vars.len();
        self.readout.forward(tape, vars[n - 2], vars[n - 1], last_h)
    }
}
