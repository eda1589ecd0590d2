//! The full growth model: encoder, time-conditioned ConvLSTM, and the
//! shared neural-field decoder, with the training loss.

pub mod checkpoint;
mod convlstm;
mod encoder;
mod trainer;

pub use convlstm::{ConvLstm3d, ConvLstmLayer};
pub use encoder::{Conv3dLayer, Encoder};
pub use trainer::{per_case_losses, resume_training, train, EpochLog, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{decode_full_grid, decode_sdf, DecoderMlp, LatentGrid};
use crate::sdf::{sample_training_points, SdfGrid};
use crate::temporal::{concat_code_to_grid, temporal_encode, ScanTimeline};

/// How inter-scan intervals condition the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Sinusoidal interval code of the configured order.
    Encoded,
    /// The raw interval as a single extra channel (ablation).
    RawTau,
    /// No time conditioning at all (ablation).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent channel count C.
    pub channels: usize,
    /// Spatial downsampling factor s (power of two).
    pub downsample: usize,
    /// Temporal encoding order l (code length 2l).
    pub encoding_order: usize,
    pub time_mode: TimeMode,
    /// Dropout rate on the time code during training.
    pub dropout_rate: f64,
    /// Sine frequency of the first decoder layer.
    pub omega_first: f64,
    pub decoder_hidden: usize,
    pub encoder_stem: usize,
    pub convlstm_layers: usize,
    pub convlstm_hidden: usize,
    /// Training crop (D,H,W).
    pub crop: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            downsample: 4,
            encoding_order: 6,
            time_mode: TimeMode::Encoded,
            dropout_rate: 0.1,
            omega_first: 30.0,
            decoder_hidden: 64,
            encoder_stem: 16,
            convlstm_layers: 3,
            convlstm_hidden: 32,
            crop: [32, 32, 32],
        }
    }
}

impl ModelConfig {
    /// Extra channels appended to each latent before the recurrence.
    pub fn time_code_len(&self) -> usize {
        match self.time_mode {
            TimeMode::Encoded => 2 * self.encoding_order,
            TimeMode::RawTau => 1,
            TimeMode::None => 0,
        }
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        [
            self.crop[0] / self.downsample,
            self.crop[1] / self.downsample,
            self.crop[2] / self.downsample,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(Error::invalid(
                "model_config",
                format!("downsample {} must be a power of two", self.downsample),
            ));
        }
        if self.crop.iter().any(|&d| d == 0 || d % self.downsample != 0) {
            return Err(Error::invalid(
                "model_config",
                format!(
                    "crop {:?} must be divisible by downsample {}",
                    self.crop, self.downsample
                ),
            ));
        }
        if self.latent_dims().iter().any(|&d| d < 2) {
            return Err(Error::invalid(
                "model_config",
                format!("latent dims {:?} too small to interpolate", self.latent_dims()),
            ));
        }
        if self.time_mode == TimeMode::Encoded && self.encoding_order == 0 {
            return Err(Error::invalid(
                "model_config",
                "encoding_order must be >= 1 when time_mode is encoded",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "model_config",
                format!("dropout_rate {} not in [0,1)", self.dropout_rate),
            ));
        }
        if self.channels == 0
            || self.decoder_hidden == 0
            || self.encoder_stem == 0
            || self.convlstm_layers == 0
            || self.convlstm_hidden == 0
        {
            return Err(Error::invalid("model_config", "widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_reg: f64,
    /// Points sampled per tumor per step.
    pub n_points: usize,
    /// Target clamp in voxel units.
    pub clamp_dist: f64,
    pub near_surface_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rec: 1.0,
            lambda_reg: 0.1,
            n_points: 4096,
            clamp_dist: 8.0,
            near_surface_fraction: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_rec < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::invalid("loss_config", "loss weights must be >= 0"));
        }
        if self.n_points == 0 {
            return Err(Error::invalid("loss_config", "n_points must be >= 1"));
        }
        if !(self.clamp_dist > 0.0) {
            return Err(Error::invalid("loss_config", "clamp_dist must be positive"));
        }
        if !(0.0..=1.0).contains(&self.near_surface_fraction) {
            return Err(Error::invalid(
                "loss_config",
                "near_surface_fraction must be in [0,1]",
            ));
        }
        Ok(())
    }
}

/// One case lowered to plain tensors for training: N scans with masks,
/// signed distance targets, and the normalized timeline.
#[derive(Debug, Clone)]
pub struct CaseTensors {
    pub case_id: String,
    pub dims: [usize; 3],
    pub scans: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub sdfs: Vec<SdfGrid>,
    pub timeline: ScanTimeline,
}

impl CaseTensors {
    pub fn num_scans(&self) -> usize {
        self.scans.len()
    }

    pub fn validate(&self, crop: [usize; 3]) -> Result<()> {
        let n = self.scans.len();
        if n < 2 {
            return Err(Error::invalid(
                "case_tensors",
                format!("case {} has {n} scans, need at least 2", self.case_id),
            ));
        }
        if self.dims != crop {
            return Err(Error::invalid(
                "case_tensors",
                format!(
                    "case {} dims {:?} do not match crop {:?}",
                    self.case_id, self.dims, crop
                ),
            ));
        }
        let v = crop[0] * crop[1] * crop[2];
        let lens_ok = self.masks.len() == n
            && self.sdfs.len() == n
            && self.timeline.normalized.len() == n
            && self.scans.iter().all(|s| s.len() == v)
            && self.masks.iter().all(|m| m.len() == v)
            && self.sdfs.iter().all(|s| s.dims == crop);
        if !lens_ok {
            return Err(Error::invalid(
                "case_tensors",
                format!("case {} has inconsistent tensor sizes", self.case_id),
            ));
        }
        Ok(())
    }
}

/// Tape handles of all registered parameters, grouped by component. The
/// flattened order matches `GrowthModel::named_tensors`.
pub struct ModelVars {
    pub encoder: Vec<Var>,
    pub lstm: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.lstm)
            .chain(&self.decoder)
            .copied()
    }
}

pub struct CaseForward {
    /// Encoder latents for the N-1 input scans.
    pub input_latents: Vec<LatentGrid>,
    /// The recurrence's prediction for the target scan.
    pub predicted: LatentGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub l_rec: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub lstm: ConvLstm3d,
    pub decoder: DecoderMlp,
}

impl GrowthModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(
            config.channels,
            config.downsample,
            config.encoder_stem,
            &mut rng,
        )?;
        let lstm = ConvLstm3d::init(
            config.convlstm_layers,
            config.channels + config.time_code_len(),
            config.convlstm_hidden,
            config.channels,
            &mut rng,
        )?;
        let decoder = DecoderMlp::init(
            config.channels,
            config.decoder_hidden,
            config.omega_first,
            &mut rng,
        );
        Ok(GrowthModel {
            config,
            encoder,
            lstm,
            decoder,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.lstm.named_tensors());
        out.extend(self.decoder.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(self.lstm.named_tensors_mut());
        out.extend(self.decoder.named_tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.register(tape, trainable),
            lstm: self.lstm.register(tape, trainable),
            decoder: self.decoder.register(tape, trainable),
        }
    }

    /// Encode one (scan, mask) pair into a latent grid.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        scan: &[f64],
        mask: &[f64],
    ) -> Result<LatentGrid> {
        let [d, h, w] = self.config.crop;
        let v = d * h * w;
        if scan.len() != v || mask.len() != v {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![scan.len()],
                rhs: vec![v],
            });
        }
        let mut joined = Vec::with_capacity(2 * v);
        joined.extend_from_slice(scan);
        joined.extend_from_slice(mask);
        let x = tape.constant(joined, &[2, d, h, w]);
        let z = self.encoder.forward(tape, &vars.encoder, x)?;
        LatentGrid::new(tape, z)
    }

    /// Roll the latent sequence forward. `timeline` includes the target
    /// date, so the last step is conditioned on the prediction interval.
    pub fn predict_latent(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        latents: &[LatentGrid],
        timeline: &ScanTimeline,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<LatentGrid> {
        if latents.is_empty() {
            return Err(Error::invalid(
                "predict_latent",
                "need at least one input latent (N >= 2)",
            ));
        }
        let taus = timeline.intervals();
        if taus.len() != latents.len() {
            return Err(Error::invalid(
                "predict_latent",
                format!(
                    "timeline has {} intervals for {} input latents",
                    taus.len(),
                    latents.len()
                ),
            ));
        }
        let mut steps = Vec::with_capacity(latents.len());
        for (z, &tau) in latents.iter().zip(&taus) {
            let step = match self.config.time_mode {
                TimeMode::Encoded => {
                    let code = temporal_encode(tau, self.config.encoding_order)?;
                    concat_code_to_grid(
                        tape,
                        z.var,
                        &code.code,
                        self.config.dropout_rate,
                        training,
                        rng,
                    )?
                }
                TimeMode::RawTau => concat_code_to_grid(
                    tape,
                    z.var,
                    &[tau],
                    self.config.dropout_rate,
                    training,
                    rng,
                )?,
                TimeMode::None => z.var,
            };
            steps.push(step);
        }
        let out = self.lstm.forward(tape, &vars.lstm, &steps)?;
        LatentGrid::new(tape, out)
    }

    /// Encode the N-1 input scans and predict the target latent.
    pub fn forward_case(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        case: &CaseTensors,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<CaseForward> {
        case.validate(self.config.crop)?;
        let n = case.num_scans();
        let mut input_latents = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            input_latents.push(self.encode(tape, vars, &case.scans[t], &case.masks[t])?);
        }
        let predicted =
            self.predict_latent(tape, vars, &input_latents, &case.timeline, training, rng)?;
        Ok(CaseForward {
            input_latents,
            predicted,
        })
    }

    /// Eq-style training loss: L_rec averages the per-tumor point losses
    /// over all N tumors (inputs decoded from their own latents, the target
    /// from the prediction); L_reg is the mean norm of the N-1 encoder
    /// latents. Returns the scalar node and the reported parts.
    pub fn compute_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        case: &CaseTensors,
        fwd: &CaseForward,
        cfg: &LossConfig,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossParts)> {
        cfg.validate()?;
        let n = case.num_scans();
        let mut rec_sum: Option<Var> = None;
        for t in 0..n {
            let latent = if t + 1 < n {
                &fwd.input_latents[t]
            } else {
                &fwd.predicted
            };
            let pts = sample_training_points(
                &case.sdfs[t],
                cfg.n_points,
                cfg.near_surface_fraction,
                cfg.clamp_dist,
                rng,
            )?;
            let mut coords = Vec::with_capacity(pts.len() * 3);
            let mut targets = Vec::with_capacity(pts.len());
            for p in &pts {
                coords.extend_from_slice(&p.coords);
                targets.push(p.target_sdf);
            }
            let cvar = tape.constant(coords, &[pts.len(), 3]);
            let tvar = tape.constant(targets, &[pts.len(), 1]);
            let decoded = decode_sdf(tape, &self.decoder, &vars.decoder, latent, cvar)?;
            let term = tape.l1_mean(decoded, tvar)?;
            rec_sum = Some(match rec_sum {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let l_rec = tape.scale(rec_sum.expect("n >= 2"), 1.0 / n as f64);
        let latent_vars: Vec<Var> = fwd.input_latents.iter().map(|z| z.var).collect();
        let l_reg = tape.l2_norm_mean(&latent_vars)?;
        let weighted_rec = tape.scale(l_rec, cfg.lambda_rec);
        let weighted_reg = tape.scale(l_reg, cfg.lambda_reg);
        let total = tape.add(weighted_rec, weighted_reg)?;
        let parts = LossParts {
            l_rec: tape.value(l_rec)[0],
            l_reg: tape.value(l_reg)[0],
            total: tape.value(total)[0],
        };
        Ok((total, parts))
    }

    /// Inference: predict the target scan's signed distance grid at crop
    /// resolution from the N-1 input scans.
    pub fn predict_sdf_grid(
        &self,
        scans: &[Vec<f64>],
        masks: &[Vec<f64>],
        timeline: &ScanTimeline,
    ) -> Result<Vec<f64>> {
        if scans.len() != masks.len() || scans.is_empty() {
            return Err(Error::invalid(
                "predict_sdf_grid",
                "need equal, nonzero numbers of scans and masks",
            ));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut latents = Vec::with_capacity(scans.len());
        for (scan, mask) in scans.iter().zip(masks) {
            latents.push(self.encode(&mut tape, &vars, scan, mask)?);
        }
        let predicted =
            self.predict_latent(&mut tape, &vars, &latents, timeline, false, &mut rng)?;
        decode_full_grid(
            &mut tape,
            &self.decoder,
            &vars.decoder,
            &predicted,
            self.config.crop,
        )
    }
}
