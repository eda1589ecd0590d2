use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};

use super::{CaseTensors, GrowthModel, LossConfig, LossParts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train_config", "lr must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train_config", "betas must be in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("train_config", "eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Means over the epoch's cases.
    pub l_rec: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Every random draw a case consumes in one epoch comes from this stream,
/// so per-case behavior depends only on (seed, case_id, epoch).
fn case_stream_seed(seed: u64, case_id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in case_id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.rotate_left(17) ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

fn run_case(
    model: &GrowthModel,
    case: &CaseTensors,
    loss_cfg: &LossConfig,
    seed: u64,
    epoch: usize,
    trainable: bool,
) -> Result<(Tape, crate::autodiff::Var, Vec<crate::autodiff::Var>, LossParts)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(case_stream_seed(seed, &case.case_id, epoch));
    let fwd = model.forward_case(&mut tape, &vars, case, true, &mut rng)?;
    let (total, parts) = model.compute_loss(&mut tape, &vars, case, &fwd, loss_cfg, &mut rng)?;
    let ordered: Vec<_> = vars.all().collect();
    Ok((tape, total, ordered, parts))
}

/// Loss of each case at the model's current parameters, using the same
/// random streams as training epoch `epoch`. No updates happen, so the
/// result is independent of case order.
pub fn per_case_losses(
    model: &GrowthModel,
    cases: &[CaseTensors],
    loss_cfg: &LossConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(String, LossParts)>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let (_, _, _, parts) = run_case(model, case, loss_cfg, seed, epoch, false)?;
        out.push((case.case_id.clone(), parts));
    }
    Ok(out)
}

fn mean_log(epoch: usize, parts: &[LossParts]) -> EpochLog {
    let n = parts.len() as f64;
    EpochLog {
        epoch,
        l_rec: parts.iter().map(|p| p.l_rec).sum::<f64>() / n,
        l_reg: parts.iter().map(|p| p.l_reg).sum::<f64>() / n,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

/// Adam training over whole cases, one case per step. Epoch 0 is an
/// evaluation pass at the initial parameters; epochs 1..=epochs update.
/// `on_epoch` runs after each epoch with the log and the current state.
pub fn train(
    model: &mut GrowthModel,
    cases: &[CaseTensors],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &GrowthModel, &Adam) -> Result<()>,
) -> Result<(Vec<EpochLog>, Adam)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("train", "no cases"));
    }
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, _, t)| t.len()).collect();
    let mut optimizer = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, &sizes);
    let mut logs = Vec::with_capacity(cfg.epochs + 1);

    let mut initial = Vec::with_capacity(cases.len());
    for case in cases {
        let bad = |lr| Error::NonFiniteLoss {
            epoch: 0,
            case_id: case.case_id.clone(),
            lr,
        };
        let parts = match run_case(model, case, loss_cfg, cfg.seed, 0, false) {
            Ok((_, _, _, parts)) => parts,
            Err(Error::NonFiniteValue { .. }) => return Err(bad(cfg.lr)),
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() {
            return Err(bad(cfg.lr));
        }
        initial.push(parts);
    }
    let log = mean_log(0, &initial);
    on_epoch(&log, model, &optimizer)?;
    logs.push(log);

    logs.extend(resume_training(
        model,
        &mut optimizer,
        1,
        cases,
        loss_cfg,
        cfg,
        on_epoch,
    )?);
    Ok((logs, optimizer))
}

/// Continue training from `first_epoch` through `cfg.epochs` with an
/// existing optimizer. No initial evaluation pass; epoch numbering and
/// per-case random streams line up with an uninterrupted run.
pub fn resume_training(
    model: &mut GrowthModel,
    optimizer: &mut Adam,
    first_epoch: usize,
    cases: &[CaseTensors],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &GrowthModel, &Adam) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("train", "no cases"));
    }
    if first_epoch == 0 {
        return Err(Error::invalid("train", "first_epoch must be >= 1"));
    }
    let mut logs = Vec::new();
    for epoch in first_epoch..=cfg.epochs {
        let mut epoch_parts = Vec::with_capacity(cases.len());
        for case in cases {
            let (mut tape, total, ordered, parts) =
                match run_case(model, case, loss_cfg, cfg.seed, epoch, true) {
                    Ok(x) => x,
                    Err(Error::NonFiniteValue { .. }) => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            case_id: case.case_id.clone(),
                            lr: cfg.lr,
                        })
                    }
                    Err(e) => return Err(e),
                };
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    case_id: case.case_id.clone(),
                    lr: cfg.lr,
                });
            }
            tape.backward(total)?;
            let grads: Vec<Vec<f64>> = ordered
                .iter()
                .map(|&v| match tape.grad(v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(v).len()],
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut named = model.named_tensors_mut();
            let mut param_refs: Vec<&mut [f64]> =
                named.iter_mut().map(|(_, t)| t.as_mut_slice()).collect();
            optimizer.step(&mut param_refs, &grad_refs)?;
            epoch_parts.push(parts);
        }
        let log = mean_log(epoch, &epoch_parts);
        on_epoch(&log, model, optimizer)?;
        logs.push(log);
    }
    Ok(logs)
}
