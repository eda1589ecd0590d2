//! Scan-date normalization and sinusoidal interval encoding.
//!
//! Scan dates are normalized against a dataset-level horizon so intervals
//! are comparable across cases. An interval tau in [0,1] is encoded as
//! (sin(2^k pi tau), cos(2^k pi tau)) for k = 0..l-1 and broadcast-
//! concatenated onto every spatial position of a latent grid.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTimeline {
    pub dates_days: Vec<i64>,
    pub normalized: Vec<f64>,
}

impl ScanTimeline {
    /// Interval tau_i = normalized[i+1] - normalized[i].
    pub fn intervals(&self) -> Vec<f64> {
        self.normalized.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCode {
    pub tau: f64,
    pub order: usize,
    pub code: Vec<f64>,
}

/// D_t = (date_t - date_1) / horizon_days.
pub fn normalize_dates(dates_days: &[i64], horizon_days: i64) -> Result<ScanTimeline> {
    if dates_days.is_empty() {
        return Err(Error::invalid("normalize_dates", "no dates"));
    }
    if dates_days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "normalize_dates",
            format!("dates must be strictly increasing, got {dates_days:?}"),
        ));
    }
    let span = dates_days.last().unwrap() - dates_days[0];
    if horizon_days < span || horizon_days <= 0 {
        return Err(Error::invalid(
            "normalize_dates",
            format!("horizon {horizon_days} shorter than observed span {span}"),
        ));
    }
    let first = dates_days[0];
    let normalized = dates_days
        .iter()
        .map(|&d| (d - first) as f64 / horizon_days as f64)
        .collect();
    Ok(ScanTimeline {
        dates_days: dates_days.to_vec(),
        normalized,
    })
}

pub fn temporal_encode(tau: f64, order: usize) -> Result<TemporalCode> {
    if order == 0 {
        return Err(Error::invalid("temporal_encode", "order must be >= 1"));
    }
    let mut code = Vec::with_capacity(2 * order);
    for k in 0..order {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * tau;
        code.push(arg.sin());
        code.push(arg.cos());
    }
    Ok(TemporalCode {
        tau,
        order,
        code,
    })
}

/// Append the (dropout-processed) code to every spatial position of
/// `z: [C,d,h,w]`, giving `[C+len,d,h,w]`. Dropout draws one mask for the
/// code vector and broadcasts it, so every position carries the same
/// channels.
pub fn concat_code_to_grid(
    tape: &mut Tape,
    z: Var,
    code: &[f64],
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "concat_code_to_grid",
            format!("latent grid must be [C,d,h,w], got {shape:?}"),
        ));
    }
    let code_var = tape.constant(code.to_vec(), &[code.len()]);
    let dropped = tape.dropout(code_var, dropout_rate, training, rng)?;
    let spatial = shape[1] * shape[2] * shape[3];
    let mut broadcast = Vec::with_capacity(code.len() * spatial);
    for &v in tape.value(dropped) {
        broadcast.extend(std::iter::repeat_n(v, spatial));
    }
    let code_grid = tape.constant(broadcast, &[code.len(), shape[1], shape[2], shape[3]]);
    tape.concat(z, code_grid, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_examples() {
        let t = normalize_dates(&[0, 365, 730], 730).unwrap();
        assert_eq!(t.normalized, vec![0.0, 0.5, 1.0]);
        assert_eq!(t.intervals(), vec![0.5, 0.5]);

        let t = normalize_dates(&[0, 180], 720).unwrap();
        assert_eq!(t.normalized, vec![0.0, 0.25]);

        // First scan need not sit at day zero.
        let t = normalize_dates(&[100, 465], 730).unwrap();
        assert_eq!(t.normalized[0], 0.0);
        assert_eq!(t.normalized[1], 0.5);
    }

    #[test]
    fn normalization_rejects_bad_timelines() {
        assert!(normalize_dates(&[0, 180, 180], 720).is_err());
        assert!(normalize_dates(&[0, 200, 100], 720).is_err());
        assert!(normalize_dates(&[0, 800], 730).is_err());
        assert!(normalize_dates(&[], 730).is_err());
    }

    #[test]
    fn encoding_examples() {
        let c = temporal_encode(0.0, 3).unwrap();
        assert_eq!(c.code, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let c = temporal_encode(0.5, 2).unwrap();
        let want = [1.0, 0.0, 0.0, -1.0];
        for (got, want) in c.code.iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{:?}", c.code);
        }

        let c = temporal_encode(0.25, 1).unwrap();
        for got in &c.code {
            assert!(
                (got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9,
                "{:?}",
                c.code
            );
        }

        assert!(temporal_encode(0.5, 0).is_err());
    }

    #[test]
    fn codes_stay_bounded_and_sized() {
        for l in 1..=8 {
            for i in 0..=100 {
                let tau = i as f64 / 100.0;
                let c = temporal_encode(tau, l).unwrap();
                assert_eq!(c.code.len(), 2 * l);
                assert!(c.code.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn encoding_separates_distinct_intervals() {
        for l in 1..=6 {
            let mut tau = 0.0;
            while tau < 1.0 - 1e-3 {
                let a = temporal_encode(tau, l).unwrap();
                let b = temporal_encode(tau + 1e-3, l).unwrap();
                let dist: f64 = a
                    .code
                    .iter()
                    .zip(&b.code)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.0, "codes collide at tau {tau}, l {l}");
                tau += 0.037;
            }
        }
    }

    #[test]
    fn broadcast_concat_appends_identical_codes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zvals: Vec<f64> = (0..2 * 8).map(|v| v as f64).collect();
        let z = tape.param(&zvals, &[2, 2, 2, 2]);
        let code = temporal_encode(0.3, 2).unwrap();
        let out = concat_code_to_grid(&mut tape, z, &code.code, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.shape(out), &[6, 2, 2, 2]);
        let v = tape.value(out);
        assert_eq!(&v[..16], &zvals[..], "latent channels unchanged");
        for (k, want) in code.code.iter().enumerate() {
            for s in 0..8 {
                assert_eq!(v[16 + k * 8 + s], *want, "code channel {k} position {s}");
            }
        }
    }

    #[test]
    fn inference_concat_is_exact_and_training_masks_whole_channels() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = tape.param(&vec![0.0; 27], &[1, 3, 3, 3]);
        let code = temporal_encode(0.4, 3).unwrap();
        let out = concat_code_to_grid(&mut tape, z, &code.code, 0.9, false, &mut rng).unwrap();
        let v = tape.value(out);
        for (k, want) in code.code.iter().enumerate() {
            for s in 0..27 {
                assert_eq!(v[27 + k * 27 + s], *want);
            }
        }

        // With dropout active the mask is drawn once for the code vector,
        // so each appended channel is constant over space.
        let out = concat_code_to_grid(&mut tape, z, &code.code, 0.5, true, &mut rng).unwrap();
        let v = tape.value(out);
        for k in 0..6 {
            let channel = &v[27 + k * 27..27 + (k + 1) * 27];
            assert!(
                channel.iter().all(|&x| x == channel[0]),
                "channel {k} not constant: {channel:?}"
            );
        }
    }
}
