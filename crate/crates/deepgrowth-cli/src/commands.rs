//! The six subcommands. Each resolves its configuration, runs, and writes
//! the resolved config next to its outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use deepgrowth::cohort::dgvol::{read_volume, write_volume, VolumeData};
use deepgrowth::cohort::{
    generate_cohort, load_case, load_manifest, load_split, sha256_hex, CohortManifest,
    LongitudinalCase,
};
use deepgrowth::eval::{build_report, evaluate_cases, predict_case_sdf, report_csv};
use deepgrowth::model::checkpoint::{ensure_config, load_checkpoint, save_checkpoint, Checkpoint};
use deepgrowth::model::{
    resume_training, train as train_model, EpochLog, GrowthModel, TimeMode,
};
use deepgrowth::sdf::sdf_to_mask;
use deepgrowth::{Error, Result};

use crate::config::RunConfig;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::io(context, e)
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Cohort directory to create
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config; DEEPGROWTH_CONFIG is used when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the configured case count
    #[arg(long)]
    pub cases: Option<usize>,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(cases) = args.cases {
        cfg.cohort.cases = cases;
    }
    let manifest = generate_cohort(&cfg.cohort, args.seed, &args.out)?;
    cfg.write_resolved(&args.out)?;
    let split_sizes: Vec<String> = manifest
        .splits
        .iter()
        .map(|(name, ids)| format!("{name} {}", ids.len()))
        .collect();
    println!(
        "cohort: {} cases of {} scans, shape {:?}, horizon {} days, splits {}",
        manifest.cases.len(),
        manifest.scans_per_case,
        manifest.shape,
        manifest.horizon_days,
        split_sizes.join(" / "),
    );
    println!("wrote {}", args.out.join("manifest.json").display());
    Ok(())
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Cohort directory (from `deepgrowth synth`)
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoint, loss log, and resolved config
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Continue from an earlier checkpoint (optimizer state required)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub encoding_order: Option<usize>,
    /// Feed the raw interval as a single channel instead of the
    /// sinusoidal code
    #[arg(long)]
    pub no_temporal_encoding: bool,
    /// Alias of --no-temporal-encoding
    #[arg(long)]
    pub raw_tau: bool,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.channels {
        cfg.model.channels = v;
    }
    if let Some(v) = args.downsample {
        cfg.model.downsample = v;
    }
    if let Some(v) = args.encoding_order {
        cfg.model.encoding_order = v;
    }
    if args.no_temporal_encoding || args.raw_tau {
        cfg.model.time_mode = TimeMode::RawTau;
    }

    let manifest = load_manifest(&args.dataset)?;
    if cfg.model.crop != manifest.shape {
        return Err(Error::ConfigMismatch(format!(
            "model crop {:?} does not match dataset shape {:?}",
            cfg.model.crop, manifest.shape
        )));
    }
    let cases = load_split(&args.dataset, &manifest, &args.split)?;
    let tensors = cases
        .iter()
        .map(|c| c.to_tensors(manifest.horizon_days))
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&args.out)
        .map_err(io_err(format!("creating {}", args.out.display())))?;
    cfg.write_resolved(&args.out)?;
    let log_path = args.out.join("loss_log.csv");
    let ckpt_path = args.out.join("model.ckpt");

    let mut log_file = if args.resume.is_some() && log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err(format!("opening {}", log_path.display())))?
    } else {
        let mut f = fs::File::create(&log_path)
            .map_err(io_err(format!("creating {}", log_path.display())))?;
        f.write_all(b"epoch,l_rec,l_reg,total\n")
            .map_err(io_err(format!("writing {}", log_path.display())))?;
        f
    };
    let mut record = |log: &EpochLog| -> Result<()> {
        writeln!(
            log_file,
            "{},{},{},{}",
            log.epoch, log.l_rec, log.l_reg, log.total
        )
        .map_err(io_err(format!("writing {}", log_path.display())))
    };

    let final_loss;
    match args.resume {
        None => {
            let mut model = GrowthModel::init(cfg.model.clone(), cfg.train.seed)?;
            let (logs, optimizer) =
                train_model(&mut model, &tensors, &cfg.loss, &cfg.train, |log, _, _| {
                    record(log)
                })?;
            final_loss = logs.last().map(|l| l.total);
            save_checkpoint(&ckpt_path, &model, Some(&optimizer))?;
        }
        Some(from) => {
            let Checkpoint { mut model, optimizer } = load_checkpoint(&from)?;
            ensure_config(&cfg.model, &model.config)?;
            let state = optimizer.ok_or_else(|| {
                Error::ConfigMismatch(format!(
                    "{} has no optimizer state to resume from",
                    from.display()
                ))
            })?;
            if state.step_count % tensors.len() as u64 != 0 {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint took {} steps, not a multiple of {} cases",
                    state.step_count,
                    tensors.len()
                )));
            }
            let done = (state.step_count / tensors.len() as u64) as usize;
            if done >= cfg.train.epochs {
                return Err(Error::invalid(
                    "train",
                    format!(
                        "checkpoint already trained {done} epochs, target is {}",
                        cfg.train.epochs
                    ),
                ));
            }
            let mut adam = state.into_adam(
                cfg.train.lr,
                cfg.train.beta1,
                cfg.train.beta2,
                cfg.train.eps,
            )?;
            let logs = resume_training(
                &mut model,
                &mut adam,
                done + 1,
                &tensors,
                &cfg.loss,
                &cfg.train,
                |log, _, _| record(log),
            )?;
            final_loss = logs.last().map(|l| l.total);
            save_checkpoint(&ckpt_path, &model, Some(&adam))?;
        }
    }

    let ckpt_bytes = fs::read(&ckpt_path)
        .map_err(io_err(format!("reading {}", ckpt_path.display())))?;
    println!(
        "trained {} epochs on {} cases, final loss {}",
        cfg.train.epochs,
        tensors.len(),
        final_loss.map_or(String::from("-"), |l| format!("{l:.6}")),
    );
    println!(
        "checkpoint {} ({})",
        ckpt_path.display(),
        &sha256_hex(&ckpt_bytes)[..12]
    );
    Ok(())
}

fn load_model_and_case(
    checkpoint: &Path,
    dataset: &Path,
    case_id: &str,
) -> Result<(GrowthModel, CohortManifest, LongitudinalCase)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(dataset)?;
    let case = load_case(dataset, &manifest, case_id)?;
    Ok((ckpt.model, manifest, case))
}

fn write_inference_config(model: &GrowthModel, dir: &Path) -> Result<()> {
    let cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    cfg.write_resolved(dir)?;
    Ok(())
}

#[derive(clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Case id within the dataset
    #[arg(long)]
    pub case: String,
    /// Query date in days, on the case's own date axis; must lie after
    /// the last scan
    #[arg(long)]
    pub target_days: i64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let (model, manifest, case) =
        load_model_and_case(&args.checkpoint, &args.dataset, &args.case)?;
    let sdf = predict_case_sdf(
        &model,
        &case,
        manifest.horizon_days,
        case.num_scans(),
        Some(args.target_days),
    )?;
    let values: Vec<f32> = sdf.values.iter().map(|&v| v as f32).collect();
    // Mask from the values as stored, so the two files agree exactly.
    let stored = deepgrowth::sdf::SdfGrid {
        dims: sdf.dims,
        values: values.iter().map(|&v| v as f64).collect(),
    };
    let mask = sdf_to_mask(&stored, case.spacing_mm);

    fs::create_dir_all(&args.out)
        .map_err(io_err(format!("creating {}", args.out.display())))?;
    let sdf_path = args.out.join(format!("pred_sdf_{}_day{}.bin", args.case, args.target_days));
    let mask_path = args.out.join(format!("pred_mask_{}_day{}.bin", args.case, args.target_days));
    write_volume(&sdf_path, sdf.dims, &VolumeData::F32(values))?;
    write_volume(&mask_path, mask.dims, &VolumeData::U8(mask.occupancy.clone()))?;
    write_inference_config(&model, &args.out)?;
    println!(
        "case {} at day {}: volume {:.1} mm3",
        args.case,
        args.target_days,
        mask.volume_mm3()
    );
    println!("wrote {} and {}", sdf_path.display(), mask_path.display());
    Ok(())
}

#[derive(clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub case: String,
    /// First query date in days
    #[arg(long)]
    pub start_days: i64,
    /// Spacing between query dates in days
    #[arg(long)]
    pub step_days: i64,
    /// Number of query dates
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sweep_time(args: SweepArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::invalid("sweep-time", "count must be >= 1"));
    }
    if args.step_days <= 0 {
        return Err(Error::invalid("sweep-time", "step-days must be positive"));
    }
    let (model, manifest, case) =
        load_model_and_case(&args.checkpoint, &args.dataset, &args.case)?;
    fs::create_dir_all(&args.out)
        .map_err(io_err(format!("creating {}", args.out.display())))?;

    let mut curve = String::from("days,volume_mm3\n");
    for k in 0..args.count {
        let days = args.start_days + k as i64 * args.step_days;
        let sdf = predict_case_sdf(&model, &case, manifest.horizon_days, case.num_scans(), Some(days))?;
        let mask = sdf_to_mask(&sdf, case.spacing_mm);
        let mask_path = args.out.join(format!("mask_day{days}.bin"));
        write_volume(&mask_path, mask.dims, &VolumeData::U8(mask.occupancy.clone()))?;
        curve.push_str(&format!("{days},{}\n", mask.volume_mm3()));
    }
    let curve_path = args.out.join("volumes.csv");
    fs::write(&curve_path, curve)
        .map_err(io_err(format!("writing {}", curve_path.display())))?;
    write_inference_config(&model, &args.out)?;
    println!(
        "swept case {} over {} dates from day {} (step {}), wrote {}",
        args.case,
        args.count,
        args.start_days,
        args.step_days,
        curve_path.display()
    );
    Ok(())
}

#[derive(clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Fraction of cases, by absolute relative volume change, forming the
    /// top-growers section
    #[arg(long, default_value_t = 0.2)]
    pub top_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt_bytes = fs::read(&args.checkpoint)
        .map_err(io_err(format!("reading {}", args.checkpoint.display())))?;
    let hash = sha256_hex(&ckpt_bytes);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = load_manifest(&args.dataset)?;
    let cases = load_split(&args.dataset, &manifest, &args.split)?;
    let (model_records, baseline_records) =
        evaluate_cases(&ckpt.model, &cases, manifest.horizon_days)?;
    let report = build_report(
        &args.split,
        &hash,
        model_records,
        baseline_records,
        args.top_fraction,
    )?;

    fs::create_dir_all(&args.out)
        .map_err(io_err(format!("creating {}", args.out.display())))?;
    let stem = format!("report_{}_{}", args.split, &hash[..8]);
    let json_path = args.out.join(format!("{stem}.json"));
    let csv_path = args.out.join(format!("{stem}.csv"));
    let json = serde_json::to_string_pretty(&report).map_err(|source| Error::Json {
        context: json_path.display().to_string(),
        source,
    })?;
    fs::write(&json_path, json)
        .map_err(io_err(format!("writing {}", json_path.display())))?;
    fs::write(&csv_path, report_csv(&report))
        .map_err(io_err(format!("writing {}", csv_path.display())))?;
    write_inference_config(&ckpt.model, &args.out)?;

    let fmt = |agg: &Option<deepgrowth::eval::Aggregate>| {
        agg.map_or(String::from("-"), |a| format!("{:.3} ± {:.3}", a.mean, a.std))
    };
    println!(
        "split {} ({} cases): model dice {}, baseline dice {}",
        args.split,
        report.model.records.len(),
        fmt(&report.model.overall.dice),
        fmt(&report.baseline.overall.dice),
    );
    println!(
        "top {:.0}% growers ({}): model dice {}, baseline dice {}",
        args.top_fraction * 100.0,
        report.top_grower_ids.len(),
        fmt(&report.model.top_growers.dice),
        fmt(&report.baseline.top_growers.dice),
    );
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    D,
    H,
    W,
}

#[derive(clap::Args)]
pub struct SlicesArgs {
    /// DGVOL volume (u8 or f32)
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Slice index along the chosen axis
    #[arg(long)]
    pub index: usize,
    /// Output graymap (binary PGM)
    #[arg(long)]
    pub out: PathBuf,
    /// Mask volume; adds a second graymap with the mask contour painted
    /// over the slice
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

fn volume_values(data: VolumeData) -> Vec<f64> {
    match data {
        VolumeData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
    }
}

/// Row-major slice of `[D,H,W]` data: (rows, cols, values).
fn extract_slice(
    dims: [usize; 3],
    values: &[f64],
    axis: Axis,
    index: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let [nd, nh, nw] = dims;
    let bound = match axis {
        Axis::D => nd,
        Axis::H => nh,
        Axis::W => nw,
    };
    if index >= bound {
        return Err(Error::invalid(
            "export-slices",
            format!("index {index} out of range for an axis of extent {bound}"),
        ));
    }
    let at = |d: usize, h: usize, w: usize| values[(d * nh + h) * nw + w];
    let (rows, cols) = match axis {
        Axis::D => (nh, nw),
        Axis::H => (nd, nw),
        Axis::W => (nd, nh),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(match axis {
                Axis::D => at(index, r, c),
                Axis::H => at(r, index, c),
                Axis::W => at(r, c, index),
            });
        }
    }
    Ok((rows, cols, out))
}

/// Linear [min,max] -> [0,255]; a flat slice maps to 0.
fn to_gray(values: &[f64]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

pub fn export_slices(args: SlicesArgs) -> Result<()> {
    let volume = read_volume(&args.volume)?;
    let values = volume_values(volume.data);
    let (rows, cols, slice) = extract_slice(volume.dims, &values, args.axis, args.index)?;
    let gray = to_gray(&slice);
    write_pgm(&args.out, rows, cols, &gray)?;
    println!("wrote {} ({cols}x{rows})", args.out.display());

    if let Some(mask_path) = &args.mask {
        let mask = read_volume(mask_path)?;
        if mask.dims != volume.dims {
            return Err(Error::ShapeMismatch {
                op: "export-slices",
                lhs: mask.dims.to_vec(),
                rhs: volume.dims.to_vec(),
            });
        }
        let mask_values = volume_values(mask.data);
        let (_, _, mask_slice) = extract_slice(mask.dims, &mask_values, args.axis, args.index)?;
        let mut overlay = gray;
        for r in 0..rows {
            for c in 0..cols {
                let fg = |rr: usize, cc: usize| mask_slice[rr * cols + cc] > 0.0;
                if !fg(r, c) {
                    continue;
                }
                let on_contour = r == 0
                    || c == 0
                    || r + 1 == rows
                    || c + 1 == cols
                    || !fg(r - 1, c)
                    || !fg(r + 1, c)
                    || !fg(r, c - 1)
                    || !fg(r, c + 1);
                if on_contour {
                    overlay[r * cols + c] = 255;
                }
            }
        }
        let stem = args
            .out
            .file_stem()
            .map_or(String::from("slice"), |s| s.to_string_lossy().into_owned());
        let overlay_path = args.out.with_file_name(format!("{stem}_overlay.pgm"));
        write_pgm(&overlay_path, rows, cols, &overlay)?;
        println!("wrote {}", overlay_path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_extraction_matches_direct_indexing() {
        let dims = [2, 3, 4];
        let values: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (rows, cols, s) = extract_slice(dims, &values, Axis::D, 1).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(s[0], 12.0);
        assert_eq!(s[11], 23.0);

        let (rows, cols, s) = extract_slice(dims, &values, Axis::H, 2).unwrap();
        assert_eq!((rows, cols), (2, 4));
        assert_eq!(s, vec![8.0, 9.0, 10.0, 11.0, 20.0, 21.0, 22.0, 23.0]);

        let (rows, cols, s) = extract_slice(dims, &values, Axis::W, 0).unwrap();
        assert_eq!((rows, cols), (2, 3));
        assert_eq!(s, vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0]);

        assert!(extract_slice(dims, &values, Axis::H, 3).is_err());
    }

    #[test]
    fn gray_mapping_is_linear_and_flat_safe() {
        assert_eq!(to_gray(&[2.0, 2.0]), vec![0, 0]);
        assert_eq!(to_gray(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(to_gray(&[-1.0, 1.0]), vec![0, 255]);
    }
}
