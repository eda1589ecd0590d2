//! Overlap and surface-distance metrics, the copy-last-scan baseline,
//! grower stratification, and report assembly.

use serde::Serialize;

use crate::cohort::LongitudinalCase;
use crate::error::{Error, Result};
use crate::model::GrowthModel;
use crate::sdf::{sdf_to_mask, SdfGrid, VoxelMask};

pub fn dice(a: &VoxelMask, b: &VoxelMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op: "dice",
            lhs: a.dims.to_vec(),
            rhs: b.dims.to_vec(),
        });
    }
    let inter: usize = a
        .occupancy
        .iter()
        .zip(&b.occupancy)
        .map(|(&x, &y)| (x & y) as usize)
        .sum();
    let total = a.foreground_count() + b.foreground_count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with at least one face-adjacent background neighbor;
/// outside the volume counts as background.
pub fn surface_voxels(mask: &VoxelMask) -> Vec<[usize; 3]> {
    let [nd, nh, nw] = mask.dims;
    let mut out = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if !mask.at(d, h, w) {
                    continue;
                }
                let exposed = (d == 0 || !mask.at(d - 1, h, w))
                    || (d + 1 == nd || !mask.at(d + 1, h, w))
                    || (h == 0 || !mask.at(d, h - 1, w))
                    || (h + 1 == nh || !mask.at(d, h + 1, w))
                    || (w == 0 || !mask.at(d, h, w - 1))
                    || (w + 1 == nw || !mask.at(d, h, w + 1));
                if exposed {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

fn directed_distances(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    spacing: [f64; 3],
    out: &mut Vec<f64>,
) {
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let dd = (a[0] as f64 - b[0] as f64) * spacing[0];
            let dh = (a[1] as f64 - b[1] as f64) * spacing[1];
            let dw = (a[2] as f64 - b[2] as f64) * spacing[2];
            let d2 = dd * dd + dh * dh + dw * dw;
            if d2 < best {
                best = d2;
            }
        }
        out.push(best.sqrt());
    }
}

/// Percentile by linear interpolation between order statistics at rank
/// q*(n-1) of the sorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 == values.len() {
        values[lo]
    } else {
        values[lo] * (1.0 - frac) + values[lo + 1] * frac
    }
}

/// Symmetric 95th-percentile surface distance in millimetres: directed
/// surface-to-nearest-surface distances pooled from both directions, then
/// one percentile over the pooled multiset. `None` when either mask is
/// empty, which callers must record as an exclusion.
pub fn hd95(a: &VoxelMask, b: &VoxelMask) -> Result<Option<f64>> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op: "hd95",
            lhs: a.dims.to_vec(),
            rhs: b.dims.to_vec(),
        });
    }
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::invalid(
            "hd95",
            format!("spacing {:?} vs {:?}", a.spacing_mm, b.spacing_mm),
        ));
    }
    if a.foreground_count() == 0 || b.foreground_count() == 0 {
        return Ok(None);
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    let mut pooled = Vec::with_capacity(sa.len() + sb.len());
    directed_distances(&sa, &sb, a.spacing_mm, &mut pooled);
    directed_distances(&sb, &sa, a.spacing_mm, &mut pooled);
    Ok(Some(percentile(&mut pooled, 0.95)))
}

/// |V_pred - V_gt| / V_gt over voxel counts.
pub fn rvd(pred: &VoxelMask, gt: &VoxelMask) -> Result<f64> {
    Ok(rvd_signed(pred, gt)?.abs())
}

/// (V_pred - V_gt) / V_gt, kept for per-case logs.
pub fn rvd_signed(pred: &VoxelMask, gt: &VoxelMask) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::ShapeMismatch {
            op: "rvd",
            lhs: pred.dims.to_vec(),
            rhs: gt.dims.to_vec(),
        });
    }
    let vg = gt.foreground_count() as f64;
    if vg == 0.0 {
        return Err(Error::invalid("rvd", "ground-truth mask is empty"));
    }
    Ok((pred.foreground_count() as f64 - vg) / vg)
}

/// Predict the future mask as a verbatim copy of the last observed one.
pub fn stable_tumor_baseline(case: &LongitudinalCase) -> Result<VoxelMask> {
    let n = case.num_scans();
    if n < 2 {
        return Err(Error::invalid("baseline", "need at least 2 scans"));
    }
    Ok(case.masks[n - 2].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub rvd: f64,
    pub rvd_signed: f64,
    pub predicted_volume_mm3: f64,
    pub target_volume_mm3: f64,
    /// |V_N - V_{N-1}| / V_{N-1} from the ground-truth masks.
    pub grower_rank_stat: f64,
}

/// All metrics of one prediction against the target, with the ranking
/// statistic taken from the observed masks.
pub fn case_record(
    case_id: &str,
    pred: &VoxelMask,
    gt: &VoxelMask,
    last_input: &VoxelMask,
) -> Result<MetricsRecord> {
    let v_last = last_input.foreground_count() as f64;
    if v_last == 0.0 {
        return Err(Error::invalid("case_record", "last input mask is empty"));
    }
    let v_gt = gt.foreground_count() as f64;
    Ok(MetricsRecord {
        case_id: case_id.to_string(),
        dice: dice(pred, gt)?,
        hd95_mm: hd95(pred, gt)?,
        rvd: rvd(pred, gt)?,
        rvd_signed: rvd_signed(pred, gt)?,
        predicted_volume_mm3: pred.volume_mm3(),
        target_volume_mm3: gt.volume_mm3(),
        grower_rank_stat: (v_gt - v_last).abs() / v_last,
    })
}

/// Indices of the ceil(fraction*K) records with the largest absolute
/// relative volume change, ranked descending; ties broken by case_id.
pub fn stratify_top_growers(records: &[MetricsRecord], fraction: f64) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Err(Error::invalid("stratify", "no records"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("stratify", format!("fraction {fraction}")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .grower_rank_stat
            .partial_cmp(&records[a].grower_rank_stat)
            .unwrap()
            .then_with(|| records[a].case_id.cmp(&records[b].case_id))
    });
    let k = (fraction * records.len() as f64).ceil() as usize;
    order.truncate(k.max(1));
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

fn aggregate(values: impl Iterator<Item = f64>) -> Option<Aggregate> {
    let values: Vec<f64> = values.collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Aggregate {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricAggregates {
    pub dice: Option<Aggregate>,
    pub hd95_mm: Option<Aggregate>,
    /// Cases whose hd95 was undefined and left out of the aggregate.
    pub hd95_excluded: Vec<String>,
    pub rvd: Option<Aggregate>,
}

fn aggregate_records(records: &[&MetricsRecord]) -> MetricAggregates {
    MetricAggregates {
        dice: aggregate(records.iter().map(|r| r.dice)),
        hd95_mm: aggregate(records.iter().filter_map(|r| r.hd95_mm)),
        hd95_excluded: records
            .iter()
            .filter(|r| r.hd95_mm.is_none())
            .map(|r| r.case_id.clone())
            .collect(),
        rvd: aggregate(records.iter().map(|r| r.rvd)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionReport {
    pub records: Vec<MetricsRecord>,
    pub overall: MetricAggregates,
    pub top_growers: MetricAggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub split: String,
    pub checkpoint_hash: String,
    pub top_fraction: f64,
    pub top_grower_ids: Vec<String>,
    pub model: SectionReport,
    pub baseline: SectionReport,
}

/// Assemble the full report: per-case records plus mean/std aggregates,
/// overall and restricted to the top growers, for the model and the
/// copy-last-scan baseline.
pub fn build_report(
    split: &str,
    checkpoint_hash: &str,
    model_records: Vec<MetricsRecord>,
    baseline_records: Vec<MetricsRecord>,
    top_fraction: f64,
) -> Result<Report> {
    if model_records.len() != baseline_records.len() {
        return Err(Error::invalid(
            "build_report",
            "model and baseline record counts differ",
        ));
    }
    for (m, b) in model_records.iter().zip(&baseline_records) {
        if m.case_id != b.case_id {
            return Err(Error::invalid(
                "build_report",
                format!("record order mismatch at {} vs {}", m.case_id, b.case_id),
            ));
        }
    }
    let top = stratify_top_growers(&model_records, top_fraction)?;
    let top_grower_ids: Vec<String> =
        top.iter().map(|&i| model_records[i].case_id.clone()).collect();
    let section = |records: Vec<MetricsRecord>| -> SectionReport {
        let all: Vec<&MetricsRecord> = records.iter().collect();
        let top_refs: Vec<&MetricsRecord> = top.iter().map(|&i| &records[i]).collect();
        SectionReport {
            overall: aggregate_records(&all),
            top_growers: aggregate_records(&top_refs),
            records,
        }
    };
    Ok(Report {
        split: split.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        top_fraction,
        top_grower_ids,
        model: section(model_records),
        baseline: section(baseline_records),
    })
}

/// Flat CSV with one row per (case, section).
pub fn report_csv(report: &Report) -> String {
    let mut out = String::from(
        "case_id,section,split,dice,hd95_mm,rvd,rvd_signed,predicted_volume_mm3,target_volume_mm3,grower_rank_stat,top_grower\n",
    );
    let mut push = |records: &[MetricsRecord], section: &str| {
        for r in records {
            let hd = r.hd95_mm.map_or(String::new(), |v| format!("{v}"));
            let top = report.top_grower_ids.contains(&r.case_id);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.case_id,
                section,
                report.split,
                r.dice,
                hd,
                r.rvd,
                r.rvd_signed,
                r.predicted_volume_mm3,
                r.target_volume_mm3,
                r.grower_rank_stat,
                top
            ));
        }
    };
    push(&report.model.records, "model");
    push(&report.baseline.records, "baseline");
    out
}

/// Run the model on each case's first N-1 scans and score the prediction
/// of scan N against the observed mask, alongside the baseline.
pub fn evaluate_cases(
    model: &GrowthModel,
    cases: &[LongitudinalCase],
    horizon_days: i64,
) -> Result<(Vec<MetricsRecord>, Vec<MetricsRecord>)> {
    let mut model_records = Vec::with_capacity(cases.len());
    let mut baseline_records = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = predict_case_mask(model, case, horizon_days, case.dates_days.len() - 1, None)?;
        let n = case.num_scans();
        let gt = &case.masks[n - 1];
        let last_input = &case.masks[n - 2];
        model_records.push(case_record(&case.case_id, &pred, gt, last_input)?);
        let baseline = stable_tumor_baseline(case)?;
        baseline_records.push(case_record(&case.case_id, &baseline, gt, last_input)?);
    }
    Ok((model_records, baseline_records))
}

/// Predict the mask of scan `target_index` (or an arbitrary date when
/// `target_days` is given) from the scans before `target_index`.
pub fn predict_case_mask(
    model: &GrowthModel,
    case: &LongitudinalCase,
    horizon_days: i64,
    target_index: usize,
    target_days: Option<i64>,
) -> Result<VoxelMask> {
    let sdf = predict_case_sdf(model, case, horizon_days, target_index, target_days)?;
    Ok(sdf_to_mask(&sdf, case.spacing_mm))
}

pub fn predict_case_sdf(
    model: &GrowthModel,
    case: &LongitudinalCase,
    horizon_days: i64,
    target_index: usize,
    target_days: Option<i64>,
) -> Result<SdfGrid> {
    if case.dims != model.config.crop {
        return Err(Error::ConfigMismatch(format!(
            "case {} has shape {:?}, model expects {:?}",
            case.case_id, case.dims, model.config.crop
        )));
    }
    if target_index < 2 || target_index > case.num_scans() {
        return Err(Error::invalid(
            "predict_case",
            format!("target index {target_index} needs at least 2 prior scans"),
        ));
    }
    let mut dates: Vec<i64> = case.dates_days[..target_index].to_vec();
    let target = target_days.unwrap_or_else(|| case.dates_days[target_index.min(case.num_scans() - 1)]);
    if target <= *dates.last().unwrap() {
        return Err(Error::invalid(
            "predict_case",
            format!("target day {target} is not after the last input scan"),
        ));
    }
    dates.push(target);
    if horizon_days <= 0 {
        return Err(Error::invalid("predict_case", "horizon must be positive"));
    }
    // Built by hand rather than through normalize_dates: query dates may
    // extrapolate past the dataset horizon, so tau can exceed 1.
    let first = dates[0];
    let normalized = dates
        .iter()
        .map(|&d| (d - first) as f64 / horizon_days as f64)
        .collect();
    let timeline = crate::temporal::ScanTimeline {
        dates_days: dates,
        normalized,
    };
    let scans: Vec<Vec<f64>> = case.scans[..target_index]
        .iter()
        .map(|s| s.iter().map(|&v| v as f64).collect())
        .collect();
    let masks: Vec<Vec<f64>> = case.masks[..target_index]
        .iter()
        .map(|m| m.occupancy.iter().map(|&o| o as f64).collect())
        .collect();
    let values = model.predict_sdf_grid(&scans, &masks, &timeline)?;
    Ok(SdfGrid {
        dims: case.dims,
        values,
    })
}
