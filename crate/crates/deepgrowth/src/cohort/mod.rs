//! Synthetic longitudinal tumor cohort: analytic growth scenarios voxelized
//! at irregular scan dates, with an on-disk layout of checksummed volumes.

pub mod dgvol;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::CaseTensors;
use crate::sdf::{ellipsoid_sdf, mask_to_sdf, sphere_sdf, VoxelMask};
use crate::temporal::normalize_dates;
use dgvol::{encode_volume, VolumeData};

/// Logistic scale of the intensity ramp across the tumor boundary, in
/// voxels. The 10..90% transition spans about 1.5 voxels.
pub const INTENSITY_RAMP_SCALE: f64 = 0.375;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Stable,
    SlowGrowth,
    FastGrowth,
    Shrinking,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Stable,
        ScenarioKind::SlowGrowth,
        ScenarioKind::FastGrowth,
        ScenarioKind::Shrinking,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Stable => "stable",
            ScenarioKind::SlowGrowth => "slow_growth",
            ScenarioKind::FastGrowth => "fast_growth",
            ScenarioKind::Shrinking => "shrinking",
        }
    }
}

/// A spherical bump unioned onto the base ellipsoid. Offset is relative to
/// the tumor center, in voxels at t = 0; both offset and radius scale with
/// the mean growth factor so the shape deforms coherently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub offset: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthScenario {
    pub kind: ScenarioKind,
    /// Tumor center in voxel-index coordinates.
    pub center: [f64; 3],
    /// Ellipsoid radii at t = 0, voxels.
    pub radii: [f64; 3],
    /// Per-axis rates g: r_k(t) = r_k(0) * (1 + g_k * t), t in [0,1].
    pub growth: [f64; 3],
    pub lobes: Vec<Lobe>,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_sigma: f64,
    pub scans: usize,
    /// Inclusive range the inter-scan gaps are drawn from, days.
    pub interval_days: [i64; 2],
}

impl GrowthScenario {
    pub fn validate(&self) -> Result<()> {
        if self.scans < 2 {
            return Err(Error::invalid("scenario", "need at least 2 scans"));
        }
        if self.interval_days[0] < 1 || self.interval_days[0] > self.interval_days[1] {
            return Err(Error::invalid(
                "scenario",
                format!("bad interval range {:?}", self.interval_days),
            ));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("scenario", format!("radii {:?}", self.radii)));
        }
        for (&r, &g) in self.radii.iter().zip(&self.growth) {
            // Positive radius over the whole horizon, t in [0,1].
            if r * (1.0 + g.min(0.0)) <= 0.0 {
                return Err(Error::invalid(
                    "scenario",
                    format!("growth {g} collapses radius {r} within the horizon"),
                ));
            }
        }
        if self.lobes.iter().any(|l| !(l.radius > 0.0)) {
            return Err(Error::invalid("scenario", "lobe radii must be positive"));
        }
        let within = |v: f64| (-1.0..=1.0).contains(&v);
        if !within(self.fg_intensity) || !within(self.bg_intensity) {
            return Err(Error::invalid("scenario", "intensities must be in [-1,1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("scenario", "noise sigma must be >= 0"));
        }
        Ok(())
    }

    /// Analytic shape field at normalized time t: union of the grown
    /// ellipsoid and its lobes, positive inside.
    pub fn field_at(&self, t: f64, center: [f64; 3]) -> impl Fn([f64; 3]) -> f64 + '_ {
        let radii = [
            self.radii[0] * (1.0 + self.growth[0] * t),
            self.radii[1] * (1.0 + self.growth[1] * t),
            self.radii[2] * (1.0 + self.growth[2] * t),
        ];
        let mean_scale =
            1.0 + (self.growth[0] + self.growth[1] + self.growth[2]) / 3.0 * t;
        let base = ellipsoid_sdf(center, radii);
        let lobes: Vec<_> = self
            .lobes
            .iter()
            .map(|l| {
                let c = [
                    center[0] + l.offset[0] * mean_scale,
                    center[1] + l.offset[1] * mean_scale,
                    center[2] + l.offset[2] * mean_scale,
                ];
                sphere_sdf(c, l.radius * mean_scale)
            })
            .collect();
        move |p| {
            let mut v = base(p);
            for lobe in &lobes {
                v = v.max(lobe(p));
            }
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCase {
    pub case_id: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dates_days: Vec<i64>,
    /// Intensities in [-1,1], stored as f32.
    pub scans: Vec<Vec<f32>>,
    pub masks: Vec<VoxelMask>,
    pub scenario: GrowthScenario,
}

impl LongitudinalCase {
    pub fn num_scans(&self) -> usize {
        self.scans.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dates_days.len();
        if n < 2 || self.scans.len() != n || self.masks.len() != n {
            return Err(Error::invalid(
                "case",
                format!("case {}: inconsistent scan counts", self.case_id),
            ));
        }
        if !self.dates_days.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(
                "case",
                format!("case {}: dates not strictly increasing", self.case_id),
            ));
        }
        let voxels = self.dims[0] * self.dims[1] * self.dims[2];
        for (t, (scan, mask)) in self.scans.iter().zip(&self.masks).enumerate() {
            if scan.len() != voxels || mask.dims != self.dims {
                return Err(Error::invalid(
                    "case",
                    format!("case {} scan {t}: shape mismatch", self.case_id),
                ));
            }
            if mask.spacing_mm != self.spacing_mm {
                return Err(Error::invalid(
                    "case",
                    format!("case {} scan {t}: spacing mismatch", self.case_id),
                ));
            }
            if mask.foreground_count() == 0 {
                return Err(Error::invalid(
                    "case",
                    format!("case {} scan {t}: empty mask", self.case_id),
                ));
            }
            if scan.iter().any(|&v| !(-1.0..=1.0).contains(&(v as f64))) {
                return Err(Error::invalid(
                    "case",
                    format!("case {} scan {t}: intensity outside [-1,1]", self.case_id),
                ));
            }
        }
        Ok(())
    }

    /// Lower to training tensors: SDF targets from the masks, timeline
    /// normalized by the cohort horizon.
    pub fn to_tensors(&self, horizon_days: i64) -> Result<CaseTensors> {
        let timeline = normalize_dates(&self.dates_days, horizon_days)?;
        let mut sdfs = Vec::with_capacity(self.masks.len());
        for mask in &self.masks {
            sdfs.push(mask_to_sdf(mask)?);
        }
        Ok(CaseTensors {
            case_id: self.case_id.clone(),
            dims: self.dims,
            scans: self
                .scans
                .iter()
                .map(|s| s.iter().map(|&v| v as f64).collect())
                .collect(),
            masks: self
                .masks
                .iter()
                .map(|m| m.occupancy.iter().map(|&o| o as f64).collect())
                .collect(),
            sdfs,
            timeline,
        })
    }
}

fn centroid(mask: &VoxelMask) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0.0;
    for d in 0..mask.dims[0] {
        for h in 0..mask.dims[1] {
            for w in 0..mask.dims[2] {
                if mask.at(d, h, w) {
                    sum[0] += d as f64;
                    sum[1] += h as f64;
                    sum[2] += w as f64;
                    count += 1.0;
                }
            }
        }
    }
    [sum[0] / count, sum[1] / count, sum[2] / count]
}

fn touches_boundary(mask: &VoxelMask) -> bool {
    let [nd, nh, nw] = mask.dims;
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if (d == 0 || d == nd - 1 || h == 0 || h == nh - 1 || w == 0 || w == nw - 1)
                    && mask.at(d, h, w)
                {
                    return true;
                }
            }
        }
    }
    false
}

/// Voxelize one scenario at every scan date. The center is adjusted once so
/// the first scan's mask centroid lands on the crop center, then all scans
/// are cut from the same adjusted field.
pub fn generate_case(
    scenario: &GrowthScenario,
    case_id: &str,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    seed: u64,
) -> Result<LongitudinalCase> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dates_days = vec![0i64];
    for _ in 1..scenario.scans {
        let gap = rng.random_range(scenario.interval_days[0]..=scenario.interval_days[1]);
        dates_days.push(dates_days.last().unwrap() + gap);
    }
    let horizon = horizon_days(scenario.scans, scenario.interval_days[1]);
    let timeline = normalize_dates(&dates_days, horizon)?;

    let crop_center = [
        (dims[0] - 1) as f64 / 2.0,
        (dims[1] - 1) as f64 / 2.0,
        (dims[2] - 1) as f64 / 2.0,
    ];
    let first = VoxelMask::from_field(dims, spacing_mm, scenario.field_at(0.0, scenario.center))?;
    if first.foreground_count() == 0 {
        return Err(Error::invalid("generate_case", "first scan mask is empty"));
    }
    let mu = centroid(&first);
    let center = [
        scenario.center[0] + (crop_center[0] - mu[0]),
        scenario.center[1] + (crop_center[1] - mu[1]),
        scenario.center[2] + (crop_center[2] - mu[2]),
    ];

    let noise = Normal::new(0.0, scenario.noise_sigma).map_err(|e| {
        Error::invalid("generate_case", format!("noise sigma: {e}"))
    })?;
    let mut scans = Vec::with_capacity(scenario.scans);
    let mut masks = Vec::with_capacity(scenario.scans);
    for (i, &t) in timeline.normalized.iter().enumerate() {
        let field = scenario.field_at(t, center);
        let mask = VoxelMask::from_field(dims, spacing_mm, &field)?;
        if mask.foreground_count() == 0 {
            return Err(Error::invalid(
                "generate_case",
                format!("empty mask at day {}", dates_days[i]),
            ));
        }
        if touches_boundary(&mask) {
            return Err(Error::invalid(
                "generate_case",
                format!("tumor exits the crop at day {}", dates_days[i]),
            ));
        }
        let mut scan = Vec::with_capacity(mask.occupancy.len());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let sdf = field([d as f64, h as f64, w as f64]);
                    let ramp = 1.0 / (1.0 + (-sdf / INTENSITY_RAMP_SCALE).exp());
                    let value = scenario.bg_intensity
                        + (scenario.fg_intensity - scenario.bg_intensity) * ramp
                        + noise.sample(&mut rng);
                    scan.push(value.clamp(-1.0, 1.0) as f32);
                }
            }
        }
        scans.push(scan);
        masks.push(mask);
    }

    let mu1 = centroid(&masks[0]);
    if mu1
        .iter()
        .zip(&crop_center)
        .any(|(a, b)| (a - b).abs() > 1.0)
    {
        return Err(Error::invalid(
            "generate_case",
            format!("first-scan centroid {mu1:?} off the crop center {crop_center:?}"),
        ));
    }

    let case = LongitudinalCase {
        case_id: case_id.to_string(),
        dims,
        spacing_mm,
        dates_days,
        scans,
        masks,
        scenario: scenario.clone(),
    };
    case.validate()?;
    Ok(case)
}

/// Longest realizable span, used as the normalization horizon for every
/// case of a cohort.
pub fn horizon_days(scans_per_case: usize, interval_max: i64) -> i64 {
    (scans_per_case as i64 - 1) * interval_max
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMix {
    pub stable: f64,
    pub slow_growth: f64,
    pub fast_growth: f64,
    pub shrinking: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        KindMix {
            stable: 0.25,
            slow_growth: 0.25,
            fast_growth: 0.25,
            shrinking: 0.25,
        }
    }
}

impl KindMix {
    pub fn as_array(&self) -> [f64; 4] {
        [self.stable, self.slow_growth, self.fast_growth, self.shrinking]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub cases: usize,
    pub scans_per_case: usize,
    pub crop: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub interval_days: [i64; 2],
    pub proportions: KindMix,
    /// train / val / test fractions, summing to 1.
    pub split_fractions: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            cases: 40,
            scans_per_case: 3,
            crop: [32, 32, 32],
            spacing_mm: [1.0; 3],
            interval_days: [90, 360],
            proportions: KindMix::default(),
            split_fractions: [0.75, 0.0, 0.25],
            noise_sigma: 0.05,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 {
            return Err(Error::invalid("cohort_spec", "cases must be >= 1"));
        }
        if self.scans_per_case < 2 {
            return Err(Error::invalid("cohort_spec", "scans_per_case must be >= 2"));
        }
        if self.crop.iter().any(|&d| d < 16) {
            return Err(Error::invalid(
                "cohort_spec",
                format!("crop {:?} too small for the shape ranges", self.crop),
            ));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("cohort_spec", "spacing must be positive"));
        }
        if self.interval_days[0] < 1 || self.interval_days[0] > self.interval_days[1] {
            return Err(Error::invalid(
                "cohort_spec",
                format!("bad interval range {:?}", self.interval_days),
            ));
        }
        let props = self.proportions.as_array();
        if props.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("cohort_spec", "proportions must be in [0,1]"));
        }
        let sum: f64 = props.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::invalid(
                "cohort_spec",
                format!("proportions sum to {sum}, more than 1"),
            ));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "cohort_spec",
                format!("proportions sum to {sum}, expected 1"),
            ));
        }
        let splits: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (splits - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(
                "cohort_spec",
                format!("split fractions {:?} must sum to 1", self.split_fractions),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise_sigma) {
            return Err(Error::invalid("cohort_spec", "noise sigma must be in [0,0.5]"));
        }
        Ok(())
    }

    pub fn horizon_days(&self) -> i64 {
        horizon_days(self.scans_per_case, self.interval_days[1])
    }
}

/// Integer apportionment of `total` across `weights` by largest remainder;
/// ties go to the earlier index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

fn sample_scenario(kind: ScenarioKind, spec: &CohortSpec, rng: &mut ChaCha8Rng) -> GrowthScenario {
    let radius_range = match kind {
        ScenarioKind::Stable => 4.0..6.5,
        ScenarioKind::SlowGrowth => 4.0..6.0,
        ScenarioKind::FastGrowth => 3.5..5.0,
        ScenarioKind::Shrinking => 5.0..7.0,
    };
    let growth_range = match kind {
        ScenarioKind::Stable => 0.0..0.0,
        ScenarioKind::SlowGrowth => 0.10..0.30,
        ScenarioKind::FastGrowth => 0.50..0.90,
        ScenarioKind::Shrinking => -0.35..-0.15,
    };
    let radii = [
        rng.random_range(radius_range.clone()),
        rng.random_range(radius_range.clone()),
        rng.random_range(radius_range),
    ];
    let growth = if growth_range.start == growth_range.end {
        [growth_range.start; 3]
    } else {
        [
            rng.random_range(growth_range.clone()),
            rng.random_range(growth_range.clone()),
            rng.random_range(growth_range),
        ]
    };
    let min_radius = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let n_lobes = rng.random_range(0..=2);
    let lobes = (0..n_lobes)
        .map(|_| {
            let offset = [
                rng.random_range(-0.5..0.5) * radii[0],
                rng.random_range(-0.5..0.5) * radii[1],
                rng.random_range(-0.5..0.5) * radii[2],
            ];
            Lobe {
                offset,
                radius: rng.random_range(0.25..0.45) * min_radius,
            }
        })
        .collect();
    let center = [
        (spec.crop[0] - 1) as f64 / 2.0,
        (spec.crop[1] - 1) as f64 / 2.0,
        (spec.crop[2] - 1) as f64 / 2.0,
    ];
    GrowthScenario {
        kind,
        center,
        radii,
        growth,
        lobes,
        fg_intensity: rng.random_range(0.45..0.75),
        bg_intensity: rng.random_range(-0.75..-0.45),
        noise_sigma: spec.noise_sigma,
        scans: spec.scans_per_case,
        interval_days: spec.interval_days,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub kind: ScenarioKind,
    pub split: String,
    /// Relative path -> SHA-256 hex of every file belonging to the case.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub seed: u64,
    pub horizon_days: i64,
    pub spacing_mm: [f64; 3],
    pub shape: [usize; 3],
    pub scans_per_case: usize,
    pub splits: BTreeMap<String, Vec<String>>,
    pub cases: Vec<CaseEntry>,
}

impl CohortManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid("manifest", format!("no split named {name}")))
    }

    pub fn entry(&self, case_id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|e| e.case_id == case_id)
            .ok_or_else(|| Error::invalid("manifest", format!("no case named {case_id}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseMeta {
    case_id: String,
    kind: ScenarioKind,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dates_days: Vec<i64>,
    scenario: GrowthScenario,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15) ^ stream.rotate_left(23);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Serialize one case under `<root>/cases/<id>/`, returning relative paths
/// with their checksums.
fn write_case(root: &Path, case: &LongitudinalCase) -> Result<BTreeMap<String, String>> {
    let dir = root.join("cases").join(&case.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut checksums = BTreeMap::new();
    let rel = |name: &str| format!("cases/{}/{name}", case.case_id);
    for (t, (scan, mask)) in case.scans.iter().zip(&case.masks).enumerate() {
        let image = encode_volume(case.dims, &VolumeData::F32(scan.clone()))?;
        let name = format!("scan_{t}.bin");
        write_bytes(&dir.join(&name), &image)?;
        checksums.insert(rel(&name), sha256_hex(&image));

        let occ = encode_volume(case.dims, &VolumeData::U8(mask.occupancy.clone()))?;
        let name = format!("scan_{t}_mask.bin");
        write_bytes(&dir.join(&name), &occ)?;
        checksums.insert(rel(&name), sha256_hex(&occ));
    }
    let meta = CaseMeta {
        case_id: case.case_id.clone(),
        kind: case.scenario.kind,
        dims: case.dims,
        spacing_mm: case.spacing_mm,
        dates_days: case.dates_days.clone(),
        scenario: case.scenario.clone(),
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Json {
        context: "case meta".into(),
        source,
    })?;
    write_bytes(&dir.join("meta.json"), &meta_bytes)?;
    checksums.insert(rel("meta.json"), sha256_hex(&meta_bytes));
    Ok(checksums)
}

/// Generate and persist a full cohort. Kind counts come from the configured
/// proportions by largest remainder; cases cycle through the kinds so each
/// contiguous split stays mixed; splits are contiguous id ranges sized by
/// largest remainder.
pub fn generate_cohort(spec: &CohortSpec, seed: u64, root: &Path) -> Result<CohortManifest> {
    spec.validate()?;
    let kind_counts = apportion(spec.cases, &spec.proportions.as_array());
    let mut remaining = kind_counts.clone();
    let mut kind_sequence = Vec::with_capacity(spec.cases);
    while kind_sequence.len() < spec.cases {
        for (k, kind) in ScenarioKind::ALL.iter().enumerate() {
            if remaining[k] > 0 {
                remaining[k] -= 1;
                kind_sequence.push(*kind);
            }
        }
    }

    let split_counts = apportion(spec.cases, &spec.split_fractions);
    let split_names = ["train", "val", "test"];
    let mut splits: BTreeMap<String, Vec<String>> = split_names
        .iter()
        .map(|&s| (s.to_string(), Vec::new()))
        .collect();

    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    let width = (spec.cases as f64).log10().floor() as usize + 1;
    let width = width.max(3);
    let mut cases = Vec::with_capacity(spec.cases);
    let boundary = [split_counts[0], split_counts[0] + split_counts[1]];
    for (i, &kind) in kind_sequence.iter().enumerate() {
        let case_id = format!("case_{i:0width$}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
        let scenario = sample_scenario(kind, spec, &mut rng);
        let case = generate_case(
            &scenario,
            &case_id,
            spec.crop,
            spec.spacing_mm,
            derive_seed(seed, i as u64, 1),
        )?;
        let checksums = write_case(root, &case)?;
        let split = if i < boundary[0] {
            "train"
        } else if i < boundary[1] {
            "val"
        } else {
            "test"
        };
        splits.get_mut(split).unwrap().push(case_id.clone());
        cases.push(CaseEntry {
            case_id,
            kind,
            split: split.to_string(),
            checksums,
        });
    }
    let manifest = CohortManifest {
        version: MANIFEST_VERSION,
        seed,
        horizon_days: spec.horizon_days(),
        spacing_mm: spec.spacing_mm,
        shape: spec.crop,
        scans_per_case: spec.scans_per_case,
        splits,
        cases,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        context: "manifest".into(),
        source,
    })?;
    write_bytes(&root.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<CohortManifest> {
    let path = root.join("manifest.json");
    let bytes =
        fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: CohortManifest =
        serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            context: format!("{}", path.display()),
            source,
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            what: "manifest",
            message: format!("version {} (expected {MANIFEST_VERSION})", manifest.version),
        });
    }
    Ok(manifest)
}

/// Read one case back, verifying every checksum and the case invariants.
pub fn load_case(root: &Path, manifest: &CohortManifest, case_id: &str) -> Result<LongitudinalCase> {
    let entry = manifest.entry(case_id)?;
    let mut blobs: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for (rel, expected) in &entry.checksums {
        let path = root.join(rel);
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if sha256_hex(&bytes) != *expected {
            return Err(Error::ChecksumMismatch { path });
        }
        blobs.insert(rel.as_str(), bytes);
    }
    let meta_rel = format!("cases/{case_id}/meta.json");
    let meta_bytes = blobs
        .get(meta_rel.as_str())
        .ok_or_else(|| Error::Format {
            what: "manifest",
            message: format!("case {case_id} lists no meta.json"),
        })?;
    let meta: CaseMeta = serde_json::from_slice(meta_bytes).map_err(|source| Error::Json {
        context: meta_rel.clone(),
        source,
    })?;
    if meta.case_id != case_id
        || meta.dims != manifest.shape
        || meta.spacing_mm != manifest.spacing_mm
        || meta.dates_days.len() != manifest.scans_per_case
    {
        return Err(Error::Format {
            what: "case meta",
            message: format!("case {case_id} disagrees with the manifest"),
        });
    }
    let mut scans = Vec::with_capacity(meta.dates_days.len());
    let mut masks = Vec::with_capacity(meta.dates_days.len());
    for t in 0..meta.dates_days.len() {
        let image_rel = format!("cases/{case_id}/scan_{t}.bin");
        let mask_rel = format!("cases/{case_id}/scan_{t}_mask.bin");
        let image_bytes = blobs.get(image_rel.as_str()).ok_or_else(|| Error::Format {
            what: "manifest",
            message: format!("case {case_id} is missing {image_rel}"),
        })?;
        let mask_bytes = blobs.get(mask_rel.as_str()).ok_or_else(|| Error::Format {
            what: "manifest",
            message: format!("case {case_id} is missing {mask_rel}"),
        })?;
        let image = dgvol::decode_volume(Path::new(&image_rel), image_bytes)?;
        let mask = dgvol::decode_volume(Path::new(&mask_rel), mask_bytes)?;
        if image.dims != meta.dims || mask.dims != meta.dims {
            return Err(Error::ShapeMismatch {
                op: "load_case",
                lhs: image.dims.to_vec(),
                rhs: meta.dims.to_vec(),
            });
        }
        match (image.data, mask.data) {
            (VolumeData::F32(i), VolumeData::U8(m)) => {
                scans.push(i);
                masks.push(VoxelMask::new(meta.dims, m, meta.spacing_mm)?);
            }
            _ => {
                return Err(Error::Format {
                    what: "volume file",
                    message: format!("case {case_id} scan {t}: unexpected dtypes"),
                })
            }
        }
    }
    let case = LongitudinalCase {
        case_id: case_id.to_string(),
        dims: meta.dims,
        spacing_mm: meta.spacing_mm,
        dates_days: meta.dates_days,
        scans,
        masks,
        scenario: meta.scenario,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_split(root: &Path, manifest: &CohortManifest, split: &str) -> Result<Vec<LongitudinalCase>> {
    manifest
        .split(split)?
        .iter()
        .map(|id| load_case(root, manifest, id))
        .collect()
}

pub fn load_cohort(root: &Path) -> Result<(CohortManifest, Vec<LongitudinalCase>)> {
    let manifest = load_manifest(root)?;
    let cases = manifest
        .cases
        .iter()
        .map(|e| load_case(root, &manifest, &e.case_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}
