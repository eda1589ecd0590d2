//! Voxel masks, signed distance grids, and the conversions between them.
//!
//! Sign convention throughout: positive inside the tumor, negative outside,
//! zero on the boundary. Distances are in voxel units; physical spacing is
//! applied by consumers that need millimetres.

use rand::Rng;

use crate::error::{Error, Result};

/// Binary occupancy grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub dims: [usize; 3],
    pub occupancy: Vec<u8>,
    pub spacing_mm: [f64; 3],
}

impl VoxelMask {
    pub fn new(dims: [usize; 3], occupancy: Vec<u8>, spacing_mm: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("voxel_mask", format!("empty dims {dims:?}")));
        }
        if occupancy.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid(
                "voxel_mask",
                format!("{} values for dims {dims:?}", occupancy.len()),
            ));
        }
        if occupancy.iter().any(|&v| v > 1) {
            return Err(Error::invalid("voxel_mask", "occupancy must be 0 or 1"));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(
                "voxel_mask",
                format!("spacing {spacing_mm:?} must be positive"),
            ));
        }
        Ok(VoxelMask {
            dims,
            occupancy,
            spacing_mm,
        })
    }

    /// Threshold a scalar field at 0 over the voxel-index lattice.
    pub fn from_field(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        field: impl Fn([f64; 3]) -> f64,
    ) -> Result<Self> {
        let mut occupancy = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let v = field([d as f64, h as f64, w as f64]);
                    occupancy.push(u8::from(v >= 0.0));
                }
            }
        }
        VoxelMask::new(dims, occupancy, spacing_mm)
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> bool {
        self.occupancy[(d * self.dims[1] + h) * self.dims[2] + w] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.occupancy.iter().map(|&v| v as usize).sum()
    }

    pub fn volume_mm3(&self) -> f64 {
        self.foreground_count() as f64 * self.spacing_mm.iter().product::<f64>()
    }
}

/// Signed distance values on the same lattice as a mask, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

/// Point drawn for decoder supervision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    /// Normalized volume coordinates in [-1,1]^3, corner-aligned, axis order
    /// (d,h,w).
    pub coords: [f64; 3],
    pub target_sdf: f64,
}

/// One-dimensional squared-distance transform by the lower envelope of
/// parabolas. `f` holds squared source costs (0 at sites, +inf elsewhere);
/// exact on integer inputs.
fn dt1d(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as f64;
                    let s = (fq - fp) / (2.0 * (q - p) as f64);
                    if s <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, out_q) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = sites[k];
        let dq = q as f64 - p as f64;
        *out_q = dq * dq + f[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site voxel.
fn edt_squared(dims: [usize; 3], is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut grid: Vec<f64> = (0..d * h * w)
        .map(|i| if is_site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let maxdim = d.max(h).max(w);
    let mut line = vec![0.0; maxdim];
    let mut out = vec![0.0; maxdim];
    let mut sites = Vec::with_capacity(maxdim);
    let mut bounds = Vec::with_capacity(maxdim);

    // Along W: rows are contiguous.
    for row in grid.chunks_mut(w) {
        line[..w].copy_from_slice(row);
        dt1d(&line[..w], &mut out[..w], &mut sites, &mut bounds);
        row.copy_from_slice(&out[..w]);
    }
    // Along H.
    for zd in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = grid[(zd * h + y) * w + x];
            }
            dt1d(&line[..h], &mut out[..h], &mut sites, &mut bounds);
            for y in 0..h {
                grid[(zd * h + y) * w + x] = out[y];
            }
        }
    }
    // Along D.
    for y in 0..h {
        for x in 0..w {
            for zd in 0..d {
                line[zd] = grid[(zd * h + y) * w + x];
            }
            dt1d(&line[..d], &mut out[..d], &mut sites, &mut bounds);
            for zd in 0..d {
                grid[(zd * h + y) * w + x] = out[zd];
            }
        }
    }
    grid
}

/// Exact signed distance grid of a binary mask. Foreground voxels get
/// +(distance to nearest background center - 0.5), background voxels
/// -(distance to nearest foreground center - 0.5): the zero level set sits
/// halfway between opposing voxel centers and thresholding at >= 0
/// reproduces the mask.
pub fn mask_to_sdf(mask: &VoxelMask) -> Result<SdfGrid> {
    let fg = mask.foreground_count();
    if fg == 0 || fg == mask.occupancy.len() {
        return Err(Error::invalid(
            "mask_to_sdf",
            "mask must contain both foreground and background",
        ));
    }
    let occ = &mask.occupancy;
    let to_bg = edt_squared(mask.dims, |i| occ[i] == 0);
    let to_fg = edt_squared(mask.dims, |i| occ[i] == 1);
    let values = occ
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            if o == 1 {
                to_bg[i].sqrt() - 0.5
            } else {
                -(to_fg[i].sqrt() - 0.5)
            }
        })
        .collect();
    Ok(SdfGrid {
        dims: mask.dims,
        values,
    })
}

/// Threshold an SDF at its zero level set; ties count as inside.
pub fn sdf_to_mask(sdf: &SdfGrid, spacing_mm: [f64; 3]) -> VoxelMask {
    let occupancy = sdf.values.iter().map(|&v| u8::from(v >= 0.0)).collect();
    VoxelMask {
        dims: sdf.dims,
        occupancy,
        spacing_mm,
    }
}

/// Exact sphere SDF in the field's own units, positive inside.
pub fn sphere_sdf(center: [f64; 3], radius: f64) -> impl Fn([f64; 3]) -> f64 {
    move |p| {
        let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)
            + (p[2] - center[2]).powi(2))
        .sqrt();
        radius - d
    }
}

/// Approximate ellipsoid SDF with exact zero set on the surface, positive
/// inside.
pub fn ellipsoid_sdf(center: [f64; 3], radii: [f64; 3]) -> impl Fn([f64; 3]) -> f64 {
    move |p| {
        let q = [
            (p[0] - center[0]) / radii[0],
            (p[1] - center[1]) / radii[1],
            (p[2] - center[2]) / radii[2],
        ];
        let k0 = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let k1 = ((q[0] / radii[0]).powi(2) + (q[1] / radii[1]).powi(2)
            + (q[2] / radii[2]).powi(2))
        .sqrt();
        if k1 == 0.0 {
            radii[0].min(radii[1]).min(radii[2])
        } else {
            k0 * (1.0 - k0) / k1
        }
    }
}

/// Normalized coordinate of voxel center `i` on an axis of `n` nodes
/// (corner-aligned: node 0 -> -1, node n-1 -> +1).
pub fn voxel_center_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Plain trilinear read of a scalar grid at a normalized point, clamping
/// outside queries to the boundary. Same coordinate convention as the
/// differentiable sampler.
pub fn trilerp(values: &[f64], dims: [usize; 3], pt: [f64; 3]) -> f64 {
    let loc = |x: f64, n: usize| -> (usize, f64) {
        if n <= 1 {
            return (0, 0.0);
        }
        let t = ((x + 1.0) / 2.0 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        (i, t - i as f64)
    };
    let (i, fd) = loc(pt[0], dims[0]);
    let (j, fh) = loc(pt[1], dims[1]);
    let (k, fw) = loc(pt[2], dims[2]);
    let at = |di: usize, dj: usize, dk: usize| -> f64 {
        let di = di.min(dims[0].saturating_sub(1));
        let dj = dj.min(dims[1].saturating_sub(1));
        let dk = dk.min(dims[2].saturating_sub(1));
        values[((i + di) * dims[1] + j + dj) * dims[2] + k + dk]
    };
    let c00 = at(0, 0, 0) * (1.0 - fw) + at(0, 0, 1) * fw;
    let c01 = at(0, 1, 0) * (1.0 - fw) + at(0, 1, 1) * fw;
    let c10 = at(1, 0, 0) * (1.0 - fw) + at(1, 0, 1) * fw;
    let c11 = at(1, 1, 0) * (1.0 - fw) + at(1, 1, 1) * fw;
    let c0 = c00 * (1.0 - fh) + c01 * fh;
    let c1 = c10 * (1.0 - fh) + c11 * fh;
    c0 * (1.0 - fd) + c1 * fd
}

/// Width of the near-surface band, in voxel units.
const NEAR_SURFACE_BAND: f64 = 2.0;

/// Draw `n` supervision points: a `near_surface_fraction` share rejection-
/// sampled into a band around the zero level set, the rest uniform over the
/// volume. Targets are trilinear reads clamped to `[-clamp_dist, clamp_dist]`.
pub fn sample_training_points(
    sdf: &SdfGrid,
    n: usize,
    near_surface_fraction: f64,
    clamp_dist: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SamplePoint>> {
    if n == 0 {
        return Err(Error::invalid("sample_training_points", "n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&near_surface_fraction) {
        return Err(Error::invalid(
            "sample_training_points",
            format!("near_surface_fraction {near_surface_fraction} not in [0,1]"),
        ));
    }
    if !(clamp_dist > 0.0) {
        return Err(Error::invalid(
            "sample_training_points",
            format!("clamp_dist {clamp_dist} must be positive"),
        ));
    }
    let n_near = ((near_surface_fraction * n as f64).round() as usize).min(n);
    let mut points = Vec::with_capacity(n);
    let draw = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
        [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ]
    };
    let mut attempts = 0usize;
    let max_attempts = 2000 * n_near.max(1);
    while points.len() < n_near && attempts < max_attempts {
        attempts += 1;
        let coords = draw(rng);
        let v = trilerp(&sdf.values, sdf.dims, coords);
        if v.abs() <= NEAR_SURFACE_BAND {
            points.push(SamplePoint {
                coords,
                target_sdf: v.clamp(-clamp_dist, clamp_dist),
            });
        }
    }
    // A grid with no surface in reach degenerates to uniform sampling.
    while points.len() < n {
        let coords = draw(rng);
        let v = trilerp(&sdf.values, sdf.dims, coords);
        points.push(SamplePoint {
            coords,
            target_sdf: v.clamp(-clamp_dist, clamp_dist),
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_indices(dims: [usize; 3], fg: &[(usize, usize, usize)]) -> VoxelMask {
        let mut occ = vec![0u8; dims[0] * dims[1] * dims[2]];
        for &(d, h, w) in fg {
            occ[(d * dims[1] + h) * dims[2] + w] = 1;
        }
        VoxelMask::new(dims, occ, [1.0; 3]).unwrap()
    }

    /// All-pairs distance computation, the slow way.
    fn sdf_brute_force(mask: &VoxelMask) -> Vec<f64> {
        let [d, h, w] = mask.dims;
        let voxels: Vec<(usize, usize, usize, bool)> = (0..d)
            .flat_map(|z| {
                (0..h).flat_map(move |y| (0..w).map(move |x| (z, y, x)))
            })
            .map(|(z, y, x)| (z, y, x, false))
            .collect();
        let mut out = vec![0.0; voxels.len()];
        for (i, &(z, y, x, _)) in voxels.iter().enumerate() {
            let me = mask.at(z, y, x);
            let mut best = f64::INFINITY;
            for (z2, y2, x2) in (0..d).flat_map(|a| {
                (0..h).flat_map(move |b| (0..w).map(move |c| (a, b, c)))
            }) {
                if mask.at(z2, y2, x2) != me {
                    let dd = z as f64 - z2 as f64;
                    let dh = y as f64 - y2 as f64;
                    let dw = x as f64 - x2 as f64;
                    best = best.min((dd * dd + dh * dh + dw * dw).sqrt());
                }
            }
            out[i] = if me { best - 0.5 } else { -(best - 0.5) };
        }
        out
    }

    #[test]
    fn single_center_voxel_has_half_voxel_levels() {
        let mask = mask_from_indices([5, 5, 5], &[(2, 2, 2)]);
        let sdf = mask_to_sdf(&mask).unwrap();
        let at = |d: usize, h: usize, w: usize| sdf.values[(d * 5 + h) * 5 + w];
        assert_eq!(at(2, 2, 2), 0.5);
        for (d, h, w) in [(1, 2, 2), (3, 2, 2), (2, 1, 2), (2, 3, 2), (2, 2, 1), (2, 2, 3)] {
            assert_eq!(at(d, h, w), -0.5, "6-neighbor ({d},{h},{w})");
        }
        // Diagonal neighbor sits sqrt(2) from the center.
        assert!((at(1, 1, 2) - (0.5 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn half_space_mask_gives_layered_levels() {
        let dims = [6, 4, 4];
        let mut occ = vec![0u8; 96];
        for z in 0..3 {
            for i in 0..16 {
                occ[z * 16 + i] = 1;
            }
        }
        let mask = VoxelMask::new(dims, occ, [1.0; 3]).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        for z in 0..6 {
            let want = match z {
                0 => 2.5,
                1 => 1.5,
                2 => 0.5,
                3 => -0.5,
                4 => -1.5,
                _ => -2.5,
            };
            for i in 0..16 {
                assert_eq!(sdf.values[z * 16 + i], want, "layer {z}");
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..5 {
            let dims = [12, 12, 12];
            let density = rng.random_range(0.05..0.5);
            let occ: Vec<u8> = (0..1728)
                .map(|_| u8::from(rng.random::<f64>() < density))
                .collect();
            let fg: usize = occ.iter().map(|&v| v as usize).sum();
            if fg == 0 || fg == occ.len() {
                continue;
            }
            let mask = VoxelMask::new(dims, occ, [1.0; 3]).unwrap();
            let sdf = mask_to_sdf(&mask).unwrap();
            let brute = sdf_brute_force(&mask);
            for (i, (&got, &want)) in sdf.values.iter().zip(&brute).enumerate() {
                assert!(
                    (got - want).abs() < 1e-9,
                    "case {case} voxel {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn round_trip_reproduces_every_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let dims = [16, 16, 16];
            let density = rng.random_range(0.02..0.9);
            let occ: Vec<u8> = (0..4096)
                .map(|_| u8::from(rng.random::<f64>() < density))
                .collect();
            let fg: usize = occ.iter().map(|&v| v as usize).sum();
            if fg == 0 || fg == occ.len() {
                continue;
            }
            let mask = VoxelMask::new(dims, occ, [1.0; 3]).unwrap();
            let sdf = mask_to_sdf(&mask).unwrap();
            let back = sdf_to_mask(&sdf, mask.spacing_mm);
            assert_eq!(back.occupancy, mask.occupancy);
        }
    }

    #[test]
    fn rejects_single_phase_masks() {
        let all_bg = VoxelMask::new([3, 3, 3], vec![0; 27], [1.0; 3]).unwrap();
        assert!(mask_to_sdf(&all_bg).is_err());
        let all_fg = VoxelMask::new([3, 3, 3], vec![1; 27], [1.0; 3]).unwrap();
        assert!(mask_to_sdf(&all_fg).is_err());
    }

    #[test]
    fn sdf_is_one_lipschitz_between_voxel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let dims = [10, 10, 10];
        let occ: Vec<u8> = (0..1000)
            .map(|_| u8::from(rng.random::<f64>() < 0.2))
            .collect();
        let mask = VoxelMask::new(dims, occ, [1.0; 3]).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        let idx = |d: usize, h: usize, w: usize| (d * 10 + h) * 10 + w;
        for _ in 0..2000 {
            let a = (
                rng.random_range(0..10),
                rng.random_range(0..10),
                rng.random_range(0..10),
            );
            let b = (
                rng.random_range(0..10),
                rng.random_range(0..10),
                rng.random_range(0..10),
            );
            let dist = ((a.0 as f64 - b.0 as f64).powi(2)
                + (a.1 as f64 - b.1 as f64).powi(2)
                + (a.2 as f64 - b.2 as f64).powi(2))
            .sqrt();
            let dv = (sdf.values[idx(a.0, a.1, a.2)] - sdf.values[idx(b.0, b.1, b.2)]).abs();
            assert!(dv <= dist + 1e-9, "{dv} > {dist} between {a:?} and {b:?}");
        }
    }

    #[test]
    fn integer_translation_translates_the_sdf() {
        let dims = [16, 16, 16];
        let blob = sphere_sdf([7.0, 6.0, 6.0], 2.7);
        let m1 = VoxelMask::from_field(dims, [1.0; 3], &blob).unwrap();
        let shifted = |p: [f64; 3]| blob([p[0] - 1.0, p[1] - 2.0, p[2] - 3.0]);
        let m2 = VoxelMask::from_field(dims, [1.0; 3], shifted).unwrap();
        let s1 = mask_to_sdf(&m1).unwrap();
        let s2 = mask_to_sdf(&m2).unwrap();
        let idx = |d: usize, h: usize, w: usize| (d * 16 + h) * 16 + w;
        // Compare where both windows see the same geometry: foreground is
        // compact and interior, so any voxel pair at the fixed offset agrees.
        for d in 0..15 {
            for h in 0..14 {
                for w in 0..13 {
                    let a = s1.values[idx(d, h, w)];
                    let b = s2.values[idx(d + 1, h + 2, w + 3)];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "({d},{h},{w}): {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn sphere_oracle_values() {
        let f = sphere_sdf([0.0, 0.0, 0.0], 8.0);
        assert_eq!(f([0.0, 0.0, 0.0]), 8.0);
        assert_eq!(f([10.0, 0.0, 0.0]), -2.0);
        assert_eq!(f([0.0, 8.0, 0.0]), 0.0);
    }

    #[test]
    fn ellipsoid_oracle_zero_set_and_interior() {
        let f = ellipsoid_sdf([0.0, 0.0, 0.0], [4.0, 2.0, 3.0]);
        assert!(f([0.0, 0.0, 0.0]) > 0.0);
        for p in [[4.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]] {
            assert!(f(p).abs() < 1e-12, "surface point {p:?} -> {}", f(p));
        }
        assert!(f([5.0, 0.0, 0.0]) < 0.0);
        assert!(f([0.0, 1.0, 0.0]) > 0.0);
        // Equal radii reduce to the sphere.
        let e = ellipsoid_sdf([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]);
        let s = sphere_sdf([1.0, 2.0, 3.0], 5.0);
        for p in [[1.0, 2.0, 3.0], [4.0, 2.0, 3.0], [1.0, 9.0, 3.0], [2.0, 0.0, 1.0]] {
            assert!((e(p) - s(p)).abs() < 1e-9, "at {p:?}: {} vs {}", e(p), s(p));
        }
    }

    #[test]
    fn voxelized_sphere_sdf_tracks_the_analytic_field() {
        let dims = [32, 32, 32];
        let center = [15.5, 15.5, 15.5];
        let f = sphere_sdf(center, 8.3);
        let mask = VoxelMask::from_field(dims, [1.0; 3], &f).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        for d in 0..32 {
            for h in 0..32 {
                for w in 0..32 {
                    let got = sdf.values[(d * 32 + h) * 32 + w];
                    let want = f([d as f64, h as f64, w as f64]);
                    assert!(
                        (got - want).abs() <= 1.0,
                        "voxel ({d},{h},{w}): edt {got} vs analytic {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn sphere_mask_volume_matches_the_analytic_volume() {
        let dims = [32, 32, 32];
        let f = sphere_sdf([15.5, 15.5, 15.5], 8.0);
        let mask = VoxelMask::from_field(dims, [1.0; 3], f).unwrap();
        let want = 4.0 / 3.0 * std::f64::consts::PI * 8.0f64.powi(3);
        let got = mask.foreground_count() as f64;
        assert!(
            (got - want).abs() / want < 0.02,
            "voxel count {got} vs analytic {want}"
        );
    }

    #[test]
    fn constant_negative_field_gives_empty_mask() {
        let sdf = SdfGrid {
            dims: [4, 4, 4],
            values: vec![-1.0; 64],
        };
        let mask = sdf_to_mask(&sdf, [1.0; 3]);
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn trilerp_reads_nodes_and_cell_centers() {
        let values: Vec<f64> = (0..8).map(|v| v as f64).collect();
        assert_eq!(trilerp(&values, [2, 2, 2], [-1.0, -1.0, -1.0]), 0.0);
        assert_eq!(trilerp(&values, [2, 2, 2], [1.0, 1.0, 1.0]), 7.0);
        assert_eq!(trilerp(&values, [2, 2, 2], [0.0, 0.0, 0.0]), 3.5);
        // Clamped outside.
        assert_eq!(trilerp(&values, [2, 2, 2], [-3.0, -1.0, -1.0]), 0.0);
    }

    #[test]
    fn sampling_rejects_degenerate_arguments() {
        let sdf = SdfGrid {
            dims: [4, 4, 4],
            values: vec![0.0; 64],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_points(&sdf, 0, 0.5, 8.0, &mut rng).is_err());
        assert!(sample_training_points(&sdf, 10, 1.5, 8.0, &mut rng).is_err());
        assert!(sample_training_points(&sdf, 10, 0.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_is_uniform_over_octants() {
        let mask = VoxelMask::from_field([16, 16, 16], [1.0; 3], sphere_sdf([7.5; 3], 4.0)).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let n = 100_000;
        let pts = sample_training_points(&sdf, n, 0.0, 8.0, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for p in &pts {
            let oct = usize::from(p.coords[0] >= 0.0) * 4
                + usize::from(p.coords[1] >= 0.0) * 2
                + usize::from(p.coords[2] >= 0.0);
            counts[oct] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.99 quantile of chi-square with 7 degrees of freedom.
        assert!(chi2 < 18.475, "chi2 {chi2} over octants {counts:?}");
    }

    #[test]
    fn near_surface_points_hug_the_zero_level_set() {
        let mask = VoxelMask::from_field([32, 32, 32], [1.0; 3], sphere_sdf([15.5; 3], 8.0)).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = 2000;
        let pts = sample_training_points(&sdf, n, 1.0, 8.0, &mut rng).unwrap();
        assert_eq!(pts.len(), n);
        for p in &pts {
            assert!(
                p.target_sdf.abs() <= NEAR_SURFACE_BAND + 1e-12,
                "point {:?} target {} outside band",
                p.coords,
                p.target_sdf
            );
        }
    }

    #[test]
    fn targets_are_clamped_and_consistent_with_the_analytic_sphere() {
        let center = [15.5; 3];
        let radius = 8.0;
        let mask = VoxelMask::from_field([32, 32, 32], [1.0; 3], sphere_sdf(center, radius)).unwrap();
        let sdf = mask_to_sdf(&mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let clamp = 4.0;
        let pts = sample_training_points(&sdf, 5000, 0.5, clamp, &mut rng).unwrap();
        let analytic = sphere_sdf(center, radius);
        for p in &pts {
            assert!(p.target_sdf.abs() <= clamp, "target beyond clamp: {}", p.target_sdf);
            // Map normalized coords back to voxel indices.
            let vox = [
                (p.coords[0] + 1.0) / 2.0 * 31.0,
                (p.coords[1] + 1.0) / 2.0 * 31.0,
                (p.coords[2] + 1.0) / 2.0 * 31.0,
            ];
            if p.target_sdf > 0.0 && p.target_sdf < clamp {
                assert!(
                    analytic(vox) > -1.0,
                    "positive target {} at {:?} but analytic {}",
                    p.target_sdf,
                    vox,
                    analytic(vox)
                );
            }
        }
    }

    #[test]
    fn voxel_center_coords_span_minus_one_to_one() {
        assert_eq!(voxel_center_coord(0, 32), -1.0);
        assert_eq!(voxel_center_coord(31, 32), 1.0);
        assert!((voxel_center_coord(16, 33)).abs() < 1e-15);
        assert_eq!(voxel_center_coord(0, 1), 0.0);
    }

    #[test]
    fn mask_validation_rejects_bad_inputs() {
        assert!(VoxelMask::new([0, 3, 3], vec![], [1.0; 3]).is_err());
        assert!(VoxelMask::new([2, 2, 2], vec![0; 7], [1.0; 3]).is_err());
        assert!(VoxelMask::new([2, 2, 2], vec![2; 8], [1.0; 3]).is_err());
        assert!(VoxelMask::new([2, 2, 2], vec![0; 8], [0.0, 1.0, 1.0]).is_err());
    }
}
