//! Filtered backprojection of noise tomograms into a Stokes-space volume.
//!
//! For large photon numbers the tomograms become one-dimensional marginals of
//! a three-dimensional quasiprobability `Q(r)`, and the inversion reduces to
//!
//! ```text
//! Q(r) = −1/(8π²) ∫dn p''_n(r·n)
//! ```
//!
//! Coordinates are fluctuations about the classical mean in shot-noise units.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exact::{q_function, SphereFunction};
use crate::measurement::{AngleGrid, Coverage, HistogramTomogram, TomogramSet};
use crate::states::{GaussianStokesModel, PolarizationState};
use crate::su2::Direction;

/// `−1/(8π²)`, the continuum inversion constant for weights summing to `4π`.
pub const ANALYTIC_PREFACTOR: f64 = -1.0 / (8.0 * PI * PI);

/// Default half-width of the reconstruction box per axis.
pub const DEFAULT_EXTENT: f64 = 6.0;
pub const DEFAULT_VOXELS: usize = 201;

const MIN_FILTER_BINS: usize = 5;
const SMOOTHING_CUTOFF_SIGMAS: f64 = 6.0;
const ROW_BLOCK: usize = 16;

/// A marginal density sampled on a uniform abscissa.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionDensity {
    pub dir: Direction,
    pub start: f64,
    pub step: f64,
    pub density: Vec<f64>,
}

impl ProjectionDensity {
    /// Counts divided by `total · bin width`, with the abscissa rescaled to
    /// shot-noise units by the histogram calibration.
    pub fn from_histogram(hist: &HistogramTomogram) -> Result<Self> {
        hist.validate()?;
        if !(hist.calibration > 0.0) {
            return Err(Error::Input(format!("calibration {} must be positive", hist.calibration)));
        }
        let bins = hist.bins();
        let (lo, hi) = (hist.bin_edges[0], hist.bin_edges[bins]);
        let width = (hi - lo) / bins as f64;
        let uniform = hist
            .bin_edges
            .iter()
            .enumerate()
            .all(|(i, e)| (e - (lo + i as f64 * width)).abs() <= 1e-9 * width.max(hi.abs()));
        if !uniform {
            return Err(Error::Input("filtered backprojection needs uniform bins".into()));
        }
        let scale = hist.calibration.sqrt().recip();
        let norm = hist.total_samples.max(1) as f64 * width * scale;
        Ok(Self {
            dir: hist.dir,
            start: (lo + 0.5 * width) * scale,
            step: width * scale,
            density: hist.counts.iter().map(|&c| c as f64 / norm).collect(),
        })
    }

    pub fn abscissa(&self) -> Vec<f64> {
        (0..self.density.len()).map(|i| self.start + i as f64 * self.step).collect()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.step
    }
}

/// Second derivative of a smoothed marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredTomogram {
    pub dir: Direction,
    pub start: f64,
    pub step: f64,
    pub second_derivative: Vec<f64>,
    pub smoothing_width: f64,
}

impl FilteredTomogram {
    pub fn abscissa(&self) -> Vec<f64> {
        (0..self.second_derivative.len()).map(|i| self.start + i as f64 * self.step).collect()
    }
}

/// Gaussian smoothing of width `smoothing_width` (zero disables it), then
/// fourth-order central second differences (three-point next to the ends,
/// second-order one-sided at the ends).
pub fn filter_tomogram(projection: &ProjectionDensity, smoothing_width: f64) -> Result<FilteredTomogram> {
    let n = projection.density.len();
    if n < MIN_FILTER_BINS {
        return Err(Error::Domain(format!("need at least {MIN_FILTER_BINS} bins, got {n}")));
    }
    if !(smoothing_width >= 0.0) || !smoothing_width.is_finite() {
        return Err(Error::Domain(format!("smoothing width {smoothing_width} must be non-negative")));
    }
    if !(projection.step > 0.0) {
        return Err(Error::Domain("abscissa step must be positive".into()));
    }
    let h = projection.step;
    let smoothed = if smoothing_width > 0.0 {
        gaussian_smooth(&projection.density, smoothing_width / h)
    } else {
        projection.density.clone()
    };
    let f = &smoothed;
    let inv_h2 = 1.0 / (h * h);
    let mut d2 = vec![0.0; n];
    d2[1] = (f[2] - 2.0 * f[1] + f[0]) * inv_h2;
    d2[n - 2] = (f[n - 1] - 2.0 * f[n - 2] + f[n - 3]) * inv_h2;
    for i in 2..n - 2 {
        d2[i] = (-f[i + 2] + 16.0 * f[i + 1] - 30.0 * f[i] + 16.0 * f[i - 1] - f[i - 2]) * (inv_h2 / 12.0);
    }
    d2[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) * inv_h2;
    d2[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) * inv_h2;
    Ok(FilteredTomogram {
        dir: projection.dir,
        start: projection.start,
        step: h,
        second_derivative: d2,
        smoothing_width,
    })
}

/// Discrete convolution with a normalized sampled Gaussian; zero outside.
fn gaussian_smooth(values: &[f64], sigma_bins: f64) -> Vec<f64> {
    let half = (SMOOTHING_CUTOFF_SIGMAS * sigma_bins).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let x = k as f64 - half as f64;
            (-0.5 * x * x / (sigma_bins * sigma_bins)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = i + k as isize - half as isize;
                if (0..n).contains(&j) {
                    acc += w * values[j as usize];
                }
            }
            acc / total
        })
        .collect()
}

/// Cubic reconstruction box centered on the classical mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Half-width of the box along each axis.
    pub extent: [f64; 3],
}

impl GridSpec {
    pub fn cube(voxels: usize, extent: f64) -> Self {
        Self {
            dims: [voxels; 3],
            extent: [extent; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("grid needs at least 2 voxels per axis, got {:?}", self.dims)));
        }
        if self.extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("grid extent {:?} must be positive", self.extent)));
        }
        Ok(())
    }

    pub fn origin(&self) -> [f64; 3] {
        self.extent.map(|e| -e)
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 2.0 * self.extent[a] / (self.dims[a] - 1) as f64)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::cube(DEFAULT_VOXELS, DEFAULT_EXTENT)
    }
}

/// Values on a Cartesian grid, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        let v = Self {
            dims,
            origin,
            spacing,
            values,
        };
        v.validate()?;
        Ok(v)
    }

    /// Samples `f` at every voxel center.
    pub fn from_fn(spec: &GridSpec, f: impl Fn(Vector3<f64>) -> f64 + Sync) -> Result<Self> {
        spec.validate()?;
        let (origin, spacing) = (spec.origin(), spec.spacing());
        let [nx, ny, nz] = spec.dims;
        let mut values = vec![0.0; nx * ny * nz];
        values.par_chunks_mut(ny * nz).enumerate().for_each(|(ix, plane)| {
            for iy in 0..ny {
                for iz in 0..nz {
                    let r = Vector3::new(
                        origin[0] + ix as f64 * spacing[0],
                        origin[1] + iy as f64 * spacing[1],
                        origin[2] + iz as f64 * spacing[2],
                    );
                    plane[iy * nz + iz] = f(r);
                }
            }
        });
        Self::new(spec.dims, origin, spacing, values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Input(format!("volume dims {:?} must be at least 2", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Input(format!("volume spacing {:?} must be positive", self.spacing)));
        }
        if self.values.len() != self.dims.iter().product::<usize>() {
            return Err(Error::Input("volume value count does not match dims".into()));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("volume contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.index(ix, iy, iz)]
    }

    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
            self.origin[2] + iz as f64 * self.spacing[2],
        )
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every voxel with its position, in storage order.
    pub fn voxels(&self) -> impl Iterator<Item = (Vector3<f64>, f64)> + '_ {
        let [_, ny, nz] = self.dims;
        self.values.iter().enumerate().map(move |(i, &v)| {
            let (ix, rest) = (i / (ny * nz), i % (ny * nz));
            (self.position(ix, rest / nz, rest % nz), v)
        })
    }

    /// The 2D slice at `index` along `axis`; rows follow the lower remaining
    /// axis, columns the higher one.
    pub fn slice(&self, axis: usize, index: usize) -> Result<Vec<Vec<f64>>> {
        if axis > 2 || index >= self.dims.get(axis).copied().unwrap_or(0) {
            return Err(Error::Input(format!("slice {index} along axis {axis} is outside the volume")));
        }
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        Ok((0..self.dims[a])
            .map(|i| {
                (0..self.dims[b])
                    .map(|j| {
                        let mut idx = [0usize; 3];
                        idx[axis] = index;
                        idx[a] = i;
                        idx[b] = j;
                        self.get(idx[0], idx[1], idx[2])
                    })
                    .collect()
            })
            .collect())
    }
}

/// Multiplier applied to the backprojected sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prefactor {
    Analytic,
    Fixed(f64),
    /// Fixed by an isotropic unit-Gaussian phantom reconstructed on the same
    /// directions and abscissa step, scaled to unit mass.
    Calibrated,
}

impl Prefactor {
    pub fn as_str(&self) -> String {
        match self {
            Prefactor::Analytic => "analytic".into(),
            Prefactor::Calibrated => "calibrated".into(),
            Prefactor::Fixed(v) => format!("{v}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analytic" => Some(Prefactor::Analytic),
            "calibrated" => Some(Prefactor::Calibrated),
            other => other.parse().ok().map(Prefactor::Fixed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backprojection {
    pub volume: VolumeGrid,
    /// Fraction of voxel-direction pairs whose projection fell outside the
    /// filtered abscissa.
    pub out_of_support_fraction: f64,
    pub prefactor: f64,
    /// Sphere-weighted mean of `step²/6`, the isotropic variance that linear
    /// interpolation between abscissa points adds on average.
    pub interpolation_variance: f64,
}

/// One direction (or a merged antipodal pair) ready for accumulation.
struct Profile {
    n: Vector3<f64>,
    start: f64,
    inv_step: f64,
    /// `(value, next − value)` per abscissa point, already weighted.
    table: Vec<[f64; 2]>,
    multiplicity: u64,
    /// `Σ w step²` over the merged directions.
    weighted_step_sq: f64,
}

impl Profile {
    fn new(f: &FilteredTomogram, values: Vec<f64>, multiplicity: u64, weight: f64) -> Self {
        let mut table: Vec<[f64; 2]> = values.windows(2).map(|p| [p[0], p[1] - p[0]]).collect();
        table.push([*values.last().expect("filtered tomograms are non-empty"), 0.0]);
        Self {
            n: f.dir.unit_vector(),
            start: f.start,
            inv_step: 1.0 / f.step,
            table,
            multiplicity,
            weighted_step_sq: weight * f.step * f.step,
        }
    }
}

/// Groups each direction with its antipode when present, keeping the order
/// of first appearance.
fn pair_antipodes(dirs: &[Direction]) -> Vec<(usize, Option<usize>)> {
    let key = |v: Vector3<f64>| [v.x, v.y, v.z].map(|c| (c * 1e9).round() as i64);
    let mut lookup: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, d) in dirs.iter().enumerate() {
        lookup.entry(key(d.unit_vector())).or_default().push(i);
    }
    let mut used = vec![false; dirs.len()];
    let mut pairs = Vec::with_capacity(dirs.len() / 2 + 1);
    for (i, d) in dirs.iter().enumerate() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let partner = lookup
            .get(&key(-d.unit_vector()))
            .and_then(|c| c.iter().copied().find(|&j| !used[j]));
        if let Some(j) = partner {
            used[j] = true;
        }
        pairs.push((i, partner));
    }
    pairs
}

fn mirrored(a: &FilteredTomogram, b: &FilteredTomogram) -> bool {
    let len = a.second_derivative.len();
    len == b.second_derivative.len()
        && (a.step - b.step).abs() <= 1e-12 * a.step
        && (b.start + a.start + (len - 1) as f64 * a.step).abs() <= 1e-9 * a.step
}

fn pair_profiles(
    (i, j): (usize, Option<usize>),
    weights: &[f64],
    prefactor: f64,
    filtered: &(impl Fn(usize) -> Result<FilteredTomogram> + Sync),
) -> Result<Vec<Profile>> {
    let load = |k: usize| -> Result<FilteredTomogram> {
        let f = filtered(k)?;
        if f.second_derivative.len() < 2 || !(f.step > 0.0) {
            return Err(Error::Input(format!(
                "filtered tomogram at (θ={}, φ={}) needs 2 points and a positive step",
                f.dir.theta(),
                f.dir.phi()
            )));
        }
        Ok(f)
    };
    let fi = load(i)?;
    let scaled = |f: &FilteredTomogram, k: usize| -> Vec<f64> {
        let w = weights[k] * prefactor;
        f.second_derivative.iter().map(|v| w * v).collect()
    };
    let mut values = scaled(&fi, i);
    let Some(j) = j else {
        return Ok(vec![Profile::new(&fi, values, 1, weights[i])]);
    };
    let fj = load(j)?;
    if !mirrored(&fi, &fj) {
        let other = scaled(&fj, j);
        return Ok(vec![
            Profile::new(&fi, values, 1, weights[i]),
            Profile::new(&fj, other, 1, weights[j]),
        ]);
    }
    let wj = weights[j] * prefactor;
    let len = values.len();
    for (k, v) in values.iter_mut().enumerate() {
        *v += wj * fj.second_derivative[len - 1 - k];
    }
    Ok(vec![Profile::new(&fi, values, 2, weights[i] + weights[j])])
}

/// Adds every profile to the volume; returns the out-of-support count.
fn accumulate(values: &mut [f64], profiles: &[Profile], spec: &GridSpec) -> u64 {
    let (origin, spacing) = (spec.origin(), spec.spacing());
    let [_, ny, nz] = spec.dims;
    values
        .par_chunks_mut(ny * nz)
        .enumerate()
        .map(|(ix, plane)| {
            let x = origin[0] + ix as f64 * spacing[0];
            let mut outside = 0u64;
            for block in (0..ny).step_by(ROW_BLOCK) {
                let rows = block..(block + ROW_BLOCK).min(ny);
                for p in profiles {
                    let last = (p.table.len() - 1) as f64;
                    // u(iz) = u0 + iz·du indexes the abscissa
                    let du = spacing[2] * p.n.z * p.inv_step;
                    for iy in rows.clone() {
                        let y = origin[1] + iy as f64 * spacing[1];
                        let s0 = x * p.n.x + y * p.n.y + origin[2] * p.n.z;
                        let u0 = (s0 - p.start) * p.inv_step;
                        let (lo, hi) = inside_range(u0, du, last, nz);
                        outside += (nz - (hi - lo)) as u64 * p.multiplicity;
                        accumulate_row(&mut plane[iy * nz + lo..iy * nz + hi], &p.table, u0 + lo as f64 * du, du);
                    }
                }
            }
            outside
        })
        .sum()
}

/// Antipodal pairs filtered and accumulated per batch; bounds memory when
/// the filtered tomograms are produced on demand.
const BATCH_PAIRS: usize = 256;

/// `Σ_n w_n f''_n(r·n)` times the prefactor, with linear interpolation in
/// each filtered abscissa.
///
/// Every voxel sums its directions in input order, so the result does not
/// depend on how the work is scheduled. Directions whose antipode is present
/// with a mirrored abscissa are merged before accumulation.
pub fn backproject(filtered: &[FilteredTomogram], weights: &[f64], spec: &GridSpec, prefactor: f64) -> Result<Backprojection> {
    let dirs: Vec<Direction> = filtered.iter().map(|f| f.dir).collect();
    backproject_with(&dirs, weights, spec, prefactor, |i| Ok(filtered[i].clone()))
}

/// [`backproject`] with the filtered tomogram of direction `i` produced by
/// `filtered(i)` when its batch comes up.
pub fn backproject_with(
    dirs: &[Direction],
    weights: &[f64],
    spec: &GridSpec,
    prefactor: f64,
    filtered: impl Fn(usize) -> Result<FilteredTomogram> + Sync,
) -> Result<Backprojection> {
    spec.validate()?;
    if dirs.is_empty() || dirs.len() != weights.len() {
        return Err(Error::Input(format!("{} directions for {} weights", dirs.len(), weights.len())));
    }
    let [nx, ny, nz] = spec.dims;
    let mut values = vec![0.0; nx * ny * nz];
    let mut outside = 0u64;
    let mut weighted_step_sq = 0.0;
    for batch in pair_antipodes(dirs).chunks(BATCH_PAIRS) {
        let profiles: Vec<Profile> = batch
            .par_iter()
            .map(|&pair| pair_profiles(pair, weights, prefactor, &filtered))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        outside += accumulate(&mut values, &profiles, spec);
        weighted_step_sq += profiles.iter().map(|p| p.weighted_step_sq).sum::<f64>();
    }
    let total = (nx * ny * nz * dirs.len()) as f64;
    Ok(Backprojection {
        volume: VolumeGrid::new(spec.dims, spec.origin(), spec.spacing(), values)?,
        out_of_support_fraction: outside as f64 / total,
        prefactor,
        interpolation_variance: weighted_step_sq / weights.iter().sum::<f64>() / 6.0,
    })
}

/// `row[i] += table(u + i·du)` with linear interpolation; four independent
/// lanes keep the abscissa updates off one dependency chain.
fn accumulate_row(row: &mut [f64], table: &[[f64; 2]], u: f64, du: f64) {
    let sample = |u: f64| {
        let k = u as i32 as usize;
        table.get(k).map_or(0.0, |[v, d]| v + (u - k as f64) * d)
    };
    let mut lanes = [u, u + du, u + 2.0 * du, u + 3.0 * du];
    let stride = 4.0 * du;
    let mut chunks = row.chunks_exact_mut(4);
    for chunk in &mut chunks {
        for (acc, lane) in chunk.iter_mut().zip(lanes.iter_mut()) {
            *acc += sample(*lane);
            *lane += stride;
        }
    }
    for (acc, lane) in chunks.into_remainder().iter_mut().zip(lanes) {
        *acc += sample(lane);
    }
}

/// Half-open range of `i` in `0..n` with `0 ≤ u0 + i·du ≤ last`.
fn inside_range(u0: f64, du: f64, last: f64, n: usize) -> (usize, usize) {
    let nf = n as f64;
    let (lo, hi) = if du == 0.0 {
        if (0.0..=last).contains(&u0) {
            (0.0, nf)
        } else {
            (0.0, 0.0)
        }
    } else {
        let a = (0.0 - u0) / du;
        let b = (last - u0) / du;
        let (a, b) = if du > 0.0 { (a, b) } else { (b, a) };
        (a.ceil().max(0.0), (b.floor() + 1.0).min(nf))
    };
    let mut lo = lo.clamp(0.0, nf) as usize;
    let mut hi = (hi.clamp(0.0, nf) as usize).max(lo);
    // guard against rounding at the interval ends
    let ok = |i: usize| {
        let u = u0 + i as f64 * du;
        (0.0..=last).contains(&u)
    };
    while lo < hi && !ok(lo) {
        lo += 1;
    }
    while hi > lo && !ok(hi - 1) {
        hi -= 1;
    }
    (lo, hi)
}

/// Discrete moments of a (possibly signed) volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMoments {
    pub mass: f64,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// Negative mass over total absolute mass.
    pub negative_fraction: f64,
}

impl VolumeMoments {
    /// Covariance with an isotropic blur variance removed.
    pub fn deconvolved_covariance(&self, blur_variance: f64) -> Matrix3<f64> {
        self.covariance - Matrix3::identity() * blur_variance
    }

    /// Eigenvalues ascending with matching unit eigenvectors.
    pub fn principal_axes(&self, blur_variance: f64) -> ([f64; 3], [Vector3<f64>; 3]) {
        principal_axes(&self.deconvolved_covariance(blur_variance))
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn principal_axes(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    (
        order.map(|i| eig.eigenvalues[i]),
        order.map(|i| eig.eigenvectors.column(i).into_owned()),
    )
}

pub fn volume_moments(volume: &VolumeGrid) -> Result<VolumeMoments> {
    let dv = volume.voxel_volume();
    let (mut mass, mut negative, mut absolute) = (0.0, 0.0, 0.0);
    let mut first = Vector3::zeros();
    for (r, v) in volume.voxels() {
        mass += v;
        absolute += v.abs();
        if v < 0.0 {
            negative -= v;
        }
        first += r * v;
    }
    if !(mass > 0.0) {
        return Err(Error::DegenerateVolume(format!("volume mass {:e} is not positive", mass * dv)));
    }
    let mean = first / mass;
    let mut second = Matrix3::zeros();
    for (r, v) in volume.voxels() {
        let d = r - mean;
        second += d * d.transpose() * v;
    }
    Ok(VolumeMoments {
        mass: mass * dv,
        mean,
        covariance: second / mass,
        negative_fraction: negative / absolute,
    })
}

/// Principal half-widths of the region above a fraction of the maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetStats {
    pub level: f64,
    pub voxel_count: usize,
    pub center: Vector3<f64>,
    /// Ascending, matching `axes`.
    pub half_widths: [f64; 3],
    pub axes: [Vector3<f64>; 3],
    /// Spread matrix of the level set; `sqrt(5 aᵀ S a)` is the half-width
    /// along a unit vector `a`.
    pub spread: Matrix3<f64>,
}

impl LevelSetStats {
    pub fn half_width_along(&self, axis: &Vector3<f64>) -> f64 {
        let a = axis.normalize();
        (5.0 * (a.transpose() * self.spread * a)[(0, 0)]).sqrt()
    }
}

/// Treats the voxels at or above `level_fraction · max` as a solid
/// ellipsoid: its second moments give semi-axes `sqrt(5λ)`.
pub fn isocontour_level_stats(volume: &VolumeGrid, level_fraction: f64) -> Result<LevelSetStats> {
    if !(level_fraction > 0.0 && level_fraction < 1.0) {
        return Err(Error::Domain(format!("level fraction {level_fraction} must lie in (0, 1)")));
    }
    let max = volume.max();
    if !(max > 0.0) {
        return Err(Error::EmptyLevelSet(level_fraction));
    }
    let level = level_fraction * max;
    let inside: Vec<Vector3<f64>> = volume.voxels().filter(|(_, v)| *v >= level).map(|(r, _)| r).collect();
    if inside.len() < 4 {
        return Err(Error::EmptyLevelSet(level_fraction));
    }
    let count = inside.len() as f64;
    let center = inside.iter().sum::<Vector3<f64>>() / count;
    let spread = inside
        .iter()
        .map(|r| (r - center) * (r - center).transpose())
        .sum::<Matrix3<f64>>()
        / count;
    let (values, axes) = principal_axes(&spread);
    Ok(LevelSetStats {
        level,
        voxel_count: inside.len(),
        center,
        half_widths: values.map(|l| (5.0 * l.max(0.0)).sqrt()),
        axes,
        spread,
    })
}

/// Angular distribution in a small patch around the mean polarization.
///
/// Offsets `(a, b)` are the angles (radians) towards the first and second
/// frame axes, as seen from the origin of Stokes space.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePatch {
    pub mean_direction: Direction,
    /// Orthonormal frame: two tangent axes and the mean direction.
    pub frame: [Vector3<f64>; 3],
    pub half_range: f64,
    pub bins: usize,
    /// `bins × bins`, row index along the first tangent axis.
    pub values: Vec<f64>,
    pub negative_fraction: f64,
}

impl SpherePatch {
    pub fn cell(&self) -> f64 {
        2.0 * self.half_range / self.bins as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let c = self.cell();
        (0..self.bins).map(|i| -self.half_range + (i as f64 + 0.5) * c).collect()
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell() * self.cell()
    }

    /// Mean and covariance of the angular offsets.
    pub fn angular_moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let centers = self.centers();
        let total: f64 = self.values.iter().sum();
        let mut mean = [0.0; 2];
        for (i, a) in centers.iter().enumerate() {
            for (j, b) in centers.iter().enumerate() {
                let v = self.values[i * self.bins + j] / total;
                mean[0] += a * v;
                mean[1] += b * v;
            }
        }
        let mut cov = [[0.0; 2]; 2];
        for (i, a) in centers.iter().enumerate() {
            for (j, b) in centers.iter().enumerate() {
                let v = self.values[i * self.bins + j] / total;
                let d = [a - mean[0], b - mean[1]];
                for p in 0..2 {
                    for q in 0..2 {
                        cov[p][q] += d[p] * d[q] * v;
                    }
                }
            }
        }
        (mean, cov)
    }
}

/// Tangent frame `[e1, e2, μ̂]` with `e1` in the plane of `μ̂` and the pole.
pub fn mean_frame(mean: &Vector3<f64>) -> Result<[Vector3<f64>; 3]> {
    let norm = mean.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Domain("sphere map needs a non-zero classical mean".into()));
    }
    let e3 = mean / norm;
    let reference = if e3.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = (reference - e3 * e3.dot(&reference)).normalize();
    Ok([e1, e3.cross(&e1), e3])
}

/// Collapses the volume along rays from the Stokes origin onto a patch of
/// the unit sphere around the classical mean.
///
/// A voxel at fluctuation `r` sits at `μ + r·sqrt(|μ|/2)` in Stokes units, so
/// the angular spread shrinks as `1/sqrt(2|μ|)`. The result is normalized to
/// unit integral; ringing below zero is kept and its weight reported.
pub fn sphere_sum_distribution(volume: &VolumeGrid, mean: &Vector3<f64>, half_range: f64, bins: usize) -> Result<SpherePatch> {
    if bins == 0 || !(half_range > 0.0) {
        return Err(Error::Domain("patch needs positive size and bin count".into()));
    }
    let frame = mean_frame(mean)?;
    let length = mean.norm();
    let scale = (length / 2.0).sqrt();
    let cell = 2.0 * half_range / bins as f64;
    let mut values = vec![0.0; bins * bins];
    let bin = |angle: f64| {
        let i = ((angle + half_range) / cell).floor();
        (i >= 0.0 && i < bins as f64).then_some(i as usize)
    };
    for (r, v) in volume.voxels() {
        let s = r * scale;
        let along = length + s.dot(&frame[2]);
        if along <= 0.0 {
            continue;
        }
        let a = s.dot(&frame[0]).atan2(along);
        let b = s.dot(&frame[1]).atan2(along);
        if let (Some(i), Some(j)) = (bin(a), bin(b)) {
            values[i * bins + j] += v;
        }
    }
    normalize_patch(values, frame, half_range, bins)
}

fn normalize_patch(mut values: Vec<f64>, frame: [Vector3<f64>; 3], half_range: f64, bins: usize) -> Result<SpherePatch> {
    let cell = 2.0 * half_range / bins as f64;
    let total = values.iter().sum::<f64>() * cell * cell;
    if !(total > 0.0) {
        return Err(Error::DegenerateVolume("no positive weight inside the sphere patch".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    let negative: f64 = values.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let absolute: f64 = values.iter().map(|v| v.abs()).sum();
    Ok(SpherePatch {
        mean_direction: Direction::from_vector(frame[2])?,
        frame,
        half_range,
        bins,
        values,
        negative_fraction: negative / absolute,
    })
}

/// `Σ_J (2J+1)/(4π) Q_J(n)` from reconstructed blocks: the distribution
/// over the unit sphere summed over photon number, with unit integral.
pub fn sphere_sum_from_state(state: &PolarizationState, directions: &[Direction]) -> SphereFunction {
    let mut total = vec![0.0; directions.len()];
    for block in state.blocks() {
        let scale = f64::from(block.spin.two_j() + 1) / (4.0 * PI);
        for (t, (_, q)) in total.iter_mut().zip(q_function(block, directions).samples) {
            *t += scale * q;
        }
    }
    SphereFunction {
        spin: None,
        samples: directions.iter().copied().zip(total).collect(),
    }
}

/// Three-dimensional Gaussian with analytic marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPhantom {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl GaussianPhantom {
    pub fn new(mean: Vector3<f64>, covariance: Matrix3<f64>) -> Result<Self> {
        if (covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax() || covariance.cholesky().is_none() {
            return Err(Error::NumericalModel("phantom covariance must be symmetric positive definite".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn isotropic(variance: f64) -> Result<Self> {
        Self::new(Vector3::zeros(), Matrix3::identity() * variance)
    }

    /// Fluctuation part of a Gaussian Stokes model.
    pub fn from_model(model: &GaussianStokesModel) -> Result<Self> {
        Self::new(model.displacement, model.covariance)
    }

    pub fn density(&self, r: &Vector3<f64>) -> f64 {
        let inv = self.covariance.try_inverse().expect("positive definite");
        let d = r - self.mean;
        let norm = ((2.0 * PI).powi(3) * self.covariance.determinant()).sqrt();
        (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp() / norm
    }

    /// Marginal along `dir` on `[−half_range, half_range]` with spacing
    /// `step`; the abscissa is symmetric so antipodal marginals mirror.
    pub fn marginal(&self, dir: &Direction, step: f64, half_range: f64) -> ProjectionDensity {
        let n = dir.unit_vector();
        let mu = self.mean.dot(&n);
        let var = (n.transpose() * self.covariance * n)[(0, 0)];
        let half = (half_range / step).ceil() as usize;
        let start = -(half as f64) * step;
        let norm = (2.0 * PI * var).sqrt();
        ProjectionDensity {
            dir: *dir,
            start,
            step,
            density: (0..=2 * half)
                .map(|i| {
                    let x = start + i as f64 * step;
                    (-0.5 * (x - mu).powi(2) / var).exp() / norm
                })
                .collect(),
        }
    }

    pub fn marginals(&self, grid: &AngleGrid, step: f64, half_range: f64) -> Vec<ProjectionDensity> {
        grid.directions()
            .par_iter()
            .map(|d| self.marginal(d, step, half_range))
            .collect()
    }
}

/// Knobs of the Radon path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadonOptions {
    pub smoothing_width: f64,
    pub grid: GridSpec,
    pub prefactor: Prefactor,
}

impl Default for RadonOptions {
    fn default() -> Self {
        Self {
            smoothing_width: 0.0,
            grid: GridSpec::default(),
            prefactor: Prefactor::Calibrated,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RadonReconstruction {
    pub volume: VolumeGrid,
    pub out_of_support_fraction: f64,
    pub prefactor: f64,
    pub smoothing_width: f64,
    pub interpolation_variance: f64,
}

impl RadonReconstruction {
    /// Isotropic variance added by smoothing and interpolation, removed by
    /// [`VolumeMoments::deconvolved_covariance`].
    pub fn blur_variance(&self) -> f64 {
        self.smoothing_width * self.smoothing_width + self.interpolation_variance
    }
}

/// Filters every marginal and backprojects with the grid's sphere weights.
pub fn reconstruct_projections(
    projections: &[ProjectionDensity],
    grid: &AngleGrid,
    options: &RadonOptions,
) -> Result<RadonReconstruction> {
    if projections.len() != grid.len() {
        return Err(Error::Coverage(format!(
            "{} marginals for {} grid directions",
            projections.len(),
            grid.len()
        )));
    }
    reconstruct_with(grid, |i| Ok(projections[i].clone()), options)
}

/// [`reconstruct_projections`] with marginal `i` produced on demand.
pub fn reconstruct_with(
    grid: &AngleGrid,
    projection: impl Fn(usize) -> Result<ProjectionDensity> + Sync,
    options: &RadonOptions,
) -> Result<RadonReconstruction> {
    if grid.coverage != Coverage::FullSphere {
        return Err(Error::Coverage("backprojection needs full-sphere directions; symmetrize first".into()));
    }
    let weights = grid.weights();
    let total: f64 = weights.iter().sum();
    if (total - 4.0 * PI).abs() > 1e-8 {
        return Err(Error::Coverage(format!("sphere weights sum to {total}, not 4π")));
    }
    let prefactor = match options.prefactor {
        Prefactor::Analytic => ANALYTIC_PREFACTOR,
        Prefactor::Fixed(v) => v,
        Prefactor::Calibrated => calibrate_prefactor(grid, options.smoothing_width, &options.grid)?,
    };
    let bp = backproject_with(&grid.directions(), &weights, &options.grid, prefactor, |i| {
        filter_tomogram(&projection(i)?, options.smoothing_width)
    })?;
    Ok(RadonReconstruction {
        volume: bp.volume,
        out_of_support_fraction: bp.out_of_support_fraction,
        prefactor,
        smoothing_width: options.smoothing_width,
        interpolation_variance: bp.interpolation_variance,
    })
}

/// Radon path on a full-sphere histogram set.
pub fn reconstruct_histograms(set: &TomogramSet, options: &RadonOptions) -> Result<RadonReconstruction> {
    let hist = set.histograms();
    if hist.len() != set.records.len() || hist.is_empty() {
        return Err(Error::Input("the radon path needs histogram tomograms".into()));
    }
    let mut slots: Vec<Option<ProjectionDensity>> = vec![None; set.grid.len()];
    for (i, h) in hist {
        let slot = slots
            .get_mut(i)
            .ok_or_else(|| Error::Coverage(format!("record direction {i} outside the grid")))?;
        if slot.is_some() {
            return Err(Error::Input(format!("two histograms at direction {i}")));
        }
        *slot = Some(ProjectionDensity::from_histogram(h)?);
    }
    let projections = slots
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Coverage(format!("no histogram for direction {i}"))))
        .collect::<Result<Vec<_>>>()?;
    reconstruct_projections(&projections, &set.grid, options)
}

const CALIBRATION_MAX_VOXELS: usize = 61;
const CALIBRATION_STEP: f64 = 0.02;

/// Prefactor that gives an isotropic unit Gaussian unit mass when its exact
/// marginals are filtered with `smoothing_width` and backprojected over the
/// directions of `grid` into the box of `spec`, coarsened to at most 61
/// voxels per axis.
pub fn calibrate_prefactor(grid: &AngleGrid, smoothing_width: f64, spec: &GridSpec) -> Result<f64> {
    let phantom = GaussianPhantom::isotropic(1.0)?;
    let box_spec = GridSpec {
        dims: spec.dims.map(|d| d.min(CALIBRATION_MAX_VOXELS)),
        extent: spec.extent,
    };
    let half_range = spec.extent.iter().map(|e| e * e).sum::<f64>().sqrt() + 1.0;
    let dirs = grid.directions();
    let bp = backproject_with(&dirs, &grid.weights(), &box_spec, ANALYTIC_PREFACTOR, |i| {
        filter_tomogram(&phantom.marginal(&dirs[i], CALIBRATION_STEP, half_range), smoothing_width)
    })?;
    let mass = bp.volume.values.iter().sum::<f64>() * bp.volume.voxel_volume();
    if !(mass > 0.0) {
        return Err(Error::DegenerateVolume("calibration phantom has no mass".into()));
    }
    Ok(ANALYTIC_PREFACTOR / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{gaussian_sideband_tomogram, simulate_sideband_scan};

    fn gaussian_density(step: f64, half: f64, sigma: f64) -> ProjectionDensity {
        let n = (half / step).round() as usize;
        ProjectionDensity {
            dir: Direction::north_pole(),
            start: -(n as f64) * step,
            step,
            density: (0..=2 * n)
                .map(|i| {
                    let x = -(n as f64) * step + i as f64 * step;
                    (-0.5 * x * x / (sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).sqrt()
                })
                .collect(),
        }
    }

    #[test]
    fn second_derivative_of_gaussian() {
        let p = gaussian_density(0.01, 8.0, 1.0);
        let f = filter_tomogram(&p, 0.0).unwrap();
        let err = f
            .abscissa()
            .iter()
            .zip(&f.second_derivative)
            .map(|(x, d)| {
                let g = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                (d - (x * x - 1.0) * g).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn constant_density_and_heavy_smoothing() {
        let p = ProjectionDensity {
            dir: Direction::north_pole(),
            start: 0.0,
            step: 0.1,
            density: vec![0.7; 50],
        };
        let f = filter_tomogram(&p, 0.0).unwrap();
        assert!(f.second_derivative.iter().all(|d| d.abs() < 1e-10));

        let g = gaussian_density(0.05, 5.0, 1.0);
        let f = filter_tomogram(&g, 1e4).unwrap();
        assert!(f.second_derivative.iter().all(|d| d.abs() < 1e-5));

        let short = ProjectionDensity { density: vec![1.0; 4], ..p };
        assert!(matches!(filter_tomogram(&short, 0.1), Err(Error::Domain(_))));
        assert!(filter_tomogram(&g, -1.0).is_err());
    }

    #[test]
    fn smoothing_adds_its_variance() {
        let g = gaussian_density(0.01, 10.0, 1.0);
        let s = gaussian_smooth(&g.density, 0.5 / 0.01);
        let xs = g.abscissa();
        let m0: f64 = s.iter().sum::<f64>() * 0.01;
        let m2: f64 = xs.iter().zip(&s).map(|(x, v)| x * x * v).sum::<f64>() * 0.01;
        assert!((m0 - 1.0).abs() < 1e-10);
        assert!((m2 - 1.25).abs() < 1e-6);
    }

    #[test]
    fn inside_range_matches_brute_force() {
        for (u0, du) in [(-3.3, 0.7), (10.2, -0.9), (2.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (5.0, -1.0), (-50.0, 0.3), (-3.0, 1e-17), (9.0, -1e-17)] {
            let (lo, hi) = inside_range(u0, du, 5.0, 20);
            let want: Vec<usize> = (0..20).filter(|&i| (0.0..=5.0).contains(&(u0 + i as f64 * du))).collect();
            assert_eq!((lo..hi).collect::<Vec<_>>(), want, "u0={u0} du={du}");
        }
    }

    fn phantom_reconstruction(phantom: &GaussianPhantom, grid: &AngleGrid, spec: GridSpec, prefactor: Prefactor) -> RadonReconstruction {
        let half = spec.extent.iter().map(|e| e * e).sum::<f64>().sqrt() + 1.0;
        let projections = phantom.marginals(grid, 0.02, half);
        reconstruct_projections(
            &projections,
            grid,
            &RadonOptions {
                smoothing_width: 0.0,
                grid: spec,
                prefactor,
            },
        )
        .unwrap()
    }

    #[test]
    fn isotropic_phantom_inside_unit_ball() {
        let grid = AngleGrid::gauss_legendre(65, 64).unwrap();
        let phantom = GaussianPhantom::isotropic(1.0).unwrap();
        let rec = phantom_reconstruction(&phantom, &grid, GridSpec::cube(61, 1.5), Prefactor::Analytic);
        let mut worst: f64 = 0.0;
        for (r, v) in rec.volume.voxels() {
            if r.norm() <= 1.0 {
                let want = phantom.density(&r);
                worst = worst.max((v - want).abs() / want);
            }
        }
        assert!(worst < 0.03, "{worst}");
    }

    #[test]
    fn phantom_moments_and_mass() {
        let grid = AngleGrid::gauss_legendre(33, 32).unwrap();
        let cov = Matrix3::from_diagonal(&Vector3::new(0.5, 1.5, 1.0));
        let phantom = GaussianPhantom::new(Vector3::zeros(), cov).unwrap();
        let rec = phantom_reconstruction(&phantom, &grid, GridSpec::cube(61, 7.0), Prefactor::Analytic);
        let m = volume_moments(&rec.volume).unwrap();
        assert!((m.mass - 1.0).abs() < 0.02, "{}", m.mass);
        for a in 0..3 {
            assert!((m.covariance[(a, a)] / cov[(a, a)] - 1.0).abs() < 0.05);
        }
        assert!(m.mean.norm() < 1e-6);
    }

    #[test]
    fn translation_moves_the_peak() {
        let grid = AngleGrid::gauss_legendre(25, 24).unwrap();
        let spec = GridSpec::cube(41, 4.0);
        let base = GaussianPhantom::isotropic(0.6).unwrap();
        let shifted = GaussianPhantom::new(Vector3::new(0.0, 0.0, 0.8), base.covariance).unwrap();
        let a = volume_moments(&phantom_reconstruction(&base, &grid, spec, Prefactor::Analytic).volume).unwrap();
        let b = volume_moments(&phantom_reconstruction(&shifted, &grid, spec, Prefactor::Analytic).volume).unwrap();
        assert!(((b.mean - a.mean) - Vector3::new(0.0, 0.0, 0.8)).norm() < 0.01);
        // peak voxel
        let peak = |v: &VolumeGrid| v.voxels().max_by(|x, y| x.1.total_cmp(&y.1)).unwrap().0;
        let rec = phantom_reconstruction(&shifted, &grid, spec, Prefactor::Analytic);
        assert!((peak(&rec.volume) - Vector3::new(0.0, 0.0, 0.8)).norm() < 1e-9);
    }

    #[test]
    fn backprojection_is_linear_and_deterministic() {
        let grid = AngleGrid::gauss_legendre(9, 8).unwrap();
        let spec = GridSpec::cube(17, 3.0);
        let a = GaussianPhantom::isotropic(1.0).unwrap();
        let b = GaussianPhantom::new(Vector3::new(0.3, 0.0, -0.2), Matrix3::from_diagonal(&Vector3::new(0.4, 2.0, 1.0))).unwrap();
        let (pa, pb) = (a.marginals(&grid, 0.05, 6.0), b.marginals(&grid, 0.05, 6.0));
        let mix: Vec<ProjectionDensity> = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| ProjectionDensity {
                density: x.density.iter().zip(&y.density).map(|(u, v)| 0.25 * u + 0.75 * v).collect(),
                ..x.clone()
            })
            .collect();
        let opts = RadonOptions {
            smoothing_width: 0.1,
            grid: spec,
            prefactor: Prefactor::Analytic,
        };
        let ra = reconstruct_projections(&pa, &grid, &opts).unwrap().volume;
        let rb = reconstruct_projections(&pb, &grid, &opts).unwrap().volume;
        let rm = reconstruct_projections(&mix, &grid, &opts).unwrap().volume;
        for ((x, y), z) in ra.values.iter().zip(&rb.values).zip(&rm.values) {
            assert!((0.25 * x + 0.75 * y - z).abs() < 1e-8);
        }
        let again = reconstruct_projections(&mix, &grid, &opts).unwrap().volume;
        assert_eq!(rm.values, again.values);
    }

    #[test]
    fn out_of_support_is_counted() {
        let grid = AngleGrid::gauss_legendre(5, 4).unwrap();
        let p = GaussianPhantom::isotropic(1.0).unwrap().marginals(&grid, 0.1, 1.0);
        let f: Vec<FilteredTomogram> = p.iter().map(|p| filter_tomogram(p, 0.0).unwrap()).collect();
        let bp = backproject(&f, &grid.weights(), &GridSpec::cube(11, 3.0), ANALYTIC_PREFACTOR).unwrap();
        assert!(bp.out_of_support_fraction > 0.1 && bp.out_of_support_fraction < 1.0);
        let bp = backproject(&f, &grid.weights(), &GridSpec::cube(5, 0.5), ANALYTIC_PREFACTOR).unwrap();
        assert_eq!(bp.out_of_support_fraction, 0.0);
    }

    #[test]
    fn analytic_volume_moments() {
        let cov = Matrix3::new(1.0, 0.3, 0.0, 0.3, 0.8, -0.1, 0.0, -0.1, 0.5);
        let phantom = GaussianPhantom::new(Vector3::new(0.2, -0.1, 0.3), cov).unwrap();
        let v = VolumeGrid::from_fn(&GridSpec::cube(81, 7.0), |r| phantom.density(&r)).unwrap();
        let m = volume_moments(&v).unwrap();
        assert!((m.mass - 1.0).abs() < 0.01);
        assert!((m.mean - phantom.mean).norm() < 0.01);
        assert!((m.covariance - cov).amax() < 0.01);
        assert_eq!(m.negative_fraction, 0.0);

        let sym = VolumeGrid::from_fn(&GridSpec::cube(21, 2.0), |r| (-r.norm_squared()).exp()).unwrap();
        assert!(volume_moments(&sym).unwrap().mean.norm() < 1e-12);
        let neg = VolumeGrid::from_fn(&GridSpec::cube(5, 1.0), |_| -1.0).unwrap();
        assert!(matches!(volume_moments(&neg), Err(Error::DegenerateVolume(_))));
    }

    #[test]
    fn half_width_at_half_maximum() {
        let unit = GaussianPhantom::isotropic(1.0).unwrap();
        let v = VolumeGrid::from_fn(&GridSpec::cube(121, 3.0), |r| unit.density(&r)).unwrap();
        let stats = isocontour_level_stats(&v, 0.5).unwrap();
        let want = (2.0 * 2f64.ln()).sqrt();
        for h in stats.half_widths {
            assert!((h / want - 1.0).abs() < 0.02, "{h}");
        }
        let wide = GaussianPhantom::isotropic(4.0).unwrap();
        let v2 = VolumeGrid::from_fn(&GridSpec::cube(121, 6.0), |r| wide.density(&r)).unwrap();
        let s2 = isocontour_level_stats(&v2, 0.5).unwrap();
        assert!((s2.half_widths[0] / stats.half_widths[0] - 2.0).abs() < 0.02);
        assert!(isocontour_level_stats(&v, 1.0).is_err());
        let zero = VolumeGrid::from_fn(&GridSpec::cube(5, 1.0), |_| 0.0).unwrap();
        assert!(matches!(isocontour_level_stats(&zero, 0.5), Err(Error::EmptyLevelSet(_))));
    }

    #[test]
    fn sphere_patch_of_isotropic_and_squeezed_volumes() {
        let mean: Vector3<f64> = Vector3::new(0.0, 1e6, 0.0);
        let iso = GaussianPhantom::isotropic(1.0).unwrap();
        let v = VolumeGrid::from_fn(&GridSpec::cube(61, 6.0), |r| iso.density(&r)).unwrap();
        let scale = (2.0 * mean.norm()).sqrt().recip();
        let patch = sphere_sum_distribution(&v, &mean, 5.0 * scale, 41).unwrap();
        assert!((patch.integral() - 1.0).abs() < 1e-3);
        let (m, c) = patch.angular_moments();
        assert!(m[0].abs() < 1e-3 * scale && m[1].abs() < 1e-3 * scale);
        assert!((c[0][0] / c[1][1] - 1.0).abs() < 0.01);
        assert!((patch.mean_direction.unit_vector() - Vector3::y()).norm() < 1e-12);

        // squeeze along the patch's first axis, antisqueeze along its second
        let frame = mean_frame(&mean).unwrap();
        let cov = frame[0] * frame[0].transpose() * 0.25 + frame[1] * frame[1].transpose() * 4.0 + frame[2] * frame[2].transpose();
        let sq = GaussianPhantom::new(Vector3::zeros(), cov).unwrap();
        let v = VolumeGrid::from_fn(&GridSpec::cube(81, 8.0), |r| sq.density(&r)).unwrap();
        let patch = sphere_sum_distribution(&v, &mean, 8.0 * scale, 81).unwrap();
        let (_, c) = patch.angular_moments();
        assert!((c[0][0].sqrt() / scale - 0.5).abs() < 0.02);
        assert!((c[1][1].sqrt() / scale / 2.0 - 1.0).abs() < 0.02);
        assert!(sphere_sum_distribution(&v, &Vector3::zeros(), 1.0, 10).is_err());
    }

    #[test]
    fn sphere_sum_of_blocks_integrates_to_one() {
        use crate::states::coherent_two_mode;
        use num_complex::Complex64;
        let state = coherent_two_mode(Complex64::new(1.2, 0.0), Complex64::new(0.0, 0.9), 40).unwrap();
        let grid = AngleGrid::gauss_legendre(45, 90).unwrap();
        let f = sphere_sum_from_state(&state, &grid.directions());
        let integral = f.integrate(&grid.weights());
        assert!((integral - state.total_trace()).abs() < 1e-6);
    }

    #[test]
    fn histogram_densities() {
        let model = GaussianStokesModel::coherent(1e6, &Direction::new(PI / 2.0, PI / 2.0).unwrap()).unwrap();
        let h = gaussian_sideband_tomogram(&model, &Direction::north_pole(), 20_000, 256, 5).unwrap();
        let p = ProjectionDensity::from_histogram(&h).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-12);
        let mut rescaled = h.clone();
        rescaled.calibration = 4.0;
        let q = ProjectionDensity::from_histogram(&rescaled).unwrap();
        assert!((q.step - p.step / 2.0).abs() < 1e-15);
        assert!((q.mass() - 1.0).abs() < 1e-12);
        let mut ragged = h;
        ragged.bin_edges[3] += 1e-3;
        assert!(ProjectionDensity::from_histogram(&ragged).is_err());
    }

    #[test]
    fn quarter_sphere_histograms_need_symmetrizing() {
        let model = GaussianStokesModel::coherent(1e6, &Direction::new(PI / 2.0, PI / 2.0).unwrap()).unwrap();
        let grid = AngleGrid::quarter_scan(4, 4).unwrap();
        let set = simulate_sideband_scan(&model, &grid, 100, 16, 1).unwrap();
        assert!(matches!(reconstruct_histograms(&set, &RadonOptions::default()), Err(Error::Coverage(_))));
    }

    #[test]
    fn calibrated_prefactor_restores_unit_mass() {
        let grid = AngleGrid::gauss_legendre(17, 16).unwrap();
        let spec = GridSpec::cube(41, 6.0);
        let phantom = GaussianPhantom::isotropic(1.0).unwrap();
        let rec = phantom_reconstruction(&phantom, &grid, spec, Prefactor::Calibrated);
        let mass = rec.volume.values.iter().sum::<f64>() * rec.volume.voxel_volume();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!((rec.prefactor / ANALYTIC_PREFACTOR - 1.0).abs() < 0.05);

        let fine = AngleGrid::gauss_legendre(33, 32).unwrap();
        let c = calibrate_prefactor(&fine, 0.0, &spec).unwrap();
        assert!((c / ANALYTIC_PREFACTOR - 1.0).abs() < 0.01, "{c}");
    }
}
