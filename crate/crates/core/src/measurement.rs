//! The simulated Stokes analyzer: POVMs, exact tomograms, finite-statistics
//! sampling, sideband-noise histograms, angle scans and symmetry completion.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, midpoint_circle, uniform_circle};
use crate::states::{DensityBlock, GaussianStokesModel, PolarizationState};
use crate::su2::{wrap_angle, CMatrix, Direction, SpinIndex, SpinOperators};

/// Name recorded in output metadata for the sampling generator.
pub const GENERATOR_NAME: &str = "chacha8-stream";

/// Bin count of the sideband histograms.
pub const DEFAULT_BINS: usize = 2048;

/// Half-width of the histogram range in units of the sample standard deviation.
pub const HISTOGRAM_HALF_RANGE_SIGMAS: f64 = 6.0;

const ANGLE_TOL: f64 = 1e-9;

/// Independent generator for one task of a scan; the same `(seed, stream)`
/// always yields the same sequence regardless of scheduling.
pub fn substream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    FullSphere,
    /// `θ ∈ [0, π]`, `φ ∈ [0, π/2]`; the rest follows by symmetry.
    QuarterSphere,
}

impl Coverage {
    pub fn as_str(self) -> &'static str {
        match self {
            Coverage::FullSphere => "full_sphere",
            Coverage::QuarterSphere => "quarter_sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_sphere" => Some(Coverage::FullSphere),
            "quarter_sphere" => Some(Coverage::QuarterSphere),
            _ => None,
        }
    }
}

/// Product grid of measurement directions with its sphere quadrature weights.
///
/// Angles are sphere angles of `n`, not wave-plate angles; a half-wave plate
/// turned by `α` moves `n` by `4α` on the sphere.
/// `theta_weights` integrate in `cos θ` (`Σ = 2`), `phi_weights` in `φ`;
/// for a quarter-sphere grid they are the weights the directions carry once
/// the grid has been completed by symmetry, so `Σ = 2π` only after completion.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleGrid {
    pub theta_values: Vec<f64>,
    pub theta_weights: Vec<f64>,
    pub phi_values: Vec<f64>,
    pub phi_weights: Vec<f64>,
    pub coverage: Coverage,
}

impl AngleGrid {
    /// Gauss-Legendre in `cos θ` times uniform `φ = 2πk/n_phi`.
    pub fn gauss_legendre(n_theta: usize, n_phi: usize) -> Result<Self> {
        check_counts(n_theta, n_phi)?;
        let (x, wx) = gauss_legendre(n_theta);
        let (phi, wphi) = uniform_circle(n_phi);
        Ok(Self {
            theta_values: x.iter().map(|x| x.acos()).collect(),
            theta_weights: wx,
            phi_values: phi,
            phi_weights: wphi,
            coverage: Coverage::FullSphere,
        })
    }

    /// Gauss-Legendre in `cos θ` times midpoint `φ` over the full circle.
    pub fn gauss_legendre_midpoint(n_theta: usize, n_phi: usize) -> Result<Self> {
        check_counts(n_theta, n_phi)?;
        let (x, wx) = gauss_legendre(n_theta);
        let (phi, wphi) = midpoint_circle(n_phi);
        Ok(Self {
            theta_values: x.iter().map(|x| x.acos()).collect(),
            theta_weights: wx,
            phi_values: phi,
            phi_weights: wphi,
            coverage: Coverage::FullSphere,
        })
    }

    /// Quarter-sphere scan: `n_theta` Gauss-Legendre polar angles and
    /// `n_phi` midpoint azimuths in `[0, π/2]`. Completion by symmetry gives
    /// a uniform `4·n_phi` azimuth grid.
    pub fn quarter_scan(n_theta: usize, n_phi: usize) -> Result<Self> {
        check_counts(n_theta, n_phi)?;
        let (x, wx) = gauss_legendre(n_theta);
        let h = FRAC_PI_2 / n_phi as f64;
        Ok(Self {
            theta_values: x.iter().map(|x| x.acos()).collect(),
            theta_weights: wx,
            phi_values: (0..n_phi).map(|k| (k as f64 + 0.5) * h).collect(),
            phi_weights: vec![h; n_phi],
            coverage: Coverage::QuarterSphere,
        })
    }

    /// Grid from explicit angle lists; weights from cells bounded by
    /// midpoints between neighbouring nodes.
    pub fn from_values(theta_values: Vec<f64>, phi_values: Vec<f64>, coverage: Coverage) -> Result<Self> {
        check_counts(theta_values.len(), phi_values.len())?;
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&theta_values) || !sorted(&phi_values) {
            return Err(Error::Input("grid angles must be strictly increasing".into()));
        }
        if theta_values[0] < 0.0 || *theta_values.last().unwrap() > PI {
            return Err(Error::Input("theta values must lie in [0, π]".into()));
        }
        let phi_max = match coverage {
            Coverage::FullSphere => TAU,
            Coverage::QuarterSphere => FRAC_PI_2 + ANGLE_TOL,
        };
        if phi_values[0] < 0.0 || *phi_values.last().unwrap() >= phi_max {
            return Err(Error::Input(format!(
                "phi values outside the {} domain",
                coverage.as_str()
            )));
        }
        let theta_weights = theta_cell_weights(&theta_values);
        let phi_weights = match coverage {
            Coverage::FullSphere => periodic_cell_weights(&phi_values),
            Coverage::QuarterSphere => {
                let full = completed_phi_values(&phi_values);
                let w = periodic_cell_weights(&full);
                phi_values
                    .iter()
                    .map(|p| w[position(&full, *p).expect("quarter value is in its completion")])
                    .collect()
            }
        };
        Ok(Self {
            theta_values,
            theta_weights,
            phi_values,
            phi_weights,
            coverage,
        })
    }

    pub fn len(&self) -> usize {
        self.theta_values.len() * self.phi_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_phi(&self) -> usize {
        self.phi_values.len()
    }

    /// Direction at flat index `i_theta · n_phi + i_phi`.
    pub fn direction(&self, index: usize) -> Direction {
        let (it, ip) = (index / self.n_phi(), index % self.n_phi());
        Direction::new(self.theta_values[it], self.phi_values[ip]).expect("grid angles are valid")
    }

    pub fn directions(&self) -> Vec<Direction> {
        (0..self.len()).map(|i| self.direction(i)).collect()
    }

    /// Solid-angle weight `w_θ·w_φ` of the direction at `index`.
    pub fn weight(&self, index: usize) -> f64 {
        self.theta_weights[index / self.n_phi()] * self.phi_weights[index % self.n_phi()]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.theta_weights.iter().sum::<f64>() * self.phi_weights.iter().sum::<f64>()
    }
}

fn check_counts(n_theta: usize, n_phi: usize) -> Result<()> {
    if n_theta < 2 || n_phi < 2 {
        return Err(Error::Input(format!(
            "angle grid needs at least 2 points per axis, got {n_theta}x{n_phi}"
        )));
    }
    Ok(())
}

fn theta_cell_weights(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { 0.5 * (theta[i - 1] + theta[i]) };
            let hi = if i + 1 == n { PI } else { 0.5 * (theta[i] + theta[i + 1]) };
            lo.cos() - hi.cos()
        })
        .collect()
}

fn periodic_cell_weights(phi: &[f64]) -> Vec<f64> {
    let n = phi.len();
    (0..n)
        .map(|i| {
            let prev = if i == 0 { phi[n - 1] - TAU } else { phi[i - 1] };
            let next = if i + 1 == n { phi[0] + TAU } else { phi[i + 1] };
            0.5 * (next - prev)
        })
        .collect()
}

fn position(values: &[f64], v: f64) -> Option<usize> {
    values.iter().position(|x| angle_eq(*x, v))
}

fn angle_eq(a: f64, b: f64) -> bool {
    let d = (a - b).rem_euclid(TAU);
    d < ANGLE_TOL || TAU - d < ANGLE_TOL
}

/// Azimuths generated from a quarter set by `φ → π − φ`, `φ + π`, `2π − φ`.
fn completed_phi_values(quarter: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = Vec::with_capacity(4 * quarter.len());
    for &p in quarter {
        for q in [p, PI - p, PI + p, TAU - p] {
            let q = wrap_angle(q);
            if !all.iter().any(|x| angle_eq(*x, q)) {
                all.push(q);
            }
        }
    }
    all.sort_by(f64::total_cmp);
    all
}

/// Per-direction distribution over the photon-number difference `m`.
///
/// `values` holds `(2m, w_m)` pairs in descending `m`. `spin` is `None` for
/// total tomograms summed over all invariant subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTomogram {
    pub spin: Option<SpinIndex>,
    pub dir: Direction,
    pub values: Vec<(i32, f64)>,
}

impl DiscreteTomogram {
    pub fn zero(spin: SpinIndex, dir: Direction) -> Self {
        Self {
            spin: Some(spin),
            dir,
            values: spin.two_m_values().map(|m| (m, 0.0)).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|(_, w)| w).sum()
    }

    pub fn get(&self, two_m: i32) -> f64 {
        self.values
            .iter()
            .find(|(m, _)| *m == two_m)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    /// `Σ_m m^k w_m`.
    pub fn moment(&self, k: i32) -> f64 {
        self.values
            .iter()
            .map(|&(m, w)| (f64::from(m) / 2.0).powi(k) * w)
            .sum()
    }

    /// Probabilities in basis order; only meaningful for per-subspace tomograms.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let spin = self
            .spin
            .ok_or_else(|| Error::Input("total tomogram has no subspace label".into()))?;
        let mut out = vec![0.0; spin.dim()];
        for &(m, w) in &self.values {
            out[spin.index_of(m)?] = w;
        }
        Ok(out)
    }

    /// `w_m(−n) = w_{−m}(n)`.
    pub fn antipodal(&self) -> Self {
        let mut values: Vec<(i32, f64)> = self.values.iter().map(|&(m, w)| (-m, w)).collect();
        values.sort_by(|a, b| b.0.cmp(&a.0));
        Self {
            spin: self.spin,
            dir: self.dir.antipode(),
            values,
        }
    }

    fn with_dir(&self, dir: Direction) -> Self {
        Self {
            dir,
            ..self.clone()
        }
    }
}

/// Binned measurement of one analysis direction.
///
/// For sideband data the abscissa is the Stokes fluctuation about the
/// classical mean in shot-noise units; `classical_projection` keeps `n·μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramTomogram {
    pub dir: Direction,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total_samples: u64,
    /// Samples that fell outside the edges and were folded into the end bins.
    pub clipped: u64,
    /// Variance of the shot-noise reference in the abscissa units.
    pub calibration: f64,
    pub classical_projection: f64,
}

impl HistogramTomogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_edges.len() != self.counts.len() + 1 {
            return Err(Error::Input("histogram needs bins + 1 edges".into()));
        }
        if !self.bin_edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Input("histogram edges must be strictly increasing".into()));
        }
        if self.counts.iter().sum::<u64>() != self.total_samples {
            return Err(Error::Input("histogram counts do not sum to total_samples".into()));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Sample mean and variance from bin centers.
    pub fn mean_variance(&self) -> (f64, f64) {
        let n = self.total_samples as f64;
        let centers = self.centers();
        let mean = centers.iter().zip(&self.counts).map(|(x, c)| x * *c as f64).sum::<f64>() / n;
        let var = centers
            .iter()
            .zip(&self.counts)
            .map(|(x, c)| (x - mean).powi(2) * *c as f64)
            .sum::<f64>()
            / n;
        (mean, var)
    }

    /// `x → −x`: the histogram of the antipodal direction.
    pub fn antipodal(&self) -> Self {
        Self {
            dir: self.dir.antipode(),
            bin_edges: self.bin_edges.iter().rev().map(|e| -e).collect(),
            counts: self.counts.iter().rev().copied().collect(),
            total_samples: self.total_samples,
            clipped: self.clipped,
            calibration: self.calibration,
            classical_projection: -self.classical_projection,
        }
    }

    /// Relative frequencies scaled by `weight`, for histograms binned on the
    /// integer-spaced `m` values of one subspace.
    pub fn to_discrete(&self, spin: SpinIndex, weight: f64) -> Result<DiscreteTomogram> {
        if self.bins() != spin.dim() {
            return Err(Error::Input(format!(
                "histogram with {} bins cannot represent 2J={}",
                self.bins(),
                spin.two_j()
            )));
        }
        let n = self.total_samples.max(1) as f64;
        // bins run in ascending m
        let values = spin
            .two_m_values()
            .enumerate()
            .map(|(k, m)| (m, weight * self.counts[spin.dim() - 1 - k] as f64 / n))
            .collect();
        Ok(DiscreteTomogram {
            spin: Some(spin),
            dir: self.dir,
            values,
        })
    }

    fn with_dir(&self, dir: Direction) -> Self {
        Self {
            dir,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tomogram {
    Discrete(DiscreteTomogram),
    Histogram(HistogramTomogram),
}

impl Tomogram {
    pub fn dir(&self) -> Direction {
        match self {
            Tomogram::Discrete(t) => t.dir,
            Tomogram::Histogram(h) => h.dir,
        }
    }

    fn antipodal(&self) -> Self {
        match self {
            Tomogram::Discrete(t) => Tomogram::Discrete(t.antipodal()),
            Tomogram::Histogram(h) => Tomogram::Histogram(h.antipodal()),
        }
    }

    fn with_dir(&self, dir: Direction) -> Self {
        match self {
            Tomogram::Discrete(t) => Tomogram::Discrete(t.with_dir(dir)),
            Tomogram::Histogram(h) => Tomogram::Histogram(h.with_dir(dir)),
        }
    }
}

/// Units of the tomogram abscissa.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationUnits {
    /// Photon-number difference `m` (discrete tomograms).
    PhotonNumber,
    /// Stokes fluctuations normalized to the coherent-beam noise.
    ShotNoise,
}

impl CalibrationUnits {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationUnits::PhotonNumber => "photon_number",
            CalibrationUnits::ShotNoise => "shot_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "photon_number" => Some(CalibrationUnits::PhotonNumber),
            "shot_noise" => Some(CalibrationUnits::ShotNoise),
            _ => None,
        }
    }
}

/// Symmetry of the measured state used to fill the unmeasured `φ` quadrants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReflectionRule {
    /// Invariant under `J₁ → −J₁` (`φ → π − φ`).
    MirrorJ1,
    /// Invariant under `J₂ → −J₂` (`φ → −φ`).
    MirrorJ2,
}

impl ReflectionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ReflectionRule::MirrorJ1 => "mirror_j1",
            ReflectionRule::MirrorJ2 => "mirror_j2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mirror_j1" => Some(ReflectionRule::MirrorJ1),
            "mirror_j2" => Some(ReflectionRule::MirrorJ2),
            _ => None,
        }
    }

    pub fn reflect(self, dir: &Direction) -> Direction {
        let phi = match self {
            ReflectionRule::MirrorJ1 => PI - dir.phi(),
            ReflectionRule::MirrorJ2 => -dir.phi(),
        };
        Direction::new(dir.theta(), phi).expect("reflection keeps theta")
    }
}

/// Provenance carried alongside a tomogram set into its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanMetadata {
    pub state: String,
    pub seed: Option<u64>,
    pub generator: String,
    pub units: CalibrationUnits,
    pub classical_mean: Option<Vector3<f64>>,
    pub reflection: ReflectionRule,
    pub config_hash: String,
    pub extra: BTreeMap<String, String>,
}

impl ScanMetadata {
    pub fn new(state: impl Into<String>, units: CalibrationUnits) -> Self {
        Self {
            state: state.into(),
            seed: None,
            generator: GENERATOR_NAME.to_string(),
            units,
            classical_mean: None,
            reflection: ReflectionRule::MirrorJ2,
            config_hash: String::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TomogramRecord {
    pub direction: usize,
    pub tomogram: Tomogram,
}

/// All tomograms of one scan, ordered by direction index (then subspace).
#[derive(Clone, Debug, PartialEq)]
pub struct TomogramSet {
    pub grid: AngleGrid,
    pub records: Vec<TomogramRecord>,
    pub meta: ScanMetadata,
}

impl TomogramSet {
    /// Per-subspace discrete tomograms for `spin`, one per grid direction.
    pub fn discrete_for(&self, spin: SpinIndex) -> Vec<(usize, &DiscreteTomogram)> {
        self.records
            .iter()
            .filter_map(|r| match &r.tomogram {
                Tomogram::Discrete(t) if t.spin == Some(spin) => Some((r.direction, t)),
                _ => None,
            })
            .collect()
    }

    pub fn spins(&self) -> Vec<SpinIndex> {
        let mut spins: Vec<SpinIndex> = self
            .records
            .iter()
            .filter_map(|r| match &r.tomogram {
                Tomogram::Discrete(t) => t.spin,
                _ => None,
            })
            .collect();
        spins.sort();
        spins.dedup();
        spins
    }

    pub fn histograms(&self) -> Vec<(usize, &HistogramTomogram)> {
        self.records
            .iter()
            .filter_map(|r| match &r.tomogram {
                Tomogram::Histogram(h) => Some((r.direction, h)),
                _ => None,
            })
            .collect()
    }

    pub fn is_histogram_set(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| matches!(r.tomogram, Tomogram::Histogram(_)))
    }

    pub fn is_discrete_set(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| matches!(r.tomogram, Tomogram::Discrete(_)))
    }
}

/// Rank-one projector `Π^J_m(n) = U(n)|J,m⟩⟨J,m|U(n)†`.
pub fn povm_element(ops: &SpinOperators, two_m: i32, dir: &Direction) -> Result<CMatrix> {
    let v = ops.rotated_basis_state(two_m, dir)?;
    Ok(&v * v.adjoint())
}

/// `w^J_m(n) = Tr(ρ_J Π^J_m(n))` for one block.
pub fn block_tomogram(ops: &SpinOperators, block: &DensityBlock, dir: &Direction) -> DiscreteTomogram {
    let u = ops.rotation(dir);
    let probs = diagonal_in_rotated_basis(&block.matrix, &u);
    DiscreteTomogram {
        spin: Some(block.spin),
        dir: *dir,
        values: block.spin.two_m_values().zip(probs).collect(),
    }
}

/// `⟨k|U†ρU|k⟩` for every column `k` of `u`.
pub(crate) fn diagonal_in_rotated_basis(rho: &CMatrix, u: &CMatrix) -> Vec<f64> {
    let ru = rho * u;
    (0..u.ncols())
        .map(|k| {
            let w: Complex64 = u.column(k).iter().zip(ru.column(k).iter()).map(|(a, b)| a.conj() * b).sum();
            // rounding can push zero probabilities a few ulps below zero
            w.re.max(0.0)
        })
        .collect()
}

/// Per-subspace tomogram; the zero tomogram when the state has no such block.
pub fn exact_tomogram(state: &PolarizationState, dir: &Direction, spin: SpinIndex) -> DiscreteTomogram {
    match state.block(spin) {
        Some(block) => block_tomogram(&SpinOperators::new(spin), block, dir),
        None => DiscreteTomogram::zero(spin, *dir),
    }
}

/// `w_m(n) = Σ_{J ≥ |m|} w^J_m(n)`, over every `2m` present in the state.
pub fn total_tomogram(state: &PolarizationState, dir: &Direction) -> DiscreteTomogram {
    let mut acc: BTreeMap<i32, f64> = BTreeMap::new();
    for block in state.blocks() {
        let t = block_tomogram(&SpinOperators::new(block.spin), block, dir);
        for (m, w) in t.values {
            *acc.entry(m).or_insert(0.0) += w;
        }
    }
    DiscreteTomogram {
        spin: None,
        dir: *dir,
        values: acc.into_iter().rev().collect(),
    }
}

/// Multinomial draw of `n_samples` outcomes from `tomogram`.
///
/// Bins are centred on the `m` values in ascending order. The probabilities
/// are normalized by the tomogram's total before sampling.
pub fn sample_counts(tomogram: &DiscreteTomogram, n_samples: u64, seed: u64) -> Result<HistogramTomogram> {
    sample_counts_with(tomogram, n_samples, &mut substream_rng(seed, 0))
}

pub fn sample_counts_with<R: Rng + ?Sized>(tomogram: &DiscreteTomogram, n_samples: u64, rng: &mut R) -> Result<HistogramTomogram> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be positive".into()));
    }
    let total = tomogram.total();
    if !(total > 0.0) {
        return Err(Error::Domain("cannot sample an all-zero tomogram".into()));
    }
    let mut ascending: Vec<(i32, f64)> = tomogram.values.clone();
    ascending.sort_by_key(|(m, _)| *m);
    let counts = multinomial(rng, n_samples, ascending.iter().map(|(_, w)| w / total))?;

    let ms: Vec<f64> = ascending.iter().map(|(m, _)| f64::from(*m) / 2.0).collect();
    let step = ms.windows(2).map(|w| w[1] - w[0]).fold(1.0, f64::min);
    let mut bin_edges: Vec<f64> = ms.iter().map(|m| m - step / 2.0).collect();
    bin_edges.push(ms.last().unwrap() + step / 2.0);

    Ok(HistogramTomogram {
        dir: tomogram.dir,
        bin_edges,
        counts,
        total_samples: n_samples,
        clipped: 0,
        calibration: 0.0,
        classical_projection: 0.0,
    })
}

/// Conditional-binomial multinomial sampler.
fn multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: impl Iterator<Item = f64>) -> Result<Vec<u64>> {
    let probs: Vec<f64> = probs.collect();
    let mut remaining_n = n;
    let mut remaining_p = 1.0;
    let mut counts = Vec::with_capacity(probs.len());
    for (i, p) in probs.iter().enumerate() {
        if remaining_n == 0 {
            counts.push(0);
            continue;
        }
        if i + 1 == probs.len() {
            counts.push(remaining_n);
            remaining_n = 0;
            continue;
        }
        let q = (p / remaining_p).clamp(0.0, 1.0);
        let c = Binomial::new(remaining_n, q)
            .map_err(|e| Error::NumericalModel(format!("binomial draw: {e}")))?
            .sample(rng);
        counts.push(c);
        remaining_n -= c;
        remaining_p -= p;
        if remaining_p <= 0.0 {
            remaining_p = f64::MIN_POSITIVE;
        }
    }
    Ok(counts)
}

/// Sideband noise histogram of a Gaussian Stokes model along `dir`.
///
/// Samples `x ~ N(n·d, nᵀΣn)` (fluctuations about the classical mean, with
/// `d` the model's displacement) and bins them into `bins` equal-width bins
/// over `±6` sample standard deviations around the sample mean.
pub fn gaussian_sideband_tomogram(
    model: &GaussianStokesModel,
    dir: &Direction,
    n_samples: u64,
    bins: usize,
    seed: u64,
) -> Result<HistogramTomogram> {
    gaussian_sideband_with(model, dir, n_samples, bins, &mut substream_rng(seed, 0))
}

pub fn gaussian_sideband_with<R: Rng + ?Sized>(
    model: &GaussianStokesModel,
    dir: &Direction,
    n_samples: u64,
    bins: usize,
    rng: &mut R,
) -> Result<HistogramTomogram> {
    if bins < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {bins}")));
    }
    if n_samples < 2 {
        return Err(Error::Domain("need at least 2 samples".into()));
    }
    let n = dir.unit_vector();
    let variance = model.marginal_variance(&n);
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::NumericalModel(format!(
            "degenerate marginal variance {variance:e} along (θ={}, φ={})",
            dir.theta(),
            dir.phi()
        )));
    }
    let sigma = variance.sqrt();
    let center = model.displacement.dot(&n);
    let samples: Vec<f64> = (0..n_samples)
        .map(|_| center + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let count = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let sample_sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt();
    let half = HISTOGRAM_HALF_RANGE_SIGMAS * sample_sd;
    let (lo, hi) = (mean - half, mean + half);
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    let mut clipped = 0;
    for x in samples {
        let idx = ((x - lo) / width).floor();
        let i = if idx < 0.0 {
            clipped += 1;
            0
        } else if idx >= bins as f64 {
            if x > hi {
                clipped += 1;
            }
            bins - 1
        } else {
            idx as usize
        };
        counts[i] += 1;
    }
    Ok(HistogramTomogram {
        dir: *dir,
        bin_edges,
        counts,
        total_samples: n_samples,
        clipped,
        calibration: 1.0,
        classical_projection: model.classical_projection(&n),
    })
}

/// Noise-free per-subspace tomograms of every block at every grid direction.
pub fn simulate_exact_scan(state: &PolarizationState, grid: &AngleGrid) -> TomogramSet {
    let ops: Vec<SpinOperators> = state.spins().map(SpinOperators::new).collect();
    let dirs = grid.directions();
    let records = dirs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, dir)| {
            state
                .blocks()
                .iter()
                .zip(&ops)
                .map(move |(b, o)| TomogramRecord {
                    direction: i,
                    tomogram: Tomogram::Discrete(block_tomogram(o, b, dir)),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    TomogramSet {
        grid: grid.clone(),
        records,
        meta: ScanMetadata::new("explicit", CalibrationUnits::PhotonNumber),
    }
}

/// Per-subspace tomograms estimated from `n_samples` photon-number
/// detections per direction, distributed over blocks by their weights.
pub fn simulate_sampled_scan(state: &PolarizationState, grid: &AngleGrid, n_samples: u64, seed: u64) -> Result<TomogramSet> {
    let ops: Vec<SpinOperators> = state.spins().map(SpinOperators::new).collect();
    let weights: Vec<f64> = state.blocks().iter().map(|b| b.weight).collect();
    let dirs = grid.directions();
    let per_dir: Result<Vec<Vec<TomogramRecord>>> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let mut rng = substream_rng(seed, i as u64);
            let per_block = multinomial(&mut rng, n_samples, weights.iter().copied())?;
            state
                .blocks()
                .iter()
                .zip(&ops)
                .zip(per_block)
                .map(|((b, o), n_block)| {
                    let exact = block_tomogram(o, b, dir);
                    let t = if n_block == 0 {
                        DiscreteTomogram::zero(b.spin, *dir)
                    } else {
                        let h = sample_counts_with(&exact, n_block, &mut rng)?;
                        h.to_discrete(b.spin, n_block as f64 / n_samples as f64)?
                    };
                    Ok(TomogramRecord {
                        direction: i,
                        tomogram: Tomogram::Discrete(t),
                    })
                })
                .collect()
        })
        .collect();
    let mut meta = ScanMetadata::new("explicit", CalibrationUnits::PhotonNumber);
    meta.seed = Some(seed);
    Ok(TomogramSet {
        grid: grid.clone(),
        records: per_dir?.into_iter().flatten().collect(),
        meta,
    })
}

/// Sideband histograms at every grid direction; direction `i` draws from
/// substream `i` of `seed`.
pub fn simulate_sideband_scan(
    model: &GaussianStokesModel,
    grid: &AngleGrid,
    n_samples: u64,
    bins: usize,
    seed: u64,
) -> Result<TomogramSet> {
    let dirs = grid.directions();
    let records: Result<Vec<TomogramRecord>> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let h = gaussian_sideband_with(model, dir, n_samples, bins, &mut substream_rng(seed, i as u64))?;
            Ok(TomogramRecord {
                direction: i,
                tomogram: Tomogram::Histogram(h),
            })
        })
        .collect();
    let mut meta = ScanMetadata::new("gaussian", CalibrationUnits::ShotNoise);
    meta.seed = Some(seed);
    meta.classical_mean = Some(model.mean);
    Ok(TomogramSet {
        grid: grid.clone(),
        records: records?,
        meta,
    })
}

/// Completes a quarter-sphere scan to the full sphere.
///
/// Antipodal directions use `w_m(−n) = w_{−m}(n)`; the remaining quadrants
/// use the state symmetry recorded in `set.meta.reflection`. Full-sphere
/// input is returned unchanged.
pub fn symmetrize_tomograms(set: &TomogramSet) -> Result<TomogramSet> {
    if set.grid.coverage == Coverage::FullSphere {
        return Ok(set.clone());
    }
    let thetas = &set.grid.theta_values;
    for &t in thetas {
        if !thetas.iter().any(|u| (u - (PI - t)).abs() < ANGLE_TOL) {
            return Err(Error::Coverage(format!(
                "theta grid is not symmetric under θ → π − θ (missing {:.6})",
                PI - t
            )));
        }
    }
    let full_phi = completed_phi_values(&set.grid.phi_values);
    let full_phi_weights = periodic_cell_weights(&full_phi);
    let full_grid = AngleGrid {
        theta_values: thetas.clone(),
        theta_weights: set.grid.theta_weights.clone(),
        phi_values: full_phi.clone(),
        phi_weights: full_phi_weights,
        coverage: Coverage::FullSphere,
    };

    let mut by_direction: Vec<Vec<&Tomogram>> = vec![Vec::new(); set.grid.len()];
    for r in &set.records {
        by_direction
            .get_mut(r.direction)
            .ok_or_else(|| Error::Coverage(format!("record direction {} outside the grid", r.direction)))?
            .push(&r.tomogram);
    }
    if let Some(i) = by_direction.iter().position(|v| v.is_empty()) {
        return Err(Error::Coverage(format!("no data for quarter-sphere direction {i}")));
    }

    let lookup = |dir: &Direction| -> Option<usize> {
        let it = thetas.iter().position(|t| (t - dir.theta()).abs() < ANGLE_TOL)?;
        let ip = position(&set.grid.phi_values, dir.phi())?;
        Some(it * set.grid.n_phi() + ip)
    };

    let rule = set.meta.reflection;
    let mut records = Vec::with_capacity(set.records.len() * 4);
    for index in 0..full_grid.len() {
        let dir = full_grid.direction(index);
        let mirrored = rule.reflect(&dir);
        let (source, flip) = if let Some(i) = lookup(&dir) {
            (i, false)
        } else if let Some(i) = lookup(&mirrored) {
            (i, false)
        } else if let Some(i) = lookup(&dir.antipode()) {
            (i, true)
        } else if let Some(i) = lookup(&mirrored.antipode()) {
            (i, true)
        } else {
            return Err(Error::Coverage(format!(
                "direction (θ={:.6}, φ={:.6}) is not reachable from the measured quadrant",
                dir.theta(),
                dir.phi()
            )));
        };
        for t in &by_direction[source] {
            let t = if flip { t.antipodal() } else { (*t).clone() };
            records.push(TomogramRecord {
                direction: index,
                tomogram: t.with_dir(dir),
            });
        }
    }
    Ok(TomogramSet {
        grid: full_grid,
        records,
        meta: set.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::{
        coherent_two_mode, kerr_squeezed_gaussian, maximally_mixed_block, random_density_block, su2_coherent_block,
        KerrSqueezeParams,
    };
    use crate::su2::{build_angular_momentum, max_abs};

    fn random_direction(rng: &mut impl Rng) -> Direction {
        let z: f64 = rng.random_range(-1.0..1.0);
        Direction::new(z.acos(), rng.random_range(0.0..TAU)).unwrap()
    }

    #[test]
    fn povm_at_pole_and_completeness() {
        let spin = SpinIndex::new(6);
        let ops = SpinOperators::new(spin);
        let p = povm_element(&ops, 2, &Direction::north_pole()).unwrap();
        let k = spin.index_of(2).unwrap();
        assert!((p[(k, k)].re - 1.0).abs() < 1e-15);
        assert!((p.iter().map(|z| z.norm()).sum::<f64>() - 1.0).abs() < 1e-14);

        let mut rng = substream_rng(1, 0);
        let dir = random_direction(&mut rng);
        let mut sum = CMatrix::zeros(spin.dim(), spin.dim());
        for m in spin.two_m_values() {
            let p = povm_element(&ops, m, &dir).unwrap();
            assert!(max_abs(&(&p * &p - &p)) < 1e-12);
            sum += p;
        }
        assert!(max_abs(&(sum - CMatrix::identity(spin.dim(), spin.dim()))) < 1e-12);
        assert!(povm_element(&ops, 7, &dir).is_err());
    }

    #[test]
    fn spin_half_povm_on_equator() {
        let ops = SpinOperators::new(SpinIndex::new(1));
        let p = povm_element(&ops, 1, &Direction::new(PI / 2.0, 0.0).unwrap()).unwrap();
        assert!((p[(0, 0)].re - 0.5).abs() < 1e-14);
        assert!((p[(1, 1)].re - 0.5).abs() < 1e-14);
    }

    #[test]
    fn eigenstate_and_isotropic_tomograms() {
        let spin = SpinIndex::new(5);
        let dir0 = Direction::new(0.9, 2.1).unwrap();
        let state = PolarizationState::single(su2_coherent_block(spin, &dir0)).unwrap();
        let t = exact_tomogram(&state, &dir0, spin);
        assert!((t.values[0].1 - 1.0).abs() < 1e-12);
        assert!(t.values[1..].iter().all(|(_, w)| w.abs() < 1e-12));

        let mixed = PolarizationState::single(maximally_mixed_block(spin, 1.0)).unwrap();
        let mut rng = substream_rng(2, 0);
        for _ in 0..5 {
            let t = exact_tomogram(&mixed, &random_direction(&mut rng), spin);
            assert!(t.values.iter().all(|(_, w)| (w - 1.0 / 6.0).abs() < 1e-12));
        }
        let missing = exact_tomogram(&mixed, &dir0, SpinIndex::new(2));
        assert_eq!(missing.total(), 0.0);
    }

    #[test]
    fn tomogram_matches_brute_force_rotation() {
        let spin = SpinIndex::new(2);
        let mut rng = substream_rng(3, 0);
        let block = random_density_block(spin, 1.0, &mut rng);
        let ops = SpinOperators::new(spin);
        for _ in 0..10 {
            let dir = random_direction(&mut rng);
            // rotate ρ by the wave plates and read the diagonal
            let w = ops.waveplate(&dir);
            let rotated = &w * &block.matrix * w.adjoint();
            let t = block_tomogram(&ops, &block, &dir);
            for (k, (_, p)) in t.values.iter().enumerate() {
                assert!((rotated[(k, k)].re - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tomogram_moments_match_operator_expectations() {
        let mut rng = substream_rng(4, 0);
        for two_j in [1, 4, 7] {
            let spin = SpinIndex::new(two_j);
            let block = random_density_block(spin, 1.0, &mut rng);
            let ops = SpinOperators::new(spin);
            let dir = random_direction(&mut rng);
            let t = block_tomogram(&ops, &block, &dir);
            let nj = ops.along(&dir);
            assert!((t.moment(1) - block.expectation(&nj).re).abs() < 1e-10);
            assert!((t.moment(2) - block.expectation(&(&nj * &nj)).re).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_covariance() {
        let mut rng = substream_rng(5, 0);
        let spin = SpinIndex::new(4);
        let ops = SpinOperators::new(spin);
        let block = random_density_block(spin, 1.0, &mut rng);
        let g = random_direction(&mut rng);
        let u = ops.rotation(&g);
        let rotated = DensityBlock::new(spin, &u * &block.matrix * u.adjoint()).unwrap();
        for _ in 0..5 {
            let dir = random_direction(&mut rng);
            // U(g) maps n·J to (R_g n)·J; the rotated state at R_g n matches ρ at n
            let rg = rotation_3d(&g);
            let moved = Direction::from_vector(rg * dir.unit_vector()).unwrap();
            let a = block_tomogram(&ops, &rotated, &moved);
            let b = block_tomogram(&ops, &block, &dir);
            for ((_, x), (_, y)) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    fn rotation_3d(dir: &Direction) -> nalgebra::Matrix3<f64> {
        let (st, ct) = dir.theta().sin_cos();
        let (sp, cp) = dir.phi().sin_cos();
        let rz = nalgebra::Matrix3::new(cp, -sp, 0.0, sp, cp, 0.0, 0.0, 0.0, 1.0);
        let ry = nalgebra::Matrix3::new(ct, 0.0, st, 0.0, 1.0, 0.0, -st, 0.0, ct);
        rz * ry
    }

    #[test]
    fn total_tomogram_is_sum_of_blocks() {
        let mut rng = substream_rng(6, 0);
        let a = random_density_block(SpinIndex::new(2), 0.4, &mut rng);
        let b = random_density_block(SpinIndex::new(3), 0.6, &mut rng);
        let state = PolarizationState::new(vec![a.clone(), b.clone()]).unwrap();
        let dir = random_direction(&mut rng);
        let total = total_tomogram(&state, &dir);
        assert!((total.total() - 1.0).abs() < 1e-10);
        for (m, w) in &total.values {
            let want = exact_tomogram(&state, &dir, a.spin).get(*m) + exact_tomogram(&state, &dir, b.spin).get(*m);
            assert!((w - want).abs() < 1e-14);
        }
        let single = PolarizationState::single(random_density_block(SpinIndex::new(3), 1.0, &mut rng)).unwrap();
        assert_eq!(total_tomogram(&single, &dir).values, exact_tomogram(&single, &dir, SpinIndex::new(3)).values);
    }

    #[test]
    fn coherent_mean_along_j1() {
        let state = coherent_two_mode(Complex64::from(1.0), Complex64::from(1.0), 40).unwrap();
        let dir = Direction::new(PI / 2.0, 0.0).unwrap();
        let t = total_tomogram(&state, &dir);
        // ⟨J₁⟩ = Re(α_H* α_V) = 1
        // truncation at 1 − 1e−8 of the photon-number mass perturbs the analytic value slightly
        assert!((t.moment(1) - 1.0).abs() < 1e-6, "{}", t.moment(1));
        let expect: f64 = state
            .blocks()
            .iter()
            .map(|b| b.expectation(&build_angular_momentum(b.spin).j1).re)
            .sum();
        assert!((t.moment(1) - expect).abs() < 1e-10);
    }

    #[test]
    fn multinomial_counts_are_statistically_sound() {
        let spin = SpinIndex::new(4);
        let t = DiscreteTomogram {
            spin: Some(spin),
            dir: Direction::north_pole(),
            values: spin.two_m_values().map(|m| (m, 0.2)).collect(),
        };
        let n = 1_000_000u64;
        let h = sample_counts(&t, n, 99).unwrap();
        h.validate().unwrap();
        let sigma = (n as f64 * 0.2 * 0.8).sqrt();
        for c in &h.counts {
            assert!((*c as f64 - n as f64 / 5.0).abs() < 5.0 * sigma);
        }
        let one = sample_counts(&t, 1, 5).unwrap();
        assert_eq!(one.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(sample_counts(&t, 1000, 7).unwrap(), sample_counts(&t, 1000, 7).unwrap());
        assert_eq!(h.bin_edges[0], -2.5);
    }

    #[test]
    fn sideband_histogram_variances() {
        let axis = Direction::new(PI / 2.0, 0.0).unwrap();
        let coherent = kerr_squeezed_gaussian(&KerrSqueezeParams::new(1e11, 0.0, 0.0, axis, 0.0)).unwrap();
        let h = gaussian_sideband_tomogram(&coherent, &axis, 1_000_000, DEFAULT_BINS, 1).unwrap();
        h.validate().unwrap();
        assert_eq!(h.bins(), 2048);
        let (_, v_coh) = h.mean_variance();
        assert!((v_coh - 1.0).abs() < 0.01);

        let squeezed = kerr_squeezed_gaussian(&KerrSqueezeParams::new(1e11, 6.2, 0.0, axis, 0.0)).unwrap();
        let h = gaussian_sideband_tomogram(&squeezed, &axis, 1_000_000, DEFAULT_BINS, 2).unwrap();
        let (_, v_sq) = h.mean_variance();
        assert!((v_sq / v_coh / 10f64.powf(-0.62) - 1.0).abs() < 0.02);
    }

    #[test]
    fn sideband_mirror_symmetry() {
        let axis = Direction::new(1.0, 0.2).unwrap();
        let model = kerr_squeezed_gaussian(&KerrSqueezeParams::new(1e6, 6.2, 8.0, axis, 0.0))
            .unwrap()
            .with_displacement(Vector3::new(0.3, -0.2, 0.5));
        let dir = Direction::new(0.7, 1.3).unwrap();
        let a = gaussian_sideband_tomogram(&model, &dir, 400_000, 256, 11).unwrap();
        let b = gaussian_sideband_tomogram(&model, &dir.antipode(), 400_000, 256, 12).unwrap();
        let (ma, va) = a.mean_variance();
        let (mb, vb) = b.mean_variance();
        assert!((ma + mb).abs() < 0.01);
        assert!((va / vb - 1.0).abs() < 0.01);
        assert!((a.classical_projection + b.classical_projection).abs() < 1e-6);
    }

    #[test]
    fn sideband_rejects_degenerate_models() {
        let mut model = GaussianStokesModel::coherent(10.0, &Direction::north_pole()).unwrap();
        model.covariance = nalgebra::Matrix3::zeros();
        assert!(matches!(
            gaussian_sideband_tomogram(&model, &Direction::north_pole(), 10, 8, 0),
            Err(Error::NumericalModel(_))
        ));
        let ok = GaussianStokesModel::coherent(10.0, &Direction::north_pole()).unwrap();
        assert!(gaussian_sideband_tomogram(&ok, &Direction::north_pole(), 10, 1, 0).is_err());
    }

    #[test]
    fn grids_have_full_weight() {
        let g = AngleGrid::gauss_legendre(9, 12).unwrap();
        assert!((g.total_weight() - 4.0 * PI).abs() < 1e-12);
        let q = AngleGrid::quarter_scan(5, 4).unwrap();
        assert!((q.phi_weights.iter().sum::<f64>() * 4.0 - TAU).abs() < 1e-12);
        let v = AngleGrid::from_values(vec![0.3, 1.0, 2.0], vec![0.1, 0.5, 1.2], Coverage::QuarterSphere).unwrap();
        assert!((v.theta_weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(AngleGrid::from_values(vec![0.3], vec![0.1, 0.5], Coverage::FullSphere).is_err());
    }

    #[test]
    fn symmetrize_full_is_identity_and_isotropy_is_kept() {
        let spin = SpinIndex::new(3);
        let mixed = PolarizationState::single(maximally_mixed_block(spin, 1.0)).unwrap();
        let full = simulate_exact_scan(&mixed, &AngleGrid::gauss_legendre(4, 6).unwrap());
        assert_eq!(symmetrize_tomograms(&full).unwrap(), full);

        let quarter = simulate_exact_scan(&mixed, &AngleGrid::quarter_scan(4, 3).unwrap());
        let completed = symmetrize_tomograms(&quarter).unwrap();
        assert_eq!(completed.grid.len(), 4 * 12);
        assert!((completed.grid.total_weight() - 4.0 * PI).abs() < 1e-12);
        for r in &completed.records {
            if let Tomogram::Discrete(t) = &r.tomogram {
                assert!(t.values.iter().all(|(_, w)| (w - 0.25).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn symmetrized_discrete_scan_matches_direct_scan() {
        // α_V = 0 gives a state invariant under rotations about J₃, hence under both mirrors
        let state = coherent_two_mode(Complex64::new(0.8, 0.3), Complex64::from(0.0), 30).unwrap();
        let quarter = simulate_exact_scan(&state, &AngleGrid::quarter_scan(6, 4).unwrap());
        let completed = symmetrize_tomograms(&quarter).unwrap();
        let direct = simulate_exact_scan(&state, &completed.grid);
        for (a, b) in completed.records.iter().zip(&direct.records) {
            assert_eq!(a.direction, b.direction);
            let (Tomogram::Discrete(a), Tomogram::Discrete(b)) = (&a.tomogram, &b.tomogram) else {
                panic!("expected discrete records");
            };
            for ((ma, wa), (mb, wb)) in a.values.iter().zip(&b.values) {
                assert_eq!(ma, mb);
                assert!((wa - wb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetrize_reports_missing_data() {
        let spin = SpinIndex::new(1);
        let mixed = PolarizationState::single(maximally_mixed_block(spin, 1.0)).unwrap();
        let mut quarter = simulate_exact_scan(&mixed, &AngleGrid::quarter_scan(4, 3).unwrap());
        quarter.records.retain(|r| r.direction != 5);
        assert!(matches!(symmetrize_tomograms(&quarter), Err(Error::Coverage(_))));

        let lopsided = AngleGrid::from_values(vec![0.2, 1.0], vec![0.1, 0.5], Coverage::QuarterSphere).unwrap();
        let set = simulate_exact_scan(&mixed, &lopsided);
        assert!(matches!(symmetrize_tomograms(&set), Err(Error::Coverage(_))));
    }

    #[test]
    fn sideband_scans_are_reproducible() {
        let axis = Direction::new(PI / 2.0, 0.0).unwrap();
        let model = kerr_squeezed_gaussian(&KerrSqueezeParams::new(1e11, 6.2, 0.0, axis, 3.0)).unwrap();
        let grid = AngleGrid::quarter_scan(3, 2).unwrap();
        let a = simulate_sideband_scan(&model, &grid, 500, 64, 42).unwrap();
        let b = simulate_sideband_scan(&model, &grid, 500, 64, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_sideband_scan(&model, &grid, 500, 64, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_scan_converges_to_exact() {
        let mut rng = substream_rng(8, 0);
        let state = PolarizationState::new(vec![
            random_density_block(SpinIndex::new(1), 0.5, &mut rng),
            random_density_block(SpinIndex::new(2), 0.5, &mut rng),
        ])
        .unwrap();
        let grid = AngleGrid::gauss_legendre(3, 4).unwrap();
        let sampled = simulate_sampled_scan(&state, &grid, 200_000, 3).unwrap();
        let exact = simulate_exact_scan(&state, &grid);
        for (a, b) in sampled.records.iter().zip(&exact.records) {
            let (Tomogram::Discrete(a), Tomogram::Discrete(b)) = (&a.tomogram, &b.tomogram) else {
                panic!()
            };
            for ((_, x), (_, y)) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 0.01);
            }
        }
    }
}
