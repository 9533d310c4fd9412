//! Polarization states: exact block-diagonal density operators for modest
//! photon numbers, and a Gaussian model of Stokes fluctuations for the bright
//! squeezed beam.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::su2::{max_abs, CMatrix, CVector, Direction, SpinIndex, SpinOperators};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const PSD_FLOOR: f64 = -1e-10;
pub const TRACE_TOL: f64 = 1e-10;

/// Probability mass the coherent-state truncation must retain.
pub const COHERENT_KEPT_MASS: f64 = 1.0 - 1e-8;

/// One invariant-subspace block `ρ_J` together with its weight `Tr ρ_J`.
#[derive(Clone, Debug)]
pub struct DensityBlock {
    pub spin: SpinIndex,
    pub matrix: CMatrix,
    pub weight: f64,
}

impl DensityBlock {
    /// Validated constructor: Hermitian, positive semidefinite, weight in `[0, 1]`.
    pub fn new(spin: SpinIndex, matrix: CMatrix) -> Result<Self> {
        let block = Self::unchecked(spin, matrix)?;
        block.validate()?;
        Ok(block)
    }

    /// Only checks the shape. Used for raw reconstructions, which may be
    /// slightly non-positive.
    pub fn unchecked(spin: SpinIndex, matrix: CMatrix) -> Result<Self> {
        if matrix.shape() != (spin.dim(), spin.dim()) {
            return Err(Error::Input(format!(
                "block for 2J={} must be {}x{}, got {:?}",
                spin.two_j(),
                spin.dim(),
                spin.dim(),
                matrix.shape()
            )));
        }
        let weight = matrix.trace().re;
        Ok(Self {
            spin,
            matrix,
            weight,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let herm = max_abs(&(&self.matrix - self.matrix.adjoint()));
        if herm > HERMITIAN_TOL * self.matrix.nrows().max(1) as f64 {
            return Err(Error::Input(format!(
                "block 2J={} is not Hermitian (residual {herm:.2e})",
                self.spin.two_j()
            )));
        }
        let min_ev = self.min_eigenvalue();
        if min_ev < PSD_FLOOR {
            return Err(Error::Input(format!(
                "block 2J={} has negative eigenvalue {min_ev:.3e}",
                self.spin.two_j()
            )));
        }
        if !(-TRACE_TOL..=1.0 + TRACE_TOL).contains(&self.weight) {
            return Err(Error::Input(format!(
                "block 2J={} has weight {} outside [0, 1]",
                self.spin.two_j(),
                self.weight
            )));
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_part(&self.matrix)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// `Tr ρ²` of the block normalized to unit trace.
    pub fn purity(&self) -> f64 {
        if self.weight <= 0.0 {
            return 0.0;
        }
        (&self.matrix * &self.matrix).trace().re / (self.weight * self.weight)
    }

    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        (&self.matrix * op).trace()
    }

    /// Floors negative eigenvalues at zero and restores the original weight.
    pub fn clip_negative(&self) -> Self {
        let eig = hermitian_part(&self.matrix).symmetric_eigen();
        let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        let kept: f64 = clipped.iter().sum();
        let scale = if kept > 0.0 { self.weight.max(0.0) / kept } else { 0.0 };
        let v = &eig.eigenvectors;
        let mut scaled = v.clone();
        for (c, lam) in clipped.iter().enumerate() {
            let f = Complex64::from(lam * scale);
            for r in 0..v.nrows() {
                scaled[(r, c)] *= f;
            }
        }
        let matrix = scaled * v.adjoint();
        let weight = matrix.trace().re;
        Self {
            spin: self.spin,
            matrix,
            weight,
        }
    }
}

pub(crate) fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::from(0.5)
}

fn hermitian_sqrt(m: &CMatrix) -> CMatrix {
    let eig = hermitian_part(m).symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (c, lam) in eig.eigenvalues.iter().enumerate() {
        let f = Complex64::from(lam.max(0.0).sqrt());
        for r in 0..v.nrows() {
            scaled[(r, c)] *= f;
        }
    }
    scaled * v.adjoint()
}

/// `Tr sqrt(√ρ σ √ρ)` for unnormalized positive matrices; the square of the
/// sum of these over blocks is the Uhlmann fidelity of block-diagonal states.
pub fn root_fidelity(rho: &CMatrix, sigma: &CMatrix) -> f64 {
    let sr = hermitian_sqrt(rho);
    let inner = &sr * sigma * &sr;
    hermitian_sqrt(&inner).trace().re
}

/// Polarization density operator `⊕_J ρ_J`.
#[derive(Clone, Debug, Default)]
pub struct PolarizationState {
    blocks: Vec<DensityBlock>,
}

impl PolarizationState {
    /// Validated: distinct spins (sorted on construction), each block valid,
    /// total trace one.
    pub fn new(blocks: Vec<DensityBlock>) -> Result<Self> {
        let state = Self::from_blocks(blocks)?;
        for b in &state.blocks {
            b.validate()?;
        }
        let total = state.total_trace();
        if (total - 1.0).abs() > TRACE_TOL {
            return Err(Error::Input(format!("state trace {total} differs from 1")));
        }
        Ok(state)
    }

    /// Sorts and checks spins are distinct; no trace or positivity checks.
    pub fn from_blocks(mut blocks: Vec<DensityBlock>) -> Result<Self> {
        blocks.sort_by_key(|b| b.spin);
        if let Some(w) = blocks.windows(2).find(|w| w[0].spin == w[1].spin) {
            return Err(Error::Input(format!(
                "duplicate block for 2J={}",
                w[0].spin.two_j()
            )));
        }
        Ok(Self { blocks })
    }

    pub fn single(block: DensityBlock) -> Result<Self> {
        Self::new(vec![block])
    }

    pub fn blocks(&self) -> &[DensityBlock] {
        &self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, spin: SpinIndex) -> Option<&DensityBlock> {
        self.blocks
            .binary_search_by_key(&spin, |b| b.spin)
            .ok()
            .map(|i| &self.blocks[i])
    }

    pub fn spins(&self) -> impl Iterator<Item = SpinIndex> + '_ {
        self.blocks.iter().map(|b| b.spin)
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.matrix.trace().re).sum()
    }

    pub fn max_two_j(&self) -> Option<u32> {
        self.blocks.last().map(|b| b.spin.two_j())
    }

    /// Uhlmann fidelity between two block-diagonal states (blocks missing on
    /// either side contribute nothing).
    pub fn fidelity(&self, other: &PolarizationState) -> f64 {
        let root: f64 = self
            .blocks
            .iter()
            .filter_map(|b| other.block(b.spin).map(|o| root_fidelity(&b.matrix, &o.matrix)))
            .sum();
        root * root
    }
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| f64::from(k).ln()).sum()
}

/// `|α|^p` with the convention `0⁰ = 1`, returned as a logarithm (`-∞` for 0).
fn ln_abs_pow(alpha: Complex64, p: u32) -> f64 {
    if p == 0 {
        0.0
    } else {
        f64::from(p) * alpha.norm().ln()
    }
}

/// Projects the two-mode coherent state `|α_H⟩⊗|α_V⟩` onto the fixed-`N`
/// subspaces `N = 2J ≤ two_j_cutoff`.
///
/// Blocks are kept until the cumulative Poisson weight exceeds `1 − 1e−8`;
/// the kept blocks are then renormalized to unit total trace.
pub fn coherent_two_mode(alpha_h: Complex64, alpha_v: Complex64, two_j_cutoff: u32) -> Result<PolarizationState> {
    let mean = alpha_h.norm_sqr() + alpha_v.norm_sqr();
    let mut blocks = Vec::new();
    let mut cumulative = 0.0;
    let mut n = 0u32;
    loop {
        if n > two_j_cutoff {
            return Err(Error::Truncation {
                cutoff: two_j_cutoff,
                kept_weight: cumulative,
            });
        }
        let p = if mean == 0.0 {
            if n == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-mean + f64::from(n) * mean.ln() - ln_factorial(n)).exp()
        };
        let spin = SpinIndex::new(n);
        let mut psi = CVector::zeros(spin.dim());
        if mean > 0.0 {
            // index k ↔ n_H = N − k, n_V = k
            let ln_norm = 0.5 * ln_factorial(n) - 0.5 * f64::from(n) * mean.ln();
            for k in 0..spin.dim() {
                let (nh, nv) = (n - k as u32, k as u32);
                if (nh > 0 && alpha_h.norm() == 0.0) || (nv > 0 && alpha_v.norm() == 0.0) {
                    continue;
                }
                let ln_mag = ln_norm + ln_abs_pow(alpha_h, nh) + ln_abs_pow(alpha_v, nv)
                    - 0.5 * (ln_factorial(nh) + ln_factorial(nv));
                let phase = f64::from(nh) * alpha_h.arg() + f64::from(nv) * alpha_v.arg();
                psi[k] = Complex64::from_polar(ln_mag.exp(), phase);
            }
        } else {
            psi[0] = Complex64::from(1.0);
        }
        let matrix = (&psi * psi.adjoint()) * Complex64::from(p);
        blocks.push(DensityBlock::unchecked(spin, matrix)?);
        cumulative += p;
        if cumulative > COHERENT_KEPT_MASS {
            break;
        }
        n += 1;
    }
    let scale = Complex64::from(1.0 / cumulative);
    for b in &mut blocks {
        b.matrix *= scale;
        b.weight = b.matrix.trace().re;
    }
    PolarizationState::new(blocks)
}

/// Pure SU(2) coherent block `|J,J⟩_n⟨J,J|_n` with unit weight.
pub fn su2_coherent_block(spin: SpinIndex, dir: &Direction) -> DensityBlock {
    let ops = SpinOperators::new(spin);
    let u = ops.rotation(dir);
    let psi = u.column(0);
    let matrix = &psi * psi.adjoint();
    DensityBlock {
        spin,
        matrix,
        weight: 1.0,
    }
}

pub fn maximally_mixed_block(spin: SpinIndex, weight: f64) -> DensityBlock {
    let dim = spin.dim();
    DensityBlock {
        spin,
        matrix: CMatrix::identity(dim, dim) * Complex64::from(weight / dim as f64),
        weight,
    }
}

/// Random full-rank density block from the Ginibre ensemble, scaled to `weight`.
pub fn random_density_block<R: Rng + ?Sized>(spin: SpinIndex, weight: f64, rng: &mut R) -> DensityBlock {
    let dim = spin.dim();
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let mut matrix = &g * g.adjoint();
    let tr = matrix.trace().re;
    matrix *= Complex64::from(weight / tr);
    let matrix = hermitian_part(&matrix);
    DensityBlock {
        spin,
        weight: matrix.trace().re,
        matrix,
    }
}

/// Random pure block `|ψ⟩⟨ψ|` with Haar-distributed `ψ`.
pub fn random_pure_block<R: Rng + ?Sized>(spin: SpinIndex, weight: f64, rng: &mut R) -> DensityBlock {
    let dim = spin.dim();
    let mut psi = CVector::from_fn(dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let norm = psi.norm();
    psi /= Complex64::from(norm);
    let matrix = (&psi * psi.adjoint()) * Complex64::from(weight);
    DensityBlock {
        spin,
        weight,
        matrix,
    }
}

/// Mean Stokes vector plus a 3×3 fluctuation covariance.
///
/// `mean` is in Stokes (`J`) units and has length `J̄ = photon_scale / 2`.
/// `covariance` and `displacement` are in shot-noise units: a coherent beam
/// has unit variance along every direction orthogonal to its mean.
/// `displacement` offsets the fluctuation distribution itself and is zero for
/// physical states; phantom studies use it to translate the distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStokesModel {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub photon_scale: f64,
    pub displacement: Vector3<f64>,
}

impl GaussianStokesModel {
    pub fn new(mean: Vector3<f64>, covariance: Matrix3<f64>, photon_scale: f64) -> Result<Self> {
        let asym = (covariance - covariance.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::NumericalModel(format!(
                "covariance is not symmetric (residual {asym:.2e})"
            )));
        }
        let min_ev = covariance.symmetric_eigen().eigenvalues.min();
        if !(min_ev > 0.0) {
            return Err(Error::NumericalModel(format!(
                "covariance must be positive definite (min eigenvalue {min_ev:.3e})"
            )));
        }
        if !(photon_scale > 0.0) {
            return Err(Error::Domain("photon scale must be positive".into()));
        }
        Ok(Self {
            mean,
            covariance,
            photon_scale,
            displacement: Vector3::zeros(),
        })
    }

    /// Coherent reference beam: unit covariance.
    pub fn coherent(mean_photons: f64, mean_axis: &Direction) -> Result<Self> {
        if !(mean_photons > 0.0) {
            return Err(Error::Domain(format!("mean_photons={mean_photons} must be positive")));
        }
        Self::new(
            mean_axis.unit_vector() * (mean_photons / 2.0),
            Matrix3::identity(),
            mean_photons,
        )
    }

    pub fn with_displacement(mut self, displacement: Vector3<f64>) -> Self {
        self.displacement = displacement;
        self
    }

    /// `nᵀΣn`, the fluctuation variance seen by a Stokes measurement along `n`.
    pub fn marginal_variance(&self, n: &Vector3<f64>) -> f64 {
        n.dot(&(self.covariance * n))
    }

    pub fn classical_projection(&self, n: &Vector3<f64>) -> f64 {
        self.mean.dot(n)
    }

    /// Stokes units per shot-noise unit, `sqrt(J̄/2)`.
    pub fn shot_noise_scale(&self) -> f64 {
        (self.mean.norm() / 2.0).sqrt()
    }
}

/// Parameters of the Gaussian stand-in for a Kerr-squeezed beam.
#[derive(Clone, Debug, PartialEq)]
pub struct KerrSqueezeParams {
    pub mean_photons: f64,
    pub squeeze_db: f64,
    pub antisqueeze_db: f64,
    pub squeeze_axis: Direction,
    pub excess_noise_db: f64,
    /// Direction of the classical excitation; circular polarization (`J₂`)
    /// unless stated otherwise.
    pub mean_axis: Direction,
}

impl KerrSqueezeParams {
    pub fn new(mean_photons: f64, squeeze_db: f64, antisqueeze_db: f64, squeeze_axis: Direction, excess_noise_db: f64) -> Self {
        Self {
            mean_photons,
            squeeze_db,
            antisqueeze_db,
            squeeze_axis,
            excess_noise_db,
            mean_axis: circular_axis(),
        }
    }
}

/// The `J₂` axis, where a circularly polarized beam has its mean.
pub fn circular_axis() -> Direction {
    Direction::new(FRAC_PI_2, FRAC_PI_2).expect("constant direction")
}

/// Converts a noise level in dB (relative to shot noise) to a variance.
pub fn db_to_variance(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn variance_to_db(variance: f64) -> f64 {
    10.0 * variance.log10()
}

/// Gaussian model of a polarization-squeezed beam.
///
/// The squeezed and antisqueezed principal axes span the dark plane
/// orthogonal to the mean. The squeezed axis is `squeeze_axis` with its
/// component along the mean removed; the antisqueezed axis completes the
/// right-handed frame `(squeezed, antisqueezed, mean)`. Excess noise only
/// inflates the antisqueezed variance.
pub fn kerr_squeezed_gaussian(params: &KerrSqueezeParams) -> Result<GaussianStokesModel> {
    if !(params.mean_photons > 0.0) || !params.mean_photons.is_finite() {
        return Err(Error::Domain(format!(
            "mean_photons={} must be positive",
            params.mean_photons
        )));
    }
    for (name, v) in [
        ("squeeze_dB", params.squeeze_db),
        ("antisqueeze_dB", params.antisqueeze_db),
        ("excess_noise_dB", params.excess_noise_db),
    ] {
        if !v.is_finite() {
            return Err(Error::Domain(format!("{name} must be finite")));
        }
    }
    let mean_dir = params.mean_axis.unit_vector();
    let raw = params.squeeze_axis.unit_vector();
    let sq = raw - mean_dir * raw.dot(&mean_dir);
    if sq.norm() < 1e-9 {
        return Err(Error::Domain("squeeze axis must not be parallel to the mean".into()));
    }
    let sq = sq.normalize();
    let anti = mean_dir.cross(&sq);

    let v_sq = db_to_variance(-params.squeeze_db);
    let v_anti = db_to_variance(params.antisqueeze_db) * db_to_variance(params.excess_noise_db);
    let covariance = sq * sq.transpose() * v_sq + anti * anti.transpose() * v_anti + mean_dir * mean_dir.transpose();
    let covariance = (covariance + covariance.transpose()) * 0.5;
    GaussianStokesModel::new(mean_dir * (params.mean_photons / 2.0), covariance, params.mean_photons)
}

/// Principal axes of a squeezed model: `(squeezed, antisqueezed, mean)` unit vectors.
pub fn squeeze_frame(params: &KerrSqueezeParams) -> [Vector3<f64>; 3] {
    let mean_dir = params.mean_axis.unit_vector();
    let raw = params.squeeze_axis.unit_vector();
    let sq = (raw - mean_dir * raw.dot(&mean_dir)).normalize();
    [sq, mean_dir.cross(&sq), mean_dir]
}
