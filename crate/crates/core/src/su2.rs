//! Finite-dimensional SU(2) machinery for a single invariant subspace.
//!
//! Every matrix here lives in the basis `|J, m⟩` ordered by *descending* `m`:
//! basis index `k ∈ [0, 2J]` carries `m = J − k`, so index 0 is the
//! highest-weight state. Half-integers are carried as twice their value
//! (`two_j`, `two_m`) in all public signatures.
//!
//! The polarization analyzer is modelled by the wave-plate transformation
//! `W(n) = exp(iθJ₂)·exp(iφJ₃)` acting on the state before the beam splitter
//! projects onto `|J, m⟩`. Equivalently the projector is carried back onto
//! the state: [`SpinOperators::rotation`] returns `U(n) = W(n)† =
//! exp(−iφJ₃)·exp(−iθJ₂)`, whose columns are the eigenvectors of `n·J`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Default upper bound on `2J` for the exact (dense) path.
pub const DEFAULT_MAX_TWO_J: u32 = 512;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Invariant subspace label, stored as `2J` so half-integer spins are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinIndex {
    two_j: u32,
}

impl SpinIndex {
    pub const fn new(two_j: u32) -> Self {
        Self { two_j }
    }

    /// Like [`SpinIndex::new`] but rejects subspaces above `limit`.
    pub fn with_limit(two_j: u32, limit: u32) -> Result<Self> {
        if two_j > limit {
            return Err(Error::Domain(format!(
                "twoJ={two_j} exceeds the exact-path limit {limit}"
            )));
        }
        Ok(Self { two_j })
    }

    pub const fn two_j(self) -> u32 {
        self.two_j
    }

    pub fn j(self) -> f64 {
        f64::from(self.two_j) / 2.0
    }

    pub const fn dim(self) -> usize {
        self.two_j as usize + 1
    }

    /// `2m` for basis index `k`.
    pub fn two_m(self, k: usize) -> i32 {
        self.two_j as i32 - 2 * k as i32
    }

    pub fn m(self, k: usize) -> f64 {
        f64::from(self.two_m(k)) / 2.0
    }

    /// Basis index for `2m`, or a domain error when `m` is not in `{−J, …, J}`.
    pub fn index_of(self, two_m: i32) -> Result<usize> {
        let two_j = self.two_j as i32;
        if two_m.abs() > two_j || (two_j - two_m) % 2 != 0 {
            return Err(Error::Domain(format!(
                "2m={two_m} is not a valid projection for 2J={two_j}"
            )));
        }
        Ok(((two_j - two_m) / 2) as usize)
    }

    /// All `2m` values in basis order (descending).
    pub fn two_m_values(self) -> impl Iterator<Item = i32> {
        (0..self.dim()).map(move |k| self.two_m(k))
    }
}

/// Unit vector on the Poincaré sphere, `n = (cos φ sin θ, sin φ sin θ, cos θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction {
    theta: f64,
    phi: f64,
}

impl Direction {
    /// `theta` must lie in `[0, π]`; `phi` is wrapped into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::Domain("non-finite direction angle".into()));
        }
        if !(-1e-12..=PI + 1e-12).contains(&theta) {
            return Err(Error::Domain(format!("theta={theta} outside [0, π]")));
        }
        Ok(Self {
            theta: theta.clamp(0.0, PI),
            phi: wrap_angle(phi),
        })
    }

    pub const fn north_pole() -> Self {
        Self {
            theta: 0.0,
            phi: 0.0,
        }
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain("cannot take the direction of a zero vector".into()));
        }
        let u = v / norm;
        let theta = u.z.clamp(-1.0, 1.0).acos();
        let phi = u.y.atan2(u.x);
        Self::new(theta, phi)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn unit_vector(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(cp * st, sp * st, ct)
    }

    /// The direction `−n`.
    pub fn antipode(&self) -> Self {
        Self {
            theta: PI - self.theta,
            phi: wrap_angle(self.phi + PI),
        }
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.unit_vector().dot(&other.unit_vector())
    }
}

pub(crate) fn wrap_angle(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// The three Stokes generators `J₁, J₂, J₃` of one invariant subspace.
#[derive(Clone, Debug)]
pub struct AngularMomentum {
    pub j1: CMatrix,
    pub j2: CMatrix,
    pub j3: CMatrix,
}

impl AngularMomentum {
    pub fn along(&self, n: &Vector3<f64>) -> CMatrix {
        &self.j1 * Complex64::from(n.x) + &self.j2 * Complex64::from(n.y) + &self.j3 * Complex64::from(n.z)
    }
}

/// Builds `J₁, J₂, J₃` from the ladder operators in the descending-`m` basis.
pub fn build_angular_momentum(spin: SpinIndex) -> AngularMomentum {
    let dim = spin.dim();
    let two_j = spin.two_j() as usize;
    let mut raise = CMatrix::zeros(dim, dim);
    for k in 1..dim {
        // ⟨m+1|J₊|m⟩ with m = J − k, i.e. sqrt((J − m)(J + m + 1))
        let c = ((k * (two_j + 1 - k)) as f64).sqrt();
        raise[(k - 1, k)] = Complex64::from(c);
    }
    let lower = raise.adjoint();
    let j1 = (&raise + &lower) * Complex64::from(0.5);
    let j2 = (&raise - &lower) * (-0.5 * I);
    let j3 = CMatrix::from_diagonal(&CVector::from_iterator(
        dim,
        (0..dim).map(|k| Complex64::from(spin.m(k))),
    ));
    AngularMomentum { j1, j2, j3 }
}

/// Precomputed operators for one subspace. Immutable once built, so it can be
/// shared freely across threads.
#[derive(Clone, Debug)]
pub struct SpinOperators {
    spin: SpinIndex,
    generators: AngularMomentum,
    /// Eigenvectors of `J₂` (columns) and their exact eigenvalues.
    j2_vectors: CMatrix,
    j2_values: Vec<f64>,
}

impl SpinOperators {
    pub fn new(spin: SpinIndex) -> Self {
        let generators = build_angular_momentum(spin);
        let eig = generators.j2.clone().symmetric_eigen();
        // The spectrum of J₂ is exactly {−J, …, J}; snap away the rounding.
        let j2_values = eig
            .eigenvalues
            .iter()
            .map(|&v| (2.0 * v).round() / 2.0)
            .collect();
        Self {
            spin,
            generators,
            j2_vectors: eig.eigenvectors,
            j2_values,
        }
    }

    pub fn spin(&self) -> SpinIndex {
        self.spin
    }

    pub fn generators(&self) -> &AngularMomentum {
        &self.generators
    }

    /// `exp(iα·J₂)` from the eigendecomposition of `J₂`.
    pub fn exp_j2(&self, alpha: f64) -> CMatrix {
        if alpha == 0.0 {
            return CMatrix::identity(self.spin.dim(), self.spin.dim());
        }
        let v = &self.j2_vectors;
        let mut scaled = v.clone();
        for (c, &mu) in self.j2_values.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, alpha * mu);
            for r in 0..v.nrows() {
                scaled[(r, c)] *= phase;
            }
        }
        scaled * v.adjoint()
    }

    /// `U(n) = exp(−iφJ₃)·exp(−iθJ₂)`; column `k` is `|J, m_k⟩_n`.
    pub fn rotation(&self, dir: &Direction) -> CMatrix {
        let mut u = self.exp_j2(-dir.theta());
        for r in 0..u.nrows() {
            let phase = Complex64::from_polar(1.0, -dir.phi() * self.spin.m(r));
            for c in 0..u.ncols() {
                u[(r, c)] *= phase;
            }
        }
        u
    }

    /// The wave-plate transformation `W(n) = exp(iθJ₂)·exp(iφJ₃) = U(n)†`.
    pub fn waveplate(&self, dir: &Direction) -> CMatrix {
        self.rotation(dir).adjoint()
    }

    /// `|J, m⟩_n`, the eigenvector of `n·J` with eigenvalue `m`.
    pub fn rotated_basis_state(&self, two_m: i32, dir: &Direction) -> Result<CVector> {
        let k = self.spin.index_of(two_m)?;
        Ok(self.rotation(dir).column(k).into_owned())
    }

    /// `exp(−iω n·J) = U(n)·diag(e^{−iωm})·U(n)†`.
    pub fn axis_exponential(&self, dir: &Direction, omega: f64) -> CMatrix {
        let u = self.rotation(dir);
        let mut scaled = u.clone();
        for c in 0..scaled.ncols() {
            let phase = Complex64::from_polar(1.0, -omega * self.spin.m(c));
            for r in 0..scaled.nrows() {
                scaled[(r, c)] *= phase;
            }
        }
        scaled * u.adjoint()
    }

    pub fn along(&self, dir: &Direction) -> CMatrix {
        self.generators.along(&dir.unit_vector())
    }
}

pub fn rotation_matrix(spin: SpinIndex, dir: &Direction) -> CMatrix {
    SpinOperators::new(spin).rotation(dir)
}

pub fn rotated_basis_state(spin: SpinIndex, two_m: i32, dir: &Direction) -> Result<CVector> {
    SpinOperators::new(spin).rotated_basis_state(two_m, dir)
}

pub fn axis_projected_exponential(spin: SpinIndex, dir: &Direction, omega: f64) -> CMatrix {
    SpinOperators::new(spin).axis_exponential(dir, omega)
}

/// Largest entry modulus, the norm used for all algebraic tolerances.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
