//! Exact reconstruction of each invariant-subspace block from its tomograms,
//! and the SU(2) Q function.
//!
//! The inversion is
//!
//! ```text
//! ρ_J = (2J+1)/(4π²) ∫dω sin²(ω/2) ∫dn e^{−iω n·J} Σ_m w^J_m(n) e^{imω}
//! ```
//!
//! Both integrals are evaluated by quadrature rules that are exact for the
//! band-limited integrand, so the round trip is exact up to rounding. Because
//! `e^{−iω n·J} = U(n) diag(e^{−iωm'}) U(n)†`, the `ω` integral collapses to a
//! fixed `(2J+1)×(2J+1)` kernel acting on the tomogram, leaving one diagonal
//! scaling per sphere node.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measurement::{block_tomogram, AngleGrid, Coverage, DiscreteTomogram, TomogramSet};
use crate::quadrature::uniform_circle;
use crate::states::{hermitian_part, DensityBlock, PolarizationState};
use crate::su2::{max_abs, CMatrix, Direction, SpinIndex, SpinOperators};

/// Pre-symmetrization Hermiticity residual above which the quadrature is
/// reported as insufficient.
pub const HERMITICITY_WARNING: f64 = 1e-6;

/// Nodes for the `ω` and sphere integrals.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureScheme {
    /// `(ω, weight)` pairs on `[0, 2π)`.
    pub omega: Vec<(f64, f64)>,
    pub grid: AngleGrid,
}

impl QuadratureScheme {
    /// Uniform `ω` rule with `n_omega` nodes and the given full-sphere grid.
    pub fn new(n_omega: usize, grid: AngleGrid) -> Result<Self> {
        if n_omega == 0 {
            return Err(Error::Input("need at least one ω node".into()));
        }
        let (nodes, weights) = uniform_circle(n_omega);
        Self::from_parts(nodes.into_iter().zip(weights).collect(), grid)
    }

    pub fn from_parts(omega: Vec<(f64, f64)>, grid: AngleGrid) -> Result<Self> {
        if grid.coverage != Coverage::FullSphere {
            return Err(Error::Coverage("exact inversion needs a full-sphere grid".into()));
        }
        if omega.iter().any(|(_, w)| !(*w > 0.0)) || grid.weights().iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Input("quadrature weights must be positive".into()));
        }
        let omega_total: f64 = omega.iter().map(|(_, w)| w).sum();
        if (omega_total - TAU).abs() > 1e-12 {
            return Err(Error::Input(format!("ω weights sum to {omega_total}, not 2π")));
        }
        let sphere_total: f64 = grid.weights().iter().sum();
        if (sphere_total - 4.0 * PI).abs() > 1e-8 {
            return Err(Error::Input(format!("sphere weights sum to {sphere_total}, not 4π")));
        }
        Ok(Self { omega, grid })
    }

    /// The smallest rule that is exact for every subspace up to `spin`:
    /// `2(2J+1)` uniform `ω` nodes, `2J+2` Gauss-Legendre polar nodes and
    /// `4J+2` uniform azimuths.
    pub fn for_spin(spin: SpinIndex) -> Self {
        let two_j = spin.two_j() as usize;
        let grid = AngleGrid::gauss_legendre(two_j + 2, 2 * two_j + 2).expect("counts are at least 2");
        Self::new(2 * (two_j + 1), grid).expect("uniform rules are valid")
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.grid.directions()
    }
}

/// Tomograms of one subspace, one per sphere node of a scheme, in grid order.
#[derive(Clone, Debug)]
pub struct BlockTomograms {
    pub spin: SpinIndex,
    pub tomograms: Vec<DiscreteTomogram>,
}

impl BlockTomograms {
    /// Noise-free tomograms of `block` at every node of `scheme`.
    pub fn simulate(block: &DensityBlock, scheme: &QuadratureScheme) -> Self {
        let ops = SpinOperators::new(block.spin);
        let tomograms = scheme
            .directions()
            .par_iter()
            .map(|d| block_tomogram(&ops, block, d))
            .collect();
        Self {
            spin: block.spin,
            tomograms,
        }
    }

    /// Splits a per-subspace tomogram set into one entry per subspace,
    /// checking every grid direction appears exactly once for each.
    pub fn from_set(set: &TomogramSet) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for spin in set.spins() {
            let mut slots: Vec<Option<DiscreteTomogram>> = vec![None; set.grid.len()];
            for (i, t) in set.discrete_for(spin) {
                let slot = slots
                    .get_mut(i)
                    .ok_or_else(|| Error::Coverage(format!("record direction {i} outside the grid")))?;
                if slot.is_some() {
                    return Err(Error::Input(format!(
                        "two tomograms for 2J={} at direction {i}",
                        spin.two_j()
                    )));
                }
                *slot = Some(t.clone());
            }
            let tomograms = slots
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    t.ok_or_else(|| {
                        Error::Coverage(format!("missing tomogram for 2J={} at node {i}", spin.two_j()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(Self { spin, tomograms });
        }
        Ok(out)
    }

    /// Pointwise `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        let tomograms = self
            .tomograms
            .iter()
            .zip(&other.tomograms)
            .map(|(x, y)| DiscreteTomogram {
                values: x
                    .values
                    .iter()
                    .zip(&y.values)
                    .map(|(&(m, u), &(_, v))| (m, a * u + b * v))
                    .collect(),
                ..x.clone()
            })
            .collect();
        Self {
            spin: self.spin,
            tomograms,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconstructOptions {
    /// Floor negative eigenvalues at zero (noisy data only).
    pub clip_negative: bool,
}

#[derive(Clone, Debug)]
pub struct BlockReconstruction {
    pub block: DensityBlock,
    /// `max |ρ − ρ†|` before Hermitization.
    pub hermitian_residual: f64,
    pub warnings: Vec<String>,
}

/// `K[m][m'] = (2J+1)/(4π²) Σ_ω w_ω sin²(ω/2) e^{i(m − m')ω}`.
fn omega_kernel(spin: SpinIndex, omega: &[(f64, f64)]) -> CMatrix {
    let dim = spin.dim();
    let pref = f64::from(spin.two_j() + 1) / (4.0 * PI * PI);
    // depends only on the integer m − m' = k' − k
    let by_shift: Vec<Complex64> = (0..2 * dim - 1)
        .map(|s| {
            let shift = s as f64 - (dim as f64 - 1.0);
            omega
                .iter()
                .map(|&(w, wt)| Complex64::from_polar(wt * (w / 2.0).sin().powi(2), shift * w))
                .sum::<Complex64>()
                * pref
        })
        .collect();
    CMatrix::from_fn(dim, dim, |k, kp| by_shift[kp + dim - 1 - k])
}

/// Kernel inversion of one block.
pub fn reconstruct_block(
    tomograms: &BlockTomograms,
    scheme: &QuadratureScheme,
    options: ReconstructOptions,
) -> Result<BlockReconstruction> {
    let spin = tomograms.spin;
    let grid = &scheme.grid;
    if tomograms.tomograms.len() != grid.len() {
        return Err(Error::Coverage(format!(
            "{} tomograms for {} sphere nodes",
            tomograms.tomograms.len(),
            grid.len()
        )));
    }
    let probabilities = tomograms
        .tomograms
        .iter()
        .map(|t| {
            if t.spin != Some(spin) {
                return Err(Error::Input(format!(
                    "tomogram for {:?} in the 2J={} set",
                    t.spin.map(|s| s.two_j()),
                    spin.two_j()
                )));
            }
            t.probabilities()
        })
        .collect::<Result<Vec<_>>>()?;

    let ops = SpinOperators::new(spin);
    let kernel = omega_kernel(spin, &scheme.omega);
    let dim = spin.dim();
    let n_phi = grid.n_phi();

    // one θ ring per task, summed in a fixed order so the result does not
    // depend on the thread count
    let rings: Vec<CMatrix> = (0..grid.theta_values.len())
        .into_par_iter()
        .map(|it| {
            let mut acc = CMatrix::zeros(dim, dim);
            for ip in 0..n_phi {
                let idx = it * n_phi + ip;
                let w = &probabilities[idx];
                let u = ops.rotation(&grid.direction(idx));
                let weight = grid.weight(idx);
                let mut scaled = u.clone();
                for kp in 0..dim {
                    let g: Complex64 = (0..dim).map(|k| kernel[(k, kp)] * w[k]).sum::<Complex64>() * weight;
                    for r in 0..dim {
                        scaled[(r, kp)] *= g;
                    }
                }
                acc += scaled * u.adjoint();
            }
            acc
        })
        .collect();
    let mut raw = CMatrix::zeros(dim, dim);
    for r in rings {
        raw += r;
    }

    let hermitian_residual = max_abs(&(&raw - raw.adjoint()));
    let mut warnings = Vec::new();
    if hermitian_residual > HERMITICITY_WARNING {
        warnings.push(format!(
            "2J={}: Hermiticity residual {hermitian_residual:.2e} suggests too few quadrature nodes",
            spin.two_j()
        ));
    }
    let mut block = DensityBlock::unchecked(spin, hermitian_part(&raw))?;
    if options.clip_negative {
        block = block.clip_negative();
    }
    Ok(BlockReconstruction {
        block,
        hermitian_residual,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct FullReconstruction {
    pub state: PolarizationState,
    pub blocks: Vec<BlockReconstruction>,
    /// `1 − Σ_J Tr ρ_J`.
    pub trace_deficit: f64,
    pub empty: bool,
}

/// Reconstructs every subspace and assembles the direct sum.
pub fn reconstruct_full(
    inputs: &[BlockTomograms],
    scheme: &QuadratureScheme,
    options: ReconstructOptions,
) -> Result<FullReconstruction> {
    let mut spins: Vec<SpinIndex> = inputs.iter().map(|b| b.spin).collect();
    spins.sort();
    if let Some(w) = spins.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Input(format!("two tomogram sets claim 2J={}", w[0].two_j())));
    }
    let blocks = inputs
        .iter()
        .map(|b| reconstruct_block(b, scheme, options))
        .collect::<Result<Vec<_>>>()?;
    let state = PolarizationState::from_blocks(blocks.iter().map(|b| b.block.clone()).collect())?;
    let trace_deficit = 1.0 - state.total_trace();
    Ok(FullReconstruction {
        empty: state.is_empty(),
        state,
        blocks,
        trace_deficit,
    })
}

/// `(2J+1)/(4π²) ∫dω sin²(ω/2) e^{imω} [cos(ω/2) − i sin(ω/2) cos χ]^{2J}`,
/// the coherent-state matrix element of the inversion kernel, on the given
/// `(ω, weight)` nodes.
pub fn kernel_matrix_element(spin: SpinIndex, two_m: i32, cos_chi: f64, omega: &[(f64, f64)]) -> Result<Complex64> {
    if !(-1.0..=1.0).contains(&cos_chi) {
        return Err(Error::Domain(format!("cos χ = {cos_chi} outside [−1, 1]")));
    }
    let m = f64::from(two_m) / 2.0;
    let pref = f64::from(spin.two_j() + 1) / (4.0 * PI * PI);
    let sum: Complex64 = omega
        .iter()
        .map(|&(w, wt)| {
            let (s, c) = (w / 2.0).sin_cos();
            let base = Complex64::new(c, -s * cos_chi);
            wt * s * s * Complex64::from_polar(1.0, m * w) * base.powi(spin.two_j() as i32)
        })
        .sum();
    Ok(sum * pref)
}

/// Uniform `ω` nodes with weights, `n` of them.
pub fn omega_nodes(n: usize) -> Vec<(f64, f64)> {
    let (x, w) = uniform_circle(n);
    x.into_iter().zip(w).collect()
}

/// Max-abs difference between the tomogram of `block` along `dir` computed
/// from the rotated projectors and from the Fourier transform of the
/// characteristic function `Tr(ρ_J e^{iω n·J})` on `n_omega` uniform nodes.
///
/// Exact once `n_omega ≥ 2J+1`; fewer nodes alias.
pub fn characteristic_check(block: &DensityBlock, dir: &Direction, n_omega: usize) -> f64 {
    let ops = SpinOperators::new(block.spin);
    let direct = block_tomogram(&ops, block, dir);
    let nodes = omega_nodes(n_omega.max(1));
    let characteristic: Vec<(f64, f64, Complex64)> = nodes
        .iter()
        .map(|&(w, wt)| (w, wt, (&block.matrix * ops.axis_exponential(dir, -w)).trace()))
        .collect();
    direct
        .values
        .iter()
        .map(|&(two_m, w)| {
            let m = f64::from(two_m) / 2.0;
            let fourier: Complex64 = characteristic
                .iter()
                .map(|&(om, wt, chi)| chi * Complex64::from_polar(wt, -m * om))
                .sum::<Complex64>()
                / TAU;
            (fourier - Complex64::from(w)).norm()
        })
        .fold(0.0, f64::max)
}

/// Samples of a function on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereFunction {
    pub spin: Option<SpinIndex>,
    pub samples: Vec<(Direction, f64)>,
}

impl SphereFunction {
    pub fn min(&self) -> f64 {
        self.samples.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min)
    }

    /// `Σ w_i f(n_i)`, pairing samples with the supplied weights.
    pub fn integrate(&self, weights: &[f64]) -> f64 {
        self.samples.iter().zip(weights).map(|((_, v), w)| v * w).sum()
    }
}

/// `Q(J, n) = ⟨J,J|_n ρ_J |J,J⟩_n` at each direction.
///
/// With this convention `(2J+1)/(4π) ∫ Q dn = Tr ρ_J`.
pub fn q_function(block: &DensityBlock, directions: &[Direction]) -> SphereFunction {
    let ops = SpinOperators::new(block.spin);
    let samples = directions
        .par_iter()
        .map(|d| {
            let psi = ops.rotation(d).column(0).into_owned();
            let v = (psi.adjoint() * &block.matrix * &psi)[(0, 0)].re;
            (*d, v)
        })
        .collect();
    SphereFunction {
        spin: Some(block.spin),
        samples,
    }
}

/// `(2J+1)/(4π) Σ w_i Q(n_i)` on a sphere rule.
pub fn q_normalization(q: &SphereFunction, grid: &AngleGrid) -> f64 {
    let two_j = q.spin.map(|s| s.two_j()).unwrap_or(0);
    f64::from(two_j + 1) / (4.0 * PI) * q.integrate(&grid.weights())
}

/// Q function computed straight from tomograms with the coherent-state
/// kernel elements: `Q(n) = Σ_m ∫dn' w_m(n') K_m(n·n')`.
pub fn q_from_tomograms(
    tomograms: &BlockTomograms,
    scheme: &QuadratureScheme,
    directions: &[Direction],
) -> Result<SphereFunction> {
    let spin = tomograms.spin;
    let nodes = scheme.directions();
    let weights = scheme.grid.weights();
    let probabilities = tomograms
        .tomograms
        .iter()
        .map(|t| t.probabilities())
        .collect::<Result<Vec<_>>>()?;
    let samples = directions
        .par_iter()
        .map(|d| {
            let mut total = 0.0;
            for ((node, w_node), probs) in nodes.iter().zip(&weights).zip(&probabilities) {
                let cos_chi = d.dot(node).clamp(-1.0, 1.0);
                for (k, p) in probs.iter().enumerate() {
                    total += w_node * p * kernel_matrix_element(spin, spin.two_m(k), cos_chi, &scheme.omega)?.re;
                }
            }
            Ok((*d, total))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SphereFunction {
        spin: Some(spin),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::substream_rng;
    use crate::states::{coherent_two_mode, maximally_mixed_block, random_density_block, su2_coherent_block};
    use rand::Rng;

    fn frobenius(a: &CMatrix, b: &CMatrix) -> f64 {
        (a - b).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn random_direction(rng: &mut impl Rng) -> Direction {
        let z: f64 = rng.random_range(-1.0..1.0);
        Direction::new(z.acos(), rng.random_range(0.0..TAU)).unwrap()
    }

    /// Composite Simpson on `[0, 2π]`, independent of the node rule above.
    fn simpson_kernel(two_j: u32, two_m: i32, cos_chi: f64) -> Complex64 {
        let n = 20_000;
        let h = TAU / n as f64;
        let f = |w: f64| {
            let (s, c) = (w / 2.0).sin_cos();
            s * s * Complex64::from_polar(1.0, f64::from(two_m) / 2.0 * w) * Complex64::new(c, -s * cos_chi).powi(two_j as i32)
        };
        let mut sum = f(0.0) + f(TAU);
        for i in 1..n {
            sum += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * (h / 3.0) * (f64::from(two_j + 1) / (4.0 * PI * PI))
    }

    #[test]
    fn scalar_block_round_trip() {
        let spin = SpinIndex::new(0);
        let scheme = QuadratureScheme::for_spin(spin);
        let block = maximally_mixed_block(spin, 0.37);
        let rec = reconstruct_block(&BlockTomograms::simulate(&block, &scheme), &scheme, Default::default()).unwrap();
        assert!((rec.block.matrix[(0, 0)].re - 0.37).abs() < 1e-14);
        assert!((rec.block.weight - 0.37).abs() < 1e-14);
    }

    #[test]
    fn random_block_round_trip() {
        let mut rng = substream_rng(10, 0);
        let spin = SpinIndex::new(4);
        let scheme = QuadratureScheme::for_spin(spin);
        let block = random_density_block(spin, 1.0, &mut rng);
        let rec = reconstruct_block(&BlockTomograms::simulate(&block, &scheme), &scheme, Default::default()).unwrap();
        assert!(frobenius(&rec.block.matrix, &block.matrix) < 1e-8);
        assert!(rec.hermitian_residual < 1e-8);
        assert!(rec.warnings.is_empty());
    }

    #[test]
    fn coherent_block_round_trip_fidelity() {
        let spin = SpinIndex::new(6);
        let scheme = QuadratureScheme::for_spin(spin);
        let block = su2_coherent_block(spin, &Direction::new(0.7, 2.5).unwrap());
        let rec = reconstruct_block(&BlockTomograms::simulate(&block, &scheme), &scheme, Default::default()).unwrap();
        let state = PolarizationState::from_blocks(vec![block]).unwrap();
        let out = PolarizationState::from_blocks(vec![rec.block]).unwrap();
        assert!(state.fidelity(&out) > 1.0 - 1e-8);
    }

    #[test]
    fn minimal_azimuth_count_is_not_enough() {
        // 2J+2 azimuths alias the 4J-degree sphere integrand
        let mut rng = substream_rng(12, 0);
        let spin = SpinIndex::new(4);
        let grid = AngleGrid::gauss_legendre(6, 6).unwrap();
        let scheme = QuadratureScheme::new(10, grid).unwrap();
        let block = random_density_block(spin, 1.0, &mut rng);
        let rec = reconstruct_block(&BlockTomograms::simulate(&block, &scheme), &scheme, Default::default()).unwrap();
        assert!(frobenius(&rec.block.matrix, &block.matrix) > 1e-6);
    }

    #[test]
    fn reconstruction_is_linear() {
        let mut rng = substream_rng(13, 0);
        let spin = SpinIndex::new(3);
        let scheme = QuadratureScheme::for_spin(spin);
        let a = random_density_block(spin, 1.0, &mut rng);
        let b = random_density_block(spin, 1.0, &mut rng);
        let (ta, tb) = (BlockTomograms::simulate(&a, &scheme), BlockTomograms::simulate(&b, &scheme));
        let mix = reconstruct_block(&ta.combine(0.3, &tb, 1.7), &scheme, Default::default()).unwrap();
        let ra = reconstruct_block(&ta, &scheme, Default::default()).unwrap();
        let rb = reconstruct_block(&tb, &scheme, Default::default()).unwrap();
        let want = &ra.block.matrix * Complex64::from(0.3) + &rb.block.matrix * Complex64::from(1.7);
        assert!(max_abs(&(mix.block.matrix - want)) < 1e-10);
    }

    #[test]
    fn missing_nodes_are_a_coverage_error() {
        let spin = SpinIndex::new(2);
        let scheme = QuadratureScheme::for_spin(spin);
        let mut t = BlockTomograms::simulate(&maximally_mixed_block(spin, 1.0), &scheme);
        t.tomograms.pop();
        assert!(matches!(reconstruct_block(&t, &scheme, Default::default()), Err(Error::Coverage(_))));
    }

    #[test]
    fn kernel_elements_closed_forms() {
        let nodes = omega_nodes(16);
        let k = kernel_matrix_element(SpinIndex::new(1), 1, 1.0, &nodes).unwrap();
        assert!((k - Complex64::from(1.0 / TAU)).norm() < 1e-14);
        let k = kernel_matrix_element(SpinIndex::new(0), 0, 0.3, &nodes).unwrap();
        assert!((k - Complex64::from(1.0 / (4.0 * PI))).norm() < 1e-14);
        assert!(kernel_matrix_element(SpinIndex::new(1), 1, 1.5, &nodes).is_err());
    }

    #[test]
    fn kernel_elements_match_simpson_and_parity() {
        for two_j in [1u32, 2, 5, 8] {
            let spin = SpinIndex::new(two_j);
            let nodes = omega_nodes(2 * two_j as usize + 2);
            for two_m in spin.two_m_values() {
                for c in [-1.0, -0.4, 0.0, 0.65, 1.0] {
                    let k = kernel_matrix_element(spin, two_m, c, &nodes).unwrap();
                    assert!((k - simpson_kernel(two_j, two_m, c)).norm() < 1e-10);
                    // real, and conj K(m, c) = K(−m, −c)
                    assert!(k.im.abs() < 1e-13);
                    let mirrored = kernel_matrix_element(spin, -two_m, -c, &nodes).unwrap();
                    assert!((k.conj() - mirrored).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn characteristic_routes_agree() {
        let mut rng = substream_rng(14, 0);
        for two_j in 0..=8u32 {
            let spin = SpinIndex::new(two_j);
            let block = crate::states::random_pure_block(spin, 1.0, &mut rng);
            let dir = random_direction(&mut rng);
            assert!(characteristic_check(&block, &dir, two_j as usize + 1) < 1e-10);
        }
        let mixed = maximally_mixed_block(SpinIndex::new(4), 1.0);
        assert!(characteristic_check(&mixed, &Direction::new(1.0, 1.0).unwrap(), 5) < 1e-12);
    }

    #[test]
    fn characteristic_check_aliases_below_nyquist() {
        let mut rng = substream_rng(15, 0);
        let spin = SpinIndex::new(6);
        let block = random_density_block(spin, 1.0, &mut rng);
        let dir = random_direction(&mut rng);
        assert!(characteristic_check(&block, &dir, 7) < 1e-10);
        assert!(characteristic_check(&block, &dir, 4) > 1e-4);
    }

    #[test]
    fn q_function_of_coherent_and_mixed_blocks() {
        let spin = SpinIndex::new(5);
        let dir0 = Direction::new(1.1, 0.4).unwrap();
        let block = su2_coherent_block(spin, &dir0);
        let scheme = QuadratureScheme::for_spin(spin);
        let dirs = scheme.directions();
        let q = q_function(&block, &dirs);
        for (d, v) in &q.samples {
            let want = ((1.0 + d.dot(&dir0)) / 2.0).powi(5);
            assert!((v - want).abs() < 1e-10);
        }
        assert!((q_normalization(&q, &scheme.grid) - 1.0).abs() < 1e-6);

        let mixed = maximally_mixed_block(spin, 0.6);
        let q = q_function(&mixed, &dirs);
        assert!(q.samples.iter().all(|(_, v)| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn kernel_route_reproduces_q() {
        let mut rng = substream_rng(16, 0);
        let spin = SpinIndex::new(3);
        let scheme = QuadratureScheme::for_spin(spin);
        let block = random_density_block(spin, 1.0, &mut rng);
        let dirs: Vec<Direction> = (0..6).map(|_| random_direction(&mut rng)).collect();
        let direct = q_function(&block, &dirs);
        let via_kernel = q_from_tomograms(&BlockTomograms::simulate(&block, &scheme), &scheme, &dirs).unwrap();
        for ((_, a), (_, b)) in direct.samples.iter().zip(&via_kernel.samples) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn full_reconstruction_of_truncated_coherent_state() {
        let state = coherent_two_mode(Complex64::from(1.0), Complex64::from(0.0), 12).unwrap();
        let max = SpinIndex::new(state.max_two_j().unwrap());
        let scheme = QuadratureScheme::for_spin(max);
        let inputs: Vec<BlockTomograms> = state.blocks().iter().map(|b| BlockTomograms::simulate(b, &scheme)).collect();
        let rec = reconstruct_full(&inputs, &scheme, Default::default()).unwrap();
        assert!(state.fidelity(&rec.state) > 1.0 - 1e-6);
        assert!(rec.trace_deficit.abs() < 1e-8);

        let single = reconstruct_full(&inputs[2..3], &scheme, Default::default()).unwrap();
        let direct = reconstruct_block(&inputs[2], &scheme, Default::default()).unwrap();
        assert_eq!(single.state.blocks()[0].matrix, direct.block.matrix);

        let empty = reconstruct_full(&[], &scheme, Default::default()).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.state.total_trace(), 0.0);

        let dup = vec![inputs[1].clone(), inputs[1].clone()];
        assert!(matches!(reconstruct_full(&dup, &scheme, Default::default()), Err(Error::Input(_))));
    }

    #[test]
    fn scheme_validation() {
        let grid = AngleGrid::quarter_scan(4, 4).unwrap();
        assert!(QuadratureScheme::new(8, grid).is_err());
        let s = QuadratureScheme::for_spin(SpinIndex::new(5));
        assert!((s.grid.weights().iter().sum::<f64>() - 4.0 * PI).abs() < 1e-8);
        assert!((s.omega.iter().map(|(_, w)| w).sum::<f64>() - TAU).abs() < 1e-12);
    }
}
