//! Executable acceptance checks: fixed fixtures, pinned tolerances, one
//! pass/fail line each.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::exact::{characteristic_check, q_function, q_normalization, reconstruct_block, BlockTomograms, QuadratureScheme, ReconstructOptions};
use crate::measurement::{povm_element, substream_rng, AngleGrid};
use crate::pipeline::{run_pipeline, AnalysisOutcome, TIMING_FILE};
use crate::radon::{
    isocontour_level_stats, reconstruct_with, volume_moments, GaussianPhantom, GridSpec, Prefactor, RadonOptions,
    RadonReconstruction,
};
use crate::registry::Registry;
use crate::states::{random_density_block, random_pure_block, su2_coherent_block, variance_to_db};
use crate::su2::{max_abs, CMatrix, Direction, SpinIndex, SpinOperators};

pub const ALGEBRA_TOL: f64 = 1e-10;
pub const ROUNDTRIP_TOL: f64 = 1e-8;
pub const CHARACTERISTIC_TOL: f64 = 1e-10;
/// Smallest residual that counts as visible aliasing below `2J+1` nodes.
pub const ALIASING_FLOOR: f64 = 1e-6;
pub const Q_POINTWISE_TOL: f64 = 1e-10;
pub const Q_NORMALIZATION_TOL: f64 = 1e-6;
pub const PHANTOM_VARIANCE_TOL: f64 = 0.05;
pub const PHANTOM_AXIS_TOL_DEG: f64 = 2.0;
pub const SQUEEZING_TOL_DB: f64 = 0.3;
pub const HWHM_RATIO_TOL: f64 = 0.05;

/// Squeezing the end-to-end fixture is configured with, in dB.
pub const CONFIGURED_SQUEEZING_DB: f64 = 6.2;

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}. {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

/// `(id, name, runtime limit in seconds, check)`.
const CRITERIA: [(u32, &str, Option<f64>, Check); 9] = [
    (1, "algebra suite", Some(10.0), algebra_suite),
    (2, "exact-inversion roundtrip", Some(120.0), exact_roundtrip),
    (3, "characteristic-function equivalence", None, characteristic_equivalence),
    (4, "Q-function checks", None, q_function_checks),
    (5, "radon phantom accuracy", Some(300.0), radon_phantom),
    (6, "sampled end-to-end squeezing", Some(600.0), sampled_end_to_end),
    (7, "HWHM comparison", None, hwhm_comparison),
    (8, "convergence ladder", None, convergence_ladder),
    (9, "determinism", None, determinism),
];

pub fn criterion_ids() -> Vec<u32> {
    CRITERIA.iter().map(|c| c.0).collect()
}

/// Runs one criterion; errors count as failures.
pub fn run_criterion(id: u32) -> Result<CriterionResult> {
    let &(id, name, limit, check) = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .ok_or_else(|| Error::Config(format!("no acceptance criterion {id}")))?;
    let start = Instant::now();
    let outcome = check();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(limit) = limit {
        if seconds > limit {
            passed = false;
            detail.push_str(&format!("; runtime over the {limit} s budget"));
        }
    }
    Ok(CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds,
    })
}

/// Runs the selected criteria (all when `ids` is empty), calling `report`
/// after each.
pub fn run_all(ids: &[u32], mut report: impl FnMut(&CriterionResult)) -> Result<Vec<CriterionResult>> {
    let ids = if ids.is_empty() { criterion_ids() } else { ids.to_vec() };
    let mut results = Vec::with_capacity(ids.len());
    for id in ids {
        let r = run_criterion(id)?;
        report(&r);
        results.push(r);
    }
    Ok(results)
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    Direction::new(z.acos(), phi).expect("sampled angles are in range")
}

fn algebra_suite() -> Result<(bool, String)> {
    let mut rng = substream_rng(101, 0);
    let mut worst = 0.0f64;
    let i = Complex64::i();
    for two_j in 1..=20 {
        let spin = SpinIndex::new(two_j);
        let ops = SpinOperators::new(spin);
        let g = ops.generators();
        let dim = spin.dim();
        let eye = CMatrix::identity(dim, dim);
        let comm = |a: &CMatrix, b: &CMatrix| a * b - b * a;
        for (a, b, c) in [(&g.j1, &g.j2, &g.j3), (&g.j2, &g.j3, &g.j1), (&g.j3, &g.j1, &g.j2)] {
            worst = worst.max(max_abs(&(comm(a, b) - c * i)));
        }
        let j = spin.j();
        let casimir = &g.j1 * &g.j1 + &g.j2 * &g.j2 + &g.j3 * &g.j3;
        worst = worst.max(max_abs(&(casimir - &eye * Complex64::from(j * (j + 1.0)))));
        for _ in 0..5 {
            let dir = random_direction(&mut rng);
            let u = ops.rotation(&dir);
            worst = worst.max(max_abs(&(u.adjoint() * &u - &eye)));
            let mut total = CMatrix::zeros(dim, dim);
            for two_m in spin.two_m_values() {
                total += povm_element(&ops, two_m, &dir)?;
            }
            worst = worst.max(max_abs(&(total - &eye)));
        }
    }
    Ok((worst < ALGEBRA_TOL, format!("max deviation {worst:.2e} over 2J = 1..20 (tolerance {ALGEBRA_TOL:e})")))
}

fn exact_roundtrip() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for two_j in 1..=12u32 {
        let spin = SpinIndex::new(two_j);
        let scheme = QuadratureScheme::for_spin(spin);
        let mut rng = substream_rng(202, u64::from(two_j));
        for _ in 0..50 {
            let block = random_density_block(spin, 1.0, &mut rng);
            let tomograms = BlockTomograms::simulate(&block, &scheme);
            let rec = reconstruct_block(&tomograms, &scheme, ReconstructOptions::default())?;
            worst = worst.max((&rec.block.matrix - &block.matrix).norm());
        }
    }
    Ok((
        worst < ROUNDTRIP_TOL,
        format!("worst Frobenius error {worst:.2e} over 600 blocks (tolerance {ROUNDTRIP_TOL:e})"),
    ))
}

fn characteristic_equivalence() -> Result<(bool, String)> {
    let mut rng = substream_rng(303, 0);
    let mut worst_sufficient = 0.0f64;
    let mut least_aliased = f64::INFINITY;
    for two_j in 1..=8u32 {
        let spin = SpinIndex::new(two_j);
        for _ in 0..5 {
            let block = random_density_block(spin, 1.0, &mut rng);
            let dir = random_direction(&mut rng);
            for extra in 0..3 {
                worst_sufficient = worst_sufficient.max(characteristic_check(&block, &dir, two_j as usize + 1 + extra));
            }
            least_aliased = least_aliased.min(characteristic_check(&block, &dir, two_j as usize));
        }
    }
    let passed = worst_sufficient < CHARACTERISTIC_TOL && least_aliased > ALIASING_FLOOR;
    Ok((
        passed,
        format!(
            "residual {worst_sufficient:.2e} with ≥ 2J+1 nodes (tolerance {CHARACTERISTIC_TOL:e}); \
             with 2J nodes the smallest residual is {least_aliased:.2e} (aliasing expected above {ALIASING_FLOOR:e})"
        ),
    ))
}

fn q_function_checks() -> Result<(bool, String)> {
    let mut rng = substream_rng(404, 0);
    let mut pointwise = 0.0f64;
    let mut normalization = 0.0f64;
    for two_j in 1..=12u32 {
        let spin = SpinIndex::new(two_j);
        let center = random_direction(&mut rng);
        let block = su2_coherent_block(spin, &center);
        let probes: Vec<Direction> = (0..50).map(|_| random_direction(&mut rng)).collect();
        for (d, q) in q_function(&block, &probes).samples {
            let want = ((1.0 + d.dot(&center)) / 2.0).powi(two_j as i32);
            pointwise = pointwise.max((q - want).abs());
        }
        let scheme = QuadratureScheme::for_spin(spin);
        let q = q_function(&block, &scheme.directions());
        normalization = normalization.max((q_normalization(&q, &scheme.grid) - 1.0).abs());

        let mixed = random_pure_block(spin, 1.0, &mut rng);
        let q = q_function(&mixed, &scheme.directions());
        normalization = normalization.max((q_normalization(&q, &scheme.grid) - 1.0).abs());
    }
    Ok((
        pointwise < Q_POINTWISE_TOL && normalization < Q_NORMALIZATION_TOL,
        format!(
            "pointwise error {pointwise:.2e} (tolerance {Q_POINTWISE_TOL:e}); normalization error {normalization:.2e} (tolerance {Q_NORMALIZATION_TOL:e})"
        ),
    ))
}

/// Noise-free phantom reconstruction on a `(n_phi + 1) × n_phi` direction grid.
fn phantom_reconstruction(
    phantom: &GaussianPhantom,
    n_phi: usize,
    grid: GridSpec,
    step: f64,
) -> Result<RadonReconstruction> {
    let directions = AngleGrid::gauss_legendre(n_phi + 1, n_phi)?;
    let dirs = directions.directions();
    let reach = grid.extent.iter().fold(0.0f64, |a, &b| a.max(b)) * 3f64.sqrt() + 1.0;
    let options = RadonOptions {
        smoothing_width: 0.0,
        grid,
        prefactor: Prefactor::Analytic,
    };
    reconstruct_with(&directions, |i| Ok(phantom.marginal(&dirs[i], step, reach)), &options)
}

/// Covariance of the anisotropic phantom, mimicking 6.2 dB squeezing with
/// excess antisqueezing.
fn squeezed_phantom_covariance() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(0.24, 4.2, 1.0))
}

fn radon_phantom() -> Result<(bool, String)> {
    let covariance = squeezed_phantom_covariance();
    let phantom = GaussianPhantom::new(Vector3::zeros(), covariance)?;
    // ±10 keeps the 2.05σ axis inside the box; ±6 cuts off 3% of its variance
    let rec = phantom_reconstruction(&phantom, 64, GridSpec::cube(201, 10.0), 0.02)?;
    let moments = volume_moments(&rec.volume)?;
    let (variances, axes) = moments.principal_axes(rec.blur_variance());
    let expected = [(0.24, Vector3::x()), (1.0, Vector3::z()), (4.2, Vector3::y())];
    let mut worst_variance = 0.0f64;
    let mut worst_angle = 0.0f64;
    for ((v, a), (want, axis)) in variances.iter().zip(&axes).zip(&expected) {
        worst_variance = worst_variance.max((v / want - 1.0).abs());
        worst_angle = worst_angle.max(a.dot(axis).abs().min(1.0).acos().to_degrees());
    }
    Ok((
        worst_variance < PHANTOM_VARIANCE_TOL && worst_angle < PHANTOM_AXIS_TOL_DEG,
        format!(
            "principal variances {:.4}/{:.4}/{:.4} vs 0.24/1/4.2, worst relative error {:.2}% (tolerance 5%), worst axis error {worst_angle:.3}° (tolerance 2°)",
            variances[0],
            variances[1],
            variances[2],
            worst_variance * 100.0
        ),
    ))
}

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.subsec_nanos());
    std::env::temp_dir().join(format!("polartomo-selftest-{tag}-{}-{nanos}", std::process::id()))
}

/// Config text of the sampled squeezing fixture: 33 × 32 quarter scan with
/// 10⁵ samples per setting.
pub fn squeezing_fixture_config(seed: u64) -> String {
    format!(
        r#"[state]
kind = "kerr_squeezed_gaussian"

[state.params]
mean_photons = 1e11
squeeze_db = {CONFIGURED_SQUEEZING_DB}
antisqueeze_db = 5.0
excess_noise_db = 1.23

[scan]
n_theta = 33
n_phi = 32
layout = "quarter"
samples = 100000
bins = 2048
seed = {seed}
reflection = "mirror_j2"

[reconstruction]
path = "radon"
smoothing_width = 0.2
prefactor = "calibrated"
"#
    )
}

fn sampled_end_to_end() -> Result<(bool, String)> {
    let config = PipelineConfig::from_toml(&squeezing_fixture_config(1), &[], Path::new(""))?;
    let dir = scratch_dir("squeezing");
    let outcome = run_pipeline(&config, &Registry::builtin(), &dir);
    let _ = fs::remove_dir_all(&dir);
    let AnalysisOutcome::Volume(analysis) = outcome?.analysis else {
        return Err(Error::Diagnostic("the radon pipeline produced no volume".into()));
    };
    let db = analysis.squeezing_db();
    Ok((
        (db - CONFIGURED_SQUEEZING_DB).abs() <= SQUEEZING_TOL_DB,
        format!("recovered {db:.3} dB vs configured {CONFIGURED_SQUEEZING_DB} dB (tolerance ±{SQUEEZING_TOL_DB} dB)"),
    ))
}

fn hwhm_comparison() -> Result<(bool, String)> {
    let squeezed_variance = 10f64.powf(-CONFIGURED_SQUEEZING_DB / 10.0);
    let grid = GridSpec::cube(121, 3.0);
    let half_width = |covariance: Matrix3<f64>| -> Result<f64> {
        let phantom = GaussianPhantom::new(Vector3::zeros(), covariance)?;
        let rec = phantom_reconstruction(&phantom, 64, grid, 0.01)?;
        Ok(isocontour_level_stats(&rec.volume, 0.5)?.half_width_along(&Vector3::x()))
    };
    let coherent = half_width(Matrix3::identity())?;
    let squeezed = half_width(Matrix3::from_diagonal(&Vector3::new(squeezed_variance, 4.2, 1.0)))?;
    let ratio = squeezed / coherent;
    let want = 10f64.powf(-CONFIGURED_SQUEEZING_DB / 20.0);
    Ok((
        (ratio / want - 1.0).abs() < HWHM_RATIO_TOL,
        format!(
            "HWHM {squeezed:.4} / {coherent:.4} = {ratio:.4} along the squeezed axis vs {want:.4} (tolerance 5%), i.e. {:.2} dB",
            -2.0 * variance_to_db(ratio)
        ),
    ))
}

fn convergence_ladder() -> Result<(bool, String)> {
    let covariance = squeezed_phantom_covariance();
    let phantom = GaussianPhantom::new(Vector3::zeros(), covariance)?;
    let mut errors = Vec::new();
    for n_phi in [64, 128, 256] {
        let rec = phantom_reconstruction(&phantom, n_phi, GridSpec::cube(61, 12.0), 0.005)?;
        let moments = volume_moments(&rec.volume)?;
        let err = (moments.deconvolved_covariance(rec.blur_variance()) - covariance).norm() / covariance.norm();
        errors.push(err);
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    Ok((
        decreasing,
        format!(
            "relative covariance error {:.3e} → {:.3e} → {:.3e} at 64 → 128 → 256 azimuths ({})",
            errors[0],
            errors[1],
            errors[2],
            if decreasing { "strictly decreasing" } else { "not monotone" }
        ),
    ))
}

/// Config texts of the small determinism fixtures: a sampled quantum scan
/// through the exact path and a sideband scan through the radon path.
pub fn determinism_fixture_configs() -> [String; 2] {
    [
        r#"[state]
kind = "coherent_two_mode"
params = { alpha_h = [1.2, 0.3], alpha_v = [0.4, -0.5], two_j_cutoff = 30 }

[scan]
samples = 20000
seed = 77
"#
        .to_string(),
        r#"[state]
kind = "kerr_squeezed_gaussian"
params = { mean_photons = 1e9, squeeze_db = 4.0, antisqueeze_db = 6.0 }

[scan]
n_theta = 9
n_phi = 8
samples = 3000
bins = 128
seed = 78

[reconstruction]
smoothing_width = 0.3
voxels = 41
"#
        .to_string(),
    ]
}

/// Every file under `root` with its contents, sorted by relative path;
/// timing files are skipped.
pub fn collect_outputs(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != TIMING_FILE) {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push((path.strip_prefix(root).expect("under root").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<(bool, String)> {
    let registry = Registry::builtin();
    let mut compared = 0;
    for (k, text) in determinism_fixture_configs().iter().enumerate() {
        let config = PipelineConfig::from_toml(text, &[], Path::new(""))?;
        let mut runs = Vec::new();
        for threads in [1, 3] {
            let dir = scratch_dir(&format!("determinism-{k}-{threads}"));
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Diagnostic(format!("thread pool: {e}")))?;
            let run = pool.install(|| run_pipeline(&config, &registry, &dir)).and_then(|_| collect_outputs(&dir));
            let _ = fs::remove_dir_all(&dir);
            runs.push(run?);
        }
        if runs[0] != runs[1] {
            let differing: Vec<String> = runs[0]
                .iter()
                .zip(&runs[1])
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.0.display().to_string())
                .collect();
            return Ok((false, format!("fixture {k}: outputs differ between 1 and 3 threads: {}", differing.join(", "))));
        }
        compared += runs[0].len();
    }
    Ok((true, format!("{compared} output files byte-identical across 1- and 3-thread runs")))
}
