//! The simulate → symmetrize → reconstruct → analyze chain, each step
//! reading and writing files so it can run on its own.
//!
//! Every output except `timing.txt` is a deterministic function of the
//! config and its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use crate::config::{PathKind, PipelineConfig, ScanLayout};
use crate::error::{Error, Result};
use crate::exact::{q_function, q_normalization};
use crate::io::{
    encode_sphere_patch, encode_table, fmt_f64, read_blocks, read_tomogram_set, read_volume, write_atomic,
    write_blocks, write_tomogram_set, write_volume, FileMeta, VolumeMeta,
};
use crate::measurement::{
    simulate_exact_scan, simulate_sampled_scan, simulate_sideband_scan, symmetrize_tomograms, AngleGrid,
    Coverage, TomogramSet,
};
use crate::radon::{
    isocontour_level_stats, principal_axes, sphere_sum_distribution, sphere_sum_from_state, volume_moments,
    LevelSetStats, VolumeGrid, VolumeMoments,
};
use crate::registry::{PreparedState, Reconstruction, Registry};
use crate::states::{variance_to_db, DensityBlock, PolarizationState};

pub const TOMOGRAMS_DIR: &str = "tomograms";
pub const SYMMETRIZED_DIR: &str = "tomograms_full";
pub const RECONSTRUCTION_DIR: &str = "reconstruction";
pub const ANALYSIS_DIR: &str = "analysis";
pub const BLOCKS_FILE: &str = "blocks.txt";
pub const VOLUME_FILE: &str = "volume.bin";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";

/// Level fractions of the half-width table; 0.5 is the half maximum.
pub const HWHM_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];
const SPHERE_PATCH_BINS: usize = 64;
const Q_GRID: (usize, usize) = (32, 64);

fn key_values(format: &str, meta: &FileMeta, entries: &[(String, String)]) -> String {
    let mut s = format!("format={format}\nconfig_hash={}\n", meta.config_hash);
    if let Some(seed) = meta.seed {
        let _ = writeln!(s, "seed={seed}");
    }
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn vector_text(v: &Vector3<f64>) -> String {
    format!("{},{},{}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z))
}

fn matrix_text(m: &Matrix3<f64>) -> String {
    (0..3).map(|r| vector_text(&m.row(r).transpose())).collect::<Vec<_>>().join(";")
}

/// The state named in the config, built through the registry.
pub fn prepare_state(config: &PipelineConfig, registry: &Registry) -> Result<PreparedState> {
    registry
        .state(&config.state.kind)?
        .prepare(&config.state.params, &config.base_dir)
}

/// Scan grid for a prepared state: quantum states default to the exact
/// quadrature of their largest subspace on the full sphere, Gaussian models
/// to a 65 × 64 quarter-sphere scan.
pub fn scan_grid(config: &PipelineConfig, state: &PreparedState) -> Result<AngleGrid> {
    match state {
        PreparedState::Quantum(s) => {
            let two_j = s.max_two_j().unwrap_or(0) as usize;
            config.scan.grid((two_j + 2, 2 * two_j + 2), ScanLayout::Full)
        }
        PreparedState::Gaussian(_) => config.scan.grid((65, 64), ScanLayout::Quarter),
    }
}

/// Simulates the configured scan and writes it under `output/tomograms`.
pub fn cmd_simulate(config: &PipelineConfig, registry: &Registry, output: &Path) -> Result<(PathBuf, TomogramSet)> {
    let state = prepare_state(config, registry)?;
    let grid = scan_grid(config, &state)?;
    let scan = &config.scan;
    let mut set = match &state {
        PreparedState::Quantum(s) if scan.samples == 0 => simulate_exact_scan(s, &grid),
        PreparedState::Quantum(s) => simulate_sampled_scan(s, &grid, scan.samples, scan.seed)?,
        PreparedState::Gaussian(_) if scan.samples == 0 => {
            return Err(Error::Config("scan.samples must be positive for a Gaussian model".into()))
        }
        PreparedState::Gaussian(m) => simulate_sideband_scan(m, &grid, scan.samples, scan.bins, scan.seed)?,
    };
    set.meta.state = config.state.kind.clone();
    set.meta.seed = Some(scan.seed);
    set.meta.reflection = scan.reflection_rule()?;
    set.meta.config_hash = config.hash();
    if scan.samples > 0 {
        set.meta.extra.insert("samples".into(), scan.samples.to_string());
    }
    let dir = output.join(TOMOGRAMS_DIR);
    write_tomogram_set(&dir, &set)?;
    Ok((dir, set))
}

/// Completes a quarter-sphere set to the full sphere.
pub fn cmd_symmetrize(input: &Path, output: &Path) -> Result<TomogramSet> {
    let set = read_tomogram_set(input)?;
    let full = symmetrize_tomograms(&set)?;
    write_tomogram_set(output, &full)?;
    Ok(full)
}

pub struct ReconstructOutcome {
    pub reconstruction: Reconstruction,
    /// Frobenius distance to the configured quantum state, when there is one.
    pub frobenius_error: Option<f64>,
    pub output_file: PathBuf,
}

/// Frobenius norm of the blockwise difference; absent blocks count in full.
pub fn frobenius_distance(a: &PolarizationState, b: &PolarizationState) -> f64 {
    let mut sq = 0.0;
    for block in a.blocks() {
        sq += match b.block(block.spin) {
            Some(other) => (&block.matrix - &other.matrix).norm_squared(),
            None => block.matrix.norm_squared(),
        };
    }
    for block in b.blocks().iter().filter(|x| a.block(x.spin).is_none()) {
        sq += block.matrix.norm_squared();
    }
    sq.sqrt()
}

/// Reconstructs the tomograms in `input` into `output`.
///
/// The path comes from `reconstruction.path`, or from the input format when
/// unset; a mismatch between the two is refused.
pub fn cmd_reconstruct(config: &PipelineConfig, registry: &Registry, input: &Path, output: &Path) -> Result<ReconstructOutcome> {
    let set = read_tomogram_set(input)?;
    let path = match config.reconstruction.path {
        Some(p) => p,
        None if set.is_histogram_set() => PathKind::Radon,
        None => PathKind::Exact,
    };
    let reconstructor = registry.reconstructor(path.as_str())?;
    reconstructor.check_input(&set)?;
    let start = Instant::now();
    let reconstruction = reconstructor.reconstruct(&set, &config.reconstruction)?;
    let elapsed = start.elapsed().as_secs_f64();

    let meta = FileMeta {
        config_hash: set.meta.config_hash.clone(),
        seed: set.meta.seed,
    };
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut report = vec![
        ("path".to_string(), path.as_str().to_string()),
        ("input".to_string(), set.meta.state.clone()),
        ("directions".to_string(), set.grid.len().to_string()),
    ];
    let mut frobenius_error = None;
    let output_file = match &reconstruction {
        Reconstruction::Blocks(full) => {
            let blocks: Vec<DensityBlock> = full.blocks.iter().map(|b| b.block.clone()).collect();
            let residuals: Vec<f64> = full.blocks.iter().map(|b| b.hermitian_residual).collect();
            let file = output.join(BLOCKS_FILE);
            write_blocks(&file, &blocks, &residuals, &meta)?;
            report.push(("blocks".into(), blocks.len().to_string()));
            report.push(("trace_deficit".into(), fmt_f64(full.trace_deficit)));
            report.push(("empty".into(), full.empty.to_string()));
            let worst = residuals.iter().copied().fold(0.0, f64::max);
            report.push(("max_hermitian_residual".into(), fmt_f64(worst)));
            for b in &full.blocks {
                let two_j = b.block.spin.two_j();
                report.push((format!("block.{two_j}.weight"), fmt_f64(b.block.weight)));
                report.push((format!("block.{two_j}.hermitian_residual"), fmt_f64(b.hermitian_residual)));
                for (i, w) in b.warnings.iter().enumerate() {
                    report.push((format!("block.{two_j}.warning.{i}"), w.clone()));
                }
            }
            // A config naming a different state than the input is still
            // compared; the report records both names.
            if let Ok(PreparedState::Quantum(reference)) = prepare_state(config, registry) {
                let err = frobenius_distance(&reference, &full.state);
                report.push(("reference_state".into(), config.state.kind.clone()));
                report.push(("frobenius_error".into(), fmt_f64(err)));
                frobenius_error = Some(err);
            }
            file
        }
        Reconstruction::Volume(radon) => {
            let file = output.join(VOLUME_FILE);
            let vmeta = VolumeMeta {
                file: meta.clone(),
                classical_mean: set.meta.classical_mean,
                smoothing_width: radon.smoothing_width,
                blur_variance: radon.blur_variance(),
                prefactor: radon.prefactor,
                out_of_support_fraction: radon.out_of_support_fraction,
            };
            write_volume(&file, &radon.volume, &vmeta)?;
            report.push(("dims".into(), format!("{:?}", radon.volume.dims)));
            report.push(("out_of_support_fraction".into(), fmt_f64(radon.out_of_support_fraction)));
            report.push(("prefactor".into(), fmt_f64(radon.prefactor)));
            report.push(("smoothing_width".into(), fmt_f64(radon.smoothing_width)));
            report.push(("blur_variance".into(), fmt_f64(radon.blur_variance())));
            file
        }
    };
    write_atomic(&output.join(REPORT_FILE), key_values("polartomo-report", &meta, &report).as_bytes())?;
    let timing = vec![("reconstruct_seconds".to_string(), format!("{elapsed:.3}"))];
    write_atomic(&output.join(TIMING_FILE), key_values("polartomo-timing", &meta, &timing).as_bytes())?;
    Ok(ReconstructOutcome {
        reconstruction,
        frobenius_error,
        output_file,
    })
}

/// Numbers extracted from a volume.
#[derive(Clone, Debug)]
pub struct VolumeAnalysis {
    pub moments: VolumeMoments,
    pub blur_variance: f64,
    /// Deconvolved principal variances, ascending, and their axes.
    pub principal_variances: [f64; 3],
    pub principal_axes: [Vector3<f64>; 3],
    pub levels: Vec<LevelSetStats>,
}

impl VolumeAnalysis {
    /// Noise reduction of the narrowest principal axis, in dB below shot noise.
    pub fn squeezing_db(&self) -> f64 {
        -variance_to_db(self.principal_variances[0])
    }

    pub fn antisqueezing_db(&self) -> f64 {
        variance_to_db(self.principal_variances[2])
    }
}

pub enum AnalysisOutcome {
    Volume(VolumeAnalysis),
    Blocks { blocks: usize },
}

/// Analyzes `input`: a volume file, a blocks file, or a reconstruction
/// directory holding one of them.
pub fn cmd_analyze(input: &Path, output: &Path) -> Result<AnalysisOutcome> {
    let file = if input.is_dir() {
        [VOLUME_FILE, BLOCKS_FILE]
            .iter()
            .map(|f| input.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::format(input, 0, format!("no {VOLUME_FILE} or {BLOCKS_FILE} in directory")))?
    } else {
        input.to_path_buf()
    };
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    if file.extension().is_some_and(|e| e == "bin") {
        let (volume, meta) = read_volume(&file)?;
        analyze_volume(&volume, &meta, output).map(AnalysisOutcome::Volume)
    } else {
        let (blocks, _, meta) = read_blocks(&file)?;
        let count = blocks.len();
        analyze_blocks(blocks, &meta, output)?;
        Ok(AnalysisOutcome::Blocks { blocks: count })
    }
}

fn analyze_volume(volume: &VolumeGrid, meta: &VolumeMeta, output: &Path) -> Result<VolumeAnalysis> {
    let moments = volume_moments(volume)?;
    let deconvolved = moments.deconvolved_covariance(meta.blur_variance);
    let (variances, axes) = principal_axes(&deconvolved);
    let levels = HWHM_LEVELS
        .iter()
        .map(|&l| isocontour_level_stats(volume, l))
        .collect::<Result<Vec<_>>>()?;
    let analysis = VolumeAnalysis {
        moments,
        blur_variance: meta.blur_variance,
        principal_variances: variances,
        principal_axes: axes,
        levels,
    };
    let m = &analysis.moments;
    let mut entries = vec![
        ("mass".to_string(), fmt_f64(m.mass)),
        ("mean".into(), vector_text(&m.mean)),
        ("covariance".into(), matrix_text(&m.covariance)),
        ("blur_variance".into(), fmt_f64(meta.blur_variance)),
        ("deconvolved_covariance".into(), matrix_text(&deconvolved)),
        ("negative_fraction".into(), fmt_f64(m.negative_fraction)),
        ("out_of_support_fraction".into(), fmt_f64(meta.out_of_support_fraction)),
    ];
    for (i, (v, a)) in variances.iter().zip(&axes).enumerate() {
        entries.push((format!("principal.{i}.variance"), fmt_f64(*v)));
        entries.push((format!("principal.{i}.axis"), vector_text(a)));
    }
    entries.push(("squeezing_db".into(), fmt_f64(analysis.squeezing_db())));
    entries.push(("antisqueezing_db".into(), fmt_f64(analysis.antisqueezing_db())));
    write_atomic(&output.join("moments.txt"), key_values("polartomo-moments", &meta.file, &entries).as_bytes())?;

    let rows: Vec<Vec<f64>> = analysis
        .levels
        .iter()
        .flat_map(|s| {
            (0..3).map(move |i| {
                let a = s.axes[i];
                vec![s.level, i as f64, s.half_widths[i], a.x, a.y, a.z, s.voxel_count as f64]
            })
        })
        .collect();
    let table = encode_table(
        "polartomo-hwhm",
        &meta.file,
        &[],
        &["level_fraction", "axis_index", "half_width", "axis_x", "axis_y", "axis_z", "voxels"],
        &rows,
    );
    write_atomic(&output.join("hwhm.txt"), table.as_bytes())?;

    for (axis, name) in [(2, "slice_j1_j2.txt"), (1, "slice_j1_j3.txt"), (0, "slice_j2_j3.txt")] {
        let center = volume.dims[axis] / 2;
        let slice = volume.slice(axis, center)?;
        let position = volume.origin[axis] + center as f64 * volume.spacing[axis];
        let table = encode_table(
            "polartomo-slice",
            &meta.file,
            &[("normal_axis", axis.to_string()), ("normal_position", fmt_f64(position))],
            &[],
            &slice,
        );
        write_atomic(&output.join(name), table.as_bytes())?;
    }

    if let Some(mean) = meta.classical_mean.filter(|m| m.norm() > 0.0) {
        let reach = (0..3)
            .map(|a| (volume.origin[a].abs()).max((volume.origin[a] + (volume.dims[a] - 1) as f64 * volume.spacing[a]).abs()))
            .fold(0.0, f64::max);
        // fluctuation radius r maps to an angle of about r/sqrt(2|μ|)
        let half_range = reach / (2.0 * mean.norm()).sqrt();
        let patch = sphere_sum_distribution(volume, &mean, half_range, SPHERE_PATCH_BINS)?;
        write_atomic(&output.join("sphere_patch.txt"), encode_sphere_patch(&patch, &meta.file).as_bytes())?;
    }
    Ok(analysis)
}

fn analyze_blocks(blocks: Vec<DensityBlock>, meta: &FileMeta, output: &Path) -> Result<()> {
    let state = PolarizationState::from_blocks(blocks)?;
    let grid = AngleGrid::gauss_legendre(Q_GRID.0, Q_GRID.1)?;
    let dirs = grid.directions();
    let summary: Vec<Vec<f64>> = state
        .blocks()
        .iter()
        .map(|b| {
            let q = q_function(b, &dirs);
            vec![
                f64::from(b.spin.two_j()),
                b.weight,
                b.purity(),
                b.min_eigenvalue(),
                q.min(),
                q_normalization(&q, &grid),
            ]
        })
        .collect();
    let table = encode_table(
        "polartomo-block-summary",
        meta,
        &[("total_trace", fmt_f64(state.total_trace()))],
        &["two_j", "weight", "purity", "min_eigenvalue", "q_min", "q_integral"],
        &summary,
    );
    write_atomic(&output.join("block_summary.txt"), table.as_bytes())?;

    let mut rows = Vec::new();
    for b in state.blocks() {
        for (d, q) in q_function(b, &dirs).samples {
            rows.push(vec![f64::from(b.spin.two_j()), d.theta(), d.phi(), q]);
        }
    }
    let table = encode_table("polartomo-q-function", meta, &[], &["two_j", "theta", "phi", "q"], &rows);
    write_atomic(&output.join("q_function.txt"), table.as_bytes())?;

    let sum = sphere_sum_from_state(&state, &dirs);
    let rows: Vec<Vec<f64>> = sum.samples.iter().map(|(d, v)| vec![d.theta(), d.phi(), *v]).collect();
    let table = encode_table(
        "polartomo-sphere-sum",
        meta,
        &[("integral", fmt_f64(sum.integrate(&grid.weights())))],
        &["theta", "phi", "density"],
        &rows,
    );
    write_atomic(&output.join("sphere_sum.txt"), table.as_bytes())
}

/// Directories written by [`run_pipeline`].
pub struct PipelineOutputs {
    pub tomograms: PathBuf,
    pub reconstruction: ReconstructOutcome,
    pub analysis: AnalysisOutcome,
}

/// All four steps under `output`, symmetrizing when the scan covers a
/// quarter sphere.
pub fn run_pipeline(config: &PipelineConfig, registry: &Registry, output: &Path) -> Result<PipelineOutputs> {
    let (mut tomograms, set) = cmd_simulate(config, registry, output)?;
    if set.grid.coverage == Coverage::QuarterSphere {
        let full = output.join(SYMMETRIZED_DIR);
        cmd_symmetrize(&tomograms, &full)?;
        tomograms = full;
    }
    let reconstruction = cmd_reconstruct(config, registry, &tomograms, &output.join(RECONSTRUCTION_DIR))?;
    let analysis = cmd_analyze(&reconstruction.output_file, &output.join(ANALYSIS_DIR))?;
    Ok(PipelineOutputs {
        tomograms,
        reconstruction,
        analysis,
    })
}
