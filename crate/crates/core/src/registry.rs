//! Name-keyed strategies: state preparers and reconstruction paths.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use num_complex::Complex64;

use crate::config::ReconstructionConfig;
use crate::error::{Error, Result};
use crate::exact::{reconstruct_full, BlockTomograms, FullReconstruction, QuadratureScheme, ReconstructOptions};
use crate::io::read_blocks;
use crate::measurement::{CalibrationUnits, Coverage, Tomogram, TomogramSet};
use crate::radon::{reconstruct_histograms, RadonReconstruction};
use crate::states::{
    circular_axis, coherent_two_mode, kerr_squeezed_gaussian, su2_coherent_block, GaussianStokesModel,
    KerrSqueezeParams, PolarizationState,
};
use crate::su2::{Direction, SpinIndex};

/// What a state preparer hands to the simulator.
#[derive(Clone, Debug)]
pub enum PreparedState {
    /// Block-diagonal density operator; simulated as per-subspace tomograms.
    Quantum(PolarizationState),
    /// Bright-beam Gaussian model; simulated as sideband histograms.
    Gaussian(GaussianStokesModel),
}

pub trait StatePreparer: Send + Sync {
    fn name(&self) -> &'static str;
    /// Builds the state from its `[state.params]` table; relative file
    /// paths resolve against `base_dir`.
    fn prepare(&self, params: &toml::Table, base_dir: &Path) -> Result<PreparedState>;
}

/// Output of a reconstruction path.
#[derive(Clone, Debug)]
pub enum Reconstruction {
    Blocks(FullReconstruction),
    Volume(RadonReconstruction),
}

pub trait Reconstructor: Send + Sync {
    fn name(&self) -> &'static str;
    /// Human-readable description of the tomogram files this path reads.
    fn required_format(&self) -> &'static str;
    /// Rejects input this path cannot read, naming the required format.
    fn check_input(&self, set: &TomogramSet) -> Result<()>;
    fn reconstruct(&self, set: &TomogramSet, config: &ReconstructionConfig) -> Result<Reconstruction>;
}

pub struct Registry {
    states: Vec<Box<dyn StatePreparer>>,
    reconstructors: Vec<Box<dyn Reconstructor>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            states: Vec::new(),
            reconstructors: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_state(Box::new(CoherentTwoMode));
        r.register_state(Box::new(Su2Coherent));
        r.register_state(Box::new(KerrSqueezedGaussian));
        r.register_state(Box::new(ExplicitBlocks));
        r.register_reconstructor(Box::new(ExactInversion));
        r.register_reconstructor(Box::new(RadonInversion));
        r
    }

    /// Later registrations replace earlier ones of the same name.
    pub fn register_state(&mut self, preparer: Box<dyn StatePreparer>) {
        self.states.retain(|s| s.name() != preparer.name());
        self.states.push(preparer);
    }

    pub fn register_reconstructor(&mut self, reconstructor: Box<dyn Reconstructor>) {
        self.reconstructors.retain(|s| s.name() != reconstructor.name());
        self.reconstructors.push(reconstructor);
    }

    pub fn state(&self, name: &str) -> Result<&dyn StatePreparer> {
        self.states.iter().find(|s| s.name() == name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::Config(format!("unknown state kind {name:?}; known: {}", self.state_names().join(", ")))
        })
    }

    pub fn reconstructor(&self, name: &str) -> Result<&dyn Reconstructor> {
        self.reconstructors.iter().find(|s| s.name() == name).map(|s| s.as_ref()).ok_or_else(|| {
            let names: Vec<_> = self.reconstructors.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown reconstruction path {name:?}; known: {}", names.join(", ")))
        })
    }

    pub fn state_names(&self) -> Vec<&'static str> {
        self.states.iter().map(|s| s.name()).collect()
    }
}

/// Typed access to a `[state.params]` table.
struct Params<'a> {
    kind: &'static str,
    table: &'a toml::Table,
}

impl<'a> Params<'a> {
    fn new(kind: &'static str, table: &'a toml::Table, allowed: &[&str]) -> Result<Self> {
        if let Some(k) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!("{kind}: unknown parameter {k:?} (expected {})", allowed.join(", "))));
        }
        Ok(Self { kind, table })
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        Error::Config(format!("{}: parameter {key} must be {what}", self.kind))
    }

    fn float_or(&self, key: &str, default: Option<f64>) -> Result<f64> {
        match self.table.get(key) {
            None => default.ok_or_else(|| Error::Config(format!("{}: missing parameter {key}", self.kind))),
            Some(toml::Value::Float(x)) => Ok(*x),
            Some(toml::Value::Integer(i)) => Ok(*i as f64),
            Some(_) => Err(self.bad(key, "a number")),
        }
    }

    fn float(&self, key: &str) -> Result<f64> {
        self.float_or(key, None)
    }

    fn uint_or(&self, key: &str, default: Option<u32>) -> Result<u32> {
        match self.table.get(key) {
            None => default.ok_or_else(|| Error::Config(format!("{}: missing parameter {key}", self.kind))),
            Some(toml::Value::Integer(i)) => u32::try_from(*i).map_err(|_| self.bad(key, "a non-negative integer")),
            Some(_) => Err(self.bad(key, "a non-negative integer")),
        }
    }

    /// A number, or `[re, im]`.
    fn complex(&self, key: &str) -> Result<Complex64> {
        match self.table.get(key) {
            Some(toml::Value::Array(parts)) if parts.len() == 2 => {
                let part = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
                match (part(&parts[0]), part(&parts[1])) {
                    (Some(re), Some(im)) => Ok(Complex64::new(re, im)),
                    _ => Err(self.bad(key, "a number or [re, im]")),
                }
            }
            Some(toml::Value::Array(_)) => Err(self.bad(key, "a number or [re, im]")),
            _ => Ok(Complex64::new(self.float_or(key, Some(0.0))?, 0.0)),
        }
    }

    fn direction(&self, theta_key: &str, phi_key: &str, default: Direction) -> Result<Direction> {
        let theta = self.float_or(theta_key, Some(default.theta()))?;
        let phi = self.float_or(phi_key, Some(default.phi()))?;
        Direction::new(theta, phi).map_err(|e| Error::Config(format!("{}: {e}", self.kind)))
    }

    fn string(&self, key: &str) -> Result<&'a str> {
        match self.table.get(key) {
            Some(toml::Value::String(s)) => Ok(s),
            None => Err(Error::Config(format!("{}: missing parameter {key}", self.kind))),
            Some(_) => Err(self.bad(key, "a string")),
        }
    }
}

/// Two-mode coherent state `|α_H⟩|α_V⟩` split into photon-number blocks.
/// Parameters: `alpha_h`, `alpha_v` (number or `[re, im]`), `two_j_cutoff`.
pub struct CoherentTwoMode;

impl StatePreparer for CoherentTwoMode {
    fn name(&self) -> &'static str {
        "coherent_two_mode"
    }

    fn prepare(&self, params: &toml::Table, _: &Path) -> Result<PreparedState> {
        let p = Params::new(self.name(), params, &["alpha_h", "alpha_v", "two_j_cutoff"])?;
        let state = coherent_two_mode(p.complex("alpha_h")?, p.complex("alpha_v")?, p.uint_or("two_j_cutoff", Some(40))?)?;
        Ok(PreparedState::Quantum(state))
    }
}

/// Single SU(2) coherent block. Parameters: `two_j`, `theta`, `phi`.
pub struct Su2Coherent;

impl StatePreparer for Su2Coherent {
    fn name(&self) -> &'static str {
        "su2_coherent"
    }

    fn prepare(&self, params: &toml::Table, _: &Path) -> Result<PreparedState> {
        let p = Params::new(self.name(), params, &["two_j", "theta", "phi"])?;
        let spin = SpinIndex::with_limit(p.uint_or("two_j", None)?, crate::su2::DEFAULT_MAX_TWO_J)?;
        let dir = Direction::new(p.float("theta")?, p.float("phi")?).map_err(|e| Error::Config(format!("su2_coherent: {e}")))?;
        Ok(PreparedState::Quantum(PolarizationState::single(su2_coherent_block(spin, &dir))?))
    }
}

/// Gaussian model of a Kerr-squeezed bright beam. Parameters:
/// `mean_photons`, `squeeze_db`, `antisqueeze_db`, `excess_noise_db` (0),
/// `squeeze_theta`/`squeeze_phi` (the `J₁` axis), `mean_theta`/`mean_phi`
/// (the `J₂` axis).
pub struct KerrSqueezedGaussian;

impl StatePreparer for KerrSqueezedGaussian {
    fn name(&self) -> &'static str {
        "kerr_squeezed_gaussian"
    }

    fn prepare(&self, params: &toml::Table, _: &Path) -> Result<PreparedState> {
        let p = Params::new(
            self.name(),
            params,
            &[
                "mean_photons",
                "squeeze_db",
                "antisqueeze_db",
                "excess_noise_db",
                "squeeze_theta",
                "squeeze_phi",
                "mean_theta",
                "mean_phi",
            ],
        )?;
        let j1 = Direction::new(FRAC_PI_2, 0.0).expect("constant direction");
        let mut kerr = KerrSqueezeParams::new(
            p.float("mean_photons")?,
            p.float("squeeze_db")?,
            p.float("antisqueeze_db")?,
            p.direction("squeeze_theta", "squeeze_phi", j1)?,
            p.float_or("excess_noise_db", Some(0.0))?,
        );
        kerr.mean_axis = p.direction("mean_theta", "mean_phi", circular_axis())?;
        Ok(PreparedState::Gaussian(kerr_squeezed_gaussian(&kerr)?))
    }
}

/// Density blocks read from a blocks file. Parameter: `file`.
pub struct ExplicitBlocks;

impl StatePreparer for ExplicitBlocks {
    fn name(&self) -> &'static str {
        "explicit_blocks"
    }

    fn prepare(&self, params: &toml::Table, base_dir: &Path) -> Result<PreparedState> {
        let p = Params::new(self.name(), params, &["file"])?;
        let file = Path::new(p.string("file")?);
        let path = if file.is_absolute() { file.to_path_buf() } else { base_dir.join(file) };
        let (blocks, _, _) = read_blocks(&path)?;
        Ok(PreparedState::Quantum(PolarizationState::new(blocks)?))
    }
}

/// Kernel inversion of per-subspace tomograms.
pub struct ExactInversion;

impl Reconstructor for ExactInversion {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn required_format(&self) -> &'static str {
        "discrete per-subspace tomograms (D records, photon_number units, full_sphere coverage)"
    }

    fn check_input(&self, set: &TomogramSet) -> Result<()> {
        let per_subspace = set
            .records
            .iter()
            .all(|r| matches!(&r.tomogram, Tomogram::Discrete(t) if t.spin.is_some()));
        if set.records.is_empty() || !per_subspace {
            return Err(Error::Input(format!("the exact path needs {}", self.required_format())));
        }
        if set.meta.units != CalibrationUnits::PhotonNumber {
            return Err(Error::Input(format!(
                "tomograms are in {} units; the exact path needs {}",
                set.meta.units.as_str(),
                self.required_format()
            )));
        }
        if set.grid.coverage != Coverage::FullSphere {
            return Err(Error::Coverage("exact inversion needs full-sphere tomograms; run symmetrize first".into()));
        }
        Ok(())
    }

    fn reconstruct(&self, set: &TomogramSet, config: &ReconstructionConfig) -> Result<Reconstruction> {
        self.check_input(set)?;
        let blocks = BlockTomograms::from_set(set)?;
        let max_two_j = blocks.iter().map(|b| b.spin.two_j()).max().unwrap_or(0) as usize;
        let n_omega = config.n_omega.unwrap_or(2 * (max_two_j + 1));
        let scheme = QuadratureScheme::new(n_omega, set.grid.clone())?;
        let options = ReconstructOptions {
            clip_negative: config.clip_negative,
        };
        Ok(Reconstruction::Blocks(reconstruct_full(&blocks, &scheme, options)?))
    }
}

/// Filtered backprojection of sideband histograms.
pub struct RadonInversion;

impl Reconstructor for RadonInversion {
    fn name(&self) -> &'static str {
        "radon"
    }

    fn required_format(&self) -> &'static str {
        "histogram tomograms (H records, shot_noise units, full_sphere coverage)"
    }

    fn check_input(&self, set: &TomogramSet) -> Result<()> {
        if set.records.is_empty() || !set.is_histogram_set() {
            return Err(Error::Input(format!("the radon path needs {}", self.required_format())));
        }
        if set.meta.units != CalibrationUnits::ShotNoise {
            return Err(Error::Input(format!(
                "tomograms are in {} units; the radon path needs {}",
                set.meta.units.as_str(),
                self.required_format()
            )));
        }
        if set.grid.coverage != Coverage::FullSphere {
            return Err(Error::Coverage("backprojection needs full-sphere tomograms; run symmetrize first".into()));
        }
        Ok(())
    }

    fn reconstruct(&self, set: &TomogramSet, config: &ReconstructionConfig) -> Result<Reconstruction> {
        self.check_input(set)?;
        Ok(Reconstruction::Volume(reconstruct_histograms(set, &config.radon_options()?)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{simulate_exact_scan, simulate_sideband_scan, AngleGrid};

    fn table(text: &str) -> toml::Table {
        text.parse().unwrap()
    }

    #[test]
    fn builtin_names_resolve() {
        let r = Registry::builtin();
        for name in ["coherent_two_mode", "su2_coherent", "kerr_squeezed_gaussian", "explicit_blocks"] {
            assert_eq!(r.state(name).unwrap().name(), name);
        }
        assert_eq!(r.reconstructor("exact").unwrap().name(), "exact");
        assert_eq!(r.reconstructor("radon").unwrap().name(), "radon");
        assert_eq!(r.state("thermal").err().unwrap().exit_code(), 2);
        assert!(r.reconstructor("ml").is_err());
    }

    #[test]
    fn preparers_parse_their_parameters() {
        let r = Registry::builtin();
        let here = Path::new("");
        let s = r.state("su2_coherent").unwrap().prepare(&table("two_j = 3\ntheta = 0.4\nphi = 1"), here).unwrap();
        assert!(matches!(s, PreparedState::Quantum(ref st) if st.blocks().len() == 1));
        let c = r
            .state("coherent_two_mode")
            .unwrap()
            .prepare(&table("alpha_h = [0.8, 0.1]\nalpha_v = 0.3"), here)
            .unwrap();
        assert!(matches!(c, PreparedState::Quantum(ref st) if (st.total_trace() - 1.0).abs() < 1e-10));
        let g = r
            .state("kerr_squeezed_gaussian")
            .unwrap()
            .prepare(&table("mean_photons = 1e11\nsqueeze_db = 6.2\nantisqueeze_db = 5.0"), here)
            .unwrap();
        let PreparedState::Gaussian(model) = g else { panic!() };
        assert!((model.mean.norm() - 5e10).abs() < 1.0);
        assert!((model.covariance[(0, 0)] - 10f64.powf(-0.62)).abs() < 1e-12);

        let unknown = r.state("su2_coherent").unwrap().prepare(&table("two_j = 3\ntheta = 0\nphi = 0\nspin = 2"), here);
        assert_eq!(unknown.unwrap_err().exit_code(), 2);
        let missing = r.state("kerr_squeezed_gaussian").unwrap().prepare(&table("squeeze_db = 1"), here);
        assert_eq!(missing.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn paths_refuse_the_other_format() {
        let r = Registry::builtin();
        let state = PolarizationState::single(su2_coherent_block(SpinIndex::new(2), &circular_axis())).unwrap();
        let discrete = simulate_exact_scan(&state, &AngleGrid::gauss_legendre(4, 10).unwrap());
        let model = GaussianStokesModel::coherent(1e6, &circular_axis()).unwrap();
        let hist = simulate_sideband_scan(&model, &AngleGrid::gauss_legendre(3, 4).unwrap(), 100, 16, 1).unwrap();

        let err = r.reconstructor("radon").unwrap().check_input(&discrete).unwrap_err();
        assert!(err.to_string().contains("histogram tomograms"), "{err}");
        let err = r.reconstructor("exact").unwrap().check_input(&hist).unwrap_err();
        assert!(err.to_string().contains("discrete per-subspace"), "{err}");

        let mut relabeled = discrete.clone();
        relabeled.meta.units = CalibrationUnits::ShotNoise;
        let err = r.reconstructor("exact").unwrap().check_input(&relabeled).unwrap_err();
        assert!(err.to_string().contains("shot_noise units"), "{err}");

        let Reconstruction::Blocks(full) = r
            .reconstructor("exact")
            .unwrap()
            .reconstruct(&discrete, &ReconstructionConfig::default())
            .unwrap()
        else {
            panic!()
        };
        let diff = &full.state.blocks()[0].matrix - &state.blocks()[0].matrix;
        assert!(diff.norm() < 1e-10);
    }
}
