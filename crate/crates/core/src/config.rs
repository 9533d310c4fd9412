//! Pipeline configuration: a TOML file plus dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measurement::{AngleGrid, ReflectionRule};
use crate::radon::{GridSpec, Prefactor, RadonOptions, DEFAULT_EXTENT, DEFAULT_VOXELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub state: StateConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory that relative paths inside the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub kind: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanLayout {
    /// Gauss-Legendre polar angles, uniform azimuths over the full circle.
    Full,
    /// Gauss-Legendre polar angles, midpoint azimuths over the full circle.
    FullMidpoint,
    /// Gauss-Legendre polar angles, midpoint azimuths in `[0, π/2]`.
    Quarter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Omitted: sized from the state (`2J+2` for quantum states, 65 otherwise).
    pub n_theta: Option<usize>,
    /// Omitted: `4J+2` for quantum states, 64 otherwise.
    pub n_phi: Option<usize>,
    pub layout: Option<ScanLayout>,
    /// Detections per direction; 0 means noise-free tomograms.
    #[serde(default)]
    pub samples: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reflection")]
    pub reflection: String,
}

fn default_bins() -> usize {
    2048
}

fn default_seed() -> u64 {
    1
}

fn default_reflection() -> String {
    ReflectionRule::MirrorJ2.as_str().into()
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_theta: None,
            n_phi: None,
            layout: None,
            samples: 0,
            bins: default_bins(),
            seed: default_seed(),
            reflection: default_reflection(),
        }
    }
}

impl ScanConfig {
    pub fn reflection_rule(&self) -> Result<ReflectionRule> {
        ReflectionRule::parse(&self.reflection)
            .ok_or_else(|| Error::Config(format!("scan.reflection: unknown rule {:?}", self.reflection)))
    }

    /// The scan grid; `default_counts` and `default_layout` fill omitted keys.
    pub fn grid(&self, default_counts: (usize, usize), default_layout: ScanLayout) -> Result<AngleGrid> {
        let n_theta = self.n_theta.unwrap_or(default_counts.0);
        let n_phi = self.n_phi.unwrap_or(default_counts.1);
        let grid = match self.layout.unwrap_or(default_layout) {
            ScanLayout::Full => AngleGrid::gauss_legendre(n_theta, n_phi),
            ScanLayout::FullMidpoint => AngleGrid::gauss_legendre_midpoint(n_theta, n_phi),
            ScanLayout::Quarter => AngleGrid::quarter_scan(n_theta, n_phi),
        };
        grid.map_err(|e| Error::Config(format!("scan: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Exact,
    Radon,
}

impl PathKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Exact => "exact",
            PathKind::Radon => "radon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Omitted: exact for quantum states, radon for Gaussian models.
    pub path: Option<PathKind>,
    #[serde(default)]
    pub clip_negative: bool,
    #[serde(default)]
    pub smoothing_width: f64,
    #[serde(default = "default_voxels")]
    pub voxels: usize,
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// `analytic`, `calibrated`, or a number.
    #[serde(default = "default_prefactor")]
    pub prefactor: String,
    /// Omitted: `2(2J+1)` for the largest subspace.
    pub n_omega: Option<usize>,
}

fn default_voxels() -> usize {
    DEFAULT_VOXELS
}

fn default_extent() -> f64 {
    DEFAULT_EXTENT
}

fn default_prefactor() -> String {
    "calibrated".into()
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            path: None,
            clip_negative: false,
            smoothing_width: 0.0,
            voxels: default_voxels(),
            extent: default_extent(),
            prefactor: default_prefactor(),
            n_omega: None,
        }
    }
}

impl ReconstructionConfig {
    pub fn radon_options(&self) -> Result<RadonOptions> {
        let prefactor = Prefactor::parse(&self.prefactor)
            .ok_or_else(|| Error::Config(format!("reconstruction.prefactor: {:?} is not analytic, calibrated or a number", self.prefactor)))?;
        if !(self.smoothing_width >= 0.0) || !self.smoothing_width.is_finite() {
            return Err(Error::Config("reconstruction.smoothing_width must be ≥ 0".into()));
        }
        let grid = GridSpec::cube(self.voxels, self.extent);
        grid.validate().map_err(|e| Error::Config(format!("reconstruction: {e}")))?;
        Ok(RadonOptions {
            smoothing_width: self.smoothing_width,
            grid,
            prefactor,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_output_dir() }
    }
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys, values
    /// in TOML syntax or bare strings) and validates.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: PipelineConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.base_dir = base_dir.to_path_buf();
        config.scan.reflection_rule()?;
        config.reconstruction.radon_options()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, overrides, &base)
    }

    /// Canonical TOML: every key present, in a fixed order.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut current = table;
    for p in parents {
        let entry = current
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
