//! On-disk formats.
//!
//! Tomogram sets are a directory holding `manifest.txt` (one `key=value` per
//! line) and `records.txt` (a `# key=value` provenance header, then one
//! tab-separated record per line). Volumes are a
//! little-endian binary file. Density blocks, sphere functions and analysis
//! tables are text with `# key=value` headers. Floats are written in their
//! shortest round-trip form, so write → read → write is byte-identical.
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::measurement::{
    AngleGrid, CalibrationUnits, Coverage, DiscreteTomogram, HistogramTomogram, ReflectionRule, ScanMetadata,
    Tomogram, TomogramRecord, TomogramSet,
};
use crate::radon::{SpherePatch, VolumeGrid};
use crate::states::DensityBlock;
use crate::su2::{CMatrix, Direction, SpinIndex};

pub const TOMOGRAM_FORMAT: &str = "polartomo-tomograms";
pub const BLOCKS_FORMAT: &str = "polartomo-blocks";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RECORDS_FILE: &str = "records.txt";
pub const VOLUME_MAGIC: &[u8; 8] = b"PTVOLUME";

/// Shortest round-trip text for a float; exponent form outside `[1e-5, 1e16)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_vector(v: &Vector3<f64>) -> String {
    fmt_list(&[v.x, v.y, v.z])
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, 0, "file not found")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to(), "invalid UTF-8"))
}

/// Non-empty lines with the byte offset where each starts.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        (!line.is_empty()).then_some((start, line))
    })
}

/// Ordered `key=value` pairs with the offset of each line.
struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
    end: usize,
}

impl KeyValues {
    fn parse(path: &Path, text: &str, prefix: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (offset, line) in lines_with_offsets(text) {
            let Some(body) = line.strip_prefix(prefix) else {
                continue;
            };
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::format(path, offset, format!("expected key=value, got {line:?}")))?;
            if entries.insert(k.trim().to_string(), (offset, v.to_string())).is_some() {
                return Err(Error::format(path, offset, format!("duplicate key {k:?}")));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
            end: text.len(),
        })
    }

    fn raw(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(o, v)| (*o, v.as_str()))
            .ok_or_else(|| Error::format(&self.path, self.end, format!("missing key {key:?}")))
    }

    fn optional(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(o, v)| (*o, v.as_str()))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (offset, v) = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::format(&self.path, offset, format!("bad value {v:?} for {key}")))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let (offset, v) = self.raw(key)?;
        parse_floats(&self.path, offset, v, ',')
    }

    fn vector(&self, key: &str) -> Result<Option<Vector3<f64>>> {
        let Some((offset, v)) = self.optional(key) else {
            return Ok(None);
        };
        let xs = parse_floats(&self.path, offset, v, ',')?;
        match xs[..] {
            [x, y, z] => Ok(Some(Vector3::new(x, y, z))),
            _ => Err(Error::format(&self.path, offset, format!("{key} needs three components"))),
        }
    }

    fn check_format(&self, format: &str) -> Result<()> {
        let (offset, f) = self.raw("format")?;
        if f != format {
            return Err(Error::format(&self.path, offset, format!("expected format {format}, found {f}")));
        }
        let (offset, v) = self.raw("version")?;
        if v != FORMAT_VERSION.to_string() {
            return Err(Error::format(
                &self.path,
                offset,
                format!("version {v} does not match reader version {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }
}

fn parse_floats(path: &Path, offset: usize, text: &str, sep: char) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(sep)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(path, offset, format!("bad number {t:?}")))
        })
        .collect()
}

/// Provenance stamped on every output file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FileMeta {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl FileMeta {
    fn header(&self, format: &str) -> String {
        let mut s = format!("# format={format}\n# version={FORMAT_VERSION}\n# config_hash={}\n", self.config_hash);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "# seed={seed}");
        }
        s
    }

    fn from_header(kv: &KeyValues) -> Result<Self> {
        Ok(Self {
            config_hash: kv.raw("config_hash")?.1.to_string(),
            seed: kv.optional("seed").map(|_| kv.parse_as("seed")).transpose()?,
        })
    }
}

pub fn encode_manifest(set: &TomogramSet) -> String {
    let meta = &set.meta;
    let grid = &set.grid;
    let kind = if set.is_histogram_set() { "histogram" } else { "discrete" };
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("format", TOMOGRAM_FORMAT.into());
    kv("version", FORMAT_VERSION.to_string());
    kv("kind", kind.into());
    kv("state", meta.state.clone());
    if let Some(seed) = meta.seed {
        kv("seed", seed.to_string());
    }
    kv("generator", meta.generator.clone());
    kv("units", meta.units.as_str().into());
    kv("coverage", grid.coverage.as_str().into());
    kv("reflection", meta.reflection.as_str().into());
    kv("config_hash", meta.config_hash.clone());
    if let Some(mean) = &meta.classical_mean {
        kv("classical_mean", fmt_vector(mean));
    }
    kv("theta_values", fmt_list(&grid.theta_values));
    kv("theta_weights", fmt_list(&grid.theta_weights));
    kv("phi_values", fmt_list(&grid.phi_values));
    kv("phi_weights", fmt_list(&grid.phi_weights));
    kv("record_count", set.records.len().to_string());
    for (k, v) in &meta.extra {
        kv(&format!("x.{k}"), v.clone());
    }
    s
}

pub fn encode_records(set: &TomogramSet) -> String {
    let file = FileMeta {
        config_hash: set.meta.config_hash.clone(),
        seed: set.meta.seed,
    };
    let mut s = format!("# config_hash={}\n", file.config_hash);
    if let Some(seed) = file.seed {
        let _ = writeln!(s, "# seed={seed}");
    }
    for r in &set.records {
        let dir = r.tomogram.dir();
        match &r.tomogram {
            Tomogram::Discrete(t) => {
                let spin = t.spin.map_or("total".to_string(), |s| s.two_j().to_string());
                let values: Vec<String> = t.values.iter().map(|(m, w)| format!("{m}:{}", fmt_f64(*w))).collect();
                let _ = writeln!(
                    s,
                    "D\t{}\t{}\t{}\t{spin}\t{}",
                    r.direction,
                    fmt_f64(dir.theta()),
                    fmt_f64(dir.phi()),
                    values.join(",")
                );
            }
            Tomogram::Histogram(h) => {
                let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(
                    s,
                    "H\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.direction,
                    fmt_f64(dir.theta()),
                    fmt_f64(dir.phi()),
                    h.total_samples,
                    h.clipped,
                    fmt_f64(h.calibration),
                    fmt_f64(h.classical_projection),
                    fmt_list(&h.bin_edges),
                    counts.join(",")
                );
            }
        }
    }
    s
}

pub fn write_tomogram_set(dir: &Path, set: &TomogramSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(RECORDS_FILE), encode_records(set).as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), encode_manifest(set).as_bytes())
}

pub fn read_tomogram_set(dir: &Path) -> Result<TomogramSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let kv = KeyValues::parse(&manifest_path, &read_text(&manifest_path)?, "")?;
    kv.check_format(TOMOGRAM_FORMAT)?;
    let enum_value = |key: &str| -> Result<(usize, String)> { kv.raw(key).map(|(o, v)| (o, v.to_string())) };
    let (o, units) = enum_value("units")?;
    let units = CalibrationUnits::parse(&units).ok_or_else(|| Error::format(&manifest_path, o, format!("unknown units {units}")))?;
    let (o, coverage) = enum_value("coverage")?;
    let coverage = Coverage::parse(&coverage).ok_or_else(|| Error::format(&manifest_path, o, format!("unknown coverage {coverage}")))?;
    let (o, reflection) = enum_value("reflection")?;
    let reflection = ReflectionRule::parse(&reflection)
        .ok_or_else(|| Error::format(&manifest_path, o, format!("unknown reflection {reflection}")))?;
    let grid = AngleGrid {
        theta_values: kv.floats("theta_values")?,
        theta_weights: kv.floats("theta_weights")?,
        phi_values: kv.floats("phi_values")?,
        phi_weights: kv.floats("phi_weights")?,
        coverage,
    };
    if grid.theta_values.len() != grid.theta_weights.len() || grid.phi_values.len() != grid.phi_weights.len() {
        return Err(Error::format(&manifest_path, kv.raw("theta_values")?.0, "angle and weight lists differ in length"));
    }
    let meta = ScanMetadata {
        state: kv.raw("state")?.1.to_string(),
        seed: kv.optional("seed").map(|_| kv.parse_as("seed")).transpose()?,
        generator: kv.raw("generator")?.1.to_string(),
        units,
        classical_mean: kv.vector("classical_mean")?,
        reflection,
        config_hash: kv.raw("config_hash")?.1.to_string(),
        extra: kv
            .entries
            .iter()
            .filter_map(|(k, (_, v))| k.strip_prefix("x.").map(|k| (k.to_string(), v.clone())))
            .collect(),
    };
    let expected: usize = kv.parse_as("record_count")?;
    let (_, kind) = kv.raw("kind")?;
    let kind = kind.to_string();

    let records_path = dir.join(RECORDS_FILE);
    let text = read_text(&records_path)?;
    let mut records = Vec::with_capacity(expected);
    let header = KeyValues::parse(&records_path, &text, "# ")?;
    let stamped = FileMeta::from_header(&header)?;
    if stamped.config_hash != meta.config_hash || stamped.seed != meta.seed {
        return Err(Error::format(&records_path, 0, "config hash or seed differs from the manifest"));
    }
    for (offset, line) in lines_with_offsets(&text).filter(|(_, l)| !l.starts_with('#')) {
        records.push(parse_record(&records_path, offset, line, grid.len())?);
    }
    if records.len() != expected {
        return Err(Error::format(
            &records_path,
            text.len(),
            format!("manifest promises {expected} records, found {}", records.len()),
        ));
    }
    let set = TomogramSet { grid, records, meta };
    let consistent = match kind.as_str() {
        "histogram" => set.records.is_empty() || set.is_histogram_set(),
        "discrete" => set.records.is_empty() || set.is_discrete_set(),
        _ => false,
    };
    if !consistent {
        return Err(Error::format(&manifest_path, kv.raw("kind")?.0, format!("records do not match kind {kind}")));
    }
    Ok(set)
}

fn parse_record(path: &Path, offset: usize, line: &str, grid_len: usize) -> Result<TomogramRecord> {
    let bad = |msg: String| Error::format(path, offset, msg);
    let fields: Vec<&str> = line.split('\t').collect();
    let num = |i: usize| -> Result<f64> {
        fields
            .get(i)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(format!("field {i} is not a number")))
    };
    let int = |i: usize| -> Result<u64> {
        fields
            .get(i)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(format!("field {i} is not an integer")))
    };
    let direction = int(1)? as usize;
    if direction >= grid_len {
        return Err(bad(format!("direction index {direction} outside a grid of {grid_len}")));
    }
    let dir = Direction::new(num(2)?, num(3)?).map_err(|e| bad(e.to_string()))?;
    let tomogram = match fields[0] {
        "D" if fields.len() == 6 => {
            let spin = match fields[4] {
                "total" => None,
                t => Some(SpinIndex::new(t.parse().map_err(|_| bad(format!("bad 2J {t:?}")))?)),
            };
            let values = if fields[5].is_empty() {
                Vec::new()
            } else {
                fields[5]
                    .split(',')
                    .map(|pair| {
                        let (m, w) = pair.split_once(':').ok_or_else(|| bad(format!("bad m:w pair {pair:?}")))?;
                        Ok((
                            m.parse().map_err(|_| bad(format!("bad m {m:?}")))?,
                            w.parse().map_err(|_| bad(format!("bad weight {w:?}")))?,
                        ))
                    })
                    .collect::<Result<Vec<(i32, f64)>>>()?
            };
            Tomogram::Discrete(DiscreteTomogram { spin, dir, values })
        }
        "H" if fields.len() == 10 => {
            let bin_edges = parse_floats(path, offset, fields[8], ',')?;
            let counts = fields[9]
                .split(',')
                .map(|c| c.parse().map_err(|_| bad(format!("bad count {c:?}"))))
                .collect::<Result<Vec<u64>>>()?;
            let h = HistogramTomogram {
                dir,
                bin_edges,
                counts,
                total_samples: int(4)?,
                clipped: int(5)?,
                calibration: num(6)?,
                classical_projection: num(7)?,
            };
            h.validate().map_err(|e| bad(e.to_string()))?;
            Tomogram::Histogram(h)
        }
        tag => return Err(bad(format!("unrecognized record {tag:?} with {} fields", fields.len()))),
    };
    Ok(TomogramRecord { direction, tomogram })
}

/// Metadata stored in a volume file header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VolumeMeta {
    pub file: FileMeta,
    pub classical_mean: Option<Vector3<f64>>,
    pub smoothing_width: f64,
    pub blur_variance: f64,
    pub prefactor: f64,
    pub out_of_support_fraction: f64,
}

const VOLUME_HEADER_LEN: usize = 8 + 4 + 4 + 3 * 8 + 3 * 8 + 3 * 8 + 3 * 8 + 4 * 8 + 8 + 8;

/// Header: magic, version (u32), flags (u32: bit 0 seed, bit 1 classical
/// mean), dims (3 × u64), origin, spacing, classical mean (3 × f64 each),
/// smoothing width, blur variance, prefactor, out-of-support fraction (f64),
/// config hash (u64), seed (u64); then the values as f64, last axis fastest.
pub fn encode_volume(volume: &VolumeGrid, meta: &VolumeMeta) -> Result<Vec<u8>> {
    let hash = parse_hash(&meta.file.config_hash)?;
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 8 * volume.values.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = u32::from(meta.file.seed.is_some()) | (u32::from(meta.classical_mean.is_some()) << 1);
    out.extend_from_slice(&flags.to_le_bytes());
    for d in volume.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let mean = meta.classical_mean.unwrap_or_else(Vector3::zeros);
    let floats = volume
        .origin
        .iter()
        .chain(&volume.spacing)
        .chain(mean.iter())
        .chain([
            &meta.smoothing_width,
            &meta.blur_variance,
            &meta.prefactor,
            &meta.out_of_support_fraction,
        ]);
    for x in floats {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&hash.to_le_bytes());
    out.extend_from_slice(&meta.file.seed.unwrap_or(0).to_le_bytes());
    for v in &volume.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse_hash(hash: &str) -> Result<u64> {
    if hash.is_empty() {
        return Ok(0);
    }
    u64::from_str_radix(hash, 16).map_err(|_| Error::Input(format!("config hash {hash:?} is not 16 hex digits")))
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<(VolumeGrid, VolumeMeta)> {
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let start = cursor;
        let end = start + n;
        if end > bytes.len() {
            return Err(Error::format(path, start, format!("truncated volume file: need {n} bytes")));
        }
        cursor = end;
        Ok(&bytes[start..end])
    };
    if take(8)? != VOLUME_MAGIC {
        return Err(Error::format(path, 0, "not a volume file (bad magic)"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("four bytes"));
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("eight bytes"));
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("eight bytes"));
    let version = u32_at(take(4)?);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, 8, format!("volume version {version} is not {FORMAT_VERSION}")));
    }
    let flags = u32_at(take(4)?);
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = usize::try_from(u64_at(take(8)?)).map_err(|_| Error::format(path, 16, "dimension overflows"))?;
    }
    let mut floats = [0.0; 13];
    for f in &mut floats {
        *f = f64_at(take(8)?);
    }
    let hash = u64_at(take(8)?);
    let seed = u64_at(take(8)?);
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(path, 16, "dimensions overflow"))?;
    let body = bytes.len() - VOLUME_HEADER_LEN;
    if body != count * 8 {
        return Err(Error::format(
            path,
            VOLUME_HEADER_LEN,
            format!("expected {count} values ({} bytes), found {body} bytes", count * 8),
        ));
    }
    let values: Vec<f64> = bytes[VOLUME_HEADER_LEN..].chunks_exact(8).map(f64_at).collect();
    let volume = VolumeGrid::new(dims, [floats[0], floats[1], floats[2]], [floats[3], floats[4], floats[5]], values)
        .map_err(|e| Error::format(path, 16, e.to_string()))?;
    let meta = VolumeMeta {
        file: FileMeta {
            config_hash: format!("{hash:016x}"),
            seed: (flags & 1 != 0).then_some(seed),
        },
        classical_mean: (flags & 2 != 0).then(|| Vector3::new(floats[6], floats[7], floats[8])),
        smoothing_width: floats[9],
        blur_variance: floats[10],
        prefactor: floats[11],
        out_of_support_fraction: floats[12],
    };
    Ok((volume, meta))
}

pub fn write_volume(path: &Path, volume: &VolumeGrid, meta: &VolumeMeta) -> Result<()> {
    write_atomic(path, &encode_volume(volume, meta)?)
}

pub fn read_volume(path: &Path) -> Result<(VolumeGrid, VolumeMeta)> {
    decode_volume(path, &read_bytes(path)?)
}

/// Density blocks as text: a `block` line per subspace followed by one row
/// per line of `re,im` pairs separated by spaces.
pub fn encode_blocks(blocks: &[DensityBlock], residuals: &[f64], meta: &FileMeta) -> String {
    let mut s = meta.header(BLOCKS_FORMAT);
    let _ = writeln!(s, "# block_count={}", blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        let residual = residuals.get(i).map_or(String::new(), |r| format!(" hermitian_residual={}", fmt_f64(*r)));
        let _ = writeln!(s, "block two_j={} weight={}{residual}", b.spin.two_j(), fmt_f64(b.weight));
        for r in 0..b.spin.dim() {
            let row: Vec<String> = (0..b.spin.dim())
                .map(|c| {
                    let z = b.matrix[(r, c)];
                    format!("{},{}", fmt_f64(z.re), fmt_f64(z.im))
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

pub fn write_blocks(path: &Path, blocks: &[DensityBlock], residuals: &[f64], meta: &FileMeta) -> Result<()> {
    write_atomic(path, encode_blocks(blocks, residuals, meta).as_bytes())
}

/// Blocks exactly as stored (shape-checked only) and the hermiticity
/// residuals where recorded.
pub fn read_blocks(path: &Path) -> Result<(Vec<DensityBlock>, Vec<Option<f64>>, FileMeta)> {
    let text = read_text(path)?;
    let kv = KeyValues::parse(path, &text, "# ")?;
    kv.check_format(BLOCKS_FORMAT)?;
    let meta = FileMeta::from_header(&kv)?;
    let expected: usize = kv.parse_as("block_count")?;
    let mut blocks = Vec::new();
    let mut residuals = Vec::new();
    let mut lines = lines_with_offsets(&text).filter(|(_, l)| !l.starts_with('#'));
    while let Some((offset, line)) = lines.next() {
        let bad = |msg: String| Error::format(path, offset, msg);
        let rest = line
            .strip_prefix("block ")
            .ok_or_else(|| bad(format!("expected a block line, got {line:?}")))?;
        let mut two_j = None;
        let mut residual = None;
        for field in rest.split(' ') {
            match field.split_once('=') {
                Some(("two_j", v)) => two_j = v.parse::<u32>().ok(),
                Some(("hermitian_residual", v)) => {
                    residual = Some(v.parse::<f64>().map_err(|_| bad(format!("bad residual {v:?}")))?)
                }
                Some(("weight", _)) => {}
                _ => return Err(bad(format!("unexpected field {field:?}"))),
            }
        }
        let spin = SpinIndex::new(two_j.ok_or_else(|| bad("block line needs two_j".into()))?);
        let dim = spin.dim();
        let mut matrix = CMatrix::zeros(dim, dim);
        for r in 0..dim {
            let (row_offset, row) = lines
                .next()
                .ok_or_else(|| Error::format(path, text.len(), format!("block 2J={} is missing rows", spin.two_j())))?;
            let entries: Vec<&str> = row.split(' ').collect();
            if entries.len() != dim {
                return Err(Error::format(path, row_offset, format!("row has {} entries, expected {dim}", entries.len())));
            }
            for (c, e) in entries.iter().enumerate() {
                let parts = parse_floats(path, row_offset, e, ',')?;
                let [re, im] = parts[..] else {
                    return Err(Error::format(path, row_offset, format!("bad complex entry {e:?}")));
                };
                matrix[(r, c)] = Complex64::new(re, im);
            }
        }
        blocks.push(DensityBlock::unchecked(spin, matrix).map_err(|e| bad(e.to_string()))?);
        residuals.push(residual);
    }
    if blocks.len() != expected {
        return Err(Error::format(path, text.len(), format!("expected {expected} blocks, found {}", blocks.len())));
    }
    Ok((blocks, residuals, meta))
}

/// Whitespace-separated numeric table with a `# key=value` header and a
/// `# columns=` line.
pub fn encode_table(format: &str, meta: &FileMeta, header: &[(&str, String)], columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = meta.header(format);
    for (k, v) in header {
        let _ = writeln!(s, "# {k}={v}");
    }
    let _ = writeln!(s, "# columns={}", columns.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

/// Reads back a table written by [`encode_table`]: header entries and rows.
pub fn read_table(path: &Path) -> Result<(BTreeMap<String, String>, Vec<Vec<f64>>)> {
    let text = read_text(path)?;
    let kv = KeyValues::parse(path, &text, "# ")?;
    let rows = lines_with_offsets(&text)
        .filter(|(_, l)| !l.starts_with('#'))
        .map(|(offset, l)| parse_floats(path, offset, l, ' '))
        .collect::<Result<Vec<_>>>()?;
    Ok((kv.entries.into_iter().map(|(k, (_, v))| (k, v)).collect(), rows))
}

pub fn encode_sphere_patch(patch: &SpherePatch, meta: &FileMeta) -> String {
    let centers = patch.centers();
    let mut rows = Vec::with_capacity(patch.values.len());
    for (i, a) in centers.iter().enumerate() {
        for (j, b) in centers.iter().enumerate() {
            rows.push(vec![*a, *b, patch.values[i * patch.bins + j]]);
        }
    }
    encode_table(
        "polartomo-sphere-patch",
        meta,
        &[
            ("mean_theta", fmt_f64(patch.mean_direction.theta())),
            ("mean_phi", fmt_f64(patch.mean_direction.phi())),
            ("axis_a", fmt_vector(&patch.frame[0])),
            ("axis_b", fmt_vector(&patch.frame[1])),
            ("half_range", fmt_f64(patch.half_range)),
            ("bins", patch.bins.to_string()),
            ("negative_fraction", fmt_f64(patch.negative_fraction)),
        ],
        &["angle_a", "angle_b", "density"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{simulate_exact_scan, simulate_sideband_scan};
    use crate::states::{coherent_two_mode, GaussianStokesModel};

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("polartomo-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn float_text_round_trips() {
        for x in [0.0, -0.0, 1.0, 0.1, 1e-7, 123456.789, 1e300, -2.5e-310, f64::MIN_POSITIVE, 1.0 / 3.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn discrete_set_round_trip_is_byte_identical() {
        let state = coherent_two_mode(Complex64::new(0.8, 0.1), Complex64::new(0.3, -0.4), 30).unwrap();
        let mut set = simulate_exact_scan(&state, &AngleGrid::quarter_scan(3, 2).unwrap());
        set.meta.seed = Some(7);
        set.meta.config_hash = "0123456789abcdef".into();
        set.meta.extra.insert("note".into(), "hello".into());
        let dir = temp_dir("discrete");
        write_tomogram_set(&dir, &set).unwrap();
        let back = read_tomogram_set(&dir).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_manifest(&back), encode_manifest(&set));
        assert_eq!(encode_records(&back), encode_records(&set));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn histogram_set_round_trip_and_corruption() {
        let model = GaussianStokesModel::coherent(1e8, &Direction::new(1.0, 2.0).unwrap()).unwrap();
        let set = simulate_sideband_scan(&model, &AngleGrid::gauss_legendre(3, 4).unwrap(), 500, 32, 3).unwrap();
        let dir = temp_dir("histogram");
        write_tomogram_set(&dir, &set).unwrap();
        assert_eq!(read_tomogram_set(&dir).unwrap(), set);

        let records = dir.join(RECORDS_FILE);
        let text = fs::read_to_string(&records).unwrap();
        let second_line = text.find('\n').unwrap() + 1;
        let corrupted = format!("{}H\tgarbage\n{}", &text[..second_line], &text[second_line..]);
        fs::write(&records, corrupted).unwrap();
        match read_tomogram_set(&dir) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, second_line),
            other => panic!("expected a format error, got {other:?}"),
        }
        fs::remove_file(dir.join(MANIFEST_FILE)).unwrap();
        let err = read_tomogram_set(&dir).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert_eq!(err.exit_code(), 3);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let state = coherent_two_mode(Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0), 20).unwrap();
        let set = simulate_exact_scan(&state, &AngleGrid::gauss_legendre(2, 2).unwrap());
        let dir = temp_dir("version");
        write_tomogram_set(&dir, &set).unwrap();
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap().replace("version=1", "version=9");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(read_tomogram_set(&dir), Err(Error::Format { .. })));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn volume_round_trip_and_truncation() {
        let volume = VolumeGrid::new([2, 3, 2], [-1.0, -2.0, -0.5], [2.0, 2.0, 1.0], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let meta = VolumeMeta {
            file: FileMeta {
                config_hash: "00000000deadbeef".into(),
                seed: Some(42),
            },
            classical_mean: Some(Vector3::new(0.0, 5e10, 0.0)),
            smoothing_width: 0.2,
            blur_variance: 0.04001,
            prefactor: -0.0126,
            out_of_support_fraction: 0.01,
        };
        let bytes = encode_volume(&volume, &meta).unwrap();
        let path = Path::new("v.bin");
        let (v2, m2) = decode_volume(path, &bytes).unwrap();
        assert_eq!(v2, volume);
        assert_eq!(m2, meta);
        assert_eq!(encode_volume(&v2, &m2).unwrap(), bytes);
        match decode_volume(path, &bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, VOLUME_HEADER_LEN),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_volume(path, b"NOTAVOLUMEFILE"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn blocks_round_trip() {
        let state = coherent_two_mode(Complex64::new(0.7, 0.2), Complex64::new(-0.1, 0.5), 30).unwrap();
        let meta = FileMeta {
            config_hash: "0000000000000001".into(),
            seed: None,
        };
        let residuals = vec![1e-15; state.blocks().len()];
        let text = encode_blocks(state.blocks(), &residuals, &meta);
        let dir = temp_dir("blocks");
        let path = dir.join("blocks.txt");
        write_atomic(&path, text.as_bytes()).unwrap();
        let (blocks, res, m) = read_blocks(&path).unwrap();
        assert_eq!(m, meta);
        assert!(res.iter().all(|r| *r == Some(1e-15)));
        assert_eq!(encode_blocks(&blocks, &residuals, &m), text);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tables_round_trip() {
        let meta = FileMeta::default();
        let text = encode_table("t", &meta, &[("a", "1".into())], &["x", "y"], &[vec![1.0, 2.5], vec![-3.0, 1e-9]]);
        let dir = temp_dir("table");
        let path = dir.join("t.txt");
        write_atomic(&path, text.as_bytes()).unwrap();
        let (header, rows) = read_table(&path).unwrap();
        assert_eq!(header["a"], "1");
        assert_eq!(rows, vec![vec![1.0, 2.5], vec![-3.0, 1e-9]]);
        fs::remove_dir_all(&dir).unwrap();
    }
}
