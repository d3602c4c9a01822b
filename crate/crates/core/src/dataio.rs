//! Parameter sampling, snapshot archives, external snapshot ingestion, and
//! model bundles.
//!
//! A dataset archive is a directory:
//!
//! ```text
//! manifest.json
//! <id>.coords.bin   N_u x d            f64, little-endian, row-major
//! <id>.fields.bin   (N_t+1) x N_u x N_f
//! ```
//!
//! A model bundle is a directory holding `bundle.json`, `weights.bin`,
//! `coefficients.bin` and `training_log.csv`. The JSON manifest records a
//! SHA-256 digest of each binary file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::idmodel::LibrarySpec;
use crate::interp::KnnConfig;
use crate::networks::ArchitectureSpec;
use crate::training::{LogRow, Normalizers, TrainingConfig, TrainingLog, TrainingSummary};

pub const DATASET_VERSION: u32 = 1;
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Random,
    UniformGrid,
}

/// Draw `n` parameter points from the box `bounds` (one `[lo, hi]` per
/// component).
///
/// The uniform grid uses `ceil(n^(1/N_D))` evenly spaced values per axis,
/// corners included, so it may hold more than `n` points.
pub fn sample_parameters(bounds: &[[f64; 2]], n: usize, mode: SamplingMode, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    if bounds.is_empty() {
        return Err(Error::InvalidInput("parameter box has no components".into()));
    }
    if let Some(b) = bounds.iter().find(|b| !(b[1] >= b[0])) {
        return Err(Error::InvalidInput(format!("invalid parameter range {b:?}")));
    }
    match mode {
        SamplingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| bounds.iter().map(|b| if b[1] > b[0] { rng.random_range(b[0]..=b[1]) } else { b[0] }).collect())
                .collect())
        }
        SamplingMode::UniformGrid => {
            let dims = bounds.len() as i32;
            let mut per = (n as f64).powf(1.0 / dims as f64).round() as usize;
            while per.pow(dims as u32) < n {
                per += 1;
            }
            if per.pow(dims as u32) != n {
                log::warn!("{n} is not a perfect power; using a {per}^{dims} = {} point grid", per.pow(dims as u32));
            }
            let axis = |b: &[f64; 2]| -> Vec<f64> {
                if per == 1 {
                    vec![0.5 * (b[0] + b[1])]
                } else {
                    (0..per).map(|i| if i + 1 == per { b[1] } else { b[0] + (b[1] - b[0]) * i as f64 / (per - 1) as f64 }).collect()
                }
            };
            let axes: Vec<Vec<f64>> = bounds.iter().map(axis).collect();
            let total = per.pow(dims as u32);
            Ok((0..total)
                .map(|mut k| {
                    let mut p = vec![0.0; axes.len()];
                    for (slot, ax) in p.iter_mut().zip(&axes).rev() {
                        *slot = ax[k % per];
                        k /= per;
                    }
                    p
                })
                .collect())
        }
    }
}

/// One parameter point's snapshots on its own set of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrajectory {
    pub id: String,
    pub mu: Vec<f64>,
    /// `N_u x d`
    pub coords: Matrix,
    /// `(N_t + 1) x N_u x N_f`
    pub fields: Array3<f64>,
    pub grid: Option<String>,
    pub wall_clock: Option<f64>,
}

impl FieldTrajectory {
    pub fn n_points(&self) -> usize {
        self.coords.nrows()
    }

    pub fn check_shapes(&self, n_times: usize, space_dim: usize, n_fields: usize) -> Result<()> {
        if self.coords.ncols() != space_dim {
            return Err(Error::dim(format!("{} coordinate width", self.id), space_dim, self.coords.ncols()));
        }
        let expect = (n_times, self.coords.nrows(), n_fields);
        if self.fields.dim() != expect {
            return Err(Error::dim(format!("{} field array", self.id), format!("{expect:?}"), format!("{:?}", self.fields.dim())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One `[lo, hi]` per spatial dimension.
    pub domain_box: Vec<[f64; 2]>,
    pub times: Vec<f64>,
    pub fields: Vec<String>,
    /// Free-form generation settings recorded alongside the data.
    pub metadata: serde_json::Value,
    pub trajectories: Vec<FieldTrajectory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryEntry {
    id: String,
    mu: Vec<f64>,
    coords_file: String,
    fields_file: String,
    n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wall_clock: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    domain_box: Vec<[f64; 2]>,
    times: Vec<f64>,
    fields: Vec<String>,
    #[serde(default)]
    metadata: serde_json::Value,
    trajectories: Vec<TrajectoryEntry>,
}

fn format_err(path: &Path, detail: impl ToString) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.to_string() }
}

fn write_f64s<'a>(path: &Path, values: impl IntoIterator<Item = &'a f64>) -> Result<String> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    for v in values {
        let b = v.to_le_bytes();
        hasher.update(b);
        w.write_all(&b).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Read exactly `count` values, returning them with the file digest.
fn read_f64s(path: &Path, count: usize) -> Result<(Vec<f64>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 8 {
        return Err(format_err(path, format!("expected {} bytes ({count} values), found {}", count * 8, bytes.len())));
    }
    let digest = hex(&Sha256::digest(&bytes));
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((values, digest))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn safe_file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

impl Dataset {
    pub fn new(domain_box: Vec<[f64; 2]>, times: Vec<f64>, fields: Vec<String>) -> Self {
        Self { domain_box, times, fields, metadata: serde_json::Value::Null, trajectories: Vec::new() }
    }

    /// Append a trajectory, growing the domain box (with a warning) if its
    /// coordinates fall outside.
    pub fn push(&mut self, trajectory: FieldTrajectory) -> Result<()> {
        trajectory.check_shapes(self.times.len(), self.domain_box.len(), self.fields.len())?;
        if self.trajectories.iter().any(|t| t.id == trajectory.id) {
            return Err(Error::InvalidInput(format!("duplicate trajectory id {:?}", trajectory.id)));
        }
        if let Some(first) = self.trajectories.first() {
            if first.mu.len() != trajectory.mu.len() {
                return Err(Error::dim(format!("parameter vector of {}", trajectory.id), first.mu.len(), trajectory.mu.len()));
            }
        }
        for (c, b) in self.domain_box.iter_mut().enumerate() {
            let col = trajectory.coords.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo < b[0] || hi > b[1] {
                log::warn!(
                    "{} has coordinates outside the domain box along axis {c}; expanding [{}, {}] to [{}, {}]",
                    trajectory.id,
                    b[0],
                    b[1],
                    lo.min(b[0]),
                    hi.max(b[1])
                );
                b[0] = lo.min(b[0]);
                b[1] = hi.max(b[1]);
            }
        }
        self.trajectories.push(trajectory);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.trajectories.len());
        for t in &self.trajectories {
            t.check_shapes(self.times.len(), self.domain_box.len(), self.fields.len())?;
            let stem = safe_file_stem(&t.id);
            let coords_file = format!("{stem}.coords.bin");
            let fields_file = format!("{stem}.fields.bin");
            write_f64s(&dir.join(&coords_file), t.coords.iter())?;
            write_f64s(&dir.join(&fields_file), t.fields.iter())?;
            entries.push(TrajectoryEntry {
                id: t.id.clone(),
                mu: t.mu.clone(),
                coords_file,
                fields_file,
                n_points: t.n_points(),
                grid: t.grid.clone(),
                wall_clock: t.wall_clock,
            });
        }
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            domain_box: self.domain_box.clone(),
            times: self.times.clone(),
            fields: self.fields.clone(),
            metadata: self.metadata.clone(),
            trajectories: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Version { found: manifest.version, expected: DATASET_VERSION });
        }
        let d = manifest.domain_box.len();
        let nf = manifest.fields.len();
        let nt = manifest.times.len();
        if d == 0 || nf == 0 || nt == 0 {
            return Err(format_err(&manifest_path, "domain_box, fields and times must all be non-empty"));
        }
        let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
        for e in manifest.trajectories {
            let (c, _) = read_f64s(&dir.join(&e.coords_file), e.n_points * d)?;
            let (f, _) = read_f64s(&dir.join(&e.fields_file), nt * e.n_points * nf)?;
            trajectories.push(FieldTrajectory {
                coords: Matrix::from_shape_vec((e.n_points, d), c).expect("length checked"),
                fields: Array3::from_shape_vec((nt, e.n_points, nf), f).expect("length checked"),
                id: e.id,
                mu: e.mu,
                grid: e.grid,
                wall_clock: e.wall_clock,
            });
        }
        Ok(Self {
            domain_box: manifest.domain_box,
            times: manifest.times,
            fields: manifest.fields,
            metadata: manifest.metadata,
            trajectories,
        })
    }
}

fn read_table(path: &Path, columns: Option<usize>) -> Result<(Vec<f64>, usize, usize)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(format_err(path, format!("{} bytes is not a whole number of f64 values", bytes.len())));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let cols = columns.unwrap_or(1);
        if values.len() % cols != 0 {
            return Err(format_err(path, format!("{} values do not split into rows of {cols}", values.len())));
        }
        let rows = values.len() / cols;
        return Ok((values, rows, cols));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let parsed = match parsed {
            Ok(p) => p,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(format_err(path, format!("line {}: {e}", line + 1))),
        };
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(format_err(path, format!("line {} has {} columns, expected {w}", line + 1, parsed.len())));
            }
            _ => {}
        }
        values.extend(parsed);
        rows += 1;
    }
    let cols = width.ok_or_else(|| format_err(path, "no numeric rows"))?;
    if let Some(c) = columns {
        if c != cols {
            return Err(format_err(path, format!("expected {c} columns, found {cols}")));
        }
    }
    Ok((values, rows, cols))
}

/// Read `space_dim`-column query coordinates from CSV or raw little-endian f64.
pub fn read_coordinates(path: &Path, space_dim: usize) -> Result<Matrix> {
    let (values, rows, _) = read_table(path, Some(space_dim))?;
    if rows == 0 {
        return Err(format_err(path, "no coordinates"));
    }
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite coordinate at point {}", k / space_dim)));
    }
    Ok(Matrix::from_shape_vec((rows, space_dim), values).expect("length checked"))
}

/// Read snapshots defined on arbitrary points.
///
/// `coords_path` holds `N_u` rows of `space_dim` values; `fields_path` holds
/// `(N_t + 1) * N_u` rows of `N_f` values, time-major. Either file may be CSV
/// (an optional header row is skipped) or raw little-endian f64; a raw fields
/// file is split into `N_f` columns by its length.
pub fn ingest_external(
    id: &str,
    coords_path: &Path,
    fields_path: &Path,
    times: &[f64],
    mu: &[f64],
    space_dim: usize,
) -> Result<FieldTrajectory> {
    let (coords, n_u, _) = read_table(coords_path, Some(space_dim))?;
    if n_u == 0 || times.is_empty() {
        return Err(Error::InvalidInput("external data needs at least one point and one time level".into()));
    }
    let (values, rows, cols) = read_table(fields_path, None)?;
    let (rows, n_f) = if fields_path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        (rows, cols)
    } else {
        let per = times.len() * n_u;
        if values.len() % per != 0 {
            return Err(format_err(fields_path, format!("{} values are not a multiple of {} time levels x {n_u} points", values.len(), times.len())));
        }
        (per, values.len() / per)
    };
    if rows != times.len() * n_u {
        return Err(format_err(fields_path, format!("expected {} rows ({} time levels x {n_u} points), found {rows}", times.len() * n_u, times.len())));
    }
    let bad: Vec<String> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_nan())
        .take(20)
        .map(|(k, _)| {
            let (m, rest) = (k / (n_u * n_f), k % (n_u * n_f));
            format!("(t={m}, point={}, field={})", rest / n_f, rest % n_f)
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::InvalidInput(format!("NaN field values at {}", bad.join(", "))));
    }
    if let Some(k) = coords.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite coordinate at point {}", k / space_dim)));
    }
    Ok(FieldTrajectory {
        id: id.to_string(),
        mu: mu.to_vec(),
        coords: Matrix::from_shape_vec((n_u, space_dim), coords).expect("length checked"),
        fields: Array3::from_shape_vec((times.len(), n_u, n_f), values).expect("length checked"),
        grid: None,
        wall_clock: None,
    })
}

/// Everything prediction needs, independent of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub architecture: ArchitectureSpec,
    pub library: LibrarySpec,
    /// Network weights only.
    pub params: ParamStore,
    pub normalizers: Normalizers,
    /// Raw training parameters, aligned with `coefficients`.
    pub training_mus: Vec<Vec<f64>>,
    pub coefficients: Vec<Matrix>,
    pub times: Vec<f64>,
    pub training: TrainingConfig,
    pub knn: KnnConfig,
    pub summary: TrainingSummary,
    pub log: TrainingLog,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    architecture: ArchitectureSpec,
    library: LibrarySpec,
    normalizers: Normalizers,
    times: Vec<f64>,
    training_mus: Vec<Vec<f64>>,
    coefficient_shape: [usize; 2],
    blocks: Vec<BlockEntry>,
    training: TrainingConfig,
    knn: KnnConfig,
    summary: TrainingSummary,
    log_file: String,
    weights_sha256: String,
    coefficients_sha256: String,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.blocks().len() == other.blocks().len()
            && self.blocks().iter().zip(other.blocks()).all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.coefficients.is_empty() {
            return Err(Error::State("bundle has no coefficient matrices".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights_sha256 = write_f64s(&dir.join("weights.bin"), self.params.blocks().iter().flat_map(|b| b.value.iter()))?;
        let coefficients_sha256 = write_f64s(&dir.join("coefficients.bin"), self.coefficients.iter().flat_map(|x| x.iter()))?;
        let log_file = "training_log.csv".to_string();
        self.log.write_csv(&dir.join(&log_file))?;
        let c0 = &self.coefficients[0];
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            architecture: self.architecture.clone(),
            library: self.library.clone(),
            normalizers: self.normalizers.clone(),
            times: self.times.clone(),
            training_mus: self.training_mus.clone(),
            coefficient_shape: [c0.nrows(), c0.ncols()],
            blocks: self.params.blocks().iter().map(|b| BlockEntry { name: b.name.clone(), rows: b.value.nrows(), cols: b.value.ncols() }).collect(),
            training: self.training.clone(),
            knn: self.knn,
            summary: self.summary.clone(),
            log_file,
            weights_sha256,
            coefficients_sha256,
        };
        write_json(&dir.join("bundle.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("bundle.json");
        let raw: serde_json::Value = read_json(&manifest_path)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| format_err(&manifest_path, "missing version"))?;
        if found != BUNDLE_VERSION as u64 {
            return Err(Error::Version { found: found as u32, expected: BUNDLE_VERSION });
        }
        let m: BundleManifest = serde_json::from_value(raw).map_err(|source| Error::Json { path: manifest_path.clone(), source })?;
        if m.training_mus.is_empty() {
            return Err(format_err(&manifest_path, "bundle holds no trained coefficient matrices; prediction is impossible"));
        }

        let total: usize = m.blocks.iter().map(|b| b.rows * b.cols).sum();
        let weights_path = dir.join("weights.bin");
        let (w, digest) = read_f64s(&weights_path, total)?;
        if digest != m.weights_sha256 {
            return Err(Error::Checksum(format!("{} does not match its recorded digest", weights_path.display())));
        }
        let mut params = ParamStore::new();
        let mut off = 0;
        for b in &m.blocks {
            let n = b.rows * b.cols;
            params.insert(b.name.clone(), Matrix::from_shape_vec((b.rows, b.cols), w[off..off + n].to_vec()).expect("sized"))?;
            off += n;
        }

        let [rows, cols] = m.coefficient_shape;
        let coef_path = dir.join("coefficients.bin");
        let (c, digest) = read_f64s(&coef_path, m.training_mus.len() * rows * cols)?;
        if digest != m.coefficients_sha256 {
            return Err(Error::Checksum(format!("{} does not match its recorded digest", coef_path.display())));
        }
        let coefficients = c.chunks_exact(rows * cols).map(|ch| Matrix::from_shape_vec((rows, cols), ch.to_vec()).expect("sized")).collect();

        let log_path = dir.join(&m.log_file);
        let log = if log_path.exists() { read_log(&log_path)? } else { TrainingLog::default() };

        let bundle = Self {
            architecture: m.architecture,
            library: m.library,
            params,
            normalizers: m.normalizers,
            training_mus: m.training_mus,
            coefficients,
            times: m.times,
            training: m.training,
            knn: m.knn,
            summary: m.summary,
            log,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Structural consistency between the manifest pieces.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        crate::networks::Tldnet::bind(&self.architecture, &self.params)?;
        let nb = self.library.n_columns(self.architecture.latent_dim);
        for (i, x) in self.coefficients.iter().enumerate() {
            if x.dim() != (nb, self.architecture.latent_dim) {
                return Err(Error::dim(format!("coefficient matrix {i}"), format!("{nb}x{}", self.architecture.latent_dim), format!("{:?}", x.dim())));
            }
        }
        if self.coefficients.len() != self.training_mus.len() {
            return Err(Error::dim("coefficient matrices", self.training_mus.len(), self.coefficients.len()));
        }
        let n = &self.normalizers;
        if n.mu.dim() != self.architecture.param_dim || n.x.dim() != self.architecture.space_dim || n.u.dim() != self.architecture.field_dim {
            return Err(Error::Spec("normalisers do not match the architecture".into()));
        }
        Ok(())
    }

    pub fn bundle_dir_files(dir: &Path) -> Vec<PathBuf> {
        ["bundle.json", "weights.bin", "coefficients.bin", "training_log.csv"].iter().map(|f| dir.join(f)).collect()
    }
}

fn read_log(path: &Path) -> Result<TrainingLog> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let rows = r.deserialize::<LogRow>().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| format_err(path, e))?;
    Ok(TrainingLog { rows })
}
