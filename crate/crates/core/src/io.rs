//! Data ingestion, run configuration and chain archives.
//!
//! A chain archive is a directory holding `manifest.json`, one CSV per
//! parameter block (one row per retained draw, first column the sweep
//! index) and `log_joint.csv`. Floats are written with 17 significant
//! digits so that reading an archive back reproduces the draws exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ddp::{DdpChain, DdpConfig, DdpState};
use crate::error::{Error, Result};
use crate::mcmc::ChainSettings;
use crate::nested::{NestedChain, NestedModelConfig, NestedState};
use crate::partition::NestedPartitionState;
use crate::rng::NormalInvGammaParams;
use crate::spline::{RegressionDesign, SplineBasis, TimeScale, NUM_COVARIATES};
use crate::sticks::{weights_from_sticks, StickWeights};

pub const ARCHIVE_FORMAT: &str = "csv-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Cell transform applied to a count table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `z_ij / γ_j`.
    RelFreq,
    /// `(z_ij / γ_j) · mean_j γ_j`.
    #[default]
    AvgLibrary,
    /// Values used as given; any finite real is accepted.
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rel_freq" => Ok(Normalization::RelFreq),
            "avg_library" => Ok(Normalization::AvgLibrary),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!(
                "unknown normalization '{s}' (expected rel_freq, avg_library or none)"
            ))),
        }
    }
}

/// Feature-by-subject table with its normalized values.
#[derive(Debug, Clone, PartialEq)]
pub struct OtuTable {
    pub row_names: Vec<String>,
    pub subject_names: Vec<String>,
    /// Raw cell values as read.
    pub counts: DMatrix<f64>,
    /// Column totals `γ_j`.
    pub library_sizes: Vec<f64>,
    pub y: DMatrix<f64>,
    pub normalization: Normalization,
    pub log_transform: bool,
}

pub fn load_otu_csv(path: &Path, normalization: Normalization, log_transform: bool) -> Result<OtuTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_otu_csv(file, normalization, log_transform)
}

/// Parse a matrix CSV: header row of subject names, first column of row
/// names. Counts must be nonnegative integers unless `normalization` is
/// `None`. The log transform is `ln(1 + y)`.
pub fn parse_otu_csv<R: Read>(reader: R, normalization: Normalization, log_transform: bool) -> Result<OtuTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Validation("matrix CSV needs a name column and at least one subject".into()));
    }
    let subject_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n_j = subject_names.len();
    let mut row_names = Vec::new();
    let mut values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != n_j + 1 {
            return Err(Error::Validation(format!(
                "row {} has {} fields, expected {}",
                r + 1,
                record.len(),
                n_j + 1
            )));
        }
        let name = record[0].to_string();
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Validation(format!("cell ({name}, {}) is not a number: '{field}'", subject_names[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("cell ({name}, {}) is not finite", subject_names[j])));
            }
            if normalization != Normalization::None && (v < 0.0 || v.fract() != 0.0) {
                return Err(Error::Validation(format!(
                    "cell ({name}, {}) = {field} is not a nonnegative integer count",
                    subject_names[j]
                )));
            }
            values.push(v);
        }
        row_names.push(name);
    }
    if row_names.is_empty() {
        return Err(Error::Validation("matrix CSV has no data rows".into()));
    }
    let counts = DMatrix::from_row_slice(row_names.len(), n_j, &values);
    let library_sizes: Vec<f64> = (0..n_j).map(|j| counts.column(j).sum()).collect();
    if normalization != Normalization::None {
        if let Some(j) = library_sizes.iter().position(|&g| g <= 0.0) {
            return Err(Error::Validation(format!("subject '{}' has zero library size", subject_names[j])));
        }
    }
    let mean_library = library_sizes.iter().sum::<f64>() / n_j as f64;
    let mut y = counts.clone();
    for j in 0..n_j {
        let scale = match normalization {
            Normalization::RelFreq => 1.0 / library_sizes[j],
            Normalization::AvgLibrary => mean_library / library_sizes[j],
            Normalization::None => 1.0,
        };
        y.column_mut(j).iter_mut().for_each(|v| *v *= scale);
    }
    if log_transform {
        if let Some(v) = y.iter().find(|v| **v <= -1.0) {
            return Err(Error::Validation(format!("log transform needs values above -1, found {v}")));
        }
        y.apply(|v| *v = v.ln_1p());
    }
    Ok(OtuTable {
        row_names,
        subject_names,
        counts,
        library_sizes,
        y,
        normalization,
        log_transform,
    })
}

pub fn write_matrix_csv(path: &Path, row_names: &[String], col_names: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(col_names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in row_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..m.ncols()).map(|j| fmt_f64(m[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format protein data reshaped to a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProteinData {
    pub protein_ids: Vec<String>,
    pub subject_ids: Vec<String>,
    /// I×J responses.
    pub data: DMatrix<f64>,
    pub ages: Vec<f64>,
    pub conditions: Vec<u8>,
}

impl ProteinData {
    pub fn design(&self, time_scale: TimeScale, knots: Option<[f64; 2]>, boundary: Option<[f64; 2]>) -> Result<RegressionDesign> {
        match boundary {
            None => RegressionDesign::new(&self.ages, &self.conditions, time_scale, knots),
            Some([lo, hi]) => {
                let basis = match knots {
                    Some(k) => SplineBasis::new(lo, hi, k)?,
                    None => {
                        let design = RegressionDesign::new(&self.ages, &self.conditions, time_scale, None)?;
                        SplineBasis::from_quantiles_within(&design.design.times, lo, hi)?
                    }
                };
                RegressionDesign::with_basis(&self.ages, &self.conditions, time_scale, basis)
            }
        }
    }

    /// Warnings about inputs that disable parts of the analysis.
    pub fn warnings(&self, design: &RegressionDesign) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = design.corners.all() {
            out.push(format!("{e}; slope differences and ranking are disabled"));
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct ProteinRow {
    protein_id: String,
    subject_id: String,
    y: f64,
    z: f64,
    t: f64,
}

pub fn load_protein_csv(path: &Path) -> Result<ProteinData> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_protein_csv(file)
}

/// Parse columns `protein_id, subject_id, y, z, t`. Every protein must be
/// observed once for every subject, `z ∈ {0, 1}`, and `z`, `t` must be
/// constant within a subject.
pub fn parse_protein_csv<R: Read>(reader: R) -> Result<ProteinData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut protein_index: HashMap<String, usize> = HashMap::new();
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut protein_ids = Vec::new();
    let mut subject_ids = Vec::new();
    let mut ages = Vec::new();
    let mut conditions = Vec::new();
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (r, row) in rdr.deserialize::<ProteinRow>().enumerate() {
        let row = row?;
        let line = r + 2;
        if !(row.y.is_finite() && row.t.is_finite()) {
            return Err(Error::Validation(format!("line {line}: non-finite y or t")));
        }
        let z = match row.z {
            v if v == 0.0 => 0u8,
            v if v == 1.0 => 1u8,
            v => return Err(Error::Validation(format!("line {line}: z = {v} is not 0 or 1"))),
        };
        let i = *protein_index.entry(row.protein_id.clone()).or_insert_with(|| {
            protein_ids.push(row.protein_id.clone());
            protein_ids.len() - 1
        });
        let j = match subject_index.get(&row.subject_id) {
            Some(&j) => {
                if ages[j] != row.t || conditions[j] != z {
                    return Err(Error::Validation(format!(
                        "line {line}: subject '{}' has inconsistent t or z",
                        row.subject_id
                    )));
                }
                j
            }
            None => {
                subject_ids.push(row.subject_id.clone());
                ages.push(row.t);
                conditions.push(z);
                subject_index.insert(row.subject_id.clone(), subject_ids.len() - 1);
                subject_ids.len() - 1
            }
        };
        if cells.insert((i, j), row.y).is_some() {
            return Err(Error::Validation(format!(
                "line {line}: duplicate row for protein '{}', subject '{}'",
                row.protein_id, row.subject_id
            )));
        }
    }
    let (n_i, n_j) = (protein_ids.len(), subject_ids.len());
    if n_i == 0 {
        return Err(Error::Validation("protein CSV has no data rows".into()));
    }
    let missing: Vec<String> = (0..n_i)
        .flat_map(|i| (0..n_j).map(move |j| (i, j)))
        .filter(|c| !cells.contains_key(c))
        .map(|(i, j)| format!("({}, {})", protein_ids[i], subject_ids[j]))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).map(String::as_str).collect();
        return Err(Error::Validation(format!(
            "{} missing (protein, subject) cells: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 20 { ", ..." } else { "" }
        )));
    }
    let data = DMatrix::from_fn(n_i, n_j, |i, j| cells[&(i, j)]);
    Ok(ProteinData {
        protein_ids,
        subject_ids,
        data,
        ages,
        conditions,
    })
}

pub fn write_protein_csv(path: &Path, d: &ProteinData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["protein_id", "subject_id", "y", "z", "t"])?;
    for (i, p) in d.protein_ids.iter().enumerate() {
        for (j, s) in d.subject_ids.iter().enumerate() {
            w.write_record([
                p.clone(),
                s.clone(),
                fmt_f64(d.data[(i, j)]),
                d.conditions[j].to_string(),
                fmt_f64(d.ages[j]),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Where a fit's data came from and how it was prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Nested {
        config: NestedModelConfig,
        data_path: String,
        normalization: Normalization,
        log_transform: bool,
    },
    Ddp {
        config: DdpConfig,
        data_path: String,
        time_scale: TimeScale,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knots: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boundary: Option<[f64; 2]>,
    },
}

impl ModelSpec {
    pub fn data_path(&self) -> &str {
        match self {
            ModelSpec::Nested { data_path, .. } | ModelSpec::Ddp { data_path, .. } => data_path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub software_version: String,
    pub spec: ModelSpec,
    pub seed: u64,
    /// RNG stream, equal to the chain index.
    pub chain: u64,
    pub settings: ChainSettings,
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_draws: usize,
    pub files: Vec<String>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != ARCHIVE_FORMAT {
        return Err(Error::Validation(format!("unsupported archive format '{}'", m.format)));
    }
    Ok(m)
}

/// Text with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: impl IntoIterator<Item = String>) -> Table {
        let mut header = vec!["iteration".to_string()];
        header.extend(columns);
        Table { header, rows: Vec::new() }
    }

    fn push<T: ToString>(&mut self, iteration: usize, values: impl IntoIterator<Item = T>) {
        let mut row = vec![iteration.to_string()];
        row.extend(values.into_iter().map(|v| v.to_string()));
        self.rows.push(row);
    }

    fn push_f64(&mut self, iteration: usize, values: impl IntoIterator<Item = f64>) {
        self.push(iteration, values.into_iter().map(fmt_f64));
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path, n_columns: usize, n_rows: usize) -> Result<Table> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() != n_columns + 1 {
            return Err(Error::Validation(format!(
                "{} has {} columns, expected {}",
                path.display(),
                header.len(),
                n_columns + 1
            )));
        }
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        if rows.len() != n_rows {
            return Err(Error::Validation(format!(
                "{} has {} draws, manifest declares {n_rows}",
                path.display(),
                rows.len()
            )));
        }
        Ok(Table { header, rows })
    }

    fn iterations(&self) -> Result<Vec<usize>> {
        self.rows.iter().map(|r| parse(&r[0])).collect()
    }

    fn values<T: std::str::FromStr>(&self, draw: usize) -> Result<Vec<T>> {
        self.rows[draw][1..].iter().map(|v| parse(v)).collect()
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Validation(format!("unparseable archive value '{s}'")))
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn indexed2(prefix: &str, a: usize, b: usize) -> Vec<String> {
    (0..a).flat_map(|x| (0..b).map(move |y| format!("{prefix}{x}_{y}"))).collect()
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn log_joint_table(iterations: &[usize], log_joint: &[f64]) -> Table {
    let mut t = Table::new(["log_joint".to_string()]);
    for (&it, &lp) in iterations.iter().zip(log_joint) {
        t.push_f64(it, [lp]);
    }
    t
}

fn new_manifest(spec: ModelSpec, seed: u64, chain: u64, settings: ChainSettings, dims: (usize, usize), n_draws: usize, files: &[&str]) -> Manifest {
    Manifest {
        format: ARCHIVE_FORMAT.into(),
        software_version: env!("CARGO_PKG_VERSION").into(),
        spec,
        seed,
        chain,
        settings,
        n_rows: dims.0,
        n_cols: dims.1,
        n_draws,
        files: files.iter().map(|f| f.to_string()).collect(),
    }
}

const NESTED_FILES: [&str; 7] = [
    "subject_labels.csv",
    "row_labels.csv",
    "pi_sticks.csv",
    "w_sticks.csv",
    "mu.csv",
    "sigma2.csv",
    "log_joint.csv",
];

/// Write a nested-model chain; `spec` must be the `Nested` variant.
pub fn write_nested_archive(dir: &Path, spec: ModelSpec, seed: u64, chain_id: u64, settings: ChainSettings, chain: &NestedChain) -> Result<Manifest> {
    let config = match &spec {
        ModelSpec::Nested { config, .. } => config.clone(),
        _ => return Err(Error::Validation("nested archive needs a nested model spec".into())),
    };
    let first = chain.draws.first().ok_or_else(|| Error::Validation("chain has no draws".into()))?;
    let (n_i, n_j) = (first.partition.n_rows(), first.partition.n_cols());
    let (k, l) = (config.k, config.l);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = Table::new(indexed("s_", n_j));
    let mut m = Table::new(indexed2("m_", k, n_i));
    let mut pi = Table::new(indexed("v_", k));
    let mut w = Table::new(indexed2("v_", k, l));
    let mut mu = Table::new(indexed("mu_", l));
    let mut sigma2 = Table::new(indexed("sigma2_", l));
    for (d, &it) in chain.draws.iter().zip(&chain.iterations) {
        s.push(it, d.partition.subject_labels.iter());
        m.push(it, d.partition.row_labels.iter().flatten());
        pi.push_f64(it, d.pi.sticks.iter().copied());
        w.push_f64(it, d.w.iter().flat_map(|wk| wk.sticks.iter().copied()));
        mu.push_f64(it, d.mu.iter().copied());
        sigma2.push_f64(it, d.sigma2.iter().copied());
    }
    let tables = [s, m, pi, w, mu, sigma2, log_joint_table(&chain.iterations, &chain.log_joint)];
    for (t, f) in tables.iter().zip(NESTED_FILES) {
        t.write(&dir.join(f))?;
    }
    let manifest = new_manifest(spec, seed, chain_id, settings, (n_i, n_j), chain.draws.len(), &NESTED_FILES);
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn read_nested_archive(dir: &Path) -> Result<(Manifest, NestedChain)> {
    let manifest = read_manifest(dir)?;
    let config = match &manifest.spec {
        ModelSpec::Nested { config, .. } => config.clone(),
        _ => return Err(Error::Validation(format!("{} is not a nested-model archive", dir.display()))),
    };
    let (n_i, n_j, n) = (manifest.n_rows, manifest.n_cols, manifest.n_draws);
    let (k, l) = (config.k, config.l);
    let s = Table::read(&dir.join(NESTED_FILES[0]), n_j, n)?;
    let m = Table::read(&dir.join(NESTED_FILES[1]), k * n_i, n)?;
    let pi = Table::read(&dir.join(NESTED_FILES[2]), k, n)?;
    let w = Table::read(&dir.join(NESTED_FILES[3]), k * l, n)?;
    let mu = Table::read(&dir.join(NESTED_FILES[4]), l, n)?;
    let sigma2 = Table::read(&dir.join(NESTED_FILES[5]), l, n)?;
    let lj = Table::read(&dir.join(NESTED_FILES[6]), 1, n)?;
    let iterations = s.iterations()?;
    let mut draws = Vec::with_capacity(n);
    let mut log_joint = Vec::with_capacity(n);
    for d in 0..n {
        let rows: Vec<usize> = m.values(d)?;
        let row_labels = rows.chunks(n_i.max(1)).map(<[usize]>::to_vec).collect();
        let w_sticks: Vec<f64> = w.values(d)?;
        let w = w_sticks
            .chunks(l)
            .map(|c| StickWeights {
                sticks: c.to_vec(),
                weights: weights_from_sticks(c),
            })
            .collect();
        let pi_sticks: Vec<f64> = pi.values(d)?;
        draws.push(NestedState {
            partition: NestedPartitionState::new(s.values(d)?, row_labels, k, l)?,
            pi: StickWeights {
                weights: weights_from_sticks(&pi_sticks),
                sticks: pi_sticks,
            },
            w,
            mu: mu.values(d)?,
            sigma2: sigma2.values(d)?,
        });
        log_joint.push(lj.values::<f64>(d)?[0]);
    }
    Ok((
        manifest,
        NestedChain {
            draws,
            log_joint,
            iterations,
        },
    ))
}

const DDP_FILES: [&str; 8] = [
    "labels.csv",
    "sticks.csv",
    "beta.csv",
    "sigma2.csv",
    "delta.csv",
    "alpha.csv",
    "log_joint.csv",
    "gamma.csv",
];

/// Write an ANOVA DDP chain; `spec` must be the `Ddp` variant. `gamma.csv`
/// is written when the chain tracked slope differences.
pub fn write_ddp_archive(dir: &Path, spec: ModelSpec, seed: u64, chain_id: u64, settings: ChainSettings, chain: &DdpChain) -> Result<Manifest> {
    let h = match &spec {
        ModelSpec::Ddp { config, .. } => config.h,
        _ => return Err(Error::Validation("DDP archive needs a DDP model spec".into())),
    };
    let first = chain.draws.first().ok_or_else(|| Error::Validation("chain has no draws".into()))?;
    let (n_i, n_t) = (first.labels.len(), first.delta.len());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = Table::new(indexed("s_", n_i));
    let mut sticks = Table::new(indexed("v_", h));
    let mut beta = Table::new(indexed2("beta_", h, NUM_COVARIATES));
    let mut sigma2 = Table::new(indexed("sigma2_", h));
    let mut delta = Table::new(indexed("delta_", n_t));
    let mut alpha = Table::new(indexed("alpha_", n_i));
    for (d, &it) in chain.draws.iter().zip(&chain.iterations) {
        labels.push(it, d.labels.iter());
        sticks.push_f64(it, d.pi.sticks.iter().copied());
        beta.push_f64(it, d.beta.iter().flatten().copied());
        sigma2.push_f64(it, d.sigma2.iter().copied());
        delta.push_f64(it, d.delta.iter().copied());
        alpha.push_f64(it, d.alpha.iter().copied());
    }
    let mut tables = vec![labels, sticks, beta, sigma2, delta, alpha, log_joint_table(&chain.iterations, &chain.log_joint)];
    if let Some(g) = &chain.gamma {
        let mut t = Table::new(indexed("gamma_", n_i));
        for (row, &it) in g.iter().zip(&chain.iterations) {
            t.push_f64(it, row.iter().copied());
        }
        tables.push(t);
    }
    let files = &DDP_FILES[..tables.len()];
    for (t, f) in tables.iter().zip(files) {
        t.write(&dir.join(f))?;
    }
    let manifest = new_manifest(spec, seed, chain_id, settings, (n_i, n_t), chain.draws.len(), files);
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Read an ANOVA DDP chain. For these archives `n_cols` counts time points.
pub fn read_ddp_archive(dir: &Path) -> Result<(Manifest, DdpChain)> {
    let manifest = read_manifest(dir)?;
    let h = match &manifest.spec {
        ModelSpec::Ddp { config, .. } => config.h,
        _ => return Err(Error::Validation(format!("{} is not a DDP archive", dir.display()))),
    };
    let (n_i, n_t, n) = (manifest.n_rows, manifest.n_cols, manifest.n_draws);
    let labels = Table::read(&dir.join(DDP_FILES[0]), n_i, n)?;
    let sticks = Table::read(&dir.join(DDP_FILES[1]), h, n)?;
    let beta = Table::read(&dir.join(DDP_FILES[2]), h * NUM_COVARIATES, n)?;
    let sigma2 = Table::read(&dir.join(DDP_FILES[3]), h, n)?;
    let delta = Table::read(&dir.join(DDP_FILES[4]), n_t, n)?;
    let alpha = Table::read(&dir.join(DDP_FILES[5]), n_i, n)?;
    let lj = Table::read(&dir.join(DDP_FILES[6]), 1, n)?;
    let gamma = if manifest.files.iter().any(|f| f == DDP_FILES[7]) {
        Some(Table::read(&dir.join(DDP_FILES[7]), n_i, n)?)
    } else {
        None
    };
    let iterations = labels.iterations()?;
    let mut draws = Vec::with_capacity(n);
    let mut log_joint = Vec::with_capacity(n);
    for d in 0..n {
        let v: Vec<f64> = sticks.values(d)?;
        let b: Vec<f64> = beta.values(d)?;
        draws.push(DdpState {
            labels: labels.values(d)?,
            pi: StickWeights {
                weights: weights_from_sticks(&v),
                sticks: v,
            },
            beta: b.chunks(NUM_COVARIATES).map(<[f64]>::to_vec).collect(),
            sigma2: sigma2.values(d)?,
            delta: delta.values(d)?,
            alpha: alpha.values(d)?,
        });
        log_joint.push(lj.values::<f64>(d)?[0]);
    }
    let gamma = gamma.map(|g| (0..n).map(|d| g.values(d)).collect::<Result<Vec<Vec<f64>>>>()).transpose()?;
    Ok((
        manifest,
        DdpChain {
            draws,
            log_joint,
            iterations,
            gamma,
        },
    ))
}

/// Chain subdirectories `chain_0, chain_1, …` of a run directory, or the
/// directory itself when it is a single archive.
pub fn chain_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    if run.join(MANIFEST_FILE).exists() {
        return Ok(vec![run.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for c in 0.. {
        let d = run.join(chain_dir_name(c));
        if !d.join(MANIFEST_FILE).exists() {
            break;
        }
        dirs.push(d);
    }
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no chain archive found under {}", run.display())));
    }
    Ok(dirs)
}

pub fn chain_dir_name(chain: usize) -> String {
    format!("chain_{chain}")
}

/// Fit settings read from a JSON or TOML file; absent keys keep defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub m0: Option<f64>,
    pub kappa0: Option<f64>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub log_transform: Option<bool>,
    pub normalize: Option<Normalization>,
    #[serde(rename = "H")]
    pub h: Option<usize>,
    pub xi: Option<f64>,
    pub beta0: Option<Vec<f64>>,
    pub sigma_beta0: Option<f64>,
    pub zeta: Option<f64>,
    pub omega2: Option<f64>,
    pub mu0: Option<f64>,
    pub sigma02: Option<f64>,
    pub time_scale: Option<TimeScale>,
    pub knots: Option<[f64; 2]>,
    pub boundary: Option<[f64; 2]>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Nested-model configuration: empirical defaults from `data`,
    /// overridden by any keys present.
    pub fn nested_config(&self, data: &DMatrix<f64>) -> Result<NestedModelConfig> {
        let mut c = NestedModelConfig::empirical(data)?;
        let p = c.atom_prior;
        c.k = self.k.unwrap_or(c.k);
        c.l = self.l.unwrap_or(c.l);
        c.alpha = self.alpha.unwrap_or(c.alpha);
        c.beta = self.beta.unwrap_or(c.beta);
        c.atom_prior = NormalInvGammaParams::new(
            self.m0.unwrap_or(p.m0),
            self.kappa0.unwrap_or(p.kappa0),
            self.a0.unwrap_or(p.a0),
            self.b0.unwrap_or(p.b0),
        )?;
        c.validate()?;
        Ok(c)
    }

    pub fn ddp_config(&self) -> Result<DdpConfig> {
        let d = DdpConfig::default();
        let c = DdpConfig {
            h: self.h.unwrap_or(d.h),
            xi: self.xi.unwrap_or(d.xi),
            beta0: self.beta0.clone().unwrap_or(d.beta0),
            sigma_beta0: self.sigma_beta0.unwrap_or(d.sigma_beta0),
            a0: self.a0.unwrap_or(d.a0),
            b0: self.b0.unwrap_or(d.b0),
            zeta: self.zeta.unwrap_or(d.zeta),
            omega2: self.omega2.unwrap_or(d.omega2),
            mu0: self.mu0.unwrap_or(d.mu0),
            sigma02: self.sigma02.unwrap_or(d.sigma02),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Write `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
