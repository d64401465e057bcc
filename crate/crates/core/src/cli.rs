//! Command-line surface of the `sepex` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::ddp::{self, DdpChain, DdpConfig};
use crate::error::{Error, Result};
use crate::exch::{
    check_coclustering_borrowing, check_partial_corr, check_separate_corr, ddp_prior_theta, nested_prior_arrays,
    nested_prior_row_labels, CheckReport, ConstructedPrior, PartiallyExchangeableControl, Rule,
};
use crate::io::{
    chain_dir_name, chain_dirs, load_otu_csv, load_protein_csv, read_ddp_archive, read_manifest, read_nested_archive,
    write_ddp_archive, write_json, write_matrix_csv, write_nested_archive, write_protein_csv, ModelSpec, Normalization,
    ProteinData, RunConfig,
};
use crate::mcmc::ChainSettings;
use crate::nested::{self, NestedChain, NestedModelConfig};
use crate::partition::Partition;
use crate::rng::{NormalInvGammaParams, SeededRng};
use crate::simdata::{simulate_nested, simulate_protein, ProteinSimTruth};
use crate::spline::{RegressionDesign, TimeScale};
use crate::summaries::{
    dahl_point_estimate, fit_diagnostics, ks_standard_normal, map_cluster_count, mean_gamma, naive_gamma_hat,
    nested_coclustering, qq_points, rank_quantile, rao_blackwell_gamma, top_set_size, DahlEstimate,
};

const DEFAULT_ITERS: usize = 5000;
const DEFAULT_BURNIN: usize = 1000;
const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "sepex", version, about = "Separately exchangeable nonparametric Bayesian models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic data set and its truth.
    Simulate(SimulateArgs),
    /// Fit the nested-partition mixture to a matrix CSV.
    FitNested(FitNestedArgs),
    /// Fit the ANOVA DDP spline regression to long-format protein data.
    FitDdp(FitDdpArgs),
    /// Partition point estimates, cluster counts and co-clustering.
    Summarize(ArchiveArgs),
    /// Quantile ranking of slope differences.
    Rank(RankArgs),
    /// Monte Carlo checks of the exchangeability inequalities.
    CheckExch(CheckExchArgs),
    /// Residual and R² diagnostics of an ANOVA DDP fit.
    Diagnose(ArchiveArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimModel {
    Protein,
    Nested,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: SimModel,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON or TOML config (nested model keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows: proteins or OTUs.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Columns: subjects.
    #[arg(long)]
    pub cols: Option<usize>,
    /// Spacing of nested-model atom means, in atom sd units.
    #[arg(long)]
    pub separation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON or TOML config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Independent chains run in parallel, one RNG stream each.
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitNestedArgs {
    #[command(flatten)]
    pub chain: ChainArgs,
    /// rel_freq, avg_library or none.
    #[arg(long)]
    pub normalize: Option<Normalization>,
    /// Apply `ln(1 + y)` after normalizing.
    #[arg(long)]
    pub log_transform: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TimeScaleArg {
    Index,
    Continuous,
}

#[derive(Debug, Args)]
pub struct FitDdpArgs {
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, value_enum)]
    pub time_scale: Option<TimeScaleArg>,
    /// Interior knots `k1,k2` on the scaled time axis.
    #[arg(long, value_parser = parse_pair)]
    pub knots: Option<[f64; 2]>,
    /// Spline boundary `lo,hi`; defaults to the range of the scaled times.
    #[arg(long, value_parser = parse_pair)]
    pub boundary: Option<[f64; 2]>,
}

#[derive(Debug, Args)]
pub struct ArchiveArgs {
    /// Run directory (with chain_N subdirectories) or one chain archive.
    #[arg(long)]
    pub archive: PathBuf,
    /// Use only this chain instead of pooling all of them.
    #[arg(long)]
    pub chain: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Condition on the point partition by keeping the sampled draws that
    /// match it, instead of re-running the chain with the partition frozen.
    /// Falls back to the re-run when no draw matches.
    #[arg(long)]
    pub filter_draws: bool,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub archive: ArchiveArgs,
    /// Quantile level; the top `1 − c` fraction is reported.
    #[arg(long, default_value_t = 0.975)]
    pub c: f64,
    /// Report this many items instead of `⌈(1 − c)(I + 1)⌉`.
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckExchArgs {
    #[arg(long, default_value_t = 100_000)]
    pub n_draws: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(format!("expected two comma-separated numbers, got '{s}'")),
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::FitNested(a) => fit_nested(a),
        Command::FitDdp(a) => fit_ddp(a),
        Command::Summarize(a) => summarize(a),
        Command::Rank(a) => rank(a),
        Command::CheckExch(a) => check_exch(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or(Ok(RunConfig::default()), RunConfig::load)
}

fn simulation_nested_config(cfg: &RunConfig) -> Result<NestedModelConfig> {
    NestedModelConfig::new(
        cfg.k.unwrap_or(5),
        cfg.l.unwrap_or(10),
        cfg.alpha.unwrap_or(1.0),
        cfg.beta.unwrap_or(1.0),
        NormalInvGammaParams::new(
            cfg.m0.unwrap_or(0.0),
            cfg.kappa0.unwrap_or(0.1),
            cfg.a0.unwrap_or(3.0),
            cfg.b0.unwrap_or(1.0),
        )?,
    )
}

#[derive(Serialize)]
struct ProteinTruthFile<'a> {
    truth: &'a ProteinSimTruth,
    true_s: &'a [usize],
    true_delta: &'a [f64],
    true_alpha: &'a [f64],
}

#[derive(Serialize)]
struct NestedTruthFile<'a> {
    config: &'a NestedModelConfig,
    separation: Option<f64>,
    subject_labels: &'a [usize],
    row_labels: &'a [Vec<usize>],
    mu: &'a [f64],
    sigma2: &'a [f64],
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let mut rng = SeededRng::new(seed, 0);
    create_dir(&a.out)?;
    match a.model {
        SimModel::Protein => {
            let d = ProteinSimTruth::default();
            let truth = ProteinSimTruth {
                n_proteins: a.rows.unwrap_or(d.n_proteins),
                n_subjects: a.cols.unwrap_or(d.n_subjects),
                ..d
            };
            let sim = simulate_protein(&truth, &mut rng)?;
            let data = ProteinData {
                protein_ids: (0..truth.n_proteins).map(|i| format!("p{i:04}")).collect(),
                subject_ids: (0..truth.n_subjects).map(|j| format!("s{j:03}")).collect(),
                data: sim.data.clone(),
                ages: sim.times.clone(),
                conditions: sim.conditions.clone(),
            };
            write_protein_csv(&a.out.join("data.csv"), &data)?;
            write_json(
                &a.out.join("truth.json"),
                &ProteinTruthFile {
                    truth: &truth,
                    true_s: &sim.true_s,
                    true_delta: &sim.true_delta,
                    true_alpha: &sim.true_alpha,
                },
            )
        }
        SimModel::Nested => {
            let config = simulation_nested_config(&cfg)?;
            let (rows, cols) = (a.rows.unwrap_or(30), a.cols.unwrap_or(10));
            let sim = simulate_nested(&config, rows, cols, &mut rng, a.separation)?;
            let row_names: Vec<String> = (0..rows).map(|i| format!("otu{i:04}")).collect();
            let col_names: Vec<String> = (0..cols).map(|j| format!("s{j:03}")).collect();
            write_matrix_csv(&a.out.join("data.csv"), &row_names, &col_names, &sim.data)?;
            write_json(
                &a.out.join("truth.json"),
                &NestedTruthFile {
                    config: &config,
                    separation: a.separation,
                    subject_labels: &sim.truth.partition.subject_labels,
                    row_labels: &sim.truth.partition.row_labels,
                    mu: &sim.truth.mu,
                    sigma2: &sim.truth.sigma2,
                },
            )
        }
    }
}

fn chain_settings(a: &ChainArgs, cfg: &RunConfig) -> Result<ChainSettings> {
    let iters = a.iters.or(cfg.iters).unwrap_or(DEFAULT_ITERS);
    let burnin = a.burnin.or(cfg.burnin).unwrap_or(DEFAULT_BURNIN.min(iters / 2));
    ChainSettings::new(iters, burnin, a.thin.or(cfg.thin).unwrap_or(1))
}

fn absolute(path: &Path) -> Result<String> {
    let p = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    Ok(p.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct RunRecord {
    chains: Vec<ChainRecord>,
}

#[derive(Serialize)]
struct ChainRecord {
    dir: String,
    wall_time_secs: f64,
}

/// Run `n` chains on separate threads, chain `c` on stream `c`, then write
/// `run.json` with wall times next to the chain directories.
fn run_chains<F>(out: &Path, n: usize, seed: u64, job: F) -> Result<()>
where
    F: Fn(u64, &mut SeededRng, &Path) -> Result<()> + Sync,
{
    if n == 0 {
        return Err(Error::Validation("--chains must be at least 1".into()));
    }
    create_dir(out)?;
    let results: Vec<Result<ChainRecord>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|c| {
                let job = &job;
                s.spawn(move || {
                    let start = Instant::now();
                    let dir = out.join(chain_dir_name(c));
                    let mut rng = SeededRng::new(seed, c as u64);
                    job(c as u64, &mut rng, &dir)?;
                    Ok(ChainRecord {
                        dir: chain_dir_name(c),
                        wall_time_secs: start.elapsed().as_secs_f64(),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_json(&out.join("run.json"), &RunRecord { chains })
}

fn fit_nested(a: FitNestedArgs) -> Result<()> {
    let cfg = load_config(a.chain.config.as_deref())?;
    let normalization = a.normalize.or(cfg.normalize).unwrap_or_default();
    let log_transform = a.log_transform || cfg.log_transform.unwrap_or(false);
    let table = load_otu_csv(&a.chain.data, normalization, log_transform)?;
    let config = cfg.nested_config(&table.y)?;
    let settings = chain_settings(&a.chain, &cfg)?;
    let seed = a.chain.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let spec = ModelSpec::Nested {
        config: config.clone(),
        data_path: absolute(&a.chain.data)?,
        normalization,
        log_transform,
    };
    run_chains(&a.chain.out, a.chain.chains, seed, |c, rng, dir| {
        let chain = nested::run_chain(&table.y, &config, &settings, None, rng)?;
        write_nested_archive(dir, spec.clone(), seed, c, settings, &chain).map(|_| ())
    })
}

fn fit_ddp(a: FitDdpArgs) -> Result<()> {
    let cfg = load_config(a.chain.config.as_deref())?;
    let data = load_protein_csv(&a.chain.data)?;
    let time_scale = match a.time_scale {
        Some(TimeScaleArg::Index) => TimeScale::Index,
        Some(TimeScaleArg::Continuous) => TimeScale::Continuous,
        None => cfg.time_scale.unwrap_or_default(),
    };
    let knots = a.knots.or(cfg.knots);
    let boundary = a.boundary.or(cfg.boundary);
    let design = data.design(time_scale, knots, boundary)?;
    for w in data.warnings(&design) {
        eprintln!("warning: {w}");
    }
    let config = cfg.ddp_config()?;
    let settings = chain_settings(&a.chain, &cfg)?;
    let seed = a.chain.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let spec = ModelSpec::Ddp {
        config: config.clone(),
        data_path: absolute(&a.chain.data)?,
        time_scale,
        knots,
        boundary,
    };
    run_chains(&a.chain.out, a.chain.chains, seed, |c, rng, dir| {
        let chain = ddp::run_chain(&data.data, &design, &config, &settings, None, rng)?;
        write_ddp_archive(dir, spec.clone(), seed, c, settings, &chain).map(|_| ())
    })
}

fn selected_dirs(a: &ArchiveArgs) -> Result<Vec<PathBuf>> {
    let dirs = chain_dirs(&a.archive)?;
    match a.chain {
        None => Ok(dirs),
        Some(c) => dirs
            .get(c)
            .cloned()
            .map(|d| vec![d])
            .ok_or_else(|| Error::Validation(format!("chain {c} not found ({} chains)", dirs.len()))),
    }
}

fn pooled_nested(a: &ArchiveArgs) -> Result<(ModelSpec, NestedChain)> {
    let mut pooled: Option<(ModelSpec, NestedChain)> = None;
    for dir in selected_dirs(a)? {
        let (m, c) = read_nested_archive(&dir)?;
        match pooled.as_mut() {
            None => pooled = Some((m.spec, c)),
            Some((_, p)) => {
                p.draws.extend(c.draws);
                p.log_joint.extend(c.log_joint);
                p.iterations.extend(c.iterations);
            }
        }
    }
    Ok(pooled.expect("at least one chain"))
}

struct DdpRun {
    settings: ChainSettings,
    seed: u64,
    chain: DdpChain,
    data: ProteinData,
    design: RegressionDesign,
    config: DdpConfig,
}

fn pooled_ddp(a: &ArchiveArgs) -> Result<DdpRun> {
    let mut pooled: Option<(crate::io::Manifest, DdpChain)> = None;
    for dir in selected_dirs(a)? {
        let (m, c) = read_ddp_archive(&dir)?;
        match pooled.as_mut() {
            None => pooled = Some((m, c)),
            Some((_, p)) => {
                p.draws.extend(c.draws);
                p.log_joint.extend(c.log_joint);
                p.iterations.extend(c.iterations);
                if let (Some(g), Some(h)) = (p.gamma.as_mut(), c.gamma) {
                    g.extend(h);
                }
            }
        }
    }
    let (manifest, chain) = pooled.expect("at least one chain");
    let ModelSpec::Ddp {
        config,
        data_path,
        time_scale,
        knots,
        boundary,
    } = manifest.spec
    else {
        return Err(Error::Validation("not a DDP archive".into()));
    };
    let data = load_protein_csv(Path::new(&data_path))?;
    let design = data.design(time_scale, knots, boundary)?;
    Ok(DdpRun {
        settings: manifest.settings,
        seed: manifest.seed,
        chain,
        data,
        design,
        config,
    })
}

#[derive(Serialize)]
struct PartitionSummary {
    model: &'static str,
    n_draws: usize,
    k_plus_mode: usize,
    k_plus_frequencies: Vec<(usize, usize)>,
    point_estimate: Vec<usize>,
    binder_loss: f64,
    estimate_source: crate::summaries::EstimateSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    coclustering_source: Option<&'static str>,
}

fn frequencies(counts: &[usize]) -> Vec<(usize, usize)> {
    let mut m = std::collections::BTreeMap::new();
    for &k in counts {
        *m.entry(k).or_insert(0) += 1;
    }
    m.into_iter().collect()
}

fn summarize(a: ArchiveArgs) -> Result<()> {
    let manifest = read_manifest(&selected_dirs(&a)?[0])?;
    create_dir(&a.out)?;
    match manifest.spec {
        ModelSpec::Nested { .. } => summarize_nested(&a),
        ModelSpec::Ddp { .. } => summarize_ddp(&a),
    }
}

fn write_labels(path: &Path, ids: &[String], labels: &[usize], column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", column])?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id.clone(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summarize_nested(a: &ArchiveArgs) -> Result<()> {
    let (spec, chain) = pooled_nested(a)?;
    let ModelSpec::Nested {
        config,
        data_path,
        normalization,
        log_transform,
    } = &spec
    else {
        unreachable!("checked by caller")
    };
    let subject_draws: Vec<&[usize]> = chain.draws.iter().map(|d| d.partition.subject_labels.as_slice()).collect();
    let k_plus: Vec<usize> = chain.draws.iter().map(|d| d.n_occupied_subject_clusters()).collect();
    let estimate = dahl_point_estimate(&subject_draws)?;
    let table = load_otu_csv(Path::new(data_path), *normalization, *log_transform)?;
    let filtered = match a.filter_draws {
        true => nested_coclustering(&chain.draws, &estimate.partition).ok(),
        false => None,
    };
    let (matrices, source) = match filtered {
        Some(m) => (m, "matching draws"),
        None => {
            let manifest = read_manifest(&selected_dirs(a)?[0])?;
            let mut rng = SeededRng::new(a.seed.unwrap_or(manifest.seed), u64::MAX);
            let frozen = nested::run_chain(&table.y, config, &manifest.settings, Some(estimate.partition.labels()), &mut rng)?;
            (nested_coclustering(&frozen.draws, &estimate.partition)?, "conditional re-run")
        }
    };
    write_labels(&a.out.join("subject_clusters.csv"), &table.subject_names, estimate.partition.labels(), "cluster")?;
    for (c, m) in matrices.iter().enumerate() {
        write_matrix_csv(&a.out.join(format!("coclustering_{c}.csv")), &table.row_names, &table.row_names, m)?;
    }
    write_json(
        &a.out.join("summary.json"),
        &PartitionSummary {
            model: "nested",
            n_draws: chain.draws.len(),
            k_plus_mode: map_cluster_count(k_plus.iter().copied())?,
            k_plus_frequencies: frequencies(&k_plus),
            point_estimate: estimate.partition.labels().to_vec(),
            binder_loss: estimate.loss,
            estimate_source: estimate.source,
            coclustering_source: Some(source),
        },
    )
}

fn ddp_point_estimate(run: &DdpRun) -> Result<(DahlEstimate, Vec<usize>)> {
    let labels: Vec<&[usize]> = run.chain.draws.iter().map(|d| d.labels.as_slice()).collect();
    let k_plus = run.chain.draws.iter().map(|d| d.n_occupied()).collect();
    Ok((dahl_point_estimate(&labels)?, k_plus))
}

/// Draws given the point partition: a re-run with labels frozen at `point`,
/// or with `filter` the sampled draws matching it when there are any.
fn conditional_draws(run: &DdpRun, point: &Partition, seed: Option<u64>, filter: bool) -> Result<Vec<ddp::DdpState>> {
    if filter {
        let matching: Vec<_> = run
            .chain
            .draws
            .iter()
            .filter(|d| Partition::canonical_unchecked(&d.labels) == *point)
            .cloned()
            .collect();
        if !matching.is_empty() {
            return Ok(matching);
        }
    }
    let mut rng = SeededRng::new(seed.unwrap_or(run.seed), u64::MAX);
    let chain = ddp::run_chain(&run.data.data, &run.design, &run.config, &run.settings, Some(point.labels()), &mut rng)?;
    Ok(chain.draws)
}

#[derive(Serialize)]
struct DdpSummary {
    #[serde(flatten)]
    partition: PartitionSummary,
    gamma_available: bool,
}

fn summarize_ddp(a: &ArchiveArgs) -> Result<()> {
    let run = pooled_ddp(a)?;
    let (estimate, k_plus) = ddp_point_estimate(&run)?;
    write_labels(&a.out.join("protein_clusters.csv"), &run.data.protein_ids, estimate.partition.labels(), "cluster")?;
    let gamma_available = run.chain.gamma.is_some();
    if let Some(g) = &run.chain.gamma {
        let rb = rao_blackwell_gamma(&run.chain.draws, &run.data.data, &run.design, &run.config)?;
        let mc = mean_gamma(g)?;
        let naive = naive_gamma_hat(&run.data.data, &run.design).ok();
        let path = a.out.join("gamma.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["id", "gamma_rao_blackwell", "gamma_mean", "gamma_naive"])?;
        for (i, id) in run.data.protein_ids.iter().enumerate() {
            let nv = naive.as_ref().map_or(String::new(), |n| crate::io::fmt_f64(n[i]));
            w.write_record([id.clone(), crate::io::fmt_f64(rb[i]), crate::io::fmt_f64(mc[i]), nv])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    write_json(
        &a.out.join("summary.json"),
        &DdpSummary {
            partition: PartitionSummary {
                model: "ddp",
                n_draws: run.chain.draws.len(),
                k_plus_mode: map_cluster_count(k_plus.iter().copied())?,
                k_plus_frequencies: frequencies(&k_plus),
                point_estimate: estimate.partition.labels().to_vec(),
                binder_loss: estimate.loss,
                estimate_source: estimate.source,
                coclustering_source: None,
            },
            gamma_available,
        },
    )
}

#[derive(Serialize)]
struct RankSummary {
    c: f64,
    n_items: usize,
    n_selected: usize,
    default_top_size: usize,
    selected: Vec<String>,
}

fn rank(a: RankArgs) -> Result<()> {
    let run = pooled_ddp(&a.archive)?;
    let gamma = run
        .chain
        .gamma
        .as_ref()
        .ok_or_else(|| Error::Validation("archive has no slope differences (patient corner subjects missing)".into()))?;
    let report = rank_quantile(gamma, a.c)?;
    let n = report.r_star.len();
    let selected = match a.top {
        Some(t) => report.top(t.min(n)),
        None => report.selected.clone(),
    };
    create_dir(&a.archive.out)?;
    let path = a.archive.out.join("rank.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "exceed_prob", "r_star", "selected"])?;
    for i in 0..n {
        w.write_record([
            run.data.protein_ids[i].clone(),
            crate::io::fmt_f64(report.exceed_prob[i]),
            report.r_star[i].to_string(),
            u8::from(selected.contains(&i)).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(
        &a.archive.out.join("rank.json"),
        &RankSummary {
            c: a.c,
            n_items: n,
            n_selected: selected.len(),
            default_top_size: top_set_size(a.c, n),
            selected: selected.iter().map(|&i| run.data.protein_ids[i].clone()).collect(),
        },
    )
}

#[derive(Serialize)]
struct ExchReport {
    n_draws: usize,
    seed: u64,
    all_pass: bool,
    checks: Vec<CheckReport>,
}

/// Prior settings used by the checks: atom variances with finite fourth
/// moments so that product standard errors exist.
pub fn exch_nested_config() -> NestedModelConfig {
    NestedModelConfig::new(20, 30, 1.0, 1.0, NormalInvGammaParams::new(0.0, 0.1, 4.0, 3.0).expect("valid"))
        .expect("valid")
}

pub fn exch_ddp_design() -> RegressionDesign {
    let ages = [1.0, 2.0, 3.0, 4.0];
    RegressionDesign::new(&ages, &[0, 0, 0, 0], TimeScale::Index, None).expect("valid design")
}

/// Every exchangeability check at `n_draws`, each on its own RNG stream.
pub fn run_exchangeability_suite(n_draws: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let nested = exch_nested_config();
    let ddp_config = DdpConfig::default();
    let rng = |s: u64| SeededRng::new(seed, s);
    let control = PartiallyExchangeableControl {
        truncation: nested.l,
        mass: nested.alpha,
    };
    Ok(vec![
        check_partial_corr("nested", nested_prior_arrays(nested.clone(), 3, 3), n_draws, Rule::AtLeast, &mut rng(1))?,
        check_partial_corr(
            "ddp_theta",
            ddp_prior_theta(ddp_config.clone(), exch_ddp_design(), 3),
            n_draws,
            Rule::AtLeast,
            &mut rng(2),
        )?,
        check_separate_corr("nested", nested_prior_arrays(nested.clone(), 3, 3), n_draws, Rule::AtLeast, &mut rng(3))?,
        check_separate_corr("ddp_theta", ddp_prior_theta(ddp_config, exch_ddp_design(), 3), n_draws, Rule::AtLeast, &mut rng(4))?,
        check_coclustering_borrowing("nested", nested_prior_row_labels(nested, 3, 2), n_draws, Rule::Exceeds, &mut rng(5))?,
        check_coclustering_borrowing(
            "partially_exchangeable_control",
            control.row_labels(3, 2),
            n_draws,
            Rule::Equal,
            &mut rng(6),
        )?,
        check_partial_corr("column_effect", ConstructedPrior::ColumnEffect.sampler(3, 3), n_draws, Rule::Exceeds, &mut rng(7))?,
        check_separate_corr(
            "row_column_effect",
            ConstructedPrior::RowColumnEffect.sampler(3, 3),
            n_draws,
            Rule::Exceeds,
            &mut rng(8),
        )?,
        check_separate_corr("iid", ConstructedPrior::Iid.sampler(3, 3), n_draws, Rule::Equal, &mut rng(9))?,
    ])
}

fn check_exch(a: CheckExchArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let checks = run_exchangeability_suite(a.n_draws, seed)?;
    let all_pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!(
            "{} {:<14} {:<32} diff = {:+.5} (se {:.5})",
            if c.pass { "PASS" } else { "FAIL" },
            c.check,
            c.model,
            c.difference.value,
            c.difference.se
        );
    }
    create_dir(&a.out)?;
    write_json(
        &a.out.join("exchangeability.json"),
        &ExchReport {
            n_draws: a.n_draws,
            seed,
            all_pass,
            checks,
        },
    )?;
    if all_pass {
        Ok(())
    } else {
        Err(Error::Validation("one or more exchangeability checks failed".into()))
    }
}

#[derive(Serialize)]
struct DiagnosticsReport {
    r2_per_cluster: Vec<f64>,
    mean_r2: f64,
    ks_statistic: f64,
    ks_p_value: f64,
    n_residuals: usize,
}

fn diagnose(a: ArchiveArgs) -> Result<()> {
    let run = pooled_ddp(&a)?;
    let (estimate, _) = ddp_point_estimate(&run)?;
    let draws = conditional_draws(&run, &estimate.partition, a.seed, a.filter_draws)?;
    let mut rng = SeededRng::new(a.seed.unwrap_or(run.seed), u64::MAX - 1);
    let diag = fit_diagnostics(&draws, &run.data.data, &run.design, &estimate.partition, &mut rng)?;
    let ks = ks_standard_normal(&diag.standardized_residuals)?;
    create_dir(&a.out)?;
    let qq = qq_points(&diag.standardized_residuals);
    let qq_matrix = DMatrix::from_fn(qq.len(), 2, |i, c| if c == 0 { qq[i].0 } else { qq[i].1 });
    let ids: Vec<String> = (0..qq.len()).map(|i| i.to_string()).collect();
    write_matrix_csv(&a.out.join("qq.csv"), &ids, &["theoretical".into(), "sample".into()], &qq_matrix)?;
    write_json(
        &a.out.join("diagnostics.json"),
        &DiagnosticsReport {
            mean_r2: diag.mean_r2(),
            r2_per_cluster: diag.r2_per_cluster,
            ks_statistic: ks.statistic,
            ks_p_value: ks.p_value,
            n_residuals: diag.standardized_residuals.len(),
        },
    )
}
