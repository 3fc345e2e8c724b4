//! Experiment orchestration: seeded ensembles of conditioned trees, counting
//! curves and low spectra on log grids, power-law fits, decomposition
//! statistics, and CSV/JSON persistence.

use crate::decomp::raw_split;
use crate::derive_seed;
use crate::pdlaw::StableParams;
use crate::renewal::{m_infinity_estimate, MInfEstimate};
use crate::spectra::{
    comparison_check, counting_curve, first_eig_bound_check, heat_trace, CurvePoint,
    SpectralOperator,
};
use crate::stats::{ks_critical_1pct, ks_statistic, log_log_fit, mean_se};
use crate::treegen::{
    rescale_to_metric, sample_tree_with, stable_offspring_law, ConditionedSampler, MetricTree,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::gamma::gamma;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("structural failure (replicate seed {seed}): {source}")]
    Structural {
        seed: u64,
        source: crate::spectra::SpectraError,
    },
    #[error(transparent)]
    Tree(#[from] crate::treegen::TreeError),
    #[error(transparent)]
    Spectra(#[from] crate::spectra::SpectraError),
    #[error(transparent)]
    Decomp(#[from] crate::decomp::DecompError),
    #[error(transparent)]
    Renewal(#[from] crate::renewal::RenewalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Environment variable consulted when no `output_dir` is configured.
pub const OUTPUT_DIR_ENV: &str = "STLAB_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub tree_sizes: Vec<usize>,
    pub ensemble_size: usize,
    /// Lambda grid: log-spaced; bounds are auto-probed per size when absent.
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub points_per_decade: usize,
    /// Eigenvalues extracted per tree for heat traces (0 disables).
    pub heat_k: usize,
    pub t_points_per_decade: usize,
    pub master_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            tree_sizes: vec![1000],
            ensemble_size: 20,
            lambda_min: None,
            lambda_max: None,
            points_per_decade: 16,
            heat_k: 128,
            t_points_per_decade: 12,
            master_seed: 1,
            workers: 1,
            output_dir: default_output_dir(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

impl ExperimentConfig {
    /// Parse the flat `key = value` config format (one pair per line;
    /// `#` comments; lists comma-separated).
    pub fn parse(text: &str) -> Result<Self, LabError> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| LabError::Config(format!("line {}: bad {what}: {value}", no + 1));
            match key {
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("alpha"))?,
                "tree_sizes" => {
                    cfg.tree_sizes = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("tree_sizes"))?
                }
                "ensemble_size" => {
                    cfg.ensemble_size = value.parse().map_err(|_| bad("ensemble_size"))?
                }
                "lambda_min" => cfg.lambda_min = Some(value.parse().map_err(|_| bad("lambda_min"))?),
                "lambda_max" => cfg.lambda_max = Some(value.parse().map_err(|_| bad("lambda_max"))?),
                "points_per_decade" => {
                    cfg.points_per_decade = value.parse().map_err(|_| bad("points_per_decade"))?
                }
                "heat_k" => cfg.heat_k = value.parse().map_err(|_| bad("heat_k"))?,
                "t_points_per_decade" => {
                    cfg.t_points_per_decade =
                        value.parse().map_err(|_| bad("t_points_per_decade"))?
                }
                "master_seed" => cfg.master_seed = value.parse().map_err(|_| bad("master_seed"))?,
                "workers" => cfg.workers = value.parse().map_err(|_| bad("workers"))?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                other => return Err(LabError::Config(format!("unknown key: {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, LabError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(LabError::Config(format!("alpha = {} not in (1,2]", self.alpha)));
        }
        if self.tree_sizes.is_empty() || self.tree_sizes.iter().any(|&n| n < 2) {
            return Err(LabError::Config("tree_sizes must be non-empty, all >= 2".into()));
        }
        if self.ensemble_size < 1 {
            return Err(LabError::Config("ensemble_size must be >= 1".into()));
        }
        if self.points_per_decade < 2 || self.t_points_per_decade < 2 {
            return Err(LabError::Config("points per decade must be >= 2".into()));
        }
        if self.workers < 1 {
            return Err(LabError::Config("workers must be >= 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.lambda_min, self.lambda_max) {
            if !(lo > 0.0 && hi > lo) {
                return Err(LabError::Config("need 0 < lambda_min < lambda_max".into()));
            }
        }
        Ok(())
    }
}

/// Binary offspring counts force an odd number of vertices; bump even
/// requests at alpha = 2 to the next odd size.
pub fn effective_size(alpha: f64, n: usize) -> usize {
    if alpha == 2.0 && n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// In-memory results for one (alpha, size) ensemble.
pub struct EnsembleData {
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub curves: Vec<Vec<CurvePoint>>,
    /// Per replicate: the lowest `heat_k` Neumann eigenvalues.
    pub eigenvalues: Vec<Vec<f64>>,
}

impl EnsembleData {
    pub fn dirichlet_rows(&self) -> Vec<Vec<usize>> {
        self.curves
            .iter()
            .map(|c| c.iter().map(|p| p.n_dirichlet).collect())
            .collect()
    }
}

fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64).ceil() as usize;
    (0..=steps)
        .map(|i| lo * 10f64.powf(decades * i as f64 / steps as f64))
        .collect()
}

/// Sample one marked, rescaled tree (marked vertex distinct from the root).
fn sample_marked(
    sampler: &ConditionedSampler,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MetricTree, LabError> {
    loop {
        let t = sample_tree_with(sampler, rng)?;
        let mut r = rescale_to_metric(&t, alpha);
        if r.pick_mass_vertex(rng) != r.root || r.len() == 1 {
            return Ok(r);
        }
    }
}

/// Run one ensemble: `ensemble_size` trees of `size` vertices, counting
/// curves on the lambda grid, low spectra if `heat_k > 0`, and the
/// first-eigenvalue and bracketing checks on every replicate.
pub fn run_ensemble(cfg: &ExperimentConfig, size: usize) -> Result<EnsembleData, LabError> {
    let n = effective_size(cfg.alpha, size);
    let law = stable_offspring_law(cfg.alpha)?;
    let sampler = ConditionedSampler::new(law, n)?;
    let size_index = cfg
        .tree_sizes
        .iter()
        .position(|&s| s == size)
        .unwrap_or(usize::MAX >> 1) as u64;

    // Probe the grid bounds on replicate 0's tree, deterministically.
    let probe_seed = derive_seed(cfg.master_seed, size_index << 32);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = sample_marked(&sampler, cfg.alpha, &mut probe_rng)?;
    let lo = cfg
        .lambda_min
        .unwrap_or_else(|| 0.1 / (probe.diameter() * probe.total_mass()));
    let hi = cfg.lambda_max.unwrap_or_else(|| {
        // smallest power of ten where the Dirichlet count reaches n/2
        let dir = SpectralOperator::new(&probe, &[probe.root, probe.marked.unwrap()])
            .expect("probe operator");
        let mut hi = lo.max(1.0);
        while dir.count_below(hi) < n / 2 && hi < 1e300 {
            hi *= 10.0;
        }
        hi
    });
    if hi <= lo {
        return Err(LabError::Config(format!("lambda grid empty: [{lo}, {hi}]")));
    }
    let lambdas = log_grid(lo, hi, cfg.points_per_decade);

    let mut data = EnsembleData {
        n,
        lambdas: lambdas.clone(),
        seeds: Vec::with_capacity(cfg.ensemble_size),
        curves: Vec::with_capacity(cfg.ensemble_size),
        eigenvalues: Vec::with_capacity(cfg.ensemble_size),
    };
    for rep in 0..cfg.ensemble_size {
        let seed = derive_seed(cfg.master_seed, size_index << 32 | rep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = sample_marked(&sampler, cfg.alpha, &mut rng)?;
        let marked = tree.marked.unwrap();
        let boundary = [tree.root, marked];
        let curve =
            counting_curve(&tree, &boundary, &lambdas).map_err(|e| LabError::Structural {
                seed,
                source: e,
            })?;
        first_eig_bound_check(&tree, &boundary, 1e-9)
            .map_err(|e| LabError::Structural { seed, source: e })?;
        if cfg.heat_k > 0 {
            let neu = SpectralOperator::new(&tree, &[])?;
            let eigs = neu
                .eigenvalues(cfg.heat_k, 1e-10)
                .map_err(|e| LabError::Structural { seed, source: e })?;
            data.eigenvalues.push(eigs);
        }
        data.seeds.push(seed);
        data.curves.push(curve);
    }
    Ok(data)
}

/// Format a float with the shortest representation that round-trips.
fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_curves_csv(
    cfg: &ExperimentConfig,
    data: &EnsembleData,
    path: &Path,
) -> Result<(), LabError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "alpha,n,replicate,seed,lambda,N,N_shifted,N_dirichlet")?;
    for (rep, curve) in data.curves.iter().enumerate() {
        for p in curve {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                fmt(cfg.alpha),
                data.n,
                rep,
                data.seeds[rep],
                fmt(p.lambda),
                p.n_neumann,
                p.n_shifted,
                p.n_dirichlet
            )?;
        }
    }
    Ok(())
}

pub fn write_eigenvalues_csv(
    cfg: &ExperimentConfig,
    data: &EnsembleData,
    path: &Path,
) -> Result<(), LabError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "alpha,n,replicate,seed,index,lambda_i")?;
    for (rep, eigs) in data.eigenvalues.iter().enumerate() {
        for (i, &l) in eigs.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt(cfg.alpha),
                data.n,
                rep,
                data.seeds[rep],
                i,
                fmt(l)
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
}

/// Fit `log10(mean N^D)` against `log10(lambda)`.
///
/// Window rule: drop the top decade of the grid (discretisation-dominated),
/// drop points with mean count below 10 (small-count noise), and require the
/// remainder to span at least two decades.
pub fn fit_counting_slope(
    lambdas: &[f64],
    count_rows: &[Vec<usize>],
    seed: u64,
) -> Result<FitReport, LabError> {
    if count_rows.is_empty() {
        return Err(LabError::Window("no curves".into()));
    }
    let lam_max = lambdas.iter().cloned().fold(f64::MIN, f64::max);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (j, &lam) in lambdas.iter().enumerate() {
        if lam > lam_max / 10.0 {
            continue;
        }
        let mean: f64 =
            count_rows.iter().map(|r| r[j] as f64).sum::<f64>() / count_rows.len() as f64;
        if mean < 10.0 {
            continue;
        }
        xs.push(lam);
        ys.push(mean);
    }
    if xs.len() < 3 {
        return Err(LabError::Window("fewer than 3 usable grid points".into()));
    }
    let span = (xs[xs.len() - 1] / xs[0]).log10();
    if span < 2.0 {
        return Err(LabError::Window(format!(
            "window spans {span:.2} decades; need >= 2"
        )));
    }
    let fit = log_log_fit(&xs, &ys, 400, seed);
    Ok(FitReport {
        slope: fit.slope,
        intercept: fit.intercept,
        stderr: fit.slope_se,
        window: (xs[0], xs[xs.len() - 1]),
        r_squared: fit.r_squared,
    })
}

/// Heat traces on a shared log-spaced t grid, from per-tree eigenvalue lists.
/// The grid is chosen so that the truncation bound stays below 1% at the
/// small-t end and the mean trace is close to 1 at the large-t end.
pub fn heat_trace_table(
    data: &EnsembleData,
    per_decade: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), LabError> {
    if data.eigenvalues.is_empty() {
        return Err(LabError::Window("no eigenvalues recorded".into()));
    }
    // conservative common bounds over replicates
    let mut t_min = 0.0f64;
    let mut t_max = f64::MAX;
    for eigs in &data.eigenvalues {
        let lam_k = *eigs.last().unwrap();
        let lam_2 = eigs.iter().cloned().find(|&l| l > 1e-12).unwrap_or(lam_k);
        let rem = data.n.saturating_sub(eigs.len()) as f64;
        // (n - k) e^{-lam_k t} < 0.01 at trace >= 1
        let lo = if rem > 0.0 { (rem * 100.0).ln() / lam_k } else { 1e-3 / lam_k };
        t_min = t_min.max(lo);
        t_max = t_max.min(2.0 / lam_2);
    }
    if t_max <= t_min {
        return Err(LabError::Window(format!(
            "heat-trace window empty: [{t_min}, {t_max}]; increase heat_k"
        )));
    }
    let ts = log_grid(t_min, t_max, per_decade);
    let mut rows = Vec::with_capacity(data.eigenvalues.len());
    for eigs in &data.eigenvalues {
        let row: Result<Vec<f64>, _> = ts.iter().map(|&t| heat_trace(eigs, data.n, t)).collect();
        rows.push(row?);
    }
    Ok((ts, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatFitReport {
    pub fit: FitReport,
    /// min and max over the window of `mean_trace * t^gamma / (C Gamma(1+gamma))`.
    pub ratio_low: f64,
    pub ratio_high: f64,
}

/// Fit `log10(mean trace)` against `log10 t` over the window where the mean
/// trace lies in `[8, k/2]`, and report the constant-consistency ratio
/// against `c_hat * Gamma(1 + gamma)`.
pub fn fit_heat_slope(
    ts: &[f64],
    trace_rows: &[Vec<f64>],
    params: &StableParams,
    c_hat: f64,
    seed: u64,
) -> Result<HeatFitReport, LabError> {
    let k = trace_rows
        .first()
        .map(|_| {
            // upper trace cutoff from the largest observed trace
            trace_rows
                .iter()
                .flat_map(|r| r.iter().cloned())
                .fold(f64::MIN, f64::max)
        })
        .unwrap_or(0.0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (j, &t) in ts.iter().enumerate() {
        let mean: f64 =
            trace_rows.iter().map(|r| r[j]).sum::<f64>() / trace_rows.len() as f64;
        if mean < 8.0 || mean > 0.5 * k {
            continue;
        }
        xs.push(t);
        ys.push(mean);
    }
    if xs.len() < 3 {
        return Err(LabError::Window(
            "fewer than 3 heat-trace points in the fit window".into(),
        ));
    }
    let fit = log_log_fit(&xs, &ys, 400, seed);
    let gam = params.gamma;
    let denom = c_hat * gamma(1.0 + gam);
    let mut ratio_low = f64::MAX;
    let mut ratio_high = f64::MIN;
    for (&t, &m) in xs.iter().zip(&ys) {
        let r = m * t.powf(gam) / denom;
        ratio_low = ratio_low.min(r);
        ratio_high = ratio_high.max(r);
    }
    Ok(HeatFitReport {
        fit: FitReport {
            slope: fit.slope,
            intercept: fit.intercept,
            stderr: fit.slope_se,
            window: (xs[0], xs[xs.len() - 1]),
            r_squared: fit.r_squared,
        },
        ratio_low,
        ratio_high,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub alpha: f64,
    pub trees: usize,
    pub ks_statistic: f64,
    pub ks_critical_1pct: f64,
    pub moment2_mean: f64,
    pub moment2_se: f64,
    pub moment2_target: f64,
    pub comparison_trees: usize,
    pub comparison_lower_pass: usize,
    pub comparison_upper_pass_below_threshold: usize,
}

/// Spinal-decomposition statistics over an ensemble: KS of the size-biased
/// mass-fraction pick against Beta(1 - 1/alpha, 1), the x = 2 moment versus
/// psi(2), and comparison-chain pass rates on `comparison_trees` trees.
pub fn decomposition_tests(
    alpha: f64,
    n: usize,
    trees: usize,
    comparison_trees: usize,
    comparison_n: usize,
    master_seed: u64,
) -> Result<DecompositionReport, LabError> {
    let params = StableParams::new(alpha).map_err(|e| LabError::Config(e.to_string()))?;
    let law = stable_offspring_law(alpha)?;
    let n = effective_size(alpha, n);
    let sampler = ConditionedSampler::new(law, n)?;
    let mut picks = Vec::with_capacity(trees);
    let mut moments = Vec::with_capacity(trees);
    for rep in 0..trees {
        let seed = derive_seed(master_seed, 0x0dec_u64 << 48 | rep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = sample_marked(&sampler, alpha, &mut rng)?;
        let split = raw_split(&tree, rng.gen())?;
        let off = 1.0 - split.spine_mass;
        if split.components.is_empty() || off <= 0.0 {
            continue;
        }
        // size-biased pick among normalised fractions
        let u = rng.gen::<f64>() * off;
        let mut acc = 0.0;
        let mut pick = split.components[split.components.len() - 1].delta;
        for c in &split.components {
            acc += c.delta;
            if acc >= u {
                pick = c.delta;
                break;
            }
        }
        picks.push(pick / off);
        moments.push(
            split
                .components
                .iter()
                .map(|c| (c.delta / off) * (c.delta / off))
                .sum::<f64>(),
        );
    }
    let a = 1.0 - 1.0 / alpha;
    let ks = ks_statistic(&mut picks, |x| x.powf(a));
    let (m2, m2se) = mean_se(&moments);

    let mut lower_pass = 0;
    let mut upper_pass = 0;
    let comp_n = effective_size(alpha, comparison_n);
    let comp_sampler = ConditionedSampler::new(law, comp_n)?;
    for rep in 0..comparison_trees {
        let seed = derive_seed(master_seed, 0x0c0e_u64 << 40 | rep as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = sample_marked(&comp_sampler, alpha, &mut rng)?;
        let bound = SpectralOperator::new(&tree, &[])?.eigenvalue_bound();
        let lo = 0.01 / (tree.diameter() * tree.total_mass());
        let lambdas = log_grid(lo, bound, 4);
        let rep_chk = comparison_check(&tree, rng.gen(), &lambdas)?;
        lower_pass += 1; // comparison_check errors out on lower violations
        if rep_chk
            .lambdas
            .iter()
            .zip(rep_chk.n_neumann.iter().zip(&rep_chk.upper))
            .all(|(&l, (&nn, &up))| l >= rep_chk.spine_threshold || nn <= up)
        {
            upper_pass += 1;
        }
    }

    Ok(DecompositionReport {
        alpha,
        trees: picks.len(),
        ks_statistic: ks,
        ks_critical_1pct: ks_critical_1pct(picks.len()),
        moment2_mean: m2,
        moment2_se: m2se,
        moment2_target: params.psi(2.0),
        comparison_trees,
        comparison_lower_pass: lower_pass,
        comparison_upper_pass_below_threshold: upper_pass,
    })
}

/// Export `(N^D(lambda) - c_hat lambda^gamma) / lambda^{1/(2 alpha - 1)}`
/// per replicate per grid point.
pub fn residual_export<W: Write>(
    lambdas: &[f64],
    count_rows: &[Vec<usize>],
    params: &StableParams,
    c_hat: f64,
    w: &mut W,
) -> Result<(), LabError> {
    writeln!(w, "replicate,lambda,residual")?;
    let sub = 1.0 / (2.0 * params.alpha - 1.0);
    for (rep, row) in count_rows.iter().enumerate() {
        for (j, &lam) in lambdas.iter().enumerate() {
            let res = (row[j] as f64 - c_hat * lam.powf(params.gamma)) / lam.powf(sub);
            writeln!(w, "{rep},{},{}", fmt(lam), fmt(res))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub counting_fit: Option<FitReport>,
    pub m_infinity: Option<MInfEstimate>,
    pub heat: Option<HeatFitReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub alpha: f64,
    pub gamma: f64,
    pub sizes: Vec<SizeSummary>,
    pub structural_failures: usize,
}

/// Run the full experiment described by `cfg`: per size, an ensemble with
/// curves and spectra persisted as CSV, then fits and estimates persisted as
/// JSON.  Deterministic given (config, master_seed).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, LabError> {
    cfg.validate()?;
    let params = StableParams::new(cfg.alpha).map_err(|e| LabError::Config(e.to_string()))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut summary = ExperimentSummary {
        alpha: cfg.alpha,
        gamma: params.gamma,
        sizes: Vec::new(),
        structural_failures: 0,
    };
    for &size in &cfg.tree_sizes {
        let data = run_ensemble(cfg, size)?;
        let tag = format!("a{}_n{}", cfg.alpha, data.n);
        write_curves_csv(cfg, &data, &cfg.output_dir.join(format!("curves_{tag}.csv")))?;
        if cfg.heat_k > 0 {
            write_eigenvalues_csv(cfg, &data, &cfg.output_dir.join(format!("eigs_{tag}.csv")))?;
        }
        let rows = data.dirichlet_rows();
        let counting_fit = fit_counting_slope(&data.lambdas, &rows, cfg.master_seed).ok();
        let m_inf = m_infinity_estimate(&data.lambdas, &rows, &params, cfg.master_seed).ok();
        let heat = match (&m_inf, cfg.heat_k > 0) {
            (Some(mi), true) => heat_trace_table(&data, cfg.t_points_per_decade)
                .and_then(|(ts, traces)| {
                    let mut w = BufWriter::new(
                        fs::File::create(cfg.output_dir.join(format!("heat_{tag}.csv")))?,
                    );
                    writeln!(w, "replicate,t,trace")?;
                    for (rep, row) in traces.iter().enumerate() {
                        for (j, &tr) in row.iter().enumerate() {
                            writeln!(w, "{rep},{},{}", fmt(ts[j]), fmt(tr))?;
                        }
                    }
                    fit_heat_slope(&ts, &traces, &params, mi.value, cfg.master_seed)
                })
                .ok(),
            _ => None,
        };
        if let Some(mi) = &m_inf {
            let mut f = fs::File::create(cfg.output_dir.join(format!("residuals_{tag}.csv")))?;
            residual_export(&data.lambdas, &rows, &params, mi.value, &mut f)?;
        }
        summary.sizes.push(SizeSummary {
            n: data.n,
            counting_fit,
            m_infinity: m_inf,
            heat,
        });
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(cfg.output_dir.join("summary.json"), json)?;
    Ok(summary)
}
