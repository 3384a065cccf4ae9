//! The four commands and their JSON reports.

use ccc_fiducial::estimation::{self, FitResult};
use ccc_fiducial::intervals::{self, IntervalDiagnostics};
use ccc_fiducial::linalg::Mat;
use ccc_fiducial::rng::{derive_seed, substream};
use ccc_fiducial::simulation::{self, CoverageOptions, CoverageReport};
use ccc_fiducial::{
    ccc, CccBounds, Dims, Dispersion, DrawMode, IntervalMethod, IntervalOptions, ModelSpec,
    ParameterSet, RatingDataset,
};
use serde::Serialize;

use crate::config::{RunConfig, DEFAULT_N_DRAWS};
use crate::{dataset, table, CliError, CommandKind, Output};

/// Seed-path labels for the CLI's own randomness.
const BOUNDS_LABEL: u64 = 101;
const INTERVAL_LABEL: u64 = 102;
const POINT_LABEL: u64 = 103;

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report JSON")
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[derive(Debug, Serialize)]
struct DispersionJson {
    kind: &'static str,
    value: f64,
}

impl From<Dispersion> for DispersionJson {
    fn from(d: Dispersion) -> Self {
        let kind = match d {
            Dispersion::Sigma2(_) => "sigma2",
            Dispersion::Unit => "unit",
            Dispersion::Tau(_) => "tau",
        };
        DispersionJson {
            kind,
            value: d.value(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ParamsJson {
    beta: Vec<Vec<f64>>,
    sigma_alpha: Vec<Vec<Vec<f64>>>,
    sigma_gamma: Vec<Vec<f64>>,
    dispersion: DispersionJson,
}

impl From<&ParameterSet> for ParamsJson {
    fn from(p: &ParameterSet) -> Self {
        ParamsJson {
            beta: rows(&p.beta),
            sigma_alpha: p.sigma_alpha.iter().map(rows).collect(),
            sigma_gamma: rows(&p.sigma_gamma),
            dispersion: p.dispersion.into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ModelJson {
    family: &'static str,
    slopes: usize,
    interaction: bool,
    time_origin: f64,
    time_step: f64,
}

impl From<&ModelSpec> for ModelJson {
    fn from(s: &ModelSpec) -> Self {
        ModelJson {
            family: s.family.name(),
            slopes: s.effects.slopes,
            interaction: s.effects.interaction,
            time_origin: s.time_grid.origin,
            time_step: s.time_grid.step,
        }
    }
}

#[derive(Debug, Serialize)]
struct FitDiagnostics {
    outer_iterations: usize,
    gap: f64,
    reml_iterations: usize,
    reml_grad_inf: f64,
}

impl From<&FitResult> for FitDiagnostics {
    fn from(f: &FitResult) -> Self {
        FitDiagnostics {
            outer_iterations: f.trace.iterations,
            gap: f.trace.gap,
            reml_iterations: f.trace.reml_iterations,
            reml_grad_inf: f.trace.reml_grad_inf,
        }
    }
}

fn load(cfg: &RunConfig, command: &str) -> Result<RatingDataset, CliError> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("`{command}` needs --data")))?;
    dataset::read_dataset(path)
}

fn spec_for(cfg: &RunConfig, d: Dims) -> ModelSpec {
    cfg.spec(d.times, d.replicates, d.raters)
}

/// Rater subsets reported by `interval`: every pair, plus all raters when
/// there are more than two.
pub fn rater_subsets(l: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..l {
        for b in a + 1..l {
            out.push(vec![a, b]);
        }
    }
    if l > 2 {
        out.push((0..l).collect());
    }
    out
}

fn one_based(subset: &[usize]) -> Vec<usize> {
    subset.iter().map(|l| l + 1).collect()
}

fn fit_subset(
    cfg: &RunConfig,
    data: &RatingDataset,
    subset: &[usize],
) -> Result<(RatingDataset, FitResult), CliError> {
    let sub = if subset.len() == data.dims().raters {
        data.clone()
    } else {
        data.select_raters(subset)?
    };
    let spec = spec_for(cfg, sub.dims());
    spec.check_data(&sub)?;
    let fit = estimation::fit(&sub, &spec)?;
    Ok((sub, fit))
}

fn bounds_at(
    cfg: &RunConfig,
    spec: &ModelSpec,
    p: &ParameterSet,
    idx: u64,
) -> Result<CccBounds, CliError> {
    Ok(ccc::ccc_bounds(
        spec,
        p,
        cfg.n_mc,
        &mut substream(cfg.seed, &[BOUNDS_LABEL, idx]),
    )?)
}

#[derive(Debug, Serialize)]
struct PointJson {
    point: f64,
    bounds: CccBounds,
}

#[derive(Debug, Serialize)]
struct FitReport {
    command: CommandKind,
    seed: u64,
    dims: Dims,
    model: ModelJson,
    estimates: ParamsJson,
    ccc: PointJson,
    diagnostics: FitDiagnostics,
}

pub fn fit(cfg: &RunConfig) -> Result<Output, CliError> {
    let data = load(cfg, "fit")?;
    let all: Vec<usize> = (0..data.dims().raters).collect();
    let (_, fit) = fit_subset(cfg, &data, &all)?;
    let point = intervals::point_estimate(
        &fit,
        cfg.evaluation,
        cfg.normalization,
        derive_seed(cfg.seed, &[POINT_LABEL]),
    )?;
    let plug = intervals::plug_in_params(&fit)?;
    let report = FitReport {
        command: CommandKind::Fit,
        seed: cfg.seed,
        dims: data.dims(),
        model: (&fit.spec).into(),
        estimates: (&fit.estimates).into(),
        ccc: PointJson {
            point,
            bounds: bounds_at(cfg, &fit.spec, &plug, 0)?,
        },
        diagnostics: (&fit).into(),
    };
    Ok(Output {
        json: to_json(&report),
        text: None,
    })
}

#[derive(Debug, Serialize)]
struct RecordDiagnostics {
    n_draws: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<DrawMode>,
    #[serde(flatten)]
    interval: IntervalDiagnostics,
    fit: FitDiagnostics,
}

#[derive(Debug, Serialize)]
struct IntervalRecord {
    method: IntervalMethod,
    subset: Vec<usize>,
    point: f64,
    lower: f64,
    upper: f64,
    width: f64,
    alpha: f64,
    bounds: CccBounds,
    seed: u64,
    diagnostics: RecordDiagnostics,
}

#[derive(Debug, Serialize)]
struct IntervalReport {
    command: CommandKind,
    seed: u64,
    dims: Dims,
    model: ModelJson,
    records: Vec<IntervalRecord>,
}

pub fn interval(cfg: &RunConfig) -> Result<Output, CliError> {
    let data = load(cfg, "interval")?;
    let mut records = Vec::new();
    for (si, subset) in rater_subsets(data.dims().raters).iter().enumerate() {
        let (sub, fit) = fit_subset(cfg, &data, subset)?;
        let plug = intervals::plug_in_params(&fit)?;
        let bounds = bounds_at(cfg, &fit.spec, &plug, si as u64)?;
        let mode = cfg.mode.unwrap_or_else(|| DrawMode::default_for(&fit.spec));
        for &method in &cfg.methods {
            let seed = derive_seed(cfg.seed, &[INTERVAL_LABEL, si as u64, method as u64]);
            let opts = IntervalOptions {
                alpha: cfg.alpha,
                n_draws: cfg.n_draws.unwrap_or(DEFAULT_N_DRAWS),
                n_boot: cfg.n_boot,
                mode,
                evaluation: cfg.evaluation,
                normalization: cfg.normalization,
                seed,
            };
            let iv = intervals::interval_from_fit(method, &sub, &fit, &opts)?;
            records.push(IntervalRecord {
                method,
                subset: one_based(subset),
                point: iv.point,
                lower: iv.lower,
                upper: iv.upper,
                width: iv.width(),
                alpha: iv.alpha,
                bounds,
                seed,
                diagnostics: RecordDiagnostics {
                    n_draws: iv.n_draws,
                    mode: (method == IntervalMethod::FiducialHdr).then_some(mode),
                    interval: iv.diagnostics,
                    fit: (&fit).into(),
                },
            });
        }
    }
    let report = IntervalReport {
        command: CommandKind::Interval,
        seed: cfg.seed,
        dims: data.dims(),
        model: (&spec_for(cfg, data.dims())).into(),
        records,
    };
    Ok(Output {
        json: to_json(&report),
        text: None,
    })
}

#[derive(Debug, Serialize)]
struct BoundsRecord {
    subset: Vec<usize>,
    ccc: f64,
    bounds: CccBounds,
}

#[derive(Debug, Serialize)]
struct BoundsReport {
    command: CommandKind,
    seed: u64,
    /// `data` (plug-in estimates) or `scenario` (true parameters).
    source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<String>,
    records: Vec<BoundsRecord>,
}

pub fn bounds(cfg: &RunConfig) -> Result<Output, CliError> {
    let report = match (&cfg.scenario, &cfg.data) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "`bounds` takes either --data or --scenario, not both",
            ))
        }
        (Some(name), None) => {
            let mut records = Vec::new();
            let mut names = Vec::new();
            for (i, s) in simulation::lookup(name)?.iter().enumerate() {
                let truth = simulation::true_ccc(
                    s,
                    cfg.normalization,
                    cfg.n_mc,
                    derive_seed(cfg.seed, &[POINT_LABEL, i as u64]),
                )?;
                records.push(BoundsRecord {
                    subset: (1..=s.spec.raters).collect(),
                    ccc: truth,
                    bounds: bounds_at(cfg, &s.spec, &s.truth, i as u64)?,
                });
                names.push(s.name.clone());
            }
            BoundsReport {
                command: CommandKind::Bounds,
                seed: cfg.seed,
                source: "scenario",
                scenario: Some(names.join(",")),
                records,
            }
        }
        (None, _) => {
            let data = load(cfg, "bounds")?;
            let mut records = Vec::new();
            for (si, subset) in rater_subsets(data.dims().raters).iter().enumerate() {
                let (_, fit) = fit_subset(cfg, &data, subset)?;
                let plug = intervals::plug_in_params(&fit)?;
                records.push(BoundsRecord {
                    subset: one_based(subset),
                    ccc: intervals::point_estimate(
                        &fit,
                        cfg.evaluation,
                        cfg.normalization,
                        derive_seed(cfg.seed, &[POINT_LABEL, si as u64]),
                    )?,
                    bounds: bounds_at(cfg, &fit.spec, &plug, si as u64)?,
                });
            }
            BoundsReport {
                command: CommandKind::Bounds,
                seed: cfg.seed,
                source: "data",
                scenario: None,
                records,
            }
        }
    };
    Ok(Output {
        json: to_json(&report),
        text: None,
    })
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    command: CommandKind,
    seed: u64,
    reports: Vec<CoverageReport>,
}

pub fn simulate(cfg: &RunConfig) -> Result<Output, CliError> {
    let name = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::usage("`simulate` needs --scenario"))?;
    let mut reports = Vec::new();
    for s in simulation::lookup(name)? {
        let opts = CoverageOptions {
            methods: cfg.methods.clone(),
            n_subjects: cfg.n_subjects.clone(),
            replications: cfg.replications,
            n_draws: cfg.n_draws,
            n_boot: cfg.n_boot,
            alpha: cfg.alpha,
            mode: cfg.mode,
            evaluation: cfg.evaluation,
            normalization: cfg.normalization,
            seed: cfg.seed,
            ..Default::default()
        };
        reports.push(simulation::coverage_study(&s, &opts)?);
    }
    let text = table::coverage_table(&reports);
    Ok(Output {
        json: to_json(&SimulateReport {
            command: CommandKind::Simulate,
            seed: cfg.seed,
            reports,
        }),
        text: Some(text),
    })
}
