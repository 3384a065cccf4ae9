//! Confidence intervals for the CCC: fiducial highest-density regions, the
//! Fisher-Z interval and the bias-corrected parametric bootstrap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ccc::{self, CccEvaluation, CccNormalization};
use crate::error::{Error, Result};
use crate::estimation::{self, FitResult};
use crate::fiducial::{self, DispersionPivot, DrawMode, FiducialContext};
use crate::model::{ModelSpec, ParameterSet, RatingDataset};
use crate::rng::{derive_seed, label, substream};
use crate::simulation::{self, ErrorModel};

/// Minimum number of samples accepted by [`hdr_interval`].
pub const MIN_HDR_SAMPLES: usize = 20;
/// Largest tolerated share of failed fiducial draws.
pub const MAX_DRAW_FAILURE_RATE: f64 = 0.05;
/// Largest tolerated share of failed bootstrap refits.
pub const MAX_BOOT_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    FiducialHdr,
    FisherZ,
    BootstrapBc,
}

impl IntervalMethod {
    pub const ALL: [IntervalMethod; 3] = [
        IntervalMethod::FiducialHdr,
        IntervalMethod::FisherZ,
        IntervalMethod::BootstrapBc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IntervalMethod::FiducialHdr => "fiducial_hdr",
            IntervalMethod::FisherZ => "fisher_z",
            IntervalMethod::BootstrapBc => "bootstrap_bc",
        }
    }
}

impl std::str::FromStr for IntervalMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fiducial" | "fiducial_hdr" => Ok(IntervalMethod::FiducialHdr),
            "fisher_z" | "fisher" => Ok(IntervalMethod::FisherZ),
            "bootstrap" | "bootstrap_bc" => Ok(IntervalMethod::BootstrapBc),
            o => Err(Error::InvalidParameters(format!(
                "unknown interval method `{o}`"
            ))),
        }
    }
}

/// Per-interval diagnostics; fields not relevant to a method are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct IntervalDiagnostics {
    /// Draws or resamples that failed and were excluded.
    pub failures: usize,
    pub failure_rate: f64,
    /// Extra pivot attempts after solver failures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retries: Option<usize>,
    /// 2.5, 25, 50, 75 and 97.5 percent quantiles of the CCC samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_solver_iterations: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_solver_gradient: Option<f64>,
    /// Bias-correction constant of the bootstrap.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z0: Option<f64>,
    /// Standard error on the Fisher-Z scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalResult {
    pub method: IntervalMethod,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    /// Usable draws (fiducial), resamples (bootstrap) or 0 (Fisher-Z).
    pub n_draws: usize,
    pub diagnostics: IntervalDiagnostics,
}

impl IntervalResult {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Settings shared by the interval constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalOptions {
    pub alpha: f64,
    pub n_draws: usize,
    pub n_boot: usize,
    pub mode: DrawMode,
    pub evaluation: CccEvaluation,
    pub normalization: CccNormalization,
    pub seed: u64,
}

impl Default for IntervalOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_draws: 10_000,
            n_boot: 2000,
            mode: DrawMode::Joint,
            evaluation: CccEvaluation::Closed,
            normalization: CccNormalization::FactorTwo,
            seed: 0,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameters(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Shortest window of `ceil((1−α)m)` consecutive order statistics; ties go
/// to the smallest lower endpoint. Widths within `1e-12` of the sample range
/// count as ties.
pub fn hdr_interval(sorted: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let m = sorted.len();
    if m < MIN_HDR_SAMPLES {
        return Err(Error::TooFewSamples(m));
    }
    if sorted.iter().any(|x| x.is_nan()) || sorted.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameters(
            "HDR samples must be sorted and free of NaN".into(),
        ));
    }
    let w = (((1.0 - alpha) * m as f64) - 1e-9)
        .ceil()
        .clamp(1.0, m as f64) as usize;
    let tol = 1e-12 * (sorted[m - 1] - sorted[0]);
    let mut best = 0;
    let mut best_w = sorted[w - 1] - sorted[0];
    for i in 1..=m - w {
        let width = sorted[i + w - 1] - sorted[i];
        if width < best_w - tol {
            best = i;
            best_w = width;
        }
    }
    Ok((sorted[best], sorted[best + w - 1]))
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn five_quantiles(sorted: &[f64]) -> [f64; 5] {
    [0.025, 0.25, 0.5, 0.75, 0.975].map(|p| quantile(sorted, p))
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Parameters at which the point estimate is computed: REML components with
/// the dispersion at the centre of its pivot.
pub fn plug_in_params(fit: &FitResult) -> Result<ParameterSet> {
    let mut p = fit.estimates.clone();
    p.dispersion = DispersionPivot::from_fit(fit)?.center();
    Ok(p)
}

/// Plug-in CCC shared by every interval method.
pub fn point_estimate(
    fit: &FitResult,
    evaluation: CccEvaluation,
    normalization: CccNormalization,
    seed: u64,
) -> Result<f64> {
    let p = plug_in_params(fit)?;
    Ok(ccc::ccc_at(
        &fit.spec,
        &p,
        evaluation,
        normalization,
        derive_seed(seed, &[label::CCC_EVAL, u64::MAX]),
    )?
    .value)
}

fn fit_or_failure(data: &RatingDataset, spec: &ModelSpec) -> Result<FitResult> {
    estimation::fit(data, spec).map_err(|e| match e {
        Error::FitFailure(_) => e,
        other => Error::FitFailure(other.to_string()),
    })
}

/// Fit the model, draw `n_draws` joint pivots, evaluate the CCC at each and
/// return the highest-density region.
pub fn fiducial_ccc_interval(
    data: &RatingDataset,
    spec: &ModelSpec,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    let fit = fit_or_failure(data, spec)?;
    fiducial_interval_from_fit(&fit, opts)
}

/// As [`fiducial_ccc_interval`] for an existing fit.
pub fn fiducial_interval_from_fit(
    fit: &FitResult,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    check_alpha(opts.alpha)?;
    let ctx = FiducialContext::new(fit, opts.mode)?;
    let point = point_estimate(fit, opts.evaluation, opts.normalization, opts.seed)?;
    let seed = opts.seed;
    let outcomes: Vec<(Option<f64>, usize, usize, f64)> = (0..opts.n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = substream(seed, &[label::DRAW, d]);
            match fiducial::sample_joint_draw(&ctx, &mut rng) {
                Ok(draw) if draw.solver.converged => {
                    let cs = derive_seed(seed, &[label::CCC_EVAL, d]);
                    let v = ccc::ccc_fiducial(
                        &draw,
                        &ctx.spec,
                        opts.evaluation,
                        opts.normalization,
                        cs,
                    )
                    .ok()
                    .filter(|v| v.is_finite());
                    (
                        v,
                        draw.retries,
                        draw.solver.iterations,
                        draw.solver.grad_inf,
                    )
                }
                Ok(draw) => (
                    None,
                    draw.retries,
                    draw.solver.iterations,
                    draw.solver.grad_inf,
                ),
                Err(_) => (None, fiducial::MAX_RETRIES, 0, f64::NAN),
            }
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.0.is_none()).count();
    let total = outcomes.len();
    if failures as f64 > MAX_DRAW_FAILURE_RATE * total as f64 {
        return Err(Error::ExcessiveDrawFailures {
            failed: failures,
            total,
        });
    }
    let mut samples: Vec<f64> = outcomes.iter().filter_map(|o| o.0).collect();
    samples.sort_by(f64::total_cmp);
    let (lower, upper) = hdr_interval(&samples, opts.alpha)?;
    let ok: Vec<_> = outcomes.iter().filter(|o| o.0.is_some()).collect();
    let diagnostics = IntervalDiagnostics {
        failures,
        failure_rate: failures as f64 / total.max(1) as f64,
        retries: Some(outcomes.iter().map(|o| o.1).sum()),
        quantiles: Some(five_quantiles(&samples)),
        mean_solver_iterations: Some(
            ok.iter().map(|o| o.2 as f64).sum::<f64>() / ok.len().max(1) as f64,
        ),
        max_solver_gradient: Some(ok.iter().map(|o| o.3).fold(0.0, f64::max)),
        ..Default::default()
    };
    Ok(IntervalResult {
        method: IntervalMethod::FiducialHdr,
        point,
        lower,
        upper,
        alpha: opts.alpha,
        n_draws: samples.len(),
        diagnostics,
    })
}

/// Moments of one rater pair over all observations: `(r, u²)` with
/// `u = (x̄ − ȳ)/√(s_x s_y)` and population variances.
fn pair_moments(data: &RatingDataset, a: usize, b: usize) -> (f64, f64) {
    let d = data.dims();
    let mut xs = Vec::with_capacity(d.subjects * d.times * d.replicates);
    let mut ys = Vec::with_capacity(xs.capacity());
    for i in 0..d.subjects {
        for j in 0..d.times {
            for k in 0..d.replicates {
                xs.push(data.value(i, j, k, a));
                ys.push(data.value(i, j, k, b));
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let (sx, sy) = ((sxx / n).sqrt(), (syy / n).sqrt());
    let r = sxy / n / (sx * sy);
    let u = (mx - my) / (sx * sy).sqrt();
    (r, u * u)
}

/// Lin's asymptotic variance of `atanh(ρ)` with `n` subjects.
pub fn lin_z_variance(rho: f64, r: f64, u2: f64, n: usize) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::DegenerateVariance(format!(
            "CCC estimate {rho} has unit magnitude"
        )));
    }
    if n <= 2 {
        return Err(Error::DegenerateVariance(format!(
            "{n} subjects leave no degrees of freedom"
        )));
    }
    if !(r.abs() > 0.0) || !r.is_finite() {
        return Err(Error::DegenerateVariance(
            "Pearson correlation is zero or undefined".into(),
        ));
    }
    let one = 1.0 - rho * rho;
    let v = (1.0 - r * r) * rho * rho / (one * r * r)
        + 2.0 * rho.powi(3) * (1.0 - rho) * u2 / (r * one * one)
        - rho.powi(4) * u2 * u2 / (2.0 * r * r * one * one);
    let v = v / (n as f64 - 2.0);
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::DegenerateVariance(format!(
            "Fisher-Z variance {v} is not positive"
        )));
    }
    Ok(v)
}

/// `tanh(atanh(ρ) ± z_{1−α/2} se)`.
pub fn fisher_z_limits(point: f64, se: f64, alpha: f64) -> (f64, f64) {
    let z = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    let zc = point.atanh();
    ((zc - z * se).tanh(), (zc + z * se).tanh())
}

/// Fisher-Z interval around the plug-in CCC.
pub fn fisher_z_interval(
    data: &RatingDataset,
    spec: &ModelSpec,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    let fit = fit_or_failure(data, spec)?;
    fisher_z_from_fit(data, &fit, opts)
}

/// As [`fisher_z_interval`] for an existing fit. Pearson correlation and
/// location shift come from all paired observations of each rater pair,
/// averaged over pairs when there are more than two raters.
pub fn fisher_z_from_fit(
    data: &RatingDataset,
    fit: &FitResult,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    check_alpha(opts.alpha)?;
    let point = point_estimate(fit, opts.evaluation, opts.normalization, opts.seed)?;
    let l = data.dims().raters;
    let (mut r, mut u2, mut pairs) = (0.0, 0.0, 0.0);
    for a in 0..l {
        for b in a + 1..l {
            let (ra, ua) = pair_moments(data, a, b);
            r += ra;
            u2 += ua;
            pairs += 1.0;
        }
    }
    let var = lin_z_variance(point, r / pairs, u2 / pairs, data.n_subjects())?;
    let se = var.sqrt();
    let (lower, upper) = fisher_z_limits(point, se, opts.alpha);
    Ok(IntervalResult {
        method: IntervalMethod::FisherZ,
        point,
        lower,
        upper,
        alpha: opts.alpha,
        n_draws: 0,
        diagnostics: IntervalDiagnostics {
            z_std_error: Some(se),
            ..Default::default()
        },
    })
}

/// Bias-corrected percentile limits from bootstrap replicates.
pub fn bc_limits(point: f64, boot: &[f64], alpha: f64) -> Result<(f64, f64, f64)> {
    check_alpha(alpha)?;
    if boot.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let mut s = boot.to_vec();
    s.sort_by(f64::total_cmp);
    let b = s.len() as f64;
    let below = s.iter().filter(|v| **v < point).count() as f64;
    let equal = s.iter().filter(|v| **v == point).count() as f64;
    let frac = ((below + 0.5 * equal) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let nd = std_normal();
    let z0 = if (frac - 0.5).abs() < 1e-15 {
        0.0
    } else {
        nd.inverse_cdf(frac)
    };
    let z = nd.inverse_cdf(1.0 - alpha / 2.0);
    Ok((
        quantile(&s, nd.cdf(2.0 * z0 - z)),
        quantile(&s, nd.cdf(2.0 * z0 + z)),
        z0,
    ))
}

/// Parametric bootstrap with bias-corrected percentile limits.
pub fn bootstrap_interval(
    data: &RatingDataset,
    spec: &ModelSpec,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    let fit = fit_or_failure(data, spec)?;
    bootstrap_from_fit(&fit, opts)
}

/// As [`bootstrap_interval`] for an existing fit. Resamples are drawn from
/// the fitted model and refit from its estimates.
pub fn bootstrap_from_fit(fit: &FitResult, opts: &IntervalOptions) -> Result<IntervalResult> {
    check_alpha(opts.alpha)?;
    let point = point_estimate(fit, opts.evaluation, opts.normalization, opts.seed)?;
    let start = estimation::warm_start(fit);
    let spec = &fit.spec;
    let seed = opts.seed;
    let outcomes: Vec<Option<f64>> = (0..opts.n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[label::BOOTSTRAP, b]);
            let data = simulation::simulate(
                spec,
                &fit.estimates,
                &ErrorModel::Family,
                fit.n_subjects,
                &mut rng,
            )
            .ok()?;
            let refit = estimation::fit_from(&data, spec, Some(&start)).ok()?;
            point_estimate(
                &refit,
                opts.evaluation,
                opts.normalization,
                derive_seed(seed, &[label::BOOTSTRAP, b]),
            )
            .ok()
            .filter(|v| v.is_finite())
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let total = outcomes.len();
    if failures as f64 > MAX_BOOT_FAILURE_RATE * total as f64 {
        return Err(Error::FitFailure(format!(
            "{failures} of {total} bootstrap refits failed"
        )));
    }
    let mut boot: Vec<f64> = outcomes.into_iter().flatten().collect();
    let (lower, upper, z0) = bc_limits(point, &boot, opts.alpha)?;
    boot.sort_by(f64::total_cmp);
    Ok(IntervalResult {
        method: IntervalMethod::BootstrapBc,
        point,
        lower,
        upper,
        alpha: opts.alpha,
        n_draws: boot.len(),
        diagnostics: IntervalDiagnostics {
            failures,
            failure_rate: failures as f64 / total.max(1) as f64,
            quantiles: Some(five_quantiles(&boot)),
            z0: Some(z0),
            ..Default::default()
        },
    })
}

/// Dispatch on the method for an existing fit.
pub fn interval_from_fit(
    method: IntervalMethod,
    data: &RatingDataset,
    fit: &FitResult,
    opts: &IntervalOptions,
) -> Result<IntervalResult> {
    match method {
        IntervalMethod::FiducialHdr => fiducial_interval_from_fit(fit, opts),
        IntervalMethod::FisherZ => fisher_z_from_fit(data, fit, opts),
        IntervalMethod::BootstrapBc => bootstrap_from_fit(fit, opts),
    }
}
