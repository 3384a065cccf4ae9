//! Synthetic data, the scenario catalog, coverage studies and a direct
//! sample-moment CCC oracle.

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, ContinuousCDF};

use crate::ccc::{self, CccEvaluation, CccNormalization};
use crate::error::{Error, Result};
use crate::estimation;
use crate::fiducial::DrawMode;
use crate::intervals::{self, IntervalMethod, IntervalOptions};
use crate::linalg::{self, Mat};
use crate::model::{
    Dims, Dispersion, Family, ModelSpec, ParameterSet, RandomEffects, RatingDataset, TimeGrid,
};
use crate::rng::{derive_seed, label, substream, StreamRng};

/// Resampling limit for subjects with a nonpositive Gamma linear predictor.
pub const MAX_SUBJECT_REJECTIONS: usize = 100;

/// Heavy-tailed component of a contamination mixture, centred at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contaminant {
    Gamma { shape: f64, scale: f64 },
    Lognormal { loc: f64, scale: f64 },
}

impl Contaminant {
    pub fn mean(&self) -> f64 {
        match *self {
            Contaminant::Gamma { shape, scale } => shape * scale,
            Contaminant::Lognormal { loc, scale } => (loc + 0.5 * scale * scale).exp(),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Contaminant::Gamma { shape, scale } => shape * scale * scale,
            Contaminant::Lognormal { loc, scale } => {
                (scale * scale).exp_m1() * (2.0 * loc + scale * scale).exp()
            }
        }
    }

    pub fn skewness(&self) -> f64 {
        match *self {
            Contaminant::Gamma { shape, .. } => 2.0 / shape.sqrt(),
            Contaminant::Lognormal { scale, .. } => {
                let e = (scale * scale).exp();
                (e + 2.0) * (e - 1.0).sqrt()
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let x = match *self {
            Contaminant::Gamma { shape, scale } => Gamma::new(shape, scale)
                .map_err(|e| Error::InvalidParameters(format!("contaminant: {e}")))?
                .sample(rng),
            Contaminant::Lognormal { loc, scale } => LogNormal::new(loc, scale)
                .map_err(|e| Error::InvalidParameters(format!("contaminant: {e}")))?
                .sample(rng),
        };
        Ok(x - self.mean())
    }
}

/// How responses are generated from the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    /// The family's own law: normal errors with variance σ², Poisson counts,
    /// or Gamma responses with shape τ.
    #[default]
    Family,
    /// Gaussian responses whose errors are `N(0, sigma2)` with probability
    /// `1 − weight` and a centred contaminant otherwise.
    Mixture {
        weight: f64,
        sigma2: f64,
        contaminant: Contaminant,
    },
}

impl ErrorModel {
    /// Error variance of a mixture.
    pub fn mixture_variance(&self) -> Option<f64> {
        match *self {
            ErrorModel::Family => None,
            ErrorModel::Mixture {
                weight,
                sigma2,
                contaminant,
            } => Some((1.0 - weight) * sigma2 + weight * contaminant.variance()),
        }
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        match *self {
            ErrorModel::Family => Ok(()),
            ErrorModel::Mixture {
                weight,
                sigma2,
                contaminant,
            } => {
                if family != Family::Gaussian {
                    return Err(Error::InvalidParameters(
                        "mixture errors need the gaussian family".into(),
                    ));
                }
                if !(weight > 0.0 && weight < 1.0) {
                    return Err(Error::InvalidParameters(format!(
                        "mixture weight {weight} outside (0,1)"
                    )));
                }
                if !(sigma2 > 0.0)
                    || !(contaminant.variance() > 0.0)
                    || !contaminant.variance().is_finite()
                {
                    return Err(Error::InvalidParameters(
                        "mixture components need positive finite variance".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// A simulation setting: model, true parameters and study sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub spec: ModelSpec,
    /// True parameters; for mixtures σ² is the total error variance.
    pub truth: ParameterSet,
    pub error_model: ErrorModel,
    pub n_subjects: Vec<usize>,
    pub n_replications: usize,
    pub n_draws_per_interval: usize,
    /// Published true CCC, when there is one.
    pub reported_ccc: Option<f64>,
}

impl Scenario {
    /// Pivot mode used when a study does not set one.
    pub fn draw_mode(&self) -> DrawMode {
        DrawMode::default_for(&self.spec)
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.truth.validate(&self.spec)?;
        self.error_model.validate(self.spec.family)?;
        if let Some(v) = self.error_model.mixture_variance() {
            if (self.truth.dispersion.value() - v).abs() > 1e-12 * v.max(1.0) {
                return Err(Error::InvalidParameters(format!(
                    "truth σ² {} differs from the mixture variance {v}",
                    self.truth.dispersion.value()
                )));
            }
        }
        if self.n_subjects.iter().any(|&n| n < 2) {
            return Err(Error::InvalidParameters(
                "each subject count must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Serialized form of a [`Scenario`], with matrices as nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub family: Family,
    pub times: usize,
    pub replicates: usize,
    pub raters: usize,
    pub slopes: usize,
    pub interaction: bool,
    #[serde(default)]
    pub time_origin: f64,
    #[serde(default = "one")]
    pub time_step: f64,
    /// Row `l` holds `[β_l0, β_l1]`.
    pub beta: Vec<Vec<f64>>,
    pub sigma_alpha: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_gamma: Option<Vec<Vec<f64>>>,
    /// σ² (Gaussian, ignored for mixtures), τ (Gamma); unused for Poisson.
    #[serde(default)]
    pub dispersion: Option<f64>,
    #[serde(default)]
    pub error_model: ErrorModel,
    pub n_subjects: Vec<usize>,
    pub n_replications: usize,
    pub n_draws_per_interval: usize,
    #[serde(default)]
    pub reported_ccc: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::InvalidParameters(format!(
            "{what}: ragged or empty matrix"
        )));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

impl From<&Scenario> for ScenarioConfig {
    fn from(s: &Scenario) -> Self {
        let dispersion = match (s.error_model, s.truth.dispersion) {
            (ErrorModel::Mixture { .. }, _) | (_, Dispersion::Unit) => None,
            (_, d) => Some(d.value()),
        };
        ScenarioConfig {
            name: s.name.clone(),
            description: s.description.clone(),
            family: s.spec.family,
            times: s.spec.times,
            replicates: s.spec.replicates,
            raters: s.spec.raters,
            slopes: s.spec.effects.slopes,
            interaction: s.spec.effects.interaction,
            time_origin: s.spec.time_grid.origin,
            time_step: s.spec.time_grid.step,
            beta: to_rows(&s.truth.beta),
            sigma_alpha: s.truth.sigma_alpha.iter().map(to_rows).collect(),
            sigma_gamma: s
                .spec
                .effects
                .interaction
                .then(|| to_rows(&s.truth.sigma_gamma)),
            dispersion,
            error_model: s.error_model,
            n_subjects: s.n_subjects.clone(),
            n_replications: s.n_replications,
            n_draws_per_interval: s.n_draws_per_interval,
            reported_ccc: s.reported_ccc,
        }
    }
}

impl TryFrom<ScenarioConfig> for Scenario {
    type Error = Error;
    fn try_from(c: ScenarioConfig) -> Result<Self> {
        let spec = ModelSpec {
            family: c.family,
            times: c.times,
            replicates: c.replicates,
            raters: c.raters,
            effects: RandomEffects {
                slopes: c.slopes,
                interaction: c.interaction,
            },
            time_grid: TimeGrid {
                origin: c.time_origin,
                step: c.time_step,
            },
        };
        let l = c.raters;
        let sigma_gamma = match &c.sigma_gamma {
            Some(g) => from_rows(g, "sigma_gamma")?,
            None => Mat::zeros(l, l),
        };
        let dispersion = match (c.family, c.error_model.mixture_variance()) {
            (Family::Gaussian, Some(v)) => Dispersion::Sigma2(v),
            (Family::Gaussian, None) => Dispersion::Sigma2(c.dispersion.ok_or_else(|| {
                Error::InvalidParameters("gaussian scenario needs `dispersion` (σ²)".into())
            })?),
            (Family::Poisson, _) => Dispersion::Unit,
            (Family::Gamma, _) => Dispersion::Tau(c.dispersion.ok_or_else(|| {
                Error::InvalidParameters("gamma scenario needs `dispersion` (τ)".into())
            })?),
        };
        let truth = ParameterSet {
            beta: from_rows(&c.beta, "beta")?,
            sigma_alpha: c
                .sigma_alpha
                .iter()
                .map(|m| from_rows(m, "sigma_alpha"))
                .collect::<Result<_>>()?,
            sigma_gamma,
            dispersion,
        };
        let s = Scenario {
            name: c.name,
            description: c.description,
            spec,
            truth,
            error_model: c.error_model,
            n_subjects: c.n_subjects,
            n_replications: c.n_replications,
            n_draws_per_interval: c.n_draws_per_interval,
            reported_ccc: c.reported_ccc,
        };
        s.validate()?;
        Ok(s)
    }
}

fn m2(a: f64, b: f64, c: f64, d: f64) -> Mat {
    Mat::from_row_slice(2, 2, &[a, b, c, d])
}

fn table1_truth(sigma2: f64, slope_cov: Mat) -> ParameterSet {
    ParameterSet {
        beta: m2(0.75, -0.10, 0.50, -0.06),
        sigma_alpha: vec![m2(0.45, 0.40, 0.40, 0.49), slope_cov],
        sigma_gamma: Mat::zeros(2, 2),
        dispersion: Dispersion::Sigma2(sigma2),
    }
}

fn mixture(contaminant: Contaminant) -> ErrorModel {
    ErrorModel::Mixture {
        weight: 0.10,
        sigma2: 0.11,
        contaminant,
    }
}

/// Names of the shipped scenarios, plus group names accepted by [`lookup`].
pub fn catalog_names() -> Vec<String> {
    let mut v: Vec<String> = catalog().into_iter().map(|s| s.name).collect();
    v.push(MIXTURE_GROUP.to_string());
    v
}

const MIXTURE_GROUP: &str = "tableS1_mixtures";

/// The shipped scenario catalog.
pub fn catalog() -> Vec<Scenario> {
    let gaussian_2 =
        ModelSpec::new(Family::Gaussian, 10, 1, 2, 1).with_time_grid(TimeGrid::ZERO_BASED);
    let three_level = ModelSpec::new(Family::Gaussian, 10, 5, 2, 0).with_time_grid(TimeGrid::UNIT);
    let sizes = vec![30, 50, 100];
    let small = vec![15, 30, 50];
    let base =
        |name: &str, description: &str, spec: ModelSpec, truth: ParameterSet, reported: f64| {
            Scenario {
                name: name.into(),
                description: description.into(),
                spec,
                truth,
                error_model: ErrorModel::Family,
                n_subjects: sizes.clone(),
                n_replications: 200,
                n_draws_per_interval: 2000,
                reported_ccc: Some(reported),
            }
        };
    let s1_gamma = mixture(Contaminant::Gamma {
        shape: 0.5,
        scale: 2.0,
    });
    let s1_lognormal = mixture(Contaminant::Lognormal {
        loc: 0.5,
        scale: 0.7,
    });
    let s1_slope = m2(0.30, 0.20, 0.20, 0.18);
    vec![
        Scenario {
            n_subjects: small.clone(),
            ..base(
            "table1_gaussian",
            "Two raters, random intercept and slope, ten time points, one replicate",
            gaussian_2.clone(),
            table1_truth(0.11, m2(0.10, 0.067, 0.067, 0.06)),
            0.805,
        )
        },
        Scenario {
            n_subjects: vec![15, 30, 50, 100],
            ..base(
                "table2_poisson",
                "Poisson counts, two raters, random intercept and slope on times (j−1)/10, five replicates",
                ModelSpec::new(Family::Poisson, 10, 5, 2, 1).with_interaction(false).with_time_grid(TimeGrid { origin: 0.0, step: 0.1 }),
                ParameterSet {
                    beta: m2(4.50, -0.03, 4.30, 0.03),
                    sigma_alpha: vec![m2(0.63, 0.60, 0.60, 0.66), m2(0.08, 0.05, 0.05, 0.07)],
                    sigma_gamma: Mat::zeros(2, 2),
                    dispersion: Dispersion::Unit,
                },
                0.822,
            )
        },
        Scenario {
            error_model: s1_gamma,
            ..base(
                "tableS1_mixture_gamma",
                "Two raters with errors 0.9 N(0, 0.11) + 0.1 centred Gamma(0.5, 2)",
                gaussian_2.clone(),
                table1_truth(s1_gamma.mixture_variance().unwrap(), s1_slope.clone()),
                0.801,
            )
        },
        Scenario {
            error_model: s1_lognormal,
            ..base(
                "tableS1_mixture_lognormal",
                "Two raters with errors 0.9 N(0, 0.11) + 0.1 centred Lognormal(0.5, 0.7)",
                gaussian_2.clone(),
                table1_truth(s1_lognormal.mixture_variance().unwrap(), s1_slope),
                0.800,
            )
        },
        base(
            "tableS2_three_rater",
            "Three raters, random intercept and slope, ten time points",
            ModelSpec::new(Family::Gaussian, 10, 1, 3, 1).with_time_grid(TimeGrid::ZERO_BASED),
            ParameterSet {
                beta: Mat::from_row_slice(3, 2, &[0.75, -0.10, 0.50, -0.06, 0.60, -0.08]),
                sigma_alpha: vec![
                    Mat::from_row_slice(3, 3, &[0.45, 0.40, 0.42, 0.40, 0.49, 0.40, 0.42, 0.40, 0.45]),
                    Mat::from_row_slice(3, 3, &[0.10, 0.067, 0.05, 0.067, 0.06, 0.06, 0.05, 0.06, 0.08]),
                ],
                sigma_gamma: Mat::zeros(3, 3),
                dispersion: Dispersion::Sigma2(0.11),
            },
            0.731,
        ),
        Scenario {
            n_subjects: small,
            ..base(
            "tableS3_three_level",
            "Two raters, random intercept plus subject-by-time interaction, five replicates",
            three_level.clone(),
            ParameterSet {
                beta: m2(0.65, -0.10, 0.40, -0.06),
                sigma_alpha: vec![m2(0.45, 0.44, 0.44, 0.49)],
                sigma_gamma: m2(0.10, 0.067, 0.067, 0.06),
                dispersion: Dispersion::Sigma2(0.10),
            },
            0.772,
        )
        },
        Scenario {
            n_subjects: vec![15, 30, 50, 100],
            ..base(
            "tableS4_gamma",
            "Gamma responses with inverse link, shape 25, intercept plus interaction, five replicates",
            ModelSpec { family: Family::Gamma, ..three_level },
            ParameterSet {
                beta: m2(2.00, 0.08, 1.90, 0.06),
                sigma_alpha: vec![m2(0.25, 0.22, 0.22, 0.20)],
                sigma_gamma: m2(0.05, 0.04, 0.04, 0.04),
                dispersion: Dispersion::Tau(25.0),
            },
            0.622,
        )
        },
        Scenario {
            n_subjects: vec![30],
            reported_ccc: None,
            ..base(
                "proxy_check",
                "Two raters with weakly correlated intercept and slope predictors, for joint versus proxy pivots",
                gaussian_2,
                table1_truth(0.11, m2(0.30, 0.21, 0.21, 0.18)),
                0.0,
            )
        },
    ]
}

/// Scenarios registered under `name`; group names expand to several.
pub fn lookup(name: &str) -> Result<Vec<Scenario>> {
    let all = catalog();
    let hits: Vec<Scenario> = if name == MIXTURE_GROUP {
        all.into_iter()
            .filter(|s| s.name.starts_with("tableS1_mixture_"))
            .collect()
    } else {
        all.into_iter().filter(|s| s.name == name).collect()
    };
    if hits.is_empty() {
        return Err(Error::UnknownScenario {
            name: name.to_string(),
            available: catalog_names().join(", "),
        });
    }
    Ok(hits)
}

struct SubjectSampler<'a> {
    spec: &'a ModelSpec,
    params: &'a ParameterSet,
    errors: &'a ErrorModel,
    factors: Vec<Mat>,
    gamma_factor: Mat,
    z: Vec<Vec<f64>>,
}

impl<'a> SubjectSampler<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParameterSet, errors: &'a ErrorModel) -> Result<Self> {
        params.validate(spec)?;
        errors.validate(spec.family)?;
        Ok(Self {
            spec,
            params,
            errors,
            factors: params.sigma_alpha.iter().map(linalg::psd_factor).collect(),
            gamma_factor: linalg::psd_factor(&params.sigma_gamma),
            z: spec.basis_values(),
        })
    }

    fn correlated<R: Rng + ?Sized>(f: &Mat, rng: &mut R) -> Vec<f64> {
        let l = f.nrows();
        let e: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        (0..l)
            .map(|a| (0..l).map(|b| f[(a, b)] * e[b]).sum())
            .collect()
    }

    /// Linear predictors η[l·T + j] of one subject.
    fn eta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (t, l) = (self.spec.times, self.spec.raters);
        let alpha: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|f| Self::correlated(f, rng))
            .collect();
        let mut eta = vec![0.0; t * l];
        for j in 0..t {
            let g = if self.spec.effects.interaction {
                Self::correlated(&self.gamma_factor, rng)
            } else {
                vec![0.0; l]
            };
            for a in 0..l {
                let mut v = self.params.fixed_eta(self.spec, j, a) + g[a];
                for (s, zs) in self.z.iter().enumerate() {
                    v += zs[j] * alpha[s][a];
                }
                eta[a * t + j] = v;
            }
        }
        eta
    }

    /// Observations of one subject in the dataset layout; returns the number
    /// of rejected subject draws.
    fn subject<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> Result<usize> {
        let (t, k) = (self.spec.times, self.spec.replicates);
        let fam = self.spec.family;
        let mut rejected = 0;
        let eta = loop {
            let eta = self.eta(rng);
            if fam != Family::Gamma || eta.iter().all(|v| *v > 0.0) {
                break eta;
            }
            rejected += 1;
            if rejected >= MAX_SUBJECT_REJECTIONS {
                return Err(Error::DomainError(format!(
                    "Gamma linear predictor nonpositive in {MAX_SUBJECT_REJECTIONS} consecutive subject draws"
                )));
            }
        };
        for (cell, e) in eta.iter().enumerate() {
            let mu = fam.mean(*e);
            for r in 0..k {
                out[cell * k + r] = self.response(mu, rng)?;
            }
        }
        debug_assert_eq!(out.len(), eta.len() * k);
        let _ = t;
        Ok(rejected)
    }

    fn response<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> Result<f64> {
        match (self.spec.family, self.errors) {
            (Family::Gaussian, ErrorModel::Family) => {
                let s = self.params.dispersion.phi().sqrt();
                Ok(mu + s * rng.sample::<f64, _>(StandardNormal))
            }
            (
                Family::Gaussian,
                ErrorModel::Mixture {
                    weight,
                    sigma2,
                    contaminant,
                },
            ) => {
                if rng.random::<f64>() < *weight {
                    Ok(mu + contaminant.sample(rng)?)
                } else {
                    Ok(mu
                        + Normal::new(0.0, sigma2.sqrt())
                            .expect("positive variance")
                            .sample(rng))
                }
            }
            (Family::Poisson, _) => {
                if !(mu < 1e12) {
                    return Err(Error::OverflowGuard(mu));
                }
                Ok(Poisson::new(mu)
                    .map_err(|e| Error::DomainError(format!("Poisson mean {mu}: {e}")))?
                    .sample(rng))
            }
            (Family::Gamma, _) => {
                let tau = self.params.dispersion.value();
                Ok(Gamma::new(tau, mu / tau)
                    .map_err(|e| Error::DomainError(format!("Gamma mean {mu}: {e}")))?
                    .sample(rng))
            }
        }
    }
}

/// Simulate `n` subjects from the model at `params`.
pub fn simulate<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    errors: &ErrorModel,
    n: usize,
    rng: &mut R,
) -> Result<RatingDataset> {
    Ok(simulate_counting(spec, params, errors, n, rng)?.0)
}

/// As [`simulate`], also returning the number of rejected subject draws.
pub fn simulate_counting<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    errors: &ErrorModel,
    n: usize,
    rng: &mut R,
) -> Result<(RatingDataset, usize)> {
    let sampler = SubjectSampler::new(spec, params, errors)?;
    let per = spec.obs_len();
    let mut values = vec![0.0; n * per];
    let mut rejected = 0;
    for chunk in values.chunks_mut(per) {
        rejected += sampler.subject(rng, chunk)?;
    }
    let dims = Dims {
        subjects: n,
        times: spec.times,
        replicates: spec.replicates,
        raters: spec.raters,
    };
    Ok((RatingDataset::from_dense(dims, values)?, rejected))
}

/// One synthetic dataset of `n` subjects for a scenario.
pub fn generate_dataset<R: Rng + ?Sized>(
    scenario: &Scenario,
    n: usize,
    rng: &mut R,
) -> Result<RatingDataset> {
    simulate(
        &scenario.spec,
        &scenario.truth,
        &scenario.error_model,
        n,
        rng,
    )
}

/// The true CCC of a scenario: closed forms for Gaussian and Poisson,
/// Monte Carlo with `n_mc` draws for Gamma.
pub fn true_ccc(
    scenario: &Scenario,
    normalization: CccNormalization,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    let v = match scenario.spec.family {
        Family::Gamma => ccc::ccc_monte_carlo_seeded(&scenario.spec, &scenario.truth, n_mc, seed)?,
        _ => ccc::ccc_at(
            &scenario.spec,
            &scenario.truth,
            CccEvaluation::Closed,
            normalization,
            seed,
        )?,
    };
    Ok(v.value)
}

/// Value with a standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

const ORACLE_GROUPS: usize = 64;

/// CCC from raw sample moments of simulated ratings: per (time, replicate)
/// cell, rater variances, cross-covariances and mean differences are summed
/// and combined by the moment definition. The standard error is a
/// delete-one-group jackknife over 64 groups.
pub fn ccc_sample_oracle<R: Rng + ?Sized>(
    scenario: &Scenario,
    n_large: usize,
    rng: &mut R,
) -> Result<Estimate> {
    ccc_sample_oracle_seeded(scenario, n_large, rng.next_u64())
}

/// As [`ccc_sample_oracle`] with an explicit stream seed.
pub fn ccc_sample_oracle_seeded(
    scenario: &Scenario,
    n_large: usize,
    seed: u64,
) -> Result<Estimate> {
    let g = ORACLE_GROUPS.min(n_large);
    if g < 2 {
        return Err(Error::TooFewSamples(n_large));
    }
    let spec = &scenario.spec;
    let sampler = SubjectSampler::new(spec, &scenario.truth, &scenario.error_model)?;
    let (t, k, l) = (spec.times, spec.replicates, spec.raters);
    let cells = t * k;
    let per = spec.obs_len();
    // Sums per cell: first moments (cells·L) then second moments (cells·L·L).
    let width = cells * l + cells * l * l;
    let groups: Vec<Result<(usize, Vec<f64>)>> = (0..g)
        .into_par_iter()
        .map(|gi| {
            let size = n_large / g + usize::from(gi < n_large % g);
            let mut rng = substream(seed, &[label::ORACLE, gi as u64]);
            let mut sums = vec![0.0; width];
            let mut y = vec![0.0; per];
            for _ in 0..size {
                sampler.subject(&mut rng, &mut y)?;
                for c in 0..cells {
                    let (j, r) = (c / k, c % k);
                    for a in 0..l {
                        let ya = y[(a * t + j) * k + r];
                        sums[c * l + a] += ya;
                        for b in 0..l {
                            sums[cells * l + (c * l + a) * l + b] += ya * y[(b * t + j) * k + r];
                        }
                    }
                }
            }
            Ok((size, sums))
        })
        .collect();
    let groups: Vec<(usize, Vec<f64>)> = groups.into_iter().collect::<Result<_>>()?;
    let ccc_from = |n: usize, s: &[f64]| -> f64 {
        let nf = n as f64;
        let (mut cross, mut var, mut fixed) = (0.0, 0.0, 0.0);
        for c in 0..cells {
            let mean = |a: usize| s[c * l + a] / nf;
            let cov =
                |a: usize, b: usize| s[cells * l + (c * l + a) * l + b] / nf - mean(a) * mean(b);
            for a in 0..l {
                var += cov(a, a);
                for b in a + 1..l {
                    cross += cov(a, b);
                    fixed += (mean(a) - mean(b)).powi(2);
                }
            }
        }
        2.0 * cross / ((l as f64 - 1.0) * var + fixed)
    };
    let mut total = vec![0.0; width];
    let mut n_tot = 0;
    for (n, s) in &groups {
        n_tot += n;
        total.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let value = ccc_from(n_tot, &total);
    if !value.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    let loo: Vec<f64> = groups
        .iter()
        .map(|(n, s)| {
            let rest: Vec<f64> = total.iter().zip(s).map(|(a, b)| a - b).collect();
            ccc_from(n_tot - n, &rest)
        })
        .collect();
    let gm = loo.iter().sum::<f64>() / g as f64;
    let var = (g as f64 - 1.0) / g as f64 * loo.iter().map(|v| (v - gm).powi(2)).sum::<f64>();
    Ok(Estimate {
        value,
        std_error: var.sqrt(),
    })
}

/// Settings of a coverage study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub methods: Vec<IntervalMethod>,
    /// Subject counts; the scenario's list when empty.
    pub n_subjects: Vec<usize>,
    /// Replications; the scenario's count when `None`.
    pub replications: Option<usize>,
    /// Draws per fiducial interval; the scenario's count when `None`.
    pub n_draws: Option<usize>,
    pub n_boot: usize,
    pub alpha: f64,
    /// Pivot mode; the scenario's default when `None`.
    pub mode: Option<DrawMode>,
    pub evaluation: CccEvaluation,
    pub normalization: CccNormalization,
    /// Monte-Carlo size for the true CCC when it has no closed form.
    pub truth_n_mc: usize,
    pub seed: u64,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            methods: IntervalMethod::ALL.to_vec(),
            n_subjects: Vec::new(),
            replications: None,
            n_draws: None,
            n_boot: 2000,
            alpha: 0.05,
            mode: None,
            evaluation: CccEvaluation::Closed,
            normalization: CccNormalization::FactorTwo,
            truth_n_mc: 1_000_000,
            seed: 0,
        }
    }
}

/// One row of a coverage table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub n_subjects: usize,
    pub method: IntervalMethod,
    pub replications: usize,
    pub completed: usize,
    pub failed: usize,
    pub covered: usize,
    pub coverage: f64,
    /// Clopper-Pearson interval for the coverage.
    pub coverage_ci: (f64, f64),
    pub mean_lower: f64,
    pub mean_upper: f64,
    pub expected_width: f64,
    pub width_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub true_ccc: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rows: Vec<CoverageRow>,
    /// Messages of failed replications, with size and index.
    pub failures: Vec<String>,
}

/// A random valid parameter set for `spec`, scaled so the family's mean
/// stays in a moderate range. Used by property checks.
pub fn random_parameters<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ParameterSet {
    let l = spec.raters;
    let (b0, b1, scale) = match spec.family {
        Family::Gaussian => ((-1.0, 1.0), (-0.1, 0.1), 0.5),
        Family::Poisson => ((0.5, 3.0), (-0.05, 0.05), 0.2),
        Family::Gamma => ((2.0, 4.0), (0.0, 0.1), 0.03),
    };
    let psd = |rng: &mut R, s: f64| {
        let a = Mat::from_fn(l, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&a * a.transpose()) * (s * rng.random::<f64>() / l as f64)
    };
    let d = spec.n_fixed();
    let beta = Mat::from_fn(l, d, |_, c| match c {
        0 => rng.random_range(b0.0..b0.1),
        _ => rng.random_range(b1.0..b1.1) / c as f64,
    });
    let sigma_alpha = (0..spec.n_alpha())
        .map(|s| psd(rng, scale / (1 + 10 * s) as f64))
        .collect();
    let sigma_gamma = if spec.effects.interaction {
        psd(rng, scale / 4.0)
    } else {
        Mat::zeros(l, l)
    };
    let dispersion = match spec.family {
        Family::Gaussian => Dispersion::Sigma2(rng.random_range(0.01..1.0)),
        Family::Poisson => Dispersion::Unit,
        Family::Gamma => Dispersion::Tau(rng.random_range(5.0..50.0)),
    };
    ParameterSet {
        beta,
        sigma_alpha,
        sigma_gamma,
        dispersion,
    }
}

/// Exact binomial confidence interval at level `1 − alpha`.
pub fn clopper_pearson(successes: usize, trials: usize, alpha: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        BetaDist::new(x, n - x + 1.0)
            .expect("valid beta")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        BetaDist::new(x + 1.0, n - x)
            .expect("valid beta")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

type RepOutcome = Vec<std::result::Result<(f64, f64), String>>;

/// Replicate datasets, build each requested interval and tabulate coverage
/// of the true CCC and interval widths.
pub fn coverage_study(scenario: &Scenario, opts: &CoverageOptions) -> Result<CoverageReport> {
    scenario.validate()?;
    if opts.methods.is_empty() {
        return Err(Error::InvalidParameters(
            "no interval methods requested".into(),
        ));
    }
    let reps = opts.replications.unwrap_or(scenario.n_replications);
    if reps == 0 {
        return Err(Error::InvalidParameters(
            "at least one replication is required".into(),
        ));
    }
    let sizes = if opts.n_subjects.is_empty() {
        scenario.n_subjects.clone()
    } else {
        opts.n_subjects.clone()
    };
    let truth = true_ccc(
        scenario,
        opts.normalization,
        opts.truth_n_mc,
        derive_seed(opts.seed, &[label::ORACLE]),
    )?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in &sizes {
        let outcomes: Vec<RepOutcome> = (0..reps as u64)
            .into_par_iter()
            .map(|r| replication(scenario, opts, n, r))
            .collect();
        for (mi, &method) in opts.methods.iter().enumerate() {
            let mut ok = Vec::new();
            for (r, o) in outcomes.iter().enumerate() {
                match &o[mi] {
                    Ok(iv) => ok.push(*iv),
                    Err(msg) => failures.push(format!(
                        "n={n} replication={r} method={}: {msg}",
                        method.name()
                    )),
                }
            }
            let failed = reps - ok.len();
            if failed as f64 > 0.10 * reps as f64 {
                return Err(Error::ExcessiveReplicationFailures {
                    failed,
                    total: reps,
                });
            }
            let m = ok.len().max(1) as f64;
            let covered = ok
                .iter()
                .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
                .count();
            let widths: Vec<f64> = ok.iter().map(|(lo, hi)| hi - lo).collect();
            let ew = widths.iter().sum::<f64>() / m;
            let wsd = if ok.len() > 1 {
                (widths.iter().map(|w| (w - ew).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(CoverageRow {
                n_subjects: n,
                method,
                replications: reps,
                completed: ok.len(),
                failed,
                covered,
                coverage: covered as f64 / m,
                coverage_ci: clopper_pearson(covered, ok.len(), 0.05),
                mean_lower: ok.iter().map(|v| v.0).sum::<f64>() / m,
                mean_upper: ok.iter().map(|v| v.1).sum::<f64>() / m,
                expected_width: ew,
                width_std_error: wsd / m.sqrt(),
            });
        }
    }
    Ok(CoverageReport {
        scenario: scenario.name.clone(),
        true_ccc: truth,
        alpha: opts.alpha,
        seed: opts.seed,
        rows,
        failures,
    })
}

fn replication(scenario: &Scenario, opts: &CoverageOptions, n: usize, r: u64) -> RepOutcome {
    let all_failed = |msg: String| opts.methods.iter().map(|_| Err(msg.clone())).collect();
    let mut rng: StreamRng = substream(opts.seed, &[label::REPLICATION, n as u64, r]);
    let data = match generate_dataset(scenario, n, &mut rng) {
        Ok(d) => d,
        Err(e) => return all_failed(e.to_string()),
    };
    let fit = match estimation::fit(&data, &scenario.spec) {
        Ok(f) => f,
        Err(e) => return all_failed(e.to_string()),
    };
    opts.methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let io = IntervalOptions {
                alpha: opts.alpha,
                n_draws: opts.n_draws.unwrap_or(scenario.n_draws_per_interval),
                n_boot: opts.n_boot,
                mode: opts.mode.unwrap_or_else(|| scenario.draw_mode()),
                evaluation: opts.evaluation,
                normalization: opts.normalization,
                seed: derive_seed(opts.seed, &[label::REPLICATION, n as u64, r, mi as u64]),
            };
            intervals::interval_from_fit(m, &data, &fit, &io)
                .map(|iv| (iv.lower, iv.upper))
                .map_err(|e| e.to_string())
        })
        .collect()
}
