//! Fiducial pivots: Wishart draws for the predictor covariance, recovery of
//! variance components by least squares, and fixed-effect and dispersion pivots.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{self, FitResult, PredictorSet};
use crate::linalg::{self, Mat, Vect};
use crate::model::{reduced, Dispersion, Family, ModelSpec, ParameterSet, ThetaLayout};
use crate::optim::{self, NewtonOptions};

/// Smallest share of a scatter diagonal entry not explained by the
/// preceding coordinates before the scatter counts as singular.
pub const SCATTER_RANK_TOL: f64 = 1e-10;

/// Scatter matrix with its degrees of freedom and Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartObservation {
    scatter: Mat,
    df: usize,
    chol: Mat,
}

impl WishartObservation {
    pub fn new(scatter: Mat, df: usize) -> Result<Self> {
        let p = scatter.nrows();
        if !scatter.is_square() || p == 0 {
            return Err(Error::InvalidDimensions(
                "scatter must be square and nonempty".into(),
            ));
        }
        if df < p {
            return Err(Error::RankDeficientScatter {
                subjects: df,
                dim: p,
            });
        }
        let chol = linalg::cholesky(&linalg::symmetrize(&scatter), "scatter")
            .map_err(|_| Error::DegenerateScatter)?
            .l();
        if (0..p).any(|i| !(chol[(i, i)].powi(2) > SCATTER_RANK_TOL * scatter[(i, i)])) {
            return Err(Error::DegenerateScatter);
        }
        Ok(Self { scatter, df, chol })
    }

    pub fn scatter(&self) -> &Mat {
        &self.scatter
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn dim(&self) -> usize {
        self.scatter.nrows()
    }

    /// Lower Cholesky factor `t_s` of the scatter.
    pub fn chol_factor(&self) -> &Mat {
        &self.chol
    }
}

/// Lower-triangular Bartlett matrix: `V_ii² ~ χ²_{n−i+1}`, `V_ij ~ N(0,1)` below the diagonal.
pub fn bartlett_randoms<R: Rng + ?Sized>(p: usize, df: usize, rng: &mut R) -> Mat {
    let mut v = Mat::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new((df - i) as f64).expect("positive degrees of freedom");
        v[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            v[(i, j)] = StandardNormal.sample(rng);
        }
    }
    v
}

/// `t_s (VᵀV)^{-1} t_sᵀ` for given Bartlett randoms.
pub fn wishart_from_randoms(obs: &WishartObservation, v: &Mat) -> Mat {
    let r = v
        .transpose()
        .solve_upper_triangular(&obs.chol.transpose())
        .expect("Bartlett diagonal is positive")
        .transpose();
    linalg::symmetrize(&(&r * r.transpose()))
}

/// One fiducial draw `Σ̃ = t_s (VᵀV)^{-1} t_sᵀ`.
pub fn sample_wishart_fiducial<R: Rng + ?Sized>(obs: &WishartObservation, rng: &mut R) -> Mat {
    let v = bartlett_randoms(obs.dim(), obs.df, rng);
    wishart_from_randoms(obs, &v)
}

/// Randoms that map the pivot back to `sigma`: `V = θ^{-1} t_s` with `θθᵀ = Σ`.
pub fn observed_bartlett(obs: &WishartObservation, sigma: &Mat) -> Result<Mat> {
    let theta = linalg::cholesky(sigma, "covariance")?.l();
    theta
        .solve_lower_triangular(&obs.chol)
        .ok_or_else(|| Error::NotPositiveDefinite("covariance factor".into()))
}

/// Joint pivots for the stacked predictor covariance or independent
/// per-block pivots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DrawMode {
    #[default]
    Joint,
    Proxy,
}

impl DrawMode {
    /// Joint pivots unless the model has the subject-by-time interaction.
    /// With the interaction, `μ̂_γ = Σ_γ (Σ_α^0)^{-1} μ̂_{α_0}` holds exactly
    /// (both are multiples of the same data summary), so the stacked scatter
    /// is singular and only per-block pivots exist.
    pub fn default_for(spec: &ModelSpec) -> Self {
        if spec.effects.interaction {
            DrawMode::Proxy
        } else {
            DrawMode::Joint
        }
    }
}

impl std::str::FromStr for DrawMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(DrawMode::Joint),
            "proxy" => Ok(DrawMode::Proxy),
            o => Err(Error::InvalidParameters(format!("unknown draw mode `{o}`"))),
        }
    }
}

/// One fiducial draw of the stacked predictor covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorCovTarget {
    pub delta_tilde: Mat,
    /// Diagonal blocks `(offset, size)` when only those are targeted.
    pub blocks: Option<Vec<(usize, usize)>>,
}

/// Wishart observations of the predictor scatter in the requested mode.
#[derive(Debug, Clone)]
pub struct PredictorScatter {
    pub mode: DrawMode,
    pub dim: usize,
    pub blocks: Vec<(usize, WishartObservation)>,
}

impl PredictorScatter {
    /// Scatter `Σ_i u_i u_iᵀ` (known zero mean) with df = N.
    /// `DegenerateScatter` when a block is singular, as the joint block
    /// always is under the interaction (see [`DrawMode::default_for`]).
    pub fn new(predictors: &PredictorSet, mode: DrawMode) -> Result<Self> {
        let u = predictors.stacked();
        let (n, q) = (u.nrows(), u.ncols());
        if n <= q {
            return Err(Error::RankDeficientScatter {
                subjects: n,
                dim: q,
            });
        }
        let s = u.transpose() * &u;
        let l = predictors.mu_alpha[0][0].len();
        let blocks = match mode {
            DrawMode::Joint => vec![(0, WishartObservation::new(s, n)?)],
            DrawMode::Proxy => (0..q / l)
                .map(|b| {
                    Ok((
                        b * l,
                        WishartObservation::new(s.view((b * l, b * l), (l, l)).into_owned(), n)?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            mode,
            dim: q,
            blocks,
        })
    }

    pub fn target_from_randoms(&self, randoms: &[Mat]) -> PredictorCovTarget {
        let mut delta = Mat::zeros(self.dim, self.dim);
        for ((off, obs), v) in self.blocks.iter().zip(randoms) {
            let p = obs.dim();
            delta
                .view_mut((*off, *off), (p, p))
                .copy_from(&wishart_from_randoms(obs, v));
        }
        let blocks = match self.mode {
            DrawMode::Joint => None,
            DrawMode::Proxy => Some(self.blocks.iter().map(|(o, w)| (*o, w.dim())).collect()),
        };
        PredictorCovTarget {
            delta_tilde: delta,
            blocks,
        }
    }

    pub fn sample_randoms<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Mat> {
        self.blocks
            .iter()
            .map(|(_, o)| bartlett_randoms(o.dim(), o.df(), rng))
            .collect()
    }

    /// Randoms reproducing the given model-implied covariance.
    pub fn observed_randoms(&self, model: &Mat) -> Result<Vec<Mat>> {
        self.blocks
            .iter()
            .map(|(off, o)| {
                observed_bartlett(
                    o,
                    &model.view((*off, *off), (o.dim(), o.dim())).into_owned(),
                )
            })
            .collect()
    }
}

/// One draw of Δ̃ from the predictors.
pub fn sample_predictor_cov_fiducial<R: Rng + ?Sized>(
    predictors: &PredictorSet,
    mode: DrawMode,
    rng: &mut R,
) -> Result<PredictorCovTarget> {
    let sc = PredictorScatter::new(predictors, mode)?;
    let r = sc.sample_randoms(rng);
    Ok(sc.target_from_randoms(&r))
}

/// Model-implied covariance of the stacked predictors, `C V^{-1} Cᵀ`.
pub fn model_predictor_cov(
    spec: &ModelSpec,
    alpha: &[Mat],
    gamma: &Mat,
    err_cells: &[f64],
) -> Result<Mat> {
    let v = reduced::covariance(spec, alpha, gamma, err_cells);
    let ch = linalg::cholesky(&v, "marginal covariance")?;
    let c = reduced::cross(spec, alpha, gamma);
    let w = ch.solve(&c.transpose());
    Ok(linalg::symmetrize(&(c * w)))
}

/// Least-squares objective `F(v) = ‖Δ̃ − M(v)‖²_F` over log-Cholesky coordinates.
pub struct RecoveryObjective<'a> {
    spec: &'a ModelSpec,
    layout: ThetaLayout,
    target: &'a Mat,
    mask: Mat,
    err_cells: &'a [f64],
}

impl<'a> RecoveryObjective<'a> {
    pub fn new(spec: &'a ModelSpec, target: &'a PredictorCovTarget, err_cells: &'a [f64]) -> Self {
        let q = target.delta_tilde.nrows();
        let mask = match &target.blocks {
            None => Mat::from_element(q, q, 1.0),
            Some(bl) => {
                let mut m = Mat::zeros(q, q);
                for (o, p) in bl {
                    m.view_mut((*o, *o), (*p, *p)).fill(1.0);
                }
                m
            }
        };
        Self {
            spec,
            layout: ThetaLayout::of(spec),
            target: &target.delta_tilde,
            mask,
            err_cells,
        }
    }

    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        self.eval(v).0
    }

    /// Objective and analytic gradient.
    pub fn eval(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let bad = (f64::INFINITY, vec![f64::NAN; v.len()]);
        if v.iter().any(|x| !x.is_finite() || x.abs() > 40.0) {
            return bad;
        }
        let comps = self.layout.decode(v);
        let vm = reduced::covariance(self.spec, &comps.alpha, &comps.gamma, self.err_cells);
        let Some(ch) = vm.cholesky() else { return bad };
        let c = reduced::cross(self.spec, &comps.alpha, &comps.gamma);
        let w = ch.solve(&c.transpose());
        let m = &c * &w;
        let r = (self.target - m).component_mul(&self.mask);
        let r = linalg::symmetrize(&r);
        let f = r.norm_squared();
        let p = &r * w.transpose() * -4.0;
        let q = &w * &r * w.transpose() * 2.0;
        let (ga, gg) = reduced::component_gradients(self.spec, &q, Some(&p));
        let g = self.layout.chain(&comps, &ga, &gg);
        if !f.is_finite() {
            return bad;
        }
        (f, g)
    }
}

/// Newton solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverDiag {
    pub objective: f64,
    pub iterations: usize,
    pub grad_inf: f64,
    pub converged: bool,
}

/// Recovered covariance components.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub sigma_alpha: Vec<Mat>,
    pub sigma_gamma: Mat,
    pub theta: Vec<f64>,
    pub diag: SolverDiag,
    /// Objective values after each accepted step.
    pub history: Vec<f64>,
}

/// Minimize `‖Δ̃ − M(v)‖²_F` by Newton-CG starting at `start`.
pub fn recover_variance_components(
    target: &PredictorCovTarget,
    spec: &ModelSpec,
    err_cells: &[f64],
    start: &[f64],
) -> Recovery {
    let obj = RecoveryObjective::new(spec, target, err_cells);
    let r = optim::newton_cg(|v| obj.eval(v), start, NewtonOptions::default());
    let comps = obj.layout.decode(&r.x);
    Recovery {
        sigma_alpha: comps.alpha,
        sigma_gamma: comps.gamma,
        theta: r.x,
        diag: SolverDiag {
            objective: r.f,
            iterations: r.iterations,
            grad_inf: r.grad_inf,
            converged: r.converged,
        },
        history: r.history,
    }
}

/// Fixed-effect information `N X̄ᵀ V^{-1} X̄` (dL×dL).
pub fn beta_information(
    spec: &ModelSpec,
    n_subjects: usize,
    alpha: &[Mat],
    gamma: &Mat,
    err_cells: &[f64],
) -> Result<Mat> {
    let v = reduced::covariance(spec, alpha, gamma, err_cells);
    let ch = linalg::cholesky(&v, "marginal covariance")?;
    let x = reduced::design(spec);
    Ok(x.transpose() * ch.solve(&x) * n_subjects as f64)
}

/// `β̂ − I^{-1/2} Z` with β stored as an L×d matrix and `Z` stacked rater-major.
pub fn beta_from_randoms(beta_hat: &Mat, info: &Mat, z: &Vect) -> Result<Mat> {
    let r = linalg::inv_sqrt_spd(info)?;
    let shift = r * z;
    let d = beta_hat.ncols();
    Ok(Mat::from_fn(beta_hat.nrows(), d, |l, c| {
        beta_hat[(l, c)] - shift[l * d + c]
    }))
}

/// Draw β̃ at fixed covariance components.
pub fn sample_beta_fiducial<R: Rng + ?Sized>(
    fit: &FitResult,
    alpha: &[Mat],
    gamma: &Mat,
    err_cells: &[f64],
    rng: &mut R,
) -> Result<Mat> {
    let info = beta_information(&fit.spec, fit.n_subjects, alpha, gamma, err_cells)?;
    let z = Vect::from_fn(info.nrows(), |_, _| rng.sample(StandardNormal));
    beta_from_randoms(&fit.estimates.beta, &info, &z)
}

/// Dispersion pivot of the family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DispersionPivot {
    /// `m σ̂² / U`, `U ~ χ²_m`.
    Gaussian {
        df: f64,
        sigma2_hat: f64,
    },
    Unit,
    /// Normal approximation `τ̂ + se·Z` truncated to positive values.
    Gamma {
        tau_hat: f64,
        se: f64,
    },
}

impl DispersionPivot {
    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        let spec = &fit.spec;
        Ok(match spec.family {
            Family::Poisson => DispersionPivot::Unit,
            Family::Gaussian => {
                let df = spec.residual_df(fit.n_subjects);
                DispersionPivot::Gaussian {
                    df: df as f64,
                    sigma2_hat: estimation::estimate_dispersion(fit)?,
                }
            }
            Family::Gamma => {
                let df = spec.residual_df(fit.n_subjects);
                let tau = estimation::estimate_dispersion(fit)?;
                DispersionPivot::Gamma {
                    tau_hat: tau,
                    se: tau * (2.0 / df as f64).sqrt(),
                }
            }
        })
    }

    pub fn center(&self) -> Dispersion {
        match *self {
            DispersionPivot::Gaussian { sigma2_hat, .. } => Dispersion::Sigma2(sigma2_hat),
            DispersionPivot::Unit => Dispersion::Unit,
            DispersionPivot::Gamma { tau_hat, .. } => Dispersion::Tau(tau_hat),
        }
    }

    /// Pivot value for a given auxiliary random.
    pub fn value(&self, u: f64) -> Dispersion {
        match *self {
            DispersionPivot::Gaussian { df, sigma2_hat } => Dispersion::Sigma2(df * sigma2_hat / u),
            DispersionPivot::Unit => Dispersion::Unit,
            DispersionPivot::Gamma { tau_hat, se } => Dispersion::Tau(tau_hat + se * u),
        }
    }

    /// The auxiliary random at its observed value.
    pub fn observed_random(&self) -> f64 {
        match *self {
            DispersionPivot::Gaussian { df, .. } => df,
            _ => 0.0,
        }
    }

    pub fn sample_random<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DispersionPivot::Gaussian { df, .. } => {
                ChiSquared::new(df).expect("positive df").sample(rng)
            }
            DispersionPivot::Unit => 0.0,
            DispersionPivot::Gamma { tau_hat, se } => loop {
                let z: f64 = rng.sample(StandardNormal);
                if tau_hat + se * z > 0.0 {
                    break z;
                }
            },
        }
    }
}

/// Draw the dispersion pivot for a fit.
pub fn sample_dispersion_fiducial<R: Rng + ?Sized>(
    fit: &FitResult,
    rng: &mut R,
) -> Result<Dispersion> {
    let p = DispersionPivot::from_fit(fit)?;
    Ok(p.value(p.sample_random(rng)))
}

/// A complete joint realization of the pivots.
#[derive(Debug, Clone, PartialEq)]
pub struct FiducialDraw {
    pub beta_tilde: Mat,
    pub sigma_alpha_tilde: Vec<Mat>,
    pub sigma_gamma_tilde: Mat,
    pub dispersion_tilde: Dispersion,
    pub solver: SolverDiag,
    /// Extra attempts made after solver failures.
    pub retries: usize,
}

impl FiducialDraw {
    pub fn params(&self) -> ParameterSet {
        ParameterSet {
            beta: self.beta_tilde.clone(),
            sigma_alpha: self.sigma_alpha_tilde.clone(),
            sigma_gamma: self.sigma_gamma_tilde.clone(),
            dispersion: self.dispersion_tilde,
        }
    }
}

/// All auxiliary randoms of one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotRandoms {
    pub dispersion: f64,
    pub wishart: Vec<Mat>,
    pub z_beta: Vect,
}

/// Everything fixed across the draws of one fit.
#[derive(Debug, Clone)]
pub struct FiducialContext {
    pub spec: ModelSpec,
    pub n_subjects: usize,
    pub scatter: PredictorScatter,
    pub dispersion: DispersionPivot,
    pub beta_hat: Mat,
    pub theta_hat: Vec<f64>,
    pub sigma_alpha_hat: Vec<Mat>,
    pub sigma_gamma_hat: Mat,
    /// `g'(μ̂)² ζ(μ̂)` averaged over subjects on the TL grid; the error
    /// diagonal is φ times this.
    pub unit_err_cells: Vec<f64>,
}

/// Retries after a solver failure before the draw is recorded as failed.
pub const MAX_RETRIES: usize = 3;

impl FiducialContext {
    pub fn new(fit: &FitResult, mode: DrawMode) -> Result<Self> {
        let spec = fit.spec.clone();
        let predictors = estimation::predict_conditional_means(fit)?;
        let scatter = PredictorScatter::new(&predictors, mode)?;
        let dispersion = DispersionPivot::from_fit(fit)?;
        let fam = spec.family;
        let (k, tl) = (spec.replicates, spec.cell_len());
        let unit_err_cells = match fam {
            Family::Gaussian => vec![1.0; tl],
            _ => {
                let mut c = vec![0.0; tl];
                for m in &fit.fitted_means {
                    for (cell, v) in c.iter_mut().enumerate() {
                        let mu = m[cell * k];
                        *v += fam.link_deriv(mu).powi(2) * fam.variance_fn(mu);
                    }
                }
                c.iter().map(|v| v / fit.n_subjects as f64).collect()
            }
        };
        Ok(Self {
            spec,
            n_subjects: fit.n_subjects,
            scatter,
            dispersion,
            beta_hat: fit.estimates.beta.clone(),
            theta_hat: fit.theta.clone(),
            sigma_alpha_hat: fit.estimates.sigma_alpha.clone(),
            sigma_gamma_hat: fit.estimates.sigma_gamma.clone(),
            unit_err_cells,
        })
    }

    pub fn err_cells(&self, d: Dispersion) -> Vec<f64> {
        let phi = d.phi();
        self.unit_err_cells.iter().map(|v| v * phi).collect()
    }

    /// Parameters at which every pivot is centred.
    pub fn plug_in(&self) -> ParameterSet {
        ParameterSet {
            beta: self.beta_hat.clone(),
            sigma_alpha: self.sigma_alpha_hat.clone(),
            sigma_gamma: self.sigma_gamma_hat.clone(),
            dispersion: self.dispersion.center(),
        }
    }

    pub fn sample_randoms<R: Rng + ?Sized>(&self, rng: &mut R) -> PivotRandoms {
        let dispersion = self.dispersion.sample_random(rng);
        let wishart = self.scatter.sample_randoms(rng);
        let z_beta = Vect::from_fn(self.beta_hat.len(), |_, _| rng.sample(StandardNormal));
        PivotRandoms {
            dispersion,
            wishart,
            z_beta,
        }
    }

    /// Randoms replaced by their observed-data values.
    pub fn observed_randoms(&self) -> Result<PivotRandoms> {
        let center = self.dispersion.center();
        let m = model_predictor_cov(
            &self.spec,
            &self.sigma_alpha_hat,
            &self.sigma_gamma_hat,
            &self.err_cells(center),
        )?;
        Ok(PivotRandoms {
            dispersion: self.dispersion.observed_random(),
            wishart: self.scatter.observed_randoms(&m)?,
            z_beta: Vect::zeros(self.beta_hat.len()),
        })
    }

    /// Deterministic map from randoms to a draw.
    pub fn draw_from_randoms(&self, r: &PivotRandoms) -> Result<FiducialDraw> {
        let disp = self.dispersion.value(r.dispersion);
        let err = self.err_cells(disp);
        let target = self.scatter.target_from_randoms(&r.wishart);
        let rec = recover_variance_components(&target, &self.spec, &err, &self.theta_hat);
        let info = beta_information(
            &self.spec,
            self.n_subjects,
            &rec.sigma_alpha,
            &rec.sigma_gamma,
            &err,
        )?;
        let beta = beta_from_randoms(&self.beta_hat, &info, &r.z_beta)?;
        Ok(FiducialDraw {
            beta_tilde: beta,
            sigma_alpha_tilde: rec.sigma_alpha,
            sigma_gamma_tilde: rec.sigma_gamma,
            dispersion_tilde: disp,
            solver: rec.diag,
            retries: 0,
        })
    }
}

/// One joint draw, resampling up to [`MAX_RETRIES`] times after solver
/// failures; the returned draw has `solver.converged == false` if all failed.
pub fn sample_joint_draw<R: Rng + ?Sized>(
    ctx: &FiducialContext,
    rng: &mut R,
) -> Result<FiducialDraw> {
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        let r = ctx.sample_randoms(rng);
        match ctx.draw_from_randoms(&r) {
            Ok(mut d) => {
                d.retries = attempt;
                if d.solver.converged {
                    return Ok(d);
                }
                last = Some(Ok(d));
            }
            Err(e) => last = Some(Err(e)),
        }
    }
    last.expect("at least one attempt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::simulation::{generate_dataset, lookup};
    use rand_distr::Gamma;
    use statrs::distribution::{ChiSquared as ChiSq, ContinuousCDF};

    fn scenario_fit(name: &str, n: usize, seed: u64) -> FitResult {
        let s = &lookup(name).unwrap()[0];
        let data = generate_dataset(s, n, &mut substream(seed, &[0])).unwrap();
        estimation::fit(&data, &s.spec).unwrap()
    }

    fn scalar_draws(s: f64, n: usize, m: usize, seed: u64) -> Vec<f64> {
        let obs = WishartObservation::new(Mat::from_element(1, 1, s), n).unwrap();
        let mut rng = substream(seed, &[1]);
        let mut v: Vec<f64> = (0..m)
            .map(|_| sample_wishart_fiducial(&obs, &mut rng)[(0, 0)])
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn ks_inverse_chi2(sorted: &[f64], s: f64, n: usize) -> f64 {
        let chi = ChiSq::new(n as f64).unwrap();
        let m = sorted.len() as f64;
        sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - chi.cdf(s / x);
                (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_wishart_median() {
        let v = scalar_draws(10.0, 5, 100_000, 3);
        let med = v[v.len() / 2];
        assert!((med - 10.0 / 4.35146).abs() < 0.05, "median {med}");
    }

    #[test]
    fn scalar_wishart_law_ks() {
        let v = scalar_draws(10.0, 5, 10_000, 4);
        let d = ks_inverse_chi2(&v, 10.0, 5);
        assert!(d < 1.628 / 100.0, "KS distance {d}");
    }

    #[test]
    fn wishart_substitution() {
        let s = Mat::from_row_slice(3, 3, &[5.0, 1.0, 0.5, 1.0, 4.0, -0.3, 0.5, -0.3, 2.0]);
        let sigma = Mat::from_row_slice(3, 3, &[0.9, 0.2, 0.1, 0.2, 0.7, 0.05, 0.1, 0.05, 0.4]);
        let obs = WishartObservation::new(s.clone(), 12).unwrap();
        let t = obs.chol_factor();
        assert!((t * t.transpose() - &s).amax() < 1e-10);
        let v = observed_bartlett(&obs, &sigma).unwrap();
        assert!((wishart_from_randoms(&obs, &v) - sigma).amax() < 1e-10);
    }

    #[test]
    fn wishart_mean_matches_brute_force() {
        let obs = WishartObservation::new(Mat::identity(2, 2), 50).unwrap();
        let mut rng = substream(5, &[2]);
        let m = 100_000;
        let mut sum = Mat::zeros(2, 2);
        let mut sq = Mat::zeros(2, 2);
        for _ in 0..m {
            let d = sample_wishart_fiducial(&obs, &mut rng);
            sq += d.component_mul(&d);
            sum += d;
        }
        let mean = &sum / m as f64;
        let se = (&sq / m as f64 - mean.component_mul(&mean)).map(|v| (v / m as f64).sqrt());

        let mut rng = substream(6, &[2]);
        let big = 1_000_000;
        let mut oracle = Mat::zeros(2, 2);
        for _ in 0..big {
            let c1 = Gamma::<f64>::new(25.0, 2.0)
                .unwrap()
                .sample(&mut rng)
                .sqrt();
            let c2 = Gamma::<f64>::new(24.5, 2.0)
                .unwrap()
                .sample(&mut rng)
                .sqrt();
            let z: f64 = rng.sample(StandardNormal);
            let v = Mat::from_row_slice(2, 2, &[c1, 0.0, z, c2]);
            oracle += (v.transpose() * v).try_inverse().unwrap();
        }
        oracle /= big as f64;
        for k in 0..4 {
            assert!(
                (mean[k] - oracle[k]).abs() < 5.0 * se[k] + 1e-12,
                "entry {k}: {} vs {}",
                mean[k],
                oracle[k]
            );
        }
    }

    #[test]
    fn degenerate_and_short_scatter() {
        let s = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            WishartObservation::new(s, 5),
            Err(Error::DegenerateScatter)
        ));
        assert!(matches!(
            WishartObservation::new(Mat::identity(3, 3), 2),
            Err(Error::RankDeficientScatter { .. })
        ));
        let preds = PredictorSet {
            mu_alpha: (0..4)
                .map(|i| vec![Vect::from_element(2, i as f64), Vect::from_element(2, 1.0)])
                .collect(),
            mu_gamma: None,
        };
        assert!(matches!(
            PredictorScatter::new(&preds, DrawMode::Joint),
            Err(Error::RankDeficientScatter { .. })
        ));
    }

    #[test]
    fn proxy_marginal_is_inverse_chi2() {
        let fit = scenario_fit("tableS3_three_level", 30, 7);
        let preds = estimation::predict_conditional_means(&fit).unwrap();
        let mut one = preds.clone();
        for p in one.mu_alpha.iter_mut() {
            p[0] = Vect::from_element(1, p[0][0]);
        }
        one.mu_gamma = one
            .mu_gamma
            .map(|g| g.into_iter().map(|v| Vect::from_element(1, v[0])).collect());
        let sc = PredictorScatter::new(&one, DrawMode::Proxy).unwrap();
        let s11 = sc.blocks[0].1.scatter()[(0, 0)];
        let mut rng = substream(8, &[0]);
        let mut v: Vec<f64> = (0..10_000)
            .map(|_| sample_predictor_cov_fiducial(&one, DrawMode::Proxy, &mut rng).unwrap())
            .map(|t| t.delta_tilde[(0, 0)])
            .collect();
        v.sort_by(f64::total_cmp);
        assert!(ks_inverse_chi2(&v, s11, 30) < 1.628 / 100.0);
        assert!(matches!(
            PredictorScatter::new(&preds, DrawMode::Joint),
            Err(Error::DegenerateScatter)
        ));
    }

    #[test]
    fn block_counts() {
        let spec = ModelSpec::new(Family::Gaussian, 10, 1, 2, 1).with_interaction(true);
        assert_eq!(ThetaLayout::of(&spec).len(), 9);
        let q = spec.n_predictors();
        assert_eq!(q, 6);
        assert_eq!(q * (q + 1) / 2, 21);
    }

    #[test]
    fn beta_and_dispersion_substitution() {
        let fit = scenario_fit("table1_gaussian", 30, 1);
        let ctx = FiducialContext::new(&fit, DrawMode::Joint).unwrap();
        let err = ctx.err_cells(ctx.dispersion.center());
        let info = beta_information(
            &ctx.spec,
            30,
            &ctx.sigma_alpha_hat,
            &ctx.sigma_gamma_hat,
            &err,
        )
        .unwrap();
        let b = beta_from_randoms(&ctx.beta_hat, &info, &Vect::zeros(4)).unwrap();
        assert!((b - &ctx.beta_hat).amax() < 1e-12);
        let p = ctx.dispersion;
        let back = p.value(p.observed_random()).value();
        assert!((back - p.center().value()).abs() < 1e-12);
    }

    #[test]
    fn joint_draw_substitution() {
        for (name, mode) in [
            ("table1_gaussian", DrawMode::Joint),
            ("table2_poisson", DrawMode::Joint),
            ("tableS3_three_level", DrawMode::Proxy),
        ] {
            let fit = scenario_fit(name, 30, 2);
            let ctx = FiducialContext::new(&fit, mode).unwrap();
            let d = ctx
                .draw_from_randoms(&ctx.observed_randoms().unwrap())
                .unwrap();
            let plug = ctx.plug_in();
            assert!((d.beta_tilde - plug.beta).amax() < 1e-10, "{name}");
            for (a, b) in d.sigma_alpha_tilde.iter().zip(&plug.sigma_alpha) {
                assert!((a - b).amax() < 1e-10, "{name}");
            }
            assert!((d.sigma_gamma_tilde - plug.sigma_gamma).amax() < 1e-10);
            assert!((d.dispersion_tilde.value() - plug.dispersion.value()).abs() < 1e-10);
        }
    }

    #[test]
    fn dispersion_median() {
        let p = DispersionPivot::Gaussian {
            df: 476.0,
            sigma2_hat: 0.11,
        };
        let mut rng = substream(9, &[0]);
        let mut v: Vec<f64> = (0..100_000)
            .map(|_| p.value(p.sample_random(&mut rng)).value())
            .collect();
        v.sort_by(f64::total_cmp);
        let med = v[v.len() / 2];
        assert!((med - 0.11 * 476.0 / 475.33).abs() < 3e-4, "median {med}");
        assert_eq!(DispersionPivot::Unit.value(0.3), Dispersion::Unit);
    }

    #[test]
    fn beta_draw_moments() {
        let beta_hat = Mat::from_row_slice(1, 2, &[0.5, -0.1]);
        let info = Mat::from_row_slice(2, 2, &[40.0, 6.0, 6.0, 9.0]);
        let cov = info.clone().try_inverse().unwrap();
        let mut rng = substream(10, &[0]);
        let m = 100_000;
        let draws: Vec<Mat> = (0..m)
            .map(|_| {
                let z = Vect::from_fn(2, |_, _| rng.sample(StandardNormal));
                beta_from_randoms(&beta_hat, &info, &z).unwrap()
            })
            .collect();
        for a in 0..2 {
            let mean = draws.iter().map(|d| d[a]).sum::<f64>() / m as f64;
            assert!((mean - beta_hat[a]).abs() < 5.0 * (cov[(a, a)] / m as f64).sqrt());
            for b in 0..2 {
                let c = draws
                    .iter()
                    .map(|d| (d[a] - beta_hat[a]) * (d[b] - beta_hat[b]))
                    .sum::<f64>()
                    / m as f64;
                let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / m as f64).sqrt();
                assert!((c - cov[(a, b)]).abs() < 5.0 * se, "cov {a}{b}");
            }
        }
    }

    #[test]
    fn noiseless_recovery() {
        let s = &lookup("table1_gaussian").unwrap()[0];
        let err = vec![0.11; s.spec.cell_len()];
        let t = &s.truth;
        let m = model_predictor_cov(&s.spec, &t.sigma_alpha, &t.sigma_gamma, &err).unwrap();
        let target = PredictorCovTarget {
            delta_tilde: m,
            blocks: None,
        };
        let layout = ThetaLayout::of(&s.spec);
        let start: Vec<f64> = layout
            .encode(&t.sigma_alpha, &t.sigma_gamma, 1e-8)
            .iter()
            .enumerate()
            .map(|(k, v)| v + 0.15 * if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let rec = recover_variance_components(&target, &s.spec, &err, &start);
        assert!(rec.diag.converged);
        for (a, b) in rec.sigma_alpha.iter().zip(&t.sigma_alpha) {
            assert!((a - b).amax() < 1e-5, "{a} vs {b}");
        }
        assert!(rec.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn recovery_gradient_matches_finite_differences() {
        let s = &lookup("table1_gaussian").unwrap()[0];
        let err = vec![0.11; s.spec.cell_len()];
        let t = &s.truth;
        let m = model_predictor_cov(&s.spec, &t.sigma_alpha, &t.sigma_gamma, &err).unwrap();
        let target = PredictorCovTarget {
            delta_tilde: m * 1.3,
            blocks: None,
        };
        let obj = RecoveryObjective::new(&s.spec, &target, &err);
        let mut rng = substream(11, &[0]);
        let base = obj.layout().encode(&t.sigma_alpha, &t.sigma_gamma, 1e-8);
        for _ in 0..10 {
            let v: Vec<f64> = base
                .iter()
                .map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (_, g) = obj.eval(&v);
            for k in 0..v.len() {
                let h = 1e-5;
                let (mut a, mut b) = (v.clone(), v.clone());
                a[k] += h;
                b[k] -= h;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
                let scale = g.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
                assert!(
                    (fd - g[k]).abs() / scale < 1e-5,
                    "coord {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn joint_draw_is_deterministic() {
        let fit = scenario_fit("table1_gaussian", 30, 3);
        let ctx = FiducialContext::new(&fit, DrawMode::Joint).unwrap();
        let a = sample_joint_draw(&ctx, &mut substream(12, &[0])).unwrap();
        let b = sample_joint_draw(&ctx, &mut substream(12, &[0])).unwrap();
        assert_eq!(a, b);
        assert!(a.solver.converged);
        for s in a.sigma_alpha_tilde.iter().chain([&a.sigma_gamma_tilde]) {
            assert!(linalg::is_psd(s, 1e-10));
        }
        assert!(a.dispersion_tilde.value() > 0.0);
    }
}
