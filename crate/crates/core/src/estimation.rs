//! REML fitting of the linear mixed model, the linearized GLMM fit,
//! conditional-mean predictors and dispersion estimates.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vect};
use crate::model::{
    self, reduced, Components, Dispersion, Family, ModelSpec, ParameterSet, RatingDataset,
    ThetaLayout,
};
use crate::optim::{self, BfgsOptions};

/// Convergence record of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Outer linearization iterations (1 for Gaussian).
    pub iterations: usize,
    /// Final change of the linear predictor (∞-norm), 0 for Gaussian.
    pub gap: f64,
    /// BFGS iterations of the last REML solve.
    pub reml_iterations: usize,
    pub reml_grad_inf: f64,
    pub converged: bool,
}

/// Fitted model with everything the fiducial step needs.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub n_subjects: usize,
    /// REML estimates; for Gaussian data the dispersion is the REML σ².
    pub estimates: ParameterSet,
    pub pseudo_obs: Vec<Vect>,
    pub fitted_means: Vec<Vect>,
    pub linear_predictors: Vec<Vect>,
    pub error_diag: Vect,
    pub trace: FitTrace,
    /// Log-Cholesky coordinates of the estimated covariance components.
    pub theta: Vec<f64>,
}

impl FitResult {
    pub fn error_cells(&self) -> Vec<f64> {
        model::collapse_error_diag(&self.spec, &self.error_diag)
    }
}

/// Conditional-mean predictors of the subject-level random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSet {
    /// `mu_alpha[i][s]` is the L-vector μ̂_{α_s i}.
    pub mu_alpha: Vec<Vec<Vect>>,
    /// `mu_gamma[i]` is the L-vector μ̂_{γ i}, when the interaction is modelled.
    pub mu_gamma: Option<Vec<Vect>>,
}

impl PredictorSet {
    pub fn n_subjects(&self) -> usize {
        self.mu_alpha.len()
    }

    /// N×q matrix of stacked predictors (α_0, ..., α_S, γ).
    pub fn stacked(&self) -> Mat {
        let n = self.mu_alpha.len();
        let l = self.mu_alpha.first().map_or(0, |v| v[0].len());
        let blocks =
            self.mu_alpha.first().map_or(0, |v| v.len()) + usize::from(self.mu_gamma.is_some());
        let mut m = Mat::zeros(n, blocks * l);
        for i in 0..n {
            for (s, v) in self.mu_alpha[i].iter().enumerate() {
                for a in 0..l {
                    m[(i, s * l + a)] = v[a];
                }
            }
            if let Some(g) = &self.mu_gamma {
                let off = (blocks - 1) * l;
                for a in 0..l {
                    m[(i, off + a)] = g[i][a];
                }
            }
        }
        m
    }
}

/// Replicate means, their centred scatter, and the within-cell sum of squares.
#[derive(Debug, Clone)]
pub(crate) struct SuffStats {
    pub n: usize,
    pub mean: Vect,
    pub scatter: Mat,
    pub within_ss: f64,
    pub within_df: f64,
}

pub(crate) fn suff_stats(spec: &ModelSpec, ys: &[Vect]) -> SuffStats {
    let n = ys.len();
    let tl = spec.cell_len();
    let k = spec.replicates;
    let cells: Vec<Vect> = ys
        .iter()
        .map(|y| model::cell_means(spec, y.as_slice()))
        .collect();
    let mut mean = Vect::zeros(tl);
    for c in &cells {
        mean += c;
    }
    mean /= n as f64;
    let mut centred = Mat::zeros(tl, n);
    for (i, c) in cells.iter().enumerate() {
        centred.set_column(i, &(c - &mean));
    }
    let scatter = &centred * centred.transpose();
    let mut within_ss = 0.0;
    for (y, c) in ys.iter().zip(&cells) {
        for r in 0..y.len() {
            within_ss += (y[r] - c[r / k]).powi(2);
        }
    }
    SuffStats {
        n,
        mean,
        scatter,
        within_ss,
        within_df: (n * tl * (k - 1)) as f64,
    }
}

/// Restricted likelihood of the reduced model.
pub(crate) struct Reml<'a> {
    spec: &'a ModelSpec,
    stats: &'a SuffStats,
    layout: ThetaLayout,
    x: Mat,
    fixed_err: Option<&'a [f64]>,
}

pub(crate) struct RemlFit {
    pub theta: Vec<f64>,
    pub comps: Components,
    pub sigma2: Option<f64>,
    pub beta: Mat,
    pub iterations: usize,
    pub grad_inf: f64,
    pub converged: bool,
}

impl<'a> Reml<'a> {
    pub fn new(spec: &'a ModelSpec, stats: &'a SuffStats, fixed_err: Option<&'a [f64]>) -> Self {
        Self {
            spec,
            stats,
            layout: ThetaLayout::of(spec),
            x: reduced::design(spec),
            fixed_err,
        }
    }

    fn n_params(&self) -> usize {
        self.layout.len() + usize::from(self.fixed_err.is_none())
    }

    fn errors(&self, v: &[f64]) -> Vec<f64> {
        match self.fixed_err {
            Some(e) => e.to_vec(),
            None => vec![v[self.layout.len()].exp(); self.spec.cell_len()],
        }
    }

    /// Negative restricted log-likelihood (constants dropped) and gradient.
    pub fn eval(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let bad = (f64::INFINITY, vec![f64::NAN; self.n_params()]);
        if v.iter().any(|x| !x.is_finite() || x.abs() > 50.0) {
            return bad;
        }
        let comps = self.layout.decode(v);
        let err = self.errors(v);
        let vm = reduced::covariance(self.spec, &comps.alpha, &comps.gamma, &err);
        let Some(ch) = vm.clone().cholesky() else {
            return bad;
        };
        let vi = ch.inverse();
        let a = &vi * &self.x;
        let h = self.x.transpose() * &a;
        let Some(chh) = h.clone().cholesky() else {
            return bad;
        };
        let beta = chh.solve(&(a.transpose() * &self.stats.mean));
        let e = &self.stats.mean - &self.x * beta;
        let n = self.stats.n as f64;
        let stot = &self.stats.scatter + &e * e.transpose() * n;
        let vis = &vi * &stot;
        let mut f =
            0.5 * (n * linalg::log_det_chol(&ch) + linalg::log_det_chol(&chh) + vis.trace());
        let hinv = chh.inverse();
        let bm = &vi * n - &a * hinv * a.transpose() - &vis * &vi;
        let q = &bm * 0.5;
        let (ga, gg) = reduced::component_gradients(self.spec, &q, None);
        let mut grad = self.layout.chain(&comps, &ga, &gg);
        if self.fixed_err.is_none() {
            let s2 = err[0];
            let (w, wdf) = (self.stats.within_ss, self.stats.within_df);
            f += 0.5 * (wdf * s2.ln() + w / s2);
            grad.push(0.5 * s2 / self.spec.replicates as f64 * bm.trace() + 0.5 * (wdf - w / s2));
        }
        if !f.is_finite() {
            return bad;
        }
        (f, grad)
    }

    /// GLS fixed effects at the given coordinates, as an L×d matrix.
    pub fn beta(&self, v: &[f64]) -> Result<Mat> {
        let comps = self.layout.decode(v);
        let vm = reduced::covariance(self.spec, &comps.alpha, &comps.gamma, &self.errors(v));
        gls_beta(self.spec, &vm, &self.x, &self.stats.mean)
    }

    pub fn start(&self) -> Vec<f64> {
        let spec = self.spec;
        let (t, l) = (spec.times, spec.raters);
        let xtx = self.x.transpose() * &self.x;
        let b = xtx
            .cholesky()
            .map(|c| c.solve(&(self.x.transpose() * &self.stats.mean)))
            .unwrap_or_else(|| Vect::zeros(self.x.ncols()));
        let e = &self.stats.mean - &self.x * b;
        let n = self.stats.n as f64;
        let c = (&self.stats.scatter + &e * e.transpose() * n) / n;
        let scale = (c.trace() / c.nrows() as f64).max(1e-8);
        let mut s0 = Mat::zeros(l, l);
        for a in 0..l {
            for bb in 0..l {
                s0[(a, bb)] = c.view((a * t, bb * t), (t, t)).mean();
            }
        }
        let z = spec.basis_values();
        let mut alpha = vec![s0 * 0.8];
        for zs in z.iter().skip(1) {
            let mz = zs.iter().map(|v| v * v).sum::<f64>() / t as f64;
            alpha.push(Mat::identity(l, l) * (0.05 * scale / mz.max(1e-12)));
        }
        let gamma = Mat::identity(l, l) * (0.05 * scale);
        let mut v = self.layout.encode(&alpha, &gamma, 1e-3 * scale);
        if self.fixed_err.is_none() {
            let s2 = if self.stats.within_df > 0.0 {
                self.stats.within_ss / self.stats.within_df
            } else {
                0.2 * scale
            };
            v.push(s2.max(1e-6 * scale).ln());
        }
        v
    }

    pub fn fit(&self, start: Option<&[f64]>) -> Result<RemlFit> {
        let x0 = match start {
            Some(s) if s.len() == self.n_params() && self.eval(s).0.is_finite() => s.to_vec(),
            _ => self.start(),
        };
        let r = optim::bfgs(|v| self.eval(v), &x0, BfgsOptions::default());
        let theta = r.x[..self.layout.len()].to_vec();
        let comps = self.layout.decode(&r.x);
        let sigma2 = self
            .fixed_err
            .is_none()
            .then(|| r.x[self.layout.len()].exp());
        let beta = self.beta(&r.x)?;
        Ok(RemlFit {
            theta,
            comps,
            sigma2,
            beta,
            iterations: r.iterations,
            grad_inf: r.grad_inf,
            converged: r.converged,
        })
    }
}

/// GLS estimate on the reduced system, returned as an L×d matrix.
pub(crate) fn gls_beta(spec: &ModelSpec, v: &Mat, x: &Mat, mean: &Vect) -> Result<Mat> {
    let ch = linalg::cholesky(v, "marginal covariance")?;
    let a = ch.solve(x);
    let h = x.transpose() * &a;
    let chh = h
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("fixed-effect information is singular".into()))?;
    let b = chh.solve(&(a.transpose() * mean));
    let d = spec.n_fixed();
    Ok(Mat::from_fn(spec.raters, d, |l, c| b[l * d + c]))
}

fn beta_vec(beta: &Mat) -> Vect {
    Vect::from_iterator(
        beta.len(),
        (0..beta.nrows()).flat_map(|l| (0..beta.ncols()).map(move |c| beta[(l, c)])),
    )
}

/// Conditional modes given components, error cells and pseudo-observations:
/// predictors plus the conditional linear predictor of every observation.
fn conditional_modes(
    spec: &ModelSpec,
    alpha: &[Mat],
    gamma: &Mat,
    beta: &Mat,
    err_cells: &[f64],
    ystar: &[Vect],
) -> Result<(PredictorSet, Vec<Vect>)> {
    let (t, k, l) = (spec.times, spec.replicates, spec.raters);
    let vm = reduced::covariance(spec, alpha, gamma, err_cells);
    let ch = linalg::cholesky(&vm, "marginal covariance")?;
    let c = reduced::cross(spec, alpha, gamma);
    let xb = reduced::design(spec) * beta_vec(beta);
    let z = spec.basis_values();
    let na = spec.n_alpha();
    let mut mu_alpha = Vec::with_capacity(ystar.len());
    let mut mu_gamma = spec.effects.interaction.then(Vec::new);
    let mut etas = Vec::with_capacity(ystar.len());
    for y in ystar {
        let w = ch.solve(&(model::cell_means(spec, y.as_slice()) - &xb));
        let u = &c * &w;
        let alphas: Vec<Vect> = (0..na)
            .map(|s| Vect::from_fn(l, |a, _| u[s * l + a]))
            .collect();
        let mut eta = Vect::zeros(spec.obs_len());
        for a in 0..l {
            for j in 0..t {
                let mut e = xb[a * t + j];
                for s in 0..na {
                    e += z[s][j] * alphas[s][a];
                }
                if spec.effects.interaction {
                    e += (0..l).map(|b| gamma[(a, b)] * w[b * t + j]).sum::<f64>();
                }
                for r in 0..k {
                    eta[(a * t + j) * k + r] = e;
                }
            }
        }
        if let Some(g) = mu_gamma.as_mut() {
            g.push(Vect::from_fn(l, |a, _| u[na * l + a]));
        }
        mu_alpha.push(alphas);
        etas.push(eta);
    }
    Ok((PredictorSet { mu_alpha, mu_gamma }, etas))
}

/// Pseudo-observations `η̂ + g'(μ̂)(y − μ̂)` for every subject.
pub fn pseudo_observations(
    data: &RatingDataset,
    spec: &ModelSpec,
    fitted_means: &[Vect],
    linear_predictors: &[Vect],
) -> Result<Vec<Vect>> {
    let n = data.n_subjects();
    if fitted_means.len() != n || linear_predictors.len() != n {
        return Err(Error::InvalidDimensions(
            "fitted values do not match the number of subjects".into(),
        ));
    }
    let fam = spec.family;
    (0..n)
        .map(|i| {
            let y = data.subject_slice(i);
            let (mu, eta) = (&fitted_means[i], &linear_predictors[i]);
            if mu.len() != y.len() || eta.len() != y.len() {
                return Err(Error::InvalidDimensions(
                    "fitted vector length mismatch".into(),
                ));
            }
            let mut out = Vect::zeros(y.len());
            for r in 0..y.len() {
                if fam == Family::Gaussian {
                    out[r] = y[r];
                    continue;
                }
                if !fam.mean_in_domain(mu[r]) {
                    return Err(Error::DomainError(format!(
                        "fitted mean {} outside the {} domain",
                        mu[r],
                        fam.name()
                    )));
                }
                out[r] = eta[r] + fam.link_deriv(mu[r]) * (y[r] - mu[r]);
                if !out[r].is_finite() {
                    return Err(Error::DomainError("non-finite pseudo-observation".into()));
                }
            }
            Ok(out)
        })
        .collect()
}

fn check_variation(data: &RatingDataset) -> Result<()> {
    let v = data.values();
    let first = v[0];
    if v.iter().all(|x| *x == first) {
        return Err(Error::FitFailure(
            "degenerate data: all ratings are identical".into(),
        ));
    }
    Ok(())
}

/// REML fit of the Gaussian linear mixed model.
pub fn fit_gaussian_lmm(data: &RatingDataset, spec: &ModelSpec) -> Result<FitResult> {
    fit_gaussian_lmm_from(data, spec, None)
}

/// As [`fit_gaussian_lmm`], warm-started from REML coordinates
/// (components followed by log σ²).
pub fn fit_gaussian_lmm_from(
    data: &RatingDataset,
    spec: &ModelSpec,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    if spec.family != Family::Gaussian {
        return Err(Error::InvalidParameters(
            "fit_gaussian_lmm requires the Gaussian family".into(),
        ));
    }
    spec.check_data(data)?;
    check_variation(data)?;
    let ys: Vec<Vect> = (0..data.n_subjects())
        .map(|i| data.subject_vector(i))
        .collect();
    let stats = suff_stats(spec, &ys);
    let reml = Reml::new(spec, &stats, None);
    let r = reml.fit(start)?;
    if !r.converged {
        return Err(Error::NonConvergence {
            iterations: r.iterations,
            gap: r.grad_inf,
        });
    }
    let s2 = r.sigma2.unwrap();
    let err = vec![s2; spec.cell_len()];
    let (_, etas) = conditional_modes(spec, &r.comps.alpha, &r.comps.gamma, &r.beta, &err, &ys)?;
    Ok(FitResult {
        spec: spec.clone(),
        n_subjects: data.n_subjects(),
        estimates: ParameterSet {
            beta: r.beta,
            sigma_alpha: r.comps.alpha,
            sigma_gamma: r.comps.gamma,
            dispersion: Dispersion::Sigma2(s2),
        },
        fitted_means: etas.clone(),
        linear_predictors: etas,
        pseudo_obs: ys,
        error_diag: model::constant_error_diag(spec, s2),
        trace: FitTrace {
            iterations: 1,
            gap: 0.0,
            reml_iterations: r.iterations,
            reml_grad_inf: r.grad_inf,
            converged: true,
        },
        theta: r.theta,
    })
}

/// REML coordinates of a Gaussian fit (components then log σ²), for warm starts.
pub fn reml_coordinates(fit: &FitResult) -> Vec<f64> {
    let mut v = fit.theta.clone();
    if let Dispersion::Sigma2(s) = fit.estimates.dispersion {
        v.push(s.ln());
    }
    v
}

const MAX_OUTER: usize = 500;
const MAX_HALVINGS: usize = 30;
const ETA_TOL: f64 = 1e-6;

/// Linearized (PQL-type) fit of a Poisson or Gamma GLMM.
pub fn fit_glmm_linearized(data: &RatingDataset, spec: &ModelSpec) -> Result<FitResult> {
    fit_glmm_linearized_from(data, spec, None)
}

/// REML fit, pseudo-observations, error cells and means of the last outer step.
type OuterState = (RemlFit, Vec<Vect>, Vec<f64>, Vec<Vect>);

/// As [`fit_glmm_linearized`], warm-started from component coordinates.
pub fn fit_glmm_linearized_from(
    data: &RatingDataset,
    spec: &ModelSpec,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    let fam = spec.family;
    if fam == Family::Gaussian {
        return Err(Error::InvalidParameters(
            "use fit_gaussian_lmm for Gaussian data".into(),
        ));
    }
    spec.check_data(data)?;
    check_variation(data)?;
    let n = data.n_subjects();
    let (t, k, l) = (spec.times, spec.replicates, spec.raters);
    let ys: Vec<Vect> = (0..n).map(|i| data.subject_vector(i)).collect();
    let mut eta: Vec<Vect> = ys
        .iter()
        .map(|y| {
            let cm = model::cell_means(spec, y.as_slice());
            Vect::from_fn(y.len(), |r, _| {
                let m = cm[r / k];
                fam.link(if fam == Family::Poisson { m + 0.5 } else { m })
            })
        })
        .collect();
    let df = spec.residual_df(n);
    let pearson_df = if df > 0 {
        df as f64
    } else {
        (n * spec.obs_len() - spec.n_fixed() * l) as f64
    };
    let mut tau = match fam {
        Family::Gamma => gamma_tau(spec, &ys, &means_of(fam, &eta), pearson_df),
        _ => 1.0,
    };
    let mut theta: Option<Vec<f64>> = start.map(|s| s.to_vec());
    let mut gap = f64::INFINITY;
    let mut relax: f64 = 1.0;
    let mut iterations = 0;
    let mut last: Option<OuterState> = None;
    while iterations < MAX_OUTER {
        iterations += 1;
        let mu = means_of(fam, &eta);
        let ystar = pseudo_observations(data, spec, &mu, &eta)?;
        let phi = if fam == Family::Gamma { 1.0 / tau } else { 1.0 };
        let mut err = vec![0.0; t * l];
        for m in &mu {
            for c in 0..t * l {
                let v = m[c * k];
                err[c] += phi * fam.link_deriv(v).powi(2) * fam.variance_fn(v);
            }
        }
        err.iter_mut().for_each(|e| *e /= n as f64);
        let stats = suff_stats(spec, &ystar);
        let r = Reml::new(spec, &stats, Some(&err)).fit(theta.as_deref())?;
        let (_, target) =
            conditional_modes(spec, &r.comps.alpha, &r.comps.gamma, &r.beta, &err, &ystar)?;
        let full = eta
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if full > 0.9 * gap && iterations > 5 {
            relax = (relax * 0.5).max(1.0 / 64.0);
        }
        gap = full;
        let mut step = relax;
        let mut new_eta = Vec::new();
        for h in 0..=MAX_HALVINGS {
            new_eta = eta
                .iter()
                .zip(&target)
                .map(|(e0, e1)| e0 + (e1 - e0) * step)
                .collect();
            if new_eta
                .iter()
                .all(|e| e.iter().all(|v| fam.mean_in_domain(fam.mean(*v))))
            {
                break;
            }
            if h == MAX_HALVINGS {
                return Err(Error::DomainError(
                    "mean outside the family domain after 30 step-halvings".into(),
                ));
            }
            step *= 0.5;
        }
        theta = Some(r.theta.clone());
        last = Some((r, ystar, err, mu));
        eta = new_eta;
        if fam == Family::Gamma {
            tau = gamma_tau(spec, &ys, &means_of(fam, &eta), pearson_df);
        }
        if gap < ETA_TOL {
            break;
        }
    }
    let (r, ystar, err, _) = last.expect("at least one iteration");
    if gap >= ETA_TOL || !r.converged {
        return Err(Error::NonConvergence {
            iterations,
            gap: if r.converged { gap } else { r.grad_inf },
        });
    }
    let dispersion = match fam {
        Family::Gamma => Dispersion::Tau(tau),
        _ => Dispersion::Unit,
    };
    let fitted = means_of(fam, &eta);
    Ok(FitResult {
        spec: spec.clone(),
        n_subjects: n,
        estimates: ParameterSet {
            beta: r.beta,
            sigma_alpha: r.comps.alpha,
            sigma_gamma: r.comps.gamma,
            dispersion,
        },
        pseudo_obs: ystar,
        fitted_means: fitted,
        linear_predictors: eta,
        error_diag: model::expand_error_diag(spec, &err),
        trace: FitTrace {
            iterations,
            gap,
            reml_iterations: r.iterations,
            reml_grad_inf: r.grad_inf,
            converged: true,
        },
        theta: r.theta,
    })
}

fn means_of(fam: Family, eta: &[Vect]) -> Vec<Vect> {
    eta.iter().map(|e| e.map(|v| fam.mean(v))).collect()
}

fn pearson_tau(ys: &[Vect], mu: &[Vect], df: f64) -> f64 {
    let mut x2 = 0.0;
    for (y, m) in ys.iter().zip(mu) {
        for r in 0..y.len() {
            x2 += ((y[r] - m[r]) / m[r]).powi(2);
        }
    }
    if x2 > 0.0 {
        df / x2
    } else {
        1e6
    }
}

/// Fit by the family-appropriate method.
pub fn fit(data: &RatingDataset, spec: &ModelSpec) -> Result<FitResult> {
    match spec.family {
        Family::Gaussian => fit_gaussian_lmm(data, spec),
        _ => fit_glmm_linearized(data, spec),
    }
}

/// Warm-started fit; `start` holds the coordinates returned by [`warm_start`].
pub fn fit_from(
    data: &RatingDataset,
    spec: &ModelSpec,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    match spec.family {
        Family::Gaussian => fit_gaussian_lmm_from(data, spec, start),
        _ => fit_glmm_linearized_from(data, spec, start),
    }
}

/// Coordinates suitable for [`fit_from`].
pub fn warm_start(fit: &FitResult) -> Vec<f64> {
    match fit.spec.family {
        Family::Gaussian => reml_coordinates(fit),
        _ => fit.theta.clone(),
    }
}

/// Conditional-mean predictors `σ̂ Σ̂^{-1}(Y* − Xβ̂)` at the fit.
pub fn predict_conditional_means(fit: &FitResult) -> Result<PredictorSet> {
    let e = &fit.estimates;
    let (p, _) = conditional_modes(
        &fit.spec,
        &e.sigma_alpha,
        &e.sigma_gamma,
        &e.beta,
        &fit.error_cells(),
        &fit.pseudo_obs,
    )?;
    Ok(p)
}

/// Residual maker of one subject-rater block: projection off the span of the
/// fixed, random and (with the interaction) cell columns, with its rank.
fn block_residual_maker(spec: &ModelSpec) -> (Mat, usize) {
    let (t, k) = (spec.times, spec.replicates);
    let xt = spec.time_design();
    let z = spec.basis_values();
    let mut cols: Vec<Vect> = Vec::new();
    for c in 0..xt.ncols() {
        cols.push(Vect::from_fn(t * k, |r, _| xt[(r / k, c)]));
    }
    for zs in &z {
        cols.push(Vect::from_fn(t * k, |r, _| zs[r / k]));
    }
    if spec.effects.interaction {
        for j in 0..t {
            cols.push(Vect::from_fn(t * k, |r, _| f64::from(u8::from(r / k == j))));
        }
    }
    let x = Mat::from_columns(&cols);
    let svd = x.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * top.max(1.0))
        .collect();
    let mut m = Mat::identity(t * k, t * k);
    for &i in &keep {
        let c = u.column(i);
        m -= c * c.transpose();
    }
    (m, keep.len())
}

/// Degrees of freedom of the projection residuals, `NL(TK − rank)`.
pub fn projection_df(spec: &ModelSpec, n_subjects: usize) -> usize {
    let (_, rank) = block_residual_maker(spec);
    n_subjects * spec.raters * (spec.obs_len() / spec.raters - rank)
}

/// Gaussian projection residual sum of squares over all subject-rater blocks.
fn projection_rss(spec: &ModelSpec, ys: &[Vect]) -> f64 {
    let (m, _) = block_residual_maker(spec);
    let tk = spec.times * spec.replicates;
    let mut ss = 0.0;
    for y in ys {
        for a in 0..spec.raters {
            let blk = y.rows(a * tk, tk);
            ss += (&m * blk).norm_squared();
        }
    }
    ss
}

/// Within-cell Pearson statistic `Σ (y − ȳ)²/ȳ²` over replicate cells.
fn within_cell_pearson(spec: &ModelSpec, ys: &[Vect]) -> f64 {
    let k = spec.replicates;
    let mut x2 = 0.0;
    for y in ys {
        let cm = model::cell_means(spec, y.as_slice());
        for r in 0..y.len() {
            x2 += ((y[r] - cm[r / k]) / cm[r / k]).powi(2);
        }
    }
    x2
}

/// Gamma τ̂: within-cell Pearson when replicates exist, otherwise Pearson
/// against the fitted means on `df`.
///
/// The within-cell moment `E[X²]/df ≈ φ(1 − φ/K)` with `φ = 1/τ` is solved
/// for φ; it reduces to `df/X²` as `K → ∞`.
fn gamma_tau(spec: &ModelSpec, ys: &[Vect], mu: &[Vect], df: f64) -> f64 {
    if spec.replicates > 1 {
        let x2 = within_cell_pearson(spec, ys);
        let kf = spec.replicates as f64;
        let wdf = ys.len() as f64 * spec.cell_len() as f64 * (kf - 1.0);
        let c = x2 / wdf;
        if c <= 0.0 {
            return 1e6;
        }
        let disc = 1.0 - 4.0 * c / kf;
        let phi = if disc > 0.0 {
            2.0 * c / (1.0 + disc.sqrt())
        } else {
            kf / 2.0
        };
        return 1.0 / phi;
    }
    pearson_tau(ys, mu, df)
}

/// Dispersion estimate: σ̂² from projection residuals (Gaussian), τ̂ (Gamma),
/// 1 (Poisson).
pub fn estimate_dispersion(fit: &FitResult) -> Result<f64> {
    let spec = &fit.spec;
    if spec.family == Family::Poisson {
        return Ok(1.0);
    }
    let m = spec.residual_df(fit.n_subjects);
    if m <= 0 {
        return Err(Error::InsufficientDf(m));
    }
    match spec.family {
        Family::Gaussian => {
            let df = projection_df(spec, fit.n_subjects);
            Ok(projection_rss(spec, &fit.pseudo_obs) / df as f64)
        }
        _ => {
            let raw: Vec<Vect> = fit
                .pseudo_obs
                .iter()
                .enumerate()
                .map(|(i, y)| {
                    observed_from_pseudo(
                        spec.family,
                        y,
                        &fit.fitted_means[i],
                        &fit.linear_predictors[i],
                    )
                })
                .collect();
            Ok(gamma_tau(spec, &raw, &fit.fitted_means, m as f64))
        }
    }
}

/// Residual sum of squares divided by `df`, for a dataset and conditional
/// fitted values.
pub fn residual_variance(data: &RatingDataset, fitted: &[Vect], df: f64) -> f64 {
    let mut ss = 0.0;
    for (i, f) in fitted.iter().enumerate() {
        let y = data.subject_slice(i);
        ss += y
            .iter()
            .zip(f.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    ss / df
}

fn observed_from_pseudo(fam: Family, ystar: &Vect, mu: &Vect, eta: &Vect) -> Vect {
    Vect::from_fn(ystar.len(), |r, _| {
        mu[r] + (ystar[r] - eta[r]) / fam.link_deriv(mu[r])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, TimeGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let h = 1e-6;
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn simulate(spec: &ModelSpec, n: usize, seed: u64) -> RatingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let (t, k, l) = (spec.times, spec.replicates, spec.raters);
        let mut v = Vec::new();
        for _ in 0..n {
            let a0: Vec<f64> = (0..l).map(|_| 0.7 * nd.sample(&mut rng)).collect();
            let a1: Vec<f64> = (0..l).map(|_| 0.2 * nd.sample(&mut rng)).collect();
            for a in 0..l {
                for j in 0..t {
                    for _ in 0..k {
                        v.push(
                            1.0 + 0.1 * j as f64
                                + a0[a]
                                + a1[a] * j as f64
                                + 0.4 * nd.sample(&mut rng),
                        );
                    }
                }
            }
        }
        RatingDataset::from_dense(
            Dims {
                subjects: n,
                times: t,
                replicates: k,
                raters: l,
            },
            v,
        )
        .unwrap()
    }

    #[test]
    fn reml_gradient_matches_finite_differences() {
        let spec =
            ModelSpec::new(Family::Gaussian, 4, 2, 2, 1).with_time_grid(TimeGrid::ZERO_BASED);
        let data = simulate(&spec, 12, 3);
        let ys: Vec<Vect> = (0..12).map(|i| data.subject_vector(i)).collect();
        let stats = suff_stats(&spec, &ys);
        let reml = Reml::new(&spec, &stats, None);
        let x: Vec<f64> = reml
            .start()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.05 * (i as f64).sin())
            .collect();
        let (_, g) = reml.eval(&x);
        let fd = fd_grad(&|v| reml.eval(v).0, &x);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn one_way_anova_oracle() {
        let spec = ModelSpec::new(Family::Gaussian, 5, 1, 1, 0).with_interaction(false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let mut ys = Vec::new();
        for _ in 0..n {
            let a = 0.8 * nd.sample(&mut rng);
            ys.push(Vect::from_fn(5, |j, _| {
                2.0 + 0.3 * j as f64 + a + 0.5 * nd.sample(&mut rng)
            }));
        }
        let stats = suff_stats(&spec, &ys);
        let r = Reml::new(&spec, &stats, None).fit(None).unwrap();
        assert!(r.converged);
        // Balanced one-way ANOVA after removing the common time trend.
        let t = 5.0;
        let tbar = 2.0;
        let ybar_j: Vec<f64> = (0..5)
            .map(|j| ys.iter().map(|y| y[j]).sum::<f64>() / n as f64)
            .collect();
        let grand = ybar_j.iter().sum::<f64>() / t;
        let slope = (0..5)
            .map(|j| (j as f64 - tbar) * (ybar_j[j] - grand))
            .sum::<f64>()
            / 10.0;
        let fitted = |j: usize| grand + slope * (j as f64 - tbar);
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for y in &ys {
            let m = y.mean();
            ssb += t * (m - grand).powi(2);
            for j in 0..5 {
                ssw += (y[j] - m - (fitted(j) - grand)).powi(2);
            }
        }
        let msb = ssb / (n as f64 - 1.0);
        let msw = ssw / ((n as f64) * (t - 1.0) - 1.0);
        let s2 = msw;
        let sa = (msb - msw) / t;
        assert!(
            (r.sigma2.unwrap() - s2).abs() < 1e-8,
            "{} vs {}",
            r.sigma2.unwrap(),
            s2
        );
        assert!((r.comps.alpha[0][(0, 0)] - sa).abs() < 1e-8);
    }

    #[test]
    fn gaussian_pseudo_obs_are_data_and_blup_oracle() {
        let spec = ModelSpec::new(Family::Gaussian, 6, 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let e = ParameterSet {
            beta: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            sigma_alpha: vec![Mat::from_element(1, 1, 0.6)],
            sigma_gamma: Mat::zeros(1, 1),
            dispersion: Dispersion::Sigma2(0.3),
        };
        let ys: Vec<Vect> = (0..4)
            .map(|_| Vect::from_fn(6, |_, _| 1.0 + nd.sample(&mut rng)))
            .collect();
        let (p, _) = conditional_modes(
            &spec,
            &e.sigma_alpha,
            &e.sigma_gamma,
            &e.beta,
            &[0.3; 6],
            &ys,
        )
        .unwrap();
        for (i, y) in ys.iter().enumerate() {
            let t = 6.0;
            let want = t * 0.6 / (t * 0.6 + 0.3) * (y.mean() - 1.0);
            assert!((p.mu_alpha[i][0][0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_pseudo_observations() {
        let spec = ModelSpec::new(Family::Poisson, 2, 1, 2, 0);
        let d = RatingDataset::from_dense(
            Dims {
                subjects: 2,
                times: 2,
                replicates: 1,
                raters: 2,
            },
            vec![4.0; 8],
        )
        .unwrap();
        let mu = vec![Vect::from_element(4, 2.0); 2];
        let eta = vec![Vect::from_element(4, 2f64.ln()); 2];
        let y = pseudo_observations(&d, &spec, &mu, &eta).unwrap();
        assert!((y[0][0] - (2f64.ln() + 1.0)).abs() < 1e-15);
        let bad = vec![Vect::from_element(4, 0.0); 2];
        assert!(matches!(
            pseudo_observations(&d, &spec, &bad, &eta),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let spec = ModelSpec::new(Family::Gaussian, 3, 1, 2, 1);
        let d = RatingDataset::from_dense(
            Dims {
                subjects: 5,
                times: 3,
                replicates: 1,
                raters: 2,
            },
            vec![1.0; 30],
        )
        .unwrap();
        assert!(matches!(
            fit_gaussian_lmm(&d, &spec),
            Err(Error::FitFailure(_))
        ));
    }
}
