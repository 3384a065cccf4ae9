//! Data model, design construction and the covariance algebra of the
//! linearized mixed model.
//!
//! Indices are zero-based throughout the API. A subject vector of length KTL
//! is ordered rater-major, then time, then replicate: position
//! `l*K*T + j*K + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Gamma,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Gamma => "gamma",
        }
    }

    /// Inverse link `h(η)`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Gamma => 1.0 / eta,
        }
    }

    /// Link `g(μ)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Gamma => 1.0 / mu,
        }
    }

    /// Derivative `g'(μ)`.
    pub fn link_deriv(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => 1.0 / mu,
            Family::Gamma => -1.0 / (mu * mu),
        }
    }

    /// Variance function `ζ(μ)` (dispersion factored out).
    pub fn variance_fn(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Gamma => mu * mu,
        }
    }

    pub fn mean_in_domain(self, mu: f64) -> bool {
        match self {
            Family::Gaussian => mu.is_finite(),
            Family::Poisson | Family::Gamma => mu.is_finite() && mu > 0.0,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "gamma" => Ok(Family::Gamma),
            other => Err(Error::InvalidParameters(format!(
                "unknown family `{other}`"
            ))),
        }
    }
}

/// Balanced design dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub subjects: usize,
    pub times: usize,
    pub replicates: usize,
    pub raters: usize,
}

impl Dims {
    pub fn per_subject(&self) -> usize {
        self.times * self.replicates * self.raters
    }
}

/// One long-format record with 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: usize,
    pub time: usize,
    pub replicate: usize,
    pub rater: usize,
    pub value: f64,
}

/// Balanced ratings `y_ijkl`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    dims: Dims,
    values: Vec<f64>,
}

impl RatingDataset {
    /// Dense constructor; `values` holds subjects in order, each in the
    /// rater/time/replicate layout described in the module docs.
    pub fn from_dense(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if dims.subjects < 2 || dims.times < 1 || dims.replicates < 1 || dims.raters < 2 {
            return Err(Error::InvalidDimensions(format!(
                "need N >= 2, T >= 1, K >= 1, L >= 2; got N={}, T={}, K={}, L={}",
                dims.subjects, dims.times, dims.replicates, dims.raters
            )));
        }
        if values.len() != dims.subjects * dims.per_subject() {
            return Err(Error::InvalidDimensions(format!(
                "expected {} values, got {}",
                dims.subjects * dims.per_subject(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::DomainError(format!("non-finite rating {v}")));
        }
        Ok(Self { dims, values })
    }

    /// Build from long-format records; dimensions are the maxima of each index.
    pub fn from_observations(obs: &[Observation]) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::InvalidDimensions("no observations".into()));
        }
        if let Some(o) = obs
            .iter()
            .find(|o| o.subject == 0 || o.time == 0 || o.replicate == 0 || o.rater == 0)
        {
            return Err(Error::InvalidDimensions(format!(
                "indices are 1-based; found subject={}, time={}, replicate={}, rater={}",
                o.subject, o.time, o.replicate, o.rater
            )));
        }
        let dims = Dims {
            subjects: obs.iter().map(|o| o.subject).max().unwrap(),
            times: obs.iter().map(|o| o.time).max().unwrap(),
            replicates: obs.iter().map(|o| o.replicate).max().unwrap(),
            raters: obs.iter().map(|o| o.rater).max().unwrap(),
        };
        let n = dims.subjects * dims.per_subject();
        let mut values = vec![0.0; n];
        let mut seen = vec![false; n];
        for o in obs {
            let idx = Self::offset(
                &dims,
                o.subject - 1,
                o.time - 1,
                o.replicate - 1,
                o.rater - 1,
            );
            if seen[idx] {
                return Err(Error::UnbalancedDesign(format!(
                    "duplicate cell (subject={}, time={}, replicate={}, rater={})",
                    o.subject, o.time, o.replicate, o.rater
                )));
            }
            seen[idx] = true;
            values[idx] = o.value;
        }
        let missing: Vec<String> = (0..n)
            .filter(|&i| !seen[i])
            .take(10)
            .map(|i| {
                let (s, t, r, l) = Self::unoffset(&dims, i);
                format!(
                    "(subject={}, time={}, replicate={}, rater={})",
                    s + 1,
                    t + 1,
                    r + 1,
                    l + 1
                )
            })
            .collect();
        if !missing.is_empty() {
            let total = seen.iter().filter(|s| !**s).count();
            return Err(Error::UnbalancedDesign(format!(
                "{total} missing cell(s): {}{}",
                missing.join(", "),
                if total > missing.len() { ", ..." } else { "" }
            )));
        }
        Self::from_dense(dims, values)
    }

    fn offset(d: &Dims, i: usize, j: usize, k: usize, l: usize) -> usize {
        i * d.per_subject() + (l * d.times + j) * d.replicates + k
    }

    fn unoffset(d: &Dims, idx: usize) -> (usize, usize, usize, usize) {
        let i = idx / d.per_subject();
        let r = idx % d.per_subject();
        let k = r % d.replicates;
        let lj = r / d.replicates;
        (i, lj % d.times, k, lj / d.times)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_subjects(&self) -> usize {
        self.dims.subjects
    }

    pub fn value(&self, subject: usize, time: usize, replicate: usize, rater: usize) -> f64 {
        self.values[Self::offset(&self.dims, subject, time, replicate, rater)]
    }

    /// Subject `i`'s KTL vector.
    pub fn subject_slice(&self, i: usize) -> &[f64] {
        let m = self.dims.per_subject();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn subject_vector(&self, i: usize) -> Vect {
        Vect::from_column_slice(self.subject_slice(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Long-format records ordered by subject, time, replicate, rater.
    pub fn observations(&self) -> Vec<Observation> {
        let d = self.dims;
        let mut out = Vec::with_capacity(self.values.len());
        for i in 0..d.subjects {
            for j in 0..d.times {
                for k in 0..d.replicates {
                    for l in 0..d.raters {
                        out.push(Observation {
                            subject: i + 1,
                            time: j + 1,
                            replicate: k + 1,
                            rater: l + 1,
                            value: self.value(i, j, k, l),
                        });
                    }
                }
            }
        }
        out
    }

    /// Check family-specific value constraints.
    pub fn validate_family(&self, family: Family) -> Result<()> {
        match family {
            Family::Gaussian => Ok(()),
            Family::Poisson => match self.values.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
                Some(v) => Err(Error::DomainError(format!(
                    "Poisson ratings must be nonnegative integers; found {v}"
                ))),
                None => Ok(()),
            },
            Family::Gamma => match self.values.iter().find(|v| **v <= 0.0) {
                Some(v) => Err(Error::DomainError(format!(
                    "Gamma ratings must be strictly positive; found {v}"
                ))),
                None => Ok(()),
            },
        }
    }

    /// Restrict to a subset of raters (0-based, in the given order).
    pub fn select_raters(&self, raters: &[usize]) -> Result<Self> {
        let d = self.dims;
        if raters.iter().any(|&l| l >= d.raters) {
            return Err(Error::IndexOutOfRange(format!(
                "rater subset {raters:?} for L={}",
                d.raters
            )));
        }
        let nd = Dims {
            raters: raters.len(),
            ..d
        };
        let mut values = Vec::with_capacity(d.subjects * nd.per_subject());
        for i in 0..d.subjects {
            for &l in raters {
                for j in 0..d.times {
                    for k in 0..d.replicates {
                        values.push(self.value(i, j, k, l));
                    }
                }
            }
        }
        Self::from_dense(nd, values)
    }
}

/// Time points `t_j = origin + j·step`, j = 0..T−1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub origin: f64,
    pub step: f64,
}

impl TimeGrid {
    /// Times 1, 2, ..., T.
    pub const UNIT: TimeGrid = TimeGrid {
        origin: 1.0,
        step: 1.0,
    };
    /// Times 0, 1, ..., T−1.
    pub const ZERO_BASED: TimeGrid = TimeGrid {
        origin: 0.0,
        step: 1.0,
    };

    pub fn point(&self, j: usize) -> f64 {
        self.origin + self.step * j as f64
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::UNIT
    }
}

/// Random-effect structure: polynomial subject effects of order `slopes`
/// plus an optional subject-by-time interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub slopes: usize,
    pub interaction: bool,
}

/// Family, design dimensions and basis of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub times: usize,
    pub replicates: usize,
    pub raters: usize,
    pub effects: RandomEffects,
    pub time_grid: TimeGrid,
}

impl ModelSpec {
    /// Intercept+time fixed effects, monomial basis of order `slopes`, unit
    /// time grid; the interaction is included iff `replicates > 1`.
    pub fn new(
        family: Family,
        times: usize,
        replicates: usize,
        raters: usize,
        slopes: usize,
    ) -> Self {
        Self {
            family,
            times,
            replicates,
            raters,
            effects: RandomEffects {
                slopes,
                interaction: replicates > 1,
            },
            time_grid: TimeGrid::UNIT,
        }
    }

    pub fn with_interaction(mut self, on: bool) -> Self {
        self.effects.interaction = on;
        self
    }

    pub fn with_time_grid(mut self, grid: TimeGrid) -> Self {
        self.time_grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.times < 2 || self.replicates < 1 || self.raters < 1 {
            return Err(Error::InvalidDimensions(format!(
                "need T >= 2, K >= 1, L >= 1; got T={}, K={}, L={}",
                self.times, self.replicates, self.raters
            )));
        }
        if self.effects.slopes + 1 > self.times {
            return Err(Error::InvalidDimensions(format!(
                "basis of order {} is not identifiable with {} time points",
                self.effects.slopes, self.times
            )));
        }
        if !(self.time_grid.step.is_finite()
            && self.time_grid.step != 0.0
            && self.time_grid.origin.is_finite())
        {
            return Err(Error::SingularDesign(
                "time grid must have a finite nonzero step".into(),
            ));
        }
        Ok(())
    }

    /// Check that a dataset matches the design and the family.
    pub fn check_data(&self, data: &RatingDataset) -> Result<()> {
        self.validate()?;
        let d = data.dims();
        if d.times != self.times || d.replicates != self.replicates || d.raters != self.raters {
            return Err(Error::InvalidDimensions(format!(
                "data has T={}, K={}, L={}; model expects T={}, K={}, L={}",
                d.times, d.replicates, d.raters, self.times, self.replicates, self.raters
            )));
        }
        data.validate_family(self.family)
    }

    pub fn n_fixed(&self) -> usize {
        2
    }

    pub fn n_alpha(&self) -> usize {
        self.effects.slopes + 1
    }

    /// Length of a subject vector, KTL.
    pub fn obs_len(&self) -> usize {
        self.times * self.replicates * self.raters
    }

    /// Length of the replicate-averaged vector, TL.
    pub fn cell_len(&self) -> usize {
        self.times * self.raters
    }

    /// Dimension of the stacked predictor vector.
    pub fn n_predictors(&self) -> usize {
        (self.n_alpha() + usize::from(self.effects.interaction)) * self.raters
    }

    pub fn time_points(&self) -> Vec<f64> {
        (0..self.times).map(|j| self.time_grid.point(j)).collect()
    }

    /// `z_s(t_j)` for s = 0..=S, j = 0..T−1.
    pub fn basis_values(&self) -> Vec<Vec<f64>> {
        let t = self.time_points();
        (0..self.n_alpha())
            .map(|s| t.iter().map(|x| x.powi(s as i32)).collect())
            .collect()
    }

    /// Basis as KT-vectors (time-major, replicate-minor).
    pub fn basis(&self) -> Vec<Vect> {
        self.basis_values()
            .into_iter()
            .map(|z| {
                Vect::from_iterator(
                    self.times * self.replicates,
                    z.iter()
                        .flat_map(|v| std::iter::repeat_n(*v, self.replicates)),
                )
            })
            .collect()
    }

    /// Per-time fixed design rows `(1, t_j)`, T×d.
    pub fn time_design(&self) -> Mat {
        let t = self.time_points();
        Mat::from_fn(self.times, 2, |j, c| if c == 0 { 1.0 } else { t[j] })
    }

    /// Fixed design `X_i` (KT×d) shared by all subjects.
    pub fn fixed_design(&self) -> Mat {
        let xt = self.time_design();
        let k = self.replicates;
        Mat::from_fn(self.times * k, 2, |r, c| xt[(r / k, c)])
    }

    /// Residual degrees of freedom `NTKL − dL − (S+1)NL − NTL`, the last term
    /// only when the interaction is part of the structure.
    pub fn residual_df(&self, n_subjects: usize) -> i64 {
        let (n, t, k, l) = (
            n_subjects as i64,
            self.times as i64,
            self.replicates as i64,
            self.raters as i64,
        );
        let mut df = n * t * k * l - self.n_fixed() as i64 * l - self.n_alpha() as i64 * n * l;
        if self.effects.interaction {
            df -= n * t * l;
        }
        df
    }
}

/// Dispersion parameter of the family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    /// Gaussian error variance σ².
    Sigma2(f64),
    /// Poisson, φ = 1.
    Unit,
    /// Gamma shape τ.
    Tau(f64),
}

impl Dispersion {
    /// φ multiplying ζ(μ) in the conditional variance.
    pub fn phi(&self) -> f64 {
        match *self {
            Dispersion::Sigma2(s) => s,
            Dispersion::Unit => 1.0,
            Dispersion::Tau(t) => 1.0 / t,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Dispersion::Sigma2(s) => s,
            Dispersion::Unit => 1.0,
            Dispersion::Tau(t) => t,
        }
    }

    pub fn with_value(&self, v: f64) -> Dispersion {
        match self {
            Dispersion::Sigma2(_) => Dispersion::Sigma2(v),
            Dispersion::Unit => Dispersion::Unit,
            Dispersion::Tau(_) => Dispersion::Tau(v),
        }
    }
}

/// Fixed effects, covariance components and dispersion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    /// L×d, row l holds β_l.
    pub beta: Mat,
    /// Σ_α^s for s = 0..=S.
    pub sigma_alpha: Vec<Mat>,
    pub sigma_gamma: Mat,
    pub dispersion: Dispersion,
}

impl ParameterSet {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let l = spec.raters;
        if self.beta.nrows() != l || self.beta.ncols() != spec.n_fixed() {
            return Err(Error::InvalidParameters(format!(
                "beta must be {}x{}, got {}x{}",
                l,
                spec.n_fixed(),
                self.beta.nrows(),
                self.beta.ncols()
            )));
        }
        if self.sigma_alpha.len() != spec.n_alpha() {
            return Err(Error::InvalidParameters(format!(
                "expected {} random-effect covariance matrices, got {}",
                spec.n_alpha(),
                self.sigma_alpha.len()
            )));
        }
        for (name, m) in self
            .sigma_alpha
            .iter()
            .enumerate()
            .map(|(s, m)| (format!("sigma_alpha[{s}]"), m))
            .chain(std::iter::once((
                "sigma_gamma".to_string(),
                &self.sigma_gamma,
            )))
        {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::InvalidParameters(format!("{name} must be {l}x{l}")));
            }
            if m.iter().any(|x| !x.is_finite()) || !linalg::is_psd(m, 1e-10) {
                return Err(Error::InvalidParameters(format!(
                    "{name} is not symmetric PSD"
                )));
            }
        }
        if self.beta.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameters("non-finite fixed effect".into()));
        }
        match (spec.family, self.dispersion) {
            (Family::Gaussian, Dispersion::Sigma2(s)) if s > 0.0 && s.is_finite() => Ok(()),
            (Family::Poisson, Dispersion::Unit) => Ok(()),
            (Family::Gamma, Dispersion::Tau(t)) if t > 0.0 && t.is_finite() => Ok(()),
            (f, d) => Err(Error::InvalidParameters(format!(
                "dispersion {d:?} invalid for family {}",
                f.name()
            ))),
        }
    }

    /// Conditional mean of η at time `j` for rater `l`, fixed part only.
    pub fn fixed_eta(&self, spec: &ModelSpec, j: usize, l: usize) -> f64 {
        let t = spec.time_grid.point(j);
        self.beta[(l, 0)] + self.beta[(l, 1)] * t
    }
}

/// Marginal covariance `Σ_{Y*}` of a subject's pseudo-observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalCovariance {
    pub sigma_ystar: Mat,
    pub plug_in_error_diag: Vect,
}

/// Monomial basis on times 1..T in the KT layout.
pub fn build_basis(times: usize, replicates: usize, slopes: usize) -> Vec<Vect> {
    ModelSpec::new(Family::Gaussian, times.max(1), replicates, 1, slopes).basis()
}

/// Assemble `Σ_{Y*}` with the given plug-in error diagonal (length KTL).
pub fn build_marginal_covariance(
    spec: &ModelSpec,
    params: &ParameterSet,
    error_diag: &Vect,
) -> Result<MarginalCovariance> {
    let (t, k, l) = (spec.times, spec.replicates, spec.raters);
    let kt = k * t;
    if error_diag.len() != kt * l {
        return Err(Error::InvalidDimensions(format!(
            "error diagonal has length {}, expected {}",
            error_diag.len(),
            kt * l
        )));
    }
    let z = spec.basis();
    let mut m = Mat::zeros(kt * l, kt * l);
    for a in 0..l {
        for b in 0..l {
            for r in 0..kt {
                for c in 0..kt {
                    let mut v: f64 = params
                        .sigma_alpha
                        .iter()
                        .zip(&z)
                        .map(|(sig, zs)| sig[(a, b)] * zs[r] * zs[c])
                        .sum();
                    if r / k == c / k {
                        v += params.sigma_gamma[(a, b)];
                    }
                    m[(a * kt + r, b * kt + c)] = v;
                }
            }
        }
    }
    for i in 0..kt * l {
        m[(i, i)] += error_diag[i];
    }
    linalg::cholesky(&m, "marginal covariance")?;
    Ok(MarginalCovariance {
        sigma_ystar: m,
        plug_in_error_diag: error_diag.clone(),
    })
}

/// `cov(α^s_l, Y_i*)`: rater-l′ segment is `σ^s_{ll′} z_s`.
pub fn build_cross_cov_alpha(
    spec: &ModelSpec,
    params: &ParameterSet,
    s: usize,
    l: usize,
) -> Result<Vect> {
    if s >= spec.n_alpha() || l >= spec.raters {
        return Err(Error::IndexOutOfRange(format!(
            "s={s}, l={l} for S={}, L={}",
            spec.effects.slopes, spec.raters
        )));
    }
    let z = &spec.basis()[s];
    let kt = z.len();
    Ok(Vect::from_fn(kt * spec.raters, |r, _| {
        params.sigma_alpha[s][(l, r / kt)] * z[r % kt]
    }))
}

/// `cov(Σ_j γ_ijl, Y_i*)`: rater-l′ segment is `σ_γ,ll′ 1_KT`.
pub fn build_cross_cov_gamma(spec: &ModelSpec, params: &ParameterSet, l: usize) -> Result<Vect> {
    if l >= spec.raters {
        return Err(Error::IndexOutOfRange(format!(
            "l={l} for L={}",
            spec.raters
        )));
    }
    let kt = spec.times * spec.replicates;
    Ok(Vect::from_fn(kt * spec.raters, |r, _| {
        params.sigma_gamma[(l, r / kt)]
    }))
}

/// Plug-in error diagonal for a constant Gaussian variance.
pub fn constant_error_diag(spec: &ModelSpec, sigma2: f64) -> Vect {
    Vect::from_element(spec.obs_len(), sigma2)
}

/// Average a KTL error diagonal over replicates (TL, rater-major).
pub fn collapse_error_diag(spec: &ModelSpec, diag: &Vect) -> Vec<f64> {
    let k = spec.replicates;
    (0..spec.cell_len())
        .map(|c| (0..k).map(|r| diag[c * k + r]).sum::<f64>() / k as f64)
        .collect()
}

/// Expand a TL error diagonal to KTL.
pub fn expand_error_diag(spec: &ModelSpec, cells: &[f64]) -> Vect {
    let k = spec.replicates;
    Vect::from_fn(spec.obs_len(), |r, _| cells[r / k])
}

/// Replicate average of a subject vector (TL).
pub fn cell_means(spec: &ModelSpec, y: &[f64]) -> Vect {
    let k = spec.replicates;
    Vect::from_fn(spec.cell_len(), |c, _| {
        y[c * k..(c + 1) * k].iter().sum::<f64>() / k as f64
    })
}

/// Reduced system on the TL grid of replicate means.
///
/// Because cross-covariances are constant over replicates and the error
/// diagonal does not vary with the replicate index, predictors and fixed
/// effects depend on the data only through replicate means, whose covariance
/// is `B + D/K`.
pub mod reduced {
    use super::*;

    /// `B + D/K` on the TL grid.
    pub fn covariance(spec: &ModelSpec, alpha: &[Mat], gamma: &Mat, err_cells: &[f64]) -> Mat {
        let (t, l) = (spec.times, spec.raters);
        let z = spec.basis_values();
        let k = spec.replicates as f64;
        let mut m = Mat::zeros(t * l, t * l);
        for a in 0..l {
            for b in 0..l {
                for j in 0..t {
                    for jj in 0..t {
                        let mut v = 0.0;
                        for (sig, zs) in alpha.iter().zip(&z) {
                            v += sig[(a, b)] * zs[j] * zs[jj];
                        }
                        if j == jj {
                            v += gamma[(a, b)];
                        }
                        m[(a * t + j, b * t + jj)] = v;
                    }
                }
            }
        }
        for (c, e) in err_cells.iter().enumerate() {
            m[(c, c)] += e / k;
        }
        m
    }

    /// Stacked cross-covariance rows (q×TL): α_s rows for s = 0..=S, then γ rows.
    pub fn cross(spec: &ModelSpec, alpha: &[Mat], gamma: &Mat) -> Mat {
        let (t, l) = (spec.times, spec.raters);
        let z = spec.basis_values();
        let mut c = Mat::zeros(spec.n_predictors(), t * l);
        for (s, (sig, zs)) in alpha.iter().zip(&z).enumerate() {
            for a in 0..l {
                for b in 0..l {
                    for j in 0..t {
                        c[(s * l + a, b * t + j)] = sig[(a, b)] * zs[j];
                    }
                }
            }
        }
        if spec.effects.interaction {
            let off = alpha.len() * l;
            for a in 0..l {
                for b in 0..l {
                    for j in 0..t {
                        c[(off + a, b * t + j)] = gamma[(a, b)];
                    }
                }
            }
        }
        c
    }

    /// Block-diagonal fixed design on the TL grid (TL×dL).
    pub fn design(spec: &ModelSpec) -> Mat {
        let (t, l, d) = (spec.times, spec.raters, spec.n_fixed());
        let xt = spec.time_design();
        let mut x = Mat::zeros(t * l, d * l);
        for a in 0..l {
            x.view_mut((a * t, a * d), (t, d)).copy_from(&xt);
        }
        x
    }

    /// Per-component weights of a linear functional of `(V, C)`.
    ///
    /// Given `q` with `dF = <dV, q> + <dC, p>`, returns `∂F/∂Σ_α^s` and
    /// `∂F/∂Σ_γ`, entries treated as independent.
    pub fn component_gradients(spec: &ModelSpec, q: &Mat, p: Option<&Mat>) -> (Vec<Mat>, Mat) {
        let (t, l) = (spec.times, spec.raters);
        let z = spec.basis_values();
        let mut ga = vec![Mat::zeros(l, l); spec.n_alpha()];
        let mut gg = Mat::zeros(l, l);
        for a in 0..l {
            for b in 0..l {
                let blk = q.view((a * t, b * t), (t, t));
                for (s, zs) in z.iter().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..t {
                        let mut row = 0.0;
                        for jj in 0..t {
                            row += blk[(j, jj)] * zs[jj];
                        }
                        acc += zs[j] * row;
                    }
                    if let Some(p) = p {
                        for j in 0..t {
                            acc += p[(s * l + a, b * t + j)] * zs[j];
                        }
                    }
                    ga[s][(a, b)] = acc;
                }
                let mut acc: f64 = (0..t).map(|j| blk[(j, j)]).sum();
                if spec.effects.interaction {
                    if let Some(p) = p {
                        let off = spec.n_alpha() * l;
                        acc += (0..t).map(|j| p[(off + a, b * t + j)]).sum::<f64>();
                    }
                }
                gg[(a, b)] = acc;
            }
        }
        (ga, gg)
    }
}

/// Layout of the unconstrained variance-component vector: log-Cholesky
/// coordinates of Σ_α^0..Σ_α^S, then Σ_γ when the interaction is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub raters: usize,
    pub n_alpha: usize,
    pub gamma: bool,
}

/// Covariance components decoded from a coordinate vector.
#[derive(Debug, Clone)]
pub struct Components {
    pub alpha: Vec<Mat>,
    pub gamma: Mat,
    factors: Vec<Mat>,
}

impl ThetaLayout {
    pub fn of(spec: &ModelSpec) -> Self {
        Self {
            raters: spec.raters,
            n_alpha: spec.n_alpha(),
            gamma: spec.effects.interaction,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_alpha + usize::from(self.gamma)
    }

    pub fn len(&self) -> usize {
        self.n_blocks() * linalg::tri_len(self.raters)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode(&self, v: &[f64]) -> Components {
        let (l, w) = (self.raters, linalg::tri_len(self.raters));
        let factors: Vec<Mat> = (0..self.n_blocks())
            .map(|b| linalg::unpack_factor(&v[b * w..(b + 1) * w], l))
            .collect();
        let mats: Vec<Mat> = factors.iter().map(|f| f * f.transpose()).collect();
        let alpha = mats[..self.n_alpha].to_vec();
        let gamma = if self.gamma {
            mats[self.n_alpha].clone()
        } else {
            Mat::zeros(l, l)
        };
        Components {
            alpha,
            gamma,
            factors,
        }
    }

    /// Encode components; semidefinite matrices are lifted to eigenvalues ≥ `floor`.
    pub fn encode(&self, alpha: &[Mat], gamma: &Mat, floor: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for a in alpha.iter().take(self.n_alpha) {
            v.extend(linalg::log_chol_pack_floor(a, floor));
        }
        if self.gamma {
            v.extend(linalg::log_chol_pack_floor(gamma, floor));
        }
        v
    }

    /// Chain component gradients into coordinate gradients.
    pub fn chain(&self, comps: &Components, ga: &[Mat], gg: &Mat) -> Vec<f64> {
        let w = linalg::tri_len(self.raters);
        let mut out = vec![0.0; self.len()];
        for s in 0..self.n_alpha {
            linalg::log_chol_chain(&comps.factors[s], &ga[s], &mut out[s * w..(s + 1) * w]);
        }
        if self.gamma {
            let b = self.n_alpha;
            linalg::log_chol_chain(&comps.factors[b], gg, &mut out[b * w..(b + 1) * w]);
        }
        out
    }
}
