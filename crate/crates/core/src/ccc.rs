//! The longitudinal CCC among raters: closed forms, Monte-Carlo evaluation
//! and the attainable bounds.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiducial::FiducialDraw;
use crate::linalg::{self, Mat};
use crate::model::{Dispersion, Family, ModelSpec, ParameterSet};
use crate::rng::{label, substream, StreamRng};

/// Normalization of the LMM closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CccNormalization {
    /// Factor 2 on the cross-covariance sum; fixed-effect differences summed
    /// over one subject's observations. Agrees with the moment definition.
    #[default]
    FactorTwo,
    /// Cross-covariance sum without the factor 2.
    NoFactorTwo,
    /// Factor 2 with the fixed-effect term averaged over time points.
    TimeAveragedFixed,
}

impl std::str::FromStr for CccNormalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factor_two" => Ok(Self::FactorTwo),
            "no_factor_two" => Ok(Self::NoFactorTwo),
            "time_averaged_fixed" => Ok(Self::TimeAveragedFixed),
            o => Err(Error::InvalidParameters(format!(
                "unknown CCC normalization `{o}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CccMethod {
    ClosedLmm,
    ClosedGaussian,
    ClosedPoisson,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CccValue {
    pub value: f64,
    pub method: CccMethod,
    pub mc_std_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccBounds {
    pub lower: f64,
    pub upper: f64,
}

/// How the CCC is evaluated at a parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CccEvaluation {
    /// Closed form when the family has one, Monte Carlo otherwise.
    #[default]
    Closed,
    MonteCarlo {
        n_mc: usize,
    },
}

/// Default Monte-Carlo size for evaluating the CCC at a parameter value.
pub const DEFAULT_N_MC: usize = 100_000;

/// Moments of the conditional means on the time grid, per rater.
///
/// All replicates of a time point share the same distribution, so the
/// replicate count cancels from every ratio and is left out.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMoments {
    /// `cov[j]` is the L×L covariance of `(μ_j1, ..., μ_jL)`.
    pub cov: Vec<Mat>,
    /// `noise[(j, l)] = φ E ζ(μ_jl)`.
    pub noise: Mat,
    /// `mean[(j, l)] = E μ_jl`.
    pub mean: Mat,
}

impl CellMoments {
    fn parts(&self) -> (f64, f64, f64, f64) {
        let l = self.noise.ncols();
        let (mut cross, mut var, mut noise, mut fixed) = (0.0, 0.0, 0.0, 0.0);
        for (j, c) in self.cov.iter().enumerate() {
            for a in 0..l {
                var += c[(a, a)];
                noise += self.noise[(j, a)];
                for b in a + 1..l {
                    cross += c[(a, b)];
                    fixed += (self.mean[(j, a)] - self.mean[(j, b)]).powi(2);
                }
            }
        }
        (cross, var, noise, fixed)
    }

    /// CCC from the moment definition.
    pub fn ccc(&self) -> Result<f64> {
        let l = self.noise.ncols() as f64;
        let (cross, var, noise, fixed) = self.parts();
        let den = (l - 1.0) * (var + noise) + fixed;
        if !(den > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        Ok(2.0 * cross / den)
    }

    /// Upper attainable bound `(1 + Σ noise / Σ var)^{-1}`.
    pub fn bound(&self) -> Result<f64> {
        let (_, var, noise, _) = self.parts();
        if !(var > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        Ok(1.0 / (1.0 + noise / var))
    }
}

fn component_cov(spec: &ModelSpec, p: &ParameterSet, j: usize) -> Mat {
    let z = spec.basis_values();
    let mut c = p.sigma_gamma.clone();
    for (sig, zs) in p.sigma_alpha.iter().zip(&z) {
        c += sig * (zs[j] * zs[j]);
    }
    c
}

/// Exact moments for the Gaussian family.
pub fn gaussian_moments(spec: &ModelSpec, p: &ParameterSet) -> CellMoments {
    let (t, l) = (spec.times, spec.raters);
    let s2 = p.dispersion.phi();
    CellMoments {
        cov: (0..t).map(|j| component_cov(spec, p, j)).collect(),
        noise: Mat::from_element(t, l, s2),
        mean: Mat::from_fn(t, l, |j, a| p.fixed_eta(spec, j, a)),
    }
}

/// Exact lognormal moments for the Poisson family.
pub fn poisson_moments(spec: &ModelSpec, p: &ParameterSet) -> Result<CellMoments> {
    let (t, l) = (spec.times, spec.raters);
    let mut cov = Vec::with_capacity(t);
    let mut lam = Mat::zeros(t, l);
    for j in 0..t {
        let v = component_cov(spec, p, j);
        for a in 0..l {
            let e = p.fixed_eta(spec, j, a) + 0.5 * v[(a, a)];
            if e > 700.0 || v[(a, a)] > 700.0 {
                return Err(Error::OverflowGuard(e.max(v[(a, a)])));
            }
            lam[(j, a)] = e.exp();
        }
        cov.push(Mat::from_fn(l, l, |a, b| {
            lam[(j, a)] * lam[(j, b)] * v[(a, b)].exp_m1()
        }));
    }
    Ok(CellMoments {
        cov,
        noise: lam.clone(),
        mean: lam,
    })
}

fn require(spec: &ModelSpec, fam: Family, what: &str) -> Result<()> {
    if spec.family != fam {
        return Err(Error::InvalidParameters(format!(
            "{what} requires the {} family",
            fam.name()
        )));
    }
    Ok(())
}

/// LMM closed form.
pub fn ccc_lmm(
    spec: &ModelSpec,
    params: &ParameterSet,
    norm: CccNormalization,
) -> Result<CccValue> {
    require(spec, Family::Gaussian, "ccc_lmm")?;
    let m = gaussian_moments(spec, params);
    let l = spec.raters as f64;
    let (cross, var, noise, fixed) = m.parts();
    let (num, fixed) = match norm {
        CccNormalization::FactorTwo => (2.0 * cross, fixed),
        CccNormalization::NoFactorTwo => (cross, fixed),
        CccNormalization::TimeAveragedFixed => (2.0 * cross, fixed / spec.times as f64),
    };
    let den = (l - 1.0) * (var + noise) + fixed;
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    Ok(CccValue {
        value: num / den,
        method: CccMethod::ClosedLmm,
        mc_std_error: None,
    })
}

/// Expanded closed form for random intercept and slope with no interaction,
/// written with the time sums `Σt` and `Σt²`.
pub fn ccc_gaussian_closed(spec: &ModelSpec, params: &ParameterSet) -> Result<CccValue> {
    require(spec, Family::Gaussian, "ccc_gaussian_closed")?;
    if spec.effects.slopes != 1 || params.sigma_gamma.amax() != 0.0 {
        return Err(Error::InvalidParameters(
            "closed Gaussian form needs intercept+slope effects and no interaction".into(),
        ));
    }
    let t = spec.time_points();
    let (n, st, st2) = (
        t.len() as f64,
        t.iter().sum::<f64>(),
        t.iter().map(|x| x * x).sum::<f64>(),
    );
    let s2 = params.dispersion.phi();
    let (a0, a1, b) = (&params.sigma_alpha[0], &params.sigma_alpha[1], &params.beta);
    let l = spec.raters;
    let (mut num, mut den) = (0.0, 0.0);
    for p in 0..l {
        den += (l as f64 - 1.0) * (n * a0[(p, p)] + st2 * a1[(p, p)] + n * s2);
        for q in p + 1..l {
            num += 2.0 * (n * a0[(p, q)] + st2 * a1[(p, q)]);
            let (d0, d1) = (b[(p, 0)] - b[(q, 0)], b[(p, 1)] - b[(q, 1)]);
            den += n * d0 * d0 + 2.0 * d0 * d1 * st + d1 * d1 * st2;
        }
    }
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    Ok(CccValue {
        value: num / den,
        method: CccMethod::ClosedGaussian,
        mc_std_error: None,
    })
}

/// Poisson closed form from lognormal moment identities.
pub fn ccc_poisson_closed(spec: &ModelSpec, params: &ParameterSet) -> Result<CccValue> {
    require(spec, Family::Poisson, "ccc_poisson_closed")?;
    let v = poisson_moments(spec, params)?.ccc()?;
    Ok(CccValue {
        value: v,
        method: CccMethod::ClosedPoisson,
        mc_std_error: None,
    })
}

const CHUNK: usize = 4096;
const MAX_REJECTIONS: usize = 100;

/// Simulates subject-level conditional means on the TL grid.
struct MeanSampler {
    spec: ModelSpec,
    factors: Vec<Mat>,
    gamma_factor: Mat,
    fixed: Mat,
    z: Vec<Vec<f64>>,
}

impl MeanSampler {
    fn new(spec: &ModelSpec, p: &ParameterSet) -> Self {
        Self {
            spec: spec.clone(),
            factors: p.sigma_alpha.iter().map(linalg::psd_factor).collect(),
            gamma_factor: linalg::psd_factor(&p.sigma_gamma),
            fixed: Mat::from_fn(spec.times, spec.raters, |j, a| p.fixed_eta(spec, j, a)),
            z: spec.basis_values(),
        }
    }

    /// Fill `eta` (rater-major TL) for one subject; `false` if a Gamma
    /// predictor was nonpositive.
    fn draw_eta(&self, rng: &mut StreamRng, eta: &mut [f64], buf: &mut Vec<f64>) -> bool {
        let (t, l) = (self.spec.times, self.spec.raters);
        buf.clear();
        for f in &self.factors {
            let e: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
            for a in 0..l {
                buf.push((0..l).map(|b| f[(a, b)] * e[b]).sum::<f64>());
            }
        }
        let has_gamma = self.gamma_factor.amax() > 0.0;
        for j in 0..t {
            let g: Vec<f64> = if has_gamma {
                let e: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
                (0..l)
                    .map(|a| (0..l).map(|b| self.gamma_factor[(a, b)] * e[b]).sum())
                    .collect()
            } else {
                vec![0.0; l]
            };
            for a in 0..l {
                let mut v = self.fixed[(j, a)] + g[a];
                for (s, zs) in self.z.iter().enumerate() {
                    v += zs[j] * buf[s * l + a];
                }
                eta[a * t + j] = v;
            }
        }
        self.spec.family != Family::Gamma || eta.iter().all(|v| *v > 0.0)
    }

    /// Conditional means for one subject, resampling Gamma subjects with a
    /// nonpositive linear predictor.
    fn draw_mu(&self, rng: &mut StreamRng, mu: &mut [f64], buf: &mut Vec<f64>) -> Result<usize> {
        for attempt in 0..MAX_REJECTIONS {
            if self.draw_eta(rng, mu, buf) {
                let fam = self.spec.family;
                mu.iter_mut().for_each(|v| *v = fam.mean(*v));
                return Ok(attempt);
            }
        }
        Err(Error::DomainError(format!(
            "linear predictor nonpositive in {MAX_REJECTIONS} consecutive subject draws"
        )))
    }
}

fn chunks(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|c| (c as u64, CHUNK.min(n - c * CHUNK)))
        .collect()
}

struct RawMoments {
    n: usize,
    m1: Vec<f64>,
    m2: Vec<f64>,
    rejections: usize,
}

fn raw_moments(sampler: &MeanSampler, n: usize, seed: u64) -> Result<RawMoments> {
    let tl = sampler.spec.cell_len();
    let (t, l) = (sampler.spec.times, sampler.spec.raters);
    let parts: Vec<Result<RawMoments>> = chunks(n)
        .into_par_iter()
        .map(|(c, size)| {
            let mut rng = substream(seed, &[label::MONTE_CARLO, c]);
            let mut mu = vec![0.0; tl];
            let mut buf = Vec::new();
            let mut r = RawMoments {
                n: size,
                m1: vec![0.0; tl],
                m2: vec![0.0; t * l * l],
                rejections: 0,
            };
            for _ in 0..size {
                r.rejections += sampler.draw_mu(&mut rng, &mut mu, &mut buf)?;
                for j in 0..t {
                    for a in 0..l {
                        let x = mu[a * t + j];
                        r.m1[a * t + j] += x;
                        for b in a..l {
                            r.m2[(j * l + a) * l + b] += x * mu[b * t + j];
                        }
                    }
                }
            }
            Ok(r)
        })
        .collect();
    let mut tot = RawMoments {
        n: 0,
        m1: vec![0.0; tl],
        m2: vec![0.0; t * l * l],
        rejections: 0,
    };
    for p in parts {
        let p = p?;
        tot.n += p.n;
        tot.rejections += p.rejections;
        tot.m1.iter_mut().zip(&p.m1).for_each(|(a, b)| *a += b);
        tot.m2.iter_mut().zip(&p.m2).for_each(|(a, b)| *a += b);
    }
    let nf = tot.n as f64;
    tot.m1.iter_mut().for_each(|v| *v /= nf);
    tot.m2.iter_mut().for_each(|v| *v /= nf);
    Ok(tot)
}

fn moments_from_raw(spec: &ModelSpec, disp: Dispersion, r: &RawMoments) -> CellMoments {
    let (t, l) = (spec.times, spec.raters);
    let m2 = |j: usize, a: usize, b: usize| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        r.m2[(j * l + a) * l + b]
    };
    let mean = Mat::from_fn(t, l, |j, a| r.m1[a * t + j]);
    let cov = (0..t)
        .map(|j| Mat::from_fn(l, l, |a, b| m2(j, a, b) - mean[(j, a)] * mean[(j, b)]))
        .collect();
    let noise = Mat::from_fn(t, l, |j, a| match spec.family {
        Family::Gaussian => disp.phi(),
        Family::Poisson => mean[(j, a)],
        Family::Gamma => disp.phi() * m2(j, a, a),
    });
    CellMoments { cov, noise, mean }
}

/// Monte-Carlo moments of the conditional means.
pub fn mc_moments(
    spec: &ModelSpec,
    params: &ParameterSet,
    n_mc: usize,
    seed: u64,
) -> Result<CellMoments> {
    let sampler = MeanSampler::new(spec, params);
    let raw = raw_moments(&sampler, n_mc, seed)?;
    Ok(moments_from_raw(spec, params.dispersion, &raw))
}

/// Monte-Carlo CCC with a delta-method standard error.
pub fn ccc_monte_carlo<R: RngCore + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    n_mc: usize,
    rng: &mut R,
) -> Result<CccValue> {
    ccc_monte_carlo_seeded(spec, params, n_mc, rng.next_u64())
}

/// As [`ccc_monte_carlo`] with an explicit stream seed.
pub fn ccc_monte_carlo_seeded(
    spec: &ModelSpec,
    params: &ParameterSet,
    n_mc: usize,
    seed: u64,
) -> Result<CccValue> {
    if n_mc < 2 {
        return Err(Error::InvalidParameters("n_mc must be at least 2".into()));
    }
    let sampler = MeanSampler::new(spec, params);
    let raw = raw_moments(&sampler, n_mc, seed)?;
    let m = moments_from_raw(spec, params.dispersion, &raw);
    let value = m.ccc()?;
    let (t, l) = (spec.times, spec.raters);
    let lf = l as f64;
    let (_, var, noise, fixed) = m.parts();
    let den = (lf - 1.0) * (var + noise) + fixed;
    let phi = params.dispersion.phi();
    let fam = spec.family;
    let tl = spec.cell_len();
    // Influence functions, replaying the same substreams.
    let parts: Vec<Result<(f64, f64)>> = chunks(n_mc)
        .into_par_iter()
        .map(|(c, size)| {
            let mut rng = substream(seed, &[label::MONTE_CARLO, c]);
            let mut mu = vec![0.0; tl];
            let mut buf = Vec::new();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..size {
                sampler.draw_mu(&mut rng, &mut mu, &mut buf)?;
                let (mut inum, mut iden) = (0.0, 0.0);
                for j in 0..t {
                    for a in 0..l {
                        let da = mu[a * t + j] - m.mean[(j, a)];
                        let inoise = match fam {
                            Family::Gaussian => 0.0,
                            Family::Poisson => da,
                            Family::Gamma => {
                                phi * (mu[a * t + j].powi(2) - raw.m2[(j * l + a) * l + a])
                            }
                        };
                        iden += (lf - 1.0) * (da * da - m.cov[j][(a, a)] + inoise);
                        for b in a + 1..l {
                            let db = mu[b * t + j] - m.mean[(j, b)];
                            inum += 2.0 * (da * db - m.cov[j][(a, b)]);
                            iden += 2.0 * (m.mean[(j, a)] - m.mean[(j, b)]) * (da - db);
                        }
                    }
                }
                let inf = (inum - value * iden) / den;
                s1 += inf;
                s2 += inf * inf;
            }
            Ok((s1, s2))
        })
        .collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        s1 += a;
        s2 += b;
    }
    let nf = n_mc as f64;
    let var_if = (s2 / nf - (s1 / nf).powi(2)).max(0.0);
    Ok(CccValue {
        value,
        method: CccMethod::MonteCarlo,
        mc_std_error: Some((var_if / nf).sqrt()),
    })
}

/// Moments by the family's exact route, or Monte Carlo for Gamma.
pub fn family_moments(
    spec: &ModelSpec,
    params: &ParameterSet,
    n_mc: usize,
    seed: u64,
) -> Result<CellMoments> {
    match spec.family {
        Family::Gaussian => Ok(gaussian_moments(spec, params)),
        Family::Poisson => poisson_moments(spec, params),
        Family::Gamma => mc_moments(spec, params, n_mc, seed),
    }
}

/// Attainable bounds `±(1 + Σ φEζ / Σ var μ)^{-1}`.
pub fn ccc_bounds<R: RngCore + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterSet,
    n_mc: usize,
    rng: &mut R,
) -> Result<CccBounds> {
    let u = family_moments(spec, params, n_mc, rng.next_u64())?.bound()?;
    Ok(CccBounds {
        lower: -u,
        upper: u,
    })
}

/// CCC at a parameter value under the requested evaluation.
pub fn ccc_at(
    spec: &ModelSpec,
    params: &ParameterSet,
    eval: CccEvaluation,
    norm: CccNormalization,
    seed: u64,
) -> Result<CccValue> {
    match (spec.family, eval) {
        (Family::Gaussian, CccEvaluation::Closed) => ccc_lmm(spec, params, norm),
        (Family::Poisson, CccEvaluation::Closed) => ccc_poisson_closed(spec, params),
        (Family::Gamma, CccEvaluation::Closed) => {
            ccc_monte_carlo_seeded(spec, params, DEFAULT_N_MC, seed)
        }
        (_, CccEvaluation::MonteCarlo { n_mc }) => ccc_monte_carlo_seeded(spec, params, n_mc, seed),
    }
}

/// CCC at a fiducial draw.
pub fn ccc_fiducial(
    draw: &FiducialDraw,
    spec: &ModelSpec,
    eval: CccEvaluation,
    norm: CccNormalization,
    seed: u64,
) -> Result<f64> {
    Ok(ccc_at(spec, &draw.params(), eval, norm, seed)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;

    fn table1() -> (ModelSpec, ParameterSet) {
        let spec =
            ModelSpec::new(Family::Gaussian, 10, 1, 2, 1).with_time_grid(TimeGrid::ZERO_BASED);
        let p = ParameterSet {
            beta: Mat::from_row_slice(2, 2, &[0.75, -0.10, 0.50, -0.06]),
            sigma_alpha: vec![
                Mat::from_row_slice(2, 2, &[0.45, 0.40, 0.40, 0.49]),
                Mat::from_row_slice(2, 2, &[0.10, 0.067, 0.067, 0.06]),
            ],
            sigma_gamma: Mat::zeros(2, 2),
            dispersion: Dispersion::Sigma2(0.11),
        };
        (spec, p)
    }

    #[test]
    fn closed_forms_agree() {
        let (spec, p) = table1();
        let a = ccc_lmm(&spec, &p, CccNormalization::FactorTwo)
            .unwrap()
            .value;
        let b = ccc_gaussian_closed(&spec, &p).unwrap().value;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn perfect_agreement_and_independence() {
        let (spec, mut p) = table1();
        p.beta = Mat::from_row_slice(2, 2, &[1.0, 0.1, 1.0, 0.1]);
        p.sigma_alpha = vec![Mat::from_element(2, 2, 0.5), Mat::from_element(2, 2, 0.1)];
        p.dispersion = Dispersion::Sigma2(0.0);
        assert!(
            (ccc_lmm(&spec, &p, CccNormalization::FactorTwo)
                .unwrap()
                .value
                - 1.0)
                .abs()
                < 1e-14
        );
        let (spec, mut p) = table1();
        for m in p.sigma_alpha.iter_mut() {
            m[(0, 1)] = 0.0;
            m[(1, 0)] = 0.0;
        }
        assert_eq!(
            ccc_lmm(&spec, &p, CccNormalization::FactorTwo)
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn zero_denominator() {
        let (spec, mut p) = table1();
        p.beta = Mat::zeros(2, 2);
        p.sigma_alpha = vec![Mat::zeros(2, 2); 2];
        p.dispersion = Dispersion::Sigma2(0.0);
        assert_eq!(
            ccc_lmm(&spec, &p, CccNormalization::FactorTwo),
            Err(Error::ZeroDenominator)
        );
    }

    #[test]
    fn error_free_bounds_are_unit() {
        let (spec, mut p) = table1();
        p.dispersion = Dispersion::Sigma2(0.0);
        let b = gaussian_moments(&spec, &p).bound().unwrap();
        assert_eq!(b, 1.0);
    }

    #[test]
    fn poisson_overflow_guard() {
        let spec = ModelSpec::new(Family::Poisson, 3, 1, 2, 1);
        let p = ParameterSet {
            beta: Mat::from_row_slice(2, 2, &[800.0, 0.0, 1.0, 0.0]),
            sigma_alpha: vec![Mat::identity(2, 2) * 0.1, Mat::identity(2, 2) * 0.01],
            sigma_gamma: Mat::zeros(2, 2),
            dispersion: Dispersion::Unit,
        };
        assert!(matches!(
            ccc_poisson_closed(&spec, &p),
            Err(Error::OverflowGuard(_))
        ));
    }

    #[test]
    fn monte_carlo_is_deterministic_per_seed() {
        let (spec, p) = table1();
        let a = ccc_monte_carlo_seeded(&spec, &p, 10_000, 9).unwrap();
        let b = ccc_monte_carlo_seeded(&spec, &p, 10_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.mc_std_error.unwrap() > 0.0);
    }
}
