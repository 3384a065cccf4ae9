//! Fiducial confidence intervals for the longitudinal concordance correlation
//! coefficient (CCC) among raters under generalized linear mixed models.
//!
//! The pipeline: fit the model by REML on (pseudo-)observations, compute
//! conditional-mean predictors of the random effects, draw Wishart pivots for
//! their covariance, recover variance components by Newton-CG least squares,
//! draw fixed-effect and dispersion pivots, evaluate the CCC at each draw and
//! take the highest-density interval. Fisher-Z and bias-corrected bootstrap
//! intervals serve as baselines, and [`simulation`] runs coverage studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ccc;
pub mod error;
pub mod estimation;
pub mod fiducial;
pub mod intervals;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod simulation;

pub use ccc::{CccBounds, CccEvaluation, CccMethod, CccNormalization, CccValue};
pub use error::{Error, Result};
pub use estimation::{FitResult, FitTrace, PredictorSet};
pub use fiducial::{DrawMode, FiducialDraw, SolverDiag};
pub use intervals::{IntervalMethod, IntervalOptions, IntervalResult};
pub use model::{
    Dims, Dispersion, Family, MarginalCovariance, ModelSpec, Observation, ParameterSet,
    RandomEffects, RatingDataset, TimeGrid,
};
pub use simulation::{CoverageOptions, CoverageReport, ErrorModel, Scenario};
