//! Run settings from a flat TOML file and command-line flags; flags win.

use std::path::{Path, PathBuf};

use ccc_fiducial::ccc::DEFAULT_N_MC;
use ccc_fiducial::{
    CccEvaluation, CccNormalization, DrawMode, Family, IntervalMethod, ModelSpec, TimeGrid,
};
use clap::Args;
use serde::Deserialize;

use crate::CliError;

/// Every tunable, as optional values so a file and flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Long-format CSV with header subject,time,replicate,rater,value.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Catalog scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
    /// gaussian, poisson or gamma.
    #[arg(long)]
    pub family: Option<String>,
    /// Order S of the polynomial subject effects.
    #[arg(long)]
    pub slopes: Option<usize>,
    /// auto (on iff replicates > 1), on or off.
    #[arg(long)]
    pub interaction: Option<String>,
    /// First time point of the grid.
    #[arg(long)]
    pub time_origin: Option<f64>,
    /// Spacing of the time grid.
    #[arg(long)]
    pub time_step: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fiducial draws per interval.
    #[arg(long)]
    pub n_draws: Option<usize>,
    /// Bootstrap resamples per interval.
    #[arg(long)]
    pub n_boot: Option<usize>,
    /// Monte-Carlo size for Gamma CCCs and bounds.
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// joint or proxy; the model's default when absent.
    #[arg(long)]
    pub mode: Option<String>,
    /// factor_two, no_factor_two or time_averaged_fixed.
    #[arg(long)]
    pub normalization: Option<String>,
    /// closed or monte_carlo.
    #[arg(long)]
    pub evaluation: Option<String>,
    /// Comma-separated: fiducial, fisher_z, bootstrap.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated subject counts for `simulate`.
    #[arg(long, value_delimiter = ',')]
    pub n_subjects: Option<Vec<usize>>,
    #[arg(long)]
    pub replications: Option<usize>,
}

macro_rules! layer {
    ($top:expr, $base:expr, $($f:ident),*) => {
        Settings { $($f: $top.$f.or($base.$f),)* }
    };
}

impl Settings {
    /// Values of `self` where set, otherwise those of `base`.
    pub fn over(self, base: Settings) -> Settings {
        layer!(
            self,
            base,
            data,
            scenario,
            family,
            slopes,
            interaction,
            time_origin,
            time_step,
            alpha,
            n_draws,
            n_boot,
            n_mc,
            seed,
            mode,
            normalization,
            evaluation,
            methods,
            n_subjects,
            replications
        )
    }

    pub fn from_toml(text: &str) -> Result<Settings, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Typed, validated settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub scenario: Option<String>,
    pub family: Family,
    pub slopes: usize,
    pub interaction: Option<bool>,
    pub time_grid: TimeGrid,
    pub alpha: f64,
    pub n_draws: Option<usize>,
    pub n_boot: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub mode: Option<DrawMode>,
    pub normalization: CccNormalization,
    pub evaluation: CccEvaluation,
    pub methods: Vec<IntervalMethod>,
    pub n_subjects: Vec<usize>,
    pub replications: Option<usize>,
}

pub const DEFAULT_N_DRAWS: usize = 10_000;
pub const DEFAULT_N_BOOT: usize = 2000;

fn parse<T: std::str::FromStr>(v: Option<String>, what: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    v.map(|s| {
        s.parse::<T>()
            .map_err(|e| CliError::usage(format!("{what}: {e}")))
    })
    .transpose()
}

impl RunConfig {
    pub fn resolve(s: Settings) -> Result<RunConfig, CliError> {
        let alpha = s.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::usage(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        let interaction = match s.interaction.as_deref() {
            None | Some("auto") => None,
            Some("on") | Some("true") => Some(true),
            Some("off") | Some("false") => Some(false),
            Some(o) => {
                return Err(CliError::usage(format!(
                    "interaction must be auto, on or off, got `{o}`"
                )))
            }
        };
        let evaluation = match s.evaluation.as_deref() {
            None | Some("closed") => CccEvaluation::Closed,
            Some("monte_carlo") => CccEvaluation::MonteCarlo {
                n_mc: s.n_mc.unwrap_or(DEFAULT_N_MC),
            },
            Some(o) => {
                return Err(CliError::usage(format!(
                    "evaluation must be closed or monte_carlo, got `{o}`"
                )))
            }
        };
        let methods = match s.methods {
            None => IntervalMethod::ALL.to_vec(),
            Some(v) => v
                .iter()
                .map(|m| m.trim().parse::<IntervalMethod>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::usage(e.to_string()))?,
        };
        if methods.is_empty() {
            return Err(CliError::usage("empty method list"));
        }
        if s.n_draws == Some(0) || s.n_boot == Some(0) || s.n_mc == Some(0) {
            return Err(CliError::usage("n_draws, n_boot and n_mc must be positive"));
        }
        let step = s.time_step.unwrap_or(1.0);
        if !(step > 0.0) {
            return Err(CliError::usage(format!(
                "time_step must be positive, got {step}"
            )));
        }
        Ok(RunConfig {
            data: s.data,
            scenario: s.scenario,
            family: parse(s.family, "family")?.unwrap_or(Family::Gaussian),
            slopes: s.slopes.unwrap_or(1),
            interaction,
            time_grid: TimeGrid {
                origin: s.time_origin.unwrap_or(1.0),
                step,
            },
            alpha,
            n_draws: s.n_draws,
            n_boot: s.n_boot.unwrap_or(DEFAULT_N_BOOT),
            n_mc: s.n_mc.unwrap_or(DEFAULT_N_MC),
            seed: s.seed.unwrap_or_else(fresh_seed),
            mode: parse(s.mode, "mode")?,
            normalization: parse(s.normalization, "normalization")?.unwrap_or_default(),
            evaluation,
            methods,
            n_subjects: s.n_subjects.unwrap_or_default(),
            replications: s.replications,
        })
    }

    /// Model for a dataset with the given design.
    pub fn spec(&self, times: usize, replicates: usize, raters: usize) -> ModelSpec {
        let spec = ModelSpec::new(self.family, times, replicates, raters, self.slopes)
            .with_time_grid(self.time_grid);
        match self.interaction {
            Some(on) => spec.with_interaction(on),
            None => spec,
        }
    }
}

fn fresh_seed() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0),
    );
    h.finish()
}
