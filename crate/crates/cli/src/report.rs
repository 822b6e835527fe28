//! The `theorem1` and `chair` reports.

use std::io::Write;
use std::path::Path;

use csr_core::eval::{greedy_chair, ChairResult};
use csr_core::theory::{sample_world, theorem1_experiment, Convention, Regime, TheoremReport, VERDICT_MARGIN};

use crate::config::RunConfig;
use crate::run::{load_checkpoint, setup};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremOptions {
    pub seed: u64,
    pub regime: Regime,
    /// Shared `d_v = d_t = d_y`.
    pub dim: usize,
    pub rank: usize,
    pub grid: Vec<f64>,
    pub num_samples: usize,
    pub conventions: Vec<Convention>,
}

impl Default for TheoremOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            regime: Regime::Theorem,
            dim: 8,
            rank: 4,
            grid: vec![0.5, 0.7, 0.9, 1.0],
            num_samples: 50_000,
            conventions: vec![Convention::TextWeighted, Convention::ImageWeighted],
        }
    }
}

/// Parses a comma-separated λ grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad grid value {s:?}: {e}")))
        })
        .collect()
}

impl TheoremOptions {
    /// Usage-level checks, so a bad grid is reported as such and not as a
    /// runtime failure.
    pub fn validate(&self) -> Result<(), CliError> {
        if !self.grid.contains(&1.0) {
            return Err(CliError::Usage("lambda grid must contain 1.0".into()));
        }
        if !self.grid.iter().any(|&l| l < 1.0) {
            return Err(CliError::Usage("lambda grid needs a value below 1.0".into()));
        }
        if let Some(l) = self.grid.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
            return Err(CliError::Usage(format!("grid lambda {l} outside (0, 1]")));
        }
        if self.num_samples < 10_000 {
            return Err(CliError::Usage(format!(
                "need at least 10000 samples, got {}",
                self.num_samples
            )));
        }
        if self.conventions.is_empty() {
            return Err(CliError::Usage("no convention selected".into()));
        }
        Ok(())
    }
}

/// One report per convention.
pub fn theorem1(opts: &TheoremOptions) -> Result<Vec<TheoremReport>, CliError> {
    opts.validate()?;
    let world = sample_world(opts.seed, opts.dim, opts.dim, opts.dim, opts.rank, opts.regime)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    opts.conventions
        .iter()
        .map(|&c| Ok(theorem1_experiment(&world, &opts.grid, opts.num_samples, opts.seed, c)?))
        .collect()
}

pub fn write_theorem_csv<W: Write>(out: W, reports: &[TheoremReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "loss_estimate", "stderr", "num_samples", "convention", "seed"])?;
    for r in reports {
        for row in &r.rows {
            w.serialize((
                row.lambda,
                row.loss_estimate,
                row.stderr,
                row.num_samples,
                row.convention.as_str(),
                row.seed,
            ))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Passes only if every convention passes.
pub fn verdict(reports: &[TheoremReport]) -> bool {
    !reports.is_empty() && reports.iter().all(|r| r.verdict)
}

pub fn verdict_line(reports: &[TheoremReport]) -> String {
    let parts: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{}: best lambda {} beats lambda 1 by {:.2} SE",
                r.rows[0].convention.as_str(),
                r.best_lambda,
                r.margin_se
            )
        })
        .collect();
    format!(
        "{} calibration check (threshold {VERDICT_MARGIN} SE) {}",
        if verdict(reports) { "PASS" } else { "FAIL" },
        parts.join("; ")
    )
}

/// Greedy CHAIR of the seed policy or of a checkpoint on the config's world.
pub fn chair(config: &RunConfig, checkpoint: Option<&Path>) -> Result<ChairResult, CliError> {
    let s = setup(config)?;
    if s.world.images.is_empty() {
        return Err(CliError::Config("the world has no images to caption".into()));
    }
    let policy = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.policy.num_params() != s.seed_policy.num_params() {
                return Err(CliError::Data(format!(
                    "{} does not match the config's world",
                    path.display()
                )));
            }
            ckpt.policy
        }
        None => s.seed_policy,
    };
    Ok(greedy_chair(&policy, &s.world, config.max_length)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.5, 0.7,1.0").unwrap(), vec![0.5, 0.7, 1.0]);
        assert!(matches!(parse_grid("0.5,x"), Err(CliError::Usage(_))));
    }

    #[test]
    fn grid_without_one_is_a_usage_error() {
        let opts = TheoremOptions {
            grid: vec![0.5, 0.9],
            ..TheoremOptions::default()
        };
        assert!(matches!(theorem1(&opts), Err(CliError::Usage(_))));
    }
}
