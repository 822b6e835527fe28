//! Linear-Gaussian testbed for calibrated rewards.
//!
//! Data model:
//!
//! ```text
//! x_v = U1 z1 + ξ1        x_t = U2 z2 + ξ2        z1, z2 ~ N(0, I_r)
//! y_truth = V1* x_v + V2* x_t + ε_y                z = β*ᵀ y_truth
//! ```
//!
//! The policy is a Gaussian centred on `V1 x_v + V2 x_t`. Its two reward
//! signals are an image-relevance inner product and a negative squared
//! distance to the policy mean. The quality of a response map `y(x)` is
//! measured by how well a linear probe on `y` predicts `z`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Standard deviation of ξ1, ξ2 and ε_y.
pub const NOISE_SCALE: f64 = 0.1;
/// Ridge added to the normal equations of the regression probe.
pub const RIDGE: f64 = 1e-10;
/// Minimum ratio `|β*ᵀV1*β*| / |β*ᵀV2*β*|` in the theorem regime.
pub const DOMINANCE_FACTOR: f64 = 100.0;
/// Scale of the learned `V1` in the theorem regime.
pub const TEXT_POLICY_V1_SCALE: f64 = 1e-3;
/// Required gap between the best `λ < 1` and `λ = 1`, in standard errors.
pub const VERDICT_MARGIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Image-dominated ground truth, text-dominated policy (`V1 ≈ 0`).
    Theorem,
    /// Same ground truth, but the policy already equals it.
    Control,
    /// Unstructured Gaussian matrices.
    Generic,
}

/// How λ enters the calibrated objective whose argmax gives `y_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// `(1−λ)·R_I − (λ/2)·‖y−μ‖²`, argmax `μ + ((1−λ)/λ)·U1U1ᵀx_v`.
    /// λ = 1 removes the image term.
    #[default]
    TextWeighted,
    /// `λ·R_I − (1−λ)·‖y−μ‖²`, argmax `μ + (λ/(2(1−λ)))·U1U1ᵀx_v`.
    /// λ = 0 removes the image term.
    ImageWeighted,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::TextWeighted => "text-weighted",
            Convention::ImageWeighted => "image-weighted",
        }
    }

    /// Coefficient on `U1U1ᵀx_v` in the closed-form maximizer.
    pub fn image_coefficient(self, lambda: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(domain(format!("lambda {lambda} outside [0, 1]")));
        }
        match self {
            Convention::TextWeighted if lambda == 0.0 => {
                Err(domain("lambda = 0 has no maximizer under the text-weighted convention"))
            }
            Convention::TextWeighted => Ok((1.0 - lambda) / lambda),
            Convention::ImageWeighted if lambda == 1.0 => {
                Err(domain("lambda = 1 has no maximizer under the image-weighted convention"))
            }
            Convention::ImageWeighted => Ok(lambda / (2.0 * (1.0 - lambda))),
        }
    }

    /// The λ that turns off the image term.
    pub fn text_only_lambda(self) -> f64 {
        match self {
            Convention::TextWeighted => 1.0,
            Convention::ImageWeighted => 0.0,
        }
    }
}

/// Policy mean map `y = V1 x_v + V2 x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLinear {
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
}

impl PolicyLinear {
    pub fn mean(&self, x_v: &DVector<f64>, x_t: &DVector<f64>) -> DVector<f64> {
        &self.v1 * x_v + &self.v2 * x_t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryWorld {
    pub regime: Regime,
    pub d_v: usize,
    pub d_t: usize,
    pub d_y: usize,
    pub r: usize,
    /// `d_v × r`, orthonormal columns.
    pub u1: DMatrix<f64>,
    /// `d_t × r`, orthonormal columns.
    pub u2: DMatrix<f64>,
    pub v1_star: DMatrix<f64>,
    pub v2_star: DMatrix<f64>,
    /// Unit vector in `R^{d_y}`.
    pub beta_star: DVector<f64>,
    pub noise_v: f64,
    pub noise_t: f64,
    pub noise_y: f64,
    /// Policy standard deviation.
    pub sigma: f64,
    pub policy: PolicyLinear,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    gaussian(rng, rows, cols).qr().q()
}

fn quad(beta: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (beta.transpose() * m * beta)[(0, 0)]
}

pub fn sample_world(
    seed: u64,
    d_v: usize,
    d_t: usize,
    d_y: usize,
    r: usize,
    regime: Regime,
) -> Result<TheoryWorld> {
    if d_v == 0 || d_t == 0 || d_y == 0 || r == 0 {
        return Err(domain("dimensions must be positive"));
    }
    if r > d_v.min(d_t) {
        return Err(domain(format!("rank {r} exceeds min(d_v, d_t) = {}", d_v.min(d_t))));
    }
    if regime != Regime::Generic && !(d_v == d_t && d_t == d_y) {
        return Err(domain(format!(
            "{regime:?} regime needs d_v = d_t = d_y, got {d_v}, {d_t}, {d_y}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u1 = orthonormal(&mut rng, d_v, r);
    let u2 = orthonormal(&mut rng, d_t, r);
    let b = gaussian(&mut rng, d_y, 1).column(0).into_owned();
    let beta_star = &b / b.norm();

    let (v1_star, v2_star, policy) = match regime {
        Regime::Generic => {
            let v1s = gaussian(&mut rng, d_y, d_v) / (d_v as f64).sqrt();
            let v2s = gaussian(&mut rng, d_y, d_t) / (d_t as f64).sqrt();
            let v1 = gaussian(&mut rng, d_y, d_v) / (d_v as f64).sqrt();
            let v2 = gaussian(&mut rng, d_y, d_t) / (d_t as f64).sqrt();
            (v1s, v2s, PolicyLinear { v1, v2 })
        }
        Regime::Theorem | Regime::Control => {
            let d = d_y;
            let scale = (d as f64).sqrt();
            let v1_base = gaussian(&mut rng, d, d) / scale + DMatrix::identity(d, d);
            let v2s = gaussian(&mut rng, d, d) / scale;
            let text = quad(&beta_star, &v2s).abs();
            let image = quad(&beta_star, &v1_base).abs();
            if image == 0.0 {
                return Err(domain("degenerate image signal direction"));
            }
            let kappa = (1.01 * DOMINANCE_FACTOR * text / image).max(1.0);
            let v1s = v1_base * kappa;
            let small = gaussian(&mut rng, d, d) * (TEXT_POLICY_V1_SCALE / scale);
            let policy = match regime {
                Regime::Theorem => PolicyLinear {
                    v1: small,
                    v2: v2s.clone(),
                },
                _ => PolicyLinear {
                    v1: v1s.clone(),
                    v2: v2s.clone(),
                },
            };
            (v1s, v2s, policy)
        }
    };

    Ok(TheoryWorld {
        regime,
        d_v,
        d_t,
        d_y,
        r,
        u1,
        u2,
        v1_star,
        v2_star,
        beta_star,
        noise_v: NOISE_SCALE,
        noise_t: NOISE_SCALE,
        noise_y: NOISE_SCALE,
        sigma: 1.0,
        policy,
    })
}

impl TheoryWorld {
    /// `|β*ᵀV1*β*| / |β*ᵀV2*β*|`. Needs square ground-truth maps.
    pub fn dominance_ratio(&self) -> Result<f64> {
        if self.v1_star.nrows() != self.v1_star.ncols() || self.v2_star.nrows() != self.v2_star.ncols() {
            return Err(domain("dominance ratio needs square ground-truth maps"));
        }
        Ok(quad(&self.beta_star, &self.v1_star).abs() / quad(&self.beta_star, &self.v2_star).abs())
    }

    /// Draws `n` i.i.d. samples as columns.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Samples {
        let z1 = gaussian(rng, self.r, n);
        let z2 = gaussian(rng, self.r, n);
        let x_v = &self.u1 * z1 + gaussian(rng, self.d_v, n) * self.noise_v;
        let x_t = &self.u2 * z2 + gaussian(rng, self.d_t, n) * self.noise_t;
        let eps = gaussian(rng, self.d_y, n) * self.noise_y;
        let y_truth = &self.v1_star * &x_v + &self.v2_star * &x_t + eps;
        let z = (self.beta_star.transpose() * y_truth).transpose();
        Samples { x_v, x_t, z }
    }
}

/// Columns are samples.
#[derive(Clone, Debug)]
pub struct Samples {
    pub x_v: DMatrix<f64>,
    pub x_t: DMatrix<f64>,
    pub z: DVector<f64>,
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(domain(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

/// `(R_I, R_T)` with `R_I = ⟨U1ᵀx_v, U2ᵀy⟩` and `R_T = −‖y − (V1x_v + V2x_t)‖²`.
pub fn reward_scores(
    world: &TheoryWorld,
    policy: &PolicyLinear,
    x_v: &DVector<f64>,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(f64, f64)> {
    check_len("x_v", x_v, world.d_v)?;
    check_len("x_t", x_t, world.d_t)?;
    check_len("y", y, world.d_y)?;
    if world.d_y != world.d_t {
        return Err(domain("image relevance needs d_y = d_t"));
    }
    let r_i = (world.u1.transpose() * x_v).dot(&(world.u2.transpose() * y));
    let r_t = -(y - policy.mean(x_v, x_t)).norm_squared();
    Ok((r_i, r_t))
}

/// Concave quadratic whose unique maximizer is [`closed_form_yw`].
///
/// The image term is `⟨U1ᵀx_v, U1ᵀy⟩`.
pub fn calibrated_objective(
    world: &TheoryWorld,
    policy: &PolicyLinear,
    x_v: &DVector<f64>,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
    lambda: f64,
    convention: Convention,
) -> Result<f64> {
    check_dims(world, x_v, x_t)?;
    check_len("y", y, world.d_y)?;
    let image = (world.u1.transpose() * x_v).dot(&(world.u1.transpose() * y));
    let dist = (y - policy.mean(x_v, x_t)).norm_squared();
    Ok(match convention {
        Convention::TextWeighted => (1.0 - lambda) * image - 0.5 * lambda * dist,
        Convention::ImageWeighted => lambda * image - (1.0 - lambda) * dist,
    })
}

/// Gradient of [`calibrated_objective`] with respect to `y`.
pub fn calibrated_gradient(
    world: &TheoryWorld,
    policy: &PolicyLinear,
    x_v: &DVector<f64>,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
    lambda: f64,
    convention: Convention,
) -> Result<DVector<f64>> {
    check_dims(world, x_v, x_t)?;
    check_len("y", y, world.d_y)?;
    let proj = &world.u1 * (world.u1.transpose() * x_v);
    let resid = y - policy.mean(x_v, x_t);
    Ok(match convention {
        Convention::TextWeighted => proj * (1.0 - lambda) - resid * lambda,
        Convention::ImageWeighted => proj * lambda - resid * (2.0 * (1.0 - lambda)),
    })
}

fn check_dims(world: &TheoryWorld, x_v: &DVector<f64>, x_t: &DVector<f64>) -> Result<()> {
    check_len("x_v", x_v, world.d_v)?;
    check_len("x_t", x_t, world.d_t)?;
    if world.d_y != world.d_v {
        return Err(domain("the image up-weighting term needs d_y = d_v"));
    }
    Ok(())
}

/// Response that maximizes the calibrated objective:
/// `y_w = c·U1U1ᵀx_v + V1x_v + V2x_t` with `c` from [`Convention::image_coefficient`].
pub fn closed_form_yw(
    world: &TheoryWorld,
    policy: &PolicyLinear,
    x_v: &DVector<f64>,
    x_t: &DVector<f64>,
    lambda: f64,
    convention: Convention,
) -> Result<DVector<f64>> {
    check_dims(world, x_v, x_t)?;
    let c = convention.image_coefficient(lambda)?;
    Ok(policy.mean(x_v, x_t) + &world.u1 * (world.u1.transpose() * x_v) * c)
}

/// Batched [`closed_form_yw`] over sample columns.
pub fn closed_form_yw_batch(
    world: &TheoryWorld,
    policy: &PolicyLinear,
    samples: &Samples,
    lambda: f64,
    convention: Convention,
) -> Result<DMatrix<f64>> {
    if world.d_y != world.d_v {
        return Err(domain("the image up-weighting term needs d_y = d_v"));
    }
    let c = convention.image_coefficient(lambda)?;
    let map_v = &world.u1 * world.u1.transpose() * c + &policy.v1;
    Ok(map_v * &samples.x_v + &policy.v2 * &samples.x_t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    /// Mean squared residual of the fitted probe.
    pub loss: f64,
    /// Standard error of `loss` as a sample mean of squared residuals.
    pub stderr: f64,
    pub beta: DVector<f64>,
    /// Set when every `y` sample is zero.
    pub degenerate: bool,
}

/// `min_β mean((z − βᵀy)²)`, with samples as the columns of `y`.
pub fn regression_loss(y: &DMatrix<f64>, z: &DVector<f64>) -> Result<RegressionFit> {
    let (d, n) = y.shape();
    if z.len() != n {
        return Err(domain(format!("{n} y samples but {} targets", z.len())));
    }
    if n < d + 1 {
        return Err(domain(format!("need at least {} samples, got {n}", d + 1)));
    }
    if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(domain("non-finite regression input"));
    }
    let nf = n as f64;
    let (beta, degenerate) = if y.iter().all(|&v| v == 0.0) {
        (DVector::zeros(d), true)
    } else {
        let gram = y * y.transpose() / nf + DMatrix::identity(d, d) * RIDGE;
        let rhs = y * z / nf;
        let chol = gram
            .cholesky()
            .ok_or_else(|| domain("regression normal equations are not positive definite"))?;
        (chol.solve(&rhs), false)
    };
    let resid = z - y.transpose() * &beta;
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let loss = sq.iter().sum::<f64>() / nf;
    let var = sq.iter().map(|s| (s - loss).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(RegressionFit {
        loss,
        stderr: (var / nf).sqrt(),
        beta,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremRow {
    pub lambda: f64,
    pub loss_estimate: f64,
    pub stderr: f64,
    pub num_samples: usize,
    pub convention: Convention,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    /// Grid λ with the lowest loss among `λ < 1`.
    pub best_lambda: f64,
    /// `(L(1) − L(best)) / sqrt(se(1)² + se(best)²)`.
    pub margin_se: f64,
    /// Whether the best `λ < 1` beats `λ = 1` by more than [`VERDICT_MARGIN`].
    pub verdict: bool,
}

/// Monte-Carlo estimate of the probe loss of `y_w` for each grid λ.
///
/// Grid λ is the weight on the text term, so λ = 1 is the uncalibrated
/// policy under both conventions; for [`Convention::ImageWeighted`] the
/// closed form is evaluated at `1 − λ`. Each grid point draws from its own
/// ChaCha stream of `seed`.
pub fn theorem1_experiment(
    world: &TheoryWorld,
    lambda_grid: &[f64],
    num_samples: usize,
    seed: u64,
    convention: Convention,
) -> Result<TheoremReport> {
    if num_samples < 10_000 {
        return Err(domain(format!("need at least 10000 samples, got {num_samples}")));
    }
    if !lambda_grid.contains(&1.0) {
        return Err(domain("lambda grid must contain 1.0"));
    }
    if lambda_grid.len() < 2 {
        return Err(domain("lambda grid needs a value below 1.0"));
    }
    for &l in lambda_grid {
        if !(l > 0.0 && l <= 1.0) {
            return Err(domain(format!("grid lambda {l} outside (0, 1]")));
        }
    }
    let rows: Vec<TheoremRow> = lambda_grid
        .par_iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let samples = world.sample(&mut rng, num_samples);
            let effective = match convention {
                Convention::TextWeighted => lambda,
                Convention::ImageWeighted => 1.0 - lambda,
            };
            let y = closed_form_yw_batch(world, &world.policy, &samples, effective, convention)?;
            let fit = regression_loss(&y, &samples.z)?;
            if !fit.loss.is_finite() {
                return Err(domain(format!("non-finite loss at lambda {lambda}")));
            }
            Ok(TheoremRow {
                lambda,
                loss_estimate: fit.loss,
                stderr: fit.stderr,
                num_samples,
                convention,
                seed,
            })
        })
        .collect::<Result<_>>()?;

    let base = rows.iter().find(|r| r.lambda == 1.0).expect("grid contains 1.0");
    let best = rows
        .iter()
        .filter(|r| r.lambda < 1.0)
        .fold(None::<&TheoremRow>, |acc, r| match acc {
            Some(b) if b.loss_estimate <= r.loss_estimate => Some(b),
            _ => Some(r),
        })
        .expect("grid has a value below 1.0");
    let margin_se = (base.loss_estimate - best.loss_estimate)
        / (base.stderr.powi(2) + best.stderr.powi(2)).sqrt();
    Ok(TheoremReport {
        best_lambda: best.lambda,
        verdict: margin_se > VERDICT_MARGIN,
        margin_se,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients() {
        assert_eq!(Convention::TextWeighted.image_coefficient(1.0).unwrap(), 0.0);
        assert_eq!(Convention::TextWeighted.image_coefficient(0.5).unwrap(), 1.0);
        assert_eq!(Convention::ImageWeighted.image_coefficient(0.0).unwrap(), 0.0);
        assert_eq!(Convention::ImageWeighted.image_coefficient(0.5).unwrap(), 0.5);
        assert!(Convention::TextWeighted.image_coefficient(0.0).is_err());
        assert!(Convention::ImageWeighted.image_coefficient(1.0).is_err());
        assert!(Convention::TextWeighted.image_coefficient(1.5).is_err());
    }

    #[test]
    fn rank_too_large_is_rejected() {
        assert!(sample_world(0, 4, 3, 4, 4, Regime::Generic).is_err());
        assert!(sample_world(0, 8, 8, 6, 4, Regime::Theorem).is_err());
    }

    #[test]
    fn world_is_deterministic() {
        let a = sample_world(5, 8, 8, 8, 4, Regime::Theorem).unwrap();
        let b = sample_world(5, 8, 8, 8, 4, Regime::Theorem).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let y = DMatrix::from_element(3, 3, 1.0);
        let z = DVector::from_element(3, 1.0);
        assert!(regression_loss(&y, &z).is_err());
    }

    #[test]
    fn zero_regressor_is_degenerate() {
        let y = DMatrix::zeros(2, 4);
        let z = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.0]);
        let fit = regression_loss(&y, &z).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.loss, 1.5);
    }
}
