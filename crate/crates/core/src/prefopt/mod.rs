//! DPO objective over preference pairs and the outer self-rewarding loop.
//!
//! ```text
//! z    = α · [(log π(y_w|x) − log π_ref(y_w|x)) − (log π(y_l|x) − log π_ref(y_l|x))]
//! loss = −log σ(z)
//! ```
//!
//! Log-likelihoods are summed token by token; each token's log-probability
//! is clamped below at `logprob_floor` so degenerate references cannot
//! produce infinite ratios. Clamped tokens contribute no gradient.

pub mod checkpoint;
mod csr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use csr::{csr_run, CsrConfig, IterationArtifacts, IterationMetrics};

use crate::decode::Response;
use crate::error::{domain, Error, Result};
use crate::policy::{Policy, Prompt, TokenId};
use crate::reward::SentenceScore;
use crate::toyworld::{LogProbTable, ToyPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub chosen: Response,
    pub rejected: Response,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_scores: Vec<SentenceScore>,
    pub rejected_scores: Vec<SentenceScore>,
    pub iteration: usize,
    /// Chosen and rejected rewards are equal.
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Scale on the log-ratio difference.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs_per_iteration: usize,
    pub iterations: usize,
    /// Per-token lower clamp on log-probabilities.
    pub logprob_floor: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            learning_rate: 0.05,
            epochs_per_iteration: 200,
            iterations: 3,
            logprob_floor: -30.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(domain("alpha must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(domain("learning_rate must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(domain("at least one iteration is required"));
        }
        if !(self.logprob_floor < 0.0) {
            return Err(domain("logprob_floor must be negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    /// `z`, the argument of the sigmoid.
    pub margin: f64,
    /// Some token hit the log-probability floor.
    pub floored: bool,
}

/// `−log σ(z)` without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Floor-clamped log-likelihood of a response.
struct SeqLogprob {
    value: f64,
    floored: bool,
}

fn seq_logprob(
    policy: &ToyPolicy,
    table: &LogProbTable,
    prompt: &Prompt,
    tokens: &[TokenId],
    floor: f64,
) -> SeqLogprob {
    let bucket = policy.bucket(&prompt.image_embedding);
    let mut prev = None;
    let mut value = 0.0;
    let mut floored = false;
    for &t in tokens {
        let lp = table.logprob(policy.context_for_bucket(bucket, prev), t);
        if lp < floor {
            floored = true;
            value += floor;
        } else {
            value += lp;
        }
        prev = Some(t);
    }
    SeqLogprob { value, floored }
}

/// Adds `scale · ∇θ log π(tokens | prompt)` into `grad`, skipping clamped tokens.
fn add_seq_grad(
    policy: &ToyPolicy,
    table: &LogProbTable,
    prompt: &Prompt,
    tokens: &[TokenId],
    floor: f64,
    scale: f64,
    grad: &mut [f64],
) {
    let v = policy.vocab_size();
    let bucket = policy.bucket(&prompt.image_embedding);
    let mut prev = None;
    for &t in tokens {
        let ctx = policy.context_for_bucket(bucket, prev);
        prev = Some(t);
        if table.logprob(ctx, t) < floor {
            continue;
        }
        let row = &mut grad[ctx * v..(ctx + 1) * v];
        for (g, p) in row.iter_mut().zip(table.probs(ctx)) {
            *g -= scale * p;
        }
        row[t.index()] += scale;
    }
}

fn check_pair(policy: &ToyPolicy, reference: &ToyPolicy, pair: &PreferencePair) -> Result<()> {
    if policy.num_params() != reference.num_params() {
        return Err(domain("policy and reference have different shapes"));
    }
    let v = policy.vocab_size();
    for t in pair.chosen.tokens.iter().chain(&pair.rejected.tokens) {
        if t.index() >= v {
            return Err(domain(format!("token {t} outside vocabulary")));
        }
    }
    Ok(())
}

/// Reference log-likelihoods for a pair: `(chosen, rejected, floored)`.
fn reference_terms(
    reference: &ToyPolicy,
    table: &LogProbTable,
    pair: &PreferencePair,
    floor: f64,
) -> (f64, f64, bool) {
    let w = seq_logprob(reference, table, &pair.prompt, &pair.chosen.tokens, floor);
    let l = seq_logprob(reference, table, &pair.prompt, &pair.rejected.tokens, floor);
    (w.value, l.value, w.floored || l.floored)
}

fn pair_loss(
    policy: &ToyPolicy,
    table: &LogProbTable,
    pair: &PreferencePair,
    reference: (f64, f64, bool),
    alpha: f64,
    floor: f64,
) -> DpoLoss {
    let w = seq_logprob(policy, table, &pair.prompt, &pair.chosen.tokens, floor);
    let l = seq_logprob(policy, table, &pair.prompt, &pair.rejected.tokens, floor);
    let margin = alpha * ((w.value - reference.0) - (l.value - reference.1));
    DpoLoss {
        loss: neg_log_sigmoid(margin),
        margin,
        floored: w.floored || l.floored || reference.2,
    }
}

/// DPO loss of one pair with the default log-probability floor.
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    alpha: f64,
) -> Result<DpoLoss> {
    dpo_loss_with_floor(policy, reference, pair, alpha, DpoConfig::default().logprob_floor)
}

pub fn dpo_loss_with_floor(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    alpha: f64,
    floor: f64,
) -> Result<DpoLoss> {
    check_pair(policy, reference, pair)?;
    let ref_table = reference.log_probs();
    let terms = reference_terms(reference, &ref_table, pair, floor);
    Ok(pair_loss(policy, &policy.log_probs(), pair, terms, alpha, floor))
}

/// Mean loss over a batch and its gradient with respect to the policy.
/// Reference log-likelihoods are passed in precomputed.
fn batch_loss_and_grad(
    policy: &ToyPolicy,
    batch: &[PreferencePair],
    reference: &[(f64, f64, bool)],
    alpha: f64,
    floor: f64,
) -> (Vec<DpoLoss>, Vec<f64>) {
    let table = policy.log_probs();
    let n = batch.len() as f64;
    let per_pair: Vec<(DpoLoss, Vec<f64>)> = batch
        .par_iter()
        .zip(reference.par_iter())
        .map(|(pair, &r)| {
            let loss = pair_loss(policy, &table, pair, r, alpha, floor);
            // d(−log σ(z))/dz = −σ(−z)
            let dz = -sigmoid(-loss.margin) * alpha / n;
            let mut g = vec![0.0; policy.num_params()];
            add_seq_grad(policy, &table, &pair.prompt, &pair.chosen.tokens, floor, dz, &mut g);
            add_seq_grad(policy, &table, &pair.prompt, &pair.rejected.tokens, floor, -dz, &mut g);
            (loss, g)
        })
        .collect();

    let mut grad = vec![0.0; policy.num_params()];
    let mut losses = Vec::with_capacity(per_pair.len());
    for (loss, g) in per_pair {
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
        losses.push(loss);
    }
    (losses, grad)
}

/// Gradient of the mean DPO loss over `batch` with respect to the policy
/// parameters. The reference is treated as a constant.
pub fn dpo_gradient(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferencePair],
    alpha: f64,
) -> Result<Vec<f64>> {
    dpo_gradient_with_floor(policy, reference, batch, alpha, DpoConfig::default().logprob_floor)
}

pub fn dpo_gradient_with_floor(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    batch: &[PreferencePair],
    alpha: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(domain("empty preference batch"));
    }
    for pair in batch {
        check_pair(policy, reference, pair)?;
    }
    let ref_table = reference.log_probs();
    let terms: Vec<_> = batch
        .iter()
        .map(|p| reference_terms(reference, &ref_table, p, floor))
        .collect();
    Ok(batch_loss_and_grad(policy, batch, &terms, alpha, floor).1)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Mean batch loss before each step, followed by the loss after the last step.
    pub loss_trace: Vec<f64>,
    /// Final loss did not exceed the initial loss.
    pub converged: bool,
    /// Pairs with at least one token at the log-probability floor.
    pub floored_pairs: usize,
    pub final_grad_norm: f64,
}

/// Full-batch gradient descent on the DPO loss against a frozen reference.
pub fn train_iteration(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    dataset: &[PreferencePair],
    config: &DpoConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(domain("empty preference dataset"));
    }
    for pair in dataset {
        check_pair(policy, reference, pair)?;
    }
    let floor = config.logprob_floor;
    let ref_table = reference.log_probs();
    let terms: Vec<_> = dataset
        .iter()
        .map(|p| reference_terms(reference, &ref_table, p, floor))
        .collect();

    let mut current = policy.clone();
    let mut trace = Vec::with_capacity(config.epochs_per_iteration + 1);
    let mut floored_pairs = 0;
    let mut grad_norm = 0.0;
    for step in 0..=config.epochs_per_iteration {
        let (losses, grad) = batch_loss_and_grad(&current, dataset, &terms, config.alpha, floor);
        if let Some(i) = losses.iter().position(|l| !l.loss.is_finite()) {
            return Err(Error::NonFinite { step, pair: i });
        }
        floored_pairs = losses.iter().filter(|l| l.floored).count();
        trace.push(losses.iter().map(|l| l.loss).sum::<f64>() / losses.len() as f64);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if step == config.epochs_per_iteration {
            break;
        }
        for (p, g) in current.params_mut().iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
    }
    let converged = trace.last() <= trace.first();
    Ok(TrainOutcome {
        policy: current,
        loss_trace: trace,
        converged,
        floored_pairs,
        final_grad_norm: grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neg_log_sigmoid_closed_forms() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_log_sigmoid(2.0) - 0.126_928_011_042_972_6).abs() < 1e-12);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
        assert!(neg_log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn antisymmetric_sum_is_at_least_two_ln2() {
        for d in [-3.0, -0.5, 0.0, 0.1, 4.0] {
            let s = neg_log_sigmoid(d) + neg_log_sigmoid(-d);
            assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-15);
            if d != 0.0 {
                assert!(s > 2.0 * std::f64::consts::LN_2);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DpoConfig::default().validate().is_ok());
        let bad = DpoConfig {
            alpha: 0.0,
            ..DpoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DpoConfig {
            iterations: 0,
            ..DpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
