use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_iteration, DpoConfig, PreferencePair};
use crate::decode::{generate_responses, select_preference_pair, BeamParams};
use crate::error::{domain, Error, Result};
use crate::eval::{relevance_stats, RelevanceStats};
use crate::policy::Prompt;
use crate::reward::{CalibratedScorer, RewardConfig};
use crate::toyworld::{ToyPolicy, TwoTowerEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrConfig {
    pub beam: BeamParams,
    pub dpo: DpoConfig,
    pub reward: RewardConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub relevance: RelevanceStats,
    pub ties: usize,
    /// Sentences scored with no visual content.
    pub zero_signal_sentences: usize,
    pub floored_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Everything produced by one generate-then-train round.
#[derive(Clone, Debug)]
pub struct IterationArtifacts {
    /// 1-based.
    pub iteration: usize,
    /// Hash of the frozen reference used for this round.
    pub reference_hash: String,
    /// Policy after training.
    pub policy: ToyPolicy,
    pub policy_hash: String,
    /// Preference data, one entry per prompt that produced a pair, in prompt order.
    pub pairs: Vec<PreferencePair>,
    /// Ids of prompts whose responses were all identical.
    pub skipped_prompts: Vec<String>,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub metrics: IterationMetrics,
}

/// Alternates preference generation and DPO for `config.dpo.iterations`
/// rounds over the same prompts. Round `t` scores and trains against the
/// policy as it stood at the end of round `t − 1` (the seed for `t = 1`).
///
/// Tie pairs are recorded but not trained on. A round in which no prompt
/// yields a non-tie pair fails with [`Error::NoSignal`].
pub fn csr_run(
    seed_policy: &ToyPolicy,
    prompts: &[Prompt],
    embedder: &TwoTowerEmbedder,
    config: &CsrConfig,
) -> Result<Vec<IterationArtifacts>> {
    if prompts.is_empty() {
        return Err(domain("no prompts to train on"));
    }
    config.dpo.validate()?;
    config.beam.validate()?;

    let mut current = seed_policy.clone();
    let mut previous_hash = seed_policy.param_hash();
    let mut out = Vec::with_capacity(config.dpo.iterations);

    for t in 1..=config.dpo.iterations {
        let reference = current.clone();
        let reference_hash = reference.param_hash();
        assert_eq!(reference_hash, previous_hash, "reference must be last round's policy");

        let scorer = CalibratedScorer::new(&reference, embedder, config.reward)?;
        let outcomes: Vec<Option<PreferencePair>> = prompts
            .par_iter()
            .map(|prompt| {
                let ranked = generate_responses(&reference, prompt, &scorer, &config.beam)?;
                Ok(select_preference_pair(prompt, &ranked, t))
            })
            .collect::<Result<_>>()?;

        let mut pairs = Vec::with_capacity(prompts.len());
        let mut skipped_prompts = Vec::new();
        for (prompt, outcome) in prompts.iter().zip(outcomes) {
            match outcome {
                Some(pair) => pairs.push(pair),
                None => skipped_prompts.push(prompt.id.clone()),
            }
        }
        let ties = pairs.iter().filter(|p| p.tie).count();
        let trainable: Vec<PreferencePair> = pairs.iter().filter(|p| !p.tie).cloned().collect();
        if trainable.is_empty() {
            return Err(Error::NoSignal {
                iteration: t,
                skipped: skipped_prompts.len(),
                ties,
            });
        }

        let trained = train_iteration(&current, &reference, &trainable, &config.dpo)?;
        debug_assert_eq!(reference.param_hash(), reference_hash);

        let n = pairs.len() as f64;
        let metrics = IterationMetrics {
            mean_chosen_reward: pairs.iter().map(|p| p.chosen_reward).sum::<f64>() / n,
            mean_rejected_reward: pairs.iter().map(|p| p.rejected_reward).sum::<f64>() / n,
            relevance: relevance_stats(&pairs, embedder)?,
            ties,
            zero_signal_sentences: scorer.zero_signal_count(),
            floored_pairs: trained.floored_pairs,
            initial_loss: trained.loss_trace[0],
            final_loss: *trained.loss_trace.last().expect("trace is non-empty"),
        };

        current = trained.policy;
        previous_hash = current.param_hash();
        out.push(IterationArtifacts {
            iteration: t,
            reference_hash,
            policy: current.clone(),
            policy_hash: previous_hash.clone(),
            pairs,
            skipped_prompts,
            loss_trace: trained.loss_trace,
            converged: trained.converged,
            metrics,
        });
    }
    Ok(out)
}
