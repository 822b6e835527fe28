//! Hallucination and alignment metrics.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::policy::{Policy, TokenId};
use crate::prefopt::{IterationArtifacts, PreferencePair};
use crate::reward::relevance_of;
use crate::toyworld::{greedy_rollout, ToyWorld, TwoTowerEmbedder};

/// Number of histogram bins over `[0, 100]`.
pub const RELEVANCE_BINS: usize = 20;
pub const RELEVANCE_BIN_WIDTH: f64 = 100.0 / RELEVANCE_BINS as f64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChairResult {
    /// Hallucinated mentions over all mentions.
    pub chair_i: f64,
    /// Captions with a hallucination over all captions.
    pub chair_s: f64,
    pub hallucinated: usize,
    pub mentioned: usize,
    pub captions_with_hallucination: usize,
    pub total_captions: usize,
}

/// Object-hallucination rates of `captions` against per-image object sets.
///
/// A caption mentions every distinct `object_vocab` token it contains. A
/// mention is hallucinated when the object is absent from that caption's
/// ground-truth set.
pub fn chair(
    captions: &[Vec<TokenId>],
    ground_truth: &[BTreeSet<TokenId>],
    object_vocab: &BTreeSet<TokenId>,
) -> Result<ChairResult> {
    if captions.is_empty() {
        return Err(domain("empty caption corpus"));
    }
    if captions.len() != ground_truth.len() {
        return Err(domain(format!(
            "{} captions but {} ground-truth sets",
            captions.len(),
            ground_truth.len()
        )));
    }
    let per_caption: Vec<(usize, usize)> = captions
        .par_iter()
        .zip(ground_truth)
        .map(|(caption, truth)| {
            let mentioned: BTreeSet<TokenId> =
                caption.iter().copied().filter(|t| object_vocab.contains(t)).collect();
            let hallucinated = mentioned.iter().filter(|t| !truth.contains(t)).count();
            (mentioned.len(), hallucinated)
        })
        .collect();
    let mentioned: usize = per_caption.iter().map(|c| c.0).sum();
    let hallucinated: usize = per_caption.iter().map(|c| c.1).sum();
    let captions_with_hallucination = per_caption.iter().filter(|c| c.1 > 0).count();
    let total_captions = captions.len();
    Ok(ChairResult {
        chair_i: if mentioned == 0 {
            0.0
        } else {
            hallucinated as f64 / mentioned as f64
        },
        chair_s: captions_with_hallucination as f64 / total_captions as f64,
        hallucinated,
        mentioned,
        captions_with_hallucination,
        total_captions,
    })
}

/// Greedy captions of every image in `world`.
pub fn greedy_captions<P: Policy + Sync + ?Sized>(
    policy: &P,
    world: &ToyWorld,
    max_length: usize,
) -> Vec<Vec<TokenId>> {
    world
        .prompts()
        .par_iter()
        .map(|p| greedy_rollout(policy, p, world.vocab.eos(), max_length))
        .collect()
}

/// CHAIR of greedy captions of every image in `world`.
pub fn greedy_chair<P: Policy + Sync + ?Sized>(
    policy: &P,
    world: &ToyWorld,
    max_length: usize,
) -> Result<ChairResult> {
    let captions = greedy_captions(policy, world, max_length);
    let truth: Vec<BTreeSet<TokenId>> = world
        .images
        .iter()
        .map(|img| img.object_ids.iter().map(|&o| world.vocab.object_token(o)).collect())
        .collect();
    let objects: BTreeSet<TokenId> = world.object_tokens().into_iter().collect();
    chair(&captions, &truth, &objects)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SideStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Counts per bin of width [`RELEVANCE_BIN_WIDTH`]; 100 lands in the last bin.
    pub histogram: Vec<usize>,
}

impl SideStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut histogram = vec![0; RELEVANCE_BINS];
        for &v in values {
            let bin = ((v / RELEVANCE_BIN_WIDTH).floor().max(0.0) as usize).min(RELEVANCE_BINS - 1);
            histogram[bin] += 1;
        }
        Self {
            mean,
            std: var.sqrt(),
            histogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelevanceStats {
    pub chosen: SideStats,
    pub rejected: SideStats,
    /// `chosen.mean − rejected.mean`.
    pub gap: f64,
    pub pairs: usize,
    /// Responses with no visual content, scored 0.
    pub zero_signal: usize,
}

/// Image relevance of whole chosen and rejected responses.
pub fn relevance_stats(pairs: &[PreferencePair], embedder: &TwoTowerEmbedder) -> Result<RelevanceStats> {
    if pairs.is_empty() {
        return Err(domain("no preference pairs"));
    }
    let scored: Vec<[Option<f64>; 2]> = pairs
        .par_iter()
        .map(|p| {
            let img = &p.prompt.image_embedding;
            Ok([
                relevance_of(embedder, img, &p.chosen.tokens)?,
                relevance_of(embedder, img, &p.rejected.tokens)?,
            ])
        })
        .collect::<Result<_>>()?;
    let zero_signal = scored.iter().flatten().filter(|s| s.is_none()).count();
    let side = |i: usize| -> Vec<f64> { scored.iter().map(|s| s[i].unwrap_or(0.0)).collect() };
    let chosen = SideStats::from_values(&side(0));
    let rejected = SideStats::from_values(&side(1));
    Ok(RelevanceStats {
        gap: chosen.mean - rejected.mean,
        chosen,
        rejected,
        pairs: pairs.len(),
        zero_signal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardTrackRow {
    pub iteration: usize,
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub pairs: usize,
    pub ties: usize,
    /// Every pair in the iteration is a tie.
    pub tie_warning: bool,
    /// Every pair has chosen ≥ rejected.
    pub ordering_holds: bool,
}

/// Mean chosen and rejected rewards of one iteration, summed from the
/// per-sentence scores rather than the cached totals.
pub fn track_iteration(iteration: usize, pairs: &[PreferencePair]) -> Result<RewardTrackRow> {
    if pairs.is_empty() {
        return Err(domain(format!("iteration {iteration} has no pairs")));
    }
    let total = |s: &[crate::reward::SentenceScore]| s.iter().map(|x| x.calibrated).sum::<f64>();
    let rewards: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| (total(&p.chosen_scores), total(&p.rejected_scores)))
        .collect();
    let n = pairs.len() as f64;
    let ties = rewards.iter().filter(|(c, r)| c == r).count();
    Ok(RewardTrackRow {
        iteration,
        mean_chosen_reward: rewards.iter().map(|r| r.0).sum::<f64>() / n,
        mean_rejected_reward: rewards.iter().map(|r| r.1).sum::<f64>() / n,
        pairs: pairs.len(),
        ties,
        tie_warning: ties == pairs.len(),
        ordering_holds: rewards.iter().all(|(c, r)| c >= r),
    })
}

pub fn reward_track(artifacts: &[IterationArtifacts]) -> Result<Vec<RewardTrackRow>> {
    if artifacts.is_empty() {
        return Err(domain("no iterations to track"));
    }
    artifacts
        .iter()
        .map(|a| track_iteration(a.iteration, &a.pairs))
        .collect()
}
