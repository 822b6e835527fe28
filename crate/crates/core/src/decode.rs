//! Sentence-level beam search guided by the calibrated reward.
//!
//! Each live beam proposes candidate sentences with a group-diverse
//! token-level beam search. Every candidate is scored, and only the `top_k`
//! highest and `bottom_k` lowest sentences survive into the next round. Low
//! survivors keep decoding like any other beam, so the finished pool holds
//! both well- and badly-rewarded responses to build preference pairs from.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::policy::{Policy, Prompt, TokenId, Vocabulary};
use crate::prefopt::PreferencePair;
use crate::reward::{response_reward, ResponseReward, SentenceScore, SentenceScorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    /// Token-level beam width inside a sentence, split evenly across groups.
    pub num_beams: usize,
    /// Candidate sentences returned per expanded beam.
    pub num_token_beams: usize,
    pub num_beam_groups: usize,
    pub diversity_penalty: f64,
    /// Budget on prompt plus response tokens.
    pub max_length: usize,
    /// Budget on tokens in one sentence.
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub bottom_k: usize,
    pub delimiter_token: TokenId,
    pub eos_token: TokenId,
    /// Optional cap on sentences per response.
    #[serde(default)]
    pub max_sentences: Option<usize>,
}

impl BeamParams {
    /// 5 beams in 5 groups, 5 returns per expansion, diversity penalty 3.0,
    /// `max_length` 1024, `max_new_tokens` 74, and `top_k = bottom_k = 2`.
    pub fn defaults_for(vocab: &Vocabulary) -> Self {
        Self {
            num_beams: 5,
            num_token_beams: 5,
            num_beam_groups: 5,
            diversity_penalty: 3.0,
            max_length: 1024,
            max_new_tokens: 74,
            top_k: 2,
            bottom_k: 2,
            delimiter_token: vocab.delimiter(),
            eos_token: vocab.eos(),
            max_sentences: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 || self.num_beam_groups == 0 || self.num_token_beams == 0 {
            return Err(domain("beam counts must be positive"));
        }
        if !self.num_beams.is_multiple_of(self.num_beam_groups) {
            return Err(domain(format!(
                "num_beams ({}) must be divisible by num_beam_groups ({})",
                self.num_beams, self.num_beam_groups
            )));
        }
        if !(self.diversity_penalty >= 0.0 && self.diversity_penalty.is_finite()) {
            return Err(domain("diversity_penalty must be finite and non-negative"));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > self.max_length {
            return Err(domain("need 0 < max_new_tokens <= max_length"));
        }
        if self.top_k + self.bottom_k == 0 {
            return Err(domain("top_k + bottom_k must be positive"));
        }
        if self.delimiter_token == self.eos_token {
            return Err(domain("delimiter and eos must differ"));
        }
        if self.max_sentences == Some(0) {
            return Err(domain("max_sentences must be positive"));
        }
        Ok(())
    }

    fn closes_sentence(&self, t: TokenId) -> bool {
        t == self.delimiter_token || t == self.eos_token
    }
}

/// A partial or complete response under construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Beam {
    pub tokens: Vec<TokenId>,
    /// Exclusive end index of each completed sentence.
    pub sentence_boundaries: Vec<usize>,
    pub scores: Vec<SentenceScore>,
    pub cumulative_reward: f64,
    pub finished: bool,
}

impl Beam {
    pub fn root() -> Self {
        Self::default()
    }
}

/// A sentence proposed for a beam.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceCandidate {
    pub tokens: Vec<TokenId>,
    pub token_logprob_sum: f64,
    /// Stopped by a length budget rather than by a delimiter or `<eos>`.
    pub truncated: bool,
}

/// A candidate sentence attached to the beam it extends.
#[derive(Clone, Debug)]
pub struct Candidate<'a> {
    pub parent: &'a Beam,
    pub sentence: SentenceCandidate,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub sentence_boundaries: Vec<usize>,
}

impl Response {
    pub fn sentences(&self) -> impl Iterator<Item = &[TokenId]> + '_ {
        let starts = std::iter::once(0).chain(self.sentence_boundaries.iter().copied());
        starts
            .zip(self.sentence_boundaries.iter().copied())
            .map(move |(a, b)| &self.tokens[a..b])
    }

    /// Splits `tokens` after every delimiter or `<eos>`; a trailing
    /// unterminated run becomes the last sentence.
    pub fn from_tokens(tokens: Vec<TokenId>, delimiter: TokenId, eos: TokenId) -> Self {
        let mut sentence_boundaries = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            if t == delimiter || t == eos {
                sentence_boundaries.push(i + 1);
            }
        }
        if sentence_boundaries.last() != Some(&tokens.len()) && !tokens.is_empty() {
            sentence_boundaries.push(tokens.len());
        }
        Self {
            tokens,
            sentence_boundaries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResponse {
    pub response: Response,
    pub reward: ResponseReward,
}

struct Hyp {
    tokens: Vec<TokenId>,
    logprob: f64,
}

/// Proposes the next sentence for `beam` with group-diverse beam search.
///
/// Groups are expanded in order at every token step. A token's selection
/// score is the hypothesis log-probability plus the token's log-probability,
/// minus `diversity_penalty` times the number of earlier groups that picked
/// the same token at this step. Returned sentences are ranked by their true
/// log-probability, de-duplicated, and cut to `num_token_beams`.
pub fn expand_sentences<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    beam: &Beam,
    params: &BeamParams,
) -> Result<Vec<SentenceCandidate>> {
    if beam.finished {
        return Err(Error::Contract("cannot expand a finished beam".into()));
    }
    let used = prompt.prompt_tokens.len() + beam.tokens.len();
    let cap = params.max_new_tokens.min(params.max_length.saturating_sub(used));
    if cap == 0 {
        return Err(Error::Contract(format!(
            "beam of {} tokens has no length budget left",
            beam.tokens.len()
        )));
    }
    let vocab = policy.vocab_size();
    let groups = params.num_beam_groups;
    let per_group = params.num_beams / groups;

    let mut live: Vec<Vec<Hyp>> = (0..groups)
        .map(|_| {
            vec![Hyp {
                tokens: Vec::new(),
                logprob: 0.0,
            }]
        })
        .collect();
    let mut finished: Vec<SentenceCandidate> = Vec::new();
    let mut context = beam.tokens.clone();

    for _step in 0..cap {
        let mut picked_by_earlier = vec![0u32; vocab];
        for group in live.iter_mut() {
            if group.is_empty() {
                continue;
            }
            // (selection score, true log-prob, hypothesis index, token)
            let mut scored: Vec<(f64, f64, usize, usize)> = Vec::new();
            for (h, hyp) in group.iter().enumerate() {
                context.truncate(beam.tokens.len());
                context.extend_from_slice(&hyp.tokens);
                let dist = policy.next_distribution(prompt, &context);
                let before = scored.len();
                for (v, &p) in dist.iter().enumerate() {
                    if p > 0.0 && p.is_finite() {
                        let lp = hyp.logprob + p.ln();
                        let sel = lp - params.diversity_penalty * picked_by_earlier[v] as f64;
                        scored.push((sel, lp, h, v));
                    }
                }
                if scored.len() == before {
                    return Err(Error::Generation {
                        beam: format!(
                            "prompt {} at response length {}",
                            prompt.id,
                            context.len()
                        ),
                        reason: "policy assigns no positive probability to any token".into(),
                    });
                }
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
            scored.truncate(per_group);

            let mut next = Vec::with_capacity(per_group);
            let mut picked = vec![false; vocab];
            for &(_, lp, h, v) in &scored {
                picked[v] = true;
                let token = TokenId::from(v);
                let mut tokens = group[h].tokens.clone();
                tokens.push(token);
                if params.closes_sentence(token) || tokens.len() == cap {
                    finished.push(SentenceCandidate {
                        truncated: !params.closes_sentence(token),
                        tokens,
                        token_logprob_sum: lp,
                    });
                } else {
                    next.push(Hyp { tokens, logprob: lp });
                }
            }
            for (count, was_picked) in picked_by_earlier.iter_mut().zip(picked) {
                *count += was_picked as u32;
            }
            *group = next;
        }
        if live.iter().all(Vec::is_empty) {
            break;
        }
    }

    finished.sort_by(|a, b| {
        b.token_logprob_sum
            .partial_cmp(&a.token_logprob_sum)
            .unwrap_or(Ordering::Equal)
    });
    let mut out: Vec<SentenceCandidate> = Vec::with_capacity(params.num_token_beams);
    for cand in finished {
        if out.len() == params.num_token_beams {
            break;
        }
        if !out.iter().any(|c| c.tokens == cand.tokens) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Indices of the `top_k` largest and `bottom_k` smallest values, returned in
/// ascending index order. Ties favour the earlier index. Everything is kept
/// when there are no more than `top_k + bottom_k` values.
pub fn select_extremes(values: &[f64], top_k: usize, bottom_k: usize) -> Vec<usize> {
    let n = values.len();
    if n <= top_k + bottom_k {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal));
    let mut keep = vec![false; n];
    for &i in &order[..top_k] {
        keep[i] = true;
    }
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut taken = 0;
    for &i in &order {
        if taken == bottom_k {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            taken += 1;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Scores every candidate sentence and keeps the reward extremes.
pub fn beam_step<S: SentenceScorer + ?Sized>(
    prompt: &Prompt,
    candidates: &[Candidate<'_>],
    scorer: &S,
    params: &BeamParams,
) -> Result<Vec<Beam>> {
    if candidates.is_empty() {
        return Err(Error::Contract("beam_step needs at least one candidate".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| scorer.score(prompt, &c.parent.tokens, &c.sentence.tokens))
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = scores.iter().map(|s| s.calibrated).collect();
    let keep = select_extremes(&rewards, params.top_k, params.bottom_k);

    Ok(keep
        .into_iter()
        .map(|i| {
            let c = &candidates[i];
            let mut beam = c.parent.clone();
            beam.tokens.extend_from_slice(&c.sentence.tokens);
            beam.sentence_boundaries.push(beam.tokens.len());
            beam.scores.push(scores[i]);
            beam.cumulative_reward += scores[i].calibrated;
            let ended = c.sentence.tokens.last() == Some(&params.eos_token);
            let out_of_room =
                prompt.prompt_tokens.len() + beam.tokens.len() >= params.max_length;
            let enough = params
                .max_sentences
                .is_some_and(|m| beam.sentence_boundaries.len() >= m);
            beam.finished = ended || c.sentence.truncated || out_of_room || enough;
            beam
        })
        .collect())
}

/// Runs sentence-level beam search to completion and returns every finished
/// response, best cumulative reward first (ties keep completion order).
pub fn generate_responses<P, S>(
    policy: &P,
    prompt: &Prompt,
    scorer: &S,
    params: &BeamParams,
) -> Result<Vec<RankedResponse>>
where
    P: Policy + ?Sized,
    S: SentenceScorer + ?Sized,
{
    params.validate()?;
    if prompt.prompt_tokens.len() >= params.max_length {
        return Err(domain(format!(
            "prompt {} leaves no room under max_length {}",
            prompt.id, params.max_length
        )));
    }
    if let Some(t) = prompt
        .prompt_tokens
        .iter()
        .find(|t| t.index() >= policy.vocab_size())
    {
        return Err(domain(format!("prompt {} has unknown token {t}", prompt.id)));
    }

    let mut live = vec![Beam::root()];
    let mut done: Vec<Beam> = Vec::new();
    while !live.is_empty() {
        let survivors = {
            let mut candidates = Vec::new();
            for (i, beam) in live.iter().enumerate() {
                let sentences = expand_sentences(policy, prompt, beam, params).map_err(|e| match e {
                    Error::Generation { reason, .. } => Error::Generation {
                        beam: format!(
                            "prompt {} beam {i} ({} tokens)",
                            prompt.id,
                            beam.tokens.len()
                        ),
                        reason,
                    },
                    other => other,
                })?;
                candidates.extend(sentences.into_iter().map(|sentence| Candidate {
                    parent: beam,
                    sentence,
                }));
            }
            beam_step(prompt, &candidates, scorer, params)?
        };
        live.clear();
        for beam in survivors {
            if beam.finished {
                done.push(beam);
            } else {
                live.push(beam);
            }
        }
    }

    done.sort_by(|a, b| {
        b.cumulative_reward
            .partial_cmp(&a.cumulative_reward)
            .unwrap_or(Ordering::Equal)
    });
    done.into_iter()
        .map(|b| {
            Ok(RankedResponse {
                response: Response {
                    tokens: b.tokens,
                    sentence_boundaries: b.sentence_boundaries,
                },
                reward: response_reward(b.scores)?,
            })
        })
        .collect()
}

/// Rescores a response sentence by sentence from scratch.
pub fn rescore<S: SentenceScorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    response: &Response,
) -> Result<ResponseReward> {
    let mut scores = Vec::with_capacity(response.sentence_boundaries.len());
    let mut start = 0;
    for &end in &response.sentence_boundaries {
        scores.push(scorer.score(prompt, &response.tokens[..start], &response.tokens[start..end])?);
        start = end;
    }
    response_reward(scores)
}

/// Highest- and lowest-reward responses of a ranked list.
///
/// The rejected response is the lowest-ranked one whose tokens differ from
/// the chosen response. Returns `None` when no such response exists, i.e. the
/// prompt carries no preference signal.
pub fn select_preference_pair(
    prompt: &Prompt,
    ranked: &[RankedResponse],
    iteration: usize,
) -> Option<PreferencePair> {
    let chosen = ranked.first()?;
    let rejected = ranked
        .iter()
        .rev()
        .find(|r| r.response.tokens != chosen.response.tokens)?;
    Some(PreferencePair {
        prompt: prompt.clone(),
        chosen: chosen.response.clone(),
        rejected: rejected.response.clone(),
        chosen_reward: chosen.reward.cumulative,
        rejected_reward: rejected.reward.cumulative,
        chosen_scores: chosen.reward.per_sentence.clone(),
        rejected_scores: rejected.reward.per_sentence.clone(),
        iteration,
        tie: chosen.reward.cumulative == rejected.reward.cumulative,
    })
}
