//! Step-wise calibrated reward.
//!
//! A sentence `s` generated for image `x_v` is scored by
//!
//! ```text
//! R_T(s) = Π_i P(s_i | x, prefix, s_<i)                 instruction following
//! R_I(s) = max(100 · cos(F_I(x_v), F_T(s)), 0)          image relevance
//! R(s)   = λ · R_I(s) + (1 − λ) · R_T(s)                calibrated reward
//! ```
//!
//! and a response by the sum of its sentence rewards.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::policy::{Policy, Prompt, TokenId};
use crate::toyworld::{TextEmbedding, TwoTowerEmbedder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub instruction_following: f64,
    pub image_relevance: f64,
    pub calibrated: f64,
    #[serde(rename = "lambda")]
    pub lambda_used: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseReward {
    pub per_sentence: Vec<SentenceScore>,
    pub cumulative: f64,
}

/// How token probabilities are combined into `R_T`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Plain product of conditional probabilities.
    #[default]
    Product,
    /// `exp(mean log p)`, removing the bias against long sentences.
    GeometricMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda: f64,
    /// Divide `R_I` by 100 so both terms live on `[0, 1]`.
    pub normalize_image_score: bool,
    pub length_mode: LengthMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            normalize_image_score: false,
            length_mode: LengthMode::Product,
        }
    }
}

/// Log of `R_T`. May be `-inf` when some token has probability zero.
pub fn instruction_following_logprob<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    prefix: &[TokenId],
    sentence: &[TokenId],
) -> Result<f64> {
    if sentence.is_empty() {
        return Err(domain("sentence must contain at least one token"));
    }
    let mut context: Vec<TokenId> = Vec::with_capacity(prefix.len() + sentence.len());
    context.extend_from_slice(prefix);
    let mut total = 0.0;
    for &t in sentence {
        total += policy.token_logprob(prompt, &context, t)?;
        context.push(t);
    }
    Ok(total)
}

/// `R_T`: probability of the sentence given prompt and preceding response.
pub fn instruction_following_score<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    prefix: &[TokenId],
    sentence: &[TokenId],
) -> Result<f64> {
    instruction_following_logprob(policy, prompt, prefix, sentence).map(f64::exp)
}

/// `R_I`: clamped, scaled cosine similarity.
pub fn image_relevance_score(image_embedding: &[f64], text_embedding: &[f64]) -> Result<f64> {
    if image_embedding.len() != text_embedding.len() {
        return Err(domain(format!(
            "embedding dimensions differ: {} vs {}",
            image_embedding.len(),
            text_embedding.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in image_embedding.iter().zip(text_embedding) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if !(nu > 0.0 && nv > 0.0) || !dot.is_finite() || !nu.is_finite() || !nv.is_finite() {
        return Err(domain("image relevance needs finite, non-zero vectors"));
    }
    let cos = (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0);
    Ok((100.0 * cos).max(0.0))
}

/// `R = λ·R_I + (1−λ)·R_T`.
pub fn calibrated_score(image_relevance: f64, instruction_following: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(domain(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * image_relevance + (1.0 - lambda) * instruction_following)
}

pub fn response_reward(scores: Vec<SentenceScore>) -> Result<ResponseReward> {
    if scores.is_empty() {
        return Err(domain("a response has at least one sentence"));
    }
    let cumulative = scores.iter().map(|s| s.calibrated).sum();
    Ok(ResponseReward {
        per_sentence: scores,
        cumulative,
    })
}

/// Anything that assigns a calibrated score to a freshly completed sentence.
pub trait SentenceScorer: Sync {
    fn score(&self, prompt: &Prompt, prefix: &[TokenId], sentence: &[TokenId])
        -> Result<SentenceScore>;
}

/// Scores sentences with a policy (for `R_T`) and the two-tower embedder (for `R_I`).
pub struct CalibratedScorer<'a, P: ?Sized> {
    policy: &'a P,
    embedder: &'a TwoTowerEmbedder,
    config: RewardConfig,
    zero_signal: AtomicUsize,
}

impl<'a, P: Policy + Sync + ?Sized> CalibratedScorer<'a, P> {
    pub fn new(policy: &'a P, embedder: &'a TwoTowerEmbedder, config: RewardConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.lambda) {
            return Err(domain(format!("lambda {} outside [0, 1]", config.lambda)));
        }
        Ok(Self {
            policy,
            embedder,
            config,
            zero_signal: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    /// Sentences with no visual content seen so far (scored with `R_I = 0`).
    pub fn zero_signal_count(&self) -> usize {
        self.zero_signal.load(Ordering::Relaxed)
    }

    /// Relevance of a whole token sequence (sentence or full response).
    /// `None` when the text carries no visual content.
    pub fn relevance(&self, prompt: &Prompt, tokens: &[TokenId]) -> Result<Option<f64>> {
        relevance_of(self.embedder, &prompt.image_embedding, tokens)
    }
}

pub(crate) fn relevance_of(
    embedder: &TwoTowerEmbedder,
    image_embedding: &[f64],
    tokens: &[TokenId],
) -> Result<Option<f64>> {
    match embedder.embed_text(tokens)? {
        TextEmbedding::Unit(t) => image_relevance_score(image_embedding, &t).map(Some),
        TextEmbedding::ZeroSignal => Ok(None),
    }
}

impl<P: Policy + Sync + ?Sized> SentenceScorer for CalibratedScorer<'_, P> {
    fn score(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        sentence: &[TokenId],
    ) -> Result<SentenceScore> {
        let logp = instruction_following_logprob(self.policy, prompt, prefix, sentence)?;
        let instruction_following = match self.config.length_mode {
            LengthMode::Product => logp.exp(),
            LengthMode::GeometricMean => (logp / sentence.len() as f64).exp(),
        };
        let mut image_relevance = match self.relevance(prompt, sentence)? {
            Some(r) => r,
            None => {
                self.zero_signal.fetch_add(1, Ordering::Relaxed);
                0.0
            }
        };
        if self.config.normalize_image_score {
            image_relevance /= 100.0;
        }
        let lambda = self.config.lambda;
        Ok(SentenceScore {
            instruction_following,
            image_relevance,
            calibrated: calibrated_score(image_relevance, instruction_following, lambda)?,
            lambda_used: lambda,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{make_world, ToyPolicy};

    /// Fixed next-token table keyed by prefix length.
    struct Scripted(Vec<Vec<f64>>);

    impl Policy for Scripted {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn next_distribution(&self, _: &Prompt, prefix: &[TokenId]) -> Vec<f64> {
            self.0[prefix.len().min(self.0.len() - 1)].clone()
        }
    }

    fn prompt() -> Prompt {
        Prompt {
            id: "p".into(),
            image_embedding: vec![1.0, 0.0],
            prompt_tokens: vec![],
        }
    }

    #[test]
    fn degenerate_one_token_sentence() {
        let p = Scripted(vec![vec![1.0, 0.0]]);
        let r = instruction_following_score(&p, &prompt(), &[], &[TokenId(0)]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn product_of_two_halves() {
        let p = Scripted(vec![vec![0.5, 0.5]]);
        let r = instruction_following_score(&p, &prompt(), &[], &[TokenId(0), TokenId(1)]).unwrap();
        assert_eq!(r, 0.25);
    }

    #[test]
    fn zero_probability_token_scores_zero() {
        let p = Scripted(vec![vec![1.0, 0.0]]);
        let lp = instruction_following_logprob(&p, &prompt(), &[], &[TokenId(1)]).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
        let r = instruction_following_score(&p, &prompt(), &[], &[TokenId(1)]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn empty_or_unknown_sentence_is_an_error() {
        let p = Scripted(vec![vec![0.5, 0.5]]);
        assert!(instruction_following_score(&p, &prompt(), &[], &[]).is_err());
        assert!(instruction_following_score(&p, &prompt(), &[], &[TokenId(7)]).is_err());
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(image_relevance_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 100.0);
        assert_eq!(image_relevance_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(image_relevance_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert!(image_relevance_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(image_relevance_score(&[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn calibrated_examples() {
        assert_eq!(calibrated_score(30.0, 0.8, 1.0).unwrap(), 30.0);
        assert_eq!(calibrated_score(30.0, 0.8, 0.0).unwrap(), 0.8);
        assert!((calibrated_score(30.0, 0.8, 0.9).unwrap() - 27.08).abs() < 1e-12);
        assert!(calibrated_score(30.0, 0.8, 1.1).is_err());
        assert!(calibrated_score(30.0, 0.8, -0.1).is_err());
    }

    fn score(c: f64) -> SentenceScore {
        SentenceScore {
            instruction_following: 0.0,
            image_relevance: 0.0,
            calibrated: c,
            lambda_used: 0.5,
        }
    }

    #[test]
    fn response_reward_sums() {
        assert_eq!(response_reward(vec![score(5.0), score(3.0)]).unwrap().cumulative, 8.0);
        assert_eq!(response_reward(vec![score(7.25)]).unwrap().cumulative, 7.25);
        assert!(response_reward(vec![]).is_err());
    }

    #[test]
    fn scorer_blends_and_counts_empty_sentences() {
        let w = make_world(1, 4, 4).unwrap();
        let policy = ToyPolicy::random(&w, 1, 1.0);
        let scorer = CalibratedScorer::new(&policy, &w.embedder, RewardConfig::default()).unwrap();
        let prompt = &w.prompts()[0];
        let img = &w.images[0];
        let obj = w.vocab.object_token(img.object_ids[0]);
        let s = scorer.score(prompt, &[], &[obj, w.vocab.delimiter()]).unwrap();
        let expect = 100.0 / (img.object_ids.len() as f64).sqrt();
        assert!((s.image_relevance - expect).abs() < 1e-9);
        assert_eq!(s.calibrated, 0.9 * s.image_relevance + (1.0 - 0.9) * s.instruction_following);

        let empty = scorer.score(prompt, &[], &[w.vocab.delimiter()]).unwrap();
        assert_eq!(empty.image_relevance, 0.0);
        assert_eq!(empty.calibrated, (1.0 - 0.9) * empty.instruction_following);
        assert_eq!(scorer.zero_signal_count(), 1);
    }

    #[test]
    fn normalized_and_geometric_modes() {
        let w = make_world(1, 4, 4).unwrap();
        let policy = ToyPolicy::random(&w, 1, 1.0);
        let prompt = &w.prompts()[0];
        let obj = w.vocab.object_token(w.images[0].object_ids[0]);
        let sentence = [obj, obj, w.vocab.delimiter()];
        let raw = CalibratedScorer::new(&policy, &w.embedder, RewardConfig::default()).unwrap();
        let cfg = RewardConfig {
            normalize_image_score: true,
            length_mode: LengthMode::GeometricMean,
            ..RewardConfig::default()
        };
        let alt = CalibratedScorer::new(&policy, &w.embedder, cfg).unwrap();
        let a = raw.score(prompt, &[], &sentence).unwrap();
        let b = alt.score(prompt, &[], &sentence).unwrap();
        assert!((b.image_relevance * 100.0 - a.image_relevance).abs() < 1e-12);
        assert!((b.instruction_following.powi(3) - a.instruction_following).abs() < 1e-12);
    }
}
