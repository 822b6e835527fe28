//! Token, vocabulary and prompt types shared by every module, plus the
//! [`Policy`] trait that decoding and reward scoring are written against.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Index of a token in a [`Vocabulary`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Closed token inventory with the two structural tokens the decoder needs.
///
/// Object words occupy ids `0..num_objects`; they are the only tokens the
/// hallucination metrics look at.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_objects: usize,
    delimiter: TokenId,
    eos: TokenId,
}

impl Vocabulary {
    pub const DELIMITER: &'static str = ".";
    pub const EOS: &'static str = "<eos>";

    /// Builds `objects ++ fillers ++ [".", "<eos>"]`.
    pub fn new(objects: &[String], fillers: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = objects.to_vec();
        tokens.extend(fillers.iter().cloned());
        tokens.push(Self::DELIMITER.to_string());
        tokens.push(Self::EOS.to_string());
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId::from(i)).is_some() {
                return Err(domain(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        let n = tokens.len();
        Ok(Self {
            tokens,
            index,
            num_objects: objects.len(),
            delimiter: TokenId::from(n - 2),
            eos: TokenId::from(n - 1),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn delimiter(&self) -> TokenId {
        self.delimiter
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn is_object(&self, t: TokenId) -> bool {
        t.index() < self.num_objects
    }

    pub fn object_token(&self, object: usize) -> TokenId {
        debug_assert!(object < self.num_objects);
        TokenId::from(object)
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.tokens.len()
    }

    pub fn token(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| domain(format!("unknown token {:?}", w.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&t| self.token(t).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|t| !self.contains(**t)) {
            Some(t) => Err(domain(format!(
                "token {t} outside vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

/// An (image, instruction) input. The image is carried as its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub image_embedding: Vec<f64>,
    pub prompt_tokens: Vec<TokenId>,
}

/// Autoregressive categorical model over a fixed vocabulary.
pub trait Policy {
    fn vocab_size(&self) -> usize;

    /// Distribution of the next response token given the prompt and the
    /// response generated so far.
    fn next_distribution(&self, prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64>;

    /// `ln P(token | prompt, prefix)`; `-inf` for zero-probability tokens.
    fn token_logprob(&self, prompt: &Prompt, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        if token.index() >= self.vocab_size() {
            return Err(domain(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(self.next_distribution(prompt, prefix)[token.index()].ln())
    }

    /// `Σ ln P(y_i | prompt, y_<i)`, accumulated token by token.
    fn sequence_logprob(&self, prompt: &Prompt, response: &[TokenId]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..response.len() {
            total += self.token_logprob(prompt, &response[..i], response[i])?;
        }
        Ok(total)
    }
}
