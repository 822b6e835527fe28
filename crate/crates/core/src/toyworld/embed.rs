use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::policy::{TokenId, Vocabulary};

/// Output of the text tower.
#[derive(Clone, Debug, PartialEq)]
pub enum TextEmbedding {
    Unit(Vec<f64>),
    /// The sentence contains no token with visual content (only delimiters,
    /// `<eos>`, or filler words). Relevance against any image is taken as 0.
    ZeroSignal,
}

impl TextEmbedding {
    pub fn as_unit(&self) -> Option<&[f64]> {
        match self {
            TextEmbedding::Unit(v) => Some(v),
            TextEmbedding::ZeroSignal => None,
        }
    }
}

/// Fixed two-tower encoder sharing one `dim`-dimensional space.
///
/// The image tower maps an object-indicator vector through a matrix with
/// orthonormal columns (one column per object). The text tower averages
/// per-token embeddings; object words embed to their object's column and
/// every other token embeds to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerEmbedder {
    dim: usize,
    num_objects: usize,
    /// Column-major `dim × num_objects`.
    image_map: Vec<f64>,
    delimiter: TokenId,
    eos: TokenId,
    vocab_size: usize,
}

impl TwoTowerEmbedder {
    pub(crate) fn new(dim: usize, image_map: Vec<f64>, vocab: &Vocabulary) -> Self {
        let num_objects = vocab.num_objects();
        assert_eq!(image_map.len(), dim * num_objects);
        Self {
            dim,
            num_objects,
            image_map,
            delimiter: vocab.delimiter(),
            eos: vocab.eos(),
            vocab_size: vocab.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    /// Column `object` of the image map, which is also the text embedding of
    /// that object's word.
    pub fn object_embedding(&self, object: usize) -> &[f64] {
        &self.image_map[object * self.dim..(object + 1) * self.dim]
    }

    /// Embedding of a single token before averaging (zero for non-object tokens).
    pub fn token_embedding(&self, token: TokenId) -> Vec<f64> {
        if token.index() < self.num_objects {
            self.object_embedding(token.index()).to_vec()
        } else {
            vec![0.0; self.dim]
        }
    }

    pub fn embed_image(&self, object_ids: &[usize]) -> Result<Vec<f64>> {
        if object_ids.is_empty() {
            return Err(domain("image must contain at least one object"));
        }
        let mut v = vec![0.0; self.dim];
        for &o in object_ids {
            if o >= self.num_objects {
                return Err(domain(format!("object id {o} out of range")));
            }
            for (acc, x) in v.iter_mut().zip(self.object_embedding(o)) {
                *acc += x;
            }
        }
        normalize(&mut v);
        Ok(v)
    }

    /// Normalized mean of token embeddings, skipping delimiter and `<eos>`.
    pub fn embed_text(&self, tokens: &[TokenId]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Err(domain("cannot embed an empty token sequence"));
        }
        let mut v = vec![0.0; self.dim];
        let mut count = 0usize;
        for &t in tokens {
            if t.index() >= self.vocab_size {
                return Err(domain(format!("token {t} outside vocabulary")));
            }
            if t == self.delimiter || t == self.eos {
                continue;
            }
            count += 1;
            if t.index() < self.num_objects {
                for (acc, x) in v.iter_mut().zip(self.object_embedding(t.index())) {
                    *acc += x;
                }
            }
        }
        if count == 0 {
            return Ok(TextEmbedding::ZeroSignal);
        }
        for x in &mut v {
            *x /= count as f64;
        }
        if norm(&v) == 0.0 {
            return Ok(TextEmbedding::ZeroSignal);
        }
        normalize(&mut v);
        Ok(TextEmbedding::Unit(v))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}
