use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::ToyWorld;
use crate::error::{domain, Result};
use crate::policy::{Policy, Prompt, TokenId};

/// Relative slack under which two bucket scores count as tied.
const BUCKET_TIE: f64 = 1e-9;

/// Tabular softmax policy.
///
/// The context of a step is `(bucket, previous token)`, where the bucket is the
/// object whose embedding is closest to the prompt's image embedding and the
/// previous token is `BOS` at the start of the response. Parameters are one
/// logit row per context.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPolicy {
    vocab_size: usize,
    num_buckets: usize,
    dim: usize,
    /// Row-major `num_buckets × dim`.
    bucket_keys: Vec<f64>,
    /// Row-major `num_contexts × vocab_size`.
    params: Vec<f64>,
}

impl ToyPolicy {
    /// Gaussian logits with standard deviation `init_scale`.
    pub fn random(world: &ToyWorld, seed: u64, init_scale: f64) -> Self {
        let mut policy = Self::uniform(world);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for p in &mut policy.params {
            let z: f64 = rng.sample(StandardNormal);
            *p = init_scale * z;
        }
        policy
    }

    /// All logits zero.
    pub fn uniform(world: &ToyWorld) -> Self {
        let num_buckets = world.embedder.num_objects();
        let dim = world.embedder.dim();
        let mut bucket_keys = Vec::with_capacity(num_buckets * dim);
        for o in 0..num_buckets {
            bucket_keys.extend_from_slice(world.embedder.object_embedding(o));
        }
        let vocab_size = world.vocab.len();
        Self {
            vocab_size,
            num_buckets,
            dim,
            bucket_keys,
            params: vec![0.0; num_buckets * (vocab_size + 1) * vocab_size],
        }
    }

    /// Rebuilds a policy from raw tables, e.g. when loading a checkpoint.
    pub fn from_parts(
        vocab_size: usize,
        num_buckets: usize,
        dim: usize,
        bucket_keys: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if vocab_size == 0 || num_buckets == 0 || dim == 0 {
            return Err(domain("policy dimensions must be positive"));
        }
        if bucket_keys.len() != num_buckets * dim {
            return Err(domain(format!(
                "expected {} bucket key values, got {}",
                num_buckets * dim,
                bucket_keys.len()
            )));
        }
        let expected = num_buckets * (vocab_size + 1) * vocab_size;
        if params.len() != expected {
            return Err(domain(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().chain(&bucket_keys).any(|x| !x.is_finite()) {
            return Err(domain("policy tables must be finite"));
        }
        Ok(Self {
            vocab_size,
            num_buckets,
            dim,
            bucket_keys,
            params,
        })
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    /// Row-major `num_buckets × embed_dim`.
    pub fn bucket_keys(&self) -> &[f64] {
        &self.bucket_keys
    }

    pub fn num_contexts(&self) -> usize {
        self.num_buckets * (self.vocab_size + 1)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    /// Nearest object to the image embedding; ties go to the lower index.
    pub fn bucket(&self, image_embedding: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for b in 0..self.num_buckets {
            let key = &self.bucket_keys[b * self.dim..(b + 1) * self.dim];
            let s: f64 = key.iter().zip(image_embedding).map(|(k, x)| k * x).sum();
            if b == 0 || s > best_score + BUCKET_TIE * best_score.abs().max(1.0) {
                best = b;
                best_score = s;
            }
        }
        best
    }

    pub fn context_for_bucket(&self, bucket: usize, prev: Option<TokenId>) -> usize {
        let prev = prev.map_or(self.vocab_size, TokenId::index);
        bucket * (self.vocab_size + 1) + prev
    }

    pub fn context(&self, prompt: &Prompt, prefix: &[TokenId]) -> usize {
        self.context_for_bucket(self.bucket(&prompt.image_embedding), prefix.last().copied())
    }

    pub fn logits(&self, context: usize) -> &[f64] {
        &self.params[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    /// Log-softmax of every context row, for repeated lookups while the
    /// parameters are fixed.
    pub fn log_probs(&self) -> LogProbTable {
        let v = self.vocab_size;
        let mut logp = Vec::with_capacity(self.params.len());
        let mut probs = Vec::with_capacity(self.params.len());
        for row in self.params.chunks_exact(v) {
            let lse = log_sum_exp(row);
            for &x in row {
                let lp = x - lse;
                logp.push(lp);
                probs.push(lp.exp());
            }
        }
        LogProbTable {
            vocab_size: v,
            logp,
            probs,
        }
    }

    /// SHA-256 of the parameter bytes (little-endian IEEE-754).
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.params {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Policy for ToyPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64> {
        softmax(self.logits(self.context(prompt, prefix)))
    }
}

/// Snapshot of per-context log-probabilities.
#[derive(Clone, Debug)]
pub struct LogProbTable {
    vocab_size: usize,
    logp: Vec<f64>,
    probs: Vec<f64>,
}

impl LogProbTable {
    pub fn logprob(&self, context: usize, token: TokenId) -> f64 {
        self.logp[context * self.vocab_size + token.index()]
    }

    pub fn probs(&self, context: usize) -> &[f64] {
        &self.probs[context * self.vocab_size..(context + 1) * self.vocab_size]
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Argmax decoding until `<eos>` or until prompt plus response reach `max_length`.
pub fn greedy_rollout<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    eos: TokenId,
    max_length: usize,
) -> Vec<TokenId> {
    let budget = max_length.saturating_sub(prompt.prompt_tokens.len());
    let mut out = Vec::new();
    while out.len() < budget {
        let dist = policy.next_distribution(prompt, &out);
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        let t = TokenId::from(best);
        out.push(t);
        if t == eos {
            break;
        }
    }
    out
}
