//! Synthetic captioning world: images are small object sets, captions name
//! those objects, and a fixed two-tower embedder scores image/text
//! relevance by cosine geometry.

mod embed;
mod policy;

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use embed::{TextEmbedding, TwoTowerEmbedder};
pub use policy::{greedy_rollout, LogProbTable, ToyPolicy};

use crate::error::{domain, Error, Result};
use crate::policy::{Prompt, TokenId, Vocabulary};

const OBJECT_NAMES: &[&str] = &[
    "dog", "cat", "car", "tree", "person", "bench", "kite", "boat", "clock", "horse", "pizza",
    "chair", "cup", "bird", "bus", "train", "apple", "bottle", "laptop", "umbrella", "bicycle",
    "sheep", "bowl", "vase",
];

/// Parameters of a generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub num_objects: usize,
    pub num_images: usize,
    pub embed_dim: usize,
    /// Non-object words; they embed to zero. The first one doubles as the
    /// instruction token of every generated prompt.
    pub fillers: Vec<String>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_objects: 16,
            num_images: 64,
            embed_dim: 16,
            fillers: vec!["describe".into(), "the".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub id: String,
    /// Sorted, non-empty.
    pub object_ids: Vec<usize>,
    /// Unit norm.
    pub embedding: Vec<f64>,
    pub caption: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub spec: WorldSpec,
    pub vocab: Vocabulary,
    pub embedder: TwoTowerEmbedder,
    pub images: Vec<ToyImage>,
}

/// One line of the world export file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub object_ids: Vec<usize>,
    pub embedding: Vec<f64>,
    pub caption_tokens: Vec<String>,
}

pub fn object_name(i: usize) -> String {
    OBJECT_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("obj{i}"))
}

/// Convenience wrapper with default embedding dimension and fillers.
pub fn make_world(seed: u64, num_objects: usize, num_images: usize) -> Result<ToyWorld> {
    ToyWorld::generate(&WorldSpec {
        seed,
        num_objects,
        num_images,
        ..WorldSpec::default()
    })
}

impl ToyWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        if spec.num_objects < 2 {
            return Err(domain("a world needs at least two objects"));
        }
        if spec.num_objects > spec.embed_dim {
            return Err(domain(format!(
                "{} objects cannot be orthonormal in dimension {}",
                spec.num_objects, spec.embed_dim
            )));
        }
        let objects: Vec<String> = (0..spec.num_objects).map(object_name).collect();
        let vocab = Vocabulary::new(&objects, &spec.fillers)?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let draws = DMatrix::<f64>::from_fn(spec.embed_dim, spec.num_objects, |_, _| {
            rng.sample(StandardNormal)
        });
        let q = draws.qr().q();
        let image_map: Vec<f64> = q.as_slice().to_vec();
        let embedder = TwoTowerEmbedder::new(spec.embed_dim, image_map, &vocab);

        let mut images = Vec::with_capacity(spec.num_images);
        for i in 0..spec.num_images {
            let k = rng.random_range(1..=3.min(spec.num_objects));
            let mut object_ids = index::sample(&mut rng, spec.num_objects, k).into_vec();
            object_ids.sort_unstable();
            let embedding = embedder.embed_image(&object_ids)?;
            let caption = caption_for(&vocab, &object_ids);
            images.push(ToyImage {
                id: format!("img-{i:04}"),
                object_ids,
                embedding,
                caption,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            vocab,
            embedder,
            images,
        })
    }

    /// One prompt per image, in image order.
    pub fn prompts(&self) -> Vec<Prompt> {
        let instruction: Vec<TokenId> = self
            .spec
            .fillers
            .first()
            .and_then(|f| self.vocab.id(f))
            .into_iter()
            .collect();
        self.images
            .iter()
            .map(|img| Prompt {
                id: img.id.clone(),
                image_embedding: img.embedding.clone(),
                prompt_tokens: instruction.clone(),
            })
            .collect()
    }

    pub fn image(&self, id: &str) -> Option<&ToyImage> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn object_tokens(&self) -> Vec<TokenId> {
        (0..self.vocab.num_objects())
            .map(|o| self.vocab.object_token(o))
            .collect()
    }

    pub fn records(&self) -> Vec<ImageRecord> {
        self.images
            .iter()
            .map(|img| ImageRecord {
                id: img.id.clone(),
                object_ids: img.object_ids.clone(),
                embedding: img.embedding.clone(),
                caption_tokens: self.vocab.decode(&img.caption),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Replaces the images with those read from a world export. Vocabulary and
    /// embedder come from the `WorldSpec`; each record is checked against them.
    pub fn read_jsonl<R: BufRead>(spec: &WorldSpec, input: R) -> Result<Self> {
        let mut world = Self::generate(&WorldSpec {
            num_images: 0,
            ..spec.clone()
        })?;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |e: String| Error::Parse(format!("line {}: {e}", lineno + 1));
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
            if rec.embedding.len() != world.embedder.dim() {
                return Err(at(format!(
                    "embedding has dimension {}, expected {}",
                    rec.embedding.len(),
                    world.embedder.dim()
                )));
            }
            if rec.embedding.iter().any(|x| !x.is_finite()) {
                return Err(at("non-finite embedding value".into()));
            }
            let caption = world
                .vocab
                .encode(&rec.caption_tokens)
                .map_err(|e| at(e.to_string()))?;
            let mut object_ids = rec.object_ids.clone();
            object_ids.sort_unstable();
            object_ids.dedup();
            if object_ids.is_empty() || object_ids.iter().any(|&o| o >= spec.num_objects) {
                return Err(at("object_ids must be non-empty and in range".into()));
            }
            world.images.push(ToyImage {
                id: rec.id,
                object_ids,
                embedding: rec.embedding,
                caption,
            });
        }
        world.spec.num_images = world.images.len();
        Ok(world)
    }

    /// SHA-256 over the world parameters and every image record.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for col in 0..self.embedder.num_objects() {
            for x in self.embedder.object_embedding(col) {
                h.update(x.to_le_bytes());
            }
        }
        for rec in self.records() {
            h.update(serde_json::to_vec(&rec).expect("record serializes"));
        }
        hex::encode(h.finalize())
    }
}

/// Object words joined by the delimiter, terminated by `<eos>`.
fn caption_for(vocab: &Vocabulary, object_ids: &[usize]) -> Vec<TokenId> {
    let mut caption = Vec::with_capacity(object_ids.len() * 2);
    for (i, &o) in object_ids.iter().enumerate() {
        if i > 0 {
            caption.push(vocab.delimiter());
        }
        caption.push(vocab.object_token(o));
    }
    caption.push(vocab.eos());
    caption
}
