//! JSON Lines prompt datasets: `{id, image_embedding, prompt_tokens}` per line.

use std::io::{BufRead, Write};
use std::path::Path;

use csr_core::{Prompt, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub image_embedding: Vec<f64>,
    pub prompt_tokens: Vec<String>,
}

/// Parses and validates a prompt dataset. Errors carry the 1-based line number.
pub fn read_prompts<R: BufRead>(input: R, vocab: &Vocabulary, dim: usize) -> Result<Vec<Prompt>, CliError> {
    let mut prompts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::Data(format!("line {}: {msg}", i + 1));
        let rec: PromptRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if rec.image_embedding.len() != dim {
            return Err(at(format!(
                "image_embedding has dimension {}, expected {dim}",
                rec.image_embedding.len()
            )));
        }
        if rec.image_embedding.iter().any(|x| !x.is_finite()) {
            return Err(at("image_embedding holds a non-finite value".into()));
        }
        if rec.image_embedding.iter().all(|&x| x == 0.0) {
            return Err(at("image_embedding is the zero vector".into()));
        }
        let prompt_tokens = vocab.encode(&rec.prompt_tokens).map_err(|e| at(e.to_string()))?;
        prompts.push(Prompt {
            id: rec.id,
            image_embedding: rec.image_embedding,
            prompt_tokens,
        });
    }
    if prompts.is_empty() {
        return Err(CliError::Data("dataset has no records".into()));
    }
    Ok(prompts)
}

pub fn ingest(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<Vec<Prompt>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_prompts(std::io::BufReader::new(file), vocab, dim)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_prompts<W: Write>(mut out: W, prompts: &[Prompt], vocab: &Vocabulary) -> Result<(), CliError> {
    for p in prompts {
        let rec = PromptRecord {
            id: p.id.clone(),
            image_embedding: p.image_embedding.clone(),
            prompt_tokens: vocab.decode(&p.prompt_tokens),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| CliError::Runtime(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
