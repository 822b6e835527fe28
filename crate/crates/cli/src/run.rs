//! End-to-end runs and the artifact tree they leave behind.
//!
//! ```text
//! <out>/config.toml
//! <out>/manifest.json
//! <out>/preferences_<t>.jsonl     one per iteration
//! <out>/checkpoint_<t>            one per iteration
//! <out>/metrics/{rewards,relevance,chair,training,iterations}.csv
//! ```
//!
//! Everything except `manifest.json` is a pure function of the config.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use csr_core::decode::{rescore, Response};
use csr_core::eval::{greedy_chair, reward_track, track_iteration, ChairResult, RelevanceStats, RewardTrackRow};
use csr_core::prefopt::checkpoint::Checkpoint;
use csr_core::prefopt::{csr_run, IterationArtifacts, PreferencePair};
use csr_core::reward::{CalibratedScorer, SentenceScore};
use csr_core::toyworld::{ToyPolicy, ToyWorld};
use csr_core::{Prompt, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::ingest;
use crate::CliError;

/// Package version plus `git describe` output when built from a checkout.
pub fn version() -> String {
    match option_env!("CSR_GIT_DESCRIBE") {
        Some(d) => format!("csr-cli {} ({d})", env!("CARGO_PKG_VERSION")),
        None => format!("csr-cli {}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidedScores {
    pub chosen: Vec<SentenceScore>,
    pub rejected: Vec<SentenceScore>,
}

/// One line of `preferences_<t>.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt_id: String,
    pub chosen_tokens: Vec<String>,
    pub rejected_tokens: Vec<String>,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub per_sentence_scores: SidedScores,
}

impl PreferenceRecord {
    pub fn from_pair(pair: &PreferencePair, vocab: &Vocabulary) -> Self {
        Self {
            prompt_id: pair.prompt.id.clone(),
            chosen_tokens: vocab.decode(&pair.chosen.tokens),
            rejected_tokens: vocab.decode(&pair.rejected.tokens),
            chosen_reward: pair.chosen_reward,
            rejected_reward: pair.rejected_reward,
            per_sentence_scores: SidedScores {
                chosen: pair.chosen_scores.clone(),
                rejected: pair.rejected_scores.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub world_fingerprint: String,
    pub seed_policy_hash: String,
    pub files: Vec<String>,
    pub created_unix: u64,
}

/// World, prompts and seed policy a config describes.
pub struct Setup {
    pub world: ToyWorld,
    pub prompts: Vec<Prompt>,
    pub seed_policy: ToyPolicy,
}

pub fn setup(config: &RunConfig) -> Result<Setup, CliError> {
    config.validate()?;
    let world = ToyWorld::generate(&config.world_spec()).map_err(|e| CliError::Config(e.to_string()))?;
    let prompts = match &config.dataset {
        Some(path) => ingest(path, &world.vocab, world.embedder.dim())?,
        None => world.prompts(),
    };
    if prompts.is_empty() {
        return Err(CliError::Config("no prompts: set num_images > 0 or a dataset".into()));
    }
    let seed_policy = ToyPolicy::random(&world, config.seed, config.init_scale);
    Ok(Setup {
        world,
        prompts,
        seed_policy,
    })
}

pub struct RunOutcome {
    pub artifacts: Vec<IterationArtifacts>,
    pub rewards: Vec<RewardTrackRow>,
    /// Greedy CHAIR of the seed policy followed by each iteration's policy.
    pub chair: Vec<ChairResult>,
    pub files: Vec<PathBuf>,
}

pub fn preferences_name(t: usize) -> String {
    format!("preferences_{t}.jsonl")
}

pub fn checkpoint_name(t: usize) -> String {
    format!("checkpoint_{t}")
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Refused(out.to_path_buf()));
        }
        if non_empty {
            // Drop stale per-iteration files from an earlier, longer run.
            for entry in fs::read_dir(out)? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("preferences_") || name.starts_with("checkpoint_") {
                    fs::remove_file(entry.path())?;
                }
            }
        }
    }
    fs::create_dir_all(out.join("metrics"))?;
    Ok(())
}

struct Writer {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        fs::write(&path, bytes)?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }

    fn csv<F>(&mut self, rel: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        fill(&mut w)?;
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.put(rel, &bytes)
    }
}

fn relevance_rows(w: &mut csv::Writer<Vec<u8>>, t: usize, r: &RelevanceStats) -> Result<(), csv::Error> {
    for (side, s) in [("chosen", &r.chosen), ("rejected", &r.rejected)] {
        let mut row = vec![t.to_string(), side.to_string(), s.mean.to_string(), s.std.to_string()];
        row.extend(s.histogram.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    Ok(())
}

/// Runs the full loop and writes the artifact tree under `config.out`.
pub fn run(config: &RunConfig, force: bool) -> Result<RunOutcome, CliError> {
    let Setup {
        world,
        prompts,
        seed_policy,
    } = setup(config)?;
    prepare_out_dir(&config.out, force)?;
    let csr = config.csr_config(&world.vocab);
    let artifacts = csr_run(&seed_policy, &prompts, &world.embedder, &csr)?;
    let rewards = reward_track(&artifacts)?;

    let mut chair = Vec::with_capacity(artifacts.len() + 1);
    if !world.images.is_empty() {
        chair.push(greedy_chair(&seed_policy, &world, config.max_length)?);
        for a in &artifacts {
            chair.push(greedy_chair(&a.policy, &world, config.max_length)?);
        }
    }

    let hash = config.hash();
    let mut out = Writer {
        root: config.out.clone(),
        files: Vec::new(),
    };
    out.put("config.toml", config.to_toml().as_bytes())?;
    for a in &artifacts {
        let mut buf = Vec::new();
        for pair in &a.pairs {
            serde_json::to_writer(&mut buf, &PreferenceRecord::from_pair(pair, &world.vocab))
                .map_err(|e| CliError::Runtime(e.into()))?;
            buf.push(b'\n');
        }
        out.put(&preferences_name(a.iteration), &buf)?;
        let ckpt = Checkpoint {
            seed: config.seed,
            iteration: a.iteration,
            config_hash: hash.clone(),
            policy: a.policy.clone(),
        };
        out.put(&checkpoint_name(a.iteration), ckpt.to_text().as_bytes())?;
    }

    out.csv("metrics/rewards.csv", |w| {
        w.write_record([
            "iteration",
            "mean_chosen_reward",
            "mean_rejected_reward",
            "pairs",
            "ties",
            "tie_warning",
            "ordering_holds",
        ])?;
        for r in &rewards {
            w.serialize((
                r.iteration,
                r.mean_chosen_reward,
                r.mean_rejected_reward,
                r.pairs,
                r.ties,
                r.tie_warning,
                r.ordering_holds,
            ))?;
        }
        Ok(())
    })?;
    out.csv("metrics/relevance.csv", |w| {
        let mut header: Vec<String> = ["iteration", "side", "mean", "std"].map(String::from).to_vec();
        header.extend((0..csr_core::eval::RELEVANCE_BINS).map(|i| format!("bin_{i}")));
        w.write_record(&header)?;
        for a in &artifacts {
            relevance_rows(w, a.iteration, &a.metrics.relevance)?;
        }
        Ok(())
    })?;
    out.csv("metrics/chair.csv", |w| {
        w.write_record([
            "iteration",
            "chair_i",
            "chair_s",
            "hallucinated",
            "mentioned",
            "captions_with_hallucination",
            "total_captions",
        ])?;
        for (t, c) in chair.iter().enumerate() {
            w.serialize((
                t,
                c.chair_i,
                c.chair_s,
                c.hallucinated,
                c.mentioned,
                c.captions_with_hallucination,
                c.total_captions,
            ))?;
        }
        Ok(())
    })?;
    out.csv("metrics/training.csv", |w| {
        w.write_record(["iteration", "step", "loss"])?;
        for a in &artifacts {
            for (step, loss) in a.loss_trace.iter().enumerate() {
                w.serialize((a.iteration, step, loss))?;
            }
        }
        Ok(())
    })?;
    out.csv("metrics/iterations.csv", |w| {
        w.write_record([
            "iteration",
            "pairs",
            "skipped_prompts",
            "ties",
            "zero_signal_sentences",
            "floored_pairs",
            "initial_loss",
            "final_loss",
            "converged",
            "reference_hash",
            "policy_hash",
        ])?;
        for a in &artifacts {
            let m = &a.metrics;
            w.serialize((
                a.iteration,
                a.pairs.len(),
                a.skipped_prompts.len(),
                m.ties,
                m.zero_signal_sentences,
                m.floored_pairs,
                m.initial_loss,
                m.final_loss,
                a.converged,
                &a.reference_hash,
                &a.policy_hash,
            ))?;
        }
        Ok(())
    })?;

    let manifest = Manifest {
        version: version(),
        config_hash: hash,
        seed: config.seed,
        iterations: artifacts.len(),
        world_fingerprint: world.fingerprint(),
        seed_policy_hash: seed_policy.param_hash(),
        files: out.files.iter().map(|p| p.display().to_string()).collect(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.into()))?;
    out.put("manifest.json", text.as_bytes())?;

    Ok(RunOutcome {
        artifacts,
        rewards,
        chair,
        files: out.files,
    })
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceRecord>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(Checkpoint::parse(&text)?)
}

/// Rewards and relevance of a finished run, recomputed from its files.
#[derive(Clone, Debug)]
pub struct RunStats {
    pub rewards: Vec<RewardTrackRow>,
    pub relevance: Vec<RelevanceStats>,
    /// Largest gap between a stored reward and its recomputation.
    pub max_rescore_error: f64,
    pub records: usize,
}

fn encode(vocab: &Vocabulary, words: &[String]) -> Result<Vec<TokenId>, CliError> {
    vocab.encode(words).map_err(|e| CliError::Data(e.to_string()))
}

/// Reloads every preference file and re-scores each record against the
/// reference policy of its iteration (the seed policy, then the previous
/// checkpoint).
pub fn run_stats(dir: &Path) -> Result<RunStats, CliError> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let Setup {
        world,
        prompts,
        seed_policy,
    } = setup(&config)?;
    let (d, e) = (world.vocab.delimiter(), world.vocab.eos());
    let mut reference = seed_policy;
    let mut rewards = Vec::new();
    let mut relevance = Vec::new();
    let mut worst: f64 = 0.0;
    let mut records = 0;
    for t in 1..=config.iterations {
        let scorer = CalibratedScorer::new(&reference, &world.embedder, config.csr_config(&world.vocab).reward)?;
        let mut pairs = Vec::new();
        for rec in read_preferences(&dir.join(preferences_name(t)))? {
            let prompt = prompts
                .iter()
                .find(|p| p.id == rec.prompt_id)
                .ok_or_else(|| CliError::Data(format!("unknown prompt id {}", rec.prompt_id)))?;
            let chosen = Response::from_tokens(encode(&world.vocab, &rec.chosen_tokens)?, d, e);
            let rejected = Response::from_tokens(encode(&world.vocab, &rec.rejected_tokens)?, d, e);
            let c = rescore(&scorer, prompt, &chosen)?;
            let r = rescore(&scorer, prompt, &rejected)?;
            worst = worst
                .max((c.cumulative - rec.chosen_reward).abs())
                .max((r.cumulative - rec.rejected_reward).abs());
            for (fresh, stored) in c
                .per_sentence
                .iter()
                .chain(&r.per_sentence)
                .zip(rec.per_sentence_scores.chosen.iter().chain(&rec.per_sentence_scores.rejected))
            {
                worst = worst.max((fresh.calibrated - stored.calibrated).abs());
            }
            if c.per_sentence.len() != rec.per_sentence_scores.chosen.len()
                || r.per_sentence.len() != rec.per_sentence_scores.rejected.len()
            {
                worst = f64::INFINITY;
            }
            pairs.push(PreferencePair {
                prompt: prompt.clone(),
                chosen,
                rejected,
                tie: c.cumulative == r.cumulative,
                chosen_reward: c.cumulative,
                rejected_reward: r.cumulative,
                chosen_scores: c.per_sentence,
                rejected_scores: r.per_sentence,
                iteration: t,
            });
        }
        records += pairs.len();
        rewards.push(track_iteration(t, &pairs)?);
        relevance.push(csr_core::eval::relevance_stats(&pairs, &world.embedder)?);
        reference = load_checkpoint(&dir.join(checkpoint_name(t)))?.policy;
    }
    Ok(RunStats {
        rewards,
        relevance,
        max_rescore_error: worst,
        records,
    })
}

/// Writes the config's prompts as an ingestible dataset and, optionally,
/// the world's image records.
pub fn export_world(config: &RunConfig, prompts_out: &Path, images_out: Option<&Path>) -> Result<usize, CliError> {
    let Setup { world, prompts, .. } = setup(config)?;
    let mut w = BufWriter::new(fs::File::create(prompts_out)?);
    crate::dataset::write_prompts(&mut w, &prompts, &world.vocab)?;
    w.flush()?;
    if let Some(path) = images_out {
        let mut w = BufWriter::new(fs::File::create(path)?);
        world.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(prompts.len())
}
