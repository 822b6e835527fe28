//! Plain-text policy checkpoints.
//!
//! ```text
//! csr-checkpoint 1
//! seed <u64>
//! iteration <usize>
//! config_hash <hex>
//! vocab_size <V>
//! num_buckets <B>
//! embed_dim <D>
//! bucket_keys
//! <D floats>            (B lines)
//! params
//! <V floats>            (B·(V+1) lines)
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a checkpoint
//! re-loads to bit-identical parameters and the same inputs always produce
//! the same bytes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::toyworld::ToyPolicy;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: usize,
    pub config_hash: String,
    pub policy: ToyPolicy,
}

fn write_row(out: &mut String, row: &[f64]) {
    for (i, x) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x:?}").expect("writing to a String");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let p = &self.policy;
        let v = p.vocab_size();
        let d = p.embed_dim();
        let buckets = p.num_buckets();
        let mut out = String::new();
        writeln!(out, "csr-checkpoint {FORMAT_VERSION}").unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "iteration {}", self.iteration).unwrap();
        writeln!(out, "config_hash {}", self.config_hash).unwrap();
        writeln!(out, "vocab_size {v}").unwrap();
        writeln!(out, "num_buckets {buckets}").unwrap();
        writeln!(out, "embed_dim {d}").unwrap();
        out.push_str("bucket_keys\n");
        for row in p.bucket_keys().chunks_exact(d) {
            write_row(&mut out, row);
        }
        out.push_str("params\n");
        for row in p.params().chunks_exact(v) {
            write_row(&mut out, row);
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))
        };
        let bad = |line: usize, msg: String| Error::Parse(format!("checkpoint line {line}: {msg}"));

        let (n, header) = next("header")?;
        if header != format!("csr-checkpoint {FORMAT_VERSION}") {
            return Err(bad(n, format!("unsupported header {header:?}")));
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (n, line) = next(key)?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                _ => Err(bad(n, format!("expected `{key} <value>`"))),
            }
        };
        let num = |(n, s): (usize, String)| -> Result<usize> {
            s.parse().map_err(|e| bad(n, format!("{e}")))
        };
        let seed = {
            let (n, s) = field("seed")?;
            s.parse::<u64>().map_err(|e| bad(n, format!("{e}")))?
        };
        let iteration = num(field("iteration")?)?;
        let config_hash = field("config_hash")?.1;
        let v = num(field("vocab_size")?)?;
        let buckets = num(field("num_buckets")?)?;
        let d = num(field("embed_dim")?)?;

        let mut section = |name: &str, rows: usize, width: usize| -> Result<Vec<f64>> {
            let (n, l) = next(name)?;
            if l != name {
                return Err(bad(n, format!("expected section {name}")));
            }
            let mut out = Vec::with_capacity(rows * width);
            for _ in 0..rows {
                let (n, l) = next(name)?;
                let row: Vec<f64> = l
                    .split(' ')
                    .map(|x| x.parse::<f64>().map_err(|e| bad(n, format!("{e}"))))
                    .collect::<Result<_>>()?;
                if row.len() != width || row.iter().any(|x| !x.is_finite()) {
                    return Err(bad(n, format!("expected {width} finite values")));
                }
                out.extend(row);
            }
            Ok(out)
        };
        let keys = section("bucket_keys", buckets, d)?;
        let params = section("params", buckets * (v + 1), v)?;
        let (n, end) = next("end")?;
        if end != "end" {
            return Err(bad(n, "expected `end`".into()));
        }
        Ok(Self {
            seed,
            iteration,
            config_hash,
            policy: ToyPolicy::from_parts(v, buckets, d, keys, params)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::make_world;

    #[test]
    fn round_trip_is_bit_exact() {
        let w = make_world(3, 5, 2).unwrap();
        let ck = Checkpoint {
            seed: 3,
            iteration: 2,
            config_hash: "abc123".into(),
            policy: ToyPolicy::random(&w, 9, 0.7),
        };
        let text = ck.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.policy.param_hash(), ck.policy.param_hash());
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let w = make_world(3, 3, 1).unwrap();
        let ck = Checkpoint {
            seed: 0,
            iteration: 1,
            config_hash: "h".into(),
            policy: ToyPolicy::uniform(&w),
        };
        let text = ck.to_text();
        let cut = &text[..text.len() / 2];
        assert!(Checkpoint::parse(cut).is_err());
        assert!(Checkpoint::parse("csr-checkpoint 9\n").is_err());
    }
}
