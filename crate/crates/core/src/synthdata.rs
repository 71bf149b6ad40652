//! Two-modality token data with planted unique, redundant and synergistic signals.
//!
//! Each sample draws four independent fair bits `(b_u, b_r, b_sA, b_sB)`:
//!
//! * `b_u` plants token [`U_A`] in modality A (unique label),
//! * `b_r` plants [`R_A`] in A *and* [`R_B`] in B (redundancy label),
//! * `b_sA` / `b_sB` plant [`S_A`] / [`S_B`]; the synergy label is their XOR.
//!
//! Every other position holds a distractor id drawn uniformly from the
//! non-reserved part of the vocabulary. With probability `noise_rate` one of
//! the planted tokens of a sample (chosen uniformly) is overwritten by a
//! distractor; the labels keep describing the latent bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_for};

/// Unique-signal token in modality A.
pub const U_A: u32 = 0;
/// Redundancy token in modality A.
pub const R_A: u32 = 1;
/// Synergy token in modality A.
pub const S_A: u32 = 2;
/// Redundancy token in modality B.
pub const R_B: u32 = 0;
/// Synergy token in modality B.
pub const S_B: u32 = 1;

/// Number of reserved ids at the start of each modality's vocabulary.
pub const RESERVED_A: u32 = 3;
pub const RESERVED_B: u32 = 2;

pub const NUM_LABELS: usize = 3;
pub const LABEL_UNIQUE: usize = 0;
pub const LABEL_REDUNDANCY: usize = 1;
pub const LABEL_SYNERGY: usize = 2;
pub const LABEL_NAMES: [&str; NUM_LABELS] = ["unique", "redundancy", "synergy"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("modality {modality} has length {len} but must host {needed} signal tokens")]
    SequenceTooShort {
        modality: char,
        needed: usize,
        len: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub vocab_a: usize,
    pub vocab_b: usize,
    pub noise_rate: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_samples: 8000,
            len_a: 16,
            len_b: 16,
            vocab_a: 64,
            vocab_b: 64,
            noise_rate: 0.05,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.len_a < RESERVED_A as usize {
            return Err(DataError::SequenceTooShort {
                modality: 'A',
                needed: RESERVED_A as usize,
                len: self.len_a,
            });
        }
        if self.len_b < RESERVED_B as usize {
            return Err(DataError::SequenceTooShort {
                modality: 'B',
                needed: RESERVED_B as usize,
                len: self.len_b,
            });
        }
        if self.len_a < 4 || self.len_b < 4 {
            return Err(DataError::InvalidSpec(format!(
                "sequence lengths must be at least 4, got {} and {}",
                self.len_a, self.len_b
            )));
        }
        if self.vocab_a < 16 || self.vocab_b < 16 {
            return Err(DataError::InvalidSpec(format!(
                "vocabularies must hold at least 16 ids, got {} and {}",
                self.vocab_a, self.vocab_b
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(DataError::InvalidSpec(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens_a: Vec<u32>,
    pub tokens_b: Vec<u32>,
    /// `[unique, redundancy, synergy]`.
    pub labels: [u8; NUM_LABELS],
    /// `[b_u, b_r, b_sA, b_sB]`.
    pub bits: [u8; 4],
}

impl Sample {
    pub fn label_targets(&self) -> [f64; NUM_LABELS] {
        self.labels.map(f64::from)
    }

    pub fn position_of_a(&self, token: u32) -> Option<usize> {
        self.tokens_a.iter().position(|&t| t == token)
    }

    pub fn position_of_b(&self, token: u32) -> Option<usize> {
        self.tokens_b.iter().position(|&t| t == token)
    }
}

fn generate_one(spec: &GenSpec, index: usize) -> Sample {
    let mut rng = rng_for(spec.seed, &[index as u64]);
    let bits: [u8; 4] = std::array::from_fn(|_| u8::from(rng.gen_bool(0.5)));
    let [b_u, b_r, b_sa, b_sb] = bits;

    let mut tokens_a: Vec<u32> = (0..spec.len_a)
        .map(|_| rng.gen_range(RESERVED_A..spec.vocab_a as u32))
        .collect();
    let mut tokens_b: Vec<u32> = (0..spec.len_b)
        .map(|_| rng.gen_range(RESERVED_B..spec.vocab_b as u32))
        .collect();

    let planted_a: Vec<u32> = [(b_u, U_A), (b_r, R_A), (b_sa, S_A)]
        .into_iter()
        .filter(|(b, _)| *b == 1)
        .map(|(_, t)| t)
        .collect();
    let planted_b: Vec<u32> = [(b_r, R_B), (b_sb, S_B)]
        .into_iter()
        .filter(|(b, _)| *b == 1)
        .map(|(_, t)| t)
        .collect();

    let mut positions_a: Vec<usize> = (0..spec.len_a).collect();
    positions_a.shuffle(&mut rng);
    let mut positions_b: Vec<usize> = (0..spec.len_b).collect();
    positions_b.shuffle(&mut rng);
    for (&tok, &pos) in planted_a.iter().zip(&positions_a) {
        tokens_a[pos] = tok;
    }
    for (&tok, &pos) in planted_b.iter().zip(&positions_b) {
        tokens_b[pos] = tok;
    }

    let planted = planted_a.len() + planted_b.len();
    if planted > 0 && rng.gen_bool(spec.noise_rate) {
        let which = rng.gen_range(0..planted);
        if which < planted_a.len() {
            tokens_a[positions_a[which]] = rng.gen_range(RESERVED_A..spec.vocab_a as u32);
        } else {
            let j = which - planted_a.len();
            tokens_b[positions_b[j]] = rng.gen_range(RESERVED_B..spec.vocab_b as u32);
        }
    }

    Sample {
        tokens_a,
        tokens_b,
        labels: [b_u, b_r, b_sa ^ b_sb],
        bits,
    }
}

/// Generates `spec.n_samples` samples. Sample `i` depends only on
/// `(spec, i)`, so any partition of the index range reproduces the corpus.
pub fn generate(spec: &GenSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    Ok((0..spec.n_samples).map(|i| generate_one(spec, i)).collect())
}

/// Train / validation / test corpora generated from one base [`GenSpec`] with
/// per-split derived seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate_splits(
    base: &GenSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<Splits, DataError> {
    let split = |id: u64, n: usize| {
        generate(&GenSpec {
            seed: derive_seed(base.seed, &[0x5_911_7, id]),
            n_samples: n,
            ..base.clone()
        })
    };
    Ok(Splits {
        train: split(0, n_train)?,
        val: split(1, n_val)?,
        test: split(2, n_test)?,
    })
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}
