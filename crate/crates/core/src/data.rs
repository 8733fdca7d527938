//! Byte-level corpora and overlapping training windows.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab_size: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Reads a file as a byte token stream with at least `seq_len + 1` tokens.
pub fn ingest_corpus(path: &Path, seq_len: usize) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let tokens = encode(&bytes);
    if tokens.len() < seq_len + 1 {
        return Err(Error::EmptyCorpus {
            len: tokens.len(),
            needed: seq_len + 1,
        });
    }
    Ok(tokens)
}

/// Windows of `seq_len + 1` tokens starting every `seq_len / 2` tokens.
/// A trailing partial window is dropped.
pub fn build_windows(tokens: &[usize], seq_len: usize) -> Result<Vec<Vec<usize>>> {
    let width = seq_len + 1;
    if seq_len == 0 || tokens.len() < width {
        return Err(Error::EmptyCorpus {
            len: tokens.len(),
            needed: width,
        });
    }
    let stride = (seq_len / 2).max(1);
    Ok((0..=tokens.len() - width)
        .step_by(stride)
        .map(|start| tokens[start..start + width].to_vec())
        .collect())
}

/// Train and validation windows cut from disjoint parts of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub seq_len: usize,
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
}

impl SequenceDataset {
    /// The last `validation_fraction` of the stream becomes the validation split.
    pub fn split(tokens: &[usize], seq_len: usize, validation_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let cut = tokens.len() - (tokens.len() as f64 * validation_fraction).round() as usize;
        let train = build_windows(&tokens[..cut], seq_len)?;
        let validation = if validation_fraction > 0.0 {
            build_windows(&tokens[cut..], seq_len)?
        } else {
            Vec::new()
        };
        Ok(Self {
            seq_len,
            train,
            validation,
        })
    }

    pub fn num_windows(&self) -> (usize, usize) {
        (self.train.len(), self.validation.len())
    }
}

/// Splits windows into model inputs and flattened next-token targets.
pub fn inputs_and_targets<W: AsRef<[usize]>>(windows: &[W]) -> (Vec<&[usize]>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(windows.len());
    let mut targets = Vec::new();
    for w in windows {
        let w = w.as_ref();
        inputs.push(&w[..w.len() - 1]);
        targets.extend_from_slice(&w[1..]);
    }
    (inputs, targets)
}

const SUBJECTS: &[&str] = &[
    "the engineer",
    "a small bird",
    "the old river",
    "my neighbour",
    "the committee",
    "a quiet student",
    "the northern wind",
    "every sailor",
    "the library",
    "our teacher",
    "the gardener",
    "a tired horse",
    "the city council",
    "the young doctor",
    "an empty train",
];
const VERBS: &[&str] = &[
    "watched",
    "carried",
    "remembered",
    "painted",
    "followed",
    "described",
    "repaired",
    "found",
    "ignored",
    "opened",
    "measured",
    "praised",
    "visited",
    "built",
    "lost",
];
const OBJECTS: &[&str] = &[
    "the wooden bridge",
    "a long letter",
    "the harbour lights",
    "three green apples",
    "the broken clock",
    "a map of the valley",
    "the winter garden",
    "an old song",
    "the stone tower",
    "a box of candles",
    "the morning paper",
    "the narrow road",
];
const TAILS: &[&str] = &[
    "before the rain",
    "after dinner",
    "near the station",
    "with great care",
    "for the second time",
    "in the evening",
    "without a word",
    "at the end of the week",
    "under the grey sky",
    "during the long summer",
];
const LINKS: &[&str] = &["and then", "because", "while", "although", "so"];

/// Deterministic English-like text of exactly `len` bytes.
///
/// Sentences come from a small template grammar, so the byte stream has
/// learnable word, spelling and punctuation structure.
pub fn synthetic_corpus(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 256);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    while out.len() < len {
        let sentences = rng.random_range(3..7);
        for _ in 0..sentences {
            let mut s = format!(
                "{} {} {}",
                pick(&mut rng, SUBJECTS),
                pick(&mut rng, VERBS),
                pick(&mut rng, OBJECTS)
            );
            if rng.random_bool(0.5) {
                s.push(' ');
                s.push_str(pick(&mut rng, TAILS));
            }
            if rng.random_bool(0.3) {
                s.push_str(&format!(
                    ", {} {} {} {}",
                    pick(&mut rng, LINKS),
                    pick(&mut rng, SUBJECTS),
                    pick(&mut rng, VERBS),
                    pick(&mut rng, OBJECTS)
                ));
            }
            let mut chars = s.chars();
            let first = chars.next().expect("non-empty").to_ascii_uppercase();
            out.push(first);
            out.push_str(chars.as_str());
            out.push_str(if rng.random_bool(0.1) { "! " } else { ". " });
        }
        out.pop();
        out.push('\n');
    }
    out.truncate(len);
    out
}
