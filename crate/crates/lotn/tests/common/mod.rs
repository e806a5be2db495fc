//! Shared plumbing for the integration suites: locating checked-in
//! fixtures and generating deterministic synthetic corpora.

#![allow(dead_code)] // each test target uses a different subset

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub const POSITIVE_WORDS: &[&str] = &[
    "great", "delicious", "fresh", "amazing", "friendly", "excellent", "lovely", "charming",
    "cozy", "perfect",
];
pub const NEGATIVE_WORDS: &[&str] = &[
    "terrible", "bland", "rude", "slow", "awful", "overpriced", "mushy", "tiny", "dated", "dirty",
];
pub const FILLER_WORDS: &[&str] = &[
    "the", "food", "was", "service", "place", "really", "very", "and", "staff", "menu",
];

/// Balanced synthetic review corpus in the two-field format (polarity TAB
/// space-joined tokens). Positive reviews draw sentiment words from one
/// pool, negative from the other; fillers appear in both, so the task is
/// learnable but not degenerate.
pub fn synthetic_reviews(n_per_class: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..2 * n_per_class {
        let polarity = i % 2;
        let pool = if polarity == 1 { POSITIVE_WORDS } else { NEGATIVE_WORDS };
        let len = rng.random_range(4..9);
        let mut tokens: Vec<&str> = (0..len)
            .map(|_| {
                if rng.random_bool(0.5) {
                    pool[rng.random_range(0..pool.len())]
                } else {
                    FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())]
                }
            })
            .collect();
        if !tokens.iter().any(|t| pool.contains(t)) {
            tokens[0] = pool[0];
        }
        out.push_str(&format!("{polarity}\t{}\n", tokens.join(" ")));
    }
    out
}

/// Every distinct lowercased token across the given TOWE files, plus the
/// synthetic review pools, so one embedding file can cover everything.
pub fn fixture_vocabulary(towe_files: &[&Path]) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    for path in towe_files {
        let text = std::fs::read_to_string(path).unwrap();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let field = line.split('\t').next().unwrap();
            tokens.extend(field.split(' ').map(|t| t.to_lowercase()));
        }
    }
    for pool in [POSITIVE_WORDS, NEGATIVE_WORDS, FILLER_WORDS] {
        tokens.extend(pool.iter().map(|s| s.to_string()));
    }
    tokens
}

/// Word-vector file text over `tokens`: one line per token with `dim`
/// uniform values in (-0.5, 0.5), deterministic in `seed`.
pub fn random_embeddings(tokens: &BTreeSet<String>, dim: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for token in tokens {
        let values: Vec<String> =
            (0..dim).map(|_| format!("{:.6}", rng.random_range(-0.5..0.5))).collect();
        out.push_str(&format!("{token} {}\n", values.join(" ")));
    }
    out
}
