//! Text substrate: tokenization, vocabulary, caption encoding, n-gram
//! extraction and longest-common-subsequence partitions.
//!
//! Everything here is a pure function over immutable inputs; all other
//! modules build on these primitives.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

/// Reserved token ids. Specials always occupy ids 0..=3.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("text is empty after cleaning")]
    EmptyText,
}

/// Lowercase, strip punctuation, split on whitespace.
///
/// Deterministic by construction; the synthetic grammar emits clean text so
/// no further normalization (stemming, true-casing) is applied.
pub fn tokenize(text: &str) -> Result<Vec<String>, TextError> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(TextError::EmptyText);
    }
    Ok(tokens)
}

/// Token/id bijection with reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from a token corpus.
    ///
    /// Tokens with frequency >= `min_count` are kept; everything else maps
    /// to UNK at encode time. Ids are assigned in descending frequency
    /// order, ties broken lexicographically, starting after the specials.
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Vocab {
        assert!(min_count >= 1, "min_count must be >= 1");
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in corpus {
            for tok in seq {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        // BTreeMap iteration is lexicographic, so a stable sort by descending
        // frequency leaves ties in lexicographic order.
        kept.sort_by(|a, b| b.1.cmp(&a.1));

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_owned()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Total vocabulary size including the four specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.id_to_token[SPECIAL_TOKENS.len()..]
            .iter()
            .map(String::as_str)
    }

    /// Encodes tokens as BOS + ids + EOS, mapping OOV tokens to UNK.
    ///
    /// Returns the caption and whether the interior was truncated to
    /// `max_len` tokens. Truncation is flagged, never silent.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> (Caption, bool) {
        assert!(!tokens.is_empty(), "cannot encode an empty token sequence");
        let truncated = tokens.len() > max_len;
        let interior: Vec<usize> = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id_of(t).unwrap_or(UNK))
            .collect();
        (Caption::from_interior(&interior), truncated)
    }

    /// Inverse of `encode` for in-vocab tokens; sentinels are dropped.
    pub fn decode(&self, caption: &Caption) -> Vec<String> {
        caption
            .interior()
            .iter()
            .map(|&id| {
                self.token_of(id)
                    .unwrap_or(SPECIAL_TOKENS[UNK])
                    .to_owned()
            })
            .collect()
    }
}

/// A token-id sequence delimited by BOS/EOS. Length `T` (from [`Caption::len`])
/// counts interior tokens only.
///
/// Captions produced by `encode` always have `T >= 1`; decoding procedures
/// may produce a degenerate `T = 0` caption (EOS emitted immediately), which
/// downstream reward code handles explicitly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    ids: Vec<usize>,
}

impl Caption {
    /// Wraps interior ids in BOS/EOS sentinels. Interior EOS is forbidden;
    /// any other id is allowed (sampled captions range over the full
    /// vocabulary).
    pub fn from_interior(interior: &[usize]) -> Caption {
        assert!(
            interior.iter().all(|&id| id != EOS),
            "interior must not contain EOS"
        );
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(interior);
        ids.push(EOS);
        Caption { ids }
    }

    /// Full id sequence including sentinels.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Interior ids, sentinels excluded.
    pub fn interior(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// Interior length T.
    pub fn len(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target ids for teacher-forced training: each interior word followed
    /// by the terminating EOS, so the decoder learns to stop.
    pub fn emission_targets(&self) -> Vec<usize> {
        let mut t = self.interior().to_vec();
        t.push(EOS);
        t
    }
}

/// Outcome of the LCS dynamic program between a student and a teacher
/// caption: a boolean mask over the student interior marking one maximal
/// common subsequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcsPartition {
    pub in_lcs: Vec<bool>,
    /// Number of student words inside the LCS.
    pub n: usize,
    /// Number of student words outside the LCS.
    pub m: usize,
}

/// Standard O(Ts*Tt) LCS over caption interiors (sentinels excluded).
///
/// Tie-breaking when multiple maximal subsequences exist: backtrace from the
/// corner prefers the diagonal move, then the student-axis move. Only n and
/// m feed the reward formulas, and those are tie-invariant.
pub fn lcs_partition(student: &Caption, teacher: &Caption) -> LcsPartition {
    let s = student.interior();
    let t = teacher.interior();
    let (ls, lt) = (s.len(), t.len());
    let mut dp = vec![vec![0usize; lt + 1]; ls + 1];
    for i in 1..=ls {
        for j in 1..=lt {
            dp[i][j] = if s[i - 1] == t[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    let mut in_lcs = vec![false; ls];
    let (mut i, mut j) = (ls, lt);
    while i > 0 && j > 0 {
        if s[i - 1] == t[j - 1] {
            in_lcs[i - 1] = true;
            i -= 1;
            j -= 1;
        } else if dp[i - 1][j] >= dp[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    let n = dp[ls][lt];
    LcsPartition {
        in_lcs,
        n,
        m: ls - n,
    }
}

/// All contiguous n-grams of `ids` with multiplicity.
pub fn ngrams(ids: &[usize], n: usize) -> BTreeMap<Vec<usize>, usize> {
    assert!((1..=4).contains(&n), "n must be in 1..=4");
    let mut counts = BTreeMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}
