//! Discrete sequences, vocabularies, and edit-distance metrics.
//!
//! Sequences are stored as symbol indices (`u8`), so a [`Vocabulary`] is
//! needed at the text boundary only. The metrics here operate on *sets* of
//! sequences and use plain Levenshtein distance; they are the quantities the
//! experiment reports are built from.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of distinct symbols; index ↔ char both ways.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    /// Symbols in presentation order. Duplicates are rejected; 2..=256 symbols.
    pub fn new(symbols: &str) -> Result<Self> {
        let chars: Vec<char> = symbols.chars().collect();
        if chars.len() < 2 || chars.len() > 256 {
            return Err(Error::config(format!(
                "vocabulary needs 2..=256 symbols, got {}",
                chars.len()
            )));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::config(format!("duplicate symbol {:?} in vocabulary", c)));
            }
        }
        Ok(Vocabulary { symbols: chars })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, index: u8) -> char {
        self.symbols[index as usize]
    }

    pub fn index_of(&self, c: char) -> Result<u8> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i as u8)
            .ok_or_else(|| Error::UnknownSymbol { symbol: c, vocab: self.symbols.iter().collect() })
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn parse(&self, text: &str) -> Result<Sequence> {
        let mut idx = Vec::with_capacity(text.chars().count());
        for c in text.chars() {
            idx.push(self.index_of(c)?);
        }
        Ok(Sequence(idx))
    }

    pub fn format(&self, seq: &Sequence) -> String {
        let mut s = String::with_capacity(seq.len());
        for &i in seq.indices() {
            s.push(self.symbol(i));
        }
        s
    }
}

/// A sequence of symbol indices into some vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence(Vec<u8>);

impl Sequence {
    pub fn from_indices(indices: Vec<u8>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::contract(format!(
                "symbol index {} out of range for vocabulary of {}",
                bad, vocab_size
            )));
        }
        Ok(Sequence(indices))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[u8] {
        &self.0
    }

    /// Positions at which `self` and `other` differ (equal lengths only).
    pub fn hamming(&self, other: &Sequence) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::contract(format!(
                "hamming distance needs equal lengths ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }
}

/// Levenshtein edit distance (insert/delete/substitute, unit costs).
/// Two-row DP; handles unequal lengths.
pub fn levenshtein(a: &Sequence, b: &Sequence) -> usize {
    let (short, long) = if a.len() <= b.len() { (&a.0, &b.0) } else { (&b.0, &a.0) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for (i, &lc) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &sc) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lc != sc);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// Median with the even-count convention pinned to the mean of the central
/// pair. Errors on an empty slice.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("median of an empty slice"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median of `(s − f_min)/(f_max − f_min)` over the given raw scores.
pub fn median_fitness(scores: &[f64], f_min: f64, f_max: f64) -> Result<f64> {
    if f_max <= f_min {
        return Err(Error::DegenerateRange { value: f_min });
    }
    let normalized: Vec<f64> = scores.iter().map(|&s| (s - f_min) / (f_max - f_min)).collect();
    median(&normalized)
}

/// Median pairwise Levenshtein distance over all index pairs i < j.
/// Duplicated content still forms pairs (contributing zeros); fewer than two
/// sequences is a contract error.
pub fn diversity(set: &[Sequence]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::contract(format!("diversity needs ≥ 2 sequences, got {}", set.len())));
    }
    let mut dists = Vec::with_capacity(set.len() * (set.len() - 1) / 2);
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            dists.push(levenshtein(&set[i], &set[j]) as f64);
        }
    }
    median(&dists)
}

/// Median over `set` of the distance to the nearest *different-content*
/// reference sequence. A generated sequence that exactly reproduces a
/// reference is scored against the other references, so an all-copies set
/// still gets a positive novelty — copying is not novel, and this convention
/// keeps it from scoring as maximally non-novel zeros either.
pub fn novelty(set: &[Sequence], reference: &[Sequence]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::contract("novelty of an empty set"));
    }
    let mut mins = Vec::with_capacity(set.len());
    for x in set {
        let m = reference
            .iter()
            .filter(|r| *r != x)
            .map(|r| levenshtein(x, r))
            .min()
            .ok_or_else(|| {
                Error::contract("novelty reference set has no sequence with different content")
            })?;
        mins.push(m as f64);
    }
    median(&mins)
}

/// The three benchmark metrics for one evaluated batch, plus enough context
/// to aggregate across seeds.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub median_fitness: f64,
    pub diversity: f64,
    pub novelty: f64,
    pub n_sequences: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Assemble a report from oracle scores and the evaluated set. `scores`
    /// must be parallel to `set`; `bounds` are the normalization range fed to
    /// [`median_fitness`].
    pub fn compute(
        scores: &[f64],
        set: &[Sequence],
        reference: &[Sequence],
        bounds: (f64, f64),
        seed: u64,
    ) -> Result<MetricsReport> {
        if scores.len() != set.len() {
            return Err(Error::contract(format!(
                "{} scores for {} sequences",
                scores.len(),
                set.len()
            )));
        }
        let report = MetricsReport {
            median_fitness: median_fitness(scores, bounds.0, bounds.1)?,
            diversity: diversity(set)?,
            novelty: novelty(set, reference)?,
            n_sequences: set.len(),
            seed,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("median_fitness", self.median_fitness),
            ("diversity", self.diversity),
            ("novelty", self.novelty),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("metrics field {}", name) });
            }
        }
        if self.diversity < 0.0 || self.novelty < 0.0 {
            return Err(Error::contract("distance-valued metrics cannot be negative"));
        }
        Ok(())
    }
}

/// One sequence per line, trailing newline, nothing else.
pub fn write_sequences(path: &Path, vocab: &Vocabulary, seqs: &[Sequence]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        let _ = writeln!(text, "{}", vocab.format(s));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Inverse of [`write_sequences`]; unknown symbols are format errors naming
/// the line.
pub fn read_sequences(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(Error::format(path, format!("empty line {}", lineno + 1)));
        }
        out.push(vocab.parse(line).map_err(|e| {
            Error::format(path, format!("line {}: {}", lineno + 1, e))
        })?);
    }
    Ok(out)
}
