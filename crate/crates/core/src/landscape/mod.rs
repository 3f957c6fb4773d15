//! Synthetic epistatic fitness landscapes and restricted benchmark subsets.
//!
//! A landscape assigns every length-L sequence a raw score: a sum of
//! per-(position, symbol) weights plus a sparse set of pairwise epistatic
//! interaction terms, all drawn from a seeded standard normal. Scores exposed
//! to the rest of the pipeline are normalized to [0,1] by the landscape's
//! ground-truth extrema — exact when the space is small enough to enumerate,
//! estimated from a large uniform sample otherwise.
//!
//! The landscape doubles as the evaluation oracle. Every `oracle_score` call
//! bumps an audit counter so the harness can prove that training, sampling,
//! and bootstrapping never touched ground truth.

pub mod ranker;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::stream;
use crate::seqkit::{Sequence, Vocabulary};

/// Everything needed to reconstruct a landscape bit-for-bit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LandscapeSpec {
    /// Vocabulary symbols in order, e.g. "ACGT".
    pub vocab: String,
    pub length: usize,
    pub n_epistatic_terms: usize,
    pub seed: u64,
    /// Enumerate the full space when |V|^L is at most this; sample otherwise.
    #[serde(default = "default_enumeration_cap")]
    pub enumeration_cap: u64,
    /// Uniform ground-truth sample size for non-enumerable spaces.
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
}

fn default_enumeration_cap() -> u64 {
    10_000_000
}

fn default_sample_size() -> usize {
    200_000
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        LandscapeSpec {
            vocab: "ACGT".into(),
            length: 10,
            n_epistatic_terms: 30,
            seed: 0,
            enumeration_cap: default_enumeration_cap(),
            sample_size: default_sample_size(),
        }
    }
}

/// One pairwise interaction: adds `weight` when x[i] == a and x[j] == b.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpistaticTerm {
    pub i: usize,
    pub j: usize,
    pub a: u8,
    pub b: u8,
    pub weight: f64,
}

/// Precomputed ground-truth view used for normalization, percentile windows,
/// and the top-1% gap constraint. Not serialized — rebuilt deterministically.
#[derive(Clone, Debug)]
struct GroundTruth {
    /// True when the full space was enumerated (extrema are exact).
    exact: bool,
    f_min: f64,
    f_max: f64,
    /// (sequence code, raw score) for the enumeration or the sample.
    scored: Vec<(u64, f64)>,
    /// Raw scores sorted ascending — the empirical CDF.
    sorted_raw: Vec<f64>,
    /// Top-1% sequences (by raw score), decoded for Hamming checks.
    top_seqs: Vec<Sequence>,
}

pub struct Landscape {
    spec: LandscapeSpec,
    vocab: Vocabulary,
    /// Additive field, position-major: additive[p * |V| + s].
    additive: Vec<f64>,
    epistatic: Vec<EpistaticTerm>,
    truth: GroundTruth,
    /// Oracle access audit; see module docs.
    audit: AtomicU64,
}

impl Landscape {
    pub fn spec(&self) -> &LandscapeSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn length(&self) -> usize {
        self.spec.length
    }

    /// Short identifier stamped into benchmark subsets.
    pub fn id(&self) -> String {
        format!(
            "V{}-L{}-E{}-S{}",
            self.vocab.size(),
            self.spec.length,
            self.epistatic.len(),
            self.spec.seed
        )
    }

    pub fn is_enumerated(&self) -> bool {
        self.truth.exact
    }

    /// Number of oracle queries made so far.
    pub fn audit_count(&self) -> u64 {
        self.audit.load(Ordering::Relaxed)
    }

    pub fn reset_audit(&self) {
        self.audit.store(0, Ordering::Relaxed);
    }

    /// Ground-truth fitness in [0,1]. Counts against the access audit.
    pub fn oracle_score(&self, x: &Sequence) -> Result<f64> {
        if x.len() != self.spec.length {
            return Err(Error::contract(format!(
                "oracle got length {} but landscape is length {}",
                x.len(),
                self.spec.length
            )));
        }
        self.audit.fetch_add(1, Ordering::Relaxed);
        Ok(self.normalize(self.raw_score(x.indices())))
    }

    /// Raw (unnormalized) score; internal — does not touch the audit counter.
    fn raw_score(&self, idx: &[u8]) -> f64 {
        let v = self.vocab.size();
        let mut s = 0.0;
        for (p, &sym) in idx.iter().enumerate() {
            s += self.additive[p * v + sym as usize];
        }
        for t in &self.epistatic {
            if idx[t.i] == t.a && idx[t.j] == t.b {
                s += t.weight;
            }
        }
        s
    }

    fn normalize(&self, raw: f64) -> f64 {
        let n = (raw - self.truth.f_min) / (self.truth.f_max - self.truth.f_min);
        // Sampled ground truth can be overshot by off-sample queries.
        n.clamp(0.0, 1.0)
    }

    /// Normalized value at fraction `q` of the ground-truth CDF
    /// (sort-based, index ⌊q·(n−1)⌋).
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.truth.sorted_raw.len();
        let i = (q.clamp(0.0, 1.0) * (n - 1) as f64).floor() as usize;
        self.normalize(self.truth.sorted_raw[i])
    }

    fn decode_code(&self, mut code: u64) -> Sequence {
        let v = self.vocab.size() as u64;
        let mut idx = vec![0u8; self.spec.length];
        for slot in idx.iter_mut() {
            *slot = (code % v) as u8;
            code /= v;
        }
        Sequence::from_indices(idx, self.vocab.size()).expect("decoded indices in range")
    }
}

/// Build a landscape from its spec. Deterministic in the seed.
pub fn make_landscape(spec: &LandscapeSpec) -> Result<Landscape> {
    let vocab = Vocabulary::new(&spec.vocab)?;
    let v = vocab.size();
    let l = spec.length;
    if l == 0 {
        return Err(Error::config("landscape length must be positive"));
    }
    let max_terms = l * (l - 1) / 2 * v * v;
    if spec.n_epistatic_terms > max_terms {
        return Err(Error::config(format!(
            "{} epistatic terms requested but only {} distinct position-pair/symbol combinations exist",
            spec.n_epistatic_terms, max_terms
        )));
    }

    let mut rng = stream(spec.seed, "landscape-weights", 0);
    let additive: Vec<f64> = (0..l * v).map(|_| rng.sample(StandardNormal)).collect();

    let mut epistatic = Vec::with_capacity(spec.n_epistatic_terms);
    let mut seen = std::collections::HashSet::new();
    while epistatic.len() < spec.n_epistatic_terms {
        let i = rng.random_range(0..l);
        let j = rng.random_range(0..l);
        if i == j {
            continue;
        }
        let (i, j) = (i.min(j), i.max(j));
        let a = rng.random_range(0..v) as u8;
        let b = rng.random_range(0..v) as u8;
        if !seen.insert((i, j, a, b)) {
            continue;
        }
        let weight: f64 = rng.sample(StandardNormal);
        epistatic.push(EpistaticTerm { i, j, a, b, weight });
    }

    finish_landscape(spec.clone(), vocab, additive, epistatic)
}

/// Compute ground truth and assemble the struct (shared by make and load).
fn finish_landscape(
    spec: LandscapeSpec,
    vocab: Vocabulary,
    additive: Vec<f64>,
    epistatic: Vec<EpistaticTerm>,
) -> Result<Landscape> {
    let v = vocab.size();
    let l = spec.length;
    if additive.len() != l * v {
        return Err(Error::config(format!(
            "additive field has {} weights, expected {}",
            additive.len(),
            l * v
        )));
    }
    for t in &epistatic {
        if t.i >= t.j || t.j >= l || t.a as usize >= v || t.b as usize >= v {
            return Err(Error::config(format!("epistatic term out of range: {:?}", t)));
        }
    }

    let space: Option<u64> = (v as u64).checked_pow(l as u32);
    let exact = space.is_some_and(|n| n <= spec.enumeration_cap);

    // Stack-free scorer over raw index slices (same math as Landscape::raw_score).
    let score = |idx: &[u8]| -> f64 {
        let mut s = 0.0;
        for (p, &sym) in idx.iter().enumerate() {
            s += additive[p * v + sym as usize];
        }
        for t in &epistatic {
            if idx[t.i] == t.a && idx[t.j] == t.b {
                s += t.weight;
            }
        }
        s
    };

    let scored: Vec<(u64, f64)> = if exact {
        let n = space.unwrap();
        let mut out = Vec::with_capacity(n as usize);
        let mut idx = vec![0u8; l];
        for code in 0..n {
            out.push((code, score(&idx)));
            // Odometer increment in base |V|, position 0 least significant.
            for slot in idx.iter_mut() {
                *slot += 1;
                if (*slot as usize) < v {
                    break;
                }
                *slot = 0;
            }
        }
        out
    } else {
        let mut rng = stream(spec.seed, "landscape-ground-sample", 0);
        let mut out = Vec::with_capacity(spec.sample_size);
        let mut idx = vec![0u8; l];
        for _ in 0..spec.sample_size {
            let mut code = 0u64;
            for slot in idx.iter_mut().rev() {
                *slot = rng.random_range(0..v) as u8;
            }
            for &s in idx.iter().rev() {
                code = code * v as u64 + s as u64;
            }
            out.push((code, score(&idx)));
        }
        out
    };

    let mut sorted_raw: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    sorted_raw.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let (f_min, f_max) = (sorted_raw[0], sorted_raw[sorted_raw.len() - 1]);
    if f_max <= f_min {
        return Err(Error::DegenerateRange { value: f_min });
    }

    // Top 1% by raw score, ties broken by code for determinism.
    let n_top = ((scored.len() as f64) * 0.01).ceil() as usize;
    let mut by_score: Vec<usize> = (0..scored.len()).collect();
    by_score.sort_by(|&x, &y| {
        scored[y].1.partial_cmp(&scored[x].1).unwrap().then(scored[x].0.cmp(&scored[y].0))
    });
    let top_codes: Vec<u64> = by_score[..n_top].iter().map(|&i| scored[i].0).collect();

    let truth =
        GroundTruth { exact, f_min, f_max, scored, sorted_raw, top_seqs: Vec::new() };
    let mut landscape = Landscape {
        spec,
        vocab,
        additive,
        epistatic,
        truth,
        audit: AtomicU64::new(0),
    };
    landscape.truth.top_seqs = top_codes.iter().map(|&c| landscape.decode_code(c)).collect();
    Ok(landscape)
}

// ---------------------------------------------------------------------------
// Benchmark subsets
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Medium,
    Hard,
}

impl Difficulty {
    /// Percentile window [lo, hi] of the ground-truth CDF.
    pub fn window(self) -> (f64, f64) {
        match self {
            Difficulty::Medium => (0.20, 0.40),
            Difficulty::Hard => (0.00, 0.30),
        }
    }

    /// Default minimum Hamming gap to the top-1% set.
    pub fn default_min_gap(self) -> usize {
        match self {
            Difficulty::Medium => 6,
            Difficulty::Hard => 7,
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkParams {
    pub difficulty: Difficulty,
    /// Number of records to draw.
    #[serde(default = "default_subset_size")]
    pub size: usize,
    /// Override for the difficulty's default gap. Needed at very short L,
    /// where the default gaps are provably unsatisfiable (the top-1% set's
    /// Hamming balls cover the whole space).
    #[serde(default)]
    pub min_gap: Option<usize>,
}

fn default_subset_size() -> usize {
    2_000
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams { difficulty: Difficulty::Medium, size: default_subset_size(), min_gap: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessRecord {
    pub sequence: Sequence,
    /// Normalized to [0,1] by the landscape extrema.
    pub fitness: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkSubset {
    pub records: Vec<FitnessRecord>,
    pub difficulty: Difficulty,
    /// Percentile window as CDF fractions.
    pub window: (f64, f64),
    /// The same window resolved to normalized fitness values.
    pub window_values: (f64, f64),
    pub min_gap: usize,
    pub landscape_id: String,
}

impl BenchmarkSubset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sequences(&self) -> Vec<Sequence> {
        self.records.iter().map(|r| r.sequence.clone()).collect()
    }

    pub fn fitness_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fitness).collect()
    }

    pub fn max_fitness(&self) -> f64 {
        self.records.iter().map(|r| r.fitness).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Draw a percentile-windowed, gap-constrained subset.
///
/// Candidates inside the window are visited in seeded shuffle order; each is
/// accepted iff its Hamming distance to *every* top-1% sequence is at least
/// `min_gap`. Runs out of candidates → construction error with counts.
pub fn build_benchmark(landscape: &Landscape, params: &BenchmarkParams) -> Result<BenchmarkSubset> {
    if !landscape.truth.exact && landscape.truth.scored.len() < 50_000 {
        return Err(Error::contract(format!(
            "non-enumerable landscape needs a ground-truth sample of ≥ 50k (have {})",
            landscape.truth.scored.len()
        )));
    }
    let (qlo, qhi) = params.difficulty.window();
    let min_gap = params.min_gap.unwrap_or_else(|| params.difficulty.default_min_gap());

    let n = landscape.truth.sorted_raw.len();
    let lo_raw = landscape.truth.sorted_raw[(qlo * (n - 1) as f64).floor() as usize];
    let hi_raw = landscape.truth.sorted_raw[(qhi * (n - 1) as f64).floor() as usize];

    let mut eligible: Vec<u64> = landscape
        .truth
        .scored
        .iter()
        .filter(|&&(_, s)| s >= lo_raw && s <= hi_raw)
        .map(|&(c, _)| c)
        .collect();

    // Seeded shuffle, then first-fit scan: uniform over the eligible set.
    let mut rng = stream(landscape.spec.seed, "benchmark-subset", params.difficulty as u64);
    use rand::seq::SliceRandom;
    eligible.shuffle(&mut rng);

    let mut records = Vec::with_capacity(params.size);
    let mut inspected = 0usize;
    for &code in &eligible {
        if records.len() == params.size {
            break;
        }
        inspected += 1;
        let seq = landscape.decode_code(code);
        let ok = landscape.truth.top_seqs.iter().all(|top| {
            // Inline Hamming with early exit at the gap threshold.
            let mut d = 0usize;
            for (x, y) in seq.indices().iter().zip(top.indices()) {
                if x != y {
                    d += 1;
                    if d >= min_gap {
                        break;
                    }
                }
            }
            d >= min_gap
        });
        if ok {
            let fitness = landscape.normalize(landscape.raw_score(seq.indices()));
            records.push(FitnessRecord { sequence: seq, fitness });
        }
    }

    if records.len() < params.size {
        return Err(Error::Construction(format!(
            "benchmark infeasible: wanted {} records, found {} after inspecting all {} window candidates \
             (difficulty {}, gap {}, window values [{:.4}, {:.4}])",
            params.size,
            records.len(),
            inspected,
            params.difficulty,
            min_gap,
            landscape.normalize(lo_raw),
            landscape.normalize(hi_raw),
        )));
    }

    Ok(BenchmarkSubset {
        records,
        difficulty: params.difficulty,
        window: (qlo, qhi),
        window_values: (landscape.normalize(lo_raw), landscape.normalize(hi_raw)),
        min_gap,
        landscape_id: landscape.id(),
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LandscapeFile {
    spec: LandscapeSpec,
    additive: Vec<f64>,
    epistatic: Vec<EpistaticTerm>,
}

pub fn save_landscape(path: &Path, landscape: &Landscape) -> Result<()> {
    let file = LandscapeFile {
        spec: landscape.spec.clone(),
        additive: landscape.additive.clone(),
        epistatic: landscape.epistatic.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Load a landscape; ground truth is recomputed (deterministic in contents).
pub fn load_landscape(path: &Path) -> Result<Landscape> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LandscapeFile = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;
    let vocab = Vocabulary::new(&file.spec.vocab)?;
    finish_landscape(file.spec, vocab, file.additive, file.epistatic)
}

#[derive(Serialize, Deserialize)]
struct SubsetFile {
    vocab: String,
    difficulty: Difficulty,
    window: (f64, f64),
    window_values: (f64, f64),
    min_gap: usize,
    landscape_id: String,
    records: Vec<SubsetRecord>,
}

#[derive(Serialize, Deserialize)]
struct SubsetRecord {
    sequence: String,
    fitness: f64,
}

pub fn save_subset(path: &Path, vocab: &Vocabulary, subset: &BenchmarkSubset) -> Result<()> {
    let file = SubsetFile {
        vocab: vocab.as_string(),
        difficulty: subset.difficulty,
        window: subset.window,
        window_values: subset.window_values,
        min_gap: subset.min_gap,
        landscape_id: subset.landscape_id.clone(),
        records: subset
            .records
            .iter()
            .map(|r| SubsetRecord { sequence: vocab.format(&r.sequence), fitness: r.fitness })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_subset(path: &Path) -> Result<(Vocabulary, BenchmarkSubset)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SubsetFile = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;
    let vocab = Vocabulary::new(&file.vocab)?;
    let mut records = Vec::with_capacity(file.records.len());
    for r in &file.records {
        let sequence = vocab
            .parse(&r.sequence)
            .map_err(|e| Error::format(path, format!("bad record sequence: {}", e)))?;
        if !(0.0..=1.0).contains(&r.fitness) {
            return Err(Error::format(path, format!("fitness {} outside [0,1]", r.fitness)));
        }
        records.push(FitnessRecord { sequence, fitness: r.fitness });
    }
    let subset = BenchmarkSubset {
        records,
        difficulty: file.difficulty,
        window: file.window,
        window_values: file.window_values,
        min_gap: file.min_gap,
        landscape_id: file.landscape_id,
    };
    Ok((vocab, subset))
}

/// (sequence, fitness) CSV export.
pub fn subset_to_csv(path: &Path, vocab: &Vocabulary, subset: &BenchmarkSubset) -> Result<()> {
    let mut text = String::from("sequence,fitness\n");
    for r in &subset.records {
        let _ = writeln!(text, "{},{}", vocab.format(&r.sequence), r.fitness);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
