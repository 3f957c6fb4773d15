//! Run reports: the schema-checked JSON artifact, chart-data CSV, per-phase
//! timing records, and the human-readable table.
//!
//! `report.json` is the determinism anchor — identical configs must reproduce
//! it byte for byte — so everything wall-clock-dependent lives in the
//! separate `timings.json`, which is explicitly outside that contract.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seqkit::MetricsReport;

use super::artifacts::{RunDir, TIMINGS_JSON};

/// Bumped when the report layout changes shape; readers check it first.
pub const REPORT_SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedEntry {
    pub seed: u64,
    /// Present iff this seed's pipeline completed.
    pub metrics: Option<MetricsReport>,
    /// Why the seed is incomplete, when it is.
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricTriple {
    pub median_fitness: f64,
    pub diversity: f64,
    pub novelty: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AggregateStats {
    pub n_complete: usize,
    pub mean: MetricTriple,
    /// Population standard deviation (σ over exactly the completed seeds, not
    /// a sample estimate) — a single seed therefore reports exactly 0.
    pub std: MetricTriple,
}

/// Oracle calls measured per phase. The training-side entries must be zero;
/// evaluation is the only phase allowed to consult the ground truth.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct AuditBlock {
    pub train_codec: u64,
    pub train_flow: u64,
    pub bootstrap: u64,
    pub sample: u64,
    pub evaluate: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u64,
    pub config_hash: String,
    /// Variant label for chart rows: "flow", or "flow+bootstrap" when an
    /// augmentation round ran.
    pub method: String,
    pub samples_per_seed: usize,
    pub top_k: usize,
    pub seeds: Vec<SeedEntry>,
    pub incomplete: bool,
    /// `None` when no seed completed.
    pub aggregate: Option<AggregateStats>,
    pub audit: AuditBlock,
}

/// Mean and population σ of each metric over the completed entries.
pub fn aggregate_metrics(entries: &[SeedEntry]) -> Option<AggregateStats> {
    let done: Vec<&MetricsReport> = entries.iter().filter_map(|e| e.metrics.as_ref()).collect();
    if done.is_empty() {
        return None;
    }
    let n = done.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| done.iter().map(|m| f(m)).sum::<f64>() / n;
    let std_of = |f: &dyn Fn(&MetricsReport) -> f64, mu: f64| {
        (done.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let fit: &dyn Fn(&MetricsReport) -> f64 = &|m| m.median_fitness;
    let div: &dyn Fn(&MetricsReport) -> f64 = &|m| m.diversity;
    let nov: &dyn Fn(&MetricsReport) -> f64 = &|m| m.novelty;
    let mean =
        MetricTriple { median_fitness: mean_of(fit), diversity: mean_of(div), novelty: mean_of(nov) };
    let std = MetricTriple {
        median_fitness: std_of(fit, mean.median_fitness),
        diversity: std_of(div, mean.diversity),
        novelty: std_of(nov, mean.novelty),
    };
    Some(AggregateStats { n_complete: done.len(), mean, std })
}

// ---------------------------------------------------------------------------
// Schema check
// ---------------------------------------------------------------------------

/// Validate a parsed `report.json` against the version-1 schema: exact key
/// sets, value kinds, and the schema version itself. Reports are consumed by
/// external tooling, so emission drift must fail loudly here.
pub fn validate_report_value(v: &Value) -> Result<()> {
    let fail = |detail: String| Error::Contract(format!("report schema: {}", detail));
    let obj = |v: &Value, ctx: &str| -> Result<serde_json::Map<String, Value>> {
        v.as_object().cloned().ok_or_else(|| fail(format!("{} must be an object", ctx)))
    };
    let check_keys = |m: &serde_json::Map<String, Value>, ctx: &str, keys: &[&str]| -> Result<()> {
        for k in keys {
            if !m.contains_key(*k) {
                return Err(fail(format!("{} is missing key `{}`", ctx, k)));
            }
        }
        for k in m.keys() {
            if !keys.contains(&k.as_str()) {
                return Err(fail(format!("{} has unexpected key `{}`", ctx, k)));
            }
        }
        Ok(())
    };
    let number = |m: &serde_json::Map<String, Value>, ctx: &str, k: &str| -> Result<()> {
        m[k].as_f64().map(|_| ()).ok_or_else(|| fail(format!("{}.{} must be a number", ctx, k)))
    };
    let uint = |m: &serde_json::Map<String, Value>, ctx: &str, k: &str| -> Result<()> {
        m[k].as_u64().map(|_| ()).ok_or_else(|| fail(format!("{}.{} must be an unsigned integer", ctx, k)))
    };
    let triple = |v: &Value, ctx: &str| -> Result<()> {
        let m = obj(v, ctx)?;
        check_keys(&m, ctx, &["median_fitness", "diversity", "novelty"])?;
        for k in ["median_fitness", "diversity", "novelty"] {
            number(&m, ctx, k)?;
        }
        Ok(())
    };

    let root = obj(v, "report")?;
    check_keys(
        &root,
        "report",
        &[
            "schema_version",
            "config_hash",
            "method",
            "samples_per_seed",
            "top_k",
            "seeds",
            "incomplete",
            "aggregate",
            "audit",
        ],
    )?;
    match root["schema_version"].as_u64() {
        Some(REPORT_SCHEMA_VERSION) => {}
        Some(other) => return Err(fail(format!("version {} (reader expects {})", other, REPORT_SCHEMA_VERSION))),
        None => return Err(fail("schema_version must be an unsigned integer".into())),
    }
    let hash = root["config_hash"]
        .as_str()
        .ok_or_else(|| fail("config_hash must be a string".into()))?;
    if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(fail("config_hash must be 64 hex characters".into()));
    }
    if !root["method"].is_string() {
        return Err(fail("method must be a string".into()));
    }
    uint(&root, "report", "samples_per_seed")?;
    uint(&root, "report", "top_k")?;
    if !root["incomplete"].is_boolean() {
        return Err(fail("incomplete must be a boolean".into()));
    }

    let seeds = root["seeds"].as_array().ok_or_else(|| fail("seeds must be an array".into()))?;
    for (i, entry) in seeds.iter().enumerate() {
        let ctx = format!("seeds[{}]", i);
        let m = obj(entry, &ctx)?;
        check_keys(&m, &ctx, &["seed", "metrics", "error"])?;
        uint(&m, &ctx, "seed")?;
        match &m["metrics"] {
            Value::Null => {}
            mv => {
                let mm = obj(mv, &format!("{}.metrics", ctx))?;
                check_keys(
                    &mm,
                    &format!("{}.metrics", ctx),
                    &["median_fitness", "diversity", "novelty", "n_sequences", "seed"],
                )?;
                for k in ["median_fitness", "diversity", "novelty"] {
                    number(&mm, &ctx, k)?;
                }
                uint(&mm, &ctx, "n_sequences")?;
                uint(&mm, &ctx, "seed")?;
            }
        }
        if !(m["error"].is_null() || m["error"].is_string()) {
            return Err(fail(format!("{}.error must be null or a string", ctx)));
        }
    }

    match &root["aggregate"] {
        Value::Null => {}
        av => {
            let am = obj(av, "aggregate")?;
            check_keys(&am, "aggregate", &["n_complete", "mean", "std"])?;
            uint(&am, "aggregate", "n_complete")?;
            triple(&am["mean"], "aggregate.mean")?;
            triple(&am["std"], "aggregate.std")?;
        }
    }

    let am = obj(&root["audit"], "audit")?;
    check_keys(&am, "audit", &["train_codec", "train_flow", "bootstrap", "sample", "evaluate"])?;
    for k in ["train_codec", "train_flow", "bootstrap", "sample", "evaluate"] {
        uint(&am, "audit", k)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Chart data
// ---------------------------------------------------------------------------

/// One CSV row per completed seed with the three metric axes.
pub fn chart_csv(report: &RunReport) -> String {
    let mut out = String::from("method,seed,median_fitness,diversity,novelty\n");
    for entry in &report.seeds {
        if let Some(m) = &entry.metrics {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                report.method, entry.seed, m.median_fitness, m.diversity, m.novelty
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Timings
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhaseRecord {
    pub seconds: f64,
    pub oracle_calls: u64,
}

#[derive(Serialize, Deserialize, Default)]
struct TimingsFile {
    phases: BTreeMap<String, PhaseRecord>,
}

/// Merge one phase's record into `timings.json`. Wall-clock numbers are
/// best-effort bookkeeping: a missing or unparsable file starts fresh rather
/// than failing the phase that tried to log.
pub fn record_phase(rd: &RunDir, phase: &str, record: PhaseRecord) -> Result<()> {
    let path = rd.path(TIMINGS_JSON);
    let mut file: TimingsFile = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    file.phases.insert(phase.to_string(), record);
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Json { path: path.clone(), detail: e.to_string() })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// All recorded phase entries; empty when nothing has been logged.
pub fn read_phase_records(rd: &RunDir) -> BTreeMap<String, PhaseRecord> {
    std::fs::read_to_string(rd.path(TIMINGS_JSON))
        .ok()
        .and_then(|t| serde_json::from_str::<TimingsFile>(&t).ok())
        .map(|f| f.phases)
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Fixed-width metric table for terminal output.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "method {}   top {} of {} per seed   config {}\n",
        report.method,
        report.top_k,
        report.samples_per_seed,
        &report.config_hash[..12]
    ));
    out.push_str(&format!(
        "{:<8} {:>16} {:>12} {:>12}\n",
        "seed", "median_fitness", "diversity", "novelty"
    ));
    for entry in &report.seeds {
        match (&entry.metrics, &entry.error) {
            (Some(m), _) => out.push_str(&format!(
                "{:<8} {:>16.6} {:>12.4} {:>12.4}\n",
                entry.seed, m.median_fitness, m.diversity, m.novelty
            )),
            (None, err) => out.push_str(&format!(
                "{:<8} failed: {}\n",
                entry.seed,
                err.as_deref().unwrap_or("unknown")
            )),
        }
    }
    if let Some(agg) = &report.aggregate {
        out.push_str(&format!(
            "{:<8} {:>16.6} {:>12.4} {:>12.4}\n",
            "mean", agg.mean.median_fitness, agg.mean.diversity, agg.mean.novelty
        ));
        out.push_str(&format!(
            "{:<8} {:>16.6} {:>12.4} {:>12.4}   (population σ, n={})\n",
            "std", agg.std.median_fitness, agg.std.diversity, agg.std.novelty, agg.n_complete
        ));
    }
    if report.incomplete {
        let n_failed = report.seeds.iter().filter(|e| e.metrics.is_none()).count();
        out.push_str(&format!("incomplete: {} seed(s) failed\n", n_failed));
    }
    out.push_str(&format!(
        "oracle calls: evaluate={}, training/sampling phases={}\n",
        report.audit.evaluate,
        report.audit.train_codec + report.audit.train_flow + report.audit.bootstrap + report.audit.sample
    ));
    out
}
