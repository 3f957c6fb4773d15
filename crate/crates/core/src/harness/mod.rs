//! Experiment orchestration: run configuration, the end-to-end evaluation
//! protocol, artifact persistence, and the CLI.
//!
//! A [`RunConfig`] fully determines a run. Its content hash (minus the output
//! location) stamps every artifact the pipeline writes, so any later phase can
//! detect artifacts produced under a different configuration. Phases are
//! exposed individually (mirroring the CLI subcommands) and chained by
//! [`run_experiment`]; either route produces the same bytes on disk.
//!
//! The protocol per seed: draw `sampler.n` sequences from the trained flow,
//! keep the `top_k` best according to the surrogate ranker, score those with
//! the ground-truth oracle, and report median fitness, diversity, and novelty.
//! Aggregates over seeds are the mean and population standard deviation.
//!
//! The oracle is loaded only by the phases that are allowed to consult it
//! (benchmark construction and evaluation); training, sampling, and
//! augmentation phases cannot reach it by construction, and every phase
//! reports its measured oracle-call count so the final report can prove the
//! separation held.

mod artifacts;
mod cli;
mod phases;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::AugmentConfig;
use crate::error::{Error, Result};
use crate::flowmatch::{FlowModelConfig, FlowTrainConfig, LatentPrep, SamplerConfig};
use crate::landscape::ranker::RankerConfig;
use crate::landscape::{BenchmarkParams, LandscapeSpec};
use crate::latentcodec::CodecConfig;

pub use artifacts::{
    samples_file, verify_artifacts, ArtifactStamp, Manifest, RunDir, BENCHMARK_CSV, BENCHMARK_JSON,
    CHART_CSV, CODEC_CKPT, CONFIG_JSON, FLOW_CKPT, LANDSCAPE_JSON, MANIFEST_JSON, REPORT_JSON,
    SYNTHETIC_CSV, TIMINGS_JSON,
};
pub use cli::run as cli_run;
pub use phases::{
    phase_benchmark, phase_bootstrap, phase_evaluate, phase_landscape, phase_report, phase_sample,
    phase_train_codec, phase_train_flow, run_experiment, run_experiment_at, BootstrapSummary,
    SampleOutcome,
};
pub use report::{
    aggregate_metrics, chart_csv, read_phase_records, record_phase, render_table,
    validate_report_value, AggregateStats, AuditBlock, MetricTriple, PhaseRecord, RunReport,
    SeedEntry, REPORT_SCHEMA_VERSION,
};

/// Environment variable giving the default root directory for run output when
/// the config itself does not name one. The run then lands in a subdirectory
/// keyed by its config hash.
pub const OUTPUT_ROOT_ENV: &str = "LATENTFLOW_OUT";

/// Flow-model settings grouped: architecture, training budget, and how latent
/// targets are extracted from the codec posterior.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlowSection {
    pub model: FlowModelConfig,
    pub train: FlowTrainConfig,
    pub prep: LatentPrep,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            model: FlowModelConfig::default(),
            train: FlowTrainConfig::default(),
            prep: LatentPrep::PosteriorMean,
        }
    }
}

/// Everything a run depends on. Two configs with equal [`config_hash`] values
/// produce byte-identical reports.
///
/// `sampler.seed` is the one field the pipeline overrides: each entry in
/// `seeds` replaces it for that seed's sampling pass. `output` is where the
/// artifacts go and is deliberately excluded from the hash — moving a run
/// directory does not invalidate it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub landscape: LandscapeSpec,
    pub benchmark: BenchmarkParams,
    pub codec: CodecConfig,
    pub flow: FlowSection,
    pub ranker: RankerConfig,
    pub sampler: SamplerConfig,
    /// Sequences kept per seed after surrogate ranking.
    pub top_k: usize,
    /// Present ⇒ run one augmentation round between flow training and
    /// sampling; the retrained model becomes the run's flow checkpoint.
    pub bootstrap: Option<AugmentConfig>,
    /// One full sample-and-evaluate pass per entry; must be distinct.
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            landscape: LandscapeSpec::default(),
            benchmark: BenchmarkParams::default(),
            codec: CodecConfig::default(),
            flow: FlowSection::default(),
            ranker: RankerConfig::default(),
            sampler: SamplerConfig { n: 512, ..SamplerConfig::default() },
            top_k: 128,
            bootstrap: None,
            seeds: vec![0, 1, 2, 3, 4],
            output: None,
        }
    }
}

impl RunConfig {
    /// Smaller sampling budget for fast continuous-integration runs; training
    /// settings are untouched.
    pub fn ci_profile() -> Self {
        RunConfig {
            sampler: SamplerConfig { n: 64, ..SamplerConfig::default() },
            top_k: 16,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("a run needs at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("run seeds must be distinct"));
        }
        if self.sampler.n == 0 {
            return Err(Error::config("sampler.n must be at least 1"));
        }
        if self.sampler.steps == 0 {
            return Err(Error::config("sampler.steps must be at least 1"));
        }
        if !self.sampler.guidance.is_finite() || !self.sampler.target.is_finite() {
            return Err(Error::config("sampler guidance and target must be finite"));
        }
        if self.top_k < 2 {
            // Diversity is a pairwise statistic; a single kept sequence has none.
            return Err(Error::config("top_k must be at least 2"));
        }
        if self.top_k > self.sampler.n {
            return Err(Error::config(format!(
                "top_k {} exceeds the {} samples drawn per seed",
                self.top_k, self.sampler.n
            )));
        }
        if self.benchmark.size < 100 {
            // The surrogate ranker refuses smaller training sets.
            return Err(Error::config(format!(
                "benchmark.size {} is below the ranker's minimum of 100 records",
                self.benchmark.size
            )));
        }
        self.flow.train.validate()?;
        if let Some(b) = &self.bootstrap {
            b.validate()?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON serialization of the config, with the
/// `output` field removed. This is the staleness stamp on every artifact.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().expect("config is a JSON object").remove("output");
    let canon = serde_json::to_string(&v).expect("JSON value serializes");
    let digest = Sha256::digest(canon.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        use std::fmt::Write as _;
        let _ = write!(s, "{:02x}", b);
        s
    })
}

/// Split a `key=value` override argument at the first `=`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::config(format!(
            "override {:?} is not of the form key=value",
            arg
        ))),
    }
}

/// Load a config file, check it only uses known keys, apply dotted-path
/// overrides, and validate the result.
///
/// Overrides address keys of the *resolved* config (defaults filled in), so
/// `--set sampler.steps=40` works even when the file omits the sampler
/// section entirely. Values parse as JSON first and fall back to strings, so
/// `--set seeds=[0,1]` and `--set landscape.vocab=ACGT` both do what they
/// look like.
pub fn resolve_config(path: &Path, sets: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file_value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;
    let cfg: RunConfig = serde_json::from_value(file_value.clone())
        .map_err(|e| Error::Json { path: path.into(), detail: e.to_string() })?;

    // The derived deserializers silently drop unknown keys inside nested
    // sections; a typo'd hyperparameter would otherwise vanish into the
    // defaults. Walk the file against the resolved config to reject them.
    let mut canonical = serde_json::to_value(&cfg).expect("config serializes");
    check_known_paths(&file_value, &canonical, String::new())
        .map_err(|detail| Error::format(path, detail))?;

    let mut cfg = cfg;
    for (key, raw) in sets {
        apply_override(&mut canonical, key, raw)?;
        cfg = serde_json::from_value(canonical.clone())
            .map_err(|e| Error::config(format!("override {}={} is invalid: {}", key, raw, e)))?;
        // Re-serialize so later overrides see the effects of this one (e.g. a
        // whole object assigned to `bootstrap` gets its defaults filled in).
        canonical = serde_json::to_value(&cfg).expect("config serializes");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_known_paths(
    file: &serde_json::Value,
    canon: &serde_json::Value,
    prefix: String,
) -> std::result::Result<(), String> {
    let (Some(fo), Some(co)) = (file.as_object(), canon.as_object()) else {
        return Ok(());
    };
    for (k, fv) in fo {
        let full = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        match co.get(k) {
            None => return Err(format!("unknown config key `{}`", full)),
            Some(cv) => check_known_paths(fv, cv, full)?,
        }
    }
    Ok(())
}

fn apply_override(canonical: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key `{}` has an empty path segment", key)));
    }
    let mut cursor = &mut *canonical;
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::config(format!(
                "override key `{}`: `{}` is not a config section",
                key,
                segments[..i].join(".")
            ))
        })?;
        let known = obj.keys().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        let entry = obj.get_mut(*seg).ok_or_else(|| {
            Error::config(format!(
                "override key `{}`: no key `{}` here (known: {})",
                key, seg, known
            ))
        })?;
        if i + 1 == segments.len() {
            *entry = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            return Ok(());
        }
        cursor = entry;
    }
    unreachable!("loop returns on the last segment");
}

/// Where a run's artifacts live: the config's `output` if set, otherwise a
/// hash-keyed subdirectory of the root named by [`OUTPUT_ROOT_ENV`].
pub fn resolve_run_dir(cfg: &RunConfig) -> Result<RunDir> {
    if let Some(out) = &cfg.output {
        return Ok(RunDir::new(out.clone()));
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => {
            let hash = config_hash(cfg);
            Ok(RunDir::new(PathBuf::from(root).join(format!("run-{}", &hash[..12]))))
        }
        None => Err(Error::config(format!(
            "no output directory: set `output` in the config, pass --out, or export {}",
            OUTPUT_ROOT_ENV
        ))),
    }
}
