//! The pipeline phases behind the CLI subcommands, and [`run_experiment`]
//! which chains them.
//!
//! Each phase reads its inputs from the run directory (verifying stamps),
//! writes its outputs, and returns its result together with the number of
//! oracle calls it made. Phases that must not consult the oracle never load
//! the landscape at all — the count they report is structural, not a promise.

use crate::bootstrap::{augment, retrain_config, write_synthetic_csv};
use crate::error::{Error, Result};
use crate::flowmatch::{
    generate, latent_dataset, load_flow, save_flow, train_flow, train_flow_warm, FlowTraining,
    SamplerConfig,
};
use crate::landscape::ranker::{rank_topk, train_ranker};
use crate::landscape::{
    build_benchmark, load_landscape, load_subset, make_landscape, save_landscape, save_subset,
    subset_to_csv, BenchmarkSubset, Landscape,
};
use crate::latentcodec::{load_codec, save_codec, train_codec, Codec};
use crate::seqkit::{read_sequences, write_sequences, MetricsReport};

use super::artifacts::{
    check_artifact, samples_file, sidecar_name, stamp_files, unstamp_file, verify_artifacts,
    ArtifactState, RunDir, BENCHMARK_CSV, BENCHMARK_JSON, CHART_CSV, CODEC_CKPT, CONFIG_JSON,
    FLOW_CKPT, LANDSCAPE_JSON, REPORT_JSON, SYNTHETIC_CSV,
};
use super::report::{
    aggregate_metrics, chart_csv, read_phase_records, record_phase, validate_report_value,
    AuditBlock, PhaseRecord, RunReport, SeedEntry, REPORT_SCHEMA_VERSION,
};
use super::{config_hash, resolve_run_dir, RunConfig};

/// Phase names as they appear in `timings.json`; identical to the CLI
/// subcommand spellings.
pub const PHASE_LANDSCAPE: &str = "landscape-gen";
pub const PHASE_BENCHMARK: &str = "benchmark-build";
pub const PHASE_TRAIN_CODEC: &str = "train-codec";
pub const PHASE_TRAIN_FLOW: &str = "train-flow";
pub const PHASE_BOOTSTRAP: &str = "bootstrap";
pub const PHASE_SAMPLE: &str = "sample";
pub const PHASE_EVALUATE: &str = "evaluate";

/// Create the run directory and persist the resolved config this invocation
/// is operating under. Every phase starts here, so `config.json` always
/// reflects the latest resolved configuration and artifacts from older
/// configurations fail their stamp checks.
fn prepare(rd: &RunDir, cfg: &RunConfig, hash: &str) -> Result<()> {
    cfg.validate()?;
    rd.create()?;
    let path = rd.path(CONFIG_JSON);
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Json { path: path.clone(), detail: e.to_string() })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    stamp_files(rd, hash, &[CONFIG_JSON], &[])
}

/// Build the ground-truth landscape and persist it.
pub fn phase_landscape(rd: &RunDir, cfg: &RunConfig) -> Result<(Landscape, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    let landscape = make_landscape(&cfg.landscape)?;
    save_landscape(&rd.path(LANDSCAPE_JSON), &landscape)?;
    stamp_files(rd, &hash, &[LANDSCAPE_JSON], &[])?;
    let calls = landscape.audit_count();
    Ok((landscape, calls))
}

/// Draw the restricted training subset from the persisted landscape.
pub fn phase_benchmark(rd: &RunDir, cfg: &RunConfig) -> Result<(BenchmarkSubset, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    verify_artifacts(rd, &hash, &[LANDSCAPE_JSON])?;
    let landscape = load_landscape(&rd.path(LANDSCAPE_JSON))?;
    let before = landscape.audit_count();
    let subset = build_benchmark(&landscape, &cfg.benchmark)?;
    save_subset(&rd.path(BENCHMARK_JSON), landscape.vocab(), &subset)?;
    subset_to_csv(&rd.path(BENCHMARK_CSV), landscape.vocab(), &subset)?;
    stamp_files(rd, &hash, &[BENCHMARK_JSON, BENCHMARK_CSV], &[])?;
    Ok((subset, landscape.audit_count() - before))
}

/// Train the sequence↔latent codec on the benchmark records. No oracle in
/// scope: the subset file carries its labels.
pub fn phase_train_codec(rd: &RunDir, cfg: &RunConfig) -> Result<(Codec, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    verify_artifacts(rd, &hash, &[BENCHMARK_JSON])?;
    let (vocab, subset) = load_subset(&rd.path(BENCHMARK_JSON))?;
    let codec = train_codec(&subset.sequences(), &vocab, &cfg.codec)?;
    save_codec(&rd.path(CODEC_CKPT), &codec)?;
    let sidecar = sidecar_name(CODEC_CKPT);
    stamp_files(rd, &hash, &[CODEC_CKPT, &sidecar], &[])?;
    Ok((codec, 0))
}

fn checkpoint_dir(rd: &RunDir, cfg: &RunConfig) -> Result<Option<std::path::PathBuf>> {
    if cfg.flow.train.checkpoint_every == 0 {
        return Ok(None);
    }
    let dir = rd.path("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(Some(dir))
}

/// Train the velocity field on the codec's latents of the benchmark records.
pub fn phase_train_flow(rd: &RunDir, cfg: &RunConfig) -> Result<(FlowTraining, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    let codec_sidecar = sidecar_name(CODEC_CKPT);
    let manifest =
        verify_artifacts(rd, &hash, &[BENCHMARK_JSON, CODEC_CKPT, &codec_sidecar])?;
    let codec = load_codec(&rd.path(CODEC_CKPT))?;
    let (_, subset) = load_subset(&rd.path(BENCHMARK_JSON))?;
    let latents =
        latent_dataset(&codec, &subset.sequences(), &subset.fitness_values(), cfg.flow.prep)?;
    let ckdir = checkpoint_dir(rd, cfg)?;
    let training = train_flow(&latents, &cfg.flow.model, &cfg.flow.train, ckdir.as_deref())?;
    save_flow(&rd.path(FLOW_CKPT), &training.model)?;
    let codec_sha = manifest.sha_of(CODEC_CKPT).expect("verified above").to_string();
    let flow_sidecar = sidecar_name(FLOW_CKPT);
    stamp_files(rd, &hash, &[FLOW_CKPT, &flow_sidecar], &[(CODEC_CKPT, codec_sha)])?;
    Ok((training, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSummary {
    pub synthetic: usize,
    /// Real + synthetic records the retrain saw.
    pub total_training: usize,
    pub warm_start: bool,
}

/// One augmentation round: guided samples from the current flow checkpoint
/// become noise-labeled synthetic records, and the checkpoint is replaced by
/// a model retrained on the union. The codec stays frozen; the oracle is
/// unreachable from here (synthetic labels are the generation targets).
pub fn phase_bootstrap(rd: &RunDir, cfg: &RunConfig) -> Result<(BootstrapSummary, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    let acfg = cfg
        .bootstrap
        .as_ref()
        .ok_or_else(|| Error::config("config has no bootstrap section"))?;
    let codec_sidecar = sidecar_name(CODEC_CKPT);
    let flow_sidecar = sidecar_name(FLOW_CKPT);
    let manifest = verify_artifacts(
        rd,
        &hash,
        &[BENCHMARK_JSON, CODEC_CKPT, &codec_sidecar, FLOW_CKPT, &flow_sidecar],
    )?;
    let codec = load_codec(&rd.path(CODEC_CKPT))?;
    let round0 = load_flow(&rd.path(FLOW_CKPT))?;
    let (vocab, subset) = load_subset(&rd.path(BENCHMARK_JSON))?;

    let augmented = augment(&round0, &codec, &subset, acfg)?;
    write_synthetic_csv(&rd.path(SYNTHETIC_CSV), &vocab, &augmented.synthetic)?;
    let codec_sha = manifest.sha_of(CODEC_CKPT).expect("verified above").to_string();
    let flow_sha = manifest.sha_of(FLOW_CKPT).expect("verified above").to_string();
    stamp_files(
        rd,
        &hash,
        &[SYNTHETIC_CSV],
        &[(CODEC_CKPT, codec_sha.clone()), (FLOW_CKPT, flow_sha)],
    )?;

    let (aug_seqs, aug_labels) = augmented.training_pairs();
    let latents = latent_dataset(&codec, &aug_seqs, &aug_labels, cfg.flow.prep)?;
    let tcfg = retrain_config(&cfg.flow.train, acfg);
    let ckdir = checkpoint_dir(rd, cfg)?;
    let retrained = if acfg.warm_start {
        train_flow_warm(&latents, &round0, &tcfg, ckdir.as_deref())?
    } else {
        train_flow(&latents, &cfg.flow.model, &tcfg, ckdir.as_deref())?
    };
    save_flow(&rd.path(FLOW_CKPT), &retrained.model)?;
    // Re-stamp: anything sampled from the pre-bootstrap checkpoint is now
    // stale via its recorded input hash. The synthetic set is an input here
    // (it is the training data), not the other way around.
    let manifest = verify_artifacts(rd, &hash, &[SYNTHETIC_CSV])?;
    let syn_sha = manifest.sha_of(SYNTHETIC_CSV).expect("just stamped").to_string();
    stamp_files(
        rd,
        &hash,
        &[FLOW_CKPT, &flow_sidecar],
        &[(CODEC_CKPT, codec_sha), (SYNTHETIC_CSV, syn_sha)],
    )?;
    Ok((
        BootstrapSummary {
            synthetic: augmented.synthetic.len(),
            total_training: augmented.len(),
            warm_start: acfg.warm_start,
        },
        0,
    ))
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub seed: u64,
    /// Sequences written, or why this seed produced nothing.
    pub outcome: std::result::Result<usize, String>,
}

/// Draw `sampler.n` sequences per run seed from the current flow checkpoint.
/// A failing seed (e.g. integration divergence) is recorded and skipped; the
/// evaluation phase reports it as incomplete.
pub fn phase_sample(rd: &RunDir, cfg: &RunConfig) -> Result<(Vec<SampleOutcome>, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    let codec_sidecar = sidecar_name(CODEC_CKPT);
    let flow_sidecar = sidecar_name(FLOW_CKPT);
    let manifest =
        verify_artifacts(rd, &hash, &[CODEC_CKPT, &codec_sidecar, FLOW_CKPT, &flow_sidecar])?;
    let codec = load_codec(&rd.path(CODEC_CKPT))?;
    let model = load_flow(&rd.path(FLOW_CKPT))?;
    let codec_sha = manifest.sha_of(CODEC_CKPT).expect("verified above").to_string();
    let flow_sha = manifest.sha_of(FLOW_CKPT).expect("verified above").to_string();

    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let name = samples_file(seed);
        let scfg = SamplerConfig { seed, ..cfg.sampler.clone() };
        match generate(&model, &codec, &scfg) {
            Ok(seqs) => {
                write_sequences(&rd.path(&name), &codec.vocab, &seqs)?;
                stamp_files(
                    rd,
                    &hash,
                    &[&name],
                    &[(CODEC_CKPT, codec_sha.clone()), (FLOW_CKPT, flow_sha.clone())],
                )?;
                outcomes.push(SampleOutcome { seed, outcome: Ok(seqs.len()) });
            }
            Err(e) => {
                // Drop any file a previous invocation left for this seed so
                // evaluation sees a missing seed, not a stale batch.
                unstamp_file(rd, &name)?;
                outcomes.push(SampleOutcome { seed, outcome: Err(e.to_string()) });
            }
        }
    }
    Ok((outcomes, 0))
}

/// Rank each seed's samples with the surrogate, score the kept top-k with the
/// oracle, and emit `report.json` plus `chart.csv`. This is the only phase
/// that touches the ground truth, and it reports how often.
pub fn phase_evaluate(rd: &RunDir, cfg: &RunConfig) -> Result<(RunReport, u64)> {
    let hash = config_hash(cfg);
    prepare(rd, cfg, &hash)?;
    let flow_sidecar = sidecar_name(FLOW_CKPT);
    let manifest =
        verify_artifacts(rd, &hash, &[LANDSCAPE_JSON, BENCHMARK_JSON, FLOW_CKPT, &flow_sidecar])?;
    let landscape = load_landscape(&rd.path(LANDSCAPE_JSON))?;
    let (vocab, subset) = load_subset(&rd.path(BENCHMARK_JSON))?;
    let train_sequences = subset.sequences();

    // The surrogate sees only the restricted records; training it costs no
    // oracle calls, and that is asserted, not assumed.
    let audit_before_ranker = landscape.audit_count();
    let ranker = train_ranker(&subset, &vocab, &cfg.ranker)?;
    if landscape.audit_count() != audit_before_ranker {
        return Err(Error::contract("surrogate training consulted the oracle"));
    }

    let mut entries = Vec::with_capacity(cfg.seeds.len());
    let mut any_samples = false;
    for &seed in &cfg.seeds {
        let name = samples_file(seed);
        match check_artifact(rd, &manifest, &hash, &name) {
            ArtifactState::Stale(e) => return Err(e),
            ArtifactState::Missing => {
                entries.push(SeedEntry {
                    seed,
                    metrics: None,
                    error: Some(format!("{} missing (run the sample phase)", name)),
                });
                continue;
            }
            ArtifactState::Ok => {}
        }
        any_samples = true;
        let evaluated = (|| -> Result<MetricsReport> {
            let seqs = read_sequences(&rd.path(&name), &vocab)?;
            if seqs.len() != cfg.sampler.n {
                return Err(Error::contract(format!(
                    "{} holds {} sequences, protocol expects {}",
                    name,
                    seqs.len(),
                    cfg.sampler.n
                )));
            }
            let top = rank_topk(&ranker, &seqs, cfg.top_k)?;
            let mut scores = Vec::with_capacity(top.len());
            for s in &top {
                scores.push(landscape.oracle_score(s)?);
            }
            // Oracle scores are already normalized to [0,1] by the landscape
            // extrema, so the identity range keeps them untouched.
            MetricsReport::compute(&scores, &top, &train_sequences, (0.0, 1.0), seed)
        })();
        match evaluated {
            Ok(m) => entries.push(SeedEntry { seed, metrics: Some(m), error: None }),
            Err(e) => entries.push(SeedEntry { seed, metrics: None, error: Some(e.to_string()) }),
        }
    }
    if !any_samples {
        return Err(Error::MissingArtifacts {
            files: cfg.seeds.iter().map(|&s| rd.path(&samples_file(s))).collect(),
        });
    }

    let oracle_calls = landscape.audit_count();
    let records = read_phase_records(rd);
    let phase_calls = |name: &str| records.get(name).map(|r| r.oracle_calls).unwrap_or(0);
    let incomplete = entries.iter().any(|e| e.metrics.is_none());
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: hash.clone(),
        method: if cfg.bootstrap.is_some() { "flow+bootstrap" } else { "flow" }.to_string(),
        samples_per_seed: cfg.sampler.n,
        top_k: cfg.top_k,
        aggregate: aggregate_metrics(&entries),
        seeds: entries,
        incomplete,
        audit: AuditBlock {
            train_codec: phase_calls(PHASE_TRAIN_CODEC),
            train_flow: phase_calls(PHASE_TRAIN_FLOW),
            bootstrap: phase_calls(PHASE_BOOTSTRAP),
            sample: phase_calls(PHASE_SAMPLE),
            evaluate: oracle_calls,
        },
    };

    let report_path = rd.path(REPORT_JSON);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Json { path: report_path.clone(), detail: e.to_string() })?;
    std::fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;
    let chart_path = rd.path(CHART_CSV);
    std::fs::write(&chart_path, chart_csv(&report)).map_err(|e| Error::io(&chart_path, e))?;
    // The report derives from the per-seed sample files; record them as
    // inputs so re-sampling flags a no-longer-current report.
    let inputs: Vec<(String, String)> = report
        .seeds
        .iter()
        .filter(|e| e.metrics.is_some())
        .filter_map(|e| {
            let name = samples_file(e.seed);
            manifest.sha_of(&name).map(|sha| (name, sha.to_string()))
        })
        .collect();
    let input_refs: Vec<(&str, String)> =
        inputs.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    stamp_files(rd, &hash, &[REPORT_JSON, CHART_CSV], &input_refs)?;
    Ok((report, oracle_calls))
}

/// Re-read a persisted report, schema-checking it first.
pub fn phase_report(rd: &RunDir, cfg: &RunConfig) -> Result<(RunReport, u64)> {
    let hash = config_hash(cfg);
    cfg.validate()?;
    verify_artifacts(rd, &hash, &[REPORT_JSON])?;
    let path = rd.path(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.clone(), detail: e.to_string() })?;
    validate_report_value(&value)?;
    let report: RunReport = serde_json::from_value(value)
        .map_err(|e| Error::Json { path, detail: e.to_string() })?;
    Ok((report, 0))
}

/// Run a phase, recording its wall-clock time and oracle-call count.
pub(super) fn timed<T>(
    rd: &RunDir,
    phase: &str,
    f: impl FnOnce() -> Result<(T, u64)>,
) -> Result<T> {
    let t0 = std::time::Instant::now();
    let (value, oracle_calls) = f()?;
    record_phase(rd, phase, PhaseRecord { seconds: t0.elapsed().as_secs_f64(), oracle_calls })?;
    Ok(value)
}

/// The full protocol into a specific directory. Identical configs reproduce
/// `report.json` byte for byte; wall-clock data goes to `timings.json`.
pub fn run_experiment_at(rd: &RunDir, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    timed(rd, PHASE_LANDSCAPE, || phase_landscape(rd, cfg))?;
    timed(rd, PHASE_BENCHMARK, || phase_benchmark(rd, cfg))?;
    timed(rd, PHASE_TRAIN_CODEC, || phase_train_codec(rd, cfg))?;
    timed(rd, PHASE_TRAIN_FLOW, || phase_train_flow(rd, cfg))?;
    if cfg.bootstrap.is_some() {
        timed(rd, PHASE_BOOTSTRAP, || phase_bootstrap(rd, cfg))?;
    }
    timed(rd, PHASE_SAMPLE, || phase_sample(rd, cfg))?;
    timed(rd, PHASE_EVALUATE, || phase_evaluate(rd, cfg))
}

/// [`run_experiment_at`] with the directory resolved from the config (or the
/// environment's output root).
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let rd = resolve_run_dir(cfg)?;
    run_experiment_at(&rd, cfg)
}
