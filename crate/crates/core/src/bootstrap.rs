//! Self-augmentation: generate guided samples across a grid of target
//! fitness values, label them with a noise-perturbed copy of their own
//! target, fold them into the training set, and retrain the velocity model.
//!
//! The ground-truth oracle plays no part in any of this — synthetic labels
//! come from the generating target itself, and the audit counter proves it.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{
    cfg_velocity, latent_dataset, train_flow, train_flow_warm, FlowTrainConfig, FlowModelConfig,
    LatentPrep, SamplerConfig, VelocityField, VelocityModel,
};
use crate::landscape::{BenchmarkSubset, FitnessRecord, Landscape};
use crate::latentcodec::Codec;
use crate::numcore::rng::{derive_seed, stream, DetRng};
use crate::numcore::Tensor;
use crate::seqkit::{Sequence, Vocabulary};

/// Per-target attempts allowed beyond the quota before a target is declared
/// unsamplable.
const RETRY_FACTOR: usize = 10;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentConfig {
    /// Target-fitness interval [f_lo, f_hi] the grid spans.
    pub interval: (f64, f64),
    /// Grid size |F|.
    pub grid: usize,
    /// Guidance scale used while generating.
    pub guidance: f64,
    /// Euler steps per sample.
    pub steps: usize,
    /// Label noise scale q in f̂ = f + q·η.
    pub noise: f64,
    /// Synthetic budget as a fraction of the base set, ceil-rounded.
    pub expansion: f64,
    /// Conditioning dropout for the retraining run.
    pub retrain_p: f64,
    /// Retrain from the round-0 parameters instead of a fresh init.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            interval: (0.05, 0.5),
            grid: 20,
            guidance: 0.1,
            steps: 40,
            noise: 0.01,
            expansion: 0.25,
            retrain_p: 0.1,
            warm_start: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval.0 >= self.interval.1 {
            return Err(Error::config(format!(
                "degenerate target interval [{}, {}]",
                self.interval.0, self.interval.1
            )));
        }
        if self.grid == 0 {
            return Err(Error::config("target grid needs at least one value"));
        }
        if self.expansion <= 0.0 {
            return Err(Error::config(format!("expansion factor must be positive, got {}", self.expansion)));
        }
        if !(0.0..=1.0).contains(&self.retrain_p) {
            return Err(Error::config(format!("retrain dropout {} outside [0, 1]", self.retrain_p)));
        }
        if self.noise < 0.0 {
            return Err(Error::config(format!("label noise scale must be nonnegative, got {}", self.noise)));
        }
        if self.steps == 0 {
            return Err(Error::config("sampling needs at least one Euler step"));
        }
        Ok(())
    }
}

/// One generated record with full provenance: the label is derived from the
/// generating target, never from an oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    pub sequence: Sequence,
    /// Perturbed label f̂ = target + noise·eta.
    pub label: f64,
    /// The grid target the sample was conditioned on.
    pub target: f64,
    /// The stored standard-normal noise draw.
    pub eta: f64,
    /// Seed of the rng stream that produced this sample's trajectory.
    pub sample_seed: u64,
    /// Attempt index within the target's stream (equals its position unless
    /// earlier attempts diverged and were skipped).
    pub attempt: usize,
}

/// The base set plus synthetic additions. Base records are carried through
/// untouched so the augmentation provably never rewrites real data.
#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub base: Vec<FitnessRecord>,
    pub synthetic: Vec<SyntheticRecord>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.base.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty() && self.synthetic.is_empty()
    }

    /// (sequence, label) pairs for flow training: real fitness for base
    /// records, perturbed targets for synthetic ones.
    pub fn training_pairs(&self) -> (Vec<Sequence>, Vec<f64>) {
        let mut seqs = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for r in &self.base {
            seqs.push(r.sequence.clone());
            labels.push(r.fitness);
        }
        for s in &self.synthetic {
            seqs.push(s.sequence.clone());
            labels.push(s.label);
        }
        (seqs, labels)
    }
}

/// `n` evenly spaced targets across the interval, endpoints included; a
/// single-value grid sits at the midpoint.
pub fn fitness_grid(interval: (f64, f64), n: usize) -> Result<Vec<f64>> {
    let (lo, hi) = interval;
    if lo >= hi {
        return Err(Error::contract(format!("degenerate target interval [{}, {}]", lo, hi)));
    }
    if n == 0 {
        return Err(Error::contract("fitness grid needs at least one value"));
    }
    if n == 1 {
        return Ok(vec![(lo + hi) / 2.0]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n).map(|i| lo + step * i as f64).collect())
}

/// Split `budget` over `n_targets` as evenly as possible; the remainder goes
/// one-per-target starting from the lowest (index 0 = lowest grid value).
pub(crate) fn allocate_budget(budget: usize, n_targets: usize) -> Vec<usize> {
    let each = budget / n_targets;
    let extra = budget % n_targets;
    (0..n_targets).map(|i| each + usize::from(i < extra)).collect()
}

/// One guided sample: integrate from target-seeded noise, decode to a
/// sequence. Fails only if the trajectory leaves the finite range.
fn sample_one<F: VelocityField + ?Sized>(
    model: &F,
    codec: &Codec,
    target: f64,
    cfg: &AugmentConfig,
    rng: &mut DetRng,
) -> Result<Sequence> {
    let [l, d] = model.latent_shape();
    let coords = l * d;
    let z0: Vec<f64> = (0..coords).map(|_| rng.sample(StandardNormal)).collect();
    let mut z = Tensor::new(vec![l, d], z0)?;
    let k = cfg.steps as f64;
    for step in 0..cfg.steps {
        let t = step as f64 / k;
        let v = cfg_velocity(model, &z, t, target, cfg.guidance)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += vi / k;
        }
        if z.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::SamplingDiverged { step });
        }
    }
    let h = codec.decompress(&z)?;
    let (_, seq) = codec.decode_sequence(&h)?;
    Ok(seq)
}

/// Algorithm: spread ceil(expansion·|base|) guided samples across the target
/// grid, label each with its own (noise-perturbed) target, and return the
/// base set plus the synthetic records.
///
/// A diverging trajectory is skipped and redrawn from the next attempt index,
/// up to a bounded number of retries per target.
pub fn augment<F: VelocityField + ?Sized>(
    model: &F,
    codec: &Codec,
    base: &BenchmarkSubset,
    cfg: &AugmentConfig,
) -> Result<AugmentedSet> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(Error::contract("augmentation needs a non-empty base set"));
    }
    if model.latent_shape() != codec.latent_shape() {
        return Err(Error::config(format!(
            "velocity model latent shape {:?} does not match codec latent shape {:?}",
            model.latent_shape(),
            codec.latent_shape()
        )));
    }
    let budget = (cfg.expansion * base.len() as f64).ceil() as usize;
    let targets = fitness_grid(cfg.interval, cfg.grid)?;
    let quotas = allocate_budget(budget, targets.len());

    let mut synthetic = Vec::with_capacity(budget);
    for (ti, (&target, &quota)) in targets.iter().zip(&quotas).enumerate() {
        let target_seed = derive_seed(cfg.seed, "augment-target", ti as u64);
        let mut produced = 0usize;
        let mut attempt = 0usize;
        while produced < quota {
            if attempt >= quota * RETRY_FACTOR {
                return Err(Error::contract(format!(
                    "target {} ({}) failed to produce {} samples within {} attempts",
                    ti, target, quota, attempt
                )));
            }
            let sample_seed = derive_seed(target_seed, "sample", attempt as u64);
            let mut rng = stream(target_seed, "sample", attempt as u64);
            match sample_one(model, codec, target, cfg, &mut rng) {
                Ok(sequence) => {
                    // Label noise comes from a separate stream so a skipped
                    // trajectory never shifts another record's η.
                    let eta: f64 = stream(target_seed, "label-noise", attempt as u64).sample(StandardNormal);
                    synthetic.push(SyntheticRecord {
                        sequence,
                        label: target + cfg.noise * eta,
                        target,
                        eta,
                        sample_seed,
                        attempt,
                    });
                    produced += 1;
                }
                Err(Error::SamplingDiverged { .. }) => {}
                Err(other) => return Err(other),
            }
            attempt += 1;
        }
    }

    Ok(AugmentedSet { base: base.records.clone(), synthetic })
}

/// Report of one bootstrap round. Medians come from oracle evaluation of
/// fresh sample batches — the only place the oracle is touched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub base_size: usize,
    pub synthetic_size: usize,
    /// Median oracle fitness of the round-0 model's evaluation batch.
    pub pre_median: f64,
    /// Same batch protocol after retraining on the augmented set.
    pub post_median: f64,
    pub pre_best: f64,
    pub post_best: f64,
    /// Oracle calls observed during training + augmentation. Always 0; the
    /// round errors out otherwise.
    pub train_audit_delta: u64,
    /// Oracle calls spent on the two evaluation batches.
    pub eval_audit_delta: u64,
}

pub struct BootstrapOutcome {
    pub round0: VelocityModel,
    pub retrained: VelocityModel,
    pub augmented: AugmentedSet,
    pub report: BootstrapReport,
}

/// Training hyperparameters for the post-augmentation retrain: same budget as
/// the base run, but with the bootstrap dropout rate and a derived seed so the
/// retrain's draws never collide with round 0's.
pub fn retrain_config(tcfg: &FlowTrainConfig, acfg: &AugmentConfig) -> FlowTrainConfig {
    FlowTrainConfig {
        p_uncond: acfg.retrain_p,
        seed: derive_seed(tcfg.seed, "bootstrap-retrain", 0),
        ..tcfg.clone()
    }
}

fn median_and_best(landscape: &Landscape, seqs: &[Sequence]) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(seqs.len());
    for s in seqs {
        scores.push(landscape.oracle_score(s)?);
    }
    scores.sort_by(|a, b| a.total_cmp(b));
    let median = scores[(scores.len() - 1) / 2];
    let best = *scores.last().expect("non-empty eval batch");
    Ok((median, best))
}

/// One full round: train v on the base set, augment, retrain on the
/// augmented set (fresh init unless `warm_start`), and score both models on
/// the oracle with identical sampler settings.
///
/// The codec stays frozen throughout — callers can assert its parameters are
/// bit-identical afterwards — and the oracle audit counter must not move
/// during training or augmentation.
pub fn bootstrap_round(
    landscape: &Landscape,
    base: &BenchmarkSubset,
    codec: &Codec,
    mcfg: &FlowModelConfig,
    tcfg: &FlowTrainConfig,
    acfg: &AugmentConfig,
    eval: &SamplerConfig,
) -> Result<BootstrapOutcome> {
    acfg.validate()?;
    if eval.n == 0 {
        return Err(Error::config("bootstrap evaluation needs a non-empty sample batch"));
    }
    let audit_start = landscape.audit_count();

    // Round 0: fit the velocity field to the real records.
    let seqs = base.sequences();
    let fits = base.fitness_values();
    let latents = latent_dataset(codec, &seqs, &fits, LatentPrep::PosteriorMean)?;
    let round0 = train_flow(&latents, mcfg, tcfg, None)?.model;

    // Augment with guided samples labeled by their own targets.
    let augmented = augment(&round0, codec, base, acfg)?;

    // Retrain on the augmented pairs with the bootstrap dropout rate.
    let (aug_seqs, aug_labels) = augmented.training_pairs();
    let aug_latents = latent_dataset(codec, &aug_seqs, &aug_labels, LatentPrep::PosteriorMean)?;
    let retrain_tcfg = retrain_config(tcfg, acfg);
    let retrained = if acfg.warm_start {
        train_flow_warm(&aug_latents, &round0, &retrain_tcfg, None)?.model
    } else {
        train_flow(&aug_latents, mcfg, &retrain_tcfg, None)?.model
    };

    let train_audit_delta = landscape.audit_count() - audit_start;
    if train_audit_delta != 0 {
        return Err(Error::contract(format!(
            "oracle was consulted {} times during bootstrap training/augmentation",
            train_audit_delta
        )));
    }

    // Evaluation: identical sampler settings for both models, oracle scoring
    // allowed from here on.
    let pre_batch = crate::flowmatch::generate(&round0, codec, eval)?;
    let post_batch = crate::flowmatch::generate(&retrained, codec, eval)?;
    let (pre_median, pre_best) = median_and_best(landscape, &pre_batch)?;
    let (post_median, post_best) = median_and_best(landscape, &post_batch)?;
    let eval_audit_delta = landscape.audit_count() - audit_start;

    let report = BootstrapReport {
        base_size: base.len(),
        synthetic_size: augmented.synthetic.len(),
        pre_median,
        post_median,
        pre_best,
        post_best,
        train_audit_delta,
        eval_audit_delta,
    };
    Ok(BootstrapOutcome { round0, retrained, augmented, report })
}

/// Audit export of the synthetic records: one row per sample with enough
/// provenance to replay the labels.
pub fn write_synthetic_csv(path: &Path, vocab: &Vocabulary, records: &[SyntheticRecord]) -> Result<()> {
    let mut out = String::from("sequence,label,target,eta,sample_seed,attempt\n");
    for r in records {
        let seq = vocab.format(&r.sequence);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            seq, r.label, r.target, r.eta, r.sample_seed, r.attempt
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
