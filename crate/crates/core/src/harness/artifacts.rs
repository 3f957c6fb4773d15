//! Artifact layout and staleness detection.
//!
//! Every file a phase writes gets a manifest entry: the config hash it was
//! produced under, the SHA-256 of its bytes, and optionally the hashes of the
//! upstream artifacts it was derived from. Verification then catches all
//! three failure modes — files missing, files produced under a different
//! config, and files whose inputs have since been rebuilt (e.g. sampling
//! before an augmentation round replaced the flow checkpoint).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_JSON: &str = "config.json";
pub const LANDSCAPE_JSON: &str = "landscape.json";
pub const BENCHMARK_JSON: &str = "benchmark.json";
/// Human-readable export of the benchmark records; the JSON is the loadable one.
pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const CODEC_CKPT: &str = "codec.ckpt";
pub const FLOW_CKPT: &str = "flow.ckpt";
pub const SYNTHETIC_CSV: &str = "synthetic.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CHART_CSV: &str = "chart.csv";
pub const TIMINGS_JSON: &str = "timings.json";
pub const MANIFEST_JSON: &str = "manifest.json";

/// `samples_seed{seed}.txt` — one file per run seed.
pub fn samples_file(seed: u64) -> String {
    format!("samples_seed{}.txt", seed)
}

/// Sidecar name for a checkpoint artifact (`x.ckpt` → `x.ckpt.json`).
pub fn sidecar_name(ckpt: &str) -> String {
    format!("{}.json", ckpt)
}

/// A run's directory plus path arithmetic.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> RunDir {
        RunDir { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactStamp {
    /// [`super::config_hash`] of the config the producing phase ran under.
    pub config_hash: String,
    /// SHA-256 of the artifact's bytes at production time.
    pub sha256: String,
    pub bytes: u64,
    /// Upstream artifact name → its `sha256` when this artifact was built.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactStamp>,
}

impl Manifest {
    /// Recorded content hash of `name`, if stamped.
    pub fn sha_of(&self, name: &str) -> Option<&str> {
        self.artifacts.get(name).map(|s| s.sha256.as_str())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        use std::fmt::Write as _;
        let _ = write!(s, "{:02x}", b);
        s
    })
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

/// `Ok(None)` when no manifest exists yet; a present-but-unreadable manifest
/// is an error (it is the integrity record, not best-effort bookkeeping).
pub fn load_manifest(rd: &RunDir) -> Result<Option<Manifest>> {
    let path = rd.path(MANIFEST_JSON);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let m = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: path.clone(), detail: e.to_string() })?;
    Ok(Some(m))
}

pub fn save_manifest(rd: &RunDir, manifest: &Manifest) -> Result<()> {
    let path = rd.path(MANIFEST_JSON);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Json { path: path.clone(), detail: e.to_string() })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Stamp freshly written files into the manifest. `inputs` applies to every
/// named file (phases stamp one artifact group at a time).
pub fn stamp_files(
    rd: &RunDir,
    config_hash: &str,
    names: &[&str],
    inputs: &[(&str, String)],
) -> Result<()> {
    let mut manifest = load_manifest(rd)?.unwrap_or_default();
    for name in names {
        let (sha, bytes) = sha256_file(&rd.path(name))?;
        let stamp = ArtifactStamp {
            config_hash: config_hash.to_string(),
            sha256: sha,
            bytes,
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        };
        manifest.artifacts.insert(name.to_string(), stamp);
    }
    save_manifest(rd, &manifest)
}

/// Drop a file and its stamp (used when a per-seed sample pass fails and a
/// previous invocation's output must not linger).
pub fn unstamp_file(rd: &RunDir, name: &str) -> Result<()> {
    match std::fs::remove_file(rd.path(name)) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(rd.path(name), e)),
    }
    let mut manifest = load_manifest(rd)?.unwrap_or_default();
    if manifest.artifacts.remove(name).is_some() {
        save_manifest(rd, &manifest)?;
    }
    Ok(())
}

/// How one artifact fares under verification; [`verify_artifacts`] folds
/// these into hard errors, while evaluation treats `Missing` per seed.
pub enum ArtifactState {
    Ok,
    Missing,
    Stale(Error),
}

pub fn check_artifact(
    rd: &RunDir,
    manifest: &Manifest,
    config_hash: &str,
    name: &str,
) -> ArtifactState {
    let path = rd.path(name);
    let stamp = match manifest.artifacts.get(name) {
        Some(s) => s,
        None => return ArtifactState::Missing,
    };
    if !path.exists() {
        return ArtifactState::Missing;
    }
    if stamp.config_hash != config_hash {
        return ArtifactState::Stale(Error::StaleArtifact {
            path,
            detail: format!(
                "built under config {}…, current config is {}…",
                &stamp.config_hash[..12.min(stamp.config_hash.len())],
                &config_hash[..12]
            ),
        });
    }
    match sha256_file(&path) {
        Err(e) => ArtifactState::Stale(e),
        Ok((sha, _)) if sha != stamp.sha256 => ArtifactState::Stale(Error::StaleArtifact {
            path,
            detail: "content hash does not match its manifest stamp".to_string(),
        }),
        Ok(_) => {
            for (dep, recorded) in &stamp.inputs {
                match manifest.sha_of(dep) {
                    Some(current) if current == recorded => {}
                    Some(_) => {
                        return ArtifactState::Stale(Error::StaleArtifact {
                            path,
                            detail: format!("input {} was rebuilt after this artifact", dep),
                        })
                    }
                    None => {
                        return ArtifactState::Stale(Error::StaleArtifact {
                            path,
                            detail: format!("input {} is no longer stamped", dep),
                        })
                    }
                }
            }
            ArtifactState::Ok
        }
    }
}

/// Require the named artifacts to exist, match their stamps, and have been
/// produced under the given config hash. Returns the manifest for callers
/// that need recorded hashes (e.g. to chain inputs).
pub fn verify_artifacts(rd: &RunDir, config_hash: &str, names: &[&str]) -> Result<Manifest> {
    let manifest = match load_manifest(rd)? {
        Some(m) => m,
        None => {
            return Err(Error::MissingArtifacts {
                files: names.iter().map(|n| rd.path(n)).collect(),
            })
        }
    };
    let mut missing = Vec::new();
    for name in names {
        match check_artifact(rd, &manifest, config_hash, name) {
            ArtifactState::Ok => {}
            ArtifactState::Missing => missing.push(rd.path(name)),
            ArtifactState::Stale(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts { files: missing });
    }
    Ok(manifest)
}
