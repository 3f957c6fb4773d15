//! Sequence ⇄ latent codec: a frozen embedder, a logits decoder, and a
//! variational compressor/decompressor pair around a compact l×d latent.
//!
//! The training objective is multi-task: embedding reconstruction (MSE),
//! sequence reconstruction (cross-entropy through the decoder), and a
//! β-weighted KL pulling the latent toward a unit Gaussian. Two regimes:
//! two-stage (decoder first on clean embeddings, then the compression pair
//! against the frozen decoder) or one-stage joint training. Freezing is
//! enforced structurally — a stage simply never collects gradients for
//! parameters outside its trainable set.

pub mod embedfile;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::{stream, DetRng};
use crate::numcore::{checkpoint, AdamParams, Binding, ParamStore, Tape, Tensor, Var};
use crate::seqkit::{Sequence, Vocabulary};

pub use embedfile::{load_embeddings, write_embeddings};

const LOGVAR_CLAMP: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    TwoStage,
    OneStage,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageHyper {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CodecConfig {
    /// Embedding width D.
    pub embed_dim: usize,
    /// Latent width d (per latent position).
    pub latent_width: usize,
    /// Total compression factor c = (L·D)/(l·d).
    pub compression: usize,
    pub conv_channels: usize,
    pub decoder_hidden: usize,
    /// Keep the randomly initialized embedder fixed (the default mirrors a
    /// frozen pretrained encoder). When false it learns during stage 1 only.
    pub freeze_embedder: bool,
    pub beta: f64,
    pub stage_mode: StageMode,
    pub stage1: StageHyper,
    /// Also the hyperparameters of the joint pass in one-stage mode.
    pub stage2: StageHyper,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            embed_dim: 32,
            latent_width: 8,
            compression: 20,
            conv_channels: 64,
            decoder_hidden: 64,
            freeze_embedder: true,
            beta: 1e-4,
            stage_mode: StageMode::TwoStage,
            stage1: StageHyper { lr: 2e-3, batch: 64, max_epochs: 40, patience: 8 },
            stage2: StageHyper { lr: 3e-3, batch: 64, max_epochs: 80, patience: 8 },
            seed: 0,
        }
    }
}

/// Resolved dimensions; all divisibility constraints checked at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub vocab_size: usize,
    pub length: usize,
    pub embed_dim: usize,
    pub latent_len: usize,
    pub latent_width: usize,
    /// Length reduction L / l, realized by one patchify convolution
    /// (kernel = stride = reduce, no padding).
    pub reduce: usize,
    pub conv_channels: usize,
    pub decoder_hidden: usize,
}

impl Geometry {
    pub fn latent_coords(&self) -> usize {
        self.latent_len * self.latent_width
    }
}

fn derive_geometry(cfg: &CodecConfig, vocab: &Vocabulary, length: usize) -> Result<Geometry> {
    let (l_total, d) = (length * cfg.embed_dim, cfg.latent_width);
    if cfg.compression < 2 {
        return Err(Error::config(format!("compression factor must be ≥ 2, got {}", cfg.compression)));
    }
    if l_total % cfg.compression != 0 {
        return Err(Error::config(format!(
            "L·D = {} not divisible by compression factor {}",
            l_total, cfg.compression
        )));
    }
    let coords = l_total / cfg.compression;
    if coords % d != 0 {
        return Err(Error::config(format!(
            "latent coord budget {} not divisible by latent width {}",
            coords, d
        )));
    }
    let latent_len = coords / d;
    if latent_len == 0 || latent_len >= length {
        return Err(Error::config(format!(
            "latent length {} must be in 1..{} (shorten the latent or lower compression)",
            latent_len, length
        )));
    }
    if length % latent_len != 0 {
        return Err(Error::config(format!(
            "sequence length {} not divisible by the length-reduction stride product {}",
            length,
            length / latent_len
        )));
    }
    if d >= cfg.embed_dim {
        return Err(Error::config(format!(
            "latent width {} must be below the embedding width {}",
            d, cfg.embed_dim
        )));
    }
    Ok(Geometry {
        vocab_size: vocab.size(),
        length,
        embed_dim: cfg.embed_dim,
        latent_len,
        latent_width: d,
        reduce: length / latent_len,
        conv_channels: cfg.conv_channels,
        decoder_hidden: cfg.decoder_hidden,
    })
}

/// Sinusoidal position features, rows 0..n, geometric frequency ladder.
fn sin_features(rows: usize, dim: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * dim);
    for p in 0..rows {
        for i in 0..dim {
            let pair = (i / 2 * 2) as f64;
            let angle = p as f64 / 10_000f64.powf(pair / dim as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, dim], data).expect("sized above")
}

fn tile_batch(t: &Tensor<f64>, batch: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(batch * t.numel());
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, data).expect("sized above")
}

fn init_codec_store(geom: &Geometry, seed: u64) -> ParamStore<f64> {
    let (v, d_emb, ch, hd) = (geom.vocab_size, geom.embed_dim, geom.conv_channels, geom.decoder_hidden);
    let (r, d_lat) = (geom.reduce, geom.latent_width);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut rng = stream(seed, "codec-init", 0);
    let mut s = ParamStore::new();

    s.insert("embedder.table", Tensor::randn(&[v, d_emb], 1.0, &mut rng));
    s.insert("embedder.mix_w", Tensor::randn(&[d_emb, d_emb], he(d_emb), &mut rng));
    s.insert("embedder.mix_b", Tensor::zeros(&[d_emb]));

    s.insert("decoder.w1", Tensor::randn(&[d_emb, hd], he(d_emb), &mut rng));
    s.insert("decoder.b1", Tensor::zeros(&[hd]));
    s.insert("decoder.w2", Tensor::randn(&[hd, v], he(hd), &mut rng));
    s.insert("decoder.b2", Tensor::zeros(&[v]));

    s.insert("compressor.mix_w", Tensor::randn(&[d_emb, d_emb], he(d_emb), &mut rng));
    s.insert("compressor.mix_b", Tensor::zeros(&[d_emb]));
    s.insert("compressor.ln_g", Tensor::full(&[d_emb], 1.0));
    s.insert("compressor.ln_b", Tensor::zeros(&[d_emb]));
    s.insert("compressor.patch_w", Tensor::randn(&[r, d_emb, ch], he(r * d_emb), &mut rng));
    s.insert("compressor.patch_b", Tensor::zeros(&[ch]));
    s.insert("compressor.conv_w", Tensor::randn(&[3, ch, ch], he(3 * ch), &mut rng));
    s.insert("compressor.conv_b", Tensor::zeros(&[ch]));
    s.insert("compressor.mu_w", Tensor::randn(&[ch, d_lat], he(ch), &mut rng));
    s.insert("compressor.mu_b", Tensor::zeros(&[d_lat]));
    s.insert("compressor.lv_w", Tensor::randn(&[ch, d_lat], he(ch), &mut rng));
    // Start with a small posterior spread (σ ≈ e^-2.5); a unit-variance start
    // drowns the μ pathway in noise for hundreds of steps before the
    // reconstruction terms manage to shrink it.
    s.insert("compressor.lv_b", Tensor::full(&[d_lat], -5.0));

    s.insert("decompressor.in_w", Tensor::randn(&[d_lat, ch], he(d_lat), &mut rng));
    s.insert("decompressor.in_b", Tensor::zeros(&[ch]));
    s.insert("decompressor.conv_w", Tensor::randn(&[3, ch, ch], he(3 * ch), &mut rng));
    s.insert("decompressor.conv_b", Tensor::zeros(&[ch]));
    s.insert("decompressor.out_w", Tensor::randn(&[ch, d_emb], he(ch), &mut rng));
    s.insert("decompressor.out_b", Tensor::zeros(&[d_emb]));
    s
}

fn expected_shapes(geom: &Geometry) -> BTreeMap<String, Vec<usize>> {
    // Zero-cost shape manifest for checkpoint validation: the init path is
    // the single source of truth for names.
    init_codec_store(geom, 0)
        .to_named()
        .into_iter()
        .map(|(k, t)| (k, t.shape().to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Graph builders (shared by training, inference, and gradient checks)
// ---------------------------------------------------------------------------

fn embed_graph(
    tape: &mut Tape<f64>,
    bind: &Binding,
    geom: &Geometry,
    pos: &Tensor<f64>,
    xs: &[Sequence],
) -> Result<Var> {
    let flat: Vec<u32> = xs.iter().flat_map(|s| s.indices().iter().map(|&i| i as u32)).collect();
    let rows = tape.gather_rows(bind.var("embedder.table"), flat)?;
    let base = tape.reshape(rows, vec![xs.len(), geom.length, geom.embed_dim])?;
    let posv = tape.input(tile_batch(pos, xs.len()))?;
    let with_pos = tape.add(base, posv)?;
    let mixed = tape.affine(with_pos, bind.var("embedder.mix_w"), bind.var("embedder.mix_b"))?;
    Ok(tape.gelu(mixed))
}

fn decode_graph(tape: &mut Tape<f64>, bind: &Binding, h: Var) -> Result<Var> {
    let a = tape.affine(h, bind.var("decoder.w1"), bind.var("decoder.b1"))?;
    let a = tape.gelu(a);
    tape.affine(a, bind.var("decoder.w2"), bind.var("decoder.b2"))
}

fn compress_graph(
    tape: &mut Tape<f64>,
    bind: &Binding,
    geom: &Geometry,
    h: Var,
) -> Result<(Var, Var)> {
    let m = tape.affine(h, bind.var("compressor.mix_w"), bind.var("compressor.mix_b"))?;
    let m = tape.gelu(m);
    let m = tape.layer_norm(m, bind.var("compressor.ln_g"), bind.var("compressor.ln_b"))?;
    // Patchify: kernel = stride = reduce, each latent slot sees its own block.
    let p = tape.conv1d(m, bind.var("compressor.patch_w"), bind.var("compressor.patch_b"), geom.reduce, 0)?;
    let p = tape.gelu(p);
    let p = tape.conv1d(p, bind.var("compressor.conv_w"), bind.var("compressor.conv_b"), 1, 1)?;
    let p = tape.gelu(p);
    let mu = tape.affine(p, bind.var("compressor.mu_w"), bind.var("compressor.mu_b"))?;
    let lv = tape.affine(p, bind.var("compressor.lv_w"), bind.var("compressor.lv_b"))?;
    let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok((mu, lv))
}

fn decompress_graph(
    tape: &mut Tape<f64>,
    bind: &Binding,
    geom: &Geometry,
    pos_dec: &Tensor<f64>,
    z: Var,
) -> Result<Var> {
    let batch = tape.value(z).shape()[0];
    let a = tape.affine(z, bind.var("decompressor.in_w"), bind.var("decompressor.in_b"))?;
    let a = tape.gelu(a);
    let up = tape.repeat_rows(a, geom.reduce)?;
    // Position features break the symmetry inside each repeated block.
    let posv = tape.input(tile_batch(pos_dec, batch))?;
    let up = tape.add(up, posv)?;
    let c = tape.conv1d(up, bind.var("decompressor.conv_w"), bind.var("decompressor.conv_b"), 1, 1)?;
    let c = tape.gelu(c);
    tape.affine(c, bind.var("decompressor.out_w"), bind.var("decompressor.out_b"))
}

/// KL(q‖N(0,I)) on the graph: ½·Σcoords(μ² + e^lv − 1 − lv), mean over batch.
fn kl_graph(tape: &mut Tape<f64>, mu: Var, lv: Var, batch: usize) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(lv);
    let neg = tape.scale(lv, -1.0);
    let s = tape.add(mu2, ev)?;
    let s = tape.add(s, neg)?;
    let s = tape.offset(s, -1.0);
    let total = tape.sum_all(s);
    Ok(tape.scale(total, 0.5 / batch as f64))
}

fn ce_graph(tape: &mut Tape<f64>, geom: &Geometry, logits: Var, xs: &[Sequence]) -> Result<Var> {
    let rows = tape.reshape(logits, vec![xs.len() * geom.length, geom.vocab_size])?;
    let logp = tape.log_softmax(rows);
    let targets: Vec<u32> = xs.iter().flat_map(|s| s.indices().iter().map(|&i| i as u32)).collect();
    tape.nll_mean(logp, targets)
}

fn mse_graph(tape: &mut Tape<f64>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Where the embedding matrices for a batch come from.
enum HSource<'a> {
    /// Precomputed (embedder frozen): one [B, L, D] leaf.
    Cached(&'a Tensor<f64>),
    /// Built on the tape so gradients reach the embedder.
    Live,
}

/// The full multi-task objective. `noise` is the reparameterization draw
/// (same shape as μ); `None` evaluates at the posterior mean z = μ.
#[allow(clippy::too_many_arguments)]
fn full_loss_graph(
    tape: &mut Tape<f64>,
    bind: &Binding,
    geom: &Geometry,
    pos_emb: &Tensor<f64>,
    pos_dec: &Tensor<f64>,
    xs: &[Sequence],
    h_source: HSource,
    noise: Option<&Tensor<f64>>,
    beta: f64,
) -> Result<Var> {
    let h = match h_source {
        HSource::Cached(t) => tape.input(t.clone())?,
        HSource::Live => embed_graph(tape, bind, geom, pos_emb, xs)?,
    };
    let (mu, lv) = compress_graph(tape, bind, geom, h)?;
    let z = match noise {
        Some(xi) => {
            let half = tape.scale(lv, 0.5);
            let std = tape.exp(half);
            let xiv = tape.input(xi.clone())?;
            let scaled = tape.mul(std, xiv)?;
            tape.add(mu, scaled)?
        }
        None => mu,
    };
    let h_prime = decompress_graph(tape, bind, geom, pos_dec, z)?;
    let logits = decode_graph(tape, bind, h_prime)?;

    let mse = mse_graph(tape, h, h_prime)?;
    let ce = ce_graph(tape, geom, logits, xs)?;
    let kl = kl_graph(tape, mu, lv, xs.len())?;
    let kl_w = tape.scale(kl, beta);
    let sum = tape.add(mse, ce)?;
    tape.add(sum, kl_w)
}

/// Stage-1 objective: cross-entropy of the decoder on clean embeddings.
fn stage1_loss_graph(
    tape: &mut Tape<f64>,
    bind: &Binding,
    geom: &Geometry,
    pos_emb: &Tensor<f64>,
    xs: &[Sequence],
    h_source: HSource,
) -> Result<Var> {
    let h = match h_source {
        HSource::Cached(t) => tape.input(t.clone())?,
        HSource::Live => embed_graph(tape, bind, geom, pos_emb, xs)?,
    };
    let logits = decode_graph(tape, bind, h)?;
    ce_graph(tape, geom, logits, xs)
}

// ---------------------------------------------------------------------------
// Trainable-set filters (freeze-by-omission)
// ---------------------------------------------------------------------------

pub(crate) fn stage1_trainable(name: &str, freeze_embedder: bool) -> bool {
    name.starts_with("decoder.") || (!freeze_embedder && name.starts_with("embedder."))
}

pub(crate) fn stage2_trainable(name: &str) -> bool {
    name.starts_with("compressor.") || name.starts_with("decompressor.")
}

pub(crate) fn one_stage_trainable(name: &str, freeze_embedder: bool) -> bool {
    !name.starts_with("embedder.") || !freeze_embedder
}

// ---------------------------------------------------------------------------
// Host-side ops
// ---------------------------------------------------------------------------

/// A draw from the posterior with its provenance.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Tensor<f64>,
    pub mu: Tensor<f64>,
    pub logvar: Tensor<f64>,
    /// The unit-normal draw; z = μ + exp(logvar/2)·ξ exactly.
    pub xi: Tensor<f64>,
}

pub fn reparameterize(mu: &Tensor<f64>, logvar: &Tensor<f64>, rng: &mut DetRng) -> Result<LatentSample> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("μ {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let xi_data: Vec<f64> = (0..mu.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let xi = Tensor::new(mu.shape().to_vec(), xi_data)?;
    let z_data: Vec<f64> = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(xi.data())
        .map(|((&m, &lv), &x)| m + (lv / 2.0).exp() * x)
        .collect();
    Ok(LatentSample {
        z: Tensor::new(mu.shape().to_vec(), z_data)?,
        mu: mu.clone(),
        logvar: logvar.clone(),
        xi,
    })
}

/// Closed-form diagonal-Gaussian KL against N(0, I): per-item sum over latent
/// coordinates, mean over the leading batch axis (rank < 3 ⇒ batch of one).
pub fn kl_divergence(mu: &Tensor<f64>, logvar: &Tensor<f64>) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("μ {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let batch = if mu.rank() >= 3 { mu.shape()[0] } else { 1 };
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    Ok(0.5 * total / batch as f64)
}

/// The composite objective as a plain number (reference implementation; the
/// training graph computes the same quantity).
pub fn vae_loss(
    h: &Tensor<f64>,
    h_prime: &Tensor<f64>,
    xs: &[Sequence],
    logits: &Tensor<f64>,
    mu: &Tensor<f64>,
    logvar: &Tensor<f64>,
    beta: f64,
) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::config(format!("β must be nonnegative, got {}", beta)));
    }
    if h.shape() != h_prime.shape() {
        return Err(Error::shape("vae_loss", format!("h {:?} vs h' {:?}", h.shape(), h_prime.shape())));
    }
    let mse = h
        .data()
        .iter()
        .zip(h_prime.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / h.numel() as f64;

    let v = logits.last_dim();
    let rows = logits.numel() / v;
    let total_positions: usize = xs.iter().map(|s| s.len()).sum();
    if rows != total_positions {
        return Err(Error::shape(
            "vae_loss",
            format!("{} logit rows for {} sequence positions", rows, total_positions),
        ));
    }
    let mut ce = 0.0;
    let mut r = 0usize;
    for seq in xs {
        for &t in seq.indices() {
            let row = &logits.data()[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            ce -= row[t as usize] - lse;
            r += 1;
        }
    }
    ce /= rows as f64;

    Ok(mse + ce + beta * kl_divergence(mu, logvar)?)
}

/// Per-row argmax with ties to the lowest index.
fn argmax_rows(logits: &Tensor<f64>) -> Vec<u8> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits.data()[r * v..(r + 1) * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = i;
            }
        }
        out.push(best as u8);
    }
    out
}

// ---------------------------------------------------------------------------
// The codec proper
// ---------------------------------------------------------------------------

pub struct Codec {
    pub config: CodecConfig,
    pub vocab: Vocabulary,
    geom: Geometry,
    store: ParamStore<f64>,
    pos_emb: Tensor<f64>,
    pos_dec: Tensor<f64>,
}

impl Codec {
    /// Freshly initialized (untrained) codec.
    pub fn init(cfg: &CodecConfig, vocab: &Vocabulary, length: usize) -> Result<Codec> {
        let geom = derive_geometry(cfg, vocab, length)?;
        let store = init_codec_store(&geom, cfg.seed);
        Ok(Codec {
            config: cfg.clone(),
            vocab: vocab.clone(),
            geom,
            store,
            pos_emb: sin_features(length, cfg.embed_dim),
            pos_dec: sin_features(length, cfg.conv_channels),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn length(&self) -> usize {
        self.geom.length
    }

    /// Latent shape [l, d] for a single sequence.
    pub fn latent_shape(&self) -> [usize; 2] {
        [self.geom.latent_len, self.geom.latent_width]
    }

    fn check_batch(&self, xs: &[Sequence]) -> Result<()> {
        for x in xs {
            if x.len() != self.geom.length {
                return Err(Error::contract(format!(
                    "codec is built for length {}, got a length-{} sequence",
                    self.geom.length,
                    x.len()
                )));
            }
            if let Some(&bad) = x.indices().iter().find(|&&i| i as usize >= self.geom.vocab_size) {
                return Err(Error::UnknownSymbol {
                    symbol: (b'0' + bad) as char,
                    vocab: self.vocab.as_string(),
                });
            }
        }
        Ok(())
    }

    /// Embedding matrices for a batch, shape [B, L, D].
    pub fn encode_batch(&self, xs: &[Sequence]) -> Result<Tensor<f64>> {
        self.check_batch(xs)?;
        if xs.is_empty() {
            return Err(Error::contract("encode_batch needs at least one sequence"));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let h = embed_graph(&mut tape, &bind, &self.geom, &self.pos_emb, xs)?;
        Ok(tape.value(h).clone())
    }

    /// Single-sequence embedding, shape [L, D].
    pub fn encode(&self, x: &Sequence) -> Result<Tensor<f64>> {
        let h = self.encode_batch(std::slice::from_ref(x))?;
        h.reshaped(vec![self.geom.length, self.geom.embed_dim])
    }

    /// Logits [B, L, |V|] and argmax-decoded sequences for a [B, L, D] batch.
    pub fn decode_batch(&self, h: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Sequence>)> {
        let expect = [h.shape().first().copied().unwrap_or(0), self.geom.length, self.geom.embed_dim];
        if h.rank() != 3 || h.shape() != expect {
            return Err(Error::contract(format!(
                "decode_batch wants [B, {}, {}], got {:?}",
                self.geom.length,
                self.geom.embed_dim,
                h.shape()
            )));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let hv = tape.input(h.clone())?;
        let logits = decode_graph(&mut tape, &bind, hv)?;
        let logits = tape.value(logits).clone();
        let idx = argmax_rows(&logits);
        let seqs = idx
            .chunks(self.geom.length)
            .map(|c| Sequence::from_indices(c.to_vec(), self.geom.vocab_size))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, seqs))
    }

    /// Logits [L, |V|] and the decoded sequence for one [L, D] matrix.
    pub fn decode_sequence(&self, h: &Tensor<f64>) -> Result<(Tensor<f64>, Sequence)> {
        if h.shape() != [self.geom.length, self.geom.embed_dim] {
            return Err(Error::contract(format!(
                "decode_sequence wants [{}, {}], got {:?}",
                self.geom.length,
                self.geom.embed_dim,
                h.shape()
            )));
        }
        let batched = h.clone().reshaped(vec![1, self.geom.length, self.geom.embed_dim])?;
        let (logits, mut seqs) = self.decode_batch(&batched)?;
        let logits = logits.reshaped(vec![self.geom.length, self.geom.vocab_size])?;
        Ok((logits, seqs.remove(0)))
    }

    /// Posterior parameters (μ, logvar), each [B, l, d].
    pub fn compress_batch(&self, h: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        if h.rank() != 3 || h.shape()[1] != self.geom.length || h.shape()[2] != self.geom.embed_dim {
            return Err(Error::contract(format!(
                "compress_batch wants [B, {}, {}], got {:?}",
                self.geom.length,
                self.geom.embed_dim,
                h.shape()
            )));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let hv = tape.input(h.clone())?;
        let (mu, lv) = compress_graph(&mut tape, &bind, &self.geom, hv)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Single-matrix compress: [L, D] → (μ, logvar) each [l, d].
    pub fn compress(&self, h: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        if h.shape() != [self.geom.length, self.geom.embed_dim] {
            return Err(Error::contract(format!(
                "compress wants [{}, {}], got {:?}",
                self.geom.length,
                self.geom.embed_dim,
                h.shape()
            )));
        }
        let batched = h.clone().reshaped(vec![1, self.geom.length, self.geom.embed_dim])?;
        let (mu, lv) = self.compress_batch(&batched)?;
        let shape = vec![self.geom.latent_len, self.geom.latent_width];
        Ok((mu.reshaped(shape.clone())?, lv.reshaped(shape)?))
    }

    /// Latents [B, l, d] → reconstructed embeddings [B, L, D].
    pub fn decompress_batch(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let expect = [z.shape().first().copied().unwrap_or(0), self.geom.latent_len, self.geom.latent_width];
        if z.rank() != 3 || z.shape() != expect {
            return Err(Error::contract(format!(
                "decompress_batch wants [B, {}, {}], got {:?}",
                self.geom.latent_len,
                self.geom.latent_width,
                z.shape()
            )));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let zv = tape.input(z.clone())?;
        let h = decompress_graph(&mut tape, &bind, &self.geom, &self.pos_dec, zv)?;
        Ok(tape.value(h).clone())
    }

    /// Single latent [l, d] → [L, D].
    pub fn decompress(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        if z.shape() != [self.geom.latent_len, self.geom.latent_width] {
            return Err(Error::contract(format!(
                "decompress wants [{}, {}], got {:?}",
                self.geom.latent_len,
                self.geom.latent_width,
                z.shape()
            )));
        }
        let batched = z.clone().reshaped(vec![1, self.geom.latent_len, self.geom.latent_width])?;
        let h = self.decompress_batch(&batched)?;
        h.reshaped(vec![self.geom.length, self.geom.embed_dim])
    }

    /// Full round trip x → h → μ → h' → x' at the posterior mean; returns
    /// the fraction of sequences reconstructed exactly.
    pub fn round_trip_accuracy(&self, xs: &[Sequence]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::contract("round_trip_accuracy needs at least one sequence"));
        }
        let mut exact = 0usize;
        for chunk in xs.chunks(256) {
            let h = self.encode_batch(chunk)?;
            let (mu, _) = self.compress_batch(&h)?;
            let h_prime = self.decompress_batch(&mu)?;
            let (_, decoded) = self.decode_batch(&h_prime)?;
            exact += decoded.iter().zip(chunk).filter(|(a, b)| *a == *b).count();
        }
        Ok(exact as f64 / xs.len() as f64)
    }

    /// Stage-1 view: decoder accuracy on clean embeddings (no latent).
    pub fn decoder_accuracy(&self, xs: &[Sequence]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::contract("decoder_accuracy needs at least one sequence"));
        }
        let mut exact = 0usize;
        for chunk in xs.chunks(256) {
            let h = self.encode_batch(chunk)?;
            let (_, decoded) = self.decode_batch(&h)?;
            exact += decoded.iter().zip(chunk).filter(|(a, b)| *a == *b).count();
        }
        Ok(exact as f64 / xs.len() as f64)
    }

    /// Snapshot of every parameter tensor (used to assert bit-identity when a
    /// later pipeline phase promises not to touch the codec).
    pub fn named_params(&self) -> BTreeMap<String, Tensor<f64>> {
        self.store.to_named()
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Returns the best validation loss reached before patience ran out.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    store: &mut ParamStore<f64>,
    geom: &Geometry,
    pos_emb: &Tensor<f64>,
    pos_dec: &Tensor<f64>,
    data: &[Sequence],
    cached_h: Option<&[Tensor<f64>]>,
    stage_name: &str,
    hyper: &StageHyper,
    trainable: &dyn Fn(&str) -> bool,
    full_objective: bool,
    beta: f64,
    seed: u64,
) -> Result<f64> {
    let n = data.len();
    let n_val = (n / 10).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "codec-split", 0));
    let (val_idx, train_idx) = order.split_at(n_val.min(n - 1).max(1));

    let gather_x = |idx: &[usize]| -> Vec<Sequence> { idx.iter().map(|&i| data[i].clone()).collect() };
    let gather_h = |idx: &[usize]| -> Option<Tensor<f64>> {
        cached_h.map(|hs| {
            let mut flat = Vec::with_capacity(idx.len() * geom.length * geom.embed_dim);
            for &i in idx {
                flat.extend_from_slice(hs[i].data());
            }
            Tensor::new(vec![idx.len(), geom.length, geom.embed_dim], flat).expect("cached h sized")
        })
    };

    // Validation at the posterior mean: deterministic, noise-free.
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let xs = gather_x(val_idx);
        let hb = gather_h(val_idx);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let src = match &hb {
            Some(t) => HSource::Cached(t),
            None => HSource::Live,
        };
        let loss = if full_objective {
            full_loss_graph(&mut tape, &bind, geom, pos_emb, pos_dec, &xs, src, None, beta)?
        } else {
            stage1_loss_graph(&mut tape, &bind, geom, pos_emb, &xs, src)?
        };
        tape.value(loss).item()
    };

    let adam = AdamParams::with_lr(hyper.lr);
    let mut best_loss = eval(store)?;
    let mut best = store.to_named();
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut train_order = train_idx.to_vec();

    'outer: for epoch in 0..hyper.max_epochs {
        train_order.shuffle(&mut stream(seed, "codec-epoch", (epoch as u64) << 8 | hash_stage(stage_name)));
        for chunk in train_order.chunks(hyper.batch) {
            let xs = gather_x(chunk);
            let hb = gather_h(chunk);
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let src = match &hb {
                Some(t) => HSource::Cached(t),
                None => HSource::Live,
            };
            let loss = if full_objective {
                let mut rng = stream(seed, "codec-noise", step);
                let xi_data: Vec<f64> = (0..xs.len() * geom.latent_coords())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let xi =
                    Tensor::new(vec![xs.len(), geom.latent_len, geom.latent_width], xi_data)?;
                full_loss_graph(&mut tape, &bind, geom, pos_emb, pos_dec, &xs, src, Some(&xi), beta)?
            } else {
                stage1_loss_graph(&mut tape, &bind, geom, pos_emb, &xs, src)?
            };
            let loss_val: f64 = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{} training loss at epoch {}", stage_name, epoch),
                });
            }
            let grads = tape.backward(loss)?;
            let by_name = bind.collect(&tape, &grads, trainable);
            store.adam_step(&by_name, &adam).map_err(|e| match e {
                Error::NonFinite { context } => {
                    Error::NonFinite { context: format!("{}: {}", stage_name, context) }
                }
                other => other,
            })?;
            step += 1;
        }
        let val = eval(store)?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} validation loss at epoch {}", stage_name, epoch),
            });
        }
        if val < best_loss {
            best_loss = val;
            best = store.to_named();
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break 'outer;
            }
        }
    }

    *store = ParamStore::from_named(best);
    Ok(best_loss)
}

fn hash_stage(name: &str) -> u64 {
    name.bytes().map(|b| b as u64).sum()
}

/// Train a codec on a set of sequences (fitness plays no role here).
pub fn train_codec(dataset: &[Sequence], vocab: &Vocabulary, cfg: &CodecConfig) -> Result<Codec> {
    if dataset.is_empty() {
        return Err(Error::contract("train_codec needs a non-empty dataset"));
    }
    let length = dataset[0].len();
    for s in dataset {
        if s.len() != length {
            return Err(Error::contract(format!(
                "mixed sequence lengths in dataset: {} and {}",
                length,
                s.len()
            )));
        }
    }
    let mut codec = Codec::init(cfg, vocab, length)?;
    let geom = codec.geom;
    let pos_emb = codec.pos_emb.clone();
    let pos_dec = codec.pos_dec.clone();

    let cache_embeddings = |codec: &Codec| -> Result<Vec<Tensor<f64>>> {
        let mut out = Vec::with_capacity(dataset.len());
        for chunk in dataset.chunks(256) {
            let h = codec.encode_batch(chunk)?;
            for b in 0..chunk.len() {
                let start = b * geom.length * geom.embed_dim;
                let end = start + geom.length * geom.embed_dim;
                out.push(Tensor::new(
                    vec![geom.length, geom.embed_dim],
                    h.data()[start..end].to_vec(),
                )?);
            }
        }
        Ok(out)
    };

    match cfg.stage_mode {
        StageMode::TwoStage => {
            let frozen = cfg.freeze_embedder;
            let stage1_cache = if frozen { Some(cache_embeddings(&codec)?) } else { None };
            run_stage(
                &mut codec.store,
                &geom,
                &pos_emb,
                &pos_dec,
                dataset,
                stage1_cache.as_deref(),
                "stage 1",
                &cfg.stage1,
                &|n| stage1_trainable(n, frozen),
                false,
                cfg.beta,
                cfg.seed,
            )?;
            // Stage 2 always sees a fixed embedder; cache after stage 1 so a
            // stage-1-trained embedder is baked in.
            let stage2_cache = cache_embeddings(&codec)?;
            run_stage(
                &mut codec.store,
                &geom,
                &pos_emb,
                &pos_dec,
                dataset,
                Some(&stage2_cache),
                "stage 2",
                &cfg.stage2,
                &stage2_trainable,
                true,
                cfg.beta,
                cfg.seed,
            )?;
        }
        StageMode::OneStage => {
            let frozen = cfg.freeze_embedder;
            let cache = if frozen { Some(cache_embeddings(&codec)?) } else { None };
            run_stage(
                &mut codec.store,
                &geom,
                &pos_emb,
                &pos_dec,
                dataset,
                cache.as_deref(),
                "one-stage",
                &cfg.stage2,
                &|n| one_stage_trainable(n, frozen),
                true,
                cfg.beta,
                cfg.seed,
            )?;
        }
    }
    Ok(codec)
}

// ---------------------------------------------------------------------------
// Persistence: numcore checkpoint + JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CodecSidecar {
    config: CodecConfig,
    vocab: String,
    length: usize,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

pub fn save_codec(path: &Path, codec: &Codec) -> Result<()> {
    checkpoint::save_named(path, &codec.store.to_named())?;
    let side = CodecSidecar {
        config: codec.config.clone(),
        vocab: codec.vocab.as_string(),
        length: codec.geom.length,
    };
    let spath = sidecar_path(path);
    let json = serde_json::to_string_pretty(&side)
        .map_err(|e| Error::Json { path: spath.clone(), detail: e.to_string() })?;
    std::fs::write(&spath, json).map_err(|e| Error::io(&spath, e))
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    let spath = sidecar_path(path);
    let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let side: CodecSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: spath.clone(), detail: e.to_string() })?;
    let vocab = Vocabulary::new(&side.vocab)?;
    let geom = derive_geometry(&side.config, &vocab, side.length)?;

    let named = checkpoint::load_named::<f64>(path)?;
    let expect = expected_shapes(&geom);
    if named.len() != expect.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {} tensors, architecture wants {}", named.len(), expect.len()),
        ));
    }
    for (name, shape) in &expect {
        match named.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::format(
                    path,
                    format!("tensor {} has shape {:?}, architecture wants {:?}", name, t.shape(), shape),
                ))
            }
            None => return Err(Error::format(path, format!("tensor {} missing from checkpoint", name))),
        }
    }

    Ok(Codec {
        pos_emb: sin_features(side.length, side.config.embed_dim),
        pos_dec: sin_features(side.length, side.config.conv_channels),
        config: side.config,
        vocab,
        geom,
        store: ParamStore::from_named(named),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;

    fn vocab() -> Vocabulary {
        Vocabulary::new("ACGT").unwrap()
    }

    /// Small geometry used across tests: V=4, L=6, D=8, d=4 ⇒ l=2, reduce=3.
    fn small_cfg() -> CodecConfig {
        CodecConfig {
            embed_dim: 8,
            latent_width: 4,
            compression: 6,
            conv_channels: 10,
            decoder_hidden: 16,
            seed: 5,
            ..Default::default()
        }
    }

    fn random_seqs(n: usize, length: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = stream(seed, "test-seqs", 0);
        (0..n)
            .map(|_| {
                Sequence::from_indices(
                    (0..length).map(|_| rng.random_range(0..4u8)).collect(),
                    4,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn default_geometry_matches_the_tuned_compression() {
        // L=10, D=32, c=20 ⇒ l·d = 320/20 = 16.
        let cfg = CodecConfig::default();
        let geom = derive_geometry(&cfg, &vocab(), 10).unwrap();
        assert_eq!(geom.latent_coords(), 16);
        assert_eq!(geom.latent_len, 2);
        assert_eq!(geom.latent_width, 8);
        assert_eq!(geom.reduce, 5);
    }

    #[test]
    fn bad_geometry_is_a_config_error() {
        let mut cfg = CodecConfig::default();
        cfg.compression = 13; // 320 not divisible by 13
        assert!(matches!(derive_geometry(&cfg, &vocab(), 10), Err(Error::Config(_))));
        let mut cfg = CodecConfig::default();
        cfg.latent_width = 32; // d must stay below D
        cfg.compression = 10;
        assert!(matches!(derive_geometry(&cfg, &vocab(), 10), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.compression = 2; // l = 6 = L, no real reduction
        assert!(matches!(derive_geometry(&cfg, &vocab(), 6), Err(Error::Config(_))));
    }

    #[test]
    fn encode_is_deterministic_and_positionally_local() {
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let a = codec.vocab.parse("ACGTAC").unwrap();
        let h1 = codec.encode(&a).unwrap();
        let h2 = codec.encode(&a).unwrap();
        assert_eq!(h1.data(), h2.data());

        // Change one position: exactly that row of h moves.
        let b = codec.vocab.parse("ACGTAA").unwrap();
        let hb = codec.encode(&b).unwrap();
        for p in 0..6 {
            let same = h1.row(p) == hb.row(p);
            assert_eq!(same, p != 5, "row {}", p);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_index() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 0.5, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn permuting_rows_permutes_the_decoded_sequence() {
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let x = codec.vocab.parse("GATTAC").unwrap();
        let h = codec.encode(&x).unwrap();
        let (_, base) = codec.decode_sequence(&h).unwrap();

        // Reverse the rows of h.
        let d = h.last_dim();
        let mut rev = Vec::with_capacity(h.numel());
        for r in (0..6).rev() {
            rev.extend_from_slice(&h.data()[r * d..(r + 1) * d]);
        }
        let h_rev = Tensor::new(vec![6, d], rev).unwrap();
        let (_, flipped) = codec.decode_sequence(&h_rev).unwrap();
        let expect: Vec<u8> = base.indices().iter().rev().cloned().collect();
        assert_eq!(flipped.indices(), &expect[..]);
    }

    #[test]
    fn compress_shapes_and_determinism() {
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let h = codec.encode(&codec.vocab.parse("ACGTAC").unwrap()).unwrap();
        let (mu1, lv1) = codec.compress(&h).unwrap();
        let (mu2, lv2) = codec.compress(&h).unwrap();
        assert_eq!(mu1.shape(), [2, 4]);
        assert_eq!(lv1.shape(), [2, 4]);
        assert_eq!(mu1.data(), mu2.data());
        assert_eq!(lv1.data(), lv2.data());
        assert!(lv1.data().iter().all(|&v| (-LOGVAR_CLAMP..=LOGVAR_CLAMP).contains(&v)));
    }

    #[test]
    fn logvar_saturates_at_the_clamp_bound() {
        let mut codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        // Push the logvar head's bias far past the bound.
        let entry = codec.store.get_mut("compressor.lv_b").unwrap();
        for v in entry.data_mut() {
            *v = 100.0;
        }
        let h = codec.encode(&codec.vocab.parse("ACGTAC").unwrap()).unwrap();
        let (_, lv) = codec.compress(&h).unwrap();
        assert!(lv.data().iter().all(|&v| v == LOGVAR_CLAMP));
    }

    #[test]
    fn reparameterize_identities() {
        let mu = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        let lv = Tensor::zeros(&[2, 3]);
        let mut rng = stream(0, "repar", 0);
        let s = reparameterize(&mu, &lv, &mut rng).unwrap();
        // z − μ must equal ξ exactly at logvar = 0.
        for ((z, m), x) in s.z.data().iter().zip(mu.data()).zip(s.xi.data()) {
            assert!((z - m - x).abs() < 1e-15);
        }

        // Clamp-floor logvar: z collapses onto μ.
        let lv_floor = Tensor::full(&[2, 3], -LOGVAR_CLAMP);
        let s2 = reparameterize(&mu, &lv_floor, &mut rng).unwrap();
        for (z, m) in s2.z.data().iter().zip(mu.data()) {
            assert!((z - m).abs() < 0.1, "std at the floor is e^-4 ≈ 0.018");
        }
    }

    #[test]
    fn reparameterize_monte_carlo_variance() {
        let mu = Tensor::zeros(&[1, 4]);
        let lv = Tensor::zeros(&[1, 4]);
        let mut rng = stream(7, "mc", 0);
        let n = 100_000;
        let mut sum_sq = vec![0.0f64; 4];
        for _ in 0..n {
            let s = reparameterize(&mu, &lv, &mut rng).unwrap();
            for (acc, &z) in sum_sq.iter_mut().zip(s.z.data()) {
                *acc += z * z;
            }
        }
        for acc in &sum_sq {
            let var = acc / n as f64;
            assert!((0.98..=1.02).contains(&var), "empirical variance {}", var);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(kl_divergence(&zero, &zero).unwrap(), 0.0);

        // Single coordinate, μ=1, logvar=0 → ½(1 + 1 − 1 − 0) = ½.
        let one = Tensor::new(vec![1], vec![1.0]).unwrap();
        let z1 = Tensor::zeros(&[1]);
        assert!((kl_divergence(&one, &z1).unwrap() - 0.5).abs() < 1e-12);

        // Any perturbation leaves zero.
        let mut mu = Tensor::zeros(&[2, 3]);
        mu.data_mut()[4] = 1e-3;
        assert!(kl_divergence(&mu, &zero).unwrap() > 0.0);
        let mut lv = Tensor::zeros(&[2, 3]);
        lv.data_mut()[1] = -1e-3;
        assert!(kl_divergence(&zero, &lv).unwrap() > 0.0);

        // Batched rank-3: mean over the leading axis.
        let mu_b = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let lv_b = Tensor::zeros(&[2, 1, 1]);
        assert!((kl_divergence(&mu_b, &lv_b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn vae_loss_reduces_to_beta_kl_when_reconstruction_is_perfect() {
        let v = vocab();
        let xs = vec![v.parse("AC").unwrap()];
        let h = Tensor::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        // Near-one-hot logits: 50 on the true symbol.
        let mut logit_data = vec![0.0; 2 * 4];
        logit_data[0] = 50.0; // position 0, symbol A
        logit_data[4 + 1] = 50.0; // position 1, symbol C
        let logits = Tensor::new(vec![1, 2, 4], logit_data).unwrap();
        let mu = Tensor::new(vec![1, 1, 2], vec![1.0, -0.5]).unwrap();
        let lv = Tensor::zeros(&[1, 1, 2]);
        let beta = 1e-2;
        let loss = vae_loss(&h, &h, &xs, &logits, &mu, &lv, beta).unwrap();
        let kl = kl_divergence(&mu, &lv).unwrap();
        assert!((loss - beta * kl).abs() < 1e-8, "loss {} vs βKL {}", loss, beta * kl);
    }

    #[test]
    fn vae_loss_rejects_negative_beta_and_bad_shapes() {
        let v = vocab();
        let xs = vec![v.parse("AC").unwrap()];
        let h = Tensor::zeros(&[1, 2, 3]);
        let logits = Tensor::zeros(&[1, 2, 4]);
        let mu = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(
            vae_loss(&h, &h, &xs, &logits, &mu, &mu, -0.1),
            Err(Error::Config(_))
        ));
        let h_bad = Tensor::zeros(&[1, 2, 4]);
        assert!(vae_loss(&h, &h_bad, &xs, &logits, &mu, &mu, 0.1).is_err());
    }

    #[test]
    fn host_loss_matches_the_training_graph() {
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let xs = random_seqs(3, 6, 40);
        let h = codec.encode_batch(&xs).unwrap();
        let (mu, lv) = codec.compress_batch(&h).unwrap();
        let h_prime = codec.decompress_batch(&mu).unwrap();
        let (logits, _) = codec.decode_batch(&h_prime).unwrap();
        let host = vae_loss(&h, &h_prime, &xs, &logits, &mu, &lv, 0.37).unwrap();

        let mut tape = Tape::new();
        let bind = codec.store.bind(&mut tape);
        let loss = full_loss_graph(
            &mut tape,
            &bind,
            &codec.geom,
            &codec.pos_emb,
            &codec.pos_dec,
            &xs,
            HSource::Live,
            None,
            0.37,
        )
        .unwrap();
        let graph: f64 = tape.value(loss).item().unwrap();
        assert!((host - graph).abs() < 1e-10, "host {} vs graph {}", host, graph);
    }

    #[test]
    fn composite_loss_gradients_pass_finite_difference() {
        // Everything in the graph, embedder included, with fixed noise.
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let xs = random_seqs(4, 6, 77);
        let geom = codec.geom;
        let (pos_emb, pos_dec) = (codec.pos_emb.clone(), codec.pos_dec.clone());
        let mut rng = stream(3, "fd-noise", 0);
        let xi_data: Vec<f64> =
            (0..4 * geom.latent_coords()).map(|_| rng.sample(StandardNormal)).collect();
        let xi = Tensor::new(vec![4, geom.latent_len, geom.latent_width], xi_data).unwrap();

        let mut store = init_codec_store(&geom, 5);
        let rel = finite_diff_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let bind = s.bind(&mut tape);
                let loss = full_loss_graph(
                    &mut tape,
                    &bind,
                    &geom,
                    &pos_emb,
                    &pos_dec,
                    &xs,
                    HSource::Live,
                    Some(&xi),
                    1e-2,
                )?;
                let grads = tape.backward(loss)?;
                let by_name = bind.collect(&tape, &grads, |_| true);
                Ok((tape.value(loss).item()?, by_name))
            },
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "max relative gradient error {}", rel);
    }

    #[test]
    fn linear_pair_reaches_tiny_mse_at_full_capacity() {
        // Optimization sanity bound: β=0 and l·d ≥ L·D (here a per-position
        // linear D→D pair) must drive embedding MSE below 1e-6 on 16 items.
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        let xs = random_seqs(16, 6, 99);
        let h = codec.encode_batch(&xs).unwrap();

        let mut rng = stream(1, "linear-pair", 0);
        let mut store = ParamStore::new();
        let d = codec.geom.embed_dim;
        store.insert("lin.w1", Tensor::randn(&[d, d], 0.3, &mut rng));
        store.insert("lin.b1", Tensor::zeros(&[d]));
        store.insert("lin.w2", Tensor::randn(&[d, d], 0.3, &mut rng));
        store.insert("lin.b2", Tensor::zeros(&[d]));
        let adam = AdamParams::with_lr(1e-2);
        let mut last = f64::INFINITY;
        for _ in 0..4000 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let hv = tape.input(h.clone()).unwrap();
            let mid = tape.affine(hv, bind.var("lin.w1"), bind.var("lin.b1")).unwrap();
            let out = tape.affine(mid, bind.var("lin.w2"), bind.var("lin.b2")).unwrap();
            let loss = mse_graph(&mut tape, hv, out).unwrap();
            last = tape.value(loss).item().unwrap();
            if last < 1e-8 {
                break;
            }
            let grads = tape.backward(loss).unwrap();
            let by_name = bind.collect(&tape, &grads, |_| true);
            store.adam_step(&by_name, &adam).unwrap();
        }
        assert!(last < 1e-6, "linear-pair MSE stalled at {}", last);
    }

    #[test]
    fn stage_filters_implement_freezing() {
        assert!(stage1_trainable("decoder.w1", true));
        assert!(!stage1_trainable("embedder.table", true));
        assert!(stage1_trainable("embedder.table", false));
        assert!(!stage1_trainable("compressor.mu_w", true));

        assert!(stage2_trainable("compressor.mu_w"));
        assert!(stage2_trainable("decompressor.out_w"));
        assert!(!stage2_trainable("decoder.w1"));
        assert!(!stage2_trainable("embedder.table"));

        assert!(one_stage_trainable("decoder.w1", true));
        assert!(one_stage_trainable("compressor.mu_w", true));
        assert!(!one_stage_trainable("embedder.table", true));
        assert!(one_stage_trainable("embedder.table", false));
    }

    #[test]
    fn frozen_embedder_is_bit_identical_after_training() {
        let cfg = CodecConfig {
            stage1: StageHyper { lr: 2e-3, batch: 16, max_epochs: 4, patience: 8 },
            stage2: StageHyper { lr: 1e-3, batch: 16, max_epochs: 4, patience: 8 },
            ..small_cfg()
        };
        let data = random_seqs(60, 6, 13);
        let trained = train_codec(&data, &vocab(), &cfg).unwrap();
        let before = Codec::init(&cfg, &vocab(), 6).unwrap();
        for name in ["embedder.table", "embedder.mix_w", "embedder.mix_b"] {
            let a = before.store.get(name).unwrap();
            let b = trained.store.get(name).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} drifted", name);
            }
        }
        // The trainable stacks did move.
        let a = before.store.get("decoder.w1").unwrap();
        let b = trained.store.get("decoder.w1").unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn small_two_stage_run_learns_the_round_trip() {
        let cfg = CodecConfig {
            conv_channels: 32,
            stage1: StageHyper { lr: 2e-3, batch: 32, max_epochs: 40, patience: 8 },
            stage2: StageHyper { lr: 1e-2, batch: 32, max_epochs: 300, patience: 30 },
            ..small_cfg()
        };
        let data = random_seqs(150, 6, 23);
        let codec = train_codec(&data, &vocab(), &cfg).unwrap();
        let dec_acc = codec.decoder_accuracy(&data).unwrap();
        assert!(dec_acc >= 0.99, "decoder accuracy {}", dec_acc);
        let rt = codec.round_trip_accuracy(&data).unwrap();
        assert!(rt >= 0.9, "round-trip accuracy {}", rt);
    }

    #[test]
    fn one_stage_completes() {
        let cfg = CodecConfig {
            conv_channels: 24,
            stage_mode: StageMode::OneStage,
            stage2: StageHyper { lr: 3e-3, batch: 32, max_epochs: 60, patience: 10 },
            ..small_cfg()
        };
        let data = random_seqs(80, 6, 31);
        let codec = train_codec(&data, &vocab(), &cfg).unwrap();
        let rt = codec.round_trip_accuracy(&data).unwrap();
        assert!(rt > 1.0 / 4f64.powi(3), "one-stage round trip {} no better than chance", rt);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        assert!(matches!(
            train_codec(&[], &vocab(), &small_cfg()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn divergence_reports_the_stage() {
        // An absurd stage-2 step size overflows the embedding-reconstruction
        // term within an epoch or two; the error must name the stage.
        let cfg = CodecConfig {
            stage1: StageHyper { lr: 2e-3, batch: 16, max_epochs: 2, patience: 8 },
            stage2: StageHyper { lr: 1e30, batch: 16, max_epochs: 6, patience: 8 },
            ..small_cfg()
        };
        let data = random_seqs(40, 6, 3);
        match train_codec(&data, &vocab(), &cfg) {
            Err(Error::NonFinite { context }) => {
                assert!(context.contains("stage 2"), "context: {}", context)
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CodecConfig {
            stage1: StageHyper { lr: 2e-3, batch: 16, max_epochs: 3, patience: 8 },
            stage2: StageHyper { lr: 1e-3, batch: 16, max_epochs: 3, patience: 8 },
            ..small_cfg()
        };
        let data = random_seqs(50, 6, 17);
        let a = train_codec(&data, &vocab(), &cfg).unwrap();
        let b = train_codec(&data, &vocab(), &cfg).unwrap();
        let bn = b.named_params();
        for (name, ta) in a.named_params() {
            for (x, y) in ta.data().iter().zip(bn[&name].data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} differs", name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        save_codec(&path, &codec).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = load_codec(&path).unwrap();
        assert_eq!(back.config, codec.config);
        let x = codec.vocab.parse("TACGAT").unwrap();
        let ha = codec.encode(&x).unwrap();
        let hb = back.encode(&x).unwrap();
        for (a, b) in ha.data().iter().zip(hb.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_architecture_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let codec = Codec::init(&small_cfg(), &vocab(), 6).unwrap();
        save_codec(&path, &codec).unwrap();
        // Doctor the sidecar to claim wider conv stacks (geometry stays
        // valid, tensor shapes don't).
        let spath = sidecar_path(&path);
        let text = std::fs::read_to_string(&spath).unwrap();
        let doctored = text.replace("\"conv_channels\": 10", "\"conv_channels\": 12");
        assert_ne!(text, doctored);
        std::fs::write(&spath, doctored).unwrap();
        assert!(matches!(load_codec(&path), Err(Error::Format { .. })));
    }

    #[test]
    #[ignore]
    fn probe_desk_scale_round_trip() {
        use crate::landscape::{build_benchmark, make_landscape, BenchmarkParams, Difficulty, LandscapeSpec};
        let spec = LandscapeSpec {
            vocab: "ACGT".into(),
            length: 10,
            n_epistatic_terms: 30,
            seed: 11,
            ..Default::default()
        };
        let scape = make_landscape(&spec).unwrap();
        let params = BenchmarkParams {
            difficulty: Difficulty::Medium,
            size: 2000,
            min_gap: Some(4),
        };
        let subset = build_benchmark(&scape, &params).unwrap();
        let data = subset.sequences();

        for (ch, lr, epochs) in [(64, 3e-3, 60), (96, 3e-3, 60), (96, 1e-2, 60)] {
            let cfg = CodecConfig {
                conv_channels: ch,
                stage1: StageHyper { lr: 2e-3, batch: 64, max_epochs: 30, patience: 8 },
                stage2: StageHyper { lr, batch: 64, max_epochs: epochs, patience: 8 },
                seed: 5,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let codec = train_codec(&data, &Vocabulary::new("ACGT").unwrap(), &cfg).unwrap();
            println!(
                "ch={:<3} lr={:<8e} epochs={:<3} dec={:.4} rt={:.4} elapsed={:.1}s",
                ch,
                lr,
                epochs,
                codec.decoder_accuracy(&data).unwrap(),
                codec.round_trip_accuracy(&data).unwrap(),
                t0.elapsed().as_secs_f64()
            );
        }
    }

    #[test]
    fn codec_is_shareable_across_threads() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<Codec>();
    }
}
