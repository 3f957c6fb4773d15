//! Learned stand-in for the oracle: a small feed-forward scorer trained on a
//! benchmark subset's (sequence, fitness) pairs. Downstream selection and
//! target calibration rank with this predictor so ground truth stays sealed.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numcore::rng::stream;
use crate::numcore::{AdamParams, Binding, ParamStore, Tape, Tensor, Var};
use crate::seqkit::{Sequence, Vocabulary};

use super::BenchmarkSubset;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct RankerConfig {
    pub hidden: (usize, usize),
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            hidden: (64, 32),
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 20,
            seed: 0,
        }
    }
}

/// Trained scorer over one-hot encodings. Holds no oracle access.
pub struct RankingPredictor {
    store: ParamStore<f64>,
    length: usize,
    vocab_size: usize,
    hidden: (usize, usize),
    /// Targets are standardized for training; predictions are mapped back.
    y_mean: f64,
    y_std: f64,
    /// Mean squared error on the internal 20% validation split, original scale.
    pub val_mse: f64,
}

fn one_hot_rows(seqs: &[&Sequence], length: usize, vocab_size: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; seqs.len() * length * vocab_size];
    for (r, seq) in seqs.iter().enumerate() {
        if seq.len() != length {
            return Err(Error::contract(format!(
                "ranker got a length-{} sequence, expected {}",
                seq.len(),
                length
            )));
        }
        for (p, &s) in seq.indices().iter().enumerate() {
            data[r * length * vocab_size + p * vocab_size + s as usize] = 1.0;
        }
    }
    Tensor::new(vec![seqs.len(), length * vocab_size], data)
}

fn init_store(length: usize, vocab_size: usize, hidden: (usize, usize), seed: u64) -> ParamStore<f64> {
    let d_in = length * vocab_size;
    let (h1, h2) = hidden;
    let mut rng = stream(seed, "ranker-init", 0);
    let mut store = ParamStore::new();
    store.insert("ranker.w1", Tensor::randn(&[d_in, h1], (2.0 / d_in as f64).sqrt(), &mut rng));
    store.insert("ranker.b1", Tensor::zeros(&[h1]));
    store.insert("ranker.w2", Tensor::randn(&[h1, h2], (2.0 / h1 as f64).sqrt(), &mut rng));
    store.insert("ranker.b2", Tensor::zeros(&[h2]));
    store.insert("ranker.w3", Tensor::randn(&[h2, 1], (1.0 / h2 as f64).sqrt(), &mut rng));
    store.insert("ranker.b3", Tensor::zeros(&[1]));
    store
}

fn forward(tape: &mut Tape<f64>, bind: &Binding, x: Var) -> Result<Var> {
    let h1 = tape.affine(x, bind.var("ranker.w1"), bind.var("ranker.b1"))?;
    let h1 = tape.gelu(h1);
    let h2 = tape.affine(h1, bind.var("ranker.w2"), bind.var("ranker.b2"))?;
    let h2 = tape.gelu(h2);
    tape.affine(h2, bind.var("ranker.w3"), bind.var("ranker.b3"))
}

fn mse_loss(tape: &mut Tape<f64>, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Train on an 80/20 split of the subset; early-stops on validation MSE and
/// returns the best-epoch parameters.
pub fn train_ranker(
    subset: &BenchmarkSubset,
    vocab: &Vocabulary,
    cfg: &RankerConfig,
) -> Result<RankingPredictor> {
    let n = subset.len();
    if n < 100 {
        return Err(Error::contract(format!(
            "ranker needs at least 100 records, got {}",
            n
        )));
    }
    let length = subset.records[0].sequence.len();
    let vocab_size = vocab.size();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, "ranker-split", 0));
    let n_val = (n / 5).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    // Fit the standardization to the training split only.
    let y_mean = train_idx.iter().map(|&i| subset.records[i].fitness).sum::<f64>()
        / train_idx.len() as f64;
    let y_var = train_idx
        .iter()
        .map(|&i| (subset.records[i].fitness - y_mean).powi(2))
        .sum::<f64>()
        / train_idx.len() as f64;
    let y_std = if y_var.sqrt() > 1e-12 { y_var.sqrt() } else { 1.0 };

    let gather = |idx: &[usize]| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let seqs: Vec<&Sequence> = idx.iter().map(|&i| &subset.records[i].sequence).collect();
        let x = one_hot_rows(&seqs, length, vocab_size)?;
        let y = Tensor::new(
            vec![idx.len(), 1],
            idx.iter().map(|&i| (subset.records[i].fitness - y_mean) / y_std).collect(),
        )?;
        Ok((x, y))
    };
    let (val_x, val_y) = gather(val_idx)?;

    let mut store = init_store(length, vocab_size, cfg.hidden, cfg.seed);
    let adam = AdamParams::with_lr(cfg.lr);

    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xv = tape.input(x.clone())?;
        let yv = tape.input(y.clone())?;
        let pred = forward(&mut tape, &bind, xv)?;
        let loss = mse_loss(&mut tape, pred, yv)?;
        Ok(tape.value(loss).item()?)
    };

    let mut best_mse = eval(&store, &val_x, &val_y)?;
    let mut best_params = store.to_named();
    let mut stale = 0usize;

    let mut train_order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.max_epochs {
        train_order.shuffle(&mut stream(cfg.seed, "ranker-epoch", epoch as u64));
        for chunk in train_order.chunks(cfg.batch_size) {
            let (x, y) = gather(chunk)?;
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let xv = tape.input(x)?;
            let yv = tape.input(y)?;
            let pred = forward(&mut tape, &bind, xv)?;
            let loss = mse_loss(&mut tape, pred, yv)?;
            let loss_val: f64 = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("ranker training loss at epoch {}", epoch),
                });
            }
            let grads = tape.backward(loss)?;
            let by_name = bind.collect(&tape, &grads, |_| true);
            store.adam_step(&by_name, &adam)?;
        }
        let mse = eval(&store, &val_x, &val_y)?;
        if mse < best_mse {
            best_mse = mse;
            best_params = store.to_named();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    Ok(RankingPredictor {
        store: ParamStore::from_named(best_params),
        length,
        vocab_size,
        hidden: cfg.hidden,
        y_mean,
        y_std,
        val_mse: best_mse * y_std * y_std,
    })
}

impl RankingPredictor {
    /// Predicted scores, one per sequence, in input order.
    pub fn score_batch(&self, seqs: &[Sequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let x = one_hot_rows(&refs, self.length, self.vocab_size)?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let xv = tape.input(x)?;
        let pred = forward(&mut tape, &bind, xv)?;
        Ok(tape.value(pred).data().iter().map(|&p| p * self.y_std + self.y_mean).collect())
    }

    pub fn score(&self, seq: &Sequence) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(seq))?[0])
    }

    pub fn hidden(&self) -> (usize, usize) {
        self.hidden
    }
}

/// The `k` highest-scoring candidates, best first. Score ties keep the
/// earlier list position.
pub fn rank_topk(
    predictor: &RankingPredictor,
    candidates: &[Sequence],
    k: usize,
) -> Result<Vec<Sequence>> {
    if k > candidates.len() {
        return Err(Error::contract(format!(
            "asked for top {} of {} candidates",
            k,
            candidates.len()
        )));
    }
    let scores = predictor.score_batch(candidates)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| candidates[i].clone()).collect())
}
