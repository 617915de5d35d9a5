//! Next-item training: each position's hidden state scores the following
//! item against the whole vocabulary through the tied item embeddings.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncoderParams, LongTermEncoder, SparseIndices};
use crate::error::{Error, Result};
use crate::ingest::{FilteredLongSequence, UserAttributes};
use crate::nn;
use crate::params::{Momentum, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            steps: 100,
            batch_size: 16,
        }
    }
}

/// A training sequence in index form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub items: Vec<usize>,
    pub sparse: SparseIndices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub loss_trace: Vec<f64>,
    pub sequences_used: usize,
}

/// Summed loss, prediction count, and unnormalized gradients for one sequence.
fn sequence_loss_grad(params: &EncoderParams, seq: &TrainingSequence) -> Result<(f64, usize, EncoderParams)> {
    let mut grads = params.zeros_like();
    let t = seq.items.len();
    if t < 2 {
        return Ok((0.0, 0, grads));
    }
    let h0 = params.embed_indices(&seq.items, seq.sparse)?;
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut h = h0;
    for layer in &params.layers {
        let (y, cache) = layer.forward_cached(&h)?;
        caches.push(cache);
        h = y;
    }
    // row r (1..t-1) holds item r and predicts item r+1
    let hidden = h.slice(s![1..t, ..]);
    let mut dlogits = hidden.dot(&params.table.items.t());
    let mut loss = 0.0;
    for (r, mut row) in dlogits.axis_iter_mut(Axis(0)).enumerate() {
        let target = seq.items[r + 1];
        let lse = nn::log_sum_exp(row.as_slice().expect("fresh matrix"));
        loss += lse - row[target];
        row.mapv_inplace(|z| (z - lse).exp());
        row[target] -= 1.0;
    }
    grads.table.items += &dlogits.t().dot(&hidden);
    let mut dh = Array2::zeros(h.raw_dim());
    dh.slice_mut(s![1..t, ..]).assign(&dlogits.dot(&params.table.items));

    for (i, layer) in params.layers.iter().enumerate().rev() {
        dh = layer.backward(&caches[i], &dh, &mut grads.layers[i]);
    }

    grads.table.positions.slice_mut(s![0..=t, ..]).scaled_add(1.0, &dh);
    let d0 = dh.row(0);
    grads.table.age.row_mut(seq.sparse.age).scaled_add(1.0, &d0);
    grads.table.gender.row_mut(seq.sparse.gender).scaled_add(1.0, &d0);
    grads.table.occupation.row_mut(seq.sparse.occupation).scaled_add(1.0, &d0);
    for (pos, &item) in seq.items.iter().enumerate() {
        grads.table.items.row_mut(item).scaled_add(1.0, &dh.row(pos + 1));
    }
    Ok((loss, t - 1, grads))
}

/// Mean next-item cross-entropy over every prediction in `batch`, with its
/// gradient.
pub fn batch_loss_and_grad(params: &EncoderParams, batch: &[&TrainingSequence]) -> Result<(f64, EncoderParams)> {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|seq| sequence_loss_grad(params, seq))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut count = 0;
    for (l, n, g) in &parts {
        loss += l;
        count += n;
        grads.add_scaled(g, 1.0);
    }
    if count == 0 {
        return Err(Error::EmptyDataset("no sequence in the batch has two items".into()));
    }
    grads.scale(1.0 / count as f64);
    Ok((loss / count as f64, grads))
}

/// Trains in place with momentum SGD; batches are drawn from a seeded
/// shuffle of the sequences with at least two items.
pub fn train_encoder(
    encoder: &mut LongTermEncoder,
    dataset: &[(FilteredLongSequence, UserAttributes)],
    config: &EncoderTrainConfig,
    seed: u64,
) -> Result<EncoderTrainReport> {
    let mut sequences = Vec::new();
    for (filtered, attrs) in dataset {
        let items = encoder.item_indices(filtered)?;
        if items.len() >= 2 {
            sequences.push(TrainingSequence {
                items,
                sparse: attrs.into(),
            });
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(
            "no filtered long-term sequence has two or more items".into(),
        ));
    }
    let batch_size = config.batch_size.max(1).min(sequences.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Momentum::new(config.lr, config.momentum);
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&sequences[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_loss_and_grad(&encoder.params, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite("encoder training step".into()));
        }
        opt.step(&mut encoder.params, &grads);
        trace.push(loss);
    }
    Ok(EncoderTrainReport {
        loss_trace: trace,
        sequences_used: sequences.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ItemVocab};
    use crate::ingest::{ItemId, UserId};

    fn toy(n_users: usize, n_items: usize, init_scale: f64) -> (LongTermEncoder, Vec<(FilteredLongSequence, UserAttributes)>) {
        let cfg = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            max_len: 8,
            init_scale,
        };
        let vocab = ItemVocab::new((0..n_items).map(|i| ItemId::new(i.to_string())));
        let enc = LongTermEncoder::new(cfg, vocab, 3).unwrap();
        let data = (0..n_users)
            .map(|u| {
                // each user walks the catalogue with its own stride
                let items = (0..6).map(|t| ItemId::new(((u + t * (1 + u % 3)) % n_items).to_string())).collect();
                let user = UserId::new(u.to_string());
                (
                    FilteredLongSequence {
                        user_id: user.clone(),
                        items,
                    },
                    UserAttributes::unknown(user),
                )
            })
            .collect();
        (enc, data)
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let (mut enc, data) = toy(4, 12, 1e-4);
        let cfg = EncoderTrainConfig {
            lr: 0.0,
            momentum: 0.0,
            steps: 1,
            batch_size: 4,
        };
        let report = train_encoder(&mut enc, &data, &cfg, 0).unwrap();
        assert!((report.loss_trace[0] - (12f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn fifty_steps_reduce_loss_and_trace_is_reproducible() {
        let (enc, data) = toy(10, 12, 0.1);
        let cfg = EncoderTrainConfig {
            lr: 0.1,
            momentum: 0.9,
            steps: 50,
            batch_size: 5,
        };
        let mut a = enc.clone();
        let ra = train_encoder(&mut a, &data, &cfg, 9).unwrap();
        let mut b = enc.clone();
        let rb = train_encoder(&mut b, &data, &cfg, 9).unwrap();
        assert_eq!(ra.loss_trace, rb.loss_trace);
        let first = ra.loss_trace[..5].iter().sum::<f64>();
        let last = ra.loss_trace[45..].iter().sum::<f64>();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn empty_effective_dataset_is_rejected() {
        let (mut enc, mut data) = toy(3, 5, 0.1);
        for (f, _) in &mut data {
            f.items.truncate(1);
        }
        let err = train_encoder(&mut enc, &data, &EncoderTrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }
}
