//! Finite-difference checks shared by the gradient tests and the acceptance
//! target. Each returns the worst relative error over its instances.

use coea_core::encoder::{batch_loss_and_grad, EncoderConfig, EncoderParams, SparseIndices, TrainingSequence};
use coea_core::nn;
use coea_core::pco::{dpo_loss, kl_penalty, total_loss};
use coea_core::quantizer::{rqvae_forward, rqvae_loss_grad, straight_through_loss, Mlp, RqVaeParams};
use coea_core::training::{rm_loss, sft_loss, NoveltyPolicy, PairExample, RewardModel, SftExample};
use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::max_rel_error;

const FEATURES: usize = 10;
const CATEGORIES: usize = 7;
const SEEDS: u64 = 3;

pub fn encoder_next_item() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let cfg = EncoderConfig {
            d: 8,
            layers: if seed == 2 { 2 } else { 1 },
            heads: 2,
            max_len: 5,
            init_scale: 0.5,
        };
        let params = EncoderParams::init(&cfg, 6, seed).unwrap();
        let seqs = [TrainingSequence {
                items: vec![0, 3, 1, 5],
                sparse: SparseIndices { age: 1, gender: 0, occupation: 3 },
            },
            TrainingSequence {
                items: vec![2, 2, 4],
                sparse: SparseIndices { age: 0, gender: 1, occupation: 7 },
            }];
        let batch: Vec<&TrainingSequence> = seqs.iter().collect();
        let (_, grads) = batch_loss_and_grad(&params, &batch).unwrap();
        worst = worst.max(max_rel_error(&params, &grads, |p| batch_loss_and_grad(p, &batch).unwrap().0));
    }
    worst
}

/// Encoder and decoder weights with the selected codewords held fixed.
pub fn rqvae_straight_through() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = RqVaeParams {
            encoder: Mlp::new(6, 7, 4, 0.6, &mut rng),
            decoder: Mlp::new(4, 7, 6, 0.6, &mut rng),
            codebooks: vec![nn::randn2(&mut rng, 4, 4, 1.0), nn::randn2(&mut rng, 4, 4, 0.4)],
        };
        let batch = nn::randn2(&mut rng, 5, 6, 1.0);
        let (_, grads, _) = rqvae_loss_grad(&params, &batch, 0.25);
        let frozen: Vec<_> = batch.axis_iter(Axis(0)).map(|u| rqvae_forward(u, &params).1).collect();
        worst = worst.max(max_rel_error(&params, &grads, |p| {
            batch
                .axis_iter(Axis(0))
                .zip(&frozen)
                .map(|(u, q)| straight_through_loss(p, u, q, 0.25))
                .sum::<f64>()
                / batch.nrows() as f64
        }));
    }
    worst
}

/// Dense features with one exact zero, so both branches of the sparse
/// product are exercised.
fn features(rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut x = Array1::from_shape_fn(FEATURES, |_| rng.random_range(-1.0..1.0));
    x[rng.random_range(0..FEATURES)] = 0.0;
    x
}

fn pairs(seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..6)
        .map(|_| {
            let pos = rng.random_range(0..CATEGORIES);
            let neg = (pos + rng.random_range(1..CATEGORIES)) % CATEGORIES;
            PairExample { features: features(&mut rng), pos, neg }
        })
        .collect()
}

fn policies(seed: u64) -> (NoveltyPolicy, NoveltyPolicy) {
    (
        NoveltyPolicy::random(FEATURES, CATEGORIES, 0.5, seed),
        NoveltyPolicy::random(FEATURES, CATEGORIES, 0.5, seed + 50),
    )
}

pub fn sft() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples: Vec<SftExample> = (0..6)
            .map(|_| SftExample { features: features(&mut rng), target: rng.random_range(0..CATEGORIES) })
            .collect();
        let policy = NoveltyPolicy::random(FEATURES, CATEGORIES, 0.5, seed);
        let (_, grads) = sft_loss(&policy, &examples).unwrap();
        worst = worst.max(max_rel_error(&policy, &grads, |p| sft_loss(p, &examples).unwrap().0));
    }
    worst
}

pub fn reward() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let batch = pairs(seed);
        let reward = RewardModel::new(FEATURES, CATEGORIES, 4, 0.5, seed);
        let (_, grads) = rm_loss(&reward, &batch).unwrap();
        worst = worst.max(max_rel_error(&reward, &grads, |r| rm_loss(r, &batch).unwrap().0));
    }
    worst
}

pub fn dpo() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let batch = pairs(seed);
        let (policy, reference) = policies(seed);
        for beta in [0.1, 1.0] {
            let (_, grads) = dpo_loss(&policy, &reference, &batch, beta).unwrap();
            worst = worst.max(max_rel_error(&policy, &grads, |p| dpo_loss(p, &reference, &batch, beta).unwrap().0));
        }
    }
    worst
}

pub fn kl() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let contexts: Vec<Array1<f64>> = (0..5).map(|_| features(&mut rng)).collect();
        let (policy, reference) = policies(seed);
        let (_, grads) = kl_penalty(&policy, &reference, &contexts);
        worst = worst.max(max_rel_error(&policy, &grads, |p| kl_penalty(p, &reference, &contexts).0));
    }
    worst
}

/// DPO plus α·KL, α = 0.4, β = 0.1.
pub fn combined() -> f64 {
    let batch = pairs(9);
    let (policy, reference) = policies(9);
    let (_, grads) = total_loss(&policy, &reference, &batch, 0.4, 0.1).unwrap();
    max_rel_error(&policy, &grads, |p| total_loss(p, &reference, &batch, 0.4, 0.1).unwrap().0.total(0.4))
}
