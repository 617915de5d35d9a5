use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendKind, CandidateSet, LlmBackend, RenderedPrompt};
use crate::error::{Error, Result};
use crate::store::fnv1a64;
use crate::training::{Featurizer, ModelPair, NoveltyPolicy, RewardModel};

/// Mutable model state shared by concurrent callers.
#[derive(Debug, Clone)]
pub struct SimState {
    pub policy: NoveltyPolicy,
    pub reward: RewardModel,
}

/// Candidates are sampled from the novelty policy and scores come from the
/// reward model. Sampling depends only on the seed, the prompt text, and the
/// current epoch.
#[derive(Debug)]
pub struct SimulatedBackend {
    seed: u64,
    featurizer: Featurizer,
    state: Mutex<SimState>,
    epoch: AtomicU64,
}

impl SimulatedBackend {
    pub fn new(seed: u64, models: ModelPair) -> Self {
        Self {
            seed,
            featurizer: models.featurizer,
            state: Mutex::new(SimState {
                policy: models.policy,
                reward: models.reward,
            }),
            epoch: AtomicU64::new(0),
        }
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    /// Changes the sampling stream, e.g. once per optimization cycle.
    pub fn set_epoch(&self, epoch: u64) {
        self.epoch.store(epoch, Ordering::SeqCst);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    pub fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn models(&self) -> ModelPair {
        let s = self.lock();
        ModelPair {
            featurizer: self.featurizer.clone(),
            policy: s.policy.clone(),
            reward: s.reward.clone(),
        }
    }

    fn rng_for(&self, text: &str) -> ChaCha8Rng {
        let mix = self.epoch().wrapping_mul(0x9e37_79b9_7f4a_7c15);
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(text.as_bytes()) ^ mix)
    }
}

/// Draws up to `m` distinct indices with probability proportional to
/// `weights`, skipping entries with weight zero.
fn sample_without_replacement(weights: &mut [f64], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = Vec::with_capacity(m);
    while picked.len() < m {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                choice = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let i = choice.expect("positive total weight");
        picked.push(i);
        weights[i] = 0.0;
    }
    picked
}

impl LlmBackend for SimulatedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    /// Names the three most frequent categories in the sequences.
    fn generate_profile(&self, prompt: &RenderedPrompt) -> Result<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in prompt.context.sequences.iter().flatten() {
            *counts.entry(c.as_str()).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::InvalidPrompt("no categories to profile".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let top: Vec<&str> = ranked.iter().take(3).map(|(c, _)| *c).collect();
        Ok(format!("Members of this group mostly choose {}.", top.join(", ")))
    }

    fn generate_candidates(&self, prompt: &RenderedPrompt, m_cand: usize) -> Result<CandidateSet> {
        let vocab = self.featurizer.vocab();
        let x = self.featurizer.features(&prompt.context.pair_context())?;
        let mut probs = self.lock().policy.probs(&x).to_vec();
        for c in &prompt.context.short_categories {
            if let Some(i) = vocab.index(c) {
                probs[i] = 0.0;
            }
        }
        let available = probs.iter().filter(|&&p| p > 0.0).count();
        let mut rng = self.rng_for(&prompt.text);
        let picked = sample_without_replacement(&mut probs, m_cand, &mut rng);
        Ok(CandidateSet {
            categories: picked.into_iter().map(|i| vocab.label(i).to_string()).collect(),
            truncated: available < m_cand,
        })
    }

    fn score_candidate(&self, prompt: &RenderedPrompt) -> Result<f64> {
        let candidate = prompt
            .context
            .candidate
            .as_deref()
            .ok_or_else(|| Error::MissingSlot("candidate".into()))?;
        let c = self.featurizer.vocab().require(candidate)?;
        let x = self.featurizer.features(&prompt.context.pair_context())?;
        let s = self.lock().reward.score(&x, c);
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("reward for {candidate}")));
        }
        Ok(s)
    }

    fn simulated(&self) -> Option<&SimulatedBackend> {
        Some(self)
    }
}
