//! The trainable stand-ins for the novelty generator and the relevance
//! scorer: a log-linear category policy and a bilinear reward model over
//! group and recent-category features, with their supervised, pairwise, and
//! filtering objectives.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ingest::{CategoryVocab, UserId};
use crate::nn;
use crate::params::{visit1, visit1_mut, visit2, visit2_mut, Adam, Params};
use crate::quantizer::GroupCsid;
use crate::store::fnv1a64;

/// What a prompt tells the small models: the user's group and the recent
/// category window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairContext {
    pub group: Option<GroupCsid>,
    pub window: Vec<String>,
}

impl PairContext {
    pub fn digest(&self) -> String {
        let group = self.group.as_ref().map(|g| g.to_string()).unwrap_or_default();
        format!("{:016x}", fnv1a64(format!("{group}|{}", self.window.join(",")).as_bytes()))
    }
}

/// Group one-hot followed by window multi-hot. Contexts from unknown groups
/// get no group bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    groups: Vec<GroupCsid>,
    categories: Vec<String>,
    #[serde(skip)]
    vocab: CategoryVocab,
}

impl Featurizer {
    pub fn new(groups: impl IntoIterator<Item = GroupCsid>, vocab: CategoryVocab) -> Self {
        let set: BTreeSet<GroupCsid> = groups.into_iter().collect();
        Self {
            groups: set.into_iter().collect(),
            categories: vocab.labels().to_vec(),
            vocab,
        }
    }

    fn restore(mut self) -> Self {
        self.vocab = CategoryVocab::new(self.categories.iter().cloned());
        self
    }

    pub fn dim(&self) -> usize {
        self.groups.len() + self.categories.len()
    }

    pub fn vocab(&self) -> &CategoryVocab {
        &self.vocab
    }

    pub fn groups(&self) -> &[GroupCsid] {
        &self.groups
    }

    pub fn features(&self, ctx: &PairContext) -> Result<Array1<f64>> {
        let mut x = Array1::zeros(self.dim());
        if let Some(g) = &ctx.group {
            if let Ok(i) = self.groups.binary_search(g) {
                x[i] = 1.0;
            }
        }
        for c in &ctx.window {
            x[self.groups.len() + self.vocab.require(c)?] = 1.0;
        }
        Ok(x)
    }
}

/// π(c | x) = softmax(Wᵀx + b).
#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyPolicy {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Params for NoveltyPolicy {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "weights", &self.weights);
        visit1(f, "bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(f, "weights", &mut self.weights);
        visit1_mut(f, "bias", &mut self.bias);
    }
}

impl NoveltyPolicy {
    /// All-zero parameters: the uniform policy.
    pub fn uniform(features: usize, categories: usize) -> Self {
        Self {
            weights: Array2::zeros((features, categories)),
            bias: Array1::zeros(categories),
        }
    }

    pub fn random(features: usize, categories: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: nn::randn2(&mut rng, features, categories, scale),
            bias: nn::randn1(&mut rng, categories, scale),
        }
    }

    pub fn n_categories(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Array1<f64>) -> Array1<f64> {
        nn::sparse_vec_mat(x, &self.weights) + &self.bias
    }

    pub fn log_probs(&self, x: &Array1<f64>) -> Array1<f64> {
        let l = self.logits(x);
        Array1::from(nn::log_softmax(l.as_slice().expect("fresh vector")))
    }

    pub fn probs(&self, x: &Array1<f64>) -> Array1<f64> {
        self.log_probs(x).mapv(f64::exp)
    }

    /// Adds `scale · ∂(gᵀ logits)/∂θ` into `grads`.
    pub fn accumulate_logit_grad(grads: &mut NoveltyPolicy, x: &Array1<f64>, g: &Array1<f64>, scale: f64) {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                grads.weights.row_mut(i).scaled_add(scale * xi, g);
            }
        }
        grads.bias.scaled_add(scale, g);
    }
}

/// r(x, c) = (Aᵀx)ᵀ B e_c + b_c.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub context: Array2<f64>,
    pub category: Array2<f64>,
    pub interaction: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Params for RewardModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "context", &self.context);
        visit2(f, "category", &self.category);
        visit2(f, "interaction", &self.interaction);
        visit1(f, "bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(f, "context", &mut self.context);
        visit2_mut(f, "category", &mut self.category);
        visit2_mut(f, "interaction", &mut self.interaction);
        visit1_mut(f, "bias", &mut self.bias);
    }
}

impl RewardModel {
    pub fn new(features: usize, categories: usize, embedding: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            context: nn::randn2(&mut rng, features, embedding, scale),
            category: nn::randn2(&mut rng, categories, embedding, scale),
            interaction: nn::randn2(&mut rng, embedding, embedding, scale),
            bias: Array1::zeros(categories),
        }
    }

    pub fn n_categories(&self) -> usize {
        self.bias.len()
    }

    pub fn score(&self, x: &Array1<f64>, c: usize) -> f64 {
        let a = nn::sparse_vec_mat(x, &self.context);
        a.dot(&self.interaction).dot(&self.category.row(c)) + self.bias[c]
    }

    fn accumulate_score_grad(&self, grads: &mut RewardModel, x: &Array1<f64>, c: usize, scale: f64) {
        let a = nn::sparse_vec_mat(x, &self.context);
        let e = self.category.row(c);
        let be = self.interaction.dot(&e);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                grads.context.row_mut(i).scaled_add(scale * xi, &be);
            }
        }
        let bta = a.dot(&self.interaction);
        grads.category.row_mut(c).scaled_add(scale, &bta);
        for (i, &ai) in a.iter().enumerate() {
            grads.interaction.row_mut(i).scaled_add(scale * ai, &e);
        }
        grads.bias[c] += scale;
    }
}

/// Featurized next-category example.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub features: Array1<f64>,
    pub target: usize,
}

/// Featurized preference example.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub features: Array1<f64>,
    pub pos: usize,
    pub neg: usize,
}

fn check_category(c: usize, n: usize) -> Result<()> {
    if c >= n {
        return Err(Error::UnknownCategory(format!("index {c}")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn sft_loss(policy: &NoveltyPolicy, examples: &[SftExample]) -> Result<(f64, NoveltyPolicy)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no supervised examples".into()));
    }
    let n = examples.len() as f64;
    let mut grads = policy.zeros_like();
    let mut loss = 0.0;
    for ex in examples {
        check_category(ex.target, policy.n_categories())?;
        let lp = policy.log_probs(&ex.features);
        loss -= lp[ex.target];
        let mut g = lp.mapv(f64::exp);
        g[ex.target] -= 1.0;
        NoveltyPolicy::accumulate_logit_grad(&mut grads, &ex.features, &g, 1.0 / n);
    }
    Ok((loss / n, grads))
}

/// Mean −ln σ(r_pos − r_neg) and its gradient.
pub fn rm_loss(reward: &RewardModel, pairs: &[PairExample]) -> Result<(f64, RewardModel)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no preference pairs".into()));
    }
    let n = pairs.len() as f64;
    let mut grads = reward.zeros_like();
    let mut loss = 0.0;
    for p in pairs {
        check_category(p.pos, reward.n_categories())?;
        check_category(p.neg, reward.n_categories())?;
        let delta = reward.score(&p.features, p.pos) - reward.score(&p.features, p.neg);
        loss += nn::softplus(-delta);
        let d = -nn::sigmoid(-delta) / n;
        reward.accumulate_score_grad(&mut grads, &p.features, p.pos, d);
        reward.accumulate_score_grad(&mut grads, &p.features, p.neg, -d);
    }
    Ok((loss / n, grads))
}

/// Logistic map, kept inside the open unit interval.
pub fn normalize_score(raw: f64) -> f64 {
    nn::sigmoid(raw).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Candidates whose normalized score clears the threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignedCategories {
    pub categories: Vec<(String, f64)>,
}

impl AlignedCategories {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|(c, _)| c.as_str())
    }
}

/// Keeps candidates scoring strictly above `tau`, in input order.
pub fn select_aligned(scored: &[(String, f64)], tau: f64) -> AlignedCategories {
    AlignedCategories {
        categories: scored.iter().filter(|(_, s)| *s > tau).cloned().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferencePair {
    pub user_id: UserId,
    pub context: PairContext,
    pub pos: String,
    pub neg: String,
}

/// A user's ordered short-window categories and group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryHistory {
    pub group: Option<GroupCsid>,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    /// Clicks with no unclicked category left in the exposure set.
    pub skipped: usize,
}

/// The `p` categories with the most clicks, ties broken by name.
pub fn popular_categories(clicks: &BTreeMap<String, usize>, p: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, &usize)> = clicks.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(p).map(|(c, _)| c.clone()).collect()
}

fn user_rng(seed: u64, user: &UserId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(user.as_str().as_bytes()))
}

/// One pair per click that has two preceding categories: the clicked
/// category is preferred over a category drawn from the exposure set that
/// the user never clicked in this window.
pub fn build_preference_pairs(
    histories: &BTreeMap<UserId, CategoryHistory>,
    exposure: &[String],
    seed: u64,
) -> PairBuild {
    let mut out = PairBuild::default();
    for (user, h) in histories {
        if h.categories.len() < 3 {
            continue;
        }
        let clicked: BTreeSet<&str> = h.categories.iter().map(String::as_str).collect();
        let unclicked: Vec<&String> = exposure.iter().filter(|c| !clicked.contains(c.as_str())).collect();
        let mut rng = user_rng(seed, user);
        for t in 2..h.categories.len() {
            match unclicked.choose(&mut rng) {
                Some(neg) => out.pairs.push(PreferencePair {
                    user_id: user.clone(),
                    context: PairContext {
                        group: h.group.clone(),
                        window: h.categories[t - 2..t].to_vec(),
                    },
                    pos: h.categories[t].clone(),
                    neg: (*neg).clone(),
                }),
                None => out.skipped += 1,
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub user_id: UserId,
    pub context: PairContext,
    pub target: String,
}

/// Next-category examples from two-category windows, keeping only targets
/// absent from the user's long-term categories.
pub fn build_sft_records(
    histories: &BTreeMap<UserId, CategoryHistory>,
    long_term: &BTreeMap<UserId, BTreeSet<String>>,
) -> Vec<SftRecord> {
    let empty = BTreeSet::new();
    let mut out = Vec::new();
    for (user, h) in histories {
        let seen = long_term.get(user).unwrap_or(&empty);
        for t in 2..h.categories.len() {
            if seen.contains(&h.categories[t]) {
                continue;
            }
            out.push(SftRecord {
                user_id: user.clone(),
                context: PairContext {
                    group: h.group.clone(),
                    window: h.categories[t - 2..t].to_vec(),
                },
                target: h.categories[t].clone(),
            });
        }
    }
    out
}

pub fn sft_examples(f: &Featurizer, records: &[SftRecord]) -> Result<Vec<SftExample>> {
    records
        .iter()
        .map(|r| {
            Ok(SftExample {
                features: f.features(&r.context)?,
                target: f.vocab().require(&r.target)?,
            })
        })
        .collect()
}

pub fn pair_examples(f: &Featurizer, pairs: &[PreferencePair]) -> Result<Vec<PairExample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairExample {
                features: f.features(&p.context)?,
                pos: f.vocab().require(&p.pos)?,
                neg: f.vocab().require(&p.neg)?,
            })
        })
        .collect()
}

/// Full-batch Adam on the supervised loss; returns the loss per epoch.
pub fn train_policy_sft(policy: &mut NoveltyPolicy, examples: &[SftExample], lr: f64, epochs: usize) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grads) = sft_loss(policy, examples)?;
        opt.step(policy, &grads);
        trace.push(loss);
    }
    Ok(trace)
}

/// Full-batch Adam on the pairwise loss; returns the loss per epoch.
pub fn train_reward(reward: &mut RewardModel, pairs: &[PairExample], lr: f64, epochs: usize) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grads) = rm_loss(reward, pairs)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("reward training".into()));
        }
        opt.step(reward, &grads);
        trace.push(loss);
    }
    Ok(trace)
}

/// `context_digest<TAB>c_pos<TAB>c_neg` lines.
pub fn pairs_tsv(pairs: &[PreferencePair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&format!("{}\t{}\t{}\n", p.context.digest(), p.pos, p.neg));
    }
    s
}

/// Policy, reward model and featurizer persisted together.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub featurizer: Featurizer,
    pub policy: NoveltyPolicy,
    pub reward: RewardModel,
}

impl ModelPair {
    pub fn save(&self, policy_path: &Path, reward_path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("featurizer".into(), serde_json::to_value(&self.featurizer)?);
        Checkpoint::from_params("novelty_policy", meta.clone(), &self.policy).save(policy_path)?;
        meta.insert("embedding_dim".into(), self.reward.interaction.nrows().into());
        Checkpoint::from_params("reward_model", meta, &self.reward).save(reward_path)
    }

    pub fn load(policy_path: &Path, reward_path: &Path) -> Result<Self> {
        let pck = Checkpoint::load(policy_path)?;
        pck.expect_kind("novelty_policy")?;
        let featurizer: Featurizer = serde_json::from_value(
            pck.meta
                .get("featurizer")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("featurizer missing".into()))?,
        )?;
        let featurizer = featurizer.restore();
        let (f, c) = (featurizer.dim(), featurizer.vocab().len());
        let mut policy = NoveltyPolicy::uniform(f, c);
        pck.load_into(&mut policy)?;
        let rck = Checkpoint::load(reward_path)?;
        rck.expect_kind("reward_model")?;
        let mut reward = RewardModel::new(f, c, rck.meta_usize("embedding_dim")?, 0.0, 0);
        rck.load_into(&mut reward)?;
        Ok(Self {
            featurizer,
            policy,
            reward,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    /// Size of the popularity-based exposure set for negatives.
    pub exposure_top_p: usize,
    pub sft_lr: f64,
    pub sft_epochs: usize,
    pub rm_lr: f64,
    pub rm_epochs: usize,
    pub reward_embedding: usize,
    pub init_scale: f64,
    /// Caps on training records, subsampled with the run seed.
    pub max_pairs: usize,
    pub max_sft_records: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            exposure_top_p: 10,
            sft_lr: 0.05,
            sft_epochs: 150,
            rm_lr: 0.03,
            rm_epochs: 150,
            reward_embedding: 8,
            init_scale: 0.1,
            max_pairs: 20_000,
            max_sft_records: 20_000,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_top_p == 0 || self.reward_embedding == 0 {
            return Err(Error::Config("bootstrap.exposure_top_p and reward_embedding must be positive".into()));
        }
        if !(self.sft_lr > 0.0 && self.rm_lr > 0.0 && self.init_scale >= 0.0) {
            return Err(Error::Config("bootstrap learning rates must be positive".into()));
        }
        if self.max_pairs == 0 || self.max_sft_records == 0 {
            return Err(Error::Config("bootstrap record caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub sft_records: usize,
    pub sft_trace: Vec<f64>,
    pub rm_trace: Vec<f64>,
}

fn subsample<T: Clone>(records: Vec<T>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if records.len() <= cap {
        return records;
    }
    let mut idx = rand::seq::index::sample(rng, records.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

/// Builds supervised and preference data from category histories and trains
/// a fresh policy and reward model. An empty data source leaves the
/// corresponding model at its initialization, with a warning.
pub fn bootstrap_models(
    featurizer: Featurizer,
    histories: &BTreeMap<UserId, CategoryHistory>,
    long_term: &BTreeMap<UserId, BTreeSet<String>>,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<(ModelPair, Vec<PreferencePair>, BootstrapReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clicks: BTreeMap<String, usize> = BTreeMap::new();
    for h in histories.values() {
        for c in &h.categories {
            *clicks.entry(c.clone()).or_default() += 1;
        }
    }
    let exposure = popular_categories(&clicks, cfg.exposure_top_p);
    let built = build_preference_pairs(histories, &exposure, seed);
    let pairs = subsample(built.pairs, cfg.max_pairs, &mut rng);
    let records = subsample(build_sft_records(histories, long_term), cfg.max_sft_records, &mut rng);

    let (f, c) = (featurizer.dim(), featurizer.vocab().len());
    let mut policy = NoveltyPolicy::uniform(f, c);
    let mut reward = RewardModel::new(f, c, cfg.reward_embedding, cfg.init_scale, seed ^ 0x5eed);
    let mut report = BootstrapReport {
        pairs: pairs.len(),
        skipped_pairs: built.skipped,
        sft_records: records.len(),
        ..BootstrapReport::default()
    };
    if records.is_empty() {
        log::warn!("no supervised examples; the novelty policy stays uniform");
    } else {
        report.sft_trace = train_policy_sft(&mut policy, &sft_examples(&featurizer, &records)?, cfg.sft_lr, cfg.sft_epochs)?;
    }
    if pairs.is_empty() {
        log::warn!("no preference pairs; the reward model keeps its initialization");
    } else {
        report.rm_trace = train_reward(&mut reward, &pair_examples(&featurizer, &pairs)?, cfg.rm_lr, cfg.rm_epochs)?;
    }
    Ok((
        ModelPair {
            featurizer,
            policy,
            reward,
        },
        pairs,
        report,
    ))
}
