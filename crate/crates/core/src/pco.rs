//! Periodic co-optimization of the novelty policy against the relevance
//! scorer: preference pairs from scored candidates plus a small replay
//! sample, KL-constrained DPO updates against the previous cycle's policy,
//! rescoring, and store refresh.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    generate_candidates, generate_profile, render_prompt, score_candidate, LlmBackend, PromptRole, SimulatedBackend,
    Templates,
};
use crate::ingest::{build_sequences, categories_of, map_short_to_categories, UserId};
use crate::nn;
use crate::params::Params;
use crate::quantizer::GroupCsid;
use crate::store::{make_key, CategoryStore};
use crate::synth::{ClickModel, SyntheticWorld, WorldConfig};
use crate::training::{
    bootstrap_models, normalize_score, pair_examples, rm_loss, select_aligned, AlignedCategories, BootstrapConfig,
    CategoryHistory, Featurizer, NoveltyPolicy, PairContext, PairExample, PreferencePair,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcoConfig {
    /// KL coefficient.
    pub alpha: f64,
    /// DPO temperature.
    pub beta: f64,
    pub lr: f64,
    /// Optimizer steps per cycle.
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of the accumulated pairs replayed each cycle.
    pub subset_fraction: f64,
    /// Candidates requested per prompt.
    pub m_cand: usize,
    pub tau_align: f64,
    /// Cycles run by `pco-run`.
    pub cycles: usize,
    pub retrain_reward: bool,
    pub reward_lr: f64,
    pub reward_epochs: usize,
    pub ablation: AblationConfig,
}

impl Default for PcoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.1,
            lr: 40.0,
            steps: 5,
            batch_size: 64,
            subset_fraction: 0.01,
            m_cand: 10,
            tau_align: 0.5,
            cycles: 1,
            retrain_reward: true,
            reward_lr: 0.05,
            reward_epochs: 1,
            ablation: AblationConfig::default(),
        }
    }
}

impl PcoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pco.{m}")));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.lr > 0.0 && self.reward_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.m_cand == 0 {
            return bad("batch_size and m_cand must be positive");
        }
        if !(0.0..=1.0).contains(&self.subset_fraction) || !(0.0..1.0).contains(&self.tau_align) {
            return bad("subset_fraction must lie in [0, 1] and tau_align in [0, 1)");
        }
        self.ablation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub rounds: usize,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Short window used to build the world's prompts.
    pub k_short: usize,
    pub world: WorldConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            alphas: vec![0.0, 0.4],
            seeds: vec![1, 2, 3, 4, 5],
            k_short: 5,
            world: WorldConfig::default(),
            bootstrap: BootstrapConfig {
                exposure_top_p: 40,
                ..BootstrapConfig::default()
            },
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("pco.ablation.alphas must be non-negative".into()));
        }
        if self.k_short == 0 {
            return Err(Error::Config("pco.ablation.k_short must be positive".into()));
        }
        self.bootstrap.validate()?;
        self.world.validate()
    }
}

/// Everything carried from one cycle to the next.
#[derive(Debug, Clone)]
pub struct CycleState {
    pub cycle: u64,
    /// Accumulated preference records.
    pub dataset: Vec<PreferencePair>,
    pub policy: NoveltyPolicy,
    /// Frozen copy of the previous cycle's final policy.
    pub reference: NoveltyPolicy,
    pub alpha: f64,
    pub beta: f64,
}

impl CycleState {
    pub fn new(policy: NoveltyPolicy, dataset: Vec<PreferencePair>, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and beta > 0".into()));
        }
        Ok(Self {
            cycle: 0,
            dataset,
            reference: policy.clone(),
            policy,
            alpha,
            beta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub mean_relevance: f64,
    pub novelty_rate: f64,
    pub dpo_loss: f64,
    pub kl_loss: f64,
    pub fresh_pairs: usize,
    pub replay_pairs: usize,
    pub aligned_total: usize,
}

impl CycleReport {
    pub const CSV_HEADER: &'static str = "cycle,mean_relevance,novelty_rate,dpo_loss,kl_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.cycle, self.mean_relevance, self.novelty_rate, self.dpo_loss, self.kl_loss
        )
    }
}

pub fn reports_csv(reports: &[CycleReport]) -> String {
    let mut s = format!("{}\n", CycleReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A user as seen by the cycle: resolved group, short-window categories,
/// and every category the user has clicked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleUser {
    pub user_id: UserId,
    pub group: GroupCsid,
    pub short_categories: Vec<String>,
    pub history: BTreeSet<String>,
}

/// Where the reward model's per-cycle training signal comes from.
pub enum RewardFeedback<'a> {
    /// No reward update.
    Frozen,
    /// Simulated clicks on shown candidates.
    Clicks(&'a dyn ClickModel),
    /// Resampled logged preference pairs.
    Pairs(&'a [PreferencePair]),
}

/// ⌊fraction·|records|⌋ records drawn uniformly without replacement, in
/// their original order.
pub fn sample_subset<T: Clone>(records: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let n = ((records.len() as f64) * fraction + 1e-9).floor() as usize;
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, records.len(), n.min(records.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

fn check_pair(p: &PairExample, n: usize) -> Result<()> {
    if p.pos >= n || p.neg >= n {
        return Err(Error::UnknownCategory(format!("index {} or {}", p.pos, p.neg)));
    }
    Ok(())
}

/// Mean −ln σ(β[(log π(pos) − log π_ref(pos)) − (log π(neg) − log π_ref(neg))])
/// and its gradient with respect to the policy.
pub fn dpo_loss(
    policy: &NoveltyPolicy,
    reference: &NoveltyPolicy,
    batch: &[PairExample],
    beta: f64,
) -> Result<(f64, NoveltyPolicy)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("no preference pairs".into()));
    }
    let n = batch.len() as f64;
    let mut grads = policy.zeros_like();
    let mut loss = 0.0;
    for p in batch {
        check_pair(p, policy.n_categories())?;
        let lp = policy.log_probs(&p.features);
        let lr = reference.log_probs(&p.features);
        let m = beta * ((lp[p.pos] - lr[p.pos]) - (lp[p.neg] - lr[p.neg]));
        if !m.is_finite() {
            return Err(Error::NonFinite("preference margin".into()));
        }
        loss += nn::softplus(-m);
        let mut g = Array1::zeros(policy.n_categories());
        let d = -nn::sigmoid(-m) * beta;
        g[p.pos] += d;
        g[p.neg] -= d;
        NoveltyPolicy::accumulate_logit_grad(&mut grads, &p.features, &g, 1.0 / n);
    }
    Ok((loss / n, grads))
}

/// Mean categorical KL(π(·|x) ‖ π_ref(·|x)) over contexts and its gradient.
pub fn kl_penalty(policy: &NoveltyPolicy, reference: &NoveltyPolicy, contexts: &[Array1<f64>]) -> (f64, NoveltyPolicy) {
    let mut grads = policy.zeros_like();
    if contexts.is_empty() {
        return (0.0, grads);
    }
    let n = contexts.len() as f64;
    let mut total = 0.0;
    for x in contexts {
        let lp = policy.log_probs(x);
        let lq = reference.log_probs(x);
        let p = lp.mapv(f64::exp);
        let diff = &lp - &lq;
        let kl = p.dot(&diff);
        total += kl;
        let g = &p * &diff.mapv(|d| d - kl);
        NoveltyPolicy::accumulate_logit_grad(&mut grads, x, &g, 1.0 / n);
    }
    (total / n, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcoLoss {
    pub dpo: f64,
    pub kl: f64,
}

impl PcoLoss {
    pub fn total(&self, alpha: f64) -> f64 {
        self.dpo + alpha * self.kl
    }
}

/// DPO plus α·KL over the batch contexts.
pub fn total_loss(
    policy: &NoveltyPolicy,
    reference: &NoveltyPolicy,
    batch: &[PairExample],
    alpha: f64,
    beta: f64,
) -> Result<(PcoLoss, NoveltyPolicy)> {
    let (dpo, mut grads) = dpo_loss(policy, reference, batch, beta)?;
    let contexts: Vec<Array1<f64>> = batch.iter().map(|p| p.features.clone()).collect();
    let (kl, kl_grads) = kl_penalty(policy, reference, &contexts);
    grads.add_scaled(&kl_grads, alpha);
    Ok((PcoLoss { dpo, kl }, grads))
}

/// One user's scored candidates and the aligned subset.
#[derive(Debug, Clone, PartialEq)]
pub struct UserOutcome {
    pub user_id: UserId,
    pub context: PairContext,
    /// Raw scores, in candidate order.
    pub scored: Vec<(String, f64)>,
    pub aligned: AlignedCategories,
}

/// Generates candidates for every user, scores each one, and applies the
/// alignment threshold.
pub fn generate_and_score(
    backend: &dyn LlmBackend,
    templates: &Templates,
    profiles: &BTreeMap<GroupCsid, String>,
    users: &[CycleUser],
    m_cand: usize,
    tau_align: f64,
) -> Result<Vec<UserOutcome>> {
    users
        .par_iter()
        .map(|u| {
            let profile = profiles.get(&u.group).map(String::as_str).unwrap_or("");
            let prompt = render_prompt(
                templates,
                PromptRole::NoveltyInfer,
                Some(&u.group),
                profile,
                &u.short_categories,
                None,
            )?;
            let candidates = generate_candidates(backend, &prompt, m_cand)?;
            let mut scored = Vec::with_capacity(candidates.categories.len());
            let mut normalized = Vec::with_capacity(candidates.categories.len());
            for c in candidates.categories {
                let p = render_prompt(
                    templates,
                    PromptRole::RelevanceInfer,
                    Some(&u.group),
                    profile,
                    &u.short_categories,
                    Some(&c),
                )?;
                let raw = score_candidate(backend, &p)?;
                normalized.push((c.clone(), normalize_score(raw)));
                scored.push((c, raw));
            }
            Ok(UserOutcome {
                user_id: u.user_id.clone(),
                context: prompt.context.pair_context(),
                scored,
                aligned: select_aligned(&normalized, tau_align),
            })
        })
        .collect()
}

/// Mean aligned score and the share of aligned categories outside each
/// user's click history.
pub fn summarize(outcomes: &[UserOutcome], users: &[CycleUser]) -> (f64, f64, usize) {
    let history: BTreeMap<&UserId, &BTreeSet<String>> = users.iter().map(|u| (&u.user_id, &u.history)).collect();
    let (mut total, mut novel, mut score) = (0usize, 0usize, 0.0);
    for o in outcomes {
        let seen = history.get(&o.user_id);
        for (c, s) in &o.aligned.categories {
            total += 1;
            score += s;
            if !seen.is_some_and(|h| h.contains(c)) {
                novel += 1;
            }
        }
    }
    if total == 0 {
        return (0.0, 0.0, 0);
    }
    (score / total as f64, novel as f64 / total as f64, total)
}

/// Highest- versus lowest-scored candidate for each prompt.
pub fn fresh_pairs(outcomes: &[UserOutcome]) -> Vec<PreferencePair> {
    outcomes
        .iter()
        .filter_map(|o| {
            let best = o.scored.iter().reduce(|a, b| if b.1 > a.1 { b } else { a })?;
            let worst = o.scored.iter().reduce(|a, b| if b.1 < a.1 { b } else { a })?;
            (best.1 > worst.1).then(|| PreferencePair {
                user_id: o.user_id.clone(),
                context: o.context.clone(),
                pos: best.0.clone(),
                neg: worst.0.clone(),
            })
        })
        .collect()
}

/// Re-orders each pair by the current reward model.
fn relabel(pairs: &mut [PreferencePair], featurizer: &Featurizer, sim: &SimulatedBackend) -> Result<()> {
    let state = sim.lock();
    for p in pairs.iter_mut() {
        let x = featurizer.features(&p.context)?;
        let vocab = featurizer.vocab();
        let (pos, neg) = (vocab.require(&p.pos)?, vocab.require(&p.neg)?);
        if state.reward.score(&x, neg) > state.reward.score(&x, pos) {
            std::mem::swap(&mut p.pos, &mut p.neg);
        }
    }
    Ok(())
}

fn click_pairs(outcomes: &[UserOutcome], clicks: &dyn ClickModel, rng: &mut ChaCha8Rng) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for o in outcomes {
        let (mut hit, mut miss) = (Vec::new(), Vec::new());
        for (c, _) in &o.scored {
            let p = clicks.click_probability(&o.user_id, c).unwrap_or(0.0);
            if rng.random::<f64>() < p {
                hit.push(c);
            } else {
                miss.push(c);
            }
        }
        if miss.is_empty() {
            continue;
        }
        for pos in hit {
            let neg = miss[rng.random_range(0..miss.len())];
            out.push(PreferencePair {
                user_id: o.user_id.clone(),
                context: o.context.clone(),
                pos: pos.clone(),
                neg: neg.clone(),
            });
        }
    }
    out
}

/// Inputs shared by every cycle of a run.
pub struct CycleEnv<'a> {
    pub backend: &'a dyn LlmBackend,
    pub templates: &'a Templates,
    pub profiles: &'a BTreeMap<GroupCsid, String>,
    pub users: &'a [CycleUser],
    pub feedback: RewardFeedback<'a>,
}

/// Runs one cycle and returns the next state and the report. Aligned sets
/// after the update are written to `store` when given.
pub fn run_cycle(
    state: CycleState,
    env: &CycleEnv<'_>,
    store: Option<&mut CategoryStore>,
    cfg: &PcoConfig,
    seed: u64,
) -> Result<(CycleState, CycleReport)> {
    let CycleState {
        cycle,
        mut dataset,
        mut policy,
        reference,
        alpha,
        beta,
    } = state;
    if reference.digest() != policy.digest() {
        return Err(Error::Config("cycle must start with the reference equal to the current policy".into()));
    }
    let cycle_seed = seed ^ (cycle + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let sim = env.backend.simulated();
    if let Some(sim) = sim {
        sim.lock().policy = policy.clone();
        sim.set_epoch(cycle + 1);
    } else {
        log::warn!("backend has no in-process policy; cycle {cycle} only rescores");
    }

    let before = generate_and_score(env.backend, env.templates, env.profiles, env.users, cfg.m_cand, cfg.tau_align)?;
    if before.iter().all(|o| o.scored.is_empty()) {
        return Err(Error::EmptyDataset(format!("cycle {cycle}: no candidates were generated")));
    }
    let fresh = fresh_pairs(&before);
    let mut replay = sample_subset(&dataset, cfg.subset_fraction, cycle_seed);
    if replay.is_empty() {
        log::info!("cycle {cycle}: replay subset is empty ({} records)", dataset.len());
    }

    let (mut dpo_sum, mut kl_sum, mut n_steps) = (0.0, 0.0, 0usize);
    if let Some(sim) = sim {
        let featurizer = sim.featurizer();
        relabel(&mut replay, featurizer, sim)?;
        let mut pool = pair_examples(featurizer, &fresh)?;
        pool.extend(pair_examples(featurizer, &replay)?);
        let frozen = reference.digest();
        let mut rng = ChaCha8Rng::seed_from_u64(cycle_seed ^ 0xd90);
        if !pool.is_empty() {
            for _ in 0..cfg.steps {
                let batch: Vec<PairExample> = if pool.len() <= cfg.batch_size {
                    pool.clone()
                } else {
                    rand::seq::index::sample(&mut rng, pool.len(), cfg.batch_size)
                        .into_iter()
                        .map(|i| pool[i].clone())
                        .collect()
                };
                let (loss, grads) = total_loss(&policy, &reference, &batch, alpha, beta)?;
                policy.add_scaled(&grads, -cfg.lr);
                if !policy.all_finite() {
                    return Err(Error::NonFinite(format!("policy after cycle {cycle} update")));
                }
                dpo_sum += loss.dpo;
                kl_sum += loss.kl;
                n_steps += 1;
            }
        }
        debug_assert_eq!(reference.digest(), frozen);
        if reference.digest() != frozen {
            return Err(Error::Config("reference policy changed during the cycle".into()));
        }
        sim.lock().policy = policy.clone();

        if cfg.retrain_reward {
            let mut rng = ChaCha8Rng::seed_from_u64(cycle_seed ^ 0x4e3);
            let pairs = match env.feedback {
                RewardFeedback::Frozen => Vec::new(),
                RewardFeedback::Clicks(clicks) => click_pairs(&before, clicks, &mut rng),
                RewardFeedback::Pairs(logged) => {
                    sample_subset(logged, (cfg.batch_size * cfg.steps.max(1)) as f64 / logged.len().max(1) as f64, cycle_seed)
                }
            };
            if !pairs.is_empty() {
                let examples = pair_examples(featurizer, &pairs)?;
                let mut reward = sim.lock().reward.clone();
                for _ in 0..cfg.reward_epochs {
                    let (_, g) = rm_loss(&reward, &examples)?;
                    reward.add_scaled(&g, -cfg.reward_lr);
                }
                if !reward.all_finite() {
                    return Err(Error::NonFinite(format!("reward model after cycle {cycle}")));
                }
                sim.lock().reward = reward;
            }
        }
    }

    let after = generate_and_score(env.backend, env.templates, env.profiles, env.users, cfg.m_cand, cfg.tau_align)?;
    if let Some(store) = store {
        for (u, o) in env.users.iter().zip(&after) {
            store.put(&make_key(&u.group, &u.short_categories), &o.aligned, cycle + 1)?;
        }
        store.flush()?;
    }
    let (mean_relevance, novelty_rate, aligned_total) = summarize(&after, env.users);
    let (dpo_loss, kl_loss) = if n_steps == 0 {
        (std::f64::consts::LN_2, 0.0)
    } else {
        (dpo_sum / n_steps as f64, kl_sum / n_steps as f64)
    };
    let report = CycleReport {
        cycle: cycle + 1,
        mean_relevance,
        novelty_rate,
        dpo_loss,
        kl_loss,
        fresh_pairs: fresh.len(),
        replay_pairs: replay.len(),
        aligned_total,
    };
    dataset.extend(fresh);
    let next = CycleState {
        cycle: cycle + 1,
        dataset,
        reference: policy.clone(),
        policy,
        alpha,
        beta,
    };
    Ok((next, report))
}

/// Metrics of the current policy without any update, reported as cycle 0.
pub fn baseline_report(env: &CycleEnv<'_>, cfg: &PcoConfig) -> Result<CycleReport> {
    if let Some(sim) = env.backend.simulated() {
        sim.set_epoch(0);
    }
    let outcomes = generate_and_score(env.backend, env.templates, env.profiles, env.users, cfg.m_cand, cfg.tau_align)?;
    let (mean_relevance, novelty_rate, aligned_total) = summarize(&outcomes, env.users);
    Ok(CycleReport {
        cycle: 0,
        mean_relevance,
        novelty_rate,
        dpo_loss: std::f64::consts::LN_2,
        kl_loss: 0.0,
        fresh_pairs: 0,
        replay_pairs: 0,
        aligned_total,
    })
}

/// A synthetic world with bootstrapped models, ready for cycles.
pub struct WorldSetup {
    pub world: SyntheticWorld,
    pub backend: SimulatedBackend,
    pub templates: Templates,
    pub profiles: BTreeMap<GroupCsid, String>,
    pub users: Vec<CycleUser>,
    pub pairs: Vec<PreferencePair>,
}

impl WorldSetup {
    /// Groups are the world's ground-truth groups; the short window holds
    /// the last `k_short` events.
    pub fn build(world: SyntheticWorld, k_short: usize, bootstrap: &BootstrapConfig, seed: u64) -> Result<Self> {
        let sequences = build_sequences(&world.events, k_short)?;
        let groups = world.group_csids();
        let mut histories = BTreeMap::new();
        let mut long_term = BTreeMap::new();
        let mut users = Vec::new();
        for (user, seq) in &sequences {
            let Some(group) = groups.get(user) else { continue };
            let all: Vec<String> = seq
                .long_term
                .iter()
                .chain(&seq.short_term)
                .map(|i| world.catalog.category(i).map(str::to_string).ok_or_else(|| Error::UnknownItem(i.to_string())))
                .collect::<Result<_>>()?;
            long_term.insert(user.clone(), categories_of(&seq.long_term, &world.catalog)?);
            users.push(CycleUser {
                user_id: user.clone(),
                group: group.clone(),
                short_categories: map_short_to_categories(seq, &world.catalog)?.categories,
                history: all.iter().cloned().collect(),
            });
            histories.insert(
                user.clone(),
                CategoryHistory {
                    group: Some(group.clone()),
                    categories: all,
                },
            );
        }
        let featurizer = Featurizer::new(groups.values().cloned(), world.catalog.category_vocab());
        let (models, pairs, _) = bootstrap_models(featurizer, &histories, &long_term, bootstrap, seed)?;
        let backend = SimulatedBackend::new(seed, models);
        let templates = Templates::default();
        let mut profiles = BTreeMap::new();
        let mut members: BTreeMap<&GroupCsid, Vec<Vec<String>>> = BTreeMap::new();
        for u in &users {
            let seqs = members.entry(&u.group).or_default();
            if seqs.len() < 8 && !u.short_categories.is_empty() {
                seqs.push(u.short_categories.clone());
            }
        }
        for (g, seqs) in members {
            if !seqs.is_empty() {
                profiles.insert(g.clone(), generate_profile(&backend, &templates, Some(g), &seqs)?);
            }
        }
        Ok(Self {
            world,
            backend,
            templates,
            profiles,
            users,
            pairs,
        })
    }

    /// Round 0 followed by `rounds` cycles with clicks drawn from the world.
    pub fn run(&self, cfg: &PcoConfig, rounds: usize, alpha: f64, seed: u64) -> Result<Vec<CycleReport>> {
        let env = CycleEnv {
            backend: &self.backend,
            templates: &self.templates,
            profiles: &self.profiles,
            users: &self.users,
            feedback: RewardFeedback::Clicks(&self.world),
        };
        let start = self.backend.models();
        let mut reports = vec![baseline_report(&env, cfg)?];
        let mut state = CycleState::new(start.policy.clone(), self.pairs.clone(), alpha, cfg.beta)?;
        for _ in 0..rounds {
            let (next, report) = run_cycle(state, &env, None, cfg, seed)?;
            reports.push(report);
            state = next;
        }
        let mut s = self.backend.lock();
        s.policy = start.policy;
        s.reward = start.reward;
        Ok(reports)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTrajectory {
    pub alpha: f64,
    pub seed: u64,
    pub reports: Vec<CycleReport>,
}

/// For each seed, one world and bootstrap; then every α runs `rounds`
/// cycles from the same starting models.
pub fn run_ablation(cfg: &PcoConfig) -> Result<Vec<AblationTrajectory>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let world = SyntheticWorld::generate(&WorldConfig {
            seed,
            ..cfg.ablation.world.clone()
        })?;
        let setup = WorldSetup::build(world, cfg.ablation.k_short, &cfg.ablation.bootstrap, seed)?;
        for &alpha in &cfg.ablation.alphas {
            let reports = setup.run(cfg, cfg.ablation.rounds, alpha, seed)?;
            out.push(AblationTrajectory { alpha, seed, reports });
        }
    }
    Ok(out)
}

/// `alpha,seed,cycle,mean_relevance,novelty_rate,dpo_loss,kl_loss` rows.
pub fn ablation_csv(trajectories: &[AblationTrajectory]) -> String {
    let mut s = format!("alpha,seed,{}\n", CycleReport::CSV_HEADER);
    for t in trajectories {
        for r in &t.reports {
            s.push_str(&format!("{},{},{}\n", t.alpha, t.seed, r.csv_row()));
        }
    }
    s
}

/// Per-α mean over seeds of (relevance, novelty) at each round.
pub fn mean_trajectories(trajectories: &[AblationTrajectory]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, (Vec<(f64, f64)>, usize)> = BTreeMap::new();
    for t in trajectories {
        let entry = acc
            .entry(format!("{}", t.alpha))
            .or_insert_with(|| (vec![(0.0, 0.0); t.reports.len()], 0));
        for (slot, r) in entry.0.iter_mut().zip(&t.reports) {
            slot.0 += r.mean_relevance;
            slot.1 += r.novelty_rate;
        }
        entry.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (v, n))| (k, v.into_iter().map(|(a, b)| (a / n as f64, b / n as f64)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(features: Vec<f64>, pos: usize, neg: usize) -> PairExample {
        PairExample {
            features: Array1::from(features),
            pos,
            neg,
        }
    }

    #[test]
    fn subset_size_is_floored() {
        let d: Vec<u32> = (0..250).collect();
        assert_eq!(sample_subset(&d, 0.01, 3).len(), 2);
        assert!(sample_subset(&d[..50], 0.01, 3).is_empty());
        assert_eq!(sample_subset(&d, 0.01, 3), sample_subset(&d, 0.01, 3));
        assert_eq!(sample_subset(&d[..100], 0.01, 3).len(), 1);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let p = NoveltyPolicy::random(4, 5, 0.7, 3);
        let batch = [ex(vec![1.0, 0.0, 1.0, 0.0], 0, 3), ex(vec![0.0, 1.0, 0.0, 1.0], 4, 2)];
        let (loss, _) = dpo_loss(&p, &p, &batch, 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_margin_of_ten_at_temperature_point_one() {
        // With a single bias shift the log-ratio margin is exactly the shift.
        let reference = NoveltyPolicy::uniform(1, 2);
        let mut policy = reference.clone();
        policy.bias[0] = 5.0;
        policy.bias[1] = -5.0;
        let (loss, _) = dpo_loss(&policy, &reference, &[ex(vec![0.0], 0, 1)], 0.1).unwrap();
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn kl_two_category_value() {
        let policy = NoveltyPolicy::uniform(1, 2);
        let mut reference = policy.clone();
        reference.bias[1] = 3f64.ln();
        let (kl, _) = kl_penalty(&policy, &reference, &[Array1::from(vec![0.0])]);
        assert!((kl - 0.143841).abs() < 1e-6);
        let (zero, _) = kl_penalty(&policy, &policy, &[Array1::from(vec![1.0])]);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn total_at_reference_is_ln2() {
        let p = NoveltyPolicy::random(3, 4, 0.5, 9);
        let (loss, _) = total_loss(&p, &p, &[ex(vec![1.0, 1.0, 0.0], 1, 2)], 0.4, 0.1).unwrap();
        assert!((loss.total(0.4) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_pair_is_rejected() {
        let p = NoveltyPolicy::uniform(1, 2);
        assert!(dpo_loss(&p, &p, &[ex(vec![1.0], 0, 2)], 0.1).is_err());
        assert!(dpo_loss(&p, &p, &[], 0.1).is_err());
    }

    #[test]
    fn fresh_pairs_use_extremes() {
        let o = UserOutcome {
            user_id: UserId::from("u"),
            context: PairContext {
                group: None,
                window: vec![],
            },
            scored: vec![("a".into(), 0.2), ("b".into(), 1.5), ("c".into(), -0.3)],
            aligned: AlignedCategories::default(),
        };
        let flat = UserOutcome {
            scored: vec![("a".into(), 0.0), ("b".into(), 0.0)],
            ..o.clone()
        };
        let pairs = fresh_pairs(&[o, flat]);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].pos.as_str(), pairs[0].neg.as_str()), ("b", "c"));
    }

    #[test]
    fn summary_counts_novel_aligned() {
        let users = vec![CycleUser {
            user_id: UserId::from("u"),
            group: GroupCsid(vec![0]),
            short_categories: vec![],
            history: ["a".to_string()].into_iter().collect(),
        }];
        let o = UserOutcome {
            user_id: UserId::from("u"),
            context: PairContext {
                group: None,
                window: vec![],
            },
            scored: vec![],
            aligned: AlignedCategories {
                categories: vec![("a".into(), 0.9), ("b".into(), 0.7), ("c".into(), 0.6), ("d".into(), 0.6)],
            },
        };
        let (rel, nov, n) = summarize(&[o], &users);
        assert!((rel - 0.7).abs() < 1e-12);
        assert_eq!(nov, 0.75);
        assert_eq!(n, 4);
    }

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            users: 60,
            items: 200,
            ..WorldConfig::default()
        }
    }

    fn fast_bootstrap() -> BootstrapConfig {
        BootstrapConfig {
            sft_epochs: 40,
            rm_epochs: 40,
            ..BootstrapConfig::default()
        }
    }

    #[test]
    fn cycles_are_deterministic_and_keep_the_reference_frozen() {
        let world = SyntheticWorld::generate(&tiny_world()).unwrap();
        let setup = WorldSetup::build(world, 5, &fast_bootstrap(), 11).unwrap();
        let cfg = PcoConfig::default();
        let a = setup.run(&cfg, 3, 0.4, 11).unwrap();
        let b = setup.run(&cfg, 3, 0.4, 11).unwrap();
        assert_eq!(reports_csv(&a), reports_csv(&b));
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|r| r.mean_relevance.is_finite() && r.novelty_rate.is_finite()));
    }

    #[test]
    fn zero_steps_leave_the_policy_unchanged() {
        let world = SyntheticWorld::generate(&tiny_world()).unwrap();
        let setup = WorldSetup::build(world, 5, &fast_bootstrap(), 2).unwrap();
        let cfg = PcoConfig {
            steps: 0,
            ..PcoConfig::default()
        };
        let env = CycleEnv {
            backend: &setup.backend,
            templates: &setup.templates,
            profiles: &setup.profiles,
            users: &setup.users,
            feedback: RewardFeedback::Frozen,
        };
        let policy = setup.backend.models().policy;
        let state = CycleState::new(policy.clone(), setup.pairs.clone(), 0.4, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut store = CategoryStore::open(dir.path()).unwrap();
        let (next, report) = run_cycle(state, &env, Some(&mut store), &cfg, 2).unwrap();
        assert_eq!(next.policy, policy);
        assert_eq!(next.reference, policy);
        assert_eq!(report.dpo_loss, std::f64::consts::LN_2);
        assert_eq!(report.kl_loss, 0.0);
        assert!(!store.is_empty());
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let world = SyntheticWorld::generate(&tiny_world()).unwrap();
        let setup = WorldSetup::build(world, 5, &fast_bootstrap(), 2).unwrap();
        let env = CycleEnv {
            backend: &setup.backend,
            templates: &setup.templates,
            profiles: &setup.profiles,
            users: &setup.users,
            feedback: RewardFeedback::Frozen,
        };
        let mut state = CycleState::new(setup.backend.models().policy, vec![], 0.4, 0.1).unwrap();
        state.reference.bias[0] += 1.0;
        assert!(run_cycle(state, &env, None, &PcoConfig::default(), 1).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(seed_a in 0u64..1000, seed_b in 0u64..1000, scale in 0.01f64..3.0) {
            let p = NoveltyPolicy::random(3, 6, scale, seed_a);
            let q = NoveltyPolicy::random(3, 6, scale, seed_b);
            let xs = [Array1::from(vec![1.0, 0.0, 1.0]), Array1::from(vec![0.0, 1.0, 0.0])];
            let (kl, _) = kl_penalty(&p, &q, &xs);
            prop_assert!(kl >= -1e-12);
        }
    }
}
