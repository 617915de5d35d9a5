//! Stage functions over a run directory. Each stage reads the artifacts of
//! the stages before it, writes its own, and records their digests in
//! `manifest.json`. Wall-clock timings go to `timings.json` so manifests of
//! identical runs compare equal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::encoder::{encode_long_term, train_encoder, ItemVocab, LongTermEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    assemble_list, category_similarity_csv, category_user_similarity, evaluate, group_similarity_analysis,
    long_tail_set, MetricReport, RecommendationList, UserGroundTruth,
};
use crate::gateway::{BackendKind, HttpBackend, LlmBackend, SimulatedBackend, Templates};
use crate::grouping::{
    build_groups, csid_table_tsv, default_group, generate_group_profiles, group_table_tsv, membership_change,
    select_representatives, GroupProfile, SemanticGroup,
};
use crate::ingest::{
    build_sequences, categories_of, click_counts, events_by_user, filter_long_sequence, map_short_to_categories,
    parse_catalog_tsv, parse_interactions, parse_movielens_users, parse_movies, parse_users_tsv, temporal_split,
    Catalog, CategoryVocab, FilteredLongSequence, InteractionEvent, InteractionFormat, ItemId, ParseMode,
    UserAttributes, UserId,
};
use crate::pco::{
    ablation_csv, baseline_report, mean_trajectories, reports_csv, run_ablation, run_cycle, CycleEnv, CycleReport,
    CycleState, CycleUser, RewardFeedback,
};
use crate::quantizer::{assign_csid, train_rqvae, GroupCsid, RqVaeModel, RqVaeParams};
use crate::store::{make_key, CategoryStore, StoreRecord};
use crate::synth::SyntheticWorld;
use crate::training::{
    bootstrap_models, pairs_tsv, popular_categories, CategoryHistory, Featurizer, ModelPair, NoveltyPolicy,
    PreferencePair, RewardModel,
};

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const CONFIG_COPY: &str = "config.toml";

pub const PREPARED: &str = "ingest/prepared.json";
pub const INGEST_SUMMARY: &str = "ingest/summary.json";
pub const ENCODER: &str = "encoder/encoder.json";
pub const REPRESENTATIONS: &str = "encoder/representations.json";
pub const ENCODER_LOSS: &str = "encoder/loss.csv";
pub const RQVAE: &str = "rqvae/rqvae.json";
pub const RQVAE_LOSS: &str = "rqvae/loss.csv";
pub const ASSIGNMENTS: &str = "rqvae/assignments.json";
pub const CSID_TABLE: &str = "rqvae/csid.tsv";
pub const GROUPS: &str = "groups/groups.json";
pub const PROFILES: &str = "profiles/profiles.json";
pub const GROUP_TABLE: &str = "profiles/groups.tsv";
pub const POLICY: &str = "models/policy.json";
pub const REWARD: &str = "models/reward.json";
pub const PAIRS: &str = "models/pairs.json";
pub const PAIRS_TSV: &str = "models/pairs.tsv";
pub const BOOTSTRAP_REPORT: &str = "models/bootstrap.json";
pub const CYCLES: &str = "pco/cycles.csv";
pub const PCO_POLICY: &str = "pco/policy.json";
pub const PCO_REWARD: &str = "pco/reward.json";
pub const ABLATION: &str = "ablation/ablation.csv";
pub const ABLATION_MEAN: &str = "ablation/mean.csv";
pub const METRICS: &str = "eval/metrics.csv";
pub const PER_USER: &str = "eval/per_user.tsv";
pub const GROUP_SIMILARITY: &str = "eval/group_similarity.csv";
pub const CATEGORY_SIMILARITY: &str = "eval/category_similarity.csv";
pub const EVAL_SUMMARY: &str = "eval/summary.json";

/// Everything later stages need from the interaction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedUser {
    pub user_id: UserId,
    pub attributes: UserAttributes,
    /// Long window after the click-count filter.
    pub long_items: Vec<ItemId>,
    /// Categories of the unfiltered long window.
    pub long_categories: BTreeSet<String>,
    pub short_categories: Vec<String>,
    /// Chronological categories of the training window.
    pub train_categories: Vec<String>,
    /// Categories clicked in the test window.
    pub test_categories: BTreeSet<String>,
    /// Categories clicked anywhere in the log.
    pub all_categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub categories: Vec<String>,
    pub catalog: Catalog,
    /// Training-window clicks per category.
    pub click_volume: BTreeMap<String, usize>,
    pub users: Vec<PreparedUser>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub events: usize,
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub rejected_lines: usize,
    pub flagged_users: usize,
    pub empty_long_sequences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub input_digests: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSet {
    pub groups: Vec<SemanticGroup>,
    pub default_csid: GroupCsid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    /// Assignments the profiles were generated from.
    pub assignments: BTreeMap<UserId, GroupCsid>,
    pub profiles: Vec<GroupProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub user_id: UserId,
    /// `None` for users without a group.
    pub csid: Option<GroupCsid>,
    pub categories: Vec<String>,
    pub key: String,
    pub used_default: bool,
    pub record: Option<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub k: usize,
    pub users: usize,
    pub ndcg_excluded: usize,
    pub store_hits: usize,
    pub default_hits: usize,
    pub intra_similarity: f64,
    pub inter_similarity: f64,
    pub skipped_groups: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// A run directory with its configuration.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, config })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { artifact: p, producer })
        }
    }

    /// The artifact path, with its parent directory created.
    fn output(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.output(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, serde_json::to_vec_pretty(value)?)
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &'static str) -> Result<T> {
        let p = self.require(rel, producer)?;
        Ok(serde_json::from_reader(open_reader(&p)?)?)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.path(MANIFEST);
        if p.exists() {
            Ok(serde_json::from_reader(open_reader(&p)?)?)
        } else {
            Ok(RunManifest::default())
        }
    }

    fn record(&self, stage: &str, outputs: &[&str], started: Instant, inputs: Option<BTreeMap<String, String>>) -> Result<()> {
        let mut m = self.manifest()?;
        m.config_digest = self.config.digest()?;
        m.seed = self.config.seed;
        if let Some(i) = inputs {
            m.input_digests = i;
        }
        let mut rec = StageRecord::default();
        for rel in outputs {
            rec.outputs.insert(rel.to_string(), sha256_file(&self.path(rel))?);
        }
        m.stages.insert(stage.to_string(), rec);
        self.write_json(MANIFEST, &m)?;
        self.write(CONFIG_COPY, self.config.to_toml()?)?;

        let tp = self.path(TIMINGS);
        let mut timings: BTreeMap<String, f64> = if tp.exists() {
            serde_json::from_reader(open_reader(&tp)?)?
        } else {
            BTreeMap::new()
        };
        let secs = started.elapsed().as_secs_f64();
        log::info!("{stage} finished in {secs:.2}s");
        timings.insert(stage.to_string(), secs);
        self.write_json(TIMINGS, &timings)
    }

    fn templates(&self) -> Result<Templates> {
        match &self.config.gateway.templates_dir {
            Some(dir) => Templates::load_dir(dir),
            None => Ok(Templates::default()),
        }
    }

    fn backend(&self, models: ModelPair) -> Result<Box<dyn LlmBackend>> {
        Ok(match self.config.gateway.backend {
            BackendKind::Simulated => Box::new(SimulatedBackend::new(self.config.seed, models)),
            BackendKind::Http => Box::new(HttpBackend::new(&self.config.gateway, models.featurizer.vocab().clone())?),
        })
    }

    fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::generate(&self.config.synthetic)
    }

    pub fn prepared(&self) -> Result<PreparedData> {
        self.read_json(PREPARED, "ingest")
    }

    fn load_raw(
        &self,
    ) -> Result<(Vec<InteractionEvent>, Catalog, BTreeMap<UserId, UserAttributes>, usize, BTreeMap<String, String>)> {
        let ic = &self.config.ingest;
        let (dir, format) = match ic.source {
            DataSource::Files => (ic.data_dir.clone(), ic.format),
            DataSource::Synthetic => {
                let dir = self.path("data");
                self.world()?.write_tsv(&dir)?;
                (dir, InteractionFormat::Tsv)
            }
        };
        let names = match format {
            InteractionFormat::Movielens1m => ["ratings.dat", "movies.dat", "users.dat"],
            InteractionFormat::Tsv => ["interactions.tsv", "catalog.tsv", "users.tsv"],
        };
        let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
        for p in &paths[..2] {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
            }
        }
        let mut digests = BTreeMap::new();
        for (n, p) in names.iter().zip(&paths) {
            if p.exists() {
                digests.insert(n.to_string(), sha256_file(p)?);
            }
        }
        let mode = if ic.strict { ParseMode::Strict } else { ParseMode::Skip };
        let parsed = parse_interactions(open_reader(&paths[0])?, format, mode)?;
        for (line, reason) in parsed.rejected.iter().take(5) {
            log::warn!("{}: skipped line {line}: {reason}", paths[0].display());
        }
        let catalog = match format {
            InteractionFormat::Movielens1m => {
                parse_movies(&fs::read(&paths[1]).map_err(|e| Error::io(&paths[1], e))?)?
            }
            InteractionFormat::Tsv => parse_catalog_tsv(open_reader(&paths[1])?)?,
        };
        let attrs = if paths[2].exists() {
            match format {
                InteractionFormat::Movielens1m => parse_movielens_users(open_reader(&paths[2])?)?,
                InteractionFormat::Tsv => parse_users_tsv(open_reader(&paths[2])?)?,
            }
        } else {
            log::warn!("{} not found; every user gets the unknown attribute bucket", paths[2].display());
            BTreeMap::new()
        };
        Ok((parsed.events, catalog, attrs, parsed.rejected.len(), digests))
    }

    pub fn ingest(&self) -> Result<IngestSummary> {
        let started = Instant::now();
        let ic = &self.config.ingest;
        let (events, catalog, attrs, rejected, digests) = self.load_raw()?;
        if events.is_empty() {
            return Err(Error::EmptyDataset("the interaction log has no events".into()));
        }
        let split = temporal_split(&events, &ic.split_policy)?;
        let sequences = build_sequences(&split.train, ic.k_short)?;
        let category_of = |item: &ItemId| -> Result<String> {
            catalog
                .category(item)
                .map(str::to_string)
                .ok_or_else(|| Error::UnknownItem(item.to_string()))
        };
        let mut click_volume: BTreeMap<String, usize> = BTreeMap::new();
        for e in &split.train {
            *click_volume.entry(category_of(&e.item_id)?).or_default() += 1;
        }
        let mut test: BTreeMap<UserId, BTreeSet<String>> = BTreeMap::new();
        for e in &split.test {
            test.entry(e.user_id.clone()).or_default().insert(category_of(&e.item_id)?);
        }
        let mut users = Vec::with_capacity(sequences.len());
        let mut all_by_user: BTreeMap<UserId, BTreeSet<String>> = BTreeMap::new();
        for (user, evs) in events_by_user(&events) {
            let cats = evs.iter().map(|e| category_of(&e.item_id)).collect::<Result<_>>()?;
            all_by_user.insert(user, cats);
        }
        let mut empty_long = 0;
        for (user, seq) in &sequences {
            let filtered = filter_long_sequence(seq, &click_counts(seq), ic.tau)?;
            empty_long += filtered.is_empty() as usize;
            let train_categories = seq
                .long_term
                .iter()
                .chain(&seq.short_term)
                .map(category_of)
                .collect::<Result<Vec<_>>>()?;
            users.push(PreparedUser {
                user_id: user.clone(),
                attributes: attrs.get(user).cloned().unwrap_or_else(|| UserAttributes::unknown(user.clone())),
                long_items: filtered.items,
                long_categories: categories_of(&seq.long_term, &catalog)?,
                short_categories: map_short_to_categories(seq, &catalog)?.categories,
                train_categories,
                test_categories: test.remove(user).unwrap_or_default(),
                all_categories: all_by_user.remove(user).unwrap_or_default(),
            });
        }
        if empty_long > 0 {
            log::warn!(
                "{empty_long} of {} users have no long-window item clicked at least {} times",
                users.len(),
                ic.tau
            );
        }
        let summary = IngestSummary {
            events: events.len(),
            users: users.len(),
            items: catalog.len(),
            categories: catalog.category_vocab().len(),
            train: split.train.len(),
            valid: split.valid.len(),
            test: split.test.len(),
            rejected_lines: rejected,
            flagged_users: split.flagged_users.len(),
            empty_long_sequences: empty_long,
        };
        let prepared = PreparedData {
            categories: catalog.category_vocab().labels().to_vec(),
            catalog,
            click_volume,
            users,
        };
        self.write(PREPARED, serde_json::to_vec(&prepared)?)?;
        self.write_json(INGEST_SUMMARY, &summary)?;
        self.record("ingest", &[PREPARED, INGEST_SUMMARY], started, Some(digests))?;
        Ok(summary)
    }

    pub fn train_encoder(&self) -> Result<usize> {
        let started = Instant::now();
        let data = self.prepared()?;
        let vocab = ItemVocab::new(data.catalog.iter().map(|(i, _)| i.clone()));
        let mut encoder = LongTermEncoder::new(self.config.encoder.clone(), vocab, self.config.seed)?;
        let dataset: Vec<(FilteredLongSequence, UserAttributes)> = data
            .users
            .iter()
            .map(|u| {
                (
                    FilteredLongSequence {
                        user_id: u.user_id.clone(),
                        items: u.long_items.clone(),
                    },
                    u.attributes.clone(),
                )
            })
            .collect();
        let trace = match train_encoder(&mut encoder, &dataset, &self.config.encoder_train, self.config.seed) {
            Ok(r) => r.loss_trace,
            Err(Error::EmptyDataset(why)) => {
                log::warn!("encoder training skipped ({why}); keeping the initial parameters");
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        let reps: BTreeMap<UserId, Vec<f64>> = dataset
            .par_iter()
            .map(|(f, a)| Ok((f.user_id.clone(), encode_long_term(f, a, &encoder)?.vector)))
            .collect::<Result<_>>()?;
        encoder.save(&self.output(ENCODER)?)?;
        self.write(REPRESENTATIONS, serde_json::to_vec(&reps)?)?;
        self.write(ENCODER_LOSS, loss_csv(&trace))?;
        self.record("train-encoder", &[ENCODER, REPRESENTATIONS, ENCODER_LOSS], started, None)?;
        Ok(reps.len())
    }

    fn representations(&self) -> Result<BTreeMap<UserId, Vec<f64>>> {
        self.read_json(REPRESENTATIONS, "train-encoder")
    }

    /// Trains the quantizer and assigns every user a group ID. Returns the
    /// number of occupied IDs.
    pub fn train_rqvae(&self) -> Result<usize> {
        let started = Instant::now();
        let reps = self.representations()?;
        let dim = reps.values().next().map_or(0, Vec::len);
        let cfg = &self.config.rqvae;
        let mut params = RqVaeParams::init(cfg, dim, self.config.seed)?;
        let rows: Vec<ndarray::Array1<f64>> = reps.values().map(|v| ndarray::Array1::from(v.clone())).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let report = train_rqvae(&mut params, &views, cfg, self.config.seed)?;
        let assignments: BTreeMap<UserId, GroupCsid> = reps
            .par_iter()
            .map(|(u, v)| (u.clone(), assign_csid(ndarray::ArrayView1::from(v.as_slice()), &params)))
            .collect();
        let occupied: BTreeSet<&GroupCsid> = assignments.values().collect();
        log::info!(
            "{} users in {} groups (target {})",
            assignments.len(),
            occupied.len(),
            self.config.grouping.target_groups
        );
        let n = occupied.len();
        if let Ok(old) = self.read_json::<BTreeMap<UserId, GroupCsid>>(ASSIGNMENTS, "train-rqvae") {
            log::info!("membership change since the last run: {:.4}", membership_change(&old, &assignments));
        }
        RqVaeModel {
            config: cfg.clone(),
            params,
        }
        .save(&self.output(RQVAE)?)?;
        self.write(RQVAE_LOSS, loss_csv(&report.loss_trace))?;
        self.write_json(ASSIGNMENTS, &assignments)?;
        self.write(CSID_TABLE, csid_table_tsv(&assignments))?;
        self.record("train-rqvae", &[RQVAE, RQVAE_LOSS, ASSIGNMENTS, CSID_TABLE], started, None)?;
        Ok(n)
    }

    fn assignments(&self) -> Result<BTreeMap<UserId, GroupCsid>> {
        self.read_json(ASSIGNMENTS, "train-rqvae")
    }

    pub fn group(&self) -> Result<GroupSet> {
        let started = Instant::now();
        let groups = build_groups(&self.assignments()?, &self.representations()?)?;
        let set = GroupSet {
            default_csid: default_group(&groups)?,
            groups,
        };
        self.write_json(GROUPS, &set)?;
        self.record("group", &[GROUPS], started, None)?;
        Ok(set)
    }

    fn groups(&self) -> Result<GroupSet> {
        self.read_json(GROUPS, "group")
    }

    fn placeholder_models(&self, data: &PreparedData, groups: &GroupSet) -> ModelPair {
        let featurizer = Featurizer::new(
            groups.groups.iter().map(|g| g.csid.clone()),
            CategoryVocab::new(data.categories.iter().cloned()),
        );
        let (f, c) = (featurizer.dim(), featurizer.vocab().len());
        ModelPair {
            featurizer,
            policy: NoveltyPolicy::uniform(f, c),
            reward: RewardModel::new(f, c, self.config.bootstrap.reward_embedding, 0.0, 0),
        }
    }

    /// Generates group profiles, reusing the previous ones when group
    /// membership moved by no more than the configured fraction.
    pub fn profile(&self) -> Result<usize> {
        let started = Instant::now();
        let data = self.prepared()?;
        let groups = self.groups()?;
        let reps = self.representations()?;
        let assignments = self.assignments()?;
        let previous: Option<ProfileSet> = self.read_json(PROFILES, "profile").ok();
        let set = match previous {
            Some(p) if membership_change(&p.assignments, &assignments) <= self.config.grouping.profile_refresh_fraction => {
                log::info!("group membership is stable; keeping {} profiles", p.profiles.len());
                ProfileSet {
                    assignments,
                    profiles: p.profiles,
                }
            }
            _ => {
                let by_user: BTreeMap<&UserId, &PreparedUser> = data.users.iter().map(|u| (&u.user_id, u)).collect();
                let k_short = self.config.ingest.k_short;
                let sequences = |u: &UserId| -> Vec<String> {
                    by_user.get(u).map_or_else(Vec::new, |p| {
                        if p.short_categories.is_empty() {
                            let t = &p.train_categories;
                            t[t.len().saturating_sub(k_short)..].to_vec()
                        } else {
                            p.short_categories.clone()
                        }
                    })
                };
                let k = self.config.grouping.reps_k;
                let usable: Vec<SemanticGroup> = groups
                    .groups
                    .iter()
                    .filter(|g| select_representatives(g, &reps, k).iter().any(|u| !sequences(u).is_empty()))
                    .cloned()
                    .collect();
                if usable.len() < groups.groups.len() {
                    log::warn!("{} groups have no categories to profile", groups.groups.len() - usable.len());
                }
                let backend = self.backend(self.placeholder_models(&data, &groups))?;
                let profiles =
                    generate_group_profiles(&usable, &reps, k, &sequences, backend.as_ref(), &self.templates()?)?;
                ProfileSet { assignments, profiles }
            }
        };
        self.write_json(PROFILES, &set)?;
        self.write(GROUP_TABLE, group_table_tsv(&groups.groups, &set.profiles))?;
        self.record("profile", &[PROFILES, GROUP_TABLE], started, None)?;
        Ok(set.profiles.len())
    }

    fn profiles(&self) -> Result<BTreeMap<GroupCsid, String>> {
        let set: ProfileSet = self.read_json(PROFILES, "profile")?;
        Ok(set.profiles.into_iter().map(|p| (p.csid, p.profile_text)).collect())
    }

    /// Supervised fine-tuning of the novelty policy and reward-model
    /// training on the logged preference pairs.
    pub fn bootstrap(&self) -> Result<usize> {
        let started = Instant::now();
        let data = self.prepared()?;
        let groups = self.groups()?;
        let assignments = self.assignments()?;
        let mut histories = BTreeMap::new();
        let mut long_term = BTreeMap::new();
        for u in &data.users {
            histories.insert(
                u.user_id.clone(),
                CategoryHistory {
                    group: assignments.get(&u.user_id).cloned(),
                    categories: u.train_categories.clone(),
                },
            );
            long_term.insert(u.user_id.clone(), u.long_categories.clone());
        }
        let featurizer = self.placeholder_models(&data, &groups).featurizer;
        let (models, pairs, report) =
            bootstrap_models(featurizer, &histories, &long_term, &self.config.bootstrap, self.config.seed)?;
        models.save(&self.output(POLICY)?, &self.output(REWARD)?)?;
        self.write(PAIRS, serde_json::to_vec(&pairs)?)?;
        self.write(PAIRS_TSV, pairs_tsv(&pairs))?;
        self.write_json(BOOTSTRAP_REPORT, &report)?;
        self.record("bootstrap", &[POLICY, REWARD, PAIRS, PAIRS_TSV, BOOTSTRAP_REPORT], started, None)?;
        Ok(pairs.len())
    }

    fn cycle_users(&self, data: &PreparedData) -> Result<Vec<CycleUser>> {
        let assignments = self.assignments()?;
        Ok(data
            .users
            .iter()
            .filter_map(|u| {
                Some(CycleUser {
                    user_id: u.user_id.clone(),
                    group: assignments.get(&u.user_id)?.clone(),
                    short_categories: u.short_categories.clone(),
                    history: u.train_categories.iter().cloned().collect(),
                })
            })
            .collect())
    }

    /// Runs the configured number of co-optimization cycles, rebuilding the
    /// category store from scratch.
    pub fn pco_run(&self) -> Result<Vec<CycleReport>> {
        let started = Instant::now();
        self.require(POLICY, "bootstrap")?;
        let models = ModelPair::load(&self.path(POLICY), &self.path(REWARD))?;
        let pairs: Vec<PreferencePair> = self.read_json(PAIRS, "bootstrap")?;
        let data = self.prepared()?;
        let users = self.cycle_users(&data)?;
        let profiles = self.profiles()?;
        let templates = self.templates()?;
        let backend = self.backend(models.clone())?;
        let world = match self.config.ingest.source {
            DataSource::Synthetic => Some(self.world()?),
            DataSource::Files => None,
        };
        let cfg = &self.config.pco;
        let feedback = match (&world, cfg.retrain_reward) {
            (_, false) => RewardFeedback::Frozen,
            (Some(w), true) => RewardFeedback::Clicks(w),
            (None, true) => RewardFeedback::Pairs(&pairs),
        };
        let env = CycleEnv {
            backend: backend.as_ref(),
            templates: &templates,
            profiles: &profiles,
            users: &users,
            feedback,
        };
        let store_dir = self.config.store_dir(&self.dir);
        if store_dir.exists() {
            fs::remove_dir_all(&store_dir).map_err(|e| Error::io(&store_dir, e))?;
        }
        let mut store = CategoryStore::open(&store_dir)?;
        let mut reports = vec![baseline_report(&env, cfg)?];
        let mut state = CycleState::new(models.policy.clone(), pairs.clone(), cfg.alpha, cfg.beta)?;
        for _ in 0..cfg.cycles {
            let (next, report) = run_cycle(state, &env, Some(&mut store), cfg, self.config.seed)?;
            log::info!(
                "cycle {}: relevance {:.4}, novelty {:.4}, dpo {:.4}, kl {:.5}",
                report.cycle,
                report.mean_relevance,
                report.novelty_rate,
                report.dpo_loss,
                report.kl_loss
            );
            reports.push(report);
            state = next;
        }
        store.compact()?;
        let tuned = backend.simulated().map(|s| s.models()).unwrap_or(models);
        tuned.save(&self.output(PCO_POLICY)?, &self.output(PCO_REWARD)?)?;
        self.write(CYCLES, reports_csv(&reports))?;
        let store_file = store.path();
        let store_rel = store_file
            .strip_prefix(&self.dir)
            .map(|p| p.to_string_lossy().into_owned())
            .ok();
        let mut outputs = vec![CYCLES, PCO_POLICY, PCO_REWARD];
        if let Some(rel) = store_rel.as_deref() {
            outputs.push(rel);
        }
        self.record("pco-run", &outputs, started, None)?;
        Ok(reports)
    }

    pub fn ablation(&self) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
        let started = Instant::now();
        let trajectories = run_ablation(&self.config.pco)?;
        let means = mean_trajectories(&trajectories);
        let mut csv = String::from("alpha,round,mean_relevance,novelty_rate\n");
        for (alpha, rows) in &means {
            for (r, (rel, nov)) in rows.iter().enumerate() {
                csv.push_str(&format!("{alpha},{r},{rel:.6},{nov:.6}\n"));
            }
        }
        self.write(ABLATION, ablation_csv(&trajectories))?;
        self.write(ABLATION_MEAN, csv)?;
        self.record("ablation", &[ABLATION, ABLATION_MEAN], started, None)?;
        Ok(means)
    }

    fn open_store(&self) -> Result<CategoryStore> {
        let dir = self.config.store_dir(&self.dir);
        if !dir.exists() {
            return Err(Error::MissingArtifact {
                artifact: dir,
                producer: "pco-run",
            });
        }
        CategoryStore::open(&dir)
    }

    /// Category metrics at cut-off `k` (the configured one when `None`),
    /// plus the group and category similarity analyses.
    pub fn eval(&self, k: Option<usize>) -> Result<MetricReport> {
        let started = Instant::now();
        let k = k.unwrap_or(self.config.eval.k);
        let data = self.prepared()?;
        let groups = self.groups()?;
        let assignments = self.assignments()?;
        let reps = self.representations()?;
        let store = self.open_store()?;
        if k > data.categories.len() {
            return Err(Error::Config(format!(
                "K = {k} exceeds the {} catalog categories",
                data.categories.len()
            )));
        }
        let popularity = popular_categories(&data.click_volume, data.categories.len());
        let mut popularity_full = popularity.clone();
        popularity_full.extend(data.categories.iter().filter(|c| !popularity.contains(c)).cloned());

        let (mut lists, mut truths) = (Vec::new(), BTreeMap::new());
        let (mut hits, mut default_hits) = (0, 0);
        for u in &data.users {
            let csid = assignments.get(&u.user_id);
            let rec = store.lookup_with_fallback(csid, &u.short_categories, &groups.default_csid);
            if let Some(r) = rec {
                hits += 1;
                let own = csid.map(|c| make_key(c, &u.short_categories).to_string());
                default_hits += (own.as_deref() != Some(r.key.as_str())) as usize;
            }
            let aligned = rec.map(|r| r.categories.clone()).unwrap_or_default();
            lists.push(RecommendationList {
                user_id: u.user_id.clone(),
                categories: assemble_list(&aligned, &popularity_full, k),
            });
            truths.insert(
                u.user_id.clone(),
                UserGroundTruth {
                    preferred: u.all_categories.clone(),
                    history: u.train_categories.iter().cloned().collect(),
                    relevant: u.test_categories.clone(),
                },
            );
        }
        let tail = long_tail_set(&data.click_volume, &data.categories, self.config.eval.tail_fraction);
        let report = evaluate(&lists, &truths, &tail, k, data.categories.len())?;

        let members: BTreeMap<String, Vec<Vec<f64>>> = groups
            .groups
            .iter()
            .map(|g| {
                let vs = g.members.iter().filter_map(|m| reps.get(m).cloned()).collect();
                (g.csid.to_string(), vs)
            })
            .collect();
        let sim = group_similarity_analysis(
            &members,
            self.config.eval.similarity_groups,
            self.config.eval.similarity_subset,
            self.config.seed,
        );
        let category_rows = self.category_similarity(&data, &reps)?;

        let summary = EvalSummary {
            k,
            users: report.n_users,
            ndcg_excluded: report.ndcg_excluded,
            store_hits: hits,
            default_hits,
            intra_similarity: sim.intra_mean(),
            inter_similarity: sim.inter_mean(),
            skipped_groups: sim.skipped.len(),
        };
        self.write(METRICS, report.csv())?;
        self.write(PER_USER, report.per_user_tsv())?;
        self.write(GROUP_SIMILARITY, sim.csv())?;
        self.write(CATEGORY_SIMILARITY, category_similarity_csv(&category_rows))?;
        self.write_json(EVAL_SUMMARY, &summary)?;
        self.record(
            "eval",
            &[METRICS, PER_USER, GROUP_SIMILARITY, CATEGORY_SIMILARITY, EVAL_SUMMARY],
            started,
            None,
        )?;
        Ok(report)
    }

    /// Each category's mean item embedding against the users whose most
    /// clicked category it is, and against as many users who never clicked
    /// it.
    fn category_similarity(
        &self,
        data: &PreparedData,
        reps: &BTreeMap<UserId, Vec<f64>>,
    ) -> Result<Vec<crate::eval::CategorySimilarity>> {
        let encoder = LongTermEncoder::load(&self.path(ENCODER), Some(&self.config.encoder))?;
        let items = &encoder.params.table.items;
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (item, cat) in data.catalog.iter() {
            let row = items.row(encoder.vocab.index(item)?);
            let e = sums.entry(cat).or_insert_with(|| (vec![0.0; row.len()], 0));
            e.0.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let mut top_users: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
        for u in &data.users {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for c in &u.train_categories {
                *counts.entry(c).or_default() += 1;
            }
            let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
            if let (Some((c, _)), Some(v)) = (top, reps.get(&u.user_id)) {
                top_users.entry(c.to_string()).or_default().push(v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xca7);
        let mut out = Vec::new();
        for (cat, (sum, n)) in sums {
            let Some(users) = top_users.get(cat) else { continue };
            let vector: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let mut unrelated: Vec<&Vec<f64>> = data
                .users
                .iter()
                .filter(|u| !u.all_categories.contains(cat))
                .filter_map(|u| reps.get(&u.user_id))
                .collect();
            unrelated.shuffle(&mut rng);
            unrelated.truncate(users.len());
            out.push(category_user_similarity(cat, &vector, users, &unrelated)?);
        }
        Ok(out)
    }

    /// The store record for a user's group and short-window categories,
    /// falling back to the default group. Unknown users take `categories`
    /// when given.
    pub fn query(&self, user: &UserId, categories: Option<Vec<String>>) -> Result<QueryResult> {
        let data = self.prepared()?;
        let assignments = self.assignments()?;
        let groups = self.groups()?;
        let store = self.open_store()?;
        let known = data.users.iter().find(|u| &u.user_id == user);
        let cats = categories
            .or_else(|| known.map(|u| u.short_categories.clone()))
            .unwrap_or_default();
        let csid = assignments.get(user).cloned();
        let record = store.lookup_with_fallback(csid.as_ref(), &cats, &groups.default_csid).cloned();
        let own_key = csid.as_ref().map(|c| make_key(c, &cats).to_string());
        let default_key = make_key(&groups.default_csid, &cats).to_string();
        let used_default = match (&record, &own_key) {
            (Some(r), Some(k)) => &r.key != k,
            (_, None) => true,
            (None, Some(_)) => false,
        };
        Ok(QueryResult {
            user_id: user.clone(),
            csid,
            categories: cats,
            key: if used_default { default_key } else { own_key.unwrap_or(default_key) },
            used_default,
            record,
        })
    }

    pub fn export(&self) -> Result<String> {
        Ok(self.open_store()?.export_tsv())
    }

    /// Rewrites the store log; returns the record count.
    pub fn compact(&self) -> Result<usize> {
        let mut store = self.open_store()?;
        store.compact()?;
        Ok(store.len())
    }

    /// Every stage from ingest to eval.
    pub fn run_all(&self) -> Result<MetricReport> {
        self.ingest()?;
        self.train_encoder()?;
        self.train_rqvae()?;
        self.group()?;
        self.profile()?;
        self.bootstrap()?;
        self.pco_run()?;
        self.eval(None)
    }
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.synthetic.users = 60;
        c.synthetic.items = 200;
        c.synthetic.categories = 12;
        c.synthetic.groups = 3;
        c.synthetic.core_per_group = 3;
        c.synthetic.latent_per_group = 2;
        c.synthetic.events_per_user = 30;
        c.encoder.d = 8;
        c.encoder.max_len = 12;
        c.encoder_train.steps = 5;
        c.rqvae.latent_dim = 4;
        c.rqvae.hidden = 8;
        c.rqvae.codebook_size = 4;
        c.rqvae.steps = 20;
        c.bootstrap.sft_epochs = 5;
        c.bootstrap.rm_epochs = 5;
        c.eval.similarity_subset = 3;
        c
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), tiny()).unwrap();
        match run.train_encoder() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "ingest"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tiny_pipeline_runs_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), tiny()).unwrap();
        let report = run.run_all().unwrap();
        assert_eq!(report.rows.len(), 4);
        let first = fs::read(run.path(MANIFEST)).unwrap();
        let metrics = fs::read(run.path(METRICS)).unwrap();
        run.run_all().unwrap();
        assert_eq!(fs::read(run.path(MANIFEST)).unwrap(), first);
        assert_eq!(fs::read(run.path(METRICS)).unwrap(), metrics);
        let m = run.manifest().unwrap();
        assert!(m.stages.contains_key("pco-run"));
        assert_eq!(m.input_digests.len(), 3);
    }

    #[test]
    fn query_falls_back_for_unknown_users() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), tiny()).unwrap();
        run.run_all().unwrap();
        let q = run.query(&UserId::from("nobody"), None).unwrap();
        assert!(q.csid.is_none() && q.used_default);
        let groups = run.groups().unwrap();
        assert!(q.key.starts_with(&format!("{}|", groups.default_csid)));
    }
}
