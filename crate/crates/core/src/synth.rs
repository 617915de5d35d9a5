//! Seeded synthetic world: user groups with a known category-affinity
//! matrix, a catalog, attributes correlated with group, and click logs
//! sampled from the affinities. Also writes a MovieLens-1M-format surrogate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, Gender, InteractionEvent, ItemId, UserAttributes, UserId, AGE_BUCKETS, OCCUPATIONS};
use crate::quantizer::GroupCsid;

pub const MOVIELENS_GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// 2000-12-31 00:00:00 UTC, near the start of the MovieLens-1M log.
const EPOCH_START: u64 = 978_220_800;
const DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub users: usize,
    pub groups: usize,
    pub categories: usize,
    pub items: usize,
    /// Mean events per user; counts are `min_events` plus an exponential
    /// draw.
    pub events_per_user: usize,
    pub min_events: usize,
    pub days: u32,
    /// Categories each group clicks habitually.
    pub core_per_group: usize,
    /// Categories a group likes when shown but rarely reaches on its own.
    pub latent_per_group: usize,
    pub core_affinity: f64,
    pub latent_affinity: f64,
    pub low_affinity: f64,
    /// Relative click weight of a latent (resp. other) category versus a
    /// core one in the organic log.
    pub latent_click_weight: f64,
    pub low_click_weight: f64,
    pub zipf_exponent: f64,
    /// Probability that an attribute follows the user's group.
    pub attribute_correlation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            users: 400,
            groups: 10,
            categories: 40,
            items: 800,
            events_per_user: 60,
            min_events: 20,
            days: 25,
            core_per_group: 6,
            latent_per_group: 4,
            core_affinity: 0.9,
            latent_affinity: 0.6,
            low_affinity: 0.05,
            latent_click_weight: 0.04,
            low_click_weight: 0.005,
            zipf_exponent: 1.0,
            attribute_correlation: 0.7,
        }
    }
}

impl WorldConfig {
    /// Roughly MovieLens-1M sized: 6040 users, 3706 items, 18 genres and
    /// about a million events.
    pub fn movielens_surrogate(seed: u64) -> Self {
        Self {
            seed,
            users: 6040,
            groups: 20,
            categories: 18,
            items: 3706,
            events_per_user: 165,
            min_events: 20,
            days: 1000,
            core_per_group: 5,
            latent_per_group: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world.{m}")));
        if self.users == 0 || self.groups == 0 {
            return bad("users and groups must be positive");
        }
        if self.core_per_group + self.latent_per_group > self.categories || self.core_per_group == 0 {
            return bad("core_per_group + latent_per_group must fit in categories, with at least one core");
        }
        if self.items < self.categories {
            return bad("items must cover every category");
        }
        if self.min_events == 0 || self.events_per_user < self.min_events || self.days == 0 {
            return bad("events_per_user >= min_events >= 1 and days >= 1 required");
        }
        for (name, p) in [
            ("core_affinity", self.core_affinity),
            ("latent_affinity", self.latent_affinity),
            ("low_affinity", self.low_affinity),
            ("attribute_correlation", self.attribute_correlation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.latent_click_weight >= 0.0 && self.low_click_weight >= 0.0 && self.zipf_exponent > 0.0) {
            return bad("click weights must be non-negative and zipf_exponent positive");
        }
        Ok(())
    }
}

pub fn category_names(n: usize) -> Vec<String> {
    if n <= MOVIELENS_GENRES.len() {
        MOVIELENS_GENRES[..n].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("cat{i:02}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Affinity {
    Core,
    Latent,
    Low,
}

/// Per-user click probability for a shown category, used as the
/// simulated-feedback oracle.
pub trait ClickModel: Sync {
    fn click_probability(&self, user: &UserId, category: &str) -> Option<f64>;
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub category_names: Vec<String>,
    /// `kinds[g][c]`.
    pub kinds: Vec<Vec<Affinity>>,
    pub user_group: BTreeMap<UserId, usize>,
    pub attributes: BTreeMap<UserId, UserAttributes>,
    pub catalog: Catalog,
    pub events: Vec<InteractionEvent>,
}

fn correlated(rng: &mut ChaCha8Rng, p: f64, preferred: usize, n: usize) -> usize {
    if rng.random::<f64>() < p {
        preferred % n
    } else {
        rng.random_range(0..n)
    }
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let names = category_names(config.categories);
        let c = config.categories;

        let kinds: Vec<Vec<Affinity>> = (0..config.groups)
            .map(|_| {
                let mut order: Vec<usize> = (0..c).collect();
                order.shuffle(&mut rng);
                let mut row = vec![Affinity::Low; c];
                for &i in &order[..config.core_per_group] {
                    row[i] = Affinity::Core;
                }
                for &i in &order[config.core_per_group..config.core_per_group + config.latent_per_group] {
                    row[i] = Affinity::Latent;
                }
                row
            })
            .collect();

        let mut catalog = Catalog::new();
        let mut items_by_cat: Vec<Vec<ItemId>> = vec![Vec::new(); c];
        for j in 0..config.items {
            let id = ItemId::new((j + 1).to_string());
            catalog.insert(id.clone(), names[j % c].clone());
            items_by_cat[j % c].push(id);
        }
        let zipfs: Vec<Zipf<f64>> = items_by_cat
            .iter()
            .map(|v| Zipf::new(v.len() as f64, config.zipf_exponent).expect("validated zipf parameters"))
            .collect();

        let extra = (config.events_per_user - config.min_events) as f64;
        let extra_dist = (extra > 0.0).then(|| Exp::new(1.0 / extra).expect("positive rate"));
        let span = config.days as u64 * DAY;

        let mut user_group = BTreeMap::new();
        let mut attributes = BTreeMap::new();
        let mut events = Vec::new();
        for u in 0..config.users {
            let user = UserId::new((u + 1).to_string());
            let g = rng.random_range(0..config.groups);
            let p = config.attribute_correlation;
            let gender = if correlated(&mut rng, p, g, 2) == 0 { Gender::Male } else { Gender::Female };
            attributes.insert(
                user.clone(),
                UserAttributes {
                    user_id: user.clone(),
                    age_bucket: correlated(&mut rng, p, g, AGE_BUCKETS - 1) as u8,
                    gender,
                    occupation: correlated(&mut rng, p, g * 3, OCCUPATIONS - 1) as u8,
                },
            );
            let weights: Vec<f64> = kinds[g]
                .iter()
                .map(|k| match k {
                    Affinity::Core => 1.0,
                    Affinity::Latent => config.latent_click_weight,
                    Affinity::Low => config.low_click_weight,
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let n = config.min_events + extra_dist.map_or(0, |d| d.sample(&mut rng).round() as usize).min(20 * config.events_per_user);
            let mut stamps: Vec<u64> = (0..n).map(|_| EPOCH_START + rng.random_range(0..span)).collect();
            stamps.sort_unstable();
            for ts in stamps {
                let mut x = rng.random::<f64>() * total;
                let mut cat = c - 1;
                for (i, w) in weights.iter().enumerate() {
                    if x < *w {
                        cat = i;
                        break;
                    }
                    x -= w;
                }
                let rank = zipfs[cat].sample(&mut rng) as usize;
                events.push(InteractionEvent {
                    user_id: user.clone(),
                    item_id: items_by_cat[cat][rank.clamp(1, items_by_cat[cat].len()) - 1].clone(),
                    timestamp: ts,
                    rating: Some(rng.random_range(1..=5)),
                });
            }
            user_group.insert(user, g);
        }
        Ok(Self {
            config: config.clone(),
            category_names: names,
            kinds,
            user_group,
            attributes,
            catalog,
            events,
        })
    }

    pub fn affinity(&self, group: usize, category: usize) -> f64 {
        match self.kinds[group][category] {
            Affinity::Core => self.config.core_affinity,
            Affinity::Latent => self.config.latent_affinity,
            Affinity::Low => self.config.low_affinity,
        }
    }

    /// Ground-truth group of each user as a one-level ID.
    pub fn group_csids(&self) -> BTreeMap<UserId, GroupCsid> {
        self.user_group
            .iter()
            .map(|(u, g)| (u.clone(), GroupCsid(vec![*g as u16])))
            .collect()
    }

    /// Core and latent categories of the user's group.
    pub fn preferred_categories(&self, user: &UserId) -> BTreeSet<String> {
        let Some(&g) = self.user_group.get(user) else {
            return BTreeSet::new();
        };
        self.kinds[g]
            .iter()
            .enumerate()
            .filter(|(_, k)| **k != Affinity::Low)
            .map(|(i, _)| self.category_names[i].clone())
            .collect()
    }

    /// `interactions.tsv`, `catalog.tsv`, `users.tsv`.
    pub fn write_tsv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("interactions.tsv"), |w| {
            for e in &self.events {
                writeln!(w, "{}\t{}\t{}", e.user_id, e.item_id, e.timestamp)?;
            }
            Ok(())
        })?;
        write_lines(&dir.join("catalog.tsv"), |w| {
            for (item, cat) in self.catalog.iter() {
                writeln!(w, "{item}\t{cat}")?;
            }
            Ok(())
        })?;
        write_lines(&dir.join("users.tsv"), |w| {
            for a in self.attributes.values() {
                let g = match a.gender {
                    Gender::Male => "M",
                    Gender::Female => "F",
                    Gender::Unknown => "U",
                };
                writeln!(w, "{}\t{g}\t{}\t{}", a.user_id, a.age_bucket, a.occupation)?;
            }
            Ok(())
        })
    }

    /// `ratings.dat`, `movies.dat`, `users.dat` in the MovieLens-1M layout.
    pub fn write_movielens(&self, dir: &Path) -> Result<()> {
        const AGES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("ratings.dat"), |w| {
            for e in &self.events {
                writeln!(w, "{}::{}::{}::{}", e.user_id, e.item_id, e.rating.unwrap_or(3), e.timestamp)?;
            }
            Ok(())
        })?;
        let n = self.category_names.len();
        write_lines(&dir.join("movies.dat"), |w| {
            let mut items: Vec<(u64, &str)> = self
                .catalog
                .iter()
                .map(|(i, c)| (i.as_str().parse().unwrap_or(0), c))
                .collect();
            items.sort_unstable();
            for (id, cat) in items {
                let second = &self.category_names[(id as usize * 7) % n];
                let genres = if id % 3 == 0 && second != cat { format!("{cat}|{second}") } else { cat.to_string() };
                writeln!(w, "{id}::Movie {id} ({})::{genres}", 1919 + id % 82)?;
            }
            Ok(())
        })?;
        write_lines(&dir.join("users.dat"), |w| {
            for a in self.attributes.values() {
                let g = if a.gender == Gender::Female { "F" } else { "M" };
                let age = AGES[(a.age_bucket as usize).min(AGES.len() - 1)];
                let occ = (a.occupation as usize).min(20);
                writeln!(w, "{}::{g}::{age}::{occ}::{:05}", a.user_id, 10_000 + occ * 17)?;
            }
            Ok(())
        })
    }
}

impl ClickModel for SyntheticWorld {
    fn click_probability(&self, user: &UserId, category: &str) -> Option<f64> {
        let g = *self.user_group.get(user)?;
        let c = self.category_names.iter().position(|n| n == category)?;
        Some(self.affinity(g, c))
    }
}

fn write_lines(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_catalog_tsv, parse_interactions, parse_movielens_users, parse_movies, InteractionFormat, ParseMode};

    fn small() -> WorldConfig {
        WorldConfig {
            users: 50,
            items: 120,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticWorld::generate(&small()).unwrap();
        let b = SyntheticWorld::generate(&small()).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.kinds, b.kinds);
        let c = SyntheticWorld::generate(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn groups_have_declared_shape() {
        let w = SyntheticWorld::generate(&small()).unwrap();
        for row in &w.kinds {
            assert_eq!(row.iter().filter(|k| **k == Affinity::Core).count(), 6);
            assert_eq!(row.iter().filter(|k| **k == Affinity::Latent).count(), 4);
        }
        assert_eq!(w.user_group.len(), 50);
        assert!(w.events.len() >= 50 * 20);
    }

    #[test]
    fn clicks_concentrate_on_core_categories() {
        let w = SyntheticWorld::generate(&small()).unwrap();
        let core = w
            .events
            .iter()
            .filter(|e| {
                let g = w.user_group[&e.user_id];
                let cat = w.catalog.category(&e.item_id).unwrap();
                let c = w.category_names.iter().position(|n| n == cat).unwrap();
                w.kinds[g][c] == Affinity::Core
            })
            .count();
        assert!(core as f64 > 0.8 * w.events.len() as f64);
    }

    #[test]
    fn tsv_round_trips_through_parsers() {
        let w = SyntheticWorld::generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_tsv(dir.path()).unwrap();
        let text = fs::read(dir.path().join("interactions.tsv")).unwrap();
        let parsed = parse_interactions(&text[..], InteractionFormat::Tsv, ParseMode::Strict).unwrap();
        assert_eq!(parsed.events.len(), w.events.len());
        let cat = parse_catalog_tsv(&fs::read(dir.path().join("catalog.tsv")).unwrap()[..]).unwrap();
        assert_eq!(cat, w.catalog);
    }

    #[test]
    fn movielens_layout_parses() {
        let w = SyntheticWorld::generate(&WorldConfig {
            categories: 18,
            ..small()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_movielens(dir.path()).unwrap();
        let text = fs::read(dir.path().join("ratings.dat")).unwrap();
        let parsed = parse_interactions(&text[..], InteractionFormat::Movielens1m, ParseMode::Strict).unwrap();
        assert_eq!(parsed.events.len(), w.events.len());
        let movies = parse_movies(&fs::read(dir.path().join("movies.dat")).unwrap()).unwrap();
        assert_eq!(movies.len(), 120);
        assert_eq!(movies.category_vocab().len(), 18);
        let users = parse_movielens_users(&fs::read(dir.path().join("users.dat")).unwrap()[..]).unwrap();
        assert_eq!(users.len(), 50);
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        let cfg = WorldConfig {
            core_per_group: 30,
            latent_per_group: 20,
            ..small()
        };
        assert!(SyntheticWorld::generate(&cfg).is_err());
    }
}
