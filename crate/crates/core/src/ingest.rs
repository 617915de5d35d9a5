//! Interaction-log and catalog parsing, per-user long/short sequence
//! construction, click-frequency filtering of the long window, and
//! short-window category mapping.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compares identifiers numerically when both are plain integers, otherwise
/// lexicographically, so MovieLens ids sort as 1, 2, 10.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

macro_rules! opaque_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl Ord for $name {
            fn cmp(&self, other: &Self) -> Ordering {
                natural_cmp(&self.0, &other.0)
            }
        }

        impl PartialOrd for $name {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

opaque_id!(UserId);
opaque_id!(ItemId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: u64,
    /// Kept for provenance only; sequences use implicit feedback.
    pub rating: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionFormat {
    /// `UserID::MovieID::Rating::Timestamp`
    Movielens1m,
    /// `user<TAB>item<TAB>timestamp[<TAB>rating]`
    Tsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Malformed lines are collected in [`ParsedInteractions::rejected`].
    Skip,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedInteractions {
    pub events: Vec<InteractionEvent>,
    pub rejected: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
            Gender::Unknown => 2,
        }
    }
}

pub const GENDERS: usize = 3;
/// Seven MovieLens age brackets plus an unknown bucket.
pub const AGE_BUCKETS: usize = 8;
/// Twenty-one MovieLens occupations plus an unknown bucket.
pub const OCCUPATIONS: usize = 22;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAttributes {
    pub user_id: UserId,
    pub age_bucket: u8,
    pub gender: Gender,
    pub occupation: u8,
}

impl UserAttributes {
    /// Declared default bucket for users without an attribute record.
    pub fn unknown(user_id: UserId) -> Self {
        Self {
            user_id,
            age_bucket: (AGE_BUCKETS - 1) as u8,
            gender: Gender::Unknown,
            occupation: (OCCUPATIONS - 1) as u8,
        }
    }
}

/// Item → category mapping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    items: BTreeMap<ItemId, String>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item: ItemId, category: impl Into<String>) {
        self.items.insert(item, category.into());
    }

    pub fn category(&self, item: &ItemId) -> Option<&str> {
        self.items.get(item).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &str)> {
        self.items.iter().map(|(k, v)| (k, v.as_str()))
    }

    pub fn category_vocab(&self) -> CategoryVocab {
        CategoryVocab::new(self.items.values().cloned())
    }
}

/// Sorted, deduplicated category labels with dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    labels: Vec<String>,
}

impl CategoryVocab {
    pub fn new(labels: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = labels.into_iter().collect();
        Self {
            labels: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
    }

    pub fn require(&self, label: &str) -> Result<usize> {
        self.index(label)
            .ok_or_else(|| Error::UnknownCategory(label.to_string()))
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Case-insensitive lookup returning the canonical label.
    pub fn canonical(&self, text: &str) -> Option<&str> {
        let t = text.trim();
        self.labels
            .iter()
            .find(|l| l.eq_ignore_ascii_case(t))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: UserId,
    pub long_term: Vec<ItemId>,
    pub short_term: Vec<ItemId>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredLongSequence {
    pub user_id: UserId,
    pub items: Vec<ItemId>,
}

impl FilteredLongSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortCategorySet {
    pub user_id: UserId,
    /// Deduplicated in first-occurrence order.
    pub categories: Vec<String>,
}

impl ShortCategorySet {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

fn parse_u64(field: &str, what: &str, line: usize) -> Result<u64> {
    field.trim().parse::<u64>().map_err(|_| Error::Parse {
        line,
        reason: format!("{what} `{field}` is not a non-negative integer"),
    })
}

fn parse_line(text: &str, format: InteractionFormat, line: usize) -> Result<InteractionEvent> {
    let fields: Vec<&str> = match format {
        InteractionFormat::Movielens1m => text.split("::").collect(),
        InteractionFormat::Tsv => text.split('\t').collect(),
    };
    let (user, item, ts, rating) = match (format, fields.as_slice()) {
        (InteractionFormat::Movielens1m, [u, i, r, t]) => (*u, *i, *t, Some(*r)),
        (InteractionFormat::Tsv, [u, i, t]) => (*u, *i, *t, None),
        (InteractionFormat::Tsv, [u, i, t, r]) => (*u, *i, *t, Some(*r)),
        _ => {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, found {}", expected_fields(format), fields.len()),
            })
        }
    };
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line,
            reason: "empty user or item id".into(),
        });
    }
    if format == InteractionFormat::Movielens1m {
        // MovieLens ids are integers; reject anything else.
        parse_u64(user, "user id", line)?;
        parse_u64(item, "movie id", line)?;
    }
    let timestamp = parse_u64(ts, "timestamp", line)?;
    let rating = match rating {
        Some(r) => Some(r.trim().parse::<i32>().map_err(|_| Error::Parse {
            line,
            reason: format!("rating `{r}` is not an integer"),
        })?),
        None => None,
    };
    Ok(InteractionEvent {
        user_id: UserId::new(user),
        item_id: ItemId::new(item),
        timestamp,
        rating,
    })
}

fn expected_fields(format: InteractionFormat) -> &'static str {
    match format {
        InteractionFormat::Movielens1m => "4",
        InteractionFormat::Tsv => "3 or 4",
    }
}

/// Parses an interaction log. Blank lines are ignored; line numbers are
/// 1-based.
pub fn parse_interactions(
    source: impl BufRead,
    format: InteractionFormat,
    mode: ParseMode,
) -> Result<ParsedInteractions> {
    let mut out = ParsedInteractions::default();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: format!("not valid UTF-8 text: {e}"),
        })?;
        let text = line.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        match parse_line(text, format, lineno) {
            Ok(ev) => out.events.push(ev),
            Err(e) => match mode {
                ParseMode::Strict => return Err(e),
                ParseMode::Skip => out.rejected.push((lineno, e.to_string())),
            },
        }
    }
    Ok(out)
}

/// MovieLens ships `movies.dat` in ISO-8859-1; fall back to that when the
/// bytes are not UTF-8.
fn decode_text(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

/// Parses `movies.dat` (`MovieID::Title::Genre1|Genre2|...`). The first
/// listed genre becomes the item's category.
pub fn parse_movies(bytes: &[u8]) -> Result<Catalog> {
    let text = decode_text(bytes);
    let mut catalog = Catalog::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        // Titles may themselves contain "::" in theory, so split from both ends.
        let id_end = line.find("::").ok_or_else(|| Error::Parse {
            line: lineno,
            reason: "missing `::` separator".into(),
        })?;
        let genre_start = line.rfind("::").unwrap();
        if genre_start == id_end {
            return Err(Error::Parse {
                line: lineno,
                reason: "expected MovieID::Title::Genres".into(),
            });
        }
        let id = line[..id_end].trim();
        parse_u64(id, "movie id", lineno)?;
        let genres = &line[genre_start + 2..];
        let first = genres.split('|').next().unwrap_or("").trim();
        if first.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                reason: "movie has no genre".into(),
            });
        }
        catalog.insert(ItemId::new(id), first);
    }
    Ok(catalog)
}

fn movielens_age_bucket(age: u64) -> u8 {
    match age {
        1 => 0,
        18 => 1,
        25 => 2,
        35 => 3,
        45 => 4,
        50 => 5,
        56 => 6,
        _ => (AGE_BUCKETS - 1) as u8,
    }
}

fn parse_gender(g: &str) -> Gender {
    match g.trim() {
        "M" | "m" => Gender::Male,
        "F" | "f" => Gender::Female,
        _ => Gender::Unknown,
    }
}

/// Parses `users.dat` (`UserID::Gender::Age::Occupation::Zip`).
pub fn parse_movielens_users(source: impl BufRead) -> Result<BTreeMap<UserId, UserAttributes>> {
    let mut out = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split("::").collect();
        if f.len() < 4 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected 5 fields, found {}", f.len()),
            });
        }
        let id = f[0].trim();
        parse_u64(id, "user id", lineno)?;
        let age = parse_u64(f[2], "age", lineno)?;
        let occ = parse_u64(f[3], "occupation", lineno)?;
        let user_id = UserId::new(id);
        out.insert(
            user_id.clone(),
            UserAttributes {
                user_id,
                age_bucket: movielens_age_bucket(age),
                gender: parse_gender(f[1]),
                occupation: occ.min(OCCUPATIONS as u64 - 1) as u8,
            },
        );
    }
    Ok(out)
}

/// Parses an `item<TAB>category` catalog.
pub fn parse_catalog_tsv(source: impl BufRead) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.trim_end_matches('\r').split('\t');
        match (it.next(), it.next()) {
            (Some(item), Some(cat)) if !item.trim().is_empty() && !cat.trim().is_empty() => {
                catalog.insert(ItemId::new(item.trim()), cat.trim())
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    reason: "expected item<TAB>category".into(),
                })
            }
        }
    }
    Ok(catalog)
}

/// Parses `user<TAB>gender<TAB>age_bucket<TAB>occupation`.
pub fn parse_users_tsv(source: impl BufRead) -> Result<BTreeMap<UserId, UserAttributes>> {
    let mut out = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                reason: "expected user<TAB>gender<TAB>age_bucket<TAB>occupation".into(),
            });
        }
        let user_id = UserId::new(f[0].trim());
        let age = parse_u64(f[2], "age bucket", lineno)?.min(AGE_BUCKETS as u64 - 1);
        let occ = parse_u64(f[3], "occupation", lineno)?.min(OCCUPATIONS as u64 - 1);
        out.insert(
            user_id.clone(),
            UserAttributes {
                user_id,
                age_bucket: age as u8,
                gender: parse_gender(f[1]),
                occupation: occ as u8,
            },
        );
    }
    Ok(out)
}

/// Groups events per user in stable timestamp order.
pub fn events_by_user(events: &[InteractionEvent]) -> BTreeMap<UserId, Vec<&InteractionEvent>> {
    let mut by_user: BTreeMap<UserId, Vec<&InteractionEvent>> = BTreeMap::new();
    for ev in events {
        by_user.entry(ev.user_id.clone()).or_default().push(ev);
    }
    for evs in by_user.values_mut() {
        // sort_by_key is stable, so tied timestamps keep input order
        evs.sort_by_key(|e| e.timestamp);
    }
    by_user
}

/// Splits each user's chronological history into the first N−K events and
/// the most recent min(K, N).
pub fn build_sequences(events: &[InteractionEvent], k: usize) -> Result<BTreeMap<UserId, UserSequence>> {
    if k == 0 {
        return Err(Error::Config("short window K must be at least 1".into()));
    }
    Ok(events_by_user(events)
        .into_iter()
        .map(|(user, evs)| {
            let split = evs.len().saturating_sub(k);
            let items: Vec<ItemId> = evs.iter().map(|e| e.item_id.clone()).collect();
            let seq = UserSequence {
                user_id: user.clone(),
                long_term: items[..split].to_vec(),
                short_term: items[split..].to_vec(),
                k,
            };
            (user, seq)
        })
        .collect())
}

/// Per-item click counts over the long-term window.
pub fn click_counts(seq: &UserSequence) -> BTreeMap<ItemId, u32> {
    let mut counts = BTreeMap::new();
    for item in &seq.long_term {
        *counts.entry(item.clone()).or_insert(0) += 1;
    }
    counts
}

/// Keeps long-term items the user clicked at least `tau` times, preserving
/// order.
pub fn filter_long_sequence(
    seq: &UserSequence,
    clicks: &BTreeMap<ItemId, u32>,
    tau: u32,
) -> Result<FilteredLongSequence> {
    let mut items = Vec::new();
    for item in &seq.long_term {
        let count = clicks
            .get(item)
            .ok_or_else(|| Error::MissingClickCount(item.to_string()))?;
        if *count >= tau {
            items.push(item.clone());
        }
    }
    Ok(FilteredLongSequence {
        user_id: seq.user_id.clone(),
        items,
    })
}

fn dedup_first_occurrence<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for l in labels {
        if seen.insert(l) {
            out.push(l.to_string());
        }
    }
    out
}

pub fn map_short_to_categories(seq: &UserSequence, catalog: &Catalog) -> Result<ShortCategorySet> {
    let labels = seq
        .short_term
        .iter()
        .map(|i| {
            catalog
                .category(i)
                .ok_or_else(|| Error::UnknownItem(i.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShortCategorySet {
        user_id: seq.user_id.clone(),
        categories: dedup_first_occurrence(labels),
    })
}

/// Set of categories an item list touches.
pub fn categories_of(items: &[ItemId], catalog: &Catalog) -> Result<BTreeSet<String>> {
    items
        .iter()
        .map(|i| {
            catalog
                .category(i)
                .map(str::to_string)
                .ok_or_else(|| Error::UnknownItem(i.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    LeaveOneOut,
    /// Day offsets (from the first event's day) where validation and test
    /// begin.
    DayBoundaries(Vec<u32>),
}

#[derive(Debug, Clone, Default)]
pub struct TemporalSplit {
    pub train: Vec<InteractionEvent>,
    pub valid: Vec<InteractionEvent>,
    pub test: Vec<InteractionEvent>,
    /// Users kept train-only because they had fewer than three events.
    pub flagged_users: Vec<UserId>,
}

const DAY: u64 = 86_400;

pub fn temporal_split(events: &[InteractionEvent], policy: &SplitPolicy) -> Result<TemporalSplit> {
    let mut out = TemporalSplit::default();
    match policy {
        SplitPolicy::LeaveOneOut => {
            for (user, evs) in events_by_user(events) {
                let n = evs.len();
                if n < 3 {
                    out.train.extend(evs.into_iter().cloned());
                    out.flagged_users.push(user);
                    continue;
                }
                out.train.extend(evs[..n - 2].iter().map(|e| (*e).clone()));
                out.valid.push(evs[n - 2].clone());
                out.test.push(evs[n - 1].clone());
            }
        }
        SplitPolicy::DayBoundaries(bounds) => {
            if bounds.len() != 2 || bounds[0] > bounds[1] {
                return Err(Error::Config(
                    "day_boundaries needs two non-decreasing day offsets".into(),
                ));
            }
            let Some(min_ts) = events.iter().map(|e| e.timestamp).min() else {
                return Ok(out);
            };
            let origin = min_ts / DAY * DAY;
            let valid_start = origin + bounds[0] as u64 * DAY;
            let test_start = origin + bounds[1] as u64 * DAY;
            for (_, evs) in events_by_user(events) {
                for e in evs {
                    let part = if e.timestamp < valid_start {
                        &mut out.train
                    } else if e.timestamp < test_start {
                        &mut out.valid
                    } else {
                        &mut out.test
                    };
                    part.push(e.clone());
                }
            }
        }
    }
    Ok(out)
}
