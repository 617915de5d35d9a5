//! Offline key-value store of aligned categories, keyed by group ID plus a
//! hash of the short-term category set. Records live in a JSON Lines log
//! with an in-memory index; later lines for a key replace earlier ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::GroupCsid;
use crate::training::AlignedCategories;

pub const RECORDS_FILE: &str = "records.jsonl";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CompositeKey {
    pub csid_part: String,
    pub digest: String,
}

impl fmt::Display for CompositeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.csid_part, self.digest)
    }
}

/// Digest of the sorted category labels joined by commas.
pub fn category_digest<S: AsRef<str>>(categories: &[S]) -> String {
    let sorted: BTreeSet<&str> = categories.iter().map(AsRef::as_ref).collect();
    let joined = sorted.into_iter().collect::<Vec<_>>().join(",");
    format!("{:016x}", fnv1a64(joined.as_bytes()))
}

pub fn make_key<S: AsRef<str>>(csid: &GroupCsid, categories: &[S]) -> CompositeKey {
    CompositeKey {
        csid_part: csid.to_string(),
        digest: category_digest(categories),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub key: String,
    pub categories: Vec<(String, f64)>,
    pub cycle: u64,
}

impl StoreRecord {
    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (c, s) in &self.categories {
            if !(*s > 0.0 && *s < 1.0) {
                return Err(Error::Config(format!("score {s} for {c} is outside (0, 1)")));
            }
            if !seen.insert(c) {
                return Err(Error::Config(format!("category {c} repeated in record {}", self.key)));
            }
        }
        Ok(())
    }
}

/// A store handle. Reads see the snapshot loaded at open plus this
/// handle's own writes.
#[derive(Debug)]
pub struct CategoryStore {
    dir: PathBuf,
    index: BTreeMap<String, StoreRecord>,
    log: Option<BufWriter<File>>,
}

impl CategoryStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RECORDS_FILE);
        let mut index = BTreeMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StoreRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n + 1,
                    reason: format!("{}: {e}", path.display()),
                })?;
                index.insert(rec.key.clone(), rec);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            log: None,
        })
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    fn writer(&mut self) -> Result<&mut BufWriter<File>> {
        if self.log.is_none() {
            let path = self.path();
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.log = Some(BufWriter::new(file));
        }
        Ok(self.log.as_mut().expect("just opened"))
    }

    pub fn put(&mut self, key: &CompositeKey, aligned: &AlignedCategories, cycle: u64) -> Result<()> {
        let rec = StoreRecord {
            key: key.to_string(),
            categories: aligned.categories.clone(),
            cycle,
        };
        rec.validate()?;
        let line = serde_json::to_string(&rec)?;
        let path = self.path();
        let w = self.writer()?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        self.index.insert(rec.key.clone(), rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.path();
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &CompositeKey) -> Option<&StoreRecord> {
        self.index.get(&key.to_string())
    }

    /// Tries the user's own group, then the default group.
    pub fn lookup_with_fallback<S: AsRef<str>>(
        &self,
        csid: Option<&GroupCsid>,
        categories: &[S],
        default_csid: &GroupCsid,
    ) -> Option<&StoreRecord> {
        csid.and_then(|c| self.get(&make_key(c, categories)))
            .or_else(|| self.get(&make_key(default_csid, categories)))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &StoreRecord> {
        self.index.values()
    }

    /// Rewrites the log with one line per key in key order.
    pub fn compact(&mut self) -> Result<()> {
        self.flush()?;
        self.log = None;
        let path = self.path();
        let tmp = self.dir.join(format!("{RECORDS_FILE}.tmp"));
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            for rec in self.index.values() {
                writeln!(w, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&tmp, e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
            w.get_ref().sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// `key<TAB>cycle<TAB>category:score,…` lines in key order.
    pub fn export_tsv(&self) -> String {
        let mut out = String::from("key\tcycle\tcategories\n");
        for r in self.index.values() {
            let cats: Vec<String> = r.categories.iter().map(|(c, s)| format!("{c}:{s:.6}")).collect();
            out.push_str(&format!("{}\t{}\t{}\n", r.key, r.cycle, cats.join(",")));
        }
        out
    }
}

impl Drop for CategoryStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligned(items: &[(&str, f64)]) -> AlignedCategories {
        AlignedCategories {
            categories: items.iter().map(|(c, s)| (c.to_string(), *s)).collect(),
        }
    }

    #[test]
    fn key_format_and_order_invariance() {
        let csid = GroupCsid(vec![3, 1, 0, 2]);
        let a = make_key(&csid, &["Action", "Comedy"]);
        let b = make_key(&csid, &["Comedy", "Action"]);
        assert_eq!(a.csid_part, "3-1-0-2");
        assert_eq!(a, b);
        assert_eq!(a.to_string(), format!("3-1-0-2|{}", a.digest));
        assert_eq!(a.digest.len(), 16);
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    proptest::proptest! {
        #[test]
        fn fnv_matches_reference_crate(bytes in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..64)) {
            use std::hash::Hasher;
            let mut h = fnv::FnvHasher::default();
            h.write(&bytes);
            proptest::prop_assert_eq!(fnv1a64(&bytes), h.finish());
        }
    }

    #[test]
    fn put_get_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CategoryStore::open(dir.path()).unwrap();
        let key = make_key(&GroupCsid(vec![1, 2]), &["x"]);
        assert!(s.get(&key).is_none());
        s.put(&key, &aligned(&[("a", 0.9)]), 0).unwrap();
        assert_eq!(s.get(&key).unwrap().categories, vec![("a".to_string(), 0.9)]);
        s.put(&key, &aligned(&[("b", 0.6), ("c", 0.7)]), 1).unwrap();
        assert_eq!(s.get(&key).unwrap().cycle, 1);
        assert_eq!(s.len(), 1);
        drop(s);
        let s = CategoryStore::open(dir.path()).unwrap();
        assert_eq!(s.get(&key).unwrap().categories.len(), 2);
    }

    #[test]
    fn invalid_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CategoryStore::open(dir.path()).unwrap();
        let key = make_key(&GroupCsid(vec![0]), &["x"]);
        assert!(s.put(&key, &aligned(&[("a", 1.0)]), 0).is_err());
        assert!(s.put(&key, &aligned(&[("a", 0.6), ("a", 0.7)]), 0).is_err());
    }

    #[test]
    fn fallback_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CategoryStore::open(dir.path()).unwrap();
        let own = GroupCsid(vec![1]);
        let default = GroupCsid(vec![0]);
        let cats = ["p", "q"];
        s.put(&make_key(&default, &cats), &aligned(&[("d", 0.8)]), 0).unwrap();
        assert_eq!(s.lookup_with_fallback(None, &cats, &default).unwrap().categories[0].0, "d");
        assert_eq!(s.lookup_with_fallback(Some(&own), &cats, &default).unwrap().categories[0].0, "d");
        s.put(&make_key(&own, &cats), &aligned(&[("o", 0.8)]), 0).unwrap();
        assert_eq!(s.lookup_with_fallback(Some(&own), &cats, &default).unwrap().categories[0].0, "o");
        assert!(s.lookup_with_fallback(Some(&own), &["zz"], &default).is_none());
    }

    #[test]
    fn compaction_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CategoryStore::open(dir.path()).unwrap();
        for (i, c) in ["b", "a", "c", "a"].iter().enumerate() {
            s.put(&make_key(&GroupCsid(vec![i as u16 % 2]), &[*c]), &aligned(&[("z", 0.5 + 0.1 * i as f64)]), i as u64)
                .unwrap();
        }
        s.compact().unwrap();
        let first = fs::read(s.path()).unwrap();
        drop(s);
        let mut reopened = CategoryStore::open(dir.path()).unwrap();
        reopened.compact().unwrap();
        assert_eq!(first, fs::read(reopened.path()).unwrap());
        let text = String::from_utf8(first).unwrap();
        let keys: Vec<&str> = text.lines().map(|l| l.split('"').nth(3).unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
