//! Long-term interest encoder: a sparse-attribute token prepended to the
//! filtered long-term item sequence, passed through stacked causal
//! self-attention layers. The final row of the last layer is the user's
//! long-term representation.

mod attention;
mod train;

pub use attention::{CsaLayer, LayerCache};
pub use train::{
    batch_loss_and_grad, train_encoder, EncoderTrainConfig, EncoderTrainReport, TrainingSequence,
};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ingest::{FilteredLongSequence, ItemId, UserAttributes, UserId, AGE_BUCKETS, GENDERS, OCCUPATIONS};
use crate::nn;
use crate::params::{visit2, visit2_mut, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Model width d.
    pub d: usize,
    /// Number of attention layers L.
    pub layers: usize,
    pub heads: usize,
    /// Longest item sequence kept (most recent items win); the position
    /// table has `max_len + 1` rows.
    pub max_len: usize,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            max_len: 50,
            init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.d = {} is not divisible by encoder.heads = {}",
                self.d, self.heads
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("encoder.init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Dense item indices for the embedding table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemVocab {
    items: Vec<ItemId>,
    #[serde(skip)]
    index: BTreeMap<ItemId, usize>,
}

impl ItemVocab {
    pub fn new(items: impl IntoIterator<Item = ItemId>) -> Self {
        let mut items: Vec<ItemId> = items.into_iter().collect();
        items.sort();
        items.dedup();
        let index = items.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Self { items, index }
    }

    fn rebuild_index(&mut self) {
        self.index = self.items.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index(&self, item: &ItemId) -> Result<usize> {
        self.index
            .get(item)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(item.to_string()))
    }

    pub fn item(&self, index: usize) -> &ItemId {
        &self.items[index]
    }
}

/// Item, position, and sparse-attribute embeddings. Item embeddings are
/// stored one row per item and double as the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub items: Array2<f64>,
    pub positions: Array2<f64>,
    pub age: Array2<f64>,
    pub gender: Array2<f64>,
    pub occupation: Array2<f64>,
}

/// Categorical sparse attributes as embedding-row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseIndices {
    pub age: usize,
    pub gender: usize,
    pub occupation: usize,
}

impl From<&UserAttributes> for SparseIndices {
    fn from(a: &UserAttributes) -> Self {
        Self {
            age: (a.age_bucket as usize).min(AGE_BUCKETS - 1),
            gender: a.gender.index(),
            occupation: (a.occupation as usize).min(OCCUPATIONS - 1),
        }
    }
}

impl EmbeddingTable {
    pub fn sparse_vector(&self, s: SparseIndices) -> Array1<f64> {
        &self.age.row(s.age) + &self.gender.row(s.gender) + self.occupation.row(s.occupation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub table: EmbeddingTable,
    pub layers: Vec<CsaLayer>,
}

impl Params for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "emb.items", &self.table.items);
        visit2(f, "emb.positions", &self.table.positions);
        visit2(f, "emb.age", &self.table.age);
        visit2(f, "emb.gender", &self.table.gender);
        visit2(f, "emb.occupation", &self.table.occupation);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_prefixed(&format!("layers.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(f, "emb.items", &mut self.table.items);
        visit2_mut(f, "emb.positions", &mut self.table.positions);
        visit2_mut(f, "emb.age", &mut self.table.age);
        visit2_mut(f, "emb.gender", &mut self.table.gender);
        visit2_mut(f, "emb.occupation", &mut self.table.occupation);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_prefixed_mut(&format!("layers.{i}"), f);
        }
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, n_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let s = config.init_scale;
        let table = EmbeddingTable {
            items: nn::randn2(&mut rng, n_items, d, s),
            positions: nn::randn2(&mut rng, config.max_len + 1, d, s),
            age: nn::randn2(&mut rng, AGE_BUCKETS, d, s),
            gender: nn::randn2(&mut rng, GENDERS, d, s),
            occupation: nn::randn2(&mut rng, OCCUPATIONS, d, s),
        };
        let layers = (0..config.layers)
            .map(|_| CsaLayer::new(d, config.heads, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { table, layers })
    }

    pub fn width(&self) -> usize {
        self.table.items.ncols()
    }

    pub fn max_len(&self) -> usize {
        self.table.positions.nrows() - 1
    }

    /// Rows `[sparse, item_1, …, item_T]` plus their positional embeddings.
    pub fn embed_indices(&self, items: &[usize], sparse: SparseIndices) -> Result<Array2<f64>> {
        if items.len() > self.max_len() {
            return Err(Error::Shape(format!(
                "{} items exceed the position table ({})",
                items.len(),
                self.max_len()
            )));
        }
        let d = self.width();
        let mut rows = Array2::zeros((items.len() + 1, d));
        rows.row_mut(0)
            .assign(&(self.table.sparse_vector(sparse) + self.table.positions.row(0)));
        for (t, &item) in items.iter().enumerate() {
            if item >= self.table.items.nrows() {
                return Err(Error::OutOfVocabulary(format!("index {item}")));
            }
            rows.row_mut(t + 1)
                .assign(&(&self.table.items.row(item) + &self.table.positions.row(t + 1)));
        }
        Ok(rows)
    }

    /// Runs all layers and returns the last layer's output.
    pub fn forward(&self, h0: Array2<f64>) -> Result<Array2<f64>> {
        self.layers.iter().try_fold(h0, |h, layer| layer.forward(&h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTermRepresentation {
    pub user_id: UserId,
    pub vector: Vec<f64>,
}

/// Encoder parameters together with their configuration and item vocabulary.
#[derive(Debug, Clone)]
pub struct LongTermEncoder {
    pub config: EncoderConfig,
    pub vocab: ItemVocab,
    pub params: EncoderParams,
}

impl LongTermEncoder {
    pub fn new(config: EncoderConfig, vocab: ItemVocab, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&config, vocab.len(), seed)?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    /// Item indices for the most recent `max_len` filtered items.
    pub fn item_indices(&self, filtered: &FilteredLongSequence) -> Result<Vec<usize>> {
        let start = filtered.items.len().saturating_sub(self.config.max_len);
        filtered.items[start..]
            .iter()
            .map(|i| self.vocab.index(i))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("vocab".into(), serde_json::to_value(&self.vocab)?);
        Checkpoint::from_params("encoder", meta, &self.params).save(path)
    }

    /// Loads a checkpoint and checks it against `expected` when given.
    pub fn load(path: &Path, expected: Option<&EncoderConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("encoder")?;
        let config: EncoderConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("encoder config missing".into()))?,
        )?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(format!(
                    "encoder checkpoint was trained with {config:?}, configuration asks for {exp:?}"
                )));
            }
        }
        let mut vocab: ItemVocab = serde_json::from_value(
            ck.meta
                .get("vocab")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("item vocabulary missing".into()))?,
        )?;
        vocab.rebuild_index();
        let mut params = EncoderParams::init(&config, vocab.len(), 0)?;
        ck.load_into(&mut params)?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }
}

/// Builds the (T+1) × d input matrix for a user.
pub fn embed_sequence(
    filtered: &FilteredLongSequence,
    attrs: &UserAttributes,
    encoder: &LongTermEncoder,
) -> Result<Array2<f64>> {
    let items = encoder.item_indices(filtered)?;
    encoder.params.embed_indices(&items, attrs.into())
}

pub fn causal_attention_forward(h: &Array2<f64>, layer: &CsaLayer) -> Result<Array2<f64>> {
    layer.forward(h)
}

/// The last row of the final layer: the last item, or the sparse token when
/// the filtered sequence is empty.
pub fn encode_long_term(
    filtered: &FilteredLongSequence,
    attrs: &UserAttributes,
    encoder: &LongTermEncoder,
) -> Result<LongTermRepresentation> {
    let h0 = embed_sequence(filtered, attrs, encoder)?;
    let h = encoder.params.forward(h0)?;
    let last = h.row(h.nrows() - 1);
    if !nn::all_finite(last.iter().copied()) {
        return Err(Error::NonFinite(format!("representation of user {}", filtered.user_id)));
    }
    Ok(LongTermRepresentation {
        user_id: filtered.user_id.clone(),
        vector: last.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Gender;

    fn encoder(d: usize, layers: usize, heads: usize, n_items: usize) -> LongTermEncoder {
        let cfg = EncoderConfig {
            d,
            layers,
            heads,
            max_len: 6,
            init_scale: 0.5,
        };
        let vocab = ItemVocab::new((0..n_items).map(|i| ItemId::new(format!("i{i}"))));
        LongTermEncoder::new(cfg, vocab, 11).unwrap()
    }

    fn attrs() -> UserAttributes {
        UserAttributes {
            user_id: "u".into(),
            age_bucket: 2,
            gender: Gender::Female,
            occupation: 4,
        }
    }

    fn filtered(items: &[&str]) -> FilteredLongSequence {
        FilteredLongSequence {
            user_id: "u".into(),
            items: items.iter().map(|i| ItemId::from(*i)).collect(),
        }
    }

    #[test]
    fn embedding_selects_item_rows() {
        let enc = encoder(8, 1, 4, 5);
        let idx = enc.vocab.index(&"i3".into()).unwrap();
        let m = embed_sequence(&filtered(&["i3"]), &attrs(), &enc).unwrap();
        let expected = &enc.params.table.items.row(idx) + &enc.params.table.positions.row(1);
        assert_eq!(m.row(1), expected);
        let sparse = enc.params.table.sparse_vector((&attrs()).into()) + enc.params.table.positions.row(0);
        assert_eq!(m.row(0), sparse);
    }

    #[test]
    fn embedding_shapes() {
        let enc = encoder(8, 1, 4, 5);
        assert_eq!(embed_sequence(&filtered(&[]), &attrs(), &enc).unwrap().nrows(), 1);
        assert_eq!(embed_sequence(&filtered(&["i1", "i2"]), &attrs(), &enc).unwrap().nrows(), 3);
        assert!(matches!(
            embed_sequence(&filtered(&["nope"]), &attrs(), &enc),
            Err(Error::OutOfVocabulary(_))
        ));
    }

    #[test]
    fn single_token_path() {
        let enc = encoder(8, 1, 4, 5);
        let rep = encode_long_term(&filtered(&[]), &attrs(), &enc).unwrap();
        let x = embed_sequence(&filtered(&[]), &attrs(), &enc).unwrap();
        let layer = &enc.params.layers[0];
        let pre = x.dot(&layer.wv).dot(&layer.wo) + &x;
        let (xhat, _) = nn::layer_norm_rows(&pre);
        for (a, b) in rep.vector.iter().zip(xhat.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let enc = encoder(16, 2, 4, 6);
        let a = encode_long_term(&filtered(&["i1", "i2", "i3"]), &attrs(), &enc).unwrap();
        let b = encode_long_term(&filtered(&["i1", "i2", "i3"]), &attrs(), &enc).unwrap();
        assert_eq!(a, b);
        let c = encode_long_term(&filtered(&["i2", "i1", "i3"]), &attrs(), &enc).unwrap();
        let diff: f64 = a.vector.iter().zip(&c.vector).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn representation_width_is_constant() {
        let enc = encoder(8, 2, 2, 8);
        for t in 0..=8 {
            let names: Vec<String> = (0..t).map(|i| format!("i{}", i % 8)).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let rep = encode_long_term(&filtered(&refs), &attrs(), &enc).unwrap();
            assert_eq!(rep.vector.len(), 8);
        }
    }

    #[test]
    fn checkpoint_roundtrip_validates_config() {
        let enc = encoder(8, 1, 4, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        enc.save(&path).unwrap();
        let back = LongTermEncoder::load(&path, Some(&enc.config)).unwrap();
        assert_eq!(back.params, enc.params);
        assert_eq!(back.vocab.index(&"i4".into()).unwrap(), enc.vocab.index(&"i4".into()).unwrap());
        let mut other = enc.config.clone();
        other.d = 16;
        assert!(LongTermEncoder::load(&path, Some(&other)).is_err());
    }
}
