//! Run configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderTrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gateway::GatewayConfig;
use crate::grouping::GroupingConfig;
use crate::ingest::{InteractionFormat, SplitPolicy};
use crate::pco::PcoConfig;
use crate::quantizer::RqVaeConfig;
use crate::synth::WorldConfig;
use crate::training::BootstrapConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Files under `ingest.data_dir` in `ingest.format`.
    Files,
    /// The bundled generator, configured by the `synthetic` section.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub source: DataSource,
    pub data_dir: PathBuf,
    pub format: InteractionFormat,
    /// Short-window length K.
    pub k_short: usize,
    /// Minimum long-window click count τ.
    pub tau: u32,
    pub split_policy: SplitPolicy,
    /// Reject the whole log on the first malformed line.
    pub strict: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Files,
            data_dir: PathBuf::from("data/ml-1m"),
            format: InteractionFormat::Movielens1m,
            k_short: 10,
            tau: 5,
            split_policy: SplitPolicy::LeaveOneOut,
            strict: true,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_short == 0 {
            return Err(Error::Config("ingest.k_short must be at least 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("ingest.tau must be at least 1".into()));
        }
        if let SplitPolicy::DayBoundaries(b) = &self.split_policy {
            if b.len() != 2 || b[0] > b[1] {
                return Err(Error::Config("ingest.split_policy.day_boundaries needs two non-decreasing offsets".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    /// Relative paths resolve against the run directory.
    pub path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("store"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub ingest: IngestConfig,
    pub synthetic: WorldConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub rqvae: RqVaeConfig,
    pub grouping: GroupingConfig,
    pub gateway: GatewayConfig,
    pub bootstrap: BootstrapConfig,
    pub pco: PcoConfig,
    pub store: StoreConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            ingest: IngestConfig::default(),
            synthetic: WorldConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            rqvae: RqVaeConfig::default(),
            grouping: GroupingConfig::default(),
            gateway: GatewayConfig::default(),
            bootstrap: BootstrapConfig::default(),
            pco: PcoConfig::default(),
            store: StoreConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Published hyperparameters on the MovieLens-1M files.
    pub fn published() -> Self {
        Self::default()
    }

    /// A small run on the bundled synthetic world.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.ingest.source = DataSource::Synthetic;
        c.ingest.format = InteractionFormat::Tsv;
        c.ingest.tau = 1;
        c.ingest.split_policy = SplitPolicy::DayBoundaries(vec![20, 23]);
        c.encoder.d = 32;
        c.encoder.layers = 2;
        c.encoder.heads = 2;
        c.rqvae.levels = 2;
        c.rqvae.codebook_size = 8;
        c.grouping.target_groups = 10;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.ingest.validate()?;
        self.synthetic.validate()?;
        self.encoder.validate()?;
        let t = &self.encoder_train;
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) || t.batch_size == 0 {
            return Err(Error::Config(
                "encoder_train needs lr > 0, momentum in [0, 1) and a positive batch size".into(),
            ));
        }
        self.rqvae.validate()?;
        self.grouping.validate()?;
        self.gateway.validate()?;
        self.bootstrap.validate()?;
        self.pco.validate()?;
        self.eval.validate()?;
        if self.store.path.as_os_str().is_empty() {
            return Err(Error::Config("store.path must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// sha256 of the serialized document.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// `store.path`, resolved against `run_dir` when relative.
    pub fn store_dir(&self, run_dir: &Path) -> PathBuf {
        if self.store.path.is_absolute() {
            self.store.path.clone()
        } else {
            run_dir.join(&self.store.path)
        }
    }
}
