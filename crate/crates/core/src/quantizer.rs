//! RQ-VAE over long-term representations: an MLP encoder into a latent
//! space, multi-level residual quantization, and an MLP decoder back to the
//! representation space. The codeword indices form a user's group ID.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{visit1, visit1_mut, visit2, visit2_mut, Adam, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RqVaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Number of quantization levels (CSID arity).
    pub levels: usize,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub init_scale: f64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 64,
            levels: 4,
            codebook_size: 16,
            beta_commit: 0.25,
            lr: 3e-3,
            steps: 500,
            batch_size: 64,
            init_scale: 0.1,
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("rqvae.levels must be at least 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("rqvae.codebook_size must be at least 2".into()));
        }
        if self.codebook_size > u16::MAX as usize {
            return Err(Error::Config("rqvae.codebook_size is too large".into()));
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("rqvae dimensions must be positive".into()));
        }
        if !(self.beta_commit >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config("rqvae.beta_commit and rqvae.lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear → ReLU → Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: nn::randn2(rng, input, hidden, scale),
            b1: Array1::zeros(hidden),
            w2: nn::randn2(rng, hidden, output, scale),
            b2: Array1::zeros(output),
        }
    }

    /// relu(x) − relu(−x) = x with a hidden width of 2·dim.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Array2::zeros((dim, 2 * dim));
        let mut w2 = Array2::zeros((2 * dim, dim));
        for i in 0..dim {
            w1[[i, i]] = 1.0;
            w1[[i, dim + i]] = -1.0;
            w2[[i, i]] = 1.0;
            w2[[dim + i, i]] = -1.0;
        }
        Self {
            w1,
            b1: Array1::zeros(2 * dim),
            w2,
            b2: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Row-wise forward; also returns the post-ReLU hidden activations.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2) + &self.b2;
        (out, hidden)
    }

    pub fn forward_one(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        hidden.dot(&self.w2) + &self.b2
    }

    fn backward(&self, x: &Array2<f64>, hidden: &Array2<f64>, dout: &Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        grads.w2 += &hidden.t().dot(dout);
        grads.b2 += &dout.sum_axis(Axis(0));
        let mut dh = dout.dot(&self.w2.t());
        dh.zip_mut_with(hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        grads.w1 += &x.t().dot(&dh);
        grads.b1 += &dh.sum_axis(Axis(0));
        dh.dot(&self.w1.t())
    }

    fn visit_prefixed(&self, p: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, &format!("{p}.w1"), &self.w1);
        visit1(f, &format!("{p}.b1"), &self.b1);
        visit2(f, &format!("{p}.w2"), &self.w2);
        visit1(f, &format!("{p}.b2"), &self.b2);
    }

    fn visit_prefixed_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(f, &format!("{p}.w1"), &mut self.w1);
        visit1_mut(f, &format!("{p}.b1"), &mut self.b1);
        visit2_mut(f, &format!("{p}.w2"), &mut self.w2);
        visit1_mut(f, &format!("{p}.b2"), &mut self.b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// One `codebook_size × latent_dim` matrix per level.
    pub codebooks: Vec<Array2<f64>>,
}

impl Params for RqVaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit_prefixed("encoder", f);
        self.decoder.visit_prefixed("decoder", f);
        for (k, cb) in self.codebooks.iter().enumerate() {
            visit2(f, &format!("codebook.{k}"), cb);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_prefixed_mut("encoder", f);
        self.decoder.visit_prefixed_mut("decoder", f);
        for (k, cb) in self.codebooks.iter_mut().enumerate() {
            visit2_mut(f, &format!("codebook.{k}"), cb);
        }
    }
}

impl RqVaeParams {
    /// Random encoder/decoder and zero codebooks; codebooks are seeded from
    /// data by [`train_rqvae`].
    pub fn init(config: &RqVaeConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.init_scale;
        Ok(Self {
            encoder: Mlp::new(input_dim, config.hidden, config.latent_dim, scale, &mut rng),
            decoder: Mlp::new(config.latent_dim, config.hidden, input_dim, scale, &mut rng),
            codebooks: vec![Array2::zeros((config.codebook_size, config.latent_dim)); config.levels],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Flat offset of the first codebook entry, in [`Params`] order.
    fn codebook_offset(&self, level: usize) -> usize {
        let mut offset = 0;
        let mut found = None;
        let target = format!("codebook.{level}");
        self.visit(&mut |name, _, data| {
            if name == target {
                found.get_or_insert(offset);
            }
            offset += data.len();
        });
        found.expect("codebook level exists")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// Sum of the selected codewords.
    pub quantized: Array1<f64>,
    /// `residuals[0] = z`, `residuals[k + 1] = residuals[k] − q_k`.
    pub residuals: Vec<Array1<f64>>,
}

/// Codeword indices of one user, ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct GroupCsid(pub Vec<u16>);

impl GroupCsid {
    pub fn from_indices(indices: &[usize]) -> Self {
        Self(indices.iter().map(|&i| i as u16).collect())
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for GroupCsid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for GroupCsid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .trim()
            .split('-')
            .map(|p| p.parse::<u16>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("malformed CSID `{s}`")))?;
        if parts.is_empty() {
            return Err(Error::Config("empty CSID".into()));
        }
        Ok(Self(parts))
    }
}

impl From<GroupCsid> for String {
    fn from(c: GroupCsid) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for GroupCsid {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

fn nearest(codebook: &Array2<f64>, r: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in codebook.axis_iter(Axis(0)).enumerate() {
        let d: f64 = c.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        // strict < keeps the lowest index on ties
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Greedy residual quantization, one nearest codeword per level.
pub fn residual_quantize(z: ArrayView1<f64>, codebooks: &[Array2<f64>]) -> QuantizationResult {
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    residuals.push(z.to_owned());
    let mut indices = Vec::with_capacity(codebooks.len());
    let mut quantized = Array1::zeros(z.len());
    for cb in codebooks {
        let r = residuals.last().expect("non-empty");
        let j = nearest(cb, r.view());
        let q = cb.row(j);
        let next = r - &q;
        quantized += &q;
        indices.push(j);
        residuals.push(next);
    }
    QuantizationResult {
        indices,
        quantized,
        residuals,
    }
}

/// Encodes, quantizes, and decodes one representation.
pub fn rqvae_forward(u: ArrayView1<f64>, params: &RqVaeParams) -> (Array1<f64>, QuantizationResult) {
    let z = params.encoder.forward_one(u);
    let q = residual_quantize(z.view(), &params.codebooks);
    let recon = params.decoder.forward_one(q.quantized.view());
    (recon, q)
}

pub fn assign_csid(u: ArrayView1<f64>, params: &RqVaeParams) -> GroupCsid {
    let z = params.encoder.forward_one(u);
    GroupCsid::from_indices(&residual_quantize(z.view(), &params.codebooks).indices)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

/// Mean loss over `batch` (rows are representations) and its
/// straight-through gradient. Also returns, per level, which codewords were
/// selected.
pub fn rqvae_loss_grad(
    params: &RqVaeParams,
    batch: &Array2<f64>,
    beta: f64,
) -> (LossParts, RqVaeParams, Vec<Vec<usize>>) {
    let n = batch.nrows() as f64;
    let (z, enc_hidden) = params.encoder.forward(batch);
    let quant: Vec<QuantizationResult> = (0..z.nrows())
        .into_par_iter()
        .map(|i| residual_quantize(z.row(i), &params.codebooks))
        .collect();
    let mut zq = Array2::zeros(z.raw_dim());
    for (i, q) in quant.iter().enumerate() {
        zq.row_mut(i).assign(&q.quantized);
    }
    let (recon, dec_hidden) = params.decoder.forward(&zq);

    let mut grads = params.zeros_like();
    let diff = &recon - batch;
    let reconstruction = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let drecon = diff * (2.0 / n);
    // straight-through: the decoder-input gradient passes to z unchanged
    let mut dz = params.decoder.backward(&zq, &dec_hidden, &drecon, &mut grads.decoder);

    let mut sq = 0.0;
    let mut used = vec![Vec::with_capacity(batch.nrows()); params.codebooks.len()];
    for (i, q) in quant.iter().enumerate() {
        for (k, &j) in q.indices.iter().enumerate() {
            let code = params.codebooks[k].row(j);
            let d = &q.residuals[k] - &code;
            sq += d.iter().map(|v| v * v).sum::<f64>();
            grads.codebooks[k].row_mut(j).scaled_add(-2.0 / n, &d);
            dz.row_mut(i).scaled_add(2.0 * beta / n, &d);
            used[k].push(j);
        }
    }
    params.encoder.backward(batch, &enc_hidden, &dz, &mut grads.encoder);
    (
        LossParts {
            reconstruction,
            codebook: sq / n,
            commitment: beta * sq / n,
        },
        grads,
        used,
    )
}

/// Loss of one representation with the codeword choices, the decoder-input
/// offset ẑ − z, and the stop-gradient residuals all taken from `frozen`.
/// Its exact gradient is the straight-through gradient at the point where
/// `frozen` was computed.
pub fn straight_through_loss(params: &RqVaeParams, u: ArrayView1<f64>, frozen: &QuantizationResult, beta: f64) -> f64 {
    let z = params.encoder.forward_one(u);
    let offset = &frozen.quantized - &frozen.residuals[0];
    let recon = params.decoder.forward_one((&z + &offset).view());
    let mut loss: f64 = recon.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    for (k, &j) in frozen.indices.iter().enumerate() {
        let code = params.codebooks[k].row(j);
        let r = &frozen.residuals[k];
        loss += r.iter().zip(code.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        // live residual against the frozen codeword: z − Σ_{j≤k} q_j
        let live = &z - &(&frozen.residuals[0] - &frozen.residuals[k + 1]);
        loss += beta * live.iter().map(|v| v * v).sum::<f64>();
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeTrainReport {
    pub loss_trace: Vec<f64>,
    pub reconstruction_trace: Vec<f64>,
    pub reseeded_codewords: usize,
}

fn stack(rows: &[ArrayView1<f64>]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

/// Level-by-level codebook seeding: level k draws `codebook_size` distinct
/// samples' residuals after quantizing with levels < k.
fn seed_codebooks(params: &mut RqVaeParams, data: &Array2<f64>, rng: &mut ChaCha8Rng) {
    let (z, _) = params.encoder.forward(data);
    let mut residual = z;
    let size = params.codebooks[0].nrows();
    for k in 0..params.codebooks.len() {
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        order.shuffle(rng);
        for (j, &i) in order.iter().take(size).enumerate() {
            params.codebooks[k].row_mut(j).assign(&residual.row(i));
        }
        for mut row in residual.axis_iter_mut(Axis(0)) {
            let j = nearest(&params.codebooks[k], row.view());
            row -= &params.codebooks[k].row(j);
        }
    }
}

/// Trains with Adam on seeded mini-batches. After every pass over the data,
/// codewords that were never selected are moved onto a random sample's
/// residual at their level.
pub fn train_rqvae(
    params: &mut RqVaeParams,
    data: &[ArrayView1<f64>],
    config: &RqVaeConfig,
    seed: u64,
) -> Result<RqVaeTrainReport> {
    config.validate()?;
    if data.len() < config.codebook_size {
        return Err(Error::InsufficientSamples {
            needed: config.codebook_size,
            got: data.len(),
        });
    }
    let all = stack(data);
    if !nn::all_finite(all.iter().copied()) {
        return Err(Error::NonFinite("quantizer training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seed_codebooks(params, &all, &mut rng);

    let batch_size = config.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch_size);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(config.lr);
    let mut usage = vec![vec![false; config.codebook_size]; config.levels];
    let mut report = RqVaeTrainReport {
        loss_trace: Vec::with_capacity(config.steps),
        reconstruction_trace: Vec::with_capacity(config.steps),
        reseeded_codewords: 0,
    };
    for step in 0..config.steps {
        let mut rows = Vec::with_capacity(batch_size);
        while rows.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(data[order[cursor]]);
            cursor += 1;
        }
        let batch = stack(&rows);
        let (parts, grads, used) = rqvae_loss_grad(params, &batch, config.beta_commit);
        if !parts.total().is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite("quantizer training step".into()));
        }
        for (k, js) in used.iter().enumerate() {
            for &j in js {
                usage[k][j] = true;
            }
        }
        opt.step(params, &grads);
        report.loss_trace.push(parts.total());
        report.reconstruction_trace.push(parts.reconstruction);

        if (step + 1) % steps_per_epoch == 0 {
            report.reseeded_codewords += reseed_dead(params, &all, &usage, &mut opt, &mut rng);
            for u in &mut usage {
                u.fill(false);
            }
        }
    }
    Ok(report)
}

fn reseed_dead(
    params: &mut RqVaeParams,
    data: &Array2<f64>,
    usage: &[Vec<bool>],
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> usize {
    if usage.iter().all(|u| u.iter().all(|&x| x)) {
        return 0;
    }
    let (z, _) = params.encoder.forward(data);
    let mut residual = z;
    let dim = params.latent_dim();
    let mut count = 0;
    for k in 0..params.codebooks.len() {
        let offset = params.codebook_offset(k);
        for (j, &alive) in usage[k].iter().enumerate() {
            if !alive {
                // draw a sample with probability proportional to its squared
                // distance from the current codebook
                let weights: Vec<f64> = residual
                    .axis_iter(Axis(0))
                    .map(|r| {
                        let c = nearest(&params.codebooks[k], r);
                        (&r - &params.codebooks[k].row(c)).mapv(|v| v * v).sum()
                    })
                    .collect();
                let i = match WeightedIndex::new(&weights) {
                    Ok(dist) => dist.sample(rng),
                    Err(_) => rng.random_range(0..data.nrows()),
                };
                params.codebooks[k].row_mut(j).assign(&residual.row(i));
                opt.reset_range(offset + j * dim..offset + (j + 1) * dim);
                count += 1;
            }
        }
        for mut row in residual.axis_iter_mut(Axis(0)) {
            let j = nearest(&params.codebooks[k], row.view());
            row -= &params.codebooks[k].row(j);
        }
    }
    count
}

/// Trained quantizer with the configuration it was built from.
#[derive(Debug, Clone)]
pub struct RqVaeModel {
    pub config: RqVaeConfig,
    pub params: RqVaeParams,
}

impl RqVaeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("input_dim".into(), self.params.input_dim().into());
        Checkpoint::from_params("rqvae", meta, &self.params).save(path)
    }

    pub fn load(path: &Path, expected: Option<&RqVaeConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("rqvae")?;
        let config: RqVaeConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("rqvae config missing".into()))?,
        )?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(format!(
                    "rqvae checkpoint was trained with {config:?}, configuration asks for {exp:?}"
                )));
            }
        }
        let mut params = RqVaeParams::init(&config, ck.meta_usize("input_dim")?, 0)?;
        ck.load_into(&mut params)?;
        Ok(Self { config, params })
    }
}
