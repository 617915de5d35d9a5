//! One causal self-attention layer: multi-head masked attention, output
//! projection, residual connection, and layer normalization. No feed-forward
//! sublayer.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{visit1, visit1_mut, visit2, visit2_mut};

#[derive(Debug, Clone, PartialEq)]
pub struct CsaLayer {
    /// Query/key/value projections, d × d; head h owns columns h·d_k..(h+1)·d_k.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Output projection applied to the concatenated heads.
    pub wo: Array2<f64>,
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub heads: usize,
}

/// Intermediate values kept by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, S × S, zero above the diagonal.
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl CsaLayer {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let scale = (1.0 / d as f64).sqrt();
        Ok(Self {
            wq: nn::randn2(rng, d, d, scale),
            wk: nn::randn2(rng, d, d, scale),
            wv: nn::randn2(rng, d, d, scale),
            wo: nn::randn2(rng, d, d, scale),
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LayerCache)> {
        let seq = x.nrows();
        if seq == 0 {
            return Err(Error::Shape("attention input has no rows".into()));
        }
        if x.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "attention input width {} != layer width {}",
                x.ncols(),
                self.width()
            )));
        }
        if !nn::all_finite(x.iter().copied()) {
            return Err(Error::NonFinite("attention input".into()));
        }
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut concat = Array2::zeros((seq, self.width()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut p = qh.dot(&kh.t()) * scale;
            for i in 0..seq {
                // query i attends to keys j <= i; j > i gets weight exactly 0
                let mut row = p.row_mut(i);
                let allowed = row.as_slice_mut().expect("fresh matrix");
                nn::softmax_in_place(&mut allowed[..=i]);
                allowed[i + 1..].fill(0.0);
            }
            concat.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let pre = concat.dot(&self.wo) + x;
        let (xhat, inv_std) = nn::layer_norm_rows(&pre);
        let y = &xhat * &self.gain + &self.bias;
        Ok((
            y,
            LayerCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
                xhat,
                inv_std,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward(&self, cache: &LayerCache, dy: &Array2<f64>, grads: &mut CsaLayer) -> Array2<f64> {
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        grads.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grads.bias += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gain;
        let dpre = nn::layer_norm_rows_backward(&dxhat, &cache.xhat, &cache.inv_std);

        let mut dx = dpre.clone();
        grads.wo += &cache.concat.t().dot(&dpre);
        let dconcat = dpre.dot(&self.wo.t());

        let seq = cache.x.nrows();
        let mut dq = Array2::zeros((seq, self.width()));
        let mut dkm = Array2::zeros((seq, self.width()));
        let mut dv = Array2::zeros((seq, self.width()));
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let p = &cache.probs[h];
            let dout = dconcat.slice(cols);
            let dp = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            // softmax backward, row by row
            let mut ds = Array2::zeros((seq, seq));
            for i in 0..seq {
                let dot: f64 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        grads.wq += &cache.x.t().dot(&dq);
        grads.wk += &cache.x.t().dot(&dkm);
        grads.wv += &cache.x.t().dot(&dv);
        dx += &dq.dot(&self.wq.t());
        dx += &dkm.dot(&self.wk.t());
        dx += &dv.dot(&self.wv.t());
        dx
    }

    pub(crate) fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, &format!("{prefix}.wq"), &self.wq);
        visit2(f, &format!("{prefix}.wk"), &self.wk);
        visit2(f, &format!("{prefix}.wv"), &self.wv);
        visit2(f, &format!("{prefix}.wo"), &self.wo);
        visit1(f, &format!("{prefix}.ln_gain"), &self.gain);
        visit1(f, &format!("{prefix}.ln_bias"), &self.bias);
    }

    pub(crate) fn visit_prefixed_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
    ) {
        visit2_mut(f, &format!("{prefix}.wq"), &mut self.wq);
        visit2_mut(f, &format!("{prefix}.wk"), &mut self.wk);
        visit2_mut(f, &format!("{prefix}.wv"), &mut self.wv);
        visit2_mut(f, &format!("{prefix}.wo"), &mut self.wo);
        visit1_mut(f, &format!("{prefix}.ln_gain"), &mut self.gain);
        visit1_mut(f, &format!("{prefix}.ln_bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(d: usize, heads: usize, seed: u64) -> CsaLayer {
        CsaLayer::new(d, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn singleton_sequence_attends_to_itself() {
        let l = layer(8, 4, 1);
        let x = nn::randn2(&mut ChaCha8Rng::seed_from_u64(2), 1, 8, 1.0);
        let (y, cache) = l.forward_cached(&x).unwrap();
        for p in &cache.probs {
            assert_eq!(p[[0, 0]], 1.0);
        }
        // output = LN(x Wv Wo + x)
        let pre = x.dot(&l.wv).dot(&l.wo) + &x;
        let (expected, _) = nn::layer_norm_rows(&pre);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn future_positions_get_zero_weight() {
        let l = layer(8, 2, 3);
        let x = nn::randn2(&mut ChaCha8Rng::seed_from_u64(4), 6, 8, 1.0);
        let (_, cache) = l.forward_cached(&x).unwrap();
        for p in &cache.probs {
            for i in 0..6 {
                for j in i + 1..6 {
                    assert_eq!(p[[i, j]], 0.0);
                }
                assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_keys_give_uniform_causal_weights() {
        let mut l = layer(4, 1, 5);
        // zero key projection makes every score equal
        l.wk.fill(0.0);
        let x = nn::randn2(&mut ChaCha8Rng::seed_from_u64(6), 5, 4, 1.0);
        let (_, cache) = l.forward_cached(&x).unwrap();
        let p = &cache.probs[0];
        for i in 0..5 {
            for j in 0..=i {
                assert!((p[[i, j]] - 1.0 / (i as f64 + 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perturbing_future_rows_leaves_past_unchanged() {
        let l = layer(8, 4, 7);
        let x = nn::randn2(&mut ChaCha8Rng::seed_from_u64(8), 5, 8, 1.0);
        let y = l.forward(&x).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(3).mapv_inplace(|v| v + 10.0);
        let y2 = l.forward(&x2).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), y2.row(i));
        }
        assert_ne!(y.row(3), y2.row(3));
    }

    #[test]
    fn rejects_non_finite_and_bad_heads() {
        let l = layer(4, 2, 9);
        let mut x = Array2::zeros((2, 4));
        x[[1, 1]] = f64::NAN;
        assert!(matches!(l.forward(&x), Err(Error::NonFinite(_))));
        assert!(CsaLayer::new(6, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
