//! Small numeric kernels shared by the models: stable softmax and logistic
//! functions, layer normalization, cosine similarity, and seeded init.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ln σ(x).
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Row-wise layer normalization without the affine part.
/// Returns the normalized rows and each row's inverse standard deviation.
pub fn layer_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = inv;
        for (j, v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * inv;
        }
    }
    (xhat, inv_std)
}

/// Backward pass of [`layer_norm_rows`] given the gradient w.r.t. `xhat`.
pub fn layer_norm_rows_backward(
    dxhat: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
) -> Array2<f64> {
    let d = xhat.ncols() as f64;
    let mut dx = Array2::zeros(xhat.raw_dim());
    for i in 0..xhat.nrows() {
        let g = dxhat.row(i);
        let h = xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gh = g.dot(&h) / d;
        for j in 0..xhat.ncols() {
            dx[[i, j]] = inv_std[i] * (g[j] - mean_g - h[j] * mean_gh);
        }
    }
    dx
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn randn1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// xᵀM, visiting only the non-zero entries of x.
pub fn sparse_vec_mat(x: &Array1<f64>, m: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            out.scaled_add(xi, &m.row(i));
        }
    }
    out
}

pub fn all_finite(xs: impl IntoIterator<Item = f64>) -> bool {
    xs.into_iter().all(f64::is_finite)
}

#[cfg(test)]
mod tests {
    #[test]
    fn sparse_product_matches_dense() {
        let x = ndarray::array![0.0, 2.0, 0.0, -1.0];
        let m = ndarray::Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.5);
        assert_eq!(super::sparse_vec_mat(&x, &m), x.dot(&m));
    }

    use super::*;
    use ndarray::array;

    #[test]
    fn logistic_identities() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        assert!((softplus(-2.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut xs = vec![1000.0, 1000.0, 999.0];
        softmax_in_place(&mut xs);
        assert!((xs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ls = log_softmax(&[0.0, 0.0]);
        assert!((ls[0] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.5, 0.25, 8.0]];
        let (xhat, _) = layer_norm_rows(&x);
        for row in xhat.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        let a = array![1.0, 2.0];
        let b = array![-1.0, -2.0];
        assert!((cosine(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(a.view(), b.view()).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(a.view(), array![0.0, 0.0].view()).is_none());
    }
}
