//! Named parameter tensors, flat views, and the two optimizers used by the
//! trainable models.
//!
//! Every model exposes its tensors through [`Params`]. Gradients are stored in
//! a value of the same type, so optimizers and finite-difference checks can
//! walk parameters and gradients in lockstep through their flat views.

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

pub trait Params {
    /// Visits every tensor in a fixed order with its name and shape.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Mutable counterpart of [`Params::visit`]; must use the same order.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, _, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// A copy with every entry set to zero, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut out = self.clone();
        out.visit_mut(&mut |_, _, data| data.fill(0.0));
        out
    }

    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(&mut |_, _, data| {
            for (d, o) in data.iter_mut().zip(&flat[offset..]) {
                *d += scale * o;
            }
            offset += data.len();
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut(&mut |_, _, data| data.iter_mut().for_each(|x| *x *= k));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|x| x.is_finite()));
        ok
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, shape, data| {
            hasher.update(name.as_bytes());
            for s in shape {
                hasher.update((*s as u64).to_le_bytes());
            }
            for x in data {
                hasher.update(x.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are kept in standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameter tensors are kept in standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are kept in standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameter tensors are kept in standard layout")
}

/// Visit helpers shared by the model implementations.
pub(crate) fn visit2(f: &mut dyn FnMut(&str, &[usize], &[f64]), name: &str, a: &Array2<f64>) {
    f(name, a.shape(), slice2(a));
}

pub(crate) fn visit1(f: &mut dyn FnMut(&str, &[usize], &[f64]), name: &str, a: &Array1<f64>) {
    f(name, a.shape(), slice1(a));
}

pub(crate) fn visit2_mut(
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
    name: &str,
    a: &mut Array2<f64>,
) {
    let shape = a.shape().to_vec();
    f(name, &shape, slice2_mut(a));
}

pub(crate) fn visit1_mut(
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
    name: &str,
    a: &mut Array1<f64>,
) {
    let shape = a.shape().to_vec();
    f(name, &shape, slice1_mut(a));
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.to_flat();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        for (v, gi) in self.velocity.iter_mut().zip(&g) {
            *v = self.momentum * *v + gi;
        }
        let mut offset = 0;
        let (lr, velocity) = (self.lr, &self.velocity);
        params.visit_mut(&mut |_, _, data| {
            for (x, v) in data.iter_mut().zip(&velocity[offset..]) {
                *x -= lr * v;
            }
            offset += data.len();
        });
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.to_flat();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
        }
        let mut offset = 0;
        let (lr, eps, m, v) = (self.lr, self.eps, &self.m, &self.v);
        params.visit_mut(&mut |_, _, data| {
            for (j, x) in data.iter_mut().enumerate() {
                let i = offset + j;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += data.len();
        });
    }

    /// Clears the moment estimates for a slice of the flat parameter vector,
    /// used after a codeword is reseeded.
    pub fn reset_range(&mut self, range: std::ops::Range<usize>) {
        if self.m.len() >= range.end {
            self.m[range.clone()].fill(0.0);
            self.v[range].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair {
        a: Array2<f64>,
        b: Array1<f64>,
    }

    impl Params for Pair {
        fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            visit2(f, "a", &self.a);
            visit1(f, "b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            visit2_mut(f, "a", &mut self.a);
            visit1_mut(f, "b", &mut self.b);
        }
    }

    fn pair() -> Pair {
        Pair {
            a: Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            b: Array1::from(vec![5.0, 6.0]),
        }
    }

    #[test]
    fn flat_roundtrip_and_digest() {
        let mut p = pair();
        let flat = p.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let before = p.digest();
        p.set_flat(&flat);
        assert_eq!(before, p.digest());
        p.b[0] = 5.5;
        assert_ne!(before, p.digest());
    }

    #[test]
    fn momentum_minimizes_quadratic() {
        let mut p = pair();
        let mut opt = Momentum::new(0.1, 0.5);
        for _ in 0..200 {
            // gradient of 0.5 * |x|^2 is x
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.to_flat().iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = pair();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.to_flat().iter().all(|x| x.abs() < 1e-2));
    }
}
