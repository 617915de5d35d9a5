#![allow(dead_code)]

pub mod gradcheck;

use coea_core::params::Params;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between an analytic gradient and central
/// differences of `loss` around `params`.
pub fn max_rel_error<P, F>(params: &P, analytic: &P, mut loss: F) -> f64
where
    P: Params + Clone,
    F: FnMut(&P) -> f64,
{
    let base = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + FD_STEP;
        probe.set_flat(&x);
        let up = loss(&probe);
        x[i] = base[i] - FD_STEP;
        probe.set_flat(&x);
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(err);
    }
    worst
}
