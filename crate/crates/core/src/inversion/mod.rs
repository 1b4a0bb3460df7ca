//! Camera-inversion solvers: ADMM with total-variation regularization (fixed
//! or per-iteration learnable hyperparameters), FISTA, one-shot Tikhonov
//! frequency-domain inversion, and plug-and-play ADMM with a denoiser slot.

mod admm;
mod fista;
mod pnp;
mod tikhonov;

pub use admm::{
    admm100_reconstruct, admm_reconstruct, admm_run, default_params_for, matched_filter_init,
    unrolled_forward, unrolled_handles, unrolled_mse_loss, AdmmOut, KernelCx, UnrolledForward,
    UnrolledHandles, ADMM100_ITERS, DEFAULT_RHO, DEFAULT_TAU_SCALE,
};
pub use fista::{fista_reconstruct, power_iteration_lipschitz, tv_prox, DEFAULT_TV_INNER_ITERS};
pub use pnp::{pnp_reconstruct, PNP_DEFAULT_ITERS};
pub use tikhonov::{tikhonov_apply_padded, tikhonov_forward, tikhonov_reconstruct};

use crate::autodiff::{softplus_inv, softplus_val};
use crate::error::{CoreError, Result};
use crate::field::RField;
use crate::tensor::Tensor3;

/// Per-iteration positive hyperparameters of the unrolled ADMM, stored as
/// unconstrained reals and mapped through softplus.
///
/// Flat layout (4 * n_iter values): `[rho_x | rho_y | rho_z | tau]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledParams {
    pub n_iter: usize,
    pub raw_rho_x: Vec<f64>,
    pub raw_rho_y: Vec<f64>,
    pub raw_rho_z: Vec<f64>,
    pub raw_tau: Vec<f64>,
}

impl UnrolledParams {
    /// Same positive targets at every iteration (softplus-inverted).
    /// Targets are clamped away from zero so the mapping stays finite.
    pub fn uniform(n_iter: usize, rho_x: f64, rho_y: f64, rho_z: f64, tau: f64) -> Self {
        let raw = |v: f64| softplus_inv(v.max(1e-300));
        UnrolledParams {
            n_iter,
            raw_rho_x: vec![raw(rho_x); n_iter],
            raw_rho_y: vec![raw(rho_y); n_iter],
            raw_rho_z: vec![raw(rho_z); n_iter],
            raw_tau: vec![raw(tau); n_iter],
        }
    }

    /// 4 learnable values per iteration.
    pub fn param_count(&self) -> usize {
        4 * self.n_iter
    }

    /// Flat `[rho_x | rho_y | rho_z | tau]` compute field (1 x 4n x 1).
    pub fn to_field(&self) -> RField {
        let mut data = Vec::with_capacity(4 * self.n_iter);
        data.extend_from_slice(&self.raw_rho_x);
        data.extend_from_slice(&self.raw_rho_y);
        data.extend_from_slice(&self.raw_rho_z);
        data.extend_from_slice(&self.raw_tau);
        RField { h: 1, w: 4 * self.n_iter, c: 1, data }
    }

    pub fn from_flat(n_iter: usize, data: &[f64]) -> Result<Self> {
        if data.len() != 4 * n_iter {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} raw values, got {}",
                4 * n_iter,
                data.len()
            )));
        }
        Ok(UnrolledParams {
            n_iter,
            raw_rho_x: data[0..n_iter].to_vec(),
            raw_rho_y: data[n_iter..2 * n_iter].to_vec(),
            raw_rho_z: data[2 * n_iter..3 * n_iter].to_vec(),
            raw_tau: data[3 * n_iter..].to_vec(),
        })
    }

    /// Positive hyperparameter values at iteration `i`.
    pub fn values_at(&self, i: usize) -> (f64, f64, f64, f64) {
        (
            softplus_val(self.raw_rho_x[i]),
            softplus_val(self.raw_rho_y[i]),
            softplus_val(self.raw_rho_z[i]),
            softplus_val(self.raw_tau[i]),
        )
    }
}

/// Per-iteration solver diagnostics; every vector has `n_iter` entries.
#[derive(Clone, Debug, Default)]
pub struct SolverTrace {
    /// Primal residual norms of the three splits (convolution, TV, window).
    pub res_v: Vec<f64>,
    pub res_u: Vec<f64>,
    pub res_w: Vec<f64>,
    /// 0.5 * ||y - crop(P x)||^2 per iteration.
    pub data_fidelity: Vec<f64>,
    /// Data fidelity plus tau * ||psi x||_1.
    pub objective: Vec<f64>,
    pub iter_seconds: Vec<f64>,
}

impl SolverTrace {
    pub fn with_capacity(n: usize) -> Self {
        SolverTrace {
            res_v: Vec::with_capacity(n),
            res_u: Vec::with_capacity(n),
            res_w: Vec::with_capacity(n),
            data_fidelity: Vec::with_capacity(n),
            objective: Vec::with_capacity(n),
            iter_seconds: Vec::with_capacity(n),
        }
    }
}

/// Elementwise `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: &Tensor3, t: f32) -> Result<Tensor3> {
    if t < 0.0 {
        return Err(CoreError::InvalidArgument(format!("threshold {t} must be >= 0")));
    }
    Ok(v.map(|x| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_examples() {
        let v = Tensor3::from_vec(1, 2, 1, vec![1.2, -0.3]).unwrap();
        let out = soft_threshold(&v, 0.5).unwrap();
        assert!((out.get(0, 0, 0) - 0.7).abs() < 1e-7);
        assert_eq!(out.get(0, 1, 0), 0.0);
        assert!(soft_threshold(&v, -0.1).is_err());
    }

    #[test]
    fn soft_threshold_minimizes_scalar_prox_objective() {
        // Dense grid search oracle for t|u| + 0.5 (u - v)^2 per element.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: f32 = rng.gen_range(-2.0..2.0);
            let t: f32 = rng.gen_range(0.0..1.5);
            let got = soft_threshold(&Tensor3::from_vec(1, 1, 1, vec![v]).unwrap(), t)
                .unwrap()
                .get(0, 0, 0);
            let objective = |u: f32| t * u.abs() + 0.5 * (u - v) * (u - v);
            let mut best = f32::INFINITY;
            let mut best_u = 0.0;
            let mut u = -2.5f32;
            while u <= 2.5 {
                let o = objective(u);
                if o < best {
                    best = o;
                    best_u = u;
                }
                u += 1e-3;
            }
            assert!((got - best_u).abs() < 2e-3, "v={v} t={t}: got {got}, grid {best_u}");
        }
    }

    #[test]
    fn softplus_mapping_is_always_positive() {
        for raw in [-700.0, -10.0, -1.0, 0.0, 3.0, 80.0] {
            assert!(softplus_val(raw) >= 0.0);
        }
        let p = UnrolledParams::uniform(5, 1e-4, 1e-4, 1e-4, 1e-6);
        assert_eq!(p.param_count(), 20);
        for i in 0..5 {
            let (a, b, c, t) = p.values_at(i);
            assert!((a - 1e-4).abs() < 1e-12 && (b - 1e-4).abs() < 1e-12);
            assert!((c - 1e-4).abs() < 1e-12 && (t - 1e-6).abs() < 1e-14);
        }
        let flat = p.to_field();
        let back = UnrolledParams::from_flat(5, &flat.data).unwrap();
        assert_eq!(p, back);
    }
}
