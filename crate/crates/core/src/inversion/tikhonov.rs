//! One-shot Tikhonov (regularized inverse-filter) reconstruction:
//! `x = crop(F^-1[ conj(T) F(C^T y) / (|T|^2 + eps) ])` per channel, negatives
//! clamped on output. Differentiable in both `eps` and the PSF.

use crate::autodiff::{Cx, Eval};
use crate::error::{CoreError, Result};
use crate::field::{self, RField};
use crate::operators::FrequencyKernel;
use crate::tensor::Tensor3;

use super::admm::KernelCx;

/// Context-generic Tikhonov solve returning the non-negative sensor estimate.
pub fn tikhonov_forward<C: Cx>(cx: &mut C, kernel: &KernelCx<C>, y: &C::R, eps: &C::S) -> C::R {
    let geom = kernel.geom;
    let y_pad = cx.pad(y, geom);
    let spec = cx.fft2(&y_pad);
    let num = cx.mul_t(&spec, &kernel.transfer, true);
    let den = {
        let shape = (geom.padded_h, geom.padded_w, kernel.channels);
        let epsf = cx.broadcast_s(eps, shape);
        cx.add(&kernel.abs2, &epsf)
    };
    let rden = cx.recip(&den);
    let sol = cx.cmul_real(&num, &rden);
    let full = cx.ifft2_re(&sol);
    let cropped = cx.crop(&full, geom);
    cx.relu(&cropped)
}

/// Applies the regularized inverse on the full padded grid without cropping
/// (circular-model test hook).
pub fn tikhonov_apply_padded(v: &RField, kernel: &FrequencyKernel, eps: f64) -> RField {
    let plan = kernel.fft().clone();
    let spec = field::fft2(&plan, v);
    let num = field::mul_transfer(&spec, kernel.transfer(), true);
    let mut den = RField::zeros(v.h, v.w, v.c);
    for ch in 0..v.c {
        let a = kernel.transfer().abs2_plane(ch);
        let d = den.plane_mut(ch);
        for i in 0..a.len() {
            d[i] = a[i] + eps;
        }
    }
    field::ifft2_re(&plan, &field::cmul_real(&num, &field::recip(&den)))
}

/// Tikhonov reconstruction of a sensor measurement.
pub fn tikhonov_reconstruct(y: &Tensor3, kernel: &FrequencyKernel, eps: f64) -> Result<Tensor3> {
    if eps < 0.0 {
        return Err(CoreError::InvalidArgument(format!("eps {eps} must be >= 0")));
    }
    let (h, w) = kernel.sensor_shape();
    if (y.height(), y.width()) != (h, w) {
        return Err(CoreError::shape_mismatch(
            format!("{h}x{w}"),
            format!("{}x{}", y.height(), y.width()),
        ));
    }
    if eps == 0.0 {
        let min_abs2 = kernel.transfer().abs2.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        if min_abs2 < 1e-12 {
            return Err(CoreError::Numerical(format!(
                "singular inversion: min |T|^2 = {min_abs2:.3e} with eps = 0"
            )));
        }
    }
    let mut cx = Eval;
    let kcx = KernelCx::fixed(&mut cx, kernel, y.channels());
    let yh = cx.const_r(RField::from_tensor(y));
    let eh = cx.const_s(eps);
    let out = tikhonov_forward(&mut cx, &kcx, &yh, &eh);
    cx.value_r(&out).to_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::plan_kernel;
    use crate::sim::{simulate, synth_scene};

    fn delta_psf(h: usize, w: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(h, w, 1);
        t.set(h / 2, w / 2, 0, 1.0);
        t
    }

    /// A well-conditioned PSF: a dominant delta plus a small blur, so the
    /// transfer magnitude stays bounded away from zero.
    fn conditioned_psf(h: usize, w: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(h, w, 1);
        for r in 0..h {
            for c in 0..w {
                let dy = r as f32 - (h / 2) as f32;
                let dx = c as f32 - (w / 2) as f32;
                t.set(r, c, 0, 0.02 * (-(dy * dy + dx * dx) / 8.0).exp());
            }
        }
        t.set(h / 2, w / 2, 0, 1.0);
        t
    }

    #[test]
    fn delta_psf_eps_zero_is_exact() {
        let k = plan_kernel(&delta_psf(16, 16)).unwrap();
        let scene = synth_scene(3, (16, 16, 1), 5);
        let y = simulate(&scene, &k).unwrap();
        let xhat = tikhonov_reconstruct(&y, &k, 0.0).unwrap();
        for (a, b) in scene.data().iter().zip(xhat.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn circular_measurement_recovered_to_1e3() {
        let k = plan_kernel(&conditioned_psf(32, 32)).unwrap();
        let (ph, pw) = k.padded_shape();
        // Circular model: no crop anywhere (padded-grid test hook).
        let x = RField::from_tensor(&synth_scene(5, (ph, pw, 1), 8));
        let y_circ = {
            let spec = field::fft2(kernel_fft(&k), &x);
            field::ifft2_re(kernel_fft(&k), &field::mul_transfer(&spec, k.transfer(), false))
        };
        let xhat = tikhonov_apply_padded(&y_circ, &k, 1e-6);
        let rel = field::sub(&xhat, &x).norm2() / x.norm2();
        assert!(rel <= 1e-3, "relative error {rel}");
    }

    fn kernel_fft(k: &FrequencyKernel) -> &crate::fft::Fft2d {
        k.fft()
    }

    #[test]
    fn large_eps_drives_output_to_zero() {
        let k = plan_kernel(&conditioned_psf(16, 16)).unwrap();
        let scene = synth_scene(6, (16, 16, 1), 5);
        let y = simulate(&scene, &k).unwrap();
        let xhat = tikhonov_reconstruct(&y, &k, 1e9).unwrap();
        assert!(xhat.max_value() < 1e-6);
    }

    #[test]
    fn eps_zero_with_singular_transfer_is_error() {
        // A two-pixel PSF has spectral zeros.
        let mut psf = Tensor3::zeros(16, 16, 1);
        psf.set(8, 7, 0, 0.5);
        psf.set(8, 9, 0, 0.5);
        let k = plan_kernel(&psf).unwrap();
        let y = synth_scene(7, (16, 16, 1), 5);
        match tikhonov_reconstruct(&y, &k, 0.0) {
            Err(CoreError::Numerical(_)) => {}
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn negative_eps_is_rejected_and_output_non_negative() {
        let k = plan_kernel(&conditioned_psf(16, 16)).unwrap();
        let y = simulate(&synth_scene(8, (16, 16, 1), 5), &k).unwrap();
        assert!(tikhonov_reconstruct(&y, &k, -1.0).is_err());
        let xhat = tikhonov_reconstruct(&y, &k, 1e-4).unwrap();
        assert!(xhat.min_value() >= 0.0);
    }
}
