//! FFT-backed linear operators of the camera model: padded convolution with a
//! planned PSF, its adjoint, the centered crop / zero-pad pair, and circular
//! finite differences with their adjoint.
//!
//! Linear convolution of sensor-sized signals is made exact by a 2x padded
//! grid. Odd sensor sides are rounded up to even for the working grid and the
//! crop window stays at the true sensor size, so the extra line never leaks
//! into results.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::fft::{plan_2d, Fft2d};
use crate::field::{self, CropGeom, RField, TransferData};
use crate::tensor::Tensor3;

/// Which side of the camera model a padded intermediate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldDomain {
    Scene,
    Measurement,
}

/// Full padded-grid intermediate (the pre-crop convolution output).
#[derive(Clone, Debug)]
pub struct PaddedField {
    pub values: Tensor3,
    pub domain: FieldDomain,
}

/// Precomputed padded frequency response of a PSF plus padding geometry.
///
/// Immutable after planning; applies on one kernel may run concurrently.
pub struct FrequencyKernel {
    sensor_h: usize,
    sensor_w: usize,
    channels: usize,
    work_h: usize,
    work_w: usize,
    transfer: Arc<TransferData>,
    geom: CropGeom,
    fft: Arc<Fft2d>,
    /// Circular shift applied when centering the PSF (centroid row, col).
    centroid: (usize, usize),
}

impl FrequencyKernel {
    pub fn sensor_shape(&self) -> (usize, usize) {
        (self.sensor_h, self.sensor_w)
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (2 * self.work_h, 2 * self.work_w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn transfer(&self) -> &TransferData {
        &self.transfer
    }

    pub fn transfer_arc(&self) -> Arc<TransferData> {
        self.transfer.clone()
    }

    pub fn crop_geom(&self) -> &CropGeom {
        &self.geom
    }

    pub fn fft(&self) -> &Arc<Fft2d> {
        &self.fft
    }

    pub fn centroid(&self) -> (usize, usize) {
        self.centroid
    }

    fn check_sensor(&self, t: &Tensor3) -> Result<()> {
        if (t.height(), t.width()) != (self.sensor_h, self.sensor_w) {
            return Err(CoreError::shape_mismatch(
                format!("{}x{}", self.sensor_h, self.sensor_w),
                format!("{}x{}", t.height(), t.width()),
            ));
        }
        if t.channels() != self.channels && self.channels != 1 {
            return Err(CoreError::shape_mismatch(
                format!("{} channels", self.channels),
                format!("{} channels", t.channels()),
            ));
        }
        Ok(())
    }

    fn check_padded(&self, t: &Tensor3) -> Result<()> {
        let (ph, pw) = self.padded_shape();
        if (t.height(), t.width()) != (ph, pw) {
            return Err(CoreError::shape_mismatch(
                format!("{ph}x{pw}"),
                format!("{}x{}", t.height(), t.width()),
            ));
        }
        Ok(())
    }
}

/// Intensity centroid of a non-negative field, rounded to the nearest pixel.
fn centroid(psf: &RField) -> (usize, usize) {
    let (h, w, c) = psf.shape();
    let mut total = 0.0;
    let mut ry = 0.0;
    let mut rx = 0.0;
    for ch in 0..c {
        let p = psf.plane(ch);
        for r in 0..h {
            for col in 0..w {
                let v = p[r * w + col];
                total += v;
                ry += v * r as f64;
                rx += v * col as f64;
            }
        }
    }
    let cy = (ry / total).round() as usize;
    let cx = (rx / total).round() as usize;
    (cy.min(h - 1), cx.min(w - 1))
}

fn round_up_even(n: usize) -> usize {
    if n % 2 == 0 {
        n
    } else {
        n + 1
    }
}

/// Normalizes each PSF channel to unit sum (values must be non-negative).
pub(crate) fn normalize_psf(psf: &Tensor3) -> Result<RField> {
    if psf.min_value() < 0.0 {
        return Err(CoreError::InvalidArgument("PSF has negative values".into()));
    }
    let mut f = RField::from_tensor(psf);
    for ch in 0..f.c {
        let p = f.plane_mut(ch);
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            return Err(CoreError::InvalidArgument(format!("PSF channel {ch} is all zero")));
        }
        p.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(f)
}

/// Embeds a sensor-sized PSF into the padded grid with a circular shift that
/// puts `shift` (the centroid) at the origin.
pub(crate) fn embed_psf_shifted(psf: &RField, padded_h: usize, padded_w: usize, shift: (usize, usize)) -> RField {
    let (h, w, c) = psf.shape();
    let mut out = RField::zeros(padded_h, padded_w, c);
    for ch in 0..c {
        let src = psf.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            let dr = (r + padded_h - shift.0) % padded_h;
            for col in 0..w {
                let dc = (col + padded_w - shift.1) % padded_w;
                dst[dr * padded_w + dc] = src[r * w + col];
            }
        }
    }
    out
}

/// Plans the frequency-domain kernel of a PSF.
///
/// The PSF is L1-normalized per channel, centered by its intensity centroid,
/// and transformed on the 2x padded grid.
pub fn plan_kernel(psf: &Tensor3) -> Result<FrequencyKernel> {
    let (sensor_h, sensor_w, channels) = psf.shape();
    if sensor_h == 0 || sensor_w == 0 {
        return Err(CoreError::InvalidArgument("empty PSF".into()));
    }
    let normalized = normalize_psf(psf)?;
    let shift = centroid(&normalized);
    let work_h = round_up_even(sensor_h);
    let work_w = round_up_even(sensor_w);
    let (padded_h, padded_w) = (2 * work_h, 2 * work_w);
    let fft = plan_2d(padded_h, padded_w);
    let embedded = embed_psf_shifted(&normalized, padded_h, padded_w, shift);
    let spectra = field::fft2(&fft, &embedded);
    let transfer = Arc::new(TransferData::from_spectra(padded_h, padded_w, channels, spectra.data));
    Ok(FrequencyKernel {
        sensor_h,
        sensor_w,
        channels,
        work_h,
        work_w,
        transfer,
        geom: CropGeom::centered(padded_h, padded_w, sensor_h, sensor_w),
        fft,
        centroid: shift,
    })
}

/// Circular convolution of a padded-grid field with the kernel (or with its
/// conjugate/adjoint spectrum). This is the solver-side primitive; it also
/// serves as the crop-free test hook.
pub fn apply_padded(k: &FrequencyKernel, v: &RField, conjugate: bool) -> RField {
    let spec = field::fft2(&k.fft, v);
    let prod = field::mul_transfer(&spec, &k.transfer, conjugate);
    field::ifft2_re(&k.fft, &prod)
}

/// Forward model operator P: zero-pad the scene into the padded grid and
/// convolve with the PSF. Returns the full padded field (before crop).
pub fn forward_p(k: &FrequencyKernel, x: &Tensor3) -> Result<PaddedField> {
    k.check_sensor(x)?;
    let xf = RField::from_tensor(x);
    let padded = field::embed(&xf, &k.geom);
    let out = apply_padded(k, &padded, false);
    Ok(PaddedField { values: out.to_tensor()?, domain: FieldDomain::Measurement })
}

/// Exact adjoint of [`forward_p`] under the standard inner product.
pub fn adjoint_p(k: &FrequencyKernel, v: &PaddedField) -> Result<Tensor3> {
    k.check_padded(&v.values)?;
    let vf = RField::from_tensor(&v.values);
    let full = apply_padded(k, &vf, true);
    field::extract(&full, &k.geom).to_tensor()
}

/// Crop operator C: centered sensor-sized window of the padded grid.
pub fn crop_c(k: &FrequencyKernel, v: &PaddedField) -> Result<Tensor3> {
    k.check_padded(&v.values)?;
    field::extract(&RField::from_tensor(&v.values), &k.geom).to_tensor()
}

/// Zero-pad adjoint C^T: embeds a sensor-sized image into the padded grid.
pub fn pad_ct(k: &FrequencyKernel, y: &Tensor3) -> Result<PaddedField> {
    k.check_sensor(y)?;
    let f = field::embed(&RField::from_tensor(y), &k.geom);
    Ok(PaddedField { values: f.to_tensor()?, domain: FieldDomain::Measurement })
}

/// Circular forward differences along height and width; output stacks two
/// planes per input channel.
pub fn tv_psi(x: &Tensor3) -> Tensor3 {
    field::psi(&RField::from_tensor(x)).to_tensor().expect("finite input")
}

/// Exact adjoint of [`tv_psi`].
pub fn tv_psit(g: &Tensor3) -> Result<Tensor3> {
    if g.channels() % 2 != 0 {
        return Err(CoreError::InvalidArgument("gradient stack needs 2 planes per channel".into()));
    }
    field::psit(&RField::from_tensor(g)).to_tensor()
}

/// Imaginary-part residue diagnostic: applying the kernel to a real field must
/// stay essentially real.
pub fn imaginary_residue(k: &FrequencyKernel, v: &RField) -> f64 {
    let spec = field::fft2(&k.fft, v);
    let prod = field::mul_transfer(&spec, &k.transfer, false);
    let mut re_norm = 0.0f64;
    let mut im_norm = 0.0f64;
    let n = prod.h * prod.w;
    let mut buf = vec![Complex64::default(); n];
    for ch in 0..prod.c {
        buf.copy_from_slice(prod.plane(ch));
        k.fft.inverse(&mut buf);
        for z in &buf {
            re_norm += z.re * z.re;
            im_norm += z.im * z.im;
        }
    }
    (im_norm.sqrt()) / re_norm.sqrt().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, h: usize, w: usize, c: usize) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn delta_psf(h: usize, w: usize, c: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(h, w, c);
        for ch in 0..c {
            t.set(h / 2, w / 2, ch, 1.0);
        }
        t
    }

    #[test]
    fn delta_psf_is_identity_after_crop() {
        let k = plan_kernel(&delta_psf(8, 8, 3)).unwrap();
        let x = random_tensor(1, 8, 8, 3);
        let v = forward_p(&k, &x).unwrap();
        let y = crop_c(&k, &v).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_psf_dc_is_one() {
        let s = 4;
        let psf = Tensor3::from_fn(16, 16, 3, |r, c, _| {
            if r >= 6 && r < 6 + s && c >= 6 && c < 6 + s {
                1.0
            } else {
                0.0
            }
        });
        let k = plan_kernel(&psf).unwrap();
        for ch in 0..3 {
            let dc = k.transfer().plane_at(ch, 0);
            assert!((dc - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn all_zero_channel_is_error() {
        let mut psf = delta_psf(8, 8, 3);
        for r in 0..8 {
            for c in 0..8 {
                psf.set(r, c, 1, 0.0);
            }
        }
        assert!(plan_kernel(&psf).is_err());
    }

    #[test]
    fn forward_is_linear() {
        let k = plan_kernel(&random_tensor(10, 16, 16, 3)).unwrap();
        let x1 = random_tensor(11, 16, 16, 3);
        let x2 = random_tensor(12, 16, 16, 3);
        let (a, b) = (0.7f32, -1.3f32);
        let lhs = forward_p(
            &k,
            &Tensor3::from_vec(
                16,
                16,
                3,
                x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let f1 = forward_p(&k, &x1).unwrap();
        let f2 = forward_p(&k, &x2).unwrap();
        let mut max_err = 0.0f32;
        for i in 0..lhs.values.len() {
            let want = a * f1.values.data()[i] + b * f2.values.data()[i];
            max_err = max_err.max((lhs.values.data()[i] - want).abs());
        }
        assert!(max_err < 1e-5, "max_err {max_err}");
    }

    #[test]
    fn zero_in_zero_out() {
        let k = plan_kernel(&random_tensor(13, 8, 8, 1)).unwrap();
        let z = Tensor3::zeros(8, 8, 1);
        let out = forward_p(&k, &z).unwrap();
        assert!(out.values.data().iter().all(|&v| v.abs() < 1e-12));
        let zp = PaddedField { values: Tensor3::zeros(16, 16, 1), domain: FieldDomain::Measurement };
        let back = adjoint_p(&k, &zp).unwrap();
        assert!(back.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn intensity_conservation_with_unit_sum_psf() {
        let k = plan_kernel(&random_tensor(14, 16, 16, 3)).unwrap();
        let x = random_tensor(15, 16, 16, 3);
        let out = forward_p(&k, &x).unwrap();
        let total_in = x.sum();
        let total_out = out.values.sum();
        assert!(((total_in - total_out) / total_in).abs() < 1e-4);
    }

    #[test]
    fn adjoint_dot_product_tests() {
        // 100 random trials at 16x16 across all operator pairs.
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psf = Tensor3::from_fn(16, 16, 1, |_, _, _| rng.gen_range(0.0..1.0));
            let k = plan_kernel(&psf).unwrap();
            let x = Tensor3::from_fn(16, 16, 1, |_, _, _| rng.gen_range(-1.0..1.0f32));
            let v = Tensor3::from_fn(32, 32, 1, |_, _, _| rng.gen_range(-1.0..1.0f32));
            let vp = PaddedField { values: v.clone(), domain: FieldDomain::Measurement };
            let px = forward_p(&k, &x).unwrap();
            let ptv = adjoint_p(&k, &vp).unwrap();
            let lhs = dot(&RField::from_tensor(&px.values), &RField::from_tensor(&v));
            let rhs = dot(&RField::from_tensor(&x), &RField::from_tensor(&ptv));
            let denom = lhs.abs().max(rhs.abs()).max(1e-9);
            assert!(((lhs - rhs) / denom).abs() < 1e-4, "P adjoint failed at seed {seed}");

            let y = Tensor3::from_fn(16, 16, 1, |_, _, _| rng.gen_range(-1.0..1.0f32));
            let cv = crop_c(&k, &vp).unwrap();
            let cty = pad_ct(&k, &y).unwrap();
            let lhs = dot(&RField::from_tensor(&cv), &RField::from_tensor(&y));
            let rhs = dot(&RField::from_tensor(&v), &RField::from_tensor(&cty.values));
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "C adjoint failed at seed {seed}");
        }
    }

    #[test]
    fn crop_of_pad_is_identity_and_pad_zeroes_three_quarters() {
        let k = plan_kernel(&delta_psf(16, 16, 1)).unwrap();
        let y = random_tensor(20, 16, 16, 1);
        let padded = pad_ct(&k, &y).unwrap();
        let back = crop_c(&k, &padded).unwrap();
        assert_eq!(back, y);
        let zeros = padded.values.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 32 * 32 - 16 * 16); // exactly 3/4 of the grid
    }

    #[test]
    fn odd_sensor_sizes_round_trip() {
        let k = plan_kernel(&delta_psf(9, 7, 1)).unwrap();
        assert_eq!(k.padded_shape(), (20, 16));
        let x = random_tensor(21, 9, 7, 1);
        let y = crop_c(&k, &forward_p(&k, &x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn grayscale_psf_broadcasts_to_color_scene() {
        let k = plan_kernel(&random_tensor(22, 8, 8, 1)).unwrap();
        let x = random_tensor(23, 8, 8, 3);
        let out = forward_p(&k, &x).unwrap();
        assert_eq!(out.values.channels(), 3);
    }

    #[test]
    fn kernel_output_stays_essentially_real() {
        let k = plan_kernel(&random_tensor(24, 16, 16, 3)).unwrap();
        let x = RField::from_tensor(&random_tensor(25, 32, 32, 3));
        assert!(imaginary_residue(&k, &x) < 1e-5);
    }

    #[test]
    fn tv_psi_constant_is_zero_and_adjoint_holds() {
        let c = Tensor3::from_fn(6, 6, 3, |_, _, _| 0.4);
        assert!(tv_psi(&c).data().iter().all(|&v| v == 0.0));
        let x = random_tensor(26, 12, 10, 3);
        let g = random_tensor(27, 12, 10, 6);
        let lhs = dot(&RField::from_tensor(&tv_psi(&x)), &RField::from_tensor(&g));
        let rhs = dot(&RField::from_tensor(&x), &RField::from_tensor(&tv_psit(&g).unwrap()));
        assert!(((lhs - rhs) / lhs.abs().max(1.0)).abs() < 1e-5);
    }
}
