//! Planar `f64` compute fields and the primitive kernels shared by the
//! operators, the solvers and the autodiff tape.
//!
//! `Tensor3` (f32, channel-innermost) is the storage/interchange type; the
//! numerical core works on these planar f64 fields and converts at the API
//! boundary.

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::fft::Fft2d;
use crate::tensor::Tensor3;

/// Real field: `channels` planes of `h*w` f64 values, plane-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RField {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

/// Complex field with the same planar layout as [`RField`].
#[derive(Clone, Debug, PartialEq)]
pub struct CField {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<Complex64>,
}

impl RField {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        RField { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        let (h, w, c) = t.shape();
        let mut f = RField::zeros(h, w, c);
        let n = h * w;
        for i in 0..n {
            for ch in 0..c {
                f.data[ch * n + i] = t.data()[i * c + ch] as f64;
            }
        }
        f
    }

    /// Converts back to `f32` storage, rejecting non-finite values.
    pub fn to_tensor(&self) -> Result<Tensor3> {
        let n = self.h * self.w;
        let mut data = vec![0f32; n * self.c];
        for i in 0..n {
            for ch in 0..self.c {
                let v = self.data[ch * n + i];
                if !v.is_finite() {
                    return Err(CoreError::Numerical("non-finite value in field".into()));
                }
                data[i * self.c + ch] = v as f32;
            }
        }
        Tensor3::from_vec(self.h, self.w, self.c, data)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl CField {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        CField { h, w, c, data: vec![Complex64::default(); h * w * c] }
    }

    pub fn plane(&self, ch: usize) -> &[Complex64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }
}

/// Geometry of the centered sensor window inside the padded grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropGeom {
    pub padded_h: usize,
    pub padded_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

impl CropGeom {
    pub fn centered(padded_h: usize, padded_w: usize, win_h: usize, win_w: usize) -> Self {
        CropGeom {
            padded_h,
            padded_w,
            win_h,
            win_w,
            off_y: (padded_h - win_h) / 2,
            off_x: (padded_w - win_w) / 2,
        }
    }
}

/// Frequency response of a planned PSF: per-channel spectra on the padded grid.
#[derive(Clone, Debug)]
pub struct TransferData {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Per-channel spectrum, plane-major.
    pub data: Vec<Complex64>,
    /// |T|^2 per channel, plane-major.
    pub abs2: Vec<f64>,
}

impl TransferData {
    pub fn from_spectra(h: usize, w: usize, c: usize, data: Vec<Complex64>) -> Self {
        let abs2 = data.iter().map(|z| z.norm_sqr()).collect();
        TransferData { h, w, c, data, abs2 }
    }

    fn plane(&self, ch: usize) -> &[Complex64] {
        let n = self.h * self.w;
        let ch = if self.c == 1 { 0 } else { ch };
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn abs2_plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        let ch = if self.c == 1 { 0 } else { ch };
        &self.abs2[ch * n..(ch + 1) * n]
    }

    /// Transfer value of channel `ch` at flat frequency index `i`.
    pub fn plane_at(&self, ch: usize, i: usize) -> Complex64 {
        self.plane(ch)[i]
    }
}

// ---------------------------------------------------------------------------
// FFT kernels
// ---------------------------------------------------------------------------

pub fn fft2(plan: &Fft2d, x: &RField) -> CField {
    debug_assert_eq!(plan.shape(), (x.h, x.w));
    let n = x.h * x.w;
    let mut out = CField::zeros(x.h, x.w, x.c);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = &mut out.data[ch * n..(ch + 1) * n];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = Complex64::new(s, 0.0);
        }
        plan.forward(dst);
    }
    out
}

/// Inverse FFT keeping the real part.
pub fn ifft2_re(plan: &Fft2d, z: &CField) -> RField {
    let n = z.h * z.w;
    let mut out = RField::zeros(z.h, z.w, z.c);
    let mut buf = vec![Complex64::default(); n];
    for ch in 0..z.c {
        buf.copy_from_slice(z.plane(ch));
        plan.inverse(&mut buf);
        for (d, s) in out.plane_mut(ch).iter_mut().zip(&buf) {
            *d = s.re;
        }
    }
    out
}

/// Forward FFT applied to a cotangent that entered as the real part of a
/// complex field: adjoint of [`ifft2_re`] up to the `1/(h*w)` factor handled
/// by the caller.
pub fn fft2_of_real(plan: &Fft2d, g: &RField) -> CField {
    fft2(plan, g)
}

/// Elementwise multiply by a transfer spectrum (or its conjugate).
pub fn mul_transfer(z: &CField, t: &TransferData, conj: bool) -> CField {
    debug_assert_eq!((z.h, z.w), (t.h, t.w));
    let n = z.h * z.w;
    let mut out = CField::zeros(z.h, z.w, z.c);
    for ch in 0..z.c {
        let tp = t.plane(ch);
        let src = z.plane(ch);
        let dst = &mut out.data[ch * n..(ch + 1) * n];
        if conj {
            for i in 0..n {
                dst[i] = src[i] * tp[i].conj();
            }
        } else {
            for i in 0..n {
                dst[i] = src[i] * tp[i];
            }
        }
    }
    out
}

/// Elementwise product of two complex fields.
pub fn cmul(a: &CField, b: &CField) -> CField {
    debug_assert_eq!(a.shape_tuple(), b.shape_tuple());
    CField {
        h: a.h,
        w: a.w,
        c: a.c,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

impl CField {
    fn shape_tuple(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
}

pub fn conj(z: &CField) -> CField {
    CField { h: z.h, w: z.w, c: z.c, data: z.data.iter().map(|v| v.conj()).collect() }
}

pub fn cabs2(z: &CField) -> RField {
    RField { h: z.h, w: z.w, c: z.c, data: z.data.iter().map(|v| v.norm_sqr()).collect() }
}

/// Complex field scaled elementwise by a real field (channel counts equal, or
/// the real field single-channel broadcast).
pub fn cmul_real(z: &CField, r: &RField) -> CField {
    debug_assert_eq!((z.h, z.w), (r.h, r.w));
    let n = z.h * z.w;
    let mut out = CField::zeros(z.h, z.w, z.c);
    for ch in 0..z.c {
        let rp = r.plane(if r.c == 1 { 0 } else { ch });
        let src = z.plane(ch);
        let dst = &mut out.data[ch * n..(ch + 1) * n];
        for i in 0..n {
            dst[i] = src[i] * rp[i];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Window kernels
// ---------------------------------------------------------------------------

/// Zero-pads a window-sized field into the centered window of the padded grid.
pub fn embed(x: &RField, geom: &CropGeom) -> RField {
    debug_assert_eq!((x.h, x.w), (geom.win_h, geom.win_w));
    let mut out = RField::zeros(geom.padded_h, geom.padded_w, x.c);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..geom.win_h {
            let s = r * geom.win_w;
            let d = (r + geom.off_y) * geom.padded_w + geom.off_x;
            dst[d..d + geom.win_w].copy_from_slice(&src[s..s + geom.win_w]);
        }
    }
    out
}

/// Extracts the centered window from a padded field.
pub fn extract(v: &RField, geom: &CropGeom) -> RField {
    debug_assert_eq!((v.h, v.w), (geom.padded_h, geom.padded_w));
    let mut out = RField::zeros(geom.win_h, geom.win_w, v.c);
    for ch in 0..v.c {
        let src = v.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..geom.win_h {
            let s = (r + geom.off_y) * geom.padded_w + geom.off_x;
            let d = r * geom.win_w;
            dst[d..d + geom.win_w].copy_from_slice(&src[s..s + geom.win_w]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences (circular boundary)
// ---------------------------------------------------------------------------

/// Forward differences along height and width, circular boundary.
///
/// Output has `2*c` planes: plane `2k` is the vertical and plane `2k+1` the
/// horizontal difference of input plane `k`.
pub fn psi(x: &RField) -> RField {
    let (h, w) = (x.h, x.w);
    let mut out = RField::zeros(h, w, 2 * x.c);
    for ch in 0..x.c {
        let src = x.plane(ch);
        {
            let dv = out.plane_mut(2 * ch);
            for r in 0..h {
                let rn = if r + 1 == h { 0 } else { r + 1 };
                for c in 0..w {
                    dv[r * w + c] = src[rn * w + c] - src[r * w + c];
                }
            }
        }
        {
            let dh = out.plane_mut(2 * ch + 1);
            for r in 0..h {
                for c in 0..w {
                    let cn = if c + 1 == w { 0 } else { c + 1 };
                    dh[r * w + c] = src[r * w + cn] - src[r * w + c];
                }
            }
        }
    }
    out
}

/// Exact adjoint of [`psi`]: negative circular divergence.
pub fn psit(g: &RField) -> RField {
    debug_assert_eq!(g.c % 2, 0);
    let (h, w) = (g.h, g.w);
    let c = g.c / 2;
    let mut out = RField::zeros(h, w, c);
    for ch in 0..c {
        let dv = g.plane(2 * ch);
        let dh = g.plane(2 * ch + 1);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            let rp = if r == 0 { h - 1 } else { r - 1 };
            for col in 0..w {
                let cp = if col == 0 { w - 1 } else { col - 1 };
                dst[r * w + col] = dv[rp * w + col] - dv[r * w + col] + dh[r * w + cp] - dh[r * w + col];
            }
        }
    }
    out
}

/// Eigenvalues of `psi^T psi` on the h×w circular grid, frequency-ordered:
/// `4 sin^2(pi fy / h) + 4 sin^2(pi fx / w)`.
pub fn psi_eigenvalues(h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for fy in 0..h {
        let sy = (std::f64::consts::PI * fy as f64 / h as f64).sin();
        for fx in 0..w {
            let sx = (std::f64::consts::PI * fx as f64 / w as f64).sin();
            out[fy * w + fx] = 4.0 * (sy * sy + sx * sx);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise kernels
// ---------------------------------------------------------------------------

pub fn add(a: &RField, b: &RField) -> RField {
    debug_assert_eq!(a.shape(), b.shape());
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() }
}

pub fn sub(a: &RField, b: &RField) -> RField {
    debug_assert_eq!(a.shape(), b.shape());
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect() }
}

pub fn scale(a: &RField, k: f64) -> RField {
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().map(|x| x * k).collect() }
}

pub fn hadamard(a: &RField, b: &RField) -> RField {
    debug_assert_eq!(a.shape(), b.shape());
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect() }
}

pub fn recip(a: &RField) -> RField {
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().map(|x| 1.0 / x).collect() }
}

pub fn relu(a: &RField) -> RField {
    a_map(a, |v| v.max(0.0))
}

fn a_map(a: &RField, f: impl Fn(f64) -> f64) -> RField {
    RField { h: a.h, w: a.w, c: a.c, data: a.data.iter().map(|&v| f(v)).collect() }
}

/// `sign(v) * max(|v| - t, 0)` elementwise.
pub fn soft_threshold(v: &RField, t: f64) -> RField {
    a_map(v, |x| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    })
}

pub fn leaky_relu(a: &RField, slope: f64) -> RField {
    a_map(a, |v| if v >= 0.0 { v } else { slope * v })
}

pub fn dot(a: &RField, b: &RField) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Mean squared difference over all elements.
pub fn mse(a: &RField, b: &RField) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.data.len() as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

// ---------------------------------------------------------------------------
// Convolution layer kernels (symmetric boundary)
// ---------------------------------------------------------------------------

/// Mirrors an out-of-range index into `[0, n)` (symmetric padding: the edge
/// pixel is repeated once).
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i as usize
}

/// Cross-correlation layer with bias. `weights` is `co*ci*k*k` values laid out
/// `[co][ci][ky][kx]`; `bias` is `co` values.
pub fn conv2d(x: &RField, weights: &[f64], bias: &[f64], c_out: usize, k: usize) -> RField {
    let (h, w, c_in) = x.shape();
    debug_assert_eq!(weights.len(), c_out * c_in * k * k);
    debug_assert_eq!(bias.len(), c_out);
    let half = (k / 2) as isize;
    let mut out = RField::zeros(h, w, c_out);
    for co in 0..c_out {
        let dst = out.plane_mut(co);
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let src = x.plane(ci);
            let wbase = ((co * c_in) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - half;
                    let dx = kx as isize - half;
                    for r in 0..h {
                        let sr = mirror(r as isize + dy, h);
                        let srow = sr * w;
                        let drow = r * w;
                        for c in 0..w {
                            let sc = mirror(c as isize + dx, w);
                            dst[drow + c] += wv * src[srow + sc];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d`]: gradients w.r.t. input, weights and bias.
pub fn conv2d_backward(
    x: &RField,
    weights: &[f64],
    c_out: usize,
    k: usize,
    g_out: &RField,
) -> (RField, Vec<f64>, Vec<f64>) {
    let (h, w, c_in) = x.shape();
    debug_assert_eq!(g_out.shape(), (h, w, c_out));
    let half = (k / 2) as isize;
    let mut gx = RField::zeros(h, w, c_in);
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; c_out];
    for co in 0..c_out {
        let go = g_out.plane(co);
        gb[co] += go.iter().sum::<f64>();
        for ci in 0..c_in {
            let src = x.plane(ci);
            let gxp = gx.plane_mut(ci);
            let wbase = ((co * c_in) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - half;
                    let dx = kx as isize - half;
                    let wv = weights[wbase + ky * k + kx];
                    let mut gw_acc = 0.0;
                    for r in 0..h {
                        let sr = mirror(r as isize + dy, h);
                        let srow = sr * w;
                        let grow = r * w;
                        for c in 0..w {
                            let sc = mirror(c as isize + dx, w);
                            let g = go[grow + c];
                            gw_acc += g * src[srow + sc];
                            gxp[srow + sc] += g * wv;
                        }
                    }
                    gw[wbase + ky * k + kx] += gw_acc;
                }
            }
        }
    }
    (gx, gw, gb)
}
