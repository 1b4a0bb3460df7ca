//! Cached 2D complex FFT built on `rustfft`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward/inverse 2D transform for one grid size.
///
/// The forward transform is unnormalized; the inverse applies `1/(h*w)`.
pub struct Fft2d {
    h: usize,
    w: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2d {
            h,
            w,
            fwd_row: planner.plan_fft_forward(w),
            inv_row: planner.plan_fft_inverse(w),
            fwd_col: planner.plan_fft_forward(h),
            inv_col: planner.plan_fft_inverse(h),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn pass(&self, data: &mut [Complex64], row_fft: &Arc<dyn Fft<f64>>, col_fft: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(data.len(), h * w);
        let mut scratch =
            vec![Complex64::default(); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
        for row in data.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        let mut t = vec![Complex64::default(); h * w];
        transpose(data, &mut t, h, w);
        for col in t.chunks_exact_mut(h) {
            col_fft.process_with_scratch(col, &mut scratch);
        }
        transpose(&t, data, w, h);
    }

    /// In-place forward 2D FFT (no normalization).
    pub fn forward(&self, data: &mut [Complex64]) {
        self.pass(data, &self.fwd_row, &self.fwd_col);
    }

    /// In-place inverse 2D FFT with `1/(h*w)` normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.pass(data, &self.inv_row, &self.inv_col);
        let scale = 1.0 / (self.h * self.w) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Blocked out-of-place transpose of an `rows x cols` matrix.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Process-wide plan cache. Planning is rare; applying plans is lock-free.
pub fn plan_2d(h: usize, w: usize) -> Arc<Fft2d> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Fft2d>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry((h, w)).or_insert_with(|| Arc::new(Fft2d::new(h, w))).clone()
}
