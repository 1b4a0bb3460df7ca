//! Pre- and post-processor blocks: a small trainable residual convolution
//! stack behind a common interface, plus classical non-learned smoothers and
//! the identity.
//!
//! The conv stack is residual with a zero-initialized final layer, so a
//! freshly initialized processor is exactly the identity map and an untrained
//! pipeline behaves like one without processors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvLayerMeta, Cx};
use crate::error::{CoreError, Result};
use crate::field::RField;
use crate::tensor::Tensor3;

/// Leaky slope between conv layers.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Processor architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorArch {
    pub kind: ProcessorKind,
    /// Channel counts per conv-stack stage, first = last = image channels.
    pub widths: Vec<usize>,
    /// Odd kernel side.
    pub kernel_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Identity,
    ConvStack,
    MedianSmoother,
    TvSmoother,
}

impl ProcessorArch {
    pub fn identity() -> Self {
        ProcessorArch { kind: ProcessorKind::Identity, widths: Vec::new(), kernel_size: 1 }
    }

    pub fn median() -> Self {
        ProcessorArch { kind: ProcessorKind::MedianSmoother, widths: Vec::new(), kernel_size: 3 }
    }

    pub fn tv() -> Self {
        ProcessorArch { kind: ProcessorKind::TvSmoother, widths: Vec::new(), kernel_size: 1 }
    }

    /// Residual conv stack `channels -> hidden -> ... -> channels`.
    pub fn conv_stack(channels: usize, hidden: usize, layers: usize, kernel_size: usize) -> Self {
        let mut widths = Vec::with_capacity(layers + 1);
        widths.push(channels);
        for _ in 0..layers.saturating_sub(1) {
            widths.push(hidden);
        }
        widths.push(channels);
        ProcessorArch { kind: ProcessorKind::ConvStack, widths, kernel_size }
    }

    /// The default trainable processor: 3 conv layers, 8 hidden channels,
    /// 3x3 kernels (about 1k parameters on RGB input).
    pub fn default_conv(channels: usize) -> Self {
        Self::conv_stack(channels, 8, 3, 3)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProcessorKind::ConvStack => {
                if self.widths.len() < 2 {
                    return Err(CoreError::InvalidArgument("conv stack needs at least one layer".into()));
                }
                if self.kernel_size % 2 == 0 {
                    return Err(CoreError::InvalidArgument("kernel size must be odd".into()));
                }
                if self.widths.first() != self.widths.last() {
                    return Err(CoreError::InvalidArgument(
                        "first and last widths must equal the image channel count".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Layer metadata over a flat parameter vector: per layer, weights in
    /// `[c_out][c_in][ky][kx]` order followed by the biases.
    pub fn layers(&self) -> Vec<ConvLayerMeta> {
        let mut metas = Vec::new();
        if self.kind != ProcessorKind::ConvStack {
            return metas;
        }
        let k = self.kernel_size;
        let mut offset = 0;
        for win in self.widths.windows(2) {
            let (c_in, c_out) = (win[0], win[1]);
            metas.push(ConvLayerMeta { c_in, c_out, k, w_offset: offset, b_offset: offset + k * k * c_in * c_out });
            offset += k * k * c_in * c_out + c_out;
        }
        metas
    }
}

/// Total learnable parameter count of an architecture.
pub fn param_count(arch: &ProcessorArch) -> Result<usize> {
    arch.validate()?;
    match arch.kind {
        ProcessorKind::ConvStack => {
            let k2 = arch.kernel_size * arch.kernel_size;
            Ok(arch.widths.windows(2).map(|w| k2 * w[0] * w[1] + w[1]).sum())
        }
        _ => Ok(0),
    }
}

/// Architecture plus its flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorParams {
    pub arch: ProcessorArch,
    pub values: Vec<f32>,
}

impl ProcessorParams {
    pub fn validate(&self) -> Result<()> {
        let expected = param_count(&self.arch)?;
        if self.values.len() != expected {
            return Err(CoreError::InvalidArgument(format!(
                "parameter vector length {} does not match architecture ({expected})",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Parameters as a flat f64 compute field (1 x len x 1).
    pub fn to_field(&self) -> RField {
        RField {
            h: 1,
            w: self.values.len().max(1),
            c: 1,
            data: if self.values.is_empty() {
                vec![0.0]
            } else {
                self.values.iter().map(|&v| v as f64).collect()
            },
        }
    }

    pub fn set_from_f64(&mut self, data: &[f64]) {
        debug_assert_eq!(data.len(), self.values.len());
        for (dst, &src) in self.values.iter_mut().zip(data) {
            *dst = src as f32;
        }
    }
}

/// Initializes processor parameters.
///
/// Hidden-layer weights are drawn from the symmetric fan-in-scaled uniform
/// `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (variance `1/fan_in`); biases and the
/// whole final layer are zero, so the residual stack starts as the identity.
/// Deterministic in `seed`.
pub fn init_processor(arch: &ProcessorArch, seed: u64) -> Result<ProcessorParams> {
    arch.validate()?;
    let n = param_count(arch)?;
    let mut values = vec![0f32; n];
    if arch.kind == ProcessorKind::ConvStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metas = arch.layers();
        let last = metas.len() - 1;
        for (li, meta) in metas.iter().enumerate() {
            if li == last {
                break; // final layer stays zero
            }
            let fan_in = (meta.k * meta.k * meta.c_in) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let w_len = meta.k * meta.k * meta.c_in * meta.c_out;
            for v in values[meta.w_offset..meta.w_offset + w_len].iter_mut() {
                *v = rng.gen_range(-bound..bound) as f32;
            }
        }
    }
    Ok(ProcessorParams { arch: arch.clone(), values })
}

/// Runs the conv stack on an execution context (shared by inference and
/// training). `params` must be the flat field of [`ProcessorParams::to_field`].
pub fn conv_stack_forward<C: Cx>(cx: &mut C, x: &C::R, params: &C::R, arch: &ProcessorArch) -> C::R {
    let metas = arch.layers();
    let last = metas.len() - 1;
    let mut h = x.clone();
    for (li, meta) in metas.iter().enumerate() {
        h = cx.conv2d(&h, params, *meta);
        if li != last {
            h = cx.leaky_relu(&h, LEAKY_SLOPE);
        }
    }
    cx.add(&h, x)
}

/// Applies a processor to an image (inference path).
pub fn apply_processor(p: &ProcessorParams, x: &Tensor3) -> Result<Tensor3> {
    p.validate()?;
    let xf = RField::from_tensor(x);
    apply_processor_field(p, &xf)?.to_tensor()
}

/// Field-level processor application; used by the pipeline and by
/// plug-and-play as the denoiser slot.
pub fn apply_processor_field(p: &ProcessorParams, x: &RField) -> Result<RField> {
    match p.arch.kind {
        ProcessorKind::Identity => Ok(x.clone()),
        ProcessorKind::ConvStack => {
            if p.arch.widths[0] != x.c {
                return Err(CoreError::shape_mismatch(
                    format!("{} channels", p.arch.widths[0]),
                    format!("{} channels", x.c),
                ));
            }
            let mut cx = crate::autodiff::Eval;
            let xi = cx.const_r(x.clone());
            let pf = cx.const_r(p.to_field());
            let out = conv_stack_forward(&mut cx, &xi, &pf, &p.arch);
            Ok((*out).clone())
        }
        ProcessorKind::MedianSmoother => Ok(median_3x3(x)),
        ProcessorKind::TvSmoother => Ok(crate::inversion::tv_prox(x, 0.05, 10)),
    }
}

/// 3x3 median filter per channel with clamped boundaries.
pub fn median_3x3(x: &RField) -> RField {
    let (h, w, c) = x.shape();
    let mut out = RField::zeros(h, w, c);
    let mut window = [0f64; 9];
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for col in 0..w {
                let mut n = 0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (col as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        window[n] = src[rr * w + cc];
                        n += 1;
                    }
                }
                window.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                dst[r * w + col] = window[4];
            }
        }
    }
    out
}
