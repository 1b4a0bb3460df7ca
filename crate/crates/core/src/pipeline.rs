//! The modular reconstruction pipeline: trainable pre-processor, physics-based
//! camera inversion, trainable post-processor.
//!
//! Measurements are normalized per example to unit maximum before the
//! pipeline; the normalization scalar is reapplied to the inversion output as
//! a known (non-trainable) constant, so both the intermediate inversion image
//! and the final output live in scene units.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Cx, Eval, Tape, RId};
use crate::error::{CoreError, Result};
use crate::field::RField;
use crate::inversion::{
    admm_run, default_params_for, fista_reconstruct, pnp_reconstruct, tikhonov_forward,
    unrolled_handles, KernelCx, UnrolledParams, ADMM100_ITERS,
};
use crate::operators::{plan_kernel, FrequencyKernel};
use crate::processors::{conv_stack_forward, ProcessorKind, ProcessorParams};
use crate::tensor::Tensor3;

/// Which inversion block the pipeline uses, with its parameters.
#[derive(Clone, Debug)]
pub enum InversionState {
    /// 100 fixed-hyperparameter iterations, defaults derived per measurement.
    Admm100,
    Unrolled(UnrolledParams),
    Tikhonov { eps: f64 },
    Fista { tau: f64, n_iter: usize, tv_inner_iters: usize },
    Pnp { rho: f64, n_iter: usize, denoiser: ProcessorParams },
}

impl InversionState {
    pub fn kind_name(&self) -> &'static str {
        match self {
            InversionState::Admm100 => "admm100",
            InversionState::Unrolled(_) => "unrolled",
            InversionState::Tikhonov { .. } => "tikhonov",
            InversionState::Fista { .. } => "fista",
            InversionState::Pnp { .. } => "pnp",
        }
    }

    /// Learnable parameter count of the inversion block.
    pub fn param_count(&self) -> usize {
        match self {
            InversionState::Unrolled(p) => p.param_count(),
            _ => 0,
        }
    }
}

/// Full pipeline parameters: processors, inversion, and the PSF.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub pre: ProcessorParams,
    pub inversion: InversionState,
    pub post: ProcessorParams,
    /// PSF the kernel is planned from (a trainable leaf for the
    /// trainable-inversion analog).
    pub psf: Tensor3,
}

/// Which blocks receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub pre: bool,
    pub inversion: bool,
    pub post: bool,
    pub psf: bool,
    pub eps: bool,
}

impl PipelineState {
    pub fn plan(&self) -> Result<FrequencyKernel> {
        plan_kernel(&self.psf)
    }

    /// Total learnable parameter count over `trainable`.
    pub fn param_count(&self, trainable: &TrainableSet) -> usize {
        let mut n = 0;
        if trainable.pre {
            n += self.pre.values.len();
        }
        if trainable.inversion {
            n += self.inversion.param_count();
        }
        if trainable.post {
            n += self.post.values.len();
        }
        if trainable.psf {
            n += self.psf.len();
        }
        if trainable.eps && matches!(self.inversion, InversionState::Tikhonov { .. }) {
            n += 1;
        }
        n
    }

    /// Validates that the trainable selection is differentiable.
    pub fn validate_trainable(&self, t: &TrainableSet) -> Result<()> {
        let differentiable_inv = matches!(
            self.inversion,
            InversionState::Unrolled(_) | InversionState::Tikhonov { .. }
        );
        let needs_grad_through_inv = t.pre || t.psf;
        if (needs_grad_through_inv || t.inversion || t.eps) && !differentiable_inv {
            return Err(CoreError::InvalidArgument(format!(
                "inversion kind '{}' is not differentiable; training requires 'unrolled' or 'tikhonov'",
                self.inversion.kind_name()
            )));
        }
        if t.inversion && !matches!(self.inversion, InversionState::Unrolled(_)) {
            return Err(CoreError::InvalidArgument(
                "trainable inversion hyperparameters require the unrolled solver".into(),
            ));
        }
        if t.eps && !matches!(self.inversion, InversionState::Tikhonov { .. }) {
            return Err(CoreError::InvalidArgument(
                "trainable eps requires the tikhonov solver".into(),
            ));
        }
        for (name, p, active) in [("pre", &self.pre, t.pre), ("post", &self.post, t.post)] {
            if active && !matches!(p.arch.kind, ProcessorKind::ConvStack | ProcessorKind::Identity) {
                return Err(CoreError::InvalidArgument(format!(
                    "{name}-processor kind is not trainable"
                )));
            }
        }
        Ok(())
    }
}

/// Outputs of one pipeline run.
pub struct PipelineOutput {
    /// Final reconstruction (scene units).
    pub reconstruction: Tensor3,
    /// Pre-processor output (normalized measurement domain).
    pub pre_out: Tensor3,
    /// Camera-inversion output rescaled to scene units.
    pub inversion_out: Tensor3,
}

fn normalize_measurement(y: &Tensor3) -> Result<(RField, f64)> {
    let s = y.max_value() as f64;
    if !(s > 0.0) {
        return Err(CoreError::InvalidArgument("measurement has no positive values".into()));
    }
    let mut f = RField::from_tensor(y);
    f.data.iter_mut().for_each(|v| *v /= s);
    Ok((f, s))
}

fn apply_processor_cx<C: Cx>(
    cx: &mut C,
    x: &C::R,
    params: &Option<C::R>,
    p: &ProcessorParams,
) -> Result<C::R> {
    match p.arch.kind {
        ProcessorKind::Identity => Ok(x.clone()),
        ProcessorKind::ConvStack => {
            let handle = params
                .as_ref()
                .ok_or_else(|| CoreError::InvalidArgument("missing processor params handle".into()))?;
            Ok(conv_stack_forward(cx, x, handle, &p.arch))
        }
        // Non-learned smoothers run as fixed maps outside the graph.
        ProcessorKind::MedianSmoother | ProcessorKind::TvSmoother => {
            let v = crate::processors::apply_processor_field(p, cx.value_r(x))?;
            Ok(cx.const_r(v))
        }
    }
}

/// Handles for the differentiable pipeline blocks on some context.
pub struct PipelineHandles<C: Cx> {
    pub pre: Option<C::R>,
    pub post: Option<C::R>,
    /// Flat raw hyperparameters of the unrolled inversion.
    pub inv_raw: Option<C::R>,
    /// Raw (softplus-domain) Tikhonov regularizer.
    pub raw_eps: Option<C::S>,
    pub kernel: KernelCx<C>,
}

/// Differentiable forward pass (unrolled or Tikhonov inversion only).
///
/// Returns (final output, inversion output), both in scene units.
pub fn pipeline_forward_cx<C: Cx>(
    cx: &mut C,
    state: &PipelineState,
    handles: &PipelineHandles<C>,
    y_norm: &C::R,
    scale: f64,
) -> Result<(C::R, C::R)> {
    let pre_out = apply_processor_cx(cx, y_norm, &handles.pre, &state.pre)?;
    let inv_out = match &state.inversion {
        InversionState::Unrolled(p) => {
            let raw = handles
                .inv_raw
                .as_ref()
                .ok_or_else(|| CoreError::InvalidArgument("missing unrolled params handle".into()))?;
            let hp = unrolled_handles(cx, raw, p.n_iter);
            admm_run(cx, &handles.kernel, &pre_out, &hp, None, None, None)?.estimate
        }
        InversionState::Tikhonov { .. } => {
            let raw = handles
                .raw_eps
                .as_ref()
                .ok_or_else(|| CoreError::InvalidArgument("missing eps handle".into()))?;
            let eps = cx.softplus(raw);
            tikhonov_forward(cx, &handles.kernel, &pre_out, &eps)
        }
        other => {
            return Err(CoreError::InvalidArgument(format!(
                "inversion kind '{}' has no differentiable forward",
                other.kind_name()
            )))
        }
    };
    let inv_scaled = cx.scale(&inv_out, scale);
    let post_out = apply_processor_cx(cx, &inv_scaled, &handles.post, &state.post)?;
    Ok((post_out, inv_scaled))
}

/// Inference-path pipeline run supporting every inversion kind.
pub fn run_pipeline(
    state: &PipelineState,
    kernel: &FrequencyKernel,
    y_raw: &Tensor3,
) -> Result<PipelineOutput> {
    let (y_norm, scale) = normalize_measurement(y_raw)?;
    let mut cx = Eval;
    let y_in = cx.const_r(y_norm);
    let pre_handle = match state.pre.arch.kind {
        ProcessorKind::ConvStack => Some(cx.const_r(state.pre.to_field())),
        _ => None,
    };
    let pre_out = apply_processor_cx(&mut cx, &y_in, &pre_handle, &state.pre)?;
    let pre_tensor = cx.value_r(&pre_out).to_tensor()?;

    let inv_scaled: Tensor3 = match &state.inversion {
        InversionState::Admm100 => {
            let params = default_params_for(&pre_tensor, kernel, ADMM100_ITERS)?;
            let (out, _) = crate::inversion::admm_reconstruct(&pre_tensor, kernel, &params, None)?;
            out.map(|v| v * scale as f32)
        }
        InversionState::Unrolled(p) => {
            let kcx = KernelCx::fixed(&mut cx, kernel, y_raw.channels());
            let raw = cx.const_r(p.to_field());
            let hp = unrolled_handles(&mut cx, &raw, p.n_iter);
            let out = admm_run(&mut cx, &kcx, &pre_out, &hp, None, None, None)?;
            let scaled = cx.scale(&out.estimate, scale);
            cx.value_r(&scaled).to_tensor()?
        }
        InversionState::Tikhonov { eps } => {
            let kcx = KernelCx::fixed(&mut cx, kernel, y_raw.channels());
            let eh = cx.const_s(*eps);
            let out = tikhonov_forward(&mut cx, &kcx, &pre_out, &eh);
            let scaled = cx.scale(&out, scale);
            cx.value_r(&scaled).to_tensor()?
        }
        InversionState::Fista { tau, n_iter, tv_inner_iters } => {
            let (out, _) = fista_reconstruct(&pre_tensor, kernel, *tau, *n_iter, None, *tv_inner_iters)?;
            out.map(|v| v * scale as f32)
        }
        InversionState::Pnp { rho, n_iter, denoiser } => {
            let (out, _) = pnp_reconstruct(&pre_tensor, kernel, denoiser, *rho, *n_iter)?;
            out.map(|v| v * scale as f32)
        }
    };

    let inv_handle = cx.const_r(RField::from_tensor(&inv_scaled));
    let post_handle = match state.post.arch.kind {
        ProcessorKind::ConvStack => Some(cx.const_r(state.post.to_field())),
        _ => None,
    };
    let post_out = apply_processor_cx(&mut cx, &inv_handle, &post_handle, &state.post)?;
    Ok(PipelineOutput {
        reconstruction: cx.value_r(&post_out).to_tensor()?,
        pre_out: pre_tensor,
        inversion_out: inv_scaled,
    })
}

/// Builds tape handles for one training example, registering leaves for the
/// trainable blocks (in the flat layout order: pre, inversion, post, psf,
/// eps) and constants for the rest.
pub fn build_tape_handles(
    tape: &mut Tape,
    state: &PipelineState,
    kernel: &FrequencyKernel,
    trainable: &TrainableSet,
) -> Result<(PipelineHandles<Tape>, Vec<RId>)> {
    state.validate_trainable(trainable)?;
    let mut leaves = Vec::new();
    let pre = match state.pre.arch.kind {
        ProcessorKind::ConvStack => {
            let f = state.pre.to_field();
            Some(if trainable.pre {
                let id = tape.param_r(f);
                leaves.push(id);
                id
            } else {
                tape.const_r(f)
            })
        }
        _ => None,
    };
    let inv_raw = match &state.inversion {
        InversionState::Unrolled(p) => {
            let f = p.to_field();
            Some(if trainable.inversion {
                let id = tape.param_r(f);
                leaves.push(id);
                id
            } else {
                tape.const_r(f)
            })
        }
        _ => None,
    };
    let post = match state.post.arch.kind {
        ProcessorKind::ConvStack => {
            let f = state.post.to_field();
            Some(if trainable.post {
                let id = tape.param_r(f);
                leaves.push(id);
                id
            } else {
                tape.const_r(f)
            })
        }
        _ => None,
    };
    let kernel_cx = if trainable.psf {
        let psf_leaf = tape.param_r(RField::from_tensor(&state.psf));
        leaves.push(psf_leaf);
        KernelCx::from_psf_leaf(tape, &psf_leaf, kernel)
    } else {
        KernelCx::fixed(tape, kernel, state.psf.channels())
    };
    let raw_eps = match &state.inversion {
        InversionState::Tikhonov { eps } => {
            let raw = crate::autodiff::softplus_inv(eps.max(1e-300));
            let f = RField { h: 1, w: 1, c: 1, data: vec![raw] };
            if trainable.eps {
                let id = tape.param_r(f);
                leaves.push(id);
                Some(tape.index_s(&id, 0))
            } else {
                let id = tape.const_r(f);
                Some(tape.index_s(&id, 0))
            }
        }
        _ => None,
    };
    Ok((PipelineHandles { pre, post, inv_raw, raw_eps, kernel: kernel_cx }, leaves))
}

/// Flat parameter vector over the trainable blocks, in layout order.
pub fn collect_params(state: &PipelineState, trainable: &TrainableSet) -> Vec<f64> {
    let mut out = Vec::new();
    if trainable.pre {
        out.extend(state.pre.values.iter().map(|&v| v as f64));
    }
    if trainable.inversion {
        if let InversionState::Unrolled(p) = &state.inversion {
            out.extend_from_slice(&p.to_field().data);
        }
    }
    if trainable.post {
        out.extend(state.post.values.iter().map(|&v| v as f64));
    }
    if trainable.psf {
        out.extend(state.psf.data().iter().map(|&v| v as f64));
    }
    if trainable.eps {
        if let InversionState::Tikhonov { eps } = &state.inversion {
            out.push(crate::autodiff::softplus_inv(eps.max(1e-300)));
        }
    }
    out
}

/// Writes a flat parameter vector back into the state blocks.
pub fn apply_params(state: &mut PipelineState, trainable: &TrainableSet, flat: &[f64]) -> Result<()> {
    let mut cursor = 0;
    let mut take = |n: usize| -> Result<&[f64]> {
        if cursor + n > flat.len() {
            return Err(CoreError::InvalidArgument("flat parameter vector too short".into()));
        }
        let s = &flat[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };
    if trainable.pre {
        let n = state.pre.values.len();
        let s = take(n)?;
        state.pre.set_from_f64(s);
    }
    if trainable.inversion {
        if let InversionState::Unrolled(p) = &mut state.inversion {
            let s = take(4 * p.n_iter)?;
            *p = UnrolledParams::from_flat(p.n_iter, s)?;
        }
    }
    if trainable.post {
        let n = state.post.values.len();
        let s = take(n)?;
        state.post.set_from_f64(s);
    }
    if trainable.psf {
        let n = state.psf.len();
        let s = take(n)?;
        for (dst, &src) in state.psf.data_mut().iter_mut().zip(s) {
            *dst = src as f32;
        }
    }
    if trainable.eps {
        if let InversionState::Tikhonov { eps } = &mut state.inversion {
            let s = take(1)?;
            *eps = crate::autodiff::softplus_val(s[0]);
        }
    }
    if cursor != flat.len() {
        return Err(CoreError::InvalidArgument(format!(
            "flat parameter vector has {} unused values",
            flat.len() - cursor
        )));
    }
    Ok(())
}

/// Normalizes a raw measurement for the pipeline; exposed for training.
pub fn normalized_input(y_raw: &Tensor3) -> Result<(RField, f64)> {
    normalize_measurement(y_raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::processors::{init_processor, ProcessorArch};
    use crate::sim::{simulate, synth_psf, synth_scene};

    fn identity_p() -> ProcessorParams {
        ProcessorParams { arch: ProcessorArch::identity(), values: vec![] }
    }

    #[test]
    fn identity_pipeline_with_delta_psf_recovers_scene() {
        let mut delta = Tensor3::zeros(16, 16, 1);
        delta.set(8, 8, 0, 1.0);
        let kernel = plan_kernel(&delta).unwrap();
        let scene = synth_scene(31, (16, 16, 1), 5);
        let y = simulate(&scene, &kernel).unwrap();
        let state = PipelineState {
            pre: identity_p(),
            inversion: InversionState::Unrolled(UnrolledParams::uniform(10, 1e-2, 1e-8, 1e-8, 1e-14)),
            post: identity_p(),
            psf: delta,
        };
        let out = run_pipeline(&state, &kernel, &y).unwrap();
        let p = psnr(&scene, &out.reconstruction, 1.0).unwrap();
        assert!(p >= 40.0, "psnr {p}");
        // Identity processors pass values through.
        assert_eq!(out.inversion_out, out.reconstruction);
    }

    #[test]
    fn fresh_conv_processors_do_not_change_the_pipeline() {
        let psf = synth_psf(33, (16, 16, 3), 2.0).unwrap();
        let kernel = plan_kernel(&psf).unwrap();
        let scene = synth_scene(34, (16, 16, 3), 5);
        let y = simulate(&scene, &kernel).unwrap();
        let inv = InversionState::Unrolled(UnrolledParams::uniform(5, 1e-4, 1e-4, 1e-4, 1e-6));
        let plain = PipelineState {
            pre: identity_p(),
            inversion: inv.clone(),
            post: identity_p(),
            psf: psf.clone(),
        };
        let fresh = PipelineState {
            pre: init_processor(&ProcessorArch::default_conv(3), 1).unwrap(),
            inversion: inv,
            post: init_processor(&ProcessorArch::default_conv(3), 2).unwrap(),
            psf,
        };
        let a = run_pipeline(&plain, &kernel, &y).unwrap();
        let b = run_pipeline(&fresh, &kernel, &y).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
    }

    #[test]
    fn trainable_validation_rejects_nondifferentiable_kinds() {
        let psf = synth_psf(35, (8, 8, 1), 2.0).unwrap();
        let state = PipelineState {
            pre: identity_p(),
            inversion: InversionState::Fista { tau: 1e-4, n_iter: 10, tv_inner_iters: 10 },
            post: identity_p(),
            psf,
        };
        let t = TrainableSet { pre: true, ..Default::default() };
        assert!(state.validate_trainable(&t).is_err());
        let t = TrainableSet { eps: true, ..Default::default() };
        assert!(state.validate_trainable(&t).is_err());
    }

    #[test]
    fn collect_apply_roundtrip() {
        let psf = synth_psf(36, (8, 8, 1), 2.0).unwrap();
        let mut state = PipelineState {
            pre: init_processor(&ProcessorArch::default_conv(1), 3).unwrap(),
            inversion: InversionState::Unrolled(UnrolledParams::uniform(4, 1e-4, 2e-4, 3e-4, 1e-5)),
            post: init_processor(&ProcessorArch::default_conv(1), 4).unwrap(),
            psf,
        };
        let trainable = TrainableSet { pre: true, inversion: true, post: true, psf: true, eps: false };
        let flat = collect_params(&state, &trainable);
        assert_eq!(flat.len(), state.param_count(&trainable));
        let mut bumped = flat.clone();
        for v in bumped.iter_mut() {
            *v += 0.25;
        }
        apply_params(&mut state, &trainable, &bumped).unwrap();
        let flat2 = collect_params(&state, &trainable);
        for (a, b) in bumped.iter().zip(&flat2) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
