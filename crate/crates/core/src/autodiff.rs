//! Reverse-mode differentiation over the pipeline's primitive operations.
//!
//! The pipeline graph is static and its primitive set is small, so gradients
//! are composed from hand-written adjoint rules over tensor-level ops instead
//! of a scalar tape. Two execution contexts implement the same op set:
//!
//! * [`Tape`] records every node (define-by-run) and can run [`Tape::backward`];
//! * [`Eval`] executes the identical kernels without retaining a graph.
//!
//! Solvers are written once, generically over [`Cx`], so the recorded forward
//! pass is bit-identical to the plain one.
//!
//! Subgradient conventions: `max(0, .)` uses 0 at the kink, and so does the
//! soft-threshold; finite-difference checks must exclude kink neighborhoods.

use std::rc::Rc;
use std::sync::Arc;

use crate::fft::plan_2d;
use crate::field::{self, CField, CropGeom, RField, TransferData};

/// Kernel transfer used inside solvers: either a fixed planned spectrum or a
/// spectrum that is itself a differentiable node (trainable PSF).
pub enum KTransfer<C: Cx + ?Sized> {
    Fixed(Arc<TransferData>),
    Leaf(C::C),
}

impl<C: Cx + ?Sized> Clone for KTransfer<C> {
    fn clone(&self) -> Self {
        match self {
            KTransfer::Fixed(t) => KTransfer::Fixed(t.clone()),
            KTransfer::Leaf(h) => KTransfer::Leaf(h.clone()),
        }
    }
}

/// Geometry of one convolution layer inside a flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayerMeta {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Execution context for the differentiable primitive set.
pub trait Cx {
    type R: Clone;
    type C: Clone;
    type S: Clone;

    fn const_r(&mut self, v: RField) -> Self::R;
    fn const_s(&mut self, v: f64) -> Self::S;

    /// Reads a real node's value (off-graph diagnostic).
    fn value_r<'a>(&'a self, h: &'a Self::R) -> &'a RField;
    fn value_s(&self, h: &Self::S) -> f64;

    fn add(&mut self, a: &Self::R, b: &Self::R) -> Self::R;
    fn sub(&mut self, a: &Self::R, b: &Self::R) -> Self::R;
    fn scale(&mut self, a: &Self::R, k: f64) -> Self::R;
    fn mul_s(&mut self, a: &Self::R, s: &Self::S) -> Self::R;
    fn hadamard(&mut self, a: &Self::R, b: &Self::R) -> Self::R;
    fn recip(&mut self, a: &Self::R) -> Self::R;
    fn broadcast_s(&mut self, s: &Self::S, shape: (usize, usize, usize)) -> Self::R;
    fn crop(&mut self, a: &Self::R, geom: CropGeom) -> Self::R;
    fn pad(&mut self, a: &Self::R, geom: CropGeom) -> Self::R;
    fn relu(&mut self, a: &Self::R) -> Self::R;
    fn leaky_relu(&mut self, a: &Self::R, slope: f64) -> Self::R;
    fn soft_threshold(&mut self, v: &Self::R, t: &Self::S) -> Self::R;
    fn psi(&mut self, a: &Self::R) -> Self::R;
    fn psit(&mut self, a: &Self::R) -> Self::R;
    fn conv2d(&mut self, x: &Self::R, params: &Self::R, meta: ConvLayerMeta) -> Self::R;
    /// Divides by the maximum value. The argmax is treated as fixed by the
    /// linearization; the caller guarantees a positive maximum.
    fn scale_unit_max(&mut self, a: &Self::R) -> Self::R;
    /// Embeds a sensor-sized field into the padded grid, circularly shifted so
    /// `shift` lands at the origin (PSF centering; the shift itself is fixed).
    fn embed_shift(&mut self, a: &Self::R, padded: (usize, usize), shift: (usize, usize)) -> Self::R;
    /// Per-channel division by the channel sum.
    fn l1_normalize(&mut self, a: &Self::R) -> Self::R;
    fn index_s(&mut self, a: &Self::R, i: usize) -> Self::S;

    fn fft2(&mut self, a: &Self::R) -> Self::C;
    fn ifft2_re(&mut self, z: &Self::C) -> Self::R;
    fn mul_t(&mut self, z: &Self::C, t: &KTransfer<Self>, conj: bool) -> Self::C;
    fn cadd(&mut self, a: &Self::C, b: &Self::C) -> Self::C;
    /// |T|^2 as a real field (channel count of the transfer).
    fn transfer_abs2(&mut self, t: &KTransfer<Self>) -> Self::R;
    fn cmul_real(&mut self, z: &Self::C, r: &Self::R) -> Self::C;

    fn softplus(&mut self, s: &Self::S) -> Self::S;
    fn add_ss(&mut self, a: &Self::S, b: &Self::S) -> Self::S;
    fn div_ss(&mut self, a: &Self::S, b: &Self::S) -> Self::S;
    fn scale_s(&mut self, a: &Self::S, k: f64) -> Self::S;

    /// Mean squared error between two real nodes.
    fn mse_loss(&mut self, a: &Self::R, b: &Self::R) -> Self::S;
}

// ---------------------------------------------------------------------------
// Eager context
// ---------------------------------------------------------------------------

/// Executes primitives immediately without recording; handles are values.
#[derive(Default)]
pub struct Eval;

impl Cx for Eval {
    type R = Rc<RField>;
    type C = Rc<CField>;
    type S = f64;

    fn const_r(&mut self, v: RField) -> Self::R {
        Rc::new(v)
    }
    fn const_s(&mut self, v: f64) -> Self::S {
        v
    }
    fn value_r<'a>(&'a self, h: &'a Self::R) -> &'a RField {
        h
    }
    fn value_s(&self, h: &Self::S) -> f64 {
        *h
    }
    fn add(&mut self, a: &Self::R, b: &Self::R) -> Self::R {
        Rc::new(field::add(a, b))
    }
    fn sub(&mut self, a: &Self::R, b: &Self::R) -> Self::R {
        Rc::new(field::sub(a, b))
    }
    fn scale(&mut self, a: &Self::R, k: f64) -> Self::R {
        Rc::new(field::scale(a, k))
    }
    fn mul_s(&mut self, a: &Self::R, s: &Self::S) -> Self::R {
        Rc::new(field::scale(a, *s))
    }
    fn hadamard(&mut self, a: &Self::R, b: &Self::R) -> Self::R {
        Rc::new(field::hadamard(a, b))
    }
    fn recip(&mut self, a: &Self::R) -> Self::R {
        Rc::new(field::recip(a))
    }
    fn broadcast_s(&mut self, s: &Self::S, shape: (usize, usize, usize)) -> Self::R {
        Rc::new(RField {
            h: shape.0,
            w: shape.1,
            c: shape.2,
            data: vec![*s; shape.0 * shape.1 * shape.2],
        })
    }
    fn crop(&mut self, a: &Self::R, geom: CropGeom) -> Self::R {
        Rc::new(field::extract(a, &geom))
    }
    fn pad(&mut self, a: &Self::R, geom: CropGeom) -> Self::R {
        Rc::new(field::embed(a, &geom))
    }
    fn relu(&mut self, a: &Self::R) -> Self::R {
        Rc::new(field::relu(a))
    }
    fn leaky_relu(&mut self, a: &Self::R, slope: f64) -> Self::R {
        Rc::new(field::leaky_relu(a, slope))
    }
    fn soft_threshold(&mut self, v: &Self::R, t: &Self::S) -> Self::R {
        Rc::new(field::soft_threshold(v, *t))
    }
    fn psi(&mut self, a: &Self::R) -> Self::R {
        Rc::new(field::psi(a))
    }
    fn psit(&mut self, a: &Self::R) -> Self::R {
        Rc::new(field::psit(a))
    }
    fn conv2d(&mut self, x: &Self::R, params: &Self::R, meta: ConvLayerMeta) -> Self::R {
        let w = &params.data[meta.w_offset..meta.w_offset + meta.c_out * meta.c_in * meta.k * meta.k];
        let b = &params.data[meta.b_offset..meta.b_offset + meta.c_out];
        Rc::new(field::conv2d(x, w, b, meta.c_out, meta.k))
    }
    fn scale_unit_max(&mut self, a: &Self::R) -> Self::R {
        let m = a.max_value();
        Rc::new(field::scale(a, 1.0 / m))
    }
    fn embed_shift(&mut self, a: &Self::R, padded: (usize, usize), shift: (usize, usize)) -> Self::R {
        Rc::new(crate::operators::embed_psf_shifted(a, padded.0, padded.1, shift))
    }
    fn l1_normalize(&mut self, a: &Self::R) -> Self::R {
        let mut out = (**a).clone();
        for ch in 0..out.c {
            let p = out.plane_mut(ch);
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
        }
        Rc::new(out)
    }
    fn index_s(&mut self, a: &Self::R, i: usize) -> Self::S {
        a.data[i]
    }
    fn fft2(&mut self, a: &Self::R) -> Self::C {
        let plan = plan_2d(a.h, a.w);
        Rc::new(field::fft2(&plan, a))
    }
    fn ifft2_re(&mut self, z: &Self::C) -> Self::R {
        let plan = plan_2d(z.h, z.w);
        Rc::new(field::ifft2_re(&plan, z))
    }
    fn mul_t(&mut self, z: &Self::C, t: &KTransfer<Self>, conj: bool) -> Self::C {
        match t {
            KTransfer::Fixed(td) => Rc::new(field::mul_transfer(z, td, conj)),
            KTransfer::Leaf(spec) => {
                if conj {
                    Rc::new(field::cmul(z, &field::conj(spec)))
                } else {
                    Rc::new(field::cmul(z, spec))
                }
            }
        }
    }
    fn cadd(&mut self, a: &Self::C, b: &Self::C) -> Self::C {
        let mut out = (**a).clone();
        for (o, v) in out.data.iter_mut().zip(&b.data) {
            *o += v;
        }
        Rc::new(out)
    }
    fn transfer_abs2(&mut self, t: &KTransfer<Self>) -> Self::R {
        match t {
            KTransfer::Fixed(td) => {
                Rc::new(RField { h: td.h, w: td.w, c: td.c, data: td.abs2.clone() })
            }
            KTransfer::Leaf(spec) => Rc::new(field::cabs2(spec)),
        }
    }
    fn cmul_real(&mut self, z: &Self::C, r: &Self::R) -> Self::C {
        Rc::new(field::cmul_real(z, r))
    }
    fn softplus(&mut self, s: &Self::S) -> Self::S {
        softplus_val(*s)
    }
    fn add_ss(&mut self, a: &Self::S, b: &Self::S) -> Self::S {
        a + b
    }
    fn div_ss(&mut self, a: &Self::S, b: &Self::S) -> Self::S {
        a / b
    }
    fn scale_s(&mut self, a: &Self::S, k: f64) -> Self::S {
        a * k
    }
    fn mse_loss(&mut self, a: &Self::R, b: &Self::R) -> Self::S {
        field::mse(a, b)
    }
}

/// Numerically stable softplus `ln(1 + exp(x))`.
pub fn softplus_val(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus_val`]: `ln(exp(y) - 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Recording tape
// ---------------------------------------------------------------------------

/// Real-node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RId(usize);
/// Complex-node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CId(usize);
/// Scalar-node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SId(usize);

enum Value {
    R(RField),
    C(CField),
    S(f64),
}

enum Op {
    ConstR,
    ConstS,
    ParamR,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MulS(usize, usize),
    Hadamard(usize, usize),
    Recip(usize),
    BroadcastS(usize),
    Crop(usize, CropGeom),
    Pad(usize, CropGeom),
    Relu(usize),
    LeakyRelu(usize, f64),
    SoftThreshold(usize, usize),
    Psi(usize),
    Psit(usize),
    Conv2d { x: usize, params: usize, meta: ConvLayerMeta },
    ScaleUnitMax { a: usize, argmax: usize, max: f64 },
    EmbedShift { a: usize, shift: (usize, usize) },
    L1Normalize { a: usize, sums: Vec<f64> },
    IndexS(usize, usize),
    Fft2(usize),
    Ifft2Re(usize),
    MulTFixed { z: usize, t: Arc<TransferData>, conj: bool },
    MulTLeaf { z: usize, t: usize, conj: bool },
    CAdd(usize, usize),
    Cabs2(usize),
    CMulReal { z: usize, r: usize },
    Softplus(usize),
    AddSS(usize, usize),
    DivSS(usize, usize),
    ScaleS(usize, f64),
    MseLoss(usize, usize),
}

struct Node {
    op: Op,
    val: Value,
}

/// Wengert list of tensor-level primitives; node values stay alive until
/// [`Tape::backward`] consumes them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

enum Grad {
    R(RField),
    C(CField),
    S(f64),
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param_r(&mut self, v: RField) -> RId {
        self.push_r(Op::ParamR, v)
    }

    fn push_r(&mut self, op: Op, v: RField) -> RId {
        self.nodes.push(Node { op, val: Value::R(v) });
        RId(self.nodes.len() - 1)
    }

    fn push_c(&mut self, op: Op, v: CField) -> CId {
        self.nodes.push(Node { op, val: Value::C(v) });
        CId(self.nodes.len() - 1)
    }

    fn push_s(&mut self, op: Op, v: f64) -> SId {
        self.nodes.push(Node { op, val: Value::S(v) });
        SId(self.nodes.len() - 1)
    }

    fn r(&self, id: usize) -> &RField {
        match &self.nodes[id].val {
            Value::R(f) => f,
            _ => panic!("node {id} is not real"),
        }
    }

    fn c(&self, id: usize) -> &CField {
        match &self.nodes[id].val {
            Value::C(f) => f,
            _ => panic!("node {id} is not complex"),
        }
    }

    fn s(&self, id: usize) -> f64 {
        match &self.nodes[id].val {
            Value::S(v) => *v,
            _ => panic!("node {id} is not scalar"),
        }
    }

    /// Reverse sweep from a scalar loss; returns the gradients of the
    /// requested real-valued leaves, in order. Leaves outside `wrt` never
    /// appear in the output.
    pub fn backward(&self, loss: SId, wrt: &[RId]) -> Vec<RField> {
        let mut grads: Vec<Option<Grad>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Grad::S(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match (&self.nodes[id].op, &g) {
                (Op::ConstR | Op::ConstS, _) => {}
                (Op::ParamR, _) => {
                    grads[id] = Some(g); // retained for extraction below
                }
                (Op::BroadcastS(s), Grad::R(gr)) => {
                    let total: f64 = gr.data.iter().sum();
                    self.acc_s(&mut grads, *s, total);
                }
                (Op::Add(a, b), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, gr.clone());
                    self.acc_r(&mut grads, *b, gr.clone());
                }
                (Op::Sub(a, b), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, gr.clone());
                    self.acc_r(&mut grads, *b, field::scale(gr, -1.0));
                }
                (Op::Scale(a, k), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::scale(gr, *k));
                }
                (Op::MulS(a, s), Grad::R(gr)) => {
                    let sv = self.s(*s);
                    self.acc_s(&mut grads, *s, field::dot(gr, self.r(*a)));
                    self.acc_r(&mut grads, *a, field::scale(gr, sv));
                }
                (Op::Hadamard(a, b), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::hadamard(gr, self.r(*b)));
                    self.acc_r(&mut grads, *b, field::hadamard(gr, self.r(*a)));
                }
                (Op::Recip(a), Grad::R(gr)) => {
                    // y = 1/a, dy/da = -y^2
                    let y = self.r(id);
                    let mut ga = gr.clone();
                    for (gv, yv) in ga.data.iter_mut().zip(&y.data) {
                        *gv *= -yv * yv;
                    }
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::Crop(a, geom), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::embed(gr, geom));
                }
                (Op::Pad(a, geom), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::extract(gr, geom));
                }
                (Op::Relu(a), Grad::R(gr)) => {
                    let input = self.r(*a);
                    let mut ga = gr.clone();
                    for (gv, &iv) in ga.data.iter_mut().zip(&input.data) {
                        if iv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::LeakyRelu(a, slope), Grad::R(gr)) => {
                    let input = self.r(*a);
                    let mut ga = gr.clone();
                    for (gv, &iv) in ga.data.iter_mut().zip(&input.data) {
                        if iv < 0.0 {
                            *gv *= slope;
                        }
                    }
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::SoftThreshold(v, t), Grad::R(gr)) => {
                    let tv = self.s(*t);
                    let input = self.r(*v);
                    let mut gv = gr.clone();
                    let mut gt = 0.0;
                    for (g, &iv) in gv.data.iter_mut().zip(&input.data) {
                        if iv.abs() > tv {
                            gt += -iv.signum() * *g;
                        } else {
                            *g = 0.0;
                        }
                    }
                    self.acc_r(&mut grads, *v, gv);
                    self.acc_s(&mut grads, *t, gt);
                }
                (Op::Psi(a), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::psit(gr));
                }
                (Op::Psit(a), Grad::R(gr)) => {
                    self.acc_r(&mut grads, *a, field::psi(gr));
                }
                (Op::Conv2d { x, params, meta }, Grad::R(gr)) => {
                    let xv = self.r(*x);
                    let pv = self.r(*params);
                    let w =
                        &pv.data[meta.w_offset..meta.w_offset + meta.c_out * meta.c_in * meta.k * meta.k];
                    let (gx, gw, gb) = field::conv2d_backward(xv, w, meta.c_out, meta.k, gr);
                    self.acc_r(&mut grads, *x, gx);
                    let mut gp = RField::zeros(pv.h, pv.w, pv.c);
                    gp.data[meta.w_offset..meta.w_offset + gw.len()].copy_from_slice(&gw);
                    gp.data[meta.b_offset..meta.b_offset + gb.len()].copy_from_slice(&gb);
                    self.acc_r(&mut grads, *params, gp);
                }
                (Op::ScaleUnitMax { a, argmax, max }, Grad::R(gr)) => {
                    let out = self.r(id);
                    let mut ga = field::scale(gr, 1.0 / max);
                    let correction = field::dot(gr, out) / max;
                    ga.data[*argmax] -= correction;
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::EmbedShift { a, shift }, Grad::R(gr)) => {
                    let src = self.r(*a);
                    let (h, w) = (src.h, src.w);
                    let (ph, pw) = (gr.h, gr.w);
                    let mut ga = RField::zeros(h, w, src.c);
                    for ch in 0..src.c {
                        let gp = gr.plane(ch);
                        let dst = ga.plane_mut(ch);
                        for r in 0..h {
                            let sr = (r + ph - shift.0) % ph;
                            for col in 0..w {
                                let sc = (col + pw - shift.1) % pw;
                                dst[r * w + col] = gp[sr * pw + sc];
                            }
                        }
                    }
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::L1Normalize { a, sums }, Grad::R(gr)) => {
                    let out = self.r(id);
                    let mut ga = RField::zeros(out.h, out.w, out.c);
                    for ch in 0..out.c {
                        let gp = gr.plane(ch);
                        let op = out.plane(ch);
                        let s = sums[ch];
                        let inner: f64 = gp.iter().zip(op).map(|(g, o)| g * o).sum();
                        let dst = ga.plane_mut(ch);
                        for i in 0..gp.len() {
                            dst[i] = (gp[i] - inner) / s;
                        }
                    }
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::IndexS(a, i), Grad::S(gs)) => {
                    let src = self.r(*a);
                    let mut ga = RField::zeros(src.h, src.w, src.c);
                    ga.data[*i] = *gs;
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::Fft2(a), Grad::C(gc)) => {
                    // Adjoint of the unnormalized forward DFT restricted to
                    // real inputs: N * Re(ifft(g)).
                    let plan = plan_2d(gc.h, gc.w);
                    let n = (gc.h * gc.w) as f64;
                    let ga = field::scale(&field::ifft2_re(&plan, gc), n);
                    self.acc_r(&mut grads, *a, ga);
                }
                (Op::Ifft2Re(z), Grad::R(gr)) => {
                    // Adjoint of Re(F^-1 .) is (1/N) * fft(g).
                    let plan = plan_2d(gr.h, gr.w);
                    let n = (gr.h * gr.w) as f64;
                    let mut gz = field::fft2(&plan, gr);
                    for v in gz.data.iter_mut() {
                        *v /= n;
                    }
                    self.acc_c(&mut grads, *z, gz);
                }
                (Op::MulTFixed { z, t, conj }, Grad::C(gc)) => {
                    self.acc_c(&mut grads, *z, field::mul_transfer(gc, t, !conj));
                }
                (Op::MulTLeaf { z, t, conj }, Grad::C(gc)) => {
                    let tv = self.c(*t);
                    let zv = self.c(*z);
                    if *conj {
                        // w = z * conj(t): dz = g * t, dt = conj(g) * z
                        self.acc_c(&mut grads, *z, field::cmul(gc, tv));
                        self.acc_c(&mut grads, *t, field::cmul(&field::conj(gc), zv));
                    } else {
                        // w = z * t: dz = g * conj(t), dt = g * conj(z)
                        self.acc_c(&mut grads, *z, field::cmul(gc, &field::conj(tv)));
                        self.acc_c(&mut grads, *t, field::cmul(gc, &field::conj(zv)));
                    }
                }
                (Op::CAdd(a, b), Grad::C(gc)) => {
                    self.acc_c(&mut grads, *a, gc.clone());
                    self.acc_c(&mut grads, *b, gc.clone());
                }
                (Op::Cabs2(z), Grad::R(gr)) => {
                    // r = |z|^2: dz = 2 g z
                    let zv = self.c(*z);
                    let mut gz = zv.clone();
                    for (g, r) in gz.data.iter_mut().zip(&gr.data) {
                        *g *= 2.0 * r;
                    }
                    self.acc_c(&mut grads, *z, gz);
                }
                (Op::CMulReal { z, r }, Grad::C(gc)) => {
                    let zv = self.c(*z);
                    let rv = self.r(*r);
                    self.acc_c(&mut grads, *z, field::cmul_real(gc, rv));
                    // dr = Re(conj(g) .* z)
                    let mut gr_out = RField::zeros(rv.h, rv.w, rv.c);
                    for ((g, zv), d) in gc.data.iter().zip(&zv.data).zip(gr_out.data.iter_mut()) {
                        *d = (g.conj() * zv).re;
                    }
                    self.acc_r(&mut grads, *r, gr_out);
                }
                (Op::Softplus(s), Grad::S(gs)) => {
                    self.acc_s(&mut grads, *s, gs * sigmoid(self.s(*s)));
                }
                (Op::AddSS(a, b), Grad::S(gs)) => {
                    self.acc_s(&mut grads, *a, *gs);
                    self.acc_s(&mut grads, *b, *gs);
                }
                (Op::DivSS(a, b), Grad::S(gs)) => {
                    let av = self.s(*a);
                    let bv = self.s(*b);
                    self.acc_s(&mut grads, *a, gs / bv);
                    self.acc_s(&mut grads, *b, -gs * av / (bv * bv));
                }
                (Op::ScaleS(a, k), Grad::S(gs)) => {
                    self.acc_s(&mut grads, *a, gs * k);
                }
                (Op::MseLoss(a, b), Grad::S(gs)) => {
                    let av = self.r(*a);
                    let bv = self.r(*b);
                    let n = av.data.len() as f64;
                    let mut ga = RField::zeros(av.h, av.w, av.c);
                    for ((d, &x), &y) in ga.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *d = gs * 2.0 * (x - y) / n;
                    }
                    let gb = field::scale(&ga, -1.0);
                    self.acc_r(&mut grads, *a, ga);
                    self.acc_r(&mut grads, *b, gb);
                }
                (_, _) => panic!("gradient type mismatch at node {id}"),
            }
        }

        wrt.iter()
            .map(|leaf| match grads[leaf.0].take() {
                Some(Grad::R(f)) => f,
                _ => {
                    let v = self.r(leaf.0);
                    RField::zeros(v.h, v.w, v.c)
                }
            })
            .collect()
    }

    fn acc_r(&self, grads: &mut [Option<Grad>], id: usize, g: RField) {
        match &mut grads[id] {
            Some(Grad::R(existing)) => {
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(Grad::R(g)),
            _ => panic!("gradient kind clash at node {id}"),
        }
    }

    fn acc_c(&self, grads: &mut [Option<Grad>], id: usize, g: CField) {
        match &mut grads[id] {
            Some(Grad::C(existing)) => {
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(Grad::C(g)),
            _ => panic!("gradient kind clash at node {id}"),
        }
    }

    fn acc_s(&self, grads: &mut [Option<Grad>], id: usize, g: f64) {
        match &mut grads[id] {
            Some(Grad::S(existing)) => *existing += g,
            slot @ None => *slot = Some(Grad::S(g)),
            _ => panic!("gradient kind clash at node {id}"),
        }
    }
}

impl Cx for Tape {
    type R = RId;
    type C = CId;
    type S = SId;

    fn const_r(&mut self, v: RField) -> RId {
        self.push_r(Op::ConstR, v)
    }
    fn const_s(&mut self, v: f64) -> SId {
        self.push_s(Op::ConstS, v)
    }
    fn value_r<'a>(&'a self, h: &'a RId) -> &'a RField {
        self.r(h.0)
    }
    fn value_s(&self, h: &SId) -> f64 {
        self.s(h.0)
    }
    fn add(&mut self, a: &RId, b: &RId) -> RId {
        let v = field::add(self.r(a.0), self.r(b.0));
        self.push_r(Op::Add(a.0, b.0), v)
    }
    fn sub(&mut self, a: &RId, b: &RId) -> RId {
        let v = field::sub(self.r(a.0), self.r(b.0));
        self.push_r(Op::Sub(a.0, b.0), v)
    }
    fn scale(&mut self, a: &RId, k: f64) -> RId {
        let v = field::scale(self.r(a.0), k);
        self.push_r(Op::Scale(a.0, k), v)
    }
    fn mul_s(&mut self, a: &RId, s: &SId) -> RId {
        let v = field::scale(self.r(a.0), self.s(s.0));
        self.push_r(Op::MulS(a.0, s.0), v)
    }
    fn hadamard(&mut self, a: &RId, b: &RId) -> RId {
        let v = field::hadamard(self.r(a.0), self.r(b.0));
        self.push_r(Op::Hadamard(a.0, b.0), v)
    }
    fn recip(&mut self, a: &RId) -> RId {
        let v = field::recip(self.r(a.0));
        self.push_r(Op::Recip(a.0), v)
    }
    fn broadcast_s(&mut self, s: &SId, shape: (usize, usize, usize)) -> RId {
        let v = RField {
            h: shape.0,
            w: shape.1,
            c: shape.2,
            data: vec![self.s(s.0); shape.0 * shape.1 * shape.2],
        };
        self.push_r(Op::BroadcastS(s.0), v)
    }
    fn crop(&mut self, a: &RId, geom: CropGeom) -> RId {
        let v = field::extract(self.r(a.0), &geom);
        self.push_r(Op::Crop(a.0, geom), v)
    }
    fn pad(&mut self, a: &RId, geom: CropGeom) -> RId {
        let v = field::embed(self.r(a.0), &geom);
        self.push_r(Op::Pad(a.0, geom), v)
    }
    fn relu(&mut self, a: &RId) -> RId {
        let v = field::relu(self.r(a.0));
        self.push_r(Op::Relu(a.0), v)
    }
    fn leaky_relu(&mut self, a: &RId, slope: f64) -> RId {
        let v = field::leaky_relu(self.r(a.0), slope);
        self.push_r(Op::LeakyRelu(a.0, slope), v)
    }
    fn soft_threshold(&mut self, v: &RId, t: &SId) -> RId {
        let out = field::soft_threshold(self.r(v.0), self.s(t.0));
        self.push_r(Op::SoftThreshold(v.0, t.0), out)
    }
    fn psi(&mut self, a: &RId) -> RId {
        let v = field::psi(self.r(a.0));
        self.push_r(Op::Psi(a.0), v)
    }
    fn psit(&mut self, a: &RId) -> RId {
        let v = field::psit(self.r(a.0));
        self.push_r(Op::Psit(a.0), v)
    }
    fn conv2d(&mut self, x: &RId, params: &RId, meta: ConvLayerMeta) -> RId {
        let pv = self.r(params.0);
        let w = &pv.data[meta.w_offset..meta.w_offset + meta.c_out * meta.c_in * meta.k * meta.k];
        let b = &pv.data[meta.b_offset..meta.b_offset + meta.c_out];
        let v = field::conv2d(self.r(x.0), w, b, meta.c_out, meta.k);
        self.push_r(Op::Conv2d { x: x.0, params: params.0, meta }, v)
    }
    fn scale_unit_max(&mut self, a: &RId) -> RId {
        let av = self.r(a.0);
        let (argmax, max) = av
            .data
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let v = field::scale(av, 1.0 / max);
        self.push_r(Op::ScaleUnitMax { a: a.0, argmax, max }, v)
    }
    fn embed_shift(&mut self, a: &RId, padded: (usize, usize), shift: (usize, usize)) -> RId {
        let v = crate::operators::embed_psf_shifted(self.r(a.0), padded.0, padded.1, shift);
        self.push_r(Op::EmbedShift { a: a.0, shift }, v)
    }
    fn l1_normalize(&mut self, a: &RId) -> RId {
        let av = self.r(a.0);
        let mut out = av.clone();
        let mut sums = Vec::with_capacity(out.c);
        for ch in 0..out.c {
            let p = out.plane_mut(ch);
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            sums.push(s);
        }
        self.push_r(Op::L1Normalize { a: a.0, sums }, out)
    }
    fn index_s(&mut self, a: &RId, i: usize) -> SId {
        let v = self.r(a.0).data[i];
        self.push_s(Op::IndexS(a.0, i), v)
    }
    fn fft2(&mut self, a: &RId) -> CId {
        let av = self.r(a.0);
        let plan = plan_2d(av.h, av.w);
        let v = field::fft2(&plan, av);
        self.push_c(Op::Fft2(a.0), v)
    }
    fn ifft2_re(&mut self, z: &CId) -> RId {
        let zv = self.c(z.0);
        let plan = plan_2d(zv.h, zv.w);
        let v = field::ifft2_re(&plan, zv);
        self.push_r(Op::Ifft2Re(z.0), v)
    }
    fn mul_t(&mut self, z: &CId, t: &KTransfer<Self>, conj: bool) -> CId {
        match t {
            KTransfer::Fixed(td) => {
                let v = field::mul_transfer(self.c(z.0), td, conj);
                self.push_c(Op::MulTFixed { z: z.0, t: td.clone(), conj }, v)
            }
            KTransfer::Leaf(tid) => {
                let tv = self.c(tid.0);
                let v = if conj {
                    field::cmul(self.c(z.0), &field::conj(tv))
                } else {
                    field::cmul(self.c(z.0), tv)
                };
                self.push_c(Op::MulTLeaf { z: z.0, t: tid.0, conj }, v)
            }
        }
    }
    fn cadd(&mut self, a: &CId, b: &CId) -> CId {
        let av = self.c(a.0);
        let bv = self.c(b.0);
        let mut v = av.clone();
        for (o, x) in v.data.iter_mut().zip(&bv.data) {
            *o += x;
        }
        self.push_c(Op::CAdd(a.0, b.0), v)
    }
    fn transfer_abs2(&mut self, t: &KTransfer<Self>) -> RId {
        match t {
            KTransfer::Fixed(td) => {
                let f = RField { h: td.h, w: td.w, c: td.c, data: td.abs2.clone() };
                self.push_r(Op::ConstR, f)
            }
            KTransfer::Leaf(tid) => {
                let v = field::cabs2(self.c(tid.0));
                self.push_r(Op::Cabs2(tid.0), v)
            }
        }
    }
    fn cmul_real(&mut self, z: &CId, r: &RId) -> CId {
        let v = field::cmul_real(self.c(z.0), self.r(r.0));
        self.push_c(Op::CMulReal { z: z.0, r: r.0 }, v)
    }
    fn softplus(&mut self, s: &SId) -> SId {
        let v = softplus_val(self.s(s.0));
        self.push_s(Op::Softplus(s.0), v)
    }
    fn add_ss(&mut self, a: &SId, b: &SId) -> SId {
        let v = self.s(a.0) + self.s(b.0);
        self.push_s(Op::AddSS(a.0, b.0), v)
    }
    fn div_ss(&mut self, a: &SId, b: &SId) -> SId {
        let v = self.s(a.0) / self.s(b.0);
        self.push_s(Op::DivSS(a.0, b.0), v)
    }
    fn scale_s(&mut self, a: &SId, k: f64) -> SId {
        let v = self.s(a.0) * k;
        self.push_s(Op::ScaleS(a.0, k), v)
    }
    fn mse_loss(&mut self, a: &RId, b: &RId) -> SId {
        let v = field::mse(self.r(a.0), self.r(b.0));
        self.push_s(Op::MseLoss(a.0, b.0), v)
    }
}
