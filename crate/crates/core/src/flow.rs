//! The ODE flow driven by a rough path, its inverse, space derivatives, and
//! the coefficient transform that removes the rough term from an SDE.
//!
//! Drivers are consumed as piecewise-linear paths (refine through
//! [`crate::rough_path::geodesic_interpolate`] first — loops inserted by the
//! refinement carry the level-2 data), so the flow reduces to a classical ODE
//! per segment, integrated with 4th-order steps per sub-interval.
//!
//! Given the flow `φ(t,·)` of `dφ = Σ_k c_k(φ) dρ^k` with inverse `ψ`, an SDE
//! `dS = a(S) dt + b(S) dB + c(S) dρ` transforms into the rough-free SDE for
//! `S̃ = ψ(t, S)`:
//!
//! ```text
//! ã(t,x)_i = Σ_k ∂_k ψ_i(t, φ(t,x)) a_k(φ(t,x))
//!          + ½ Σ_{j,k} ∂²_{jk} ψ_i(t, φ(t,x)) Σ_l b_{jl} b_{kl}(φ(t,x))
//! b̃(t,x)_{ij} = Σ_k ∂_k ψ_i(t, φ(t,x)) b_{kj}(φ(t,x))
//! ```
//!
//! First space derivatives come from the variational equation integrated
//! jointly with the flow; second derivatives from central finite differences
//! of the Jacobian over perturbed base points, step `1e-4·(1+|x|)`.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rough_path::EnhancedPath;
use nalgebra::DMatrix;
use std::sync::Arc;

const MAX_SUBSTEPS_PER_SEGMENT: usize = 1_000_000;

/// A coefficient map `R^m → R^{rows×cols}` writing into a flat row-major
/// buffer, with an optional analytic Jacobian (`(rows·cols) × m`, row-major,
/// outer index `r·cols + c`).
#[derive(Clone)]
pub struct CoeffFn {
    in_dim: usize,
    rows: usize,
    cols: usize,
    eval: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    jac: Option<Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>>,
    zero: bool,
}

impl std::fmt::Debug for CoeffFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoeffFn")
            .field("in_dim", &self.in_dim)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("zero", &self.zero)
            .finish()
    }
}

impl CoeffFn {
    pub fn matrix(
        in_dim: usize,
        rows: usize,
        cols: usize,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        CoeffFn {
            in_dim,
            rows,
            cols,
            eval: Arc::new(eval),
            jac: None,
            zero: false,
        }
    }

    pub fn vector(
        in_dim: usize,
        rows: usize,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self::matrix(in_dim, rows, 1, eval)
    }

    /// The identically-zero map (consumers skip it entirely).
    pub fn zero(in_dim: usize, rows: usize, cols: usize) -> Self {
        CoeffFn {
            in_dim,
            rows,
            cols,
            eval: Arc::new(|_x, out: &mut [f64]| out.fill(0.0)),
            jac: Some(Arc::new(|_x, out: &mut [f64]| out.fill(0.0))),
            zero: true,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn out_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_len());
        (self.eval)(x, out);
    }

    /// Jacobian into `out` (`out_len × in_dim`); analytic when supplied,
    /// otherwise central differences with step `1e-6·(1+|x|)`.
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        debug_assert_eq!(out.len(), self.out_len() * self.in_dim);
        if let Some(j) = &self.jac {
            j(x, out);
            return;
        }
        let m = self.in_dim;
        let n = self.out_len();
        scratch.resize(m + 2 * n, 0.0);
        let (xp, rest) = scratch.split_at_mut(m);
        let (fp, fm) = rest.split_at_mut(n);
        let h = 1e-6 * (1.0 + linalg::norm(x));
        for j in 0..m {
            xp.copy_from_slice(x);
            xp[j] = x[j] + h;
            (self.eval)(xp, fp);
            xp[j] = x[j] - h;
            (self.eval)(xp, fm);
            for r in 0..n {
                out[r * m + j] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
    }
}

/// Piecewise-linear reading of a driver's level-1 values.
#[derive(Debug, Clone)]
struct Driver {
    times: Vec<f64>,
    dim: usize,
    /// per-segment velocity, flat `(n-1) × dim`
    velocities: Vec<f64>,
}

impl Driver {
    fn from_path(path: &EnhancedPath) -> Self {
        let n = path.len();
        let dim = path.dim();
        let mut velocities = vec![0.0; n.saturating_sub(1) * dim];
        for i in 0..n - 1 {
            let dt = path.times()[i + 1] - path.times()[i];
            let (a, b) = (path.value(i), path.value(i + 1));
            for k in 0..dim {
                velocities[i * dim + k] = (b[k] - a[k]) / dt;
            }
        }
        Driver {
            times: path.times().to_vec(),
            dim,
            velocities,
        }
    }

    fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// The flow of `dφ = Σ_k c_k(φ) dρ^k` along a fixed driver, with a declared
/// coefficient smoothness grade and an internal sub-step bound.
///
/// Immutable after construction; all evaluations are pure, so a field can be
/// shared freely across concurrent workers.
#[derive(Debug, Clone)]
pub struct FlowField {
    driver: Driver,
    fields: CoeffFn,
    /// Declared Lipschitz grade of the `c_k` (e.g. `4.6` for Lip^{4+ε}).
    /// Recorded, not verified.
    pub grade: f64,
    /// Maximum internal integration sub-step; `INFINITY` takes one 4th-order
    /// step per driver segment.
    pub step: f64,
    d_s: usize,
}

impl FlowField {
    pub fn new(driver: &EnhancedPath, fields: CoeffFn, grade: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::StepUnderflow(format!("step = {step}")));
        }
        if fields.cols() != driver.dim() || fields.in_dim() != fields.rows() {
            return Err(Error::DimensionMismatch(format!(
                "vector fields map R^{} to R^{}x{}, driver dimension {}",
                fields.in_dim(),
                fields.rows(),
                fields.cols(),
                driver.dim()
            )));
        }
        let d_s = fields.rows();
        Ok(FlowField {
            driver: Driver::from_path(driver),
            fields,
            grade,
            step,
            d_s,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.d_s
    }

    pub fn driver_dim(&self) -> usize {
        self.driver.dim
    }

    pub fn horizon(&self) -> f64 {
        self.driver.horizon()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let horizon = self.horizon();
        if t < 0.0 || t > horizon * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::QueryOutOfRange { t, horizon });
        }
        Ok(())
    }

    /// Integrate `m` joint (state [+ Jacobian]) copies from 0 to `t`
    /// (forward) or from `t` down to 0 (reverse). `state` is `m × stride`
    /// with `stride = d_s` or `d_s + d_s²`.
    fn integrate_multi(
        &self,
        t: f64,
        reverse: bool,
        with_jac: bool,
        state: &mut [f64],
        ws: &mut Buffers,
    ) -> Result<()> {
        self.check_time(t)?;
        let d = self.d_s;
        let stride = if with_jac { d + d * d } else { d };
        debug_assert_eq!(state.len() % stride, 0);
        let m = state.len() / stride;
        ws.ensure(m, stride, d, self.driver.dim, self.fields.out_len());
        ws.pieces.clear();
        let n_seg = self.driver.times.len() - 1;
        for j in 0..n_seg {
            let t0 = self.driver.times[j];
            if t0 >= t {
                break;
            }
            let t1 = self.driver.times[j + 1].min(t);
            if t1 > t0 {
                ws.pieces.push((j, t1 - t0));
            }
        }
        let sign = if reverse { -1.0 } else { 1.0 };
        let total = ws.pieces.len();
        for pi in 0..total {
            let (j, len) = if reverse {
                ws.pieces[total - 1 - pi]
            } else {
                ws.pieces[pi]
            };
            let n_sub = if self.step.is_finite() {
                let n = (len / self.step).ceil() as usize;
                if n > MAX_SUBSTEPS_PER_SEGMENT {
                    return Err(Error::StepUnderflow(format!(
                        "segment of length {len:.3e} needs {n} sub-steps at step {:.3e}",
                        self.step
                    )));
                }
                n.max(1)
            } else {
                1
            };
            let h = len / n_sub as f64;
            for (k, v) in self.driver.velocities[j * self.driver.dim..(j + 1) * self.driver.dim]
                .iter()
                .enumerate()
            {
                ws.vel[k] = sign * v;
            }
            for _ in 0..n_sub {
                let n = m * stride;
                self.rhs(with_jac, state, &mut ws.k1[..n], m, stride, &mut ws.rhs, &ws.vel);
                for i in 0..n {
                    ws.tmp[i] = state[i] + 0.5 * h * ws.k1[i];
                }
                self.rhs(with_jac, &ws.tmp[..n], &mut ws.k2[..n], m, stride, &mut ws.rhs, &ws.vel);
                for i in 0..n {
                    ws.tmp2[i] = state[i] + 0.5 * h * ws.k2[i];
                }
                self.rhs(with_jac, &ws.tmp2[..n], &mut ws.k3[..n], m, stride, &mut ws.rhs, &ws.vel);
                for i in 0..n {
                    ws.tmp[i] = state[i] + h * ws.k3[i];
                }
                self.rhs(with_jac, &ws.tmp[..n], &mut ws.k4[..n], m, stride, &mut ws.rhs, &ws.vel);
                let w = h / 6.0;
                for i in 0..n {
                    state[i] += w * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn rhs(
        &self,
        with_jac: bool,
        state: &[f64],
        out: &mut [f64],
        m: usize,
        stride: usize,
        ws: &mut RhsBuffers,
        vel: &[f64],
    ) {
        let d = self.d_s;
        let dy = self.driver.dim;
        for b in 0..m {
            let s = &state[b * stride..(b + 1) * stride];
            let o = &mut out[b * stride..(b + 1) * stride];
            let x = &s[..d];
            self.fields.eval_into(x, &mut ws.cmat);
            linalg::matvec(&ws.cmat, vel, &mut o[..d], d, dy);
            if with_jac {
                // Dcv[i][j] = Σ_k ∂C[i,k]/∂x_j · v_k, then dJ = Dcv · J
                self.fields
                    .jacobian_into(x, &mut ws.cjac, &mut ws.fd_scratch);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..dy {
                            acc += ws.cjac[(i * dy + k) * d + j] * vel[k];
                        }
                        ws.dcv[i * d + j] = acc;
                    }
                }
                linalg::matmul(&ws.dcv, &s[d..], &mut o[d..], d, d, d);
            }
        }
    }
}

#[derive(Debug, Default)]
struct RhsBuffers {
    cmat: Vec<f64>,
    cjac: Vec<f64>,
    dcv: Vec<f64>,
    fd_scratch: Vec<f64>,
}

#[derive(Debug, Default)]
struct Buffers {
    pieces: Vec<(usize, f64)>,
    vel: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    rhs: RhsBuffers,
}

impl Buffers {
    fn ensure(&mut self, m: usize, stride: usize, d: usize, dy: usize, c_len: usize) {
        let n = m * stride;
        self.vel.resize(dy, 0.0);
        for buf in [
            &mut self.k1,
            &mut self.k2,
            &mut self.k3,
            &mut self.k4,
            &mut self.tmp,
            &mut self.tmp2,
        ] {
            if buf.len() < n {
                buf.resize(n, 0.0);
            }
        }
        self.rhs.cmat.resize(c_len, 0.0);
        self.rhs.cjac.resize(c_len * d, 0.0);
        self.rhs.dcv.resize(d * d, 0.0);
    }
}

// ---------------------------------------------------------------------------
// Pointwise operations
// ---------------------------------------------------------------------------

/// `φ(t, x)` — forward flow.
pub fn flow_forward(field: &FlowField, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut state = x.to_vec();
    let mut ws = Buffers::default();
    field.integrate_multi(t, false, false, &mut state, &mut ws)?;
    Ok(state)
}

/// `ψ(t, y) = φ(t,·)^{-1}(y)` — inverse flow by time-reversed integration.
pub fn flow_inverse(field: &FlowField, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    let mut state = y.to_vec();
    let mut ws = Buffers::default();
    field.integrate_multi(t, true, false, &mut state, &mut ws)?;
    Ok(state)
}

/// `Dφ(t, x)` via the variational equation integrated jointly with the flow.
pub fn flow_jacobian(field: &FlowField, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = field.state_dim();
    let mut state = vec![0.0; d + d * d];
    state[..d].copy_from_slice(x);
    for i in 0..d {
        state[d + i * d + i] = 1.0;
    }
    let mut ws = Buffers::default();
    field.integrate_multi(t, false, true, &mut state, &mut ws)?;
    Ok(DMatrix::from_row_slice(d, d, &state[d..]))
}

/// Second space derivatives of the inverse flow at `φ(t,x)`:
/// `T[i·d² + j·d + k] = ∂²ψ_i(t, z)/∂z_j ∂z_k` at `z = φ(t,x)`.
pub fn flow_second_derivatives(field: &FlowField, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let d = field.state_dim();
    let d2 = d * d;
    let mut ws = TransformWorkspace::new(d, 0);
    field.flow_bundle(t, x, true, &mut ws)?;
    let mut out = vec![0.0; d * d2];
    // D²ψ(z)[u,v] = −J⁻¹ D²φ[J⁻¹u, J⁻¹v] at z = φ(t,x)
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    let mut inner = 0.0;
                    for q in 0..d {
                        for r in 0..d {
                            inner += ws.d2phi[p * d2 + q * d + r]
                                * ws.jinv[q * d + j]
                                * ws.jinv[r * d + k];
                        }
                    }
                    acc += ws.jinv[i * d + p] * inner;
                }
                out[i * d2 + j * d + k] = -acc;
            }
        }
    }
    Ok(out)
}

/// Workspace for flow bundles and transformed coefficients at one `(t, x)`;
/// reusable across calls.
#[derive(Debug)]
pub(crate) struct TransformWorkspace {
    d_b: usize,
    /// φ(t, x)
    pub y: Vec<f64>,
    /// Dφ(t, x), row-major
    pub jac: Vec<f64>,
    /// Dψ(t, φ(t,x)) = Dφ(t,x)⁻¹
    pub jinv: Vec<f64>,
    /// D²φ_p[q,r], flat d³, filled when the bundle carries second derivatives
    pub d2phi: Vec<f64>,
    /// ã(t, x)
    pub a_tilde: Vec<f64>,
    /// b̃(t, x), flat d_s × d_b
    pub b_tilde: Vec<f64>,
    joint: Vec<f64>,
    inv_scratch: Vec<f64>,
    a_buf: Vec<f64>,
    b_buf: Vec<f64>,
    m_buf: Vec<f64>,
    n_buf: Vec<f64>,
    s_buf: Vec<f64>,
    bufs: Buffers,
}

impl TransformWorkspace {
    pub fn new(d_s: usize, d_b: usize) -> Self {
        let d2 = d_s * d_s;
        let n_bases = 1 + 2 * d_s;
        TransformWorkspace {
            d_b,
            y: vec![0.0; d_s],
            jac: vec![0.0; d2],
            jinv: vec![0.0; d2],
            d2phi: vec![0.0; d_s * d2],
            a_tilde: vec![0.0; d_s],
            b_tilde: vec![0.0; d_s * d_b],
            joint: vec![0.0; n_bases * (d_s + d2)],
            inv_scratch: vec![0.0; d_s * 2 * d_s],
            a_buf: vec![0.0; d_s],
            b_buf: vec![0.0; d_s * d_b],
            m_buf: vec![0.0; d2],
            n_buf: vec![0.0; d2],
            s_buf: vec![0.0; d_s],
            bufs: Buffers::default(),
        }
    }
}

impl FlowField {
    /// Compute φ, Dφ, Dψ at `(t, x)`; with `second`, also D²φ by central
    /// differences of the Jacobian over `2·d_s` perturbed bases.
    pub(crate) fn flow_bundle(
        &self,
        t: f64,
        x: &[f64],
        second: bool,
        ws: &mut TransformWorkspace,
    ) -> Result<()> {
        let d = self.d_s;
        let d2 = d * d;
        let stride = d + d2;
        let n_bases = if second { 1 + 2 * d } else { 1 };
        let h = 1e-4 * (1.0 + linalg::norm(x));
        {
            let joint = &mut ws.joint[..n_bases * stride];
            joint.fill(0.0);
            for b in 0..n_bases {
                let s = &mut joint[b * stride..(b + 1) * stride];
                s[..d].copy_from_slice(x);
                if b > 0 {
                    let q = (b - 1) / 2;
                    let sgn = if (b - 1) % 2 == 0 { 1.0 } else { -1.0 };
                    s[q] += sgn * h;
                }
                for i in 0..d {
                    s[d + i * d + i] = 1.0;
                }
            }
        }
        {
            let (joint, _) = ws.joint.split_at_mut(n_bases * stride);
            self.integrate_multi(t, false, true, joint, &mut ws.bufs)?;
        }
        ws.y.copy_from_slice(&ws.joint[..d]);
        ws.jac.copy_from_slice(&ws.joint[d..stride]);
        if !linalg::invert(&ws.jac, &mut ws.jinv, &mut ws.inv_scratch, d, 1e-12) {
            return Err(Error::SingularJacobian(t));
        }
        if second {
            // D²φ_p[q,r] ≈ (J(x+h e_q) − J(x−h e_q))[p,r] / 2h, symmetrized
            for q in 0..d {
                let jp = &ws.joint[(1 + 2 * q) * stride + d..(1 + 2 * q) * stride + stride];
                let jm = &ws.joint[(2 + 2 * q) * stride + d..(2 + 2 * q) * stride + stride];
                for p in 0..d {
                    for r in 0..d {
                        ws.d2phi[p * d2 + q * d + r] = (jp[p * d + r] - jm[p * d + r]) / (2.0 * h);
                    }
                }
            }
            for p in 0..d {
                for q in 0..d {
                    for r in 0..q {
                        let s = 0.5 * (ws.d2phi[p * d2 + q * d + r] + ws.d2phi[p * d2 + r * d + q]);
                        ws.d2phi[p * d2 + q * d + r] = s;
                        ws.d2phi[p * d2 + r * d + q] = s;
                    }
                }
            }
        } else {
            ws.d2phi.fill(0.0);
        }
        Ok(())
    }

    /// Transformed coefficients at `(t, x)`: fills `ws.y = φ(t,x)`,
    /// `ws.a_tilde`, `ws.b_tilde`.
    pub(crate) fn transform_into(
        &self,
        a: &CoeffFn,
        b: &CoeffFn,
        t: f64,
        x: &[f64],
        ws: &mut TransformWorkspace,
    ) -> Result<()> {
        let d = self.d_s;
        let d_b = ws.d_b;
        let second = !b.is_zero() && d_b > 0;
        self.flow_bundle(t, x, second, ws)?;
        a.eval_into(&ws.y, &mut ws.a_buf);
        linalg::matvec(&ws.jinv, &ws.a_buf, &mut ws.a_tilde, d, d);
        if second {
            b.eval_into(&ws.y, &mut ws.b_buf);
            // b̃ = Dψ · b
            linalg::matmul(&ws.jinv, &ws.b_buf, &mut ws.b_tilde, d, d, d_b);
            // Itô correction: −½ J⁻¹ ⟨D²φ, J⁻¹ (b bᵀ) J⁻ᵀ⟩
            for j in 0..d {
                for k in 0..d {
                    let mut acc = 0.0;
                    for l in 0..d_b {
                        acc += ws.b_buf[j * d_b + l] * ws.b_buf[k * d_b + l];
                    }
                    ws.m_buf[j * d + k] = acc;
                }
            }
            for q in 0..d {
                for r in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        for k in 0..d {
                            acc += ws.jinv[q * d + j] * ws.m_buf[j * d + k] * ws.jinv[r * d + k];
                        }
                    }
                    ws.n_buf[q * d + r] = acc;
                }
            }
            let d2 = d * d;
            for p in 0..d {
                let mut acc = 0.0;
                for qr in 0..d2 {
                    acc += ws.d2phi[p * d2 + qr] * ws.n_buf[qr];
                }
                ws.s_buf[p] = acc;
            }
            for i in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += ws.jinv[i * d + p] * ws.s_buf[p];
                }
                ws.a_tilde[i] += -0.5 * acc;
            }
        } else if d_b > 0 {
            ws.b_tilde.fill(0.0);
        }
        Ok(())
    }
}

/// Observed numeric bounds of transformed coefficients over a sample of
/// `(r, x)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffBounds {
    pub a_sup: f64,
    pub b_sup: f64,
    pub a_lip: f64,
    pub b_lip: f64,
}

/// The time-dependent coefficient pair `(ã, b̃)` of the transformed SDE.
#[derive(Debug, Clone)]
pub struct TransformedCoefficients {
    field: Arc<FlowField>,
    a: CoeffFn,
    b: CoeffFn,
    d_b: usize,
    /// Numerically observed bounds, when sampled via
    /// [`Self::with_observed_bounds`].
    pub bounds: Option<CoeffBounds>,
}

impl TransformedCoefficients {
    pub fn state_dim(&self) -> usize {
        self.field.state_dim()
    }

    /// Evaluate `(ã(r,x), b̃(r,x))`; `b̃` is flat `d_s × d_b`.
    pub fn eval(&self, r: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut ws = TransformWorkspace::new(self.field.state_dim(), self.d_b);
        self.field.transform_into(&self.a, &self.b, r, x, &mut ws)?;
        Ok((ws.a_tilde.clone(), ws.b_tilde.clone()))
    }

    /// Sample sup-norms and difference-quotient Lipschitz constants over the
    /// given `times × points` grid.
    pub fn observe_bounds(&self, times: &[f64], points: &[Vec<f64>]) -> Result<CoeffBounds> {
        let mut bounds = CoeffBounds {
            a_sup: 0.0,
            b_sup: 0.0,
            a_lip: 0.0,
            b_lip: 0.0,
        };
        for &t in times {
            let evals: Vec<(Vec<f64>, Vec<f64>)> = points
                .iter()
                .map(|x| self.eval(t, x))
                .collect::<Result<_>>()?;
            for (a, b) in &evals {
                bounds.a_sup = bounds.a_sup.max(linalg::norm(a));
                bounds.b_sup = bounds.b_sup.max(linalg::frobenius(b));
            }
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    let dx: f64 = points[i]
                        .iter()
                        .zip(&points[j])
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    if dx < 1e-12 {
                        continue;
                    }
                    let da: f64 = evals[i]
                        .0
                        .iter()
                        .zip(&evals[j].0)
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    let db: f64 = evals[i]
                        .1
                        .iter()
                        .zip(&evals[j].1)
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    bounds.a_lip = bounds.a_lip.max(da / dx);
                    bounds.b_lip = bounds.b_lip.max(db / dx);
                }
            }
        }
        Ok(bounds)
    }

    pub fn with_observed_bounds(mut self, times: &[f64], points: &[Vec<f64>]) -> Result<Self> {
        self.bounds = Some(self.observe_bounds(times, points)?);
        Ok(self)
    }
}

/// Assemble the callable transformed coefficients for `(a, b)` under `field`.
pub fn transform_coefficients(
    field: Arc<FlowField>,
    a: CoeffFn,
    b: CoeffFn,
) -> Result<TransformedCoefficients> {
    let d = field.state_dim();
    if a.in_dim() != d || a.out_len() != d {
        return Err(Error::DimensionMismatch(format!(
            "drift maps R^{} to R^{}, state dimension is {d}",
            a.in_dim(),
            a.out_len()
        )));
    }
    if b.in_dim() != d || b.rows() != d {
        return Err(Error::DimensionMismatch(format!(
            "diffusion maps R^{} to R^{}x{}, state dimension is {d}",
            b.in_dim(),
            b.rows(),
            b.cols()
        )));
    }
    let d_b = b.cols();
    Ok(TransformedCoefficients {
        field,
        a,
        b,
        d_b,
        bounds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::{lift_piecewise_linear, uniform_grid};

    fn smooth_driver_1d(n: usize) -> EnhancedPath {
        let times = uniform_grid(n, 1.0);
        let values: Vec<f64> = times.iter().map(|t| (2.0 * t).sin() * 0.8).collect();
        lift_piecewise_linear(&times, 1, &values, 0.4).unwrap()
    }

    fn linear_field_1d() -> CoeffFn {
        CoeffFn::matrix(1, 1, 1, |x, out| out[0] = x[0]).with_jacobian(|_x, out| out[0] = 1.0)
    }

    #[test]
    fn zero_field_is_identity_flow() {
        let driver = smooth_driver_1d(16);
        let field = FlowField::new(&driver, CoeffFn::zero(3, 3, 1), 4.6, f64::INFINITY).unwrap();
        let x = [0.3, -1.2, 2.0];
        let y = flow_forward(&field, 1.0, &x).unwrap();
        assert_eq!(&y[..], &x[..]);
        let j = flow_jacobian(&field, 1.0, &x).unwrap();
        assert_eq!(j, DMatrix::identity(3, 3));
        let t = flow_second_derivatives(&field, 1.0, &x).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
        let z = flow_inverse(&field, 1.0, &y).unwrap();
        assert_eq!(&z[..], &x[..]);
    }

    #[test]
    fn constant_field_integrates_the_driver() {
        let driver = smooth_driver_1d(64);
        let c = CoeffFn::matrix(1, 1, 1, |_x, out| out[0] = 1.0)
            .with_jacobian(|_x, out| out[0] = 0.0);
        let field = FlowField::new(&driver, c, 4.6, f64::INFINITY).unwrap();
        for &t in &[0.25, 0.5, 1.0] {
            let y = flow_forward(&field, t, &[0.7]).unwrap();
            let rho: f64 = (2.0 * t).sin() * 0.8;
            assert!((y[0] - (0.7 + rho)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn linear_field_matches_exponential() {
        let driver = smooth_driver_1d(1000);
        let field = FlowField::new(&driver, linear_field_1d(), 4.6, f64::INFINITY).unwrap();
        let x = 1.3;
        for &t in &[0.3f64, 1.0] {
            let rho = (2.0 * t).sin() * 0.8;
            let want = x * rho.exp();
            let got = flow_forward(&field, t, &[x]).unwrap()[0];
            assert!((got - want).abs() < 1e-8, "t={t}: {got} vs {want}");
            let inv = flow_inverse(&field, t, &[want]).unwrap()[0];
            assert!((inv - x).abs() < 1e-8);
            let jac = flow_jacobian(&field, t, &[x]).unwrap()[(0, 0)];
            assert!((jac - rho.exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn roundtrip_on_nonlinear_fields() {
        let times = uniform_grid(64, 1.0);
        let mut values = vec![0.0; 65 * 2];
        let mut rng = crate::rng::stream(17, 0);
        use rand::Rng;
        for i in 1..=64 {
            for k in 0..2 {
                values[i * 2 + k] = values[(i - 1) * 2 + k] + 0.12 * (rng.random::<f64>() - 0.5);
            }
        }
        let driver = lift_piecewise_linear(&times, 2, &values, 0.4).unwrap();
        let c = CoeffFn::matrix(2, 2, 2, |x, out| {
            out[0] = 0.8 * x[1].tanh();
            out[1] = 0.5 * (x[0] + x[1]).tanh();
            out[2] = 0.6 * x[0].tanh() + 0.2;
            out[3] = -0.4 * x[0].tanh();
        });
        let field = FlowField::new(&driver, c, 4.6, 1.0 / 256.0).unwrap();
        for trial in 0..20 {
            let x = [
                (trial as f64 * 0.37).sin() * 1.5,
                (trial as f64 * 0.59).cos() * 1.5,
            ];
            let y = flow_forward(&field, 1.0, &x).unwrap();
            let z = flow_inverse(&field, 1.0, &y).unwrap();
            let err = ((z[0] - x[0]).powi(2) + (z[1] - x[1]).powi(2)).sqrt();
            assert!(err < 1e-8, "trial {trial}: roundtrip error {err:e}");
        }
    }

    #[test]
    fn jacobian_agrees_with_finite_differences() {
        let driver = smooth_driver_1d(128);
        let c = CoeffFn::matrix(1, 1, 1, |x, out| out[0] = (x[0] * 0.9).tanh() + 0.3);
        let field = FlowField::new(&driver, c, 4.6, f64::INFINITY).unwrap();
        let x = 0.4;
        let j = flow_jacobian(&field, 1.0, &[x]).unwrap()[(0, 0)];
        let h = 1e-5;
        let fp = flow_forward(&field, 1.0, &[x + h]).unwrap()[0];
        let fm = flow_forward(&field, 1.0, &[x - h]).unwrap()[0];
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            (j - fd).abs() / fd.abs().max(1.0) < 1e-5,
            "variational {j} vs fd {fd}"
        );
    }

    #[test]
    fn second_derivatives_match_direct_inverse_differencing() {
        let driver = smooth_driver_1d(128);
        let c = CoeffFn::matrix(1, 1, 1, |x, out| out[0] = (0.7 * x[0]).tanh() + 0.4);
        let field = FlowField::new(&driver, c, 4.6, 1.0 / 512.0).unwrap();
        let x = 0.3;
        let t = 1.0;
        let d2 = flow_second_derivatives(&field, t, &[x]).unwrap()[0];
        let z = flow_forward(&field, t, &[x]).unwrap()[0];
        let h = 1e-4 * (1.0 + z.abs());
        let pp = flow_inverse(&field, t, &[z + h]).unwrap()[0];
        let p0 = flow_inverse(&field, t, &[z]).unwrap()[0];
        let pm = flow_inverse(&field, t, &[z - h]).unwrap()[0];
        let fd = (pp - 2.0 * p0 + pm) / (h * h);
        assert!(
            (d2 - fd).abs() / fd.abs().max(1e-3) < 1e-3,
            "tensor {d2} vs direct fd {fd}"
        );
    }

    #[test]
    fn transform_trivial_cases() {
        let driver = smooth_driver_1d(32);
        // c ≡ 0 → ã = a, b̃ = b exactly
        let field =
            Arc::new(FlowField::new(&driver, CoeffFn::zero(2, 2, 1), 4.6, f64::INFINITY).unwrap());
        let a = CoeffFn::vector(2, 2, |x, out| {
            out[0] = 0.3 * x[0] + 1.0;
            out[1] = -0.2 * x[1];
        });
        let b = CoeffFn::matrix(2, 2, 1, |x, out| {
            out[0] = 0.5 + 0.1 * x[0].tanh();
            out[1] = 0.7;
        });
        let tc = transform_coefficients(field, a.clone(), b.clone()).unwrap();
        let x = [0.4, -1.1];
        let (at, bt) = tc.eval(0.7, &x).unwrap();
        let mut want_a = vec![0.0; 2];
        let mut want_b = vec![0.0; 2];
        a.eval_into(&x, &mut want_a);
        b.eval_into(&x, &mut want_b);
        assert_eq!(at, want_a);
        assert_eq!(bt, want_b);

        // a ≡ 0, b ≡ 0 → everything zero
        let field =
            Arc::new(FlowField::new(&driver, linear_field_1d(), 4.6, f64::INFINITY).unwrap());
        let tc =
            transform_coefficients(field, CoeffFn::zero(1, 1, 1), CoeffFn::zero(1, 1, 1)).unwrap();
        let (at, bt) = tc.eval(0.5, &[0.3]).unwrap();
        assert!(at.iter().all(|&v| v == 0.0));
        assert!(bt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transform_linear_closed_form() {
        let driver = smooth_driver_1d(512);
        let field =
            Arc::new(FlowField::new(&driver, linear_field_1d(), 4.6, f64::INFINITY).unwrap());
        let a = CoeffFn::vector(1, 1, |x, out| out[0] = (x[0]).tanh() * 0.6 + 0.2);
        let b = CoeffFn::matrix(1, 1, 1, |x, out| out[0] = 0.4 + 0.3 * (x[0] * 0.5).tanh());
        let tc = transform_coefficients(field, a.clone(), b.clone()).unwrap();
        let t = 0.8;
        let rho: f64 = (2.0f64 * t).sin() * 0.8;
        let e = rho.exp();
        for &x in &[0.2, -0.9, 1.4] {
            let (at, bt) = tc.eval(t, &[x]).unwrap();
            let mut ay = [0.0];
            let mut by = [0.0];
            a.eval_into(&[e * x], &mut ay);
            b.eval_into(&[e * x], &mut by);
            // linear flow ⇒ ∂²ψ = 0 and the transform is a pure conjugation
            assert!(
                (at[0] - ay[0] / e).abs() < 1e-6,
                "a~ {} vs {}",
                at[0],
                ay[0] / e
            );
            assert!((bt[0] - by[0] / e).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_inverse_jacobians_compose_to_identity() {
        let driver = smooth_driver_1d(128);
        let c = CoeffFn::matrix(1, 1, 1, |x, out| out[0] = 0.8 * (x[0]).tanh() + 0.1);
        let field = FlowField::new(&driver, c, 4.6, 1.0 / 256.0).unwrap();
        let x = [0.5];
        let t = 1.0;
        let jf = flow_jacobian(&field, t, &x).unwrap()[(0, 0)];
        let z = flow_forward(&field, t, &x).unwrap()[0];
        let h = 1e-6;
        let jp = flow_inverse(&field, t, &[z + h]).unwrap()[0];
        let jm = flow_inverse(&field, t, &[z - h]).unwrap()[0];
        let ji = (jp - jm) / (2.0 * h);
        assert!((jf * ji - 1.0).abs() < 1e-6, "Jφ·Jψ = {}", jf * ji);
    }

    #[test]
    fn step_underflow_is_reported() {
        let driver = smooth_driver_1d(4);
        let field = FlowField::new(&driver, linear_field_1d(), 4.6, 1e-9).unwrap();
        assert!(matches!(
            flow_forward(&field, 1.0, &[1.0]),
            Err(Error::StepUnderflow(_))
        ));
        assert!(FlowField::new(&driver, linear_field_1d(), 4.6, 0.0).is_err());
    }

    #[test]
    fn out_of_range_time_rejected() {
        let driver = smooth_driver_1d(4);
        let field = FlowField::new(&driver, linear_field_1d(), 4.6, f64::INFINITY).unwrap();
        assert!(matches!(
            flow_forward(&field, 1.5, &[1.0]),
            Err(Error::QueryOutOfRange { .. })
        ));
    }
}
