//! SDEs with a rough drift term and the filtering system built on them.
//!
//! The generic object is `dS = a(S) dt + b(S) dB̄ + c(S) dρ` for a rough
//! driver ρ. It is solved through the flow decomposition: Euler–Maruyama on
//! the transformed rough-free SDE for `S̃ = ψ(t, S)`, then mapped back through
//! the forward flow, `S_i = φ(t_i, S̃_i)`.
//!
//! [`build_filter_system`] instantiates the filtering triple
//! `S = (X, Y, I) ∈ R^{d_X + d_Y + 1}`:
//!
//! ```text
//! dX = L₀(X,Y) dt + Σ_k Z_k(X,Y) dρ^k + Σ_j L_j(X,Y) dB̄^j
//! dY = dρ
//! dI = Σ_k h^k(X,Y) dρ^k − ½ Σ_k [D_k h^k + (h^k)²](X,Y) dt
//! ```
//!
//! where `D_k h^k = Σ_i ∂_{x_i} h^k Z_k^i + ∂_{y_k} h^k` is the derivative of
//! `h^k` along the k-th rough-drift column. The drift of `I` carries both the
//! bracket term `D_k h^k` (which turns the pathwise integral into its Itô
//! reading at Brownian lifts) and the Girsanov energy `(h^k)²`, so that
//! `exp(I)` is exactly the likelihood weight of the reference-measure change
//! and the uncorrelated case collapses to the classical integration-by-parts
//! weight.

use crate::error::{Error, Result};
use crate::flow::{CoeffFn, FlowField, TransformWorkspace};
use crate::linalg;
use crate::rough_path::EnhancedPath;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

/// Initial distribution with bounded support.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Discrete {
        points: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl InitialLaw {
    pub fn two_point(a: f64, b: f64) -> Self {
        InitialLaw::Discrete {
            points: vec![vec![a], vec![b]],
            probs: vec![0.5, 0.5],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(p) => p.len(),
            InitialLaw::Discrete { points, .. } => points.first().map_or(0, Vec::len),
            InitialLaw::UniformBox { lo, .. } => lo.len(),
        }
    }

    /// Essential bound of the support (sup norm over support points).
    pub fn bound(&self) -> f64 {
        match self {
            InitialLaw::Point(p) => linalg::norm(p),
            InitialLaw::Discrete { points, .. } => {
                points.iter().map(|p| linalg::norm(p)).fold(0.0, f64::max)
            }
            InitialLaw::UniformBox { lo, hi } => {
                let a: f64 = lo.iter().map(|v| v * v).sum();
                let b: f64 = hi.iter().map(|v| v * v).sum();
                a.max(b).sqrt()
            }
        }
    }

    /// Support points when the law is finitely supported.
    pub fn support_points(&self) -> Option<&[Vec<f64>]> {
        match self {
            InitialLaw::Point(_) => None,
            InitialLaw::Discrete { points, .. } => Some(points),
            InitialLaw::UniformBox { .. } => None,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitialLaw::Point(p) => p.clone(),
            InitialLaw::Discrete { points, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, &w) in points.iter().zip(probs) {
                    acc += w;
                    if u < acc {
                        return p.clone();
                    }
                }
                points.last().unwrap().clone()
            }
            InitialLaw::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
                .collect(),
        }
    }
}

/// The generic `(a, b, c)` coefficient triple plus initial law.
#[derive(Debug, Clone)]
pub struct RoughDriftSystem {
    pub d_s: usize,
    pub d_b: usize,
    pub d_y: usize,
    /// drift, `R^{d_s} → R^{d_s}`
    pub a: CoeffFn,
    /// diffusion, `R^{d_s} → R^{d_s×d_b}`
    pub b: CoeffFn,
    /// rough-drift columns, `R^{d_s} → R^{d_s×d_y}`
    pub c: CoeffFn,
    /// declared Lipschitz grade of the `c` columns
    pub c_grade: f64,
    pub s0_law: InitialLaw,
}

impl RoughDriftSystem {
    pub fn validate(&self) -> Result<()> {
        if self.a.in_dim() != self.d_s || self.a.out_len() != self.d_s {
            return Err(Error::DimensionMismatch("drift a".into()));
        }
        if self.b.in_dim() != self.d_s || self.b.rows() != self.d_s || self.b.cols() != self.d_b {
            return Err(Error::DimensionMismatch("diffusion b".into()));
        }
        if self.c.in_dim() != self.d_s || self.c.rows() != self.d_s || self.c.cols() != self.d_y {
            return Err(Error::DimensionMismatch("rough-drift c".into()));
        }
        if self.s0_law.dim() != self.d_s {
            return Err(Error::DimensionMismatch("initial law".into()));
        }
        Ok(())
    }
}

/// One realization of the state on the driver grid.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub d_s: usize,
    states: Vec<f64>,
}

impl SamplePath {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.d_s..(i + 1) * self.d_s]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Split a state row of a filtering system into `(X, Y, I)`.
    pub fn split_xyi(&self, d_x: usize, d_y: usize, i: usize) -> (&[f64], &[f64], f64) {
        let s = self.state(i);
        (&s[..d_x], &s[d_x..d_x + d_y], s[d_x + d_y])
    }
}

/// Reusable solver for one `(system, driver)` pair; `solve_with` runs one
/// Monte Carlo sample. Instances share only immutable data, so one solver can
/// serve concurrent samples through per-thread workspaces.
#[derive(Debug)]
pub struct RoughSdeSolver {
    system: RoughDriftSystem,
    field: Arc<FlowField>,
    times: Vec<f64>,
}

/// Per-thread scratch for [`RoughSdeSolver::solve_with`].
#[derive(Debug)]
pub struct SolveWorkspace {
    tw: TransformWorkspace,
}

impl RoughSdeSolver {
    pub fn new(system: RoughDriftSystem, driver: &EnhancedPath) -> Result<Self> {
        system.validate()?;
        if driver.dim() != system.d_y {
            return Err(Error::DimensionMismatch(format!(
                "driver dimension {} vs system d_y {}",
                driver.dim(),
                system.d_y
            )));
        }
        let field = Arc::new(FlowField::new(
            driver,
            system.c.clone(),
            system.c_grade,
            f64::INFINITY,
        )?);
        Ok(RoughSdeSolver {
            field,
            times: driver.times().to_vec(),
            system,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn system(&self) -> &RoughDriftSystem {
        &self.system
    }

    pub fn field(&self) -> &Arc<FlowField> {
        &self.field
    }

    pub fn make_workspace(&self) -> SolveWorkspace {
        SolveWorkspace {
            tw: TransformWorkspace::new(self.system.d_s, self.system.d_b),
        }
    }

    /// Euler–Maruyama on the transformed SDE, mapped through the forward
    /// flow. `brownian` holds the B̄ increments, flat `n_steps × d_b`.
    pub fn solve_with(
        &self,
        brownian: &[f64],
        s0: &[f64],
        ws: &mut SolveWorkspace,
    ) -> Result<SamplePath> {
        let d_s = self.system.d_s;
        let d_b = self.system.d_b;
        let n_steps = self.n_steps();
        if brownian.len() != n_steps * d_b {
            return Err(Error::GridMismatch(format!(
                "{} Brownian increments of dimension {d_b} for {n_steps} steps",
                brownian.len() / d_b.max(1)
            )));
        }
        if s0.len() != d_s {
            return Err(Error::DimensionMismatch("s0".into()));
        }
        let mut states = vec![0.0; (n_steps + 1) * d_s];
        let mut x = s0.to_vec();
        for i in 0..n_steps {
            let t = self.times[i];
            let dt = self.times[i + 1] - t;
            self.field
                .transform_into(&self.system.a, &self.system.b, t, &x, &mut ws.tw)?;
            states[i * d_s..(i + 1) * d_s].copy_from_slice(&ws.tw.y);
            let db = &brownian[i * d_b..(i + 1) * d_b];
            for r in 0..d_s {
                let mut acc = x[r] + ws.tw.a_tilde[r] * dt;
                for j in 0..d_b {
                    acc += ws.tw.b_tilde[r * d_b + j] * db[j];
                }
                x[r] = acc;
            }
        }
        let horizon = *self.times.last().unwrap();
        self.field
            .transform_into(&self.system.a, &self.system.b, horizon, &x, &mut ws.tw)?;
        states[n_steps * d_s..].copy_from_slice(&ws.tw.y);
        Ok(SamplePath {
            times: self.times.clone(),
            d_s,
            states,
        })
    }
}

/// One-shot solve of the SDE with rough drift on the driver's grid.
pub fn solve_rough_sde(
    system: &RoughDriftSystem,
    driver: &EnhancedPath,
    brownian: &[f64],
    s0: &[f64],
) -> Result<SamplePath> {
    let solver = RoughSdeSolver::new(system.clone(), driver)?;
    let mut ws = solver.make_workspace();
    solver.solve_with(brownian, s0, &mut ws)
}

// ---------------------------------------------------------------------------
// Filtering model
// ---------------------------------------------------------------------------

/// Whether the signal drift was supplied in Itô or Stratonovich form.
#[derive(Debug, Clone)]
pub enum DriftSpec {
    /// `l̄₀` of the Itô equation under the reference measure.
    Ito(CoeffFn),
    /// `L₀` of the Stratonovich form directly.
    Stratonovich(CoeffFn),
}

/// Coefficients of the correlated-noise filtering model.
///
/// `h`, `Z` columns are declared `Lip^{grade}`; `h` must act bounded (the
/// estimator errors out if `exp(I)` leaves the double range).
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub d_x: usize,
    pub d_y: usize,
    pub d_b: usize,
    /// observation function, `R^{d_x+d_y} → R^{d_y}`
    pub h: CoeffFn,
    /// correlation columns `Z_k`, `R^{d_x+d_y} → R^{d_x×d_y}`
    pub z: CoeffFn,
    /// auxiliary-noise columns `L_j`, `R^{d_x+d_y} → R^{d_x×d_b}`
    pub l: CoeffFn,
    /// signal drift, with the convention it was supplied in
    pub drift: DriftSpec,
    pub x0_law: InitialLaw,
    /// declared Lipschitz grade of `h` and the `Z_k`
    pub grade: f64,
}

impl FilterModel {
    pub fn xy_dim(&self) -> usize {
        self.d_x + self.d_y
    }

    pub fn state_dim(&self) -> usize {
        self.d_x + self.d_y + 1
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.xy_dim();
        if self.h.in_dim() != m || self.h.out_len() != self.d_y {
            return Err(Error::DimensionMismatch("h".into()));
        }
        if self.z.in_dim() != m || self.z.rows() != self.d_x || self.z.cols() != self.d_y {
            return Err(Error::DimensionMismatch("Z".into()));
        }
        if self.l.in_dim() != m || self.l.rows() != self.d_x || self.l.cols() != self.d_b {
            return Err(Error::DimensionMismatch("L".into()));
        }
        let drift = match &self.drift {
            DriftSpec::Ito(f) | DriftSpec::Stratonovich(f) => f,
        };
        if drift.in_dim() != m || drift.out_len() != self.d_x {
            return Err(Error::DimensionMismatch("drift".into()));
        }
        if self.x0_law.dim() != self.d_x {
            return Err(Error::DimensionMismatch("x0 law".into()));
        }
        Ok(())
    }

    /// Was `L₀` supplied directly (vs derived from Itô `l̄₀`)?
    pub fn drift_is_stratonovich(&self) -> bool {
        matches!(self.drift, DriftSpec::Stratonovich(_))
    }

    /// The Stratonovich drift `L₀`, deriving it from `l̄₀` when needed.
    pub fn l0_stratonovich(&self) -> CoeffFn {
        match &self.drift {
            DriftSpec::Stratonovich(f) => f.clone(),
            DriftSpec::Ito(f) => stratonovich_drift_correction(f, &self.z, self.d_x, self.d_y),
        }
    }

    /// The Itô drift `l̄₀` under the reference measure.
    pub fn l0_ito(&self) -> CoeffFn {
        match &self.drift {
            DriftSpec::Ito(f) => f.clone(),
            DriftSpec::Stratonovich(f) => {
                apply_drift_correction(f, &self.z, self.d_x, self.d_y, 1.0)
            }
        }
    }
}

/// `L₀^j = l̄₀^j − ½ Σ_k [Σ_i ∂_{x_i} Z_k^j Z_k^i + ∂_{y_k} Z_k^j]`,
/// derivatives of `Z` by central differences with step `1e-5·(1+|(x,y)|)`.
pub fn stratonovich_drift_correction(
    l0_bar: &CoeffFn,
    z: &CoeffFn,
    d_x: usize,
    d_y: usize,
) -> CoeffFn {
    apply_drift_correction(l0_bar, z, d_x, d_y, -1.0)
}

fn apply_drift_correction(base: &CoeffFn, z: &CoeffFn, d_x: usize, d_y: usize, sign: f64) -> CoeffFn {
    let base = base.clone();
    let z = z.clone();
    let m = d_x + d_y;
    CoeffFn::vector(m, d_x, move |xy, out| {
        base.eval_into(xy, out);
        let h = 1e-5 * (1.0 + linalg::norm(xy));
        linalg::with_scratch(3 * d_x * d_y + m, |buf| {
            let (zp, rest) = buf.split_at_mut(d_x * d_y);
            let (zm, rest) = rest.split_at_mut(d_x * d_y);
            let (z0, pt) = rest.split_at_mut(d_x * d_y);
            z.eval_into(xy, z0);
            // Σ_i ∂_{x_i} Z_k^j · Z_k^i
            for i in 0..d_x {
                pt.copy_from_slice(xy);
                pt[i] = xy[i] + h;
                z.eval_into(pt, zp);
                pt[i] = xy[i] - h;
                z.eval_into(pt, zm);
                for j in 0..d_x {
                    for k in 0..d_y {
                        let dz = (zp[j * d_y + k] - zm[j * d_y + k]) / (2.0 * h);
                        out[j] += sign * 0.5 * dz * z0[i * d_y + k];
                    }
                }
            }
            // ∂_{y_k} Z_k^j
            for k in 0..d_y {
                pt.copy_from_slice(xy);
                pt[d_x + k] = xy[d_x + k] + h;
                z.eval_into(pt, zp);
                pt[d_x + k] = xy[d_x + k] - h;
                z.eval_into(pt, zm);
                for j in 0..d_x {
                    let dz = (zp[j * d_y + k] - zm[j * d_y + k]) / (2.0 * h);
                    out[j] += sign * 0.5 * dz;
                }
            }
        });
    })
}

/// Assemble the filtering rough-drift system for `S = (X, Y, I)`.
pub fn build_filter_system(model: &FilterModel) -> Result<RoughDriftSystem> {
    model.validate()?;
    let d_x = model.d_x;
    let d_y = model.d_y;
    let d_b = model.d_b;
    let d_s = model.state_dim();
    let m = model.xy_dim();

    // rough-drift columns c_k = (Z_k, e_k, h^k)
    let z = model.z.clone();
    let h = model.h.clone();
    let c_eval = {
        let z = z.clone();
        let h = h.clone();
        move |s: &[f64], out: &mut [f64]| {
            let xy = &s[..m];
            out.fill(0.0);
            linalg::with_scratch(d_x * d_y + d_y, |buf| {
                let (zbuf, hbuf) = buf.split_at_mut(d_x * d_y);
                z.eval_into(xy, zbuf);
                h.eval_into(xy, hbuf);
                out[..d_x * d_y].copy_from_slice(zbuf);
                for k in 0..d_y {
                    out[(d_x + k) * d_y + k] = 1.0;
                }
                out[(d_x + d_y) * d_y..].copy_from_slice(hbuf);
            });
        }
    };
    let c_jac = {
        let z = z.clone();
        let h = h.clone();
        move |s: &[f64], out: &mut [f64]| {
            let xy = &s[..m];
            out.fill(0.0);
            linalg::with_scratch(d_x * d_y * m + d_y * m, |buf| {
                let (zjac, hjac) = buf.split_at_mut(d_x * d_y * m);
                let mut scratch = Vec::new();
                z.jacobian_into(xy, zjac, &mut scratch);
                h.jacobian_into(xy, hjac, &mut scratch);
                // out[(row·d_y + k)·d_s + col]
                for j in 0..d_x {
                    for k in 0..d_y {
                        for col in 0..m {
                            out[(j * d_y + k) * d_s + col] = zjac[(j * d_y + k) * m + col];
                        }
                    }
                }
                let irow = d_x + d_y;
                for k in 0..d_y {
                    for col in 0..m {
                        out[(irow * d_y + k) * d_s + col] = hjac[k * m + col];
                    }
                }
            });
        }
    };
    let c = CoeffFn::matrix(d_s, d_s, d_y, c_eval).with_jacobian(c_jac);

    // drift a = (L₀, 0, −½ Σ_k [D_k h^k + (h^k)²])
    let l0 = model.l0_stratonovich();
    let a_eval = {
        let z = z.clone();
        let h = h.clone();
        move |s: &[f64], out: &mut [f64]| {
            let xy = &s[..m];
            out.fill(0.0);
            linalg::with_scratch(d_x + d_x * d_y + 3 * d_y + 2 * m, |buf| {
                let (l0buf, rest) = buf.split_at_mut(d_x);
                let (zbuf, rest) = rest.split_at_mut(d_x * d_y);
                let (hbuf, rest) = rest.split_at_mut(d_y);
                let (hp, rest) = rest.split_at_mut(d_y);
                let (hm, rest) = rest.split_at_mut(d_y);
                let (dir, pt) = rest.split_at_mut(m);
                l0.eval_into(xy, l0buf);
                out[..d_x].copy_from_slice(l0buf);
                z.eval_into(xy, zbuf);
                h.eval_into(xy, hbuf);
                let mut drift_i = 0.0;
                for k in 0..d_y {
                    // D_k h^k: central difference of h^k along (Z_k, e_k)
                    for i in 0..d_x {
                        dir[i] = zbuf[i * d_y + k];
                    }
                    dir[d_x..].fill(0.0);
                    dir[d_x + k] = 1.0;
                    let dn = linalg::norm(dir);
                    let tau = 1e-5 * (1.0 + linalg::norm(xy)) / dn.max(1.0);
                    for i in 0..m {
                        pt[i] = xy[i] + tau * dir[i];
                    }
                    h.eval_into(pt, hp);
                    for i in 0..m {
                        pt[i] = xy[i] - tau * dir[i];
                    }
                    h.eval_into(pt, hm);
                    let dkhk = (hp[k] - hm[k]) / (2.0 * tau);
                    drift_i += dkhk + hbuf[k] * hbuf[k];
                }
                out[d_x + d_y] = -0.5 * drift_i;
            });
        }
    };
    let a = CoeffFn::vector(d_s, d_s, a_eval);

    // diffusion rows: (L_j, 0, 0)
    let b = if d_b == 0 {
        CoeffFn::zero(d_s, d_s, 0)
    } else {
        let l = model.l.clone();
        CoeffFn::matrix(d_s, d_s, d_b, move |s: &[f64], out: &mut [f64]| {
            let xy = &s[..m];
            out.fill(0.0);
            l.eval_into(xy, &mut out[..d_x * d_b]);
        })
    };

    // S₀ = (X₀, 0, 0)
    let pad = |p: &[f64]| {
        let mut s = vec![0.0; d_s];
        s[..d_x].copy_from_slice(p);
        s
    };
    let s0_law = match &model.x0_law {
        InitialLaw::Point(p) => InitialLaw::Point(pad(p)),
        InitialLaw::Discrete { points, probs } => InitialLaw::Discrete {
            points: points.iter().map(|p| pad(p)).collect(),
            probs: probs.clone(),
        },
        InitialLaw::UniformBox { lo, hi } => InitialLaw::UniformBox {
            lo: pad(lo),
            hi: pad(hi),
        },
    };

    Ok(RoughDriftSystem {
        d_s,
        d_b,
        d_y,
        a,
        b,
        c,
        c_grade: model.grade,
        s0_law,
    })
}

// ---------------------------------------------------------------------------
// Observation-record simulation (ground truth generation)
// ---------------------------------------------------------------------------

/// A simulated `(X, Y)` record under the physical measure.
#[derive(Debug, Clone)]
pub struct ObservationRecord {
    pub times: Vec<f64>,
    pub d_x: usize,
    pub d_y: usize,
    /// flat `(n+1) × d_x`
    pub x: Vec<f64>,
    /// flat `(n+1) × d_y`
    pub y: Vec<f64>,
}

impl ObservationRecord {
    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.d_y..(i + 1) * self.d_y]
    }

    /// Keep every `stride`-th point (the last point always survives).
    pub fn subsample(&self, stride: usize) -> ObservationRecord {
        let stride = stride.max(1);
        let n = self.times.len() - 1;
        let mut times = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut i = 0;
        while i <= n {
            times.push(self.times[i]);
            x.extend_from_slice(self.x_at(i));
            y.extend_from_slice(self.y_at(i));
            i += stride;
        }
        if *times.last().unwrap() < self.times[n] {
            times.push(self.times[n]);
            x.extend_from_slice(self.x_at(n));
            y.extend_from_slice(self.y_at(n));
        }
        ObservationRecord {
            times,
            d_x: self.d_x,
            d_y: self.d_y,
            x,
            y,
        }
    }

    /// Lift the full observation record, then restrict the enhanced path to
    /// roughly `target_steps` grid points. The restriction keeps the
    /// from-origin areas, so the coarse driver carries the record's true
    /// sub-grid Lévy area.
    pub fn to_driver(&self, target_steps: usize, alpha: f64) -> Result<EnhancedPath> {
        let fine = crate::rough_path::lift_piecewise_linear(
            &self.times,
            self.d_y,
            &self.y,
            alpha,
        )?;
        let n = self.times.len() - 1;
        if target_steps == 0 || target_steps >= n {
            return Ok(fine);
        }
        let stride = n / target_steps;
        let mut keep = Vec::new();
        let mut i = 0;
        while i <= n {
            keep.push(self.times[i]);
            i += stride.max(1);
        }
        if *keep.last().unwrap() < self.times[n] {
            keep.push(self.times[n]);
        }
        fine.restrict_to_times(&keep)
    }
}

/// Fine Euler simulation of the signal/observation pair under the physical
/// measure: `dX = l₀ dt + Z dW + L dB`, `dY = h dt + dW`, with
/// `l₀ = l̄₀ − Σ_k Z_k h^k`.
pub fn simulate_observations(
    model: &FilterModel,
    n_steps: usize,
    horizon: f64,
    seed: u64,
) -> Result<ObservationRecord> {
    model.validate()?;
    let d_x = model.d_x;
    let d_y = model.d_y;
    let d_b = model.d_b;
    let m = model.xy_dim();
    let l0_bar = model.l0_ito();
    let dt = horizon / n_steps as f64;
    let sq = dt.sqrt();
    let normal = StandardNormal;
    let mut rng_w = crate::rng::stream(seed, 0);
    let mut rng_b = crate::rng::stream(seed, 1);
    let mut rng_x0 = crate::rng::stream(seed, 2);

    let mut x = vec![0.0; (n_steps + 1) * d_x];
    let mut y = vec![0.0; (n_steps + 1) * d_y];
    let x0 = model.x0_law.sample(&mut rng_x0);
    x[..d_x].copy_from_slice(&x0);

    let mut xy = vec![0.0; m];
    let mut hbuf = vec![0.0; d_y];
    let mut zbuf = vec![0.0; d_x * d_y];
    let mut lbuf = vec![0.0; d_x * d_b];
    let mut l0buf = vec![0.0; d_x];
    let mut dw = vec![0.0; d_y];
    let mut db = vec![0.0; d_b];
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    for i in 0..n_steps {
        xy[..d_x].copy_from_slice(&x[i * d_x..(i + 1) * d_x]);
        xy[d_x..].copy_from_slice(&y[i * d_y..(i + 1) * d_y]);
        model.h.eval_into(&xy, &mut hbuf);
        model.z.eval_into(&xy, &mut zbuf);
        if d_b > 0 {
            model.l.eval_into(&xy, &mut lbuf);
        }
        l0_bar.eval_into(&xy, &mut l0buf);
        for k in 0..d_y {
            let g: f64 = normal.sample(&mut rng_w);
            dw[k] = sq * g;
        }
        for j in 0..d_b {
            let g: f64 = normal.sample(&mut rng_b);
            db[j] = sq * g;
        }
        for j in 0..d_x {
            // l₀ = l̄₀ − Σ_k Z_k h^k
            let mut drift = l0buf[j];
            for k in 0..d_y {
                drift -= zbuf[j * d_y + k] * hbuf[k];
            }
            let mut acc = x[i * d_x + j] + drift * dt;
            for k in 0..d_y {
                acc += zbuf[j * d_y + k] * dw[k];
            }
            for l in 0..d_b {
                acc += lbuf[j * d_b + l] * db[l];
            }
            x[(i + 1) * d_x + j] = acc;
        }
        for k in 0..d_y {
            y[(i + 1) * d_y + k] = y[i * d_y + k] + hbuf[k] * dt + dw[k];
        }
        times.push((i + 1) as f64 * dt);
    }
    *times.last_mut().unwrap() = horizon;
    Ok(ObservationRecord {
        times,
        d_x,
        d_y,
        x,
        y,
    })
}
