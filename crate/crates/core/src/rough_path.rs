//! Level-2 rough paths over `R^d` on finite grids.
//!
//! An [`EnhancedPath`] stores, per grid point, the path value and the
//! antisymmetric area matrix accumulated from time zero (Stratonovich
//! convention). Increment areas between grid points are derived through the
//! Chen relation, so the stored representation is consistent by construction
//! and consistency tests measure only the quality of the *lift* that produced
//! it.
//!
//! Geodesic interpolation renders a segment increment `(v, A)` as a genuine
//! `R^d` path: the chord for `v` composed with one circular loop per
//! invariant 2-plane of `A`, each loop realizing its block's area exactly.
//! Refining a driver through [`geodesic_interpolate`] therefore exposes
//! level-2 data to any consumer that only reads level-1 values.

use crate::error::{Error, Result};
use crate::linalg;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// A discretely sampled level-2 (geometric α-Hölder) rough path.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPath {
    times: Vec<f64>,
    dim: usize,
    /// Flat `n × dim`, row per grid point; first row is zero.
    values: Vec<f64>,
    /// Flat `n × dim × dim`, antisymmetric area from time 0 per grid point.
    areas: Vec<f64>,
    alpha: f64,
}

/// Hölder seminorms of the two levels of an [`EnhancedPath`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderSeminorms {
    /// sup over grid pairs of |ΔY_{s,u}| / |u−s|^α
    pub level1: f64,
    /// sup over grid pairs of |A_{s,u}|_F / |u−s|^{2α}
    pub level2: f64,
    pub alpha: f64,
}

impl HolderSeminorms {
    /// Homogeneous radius `max(level1, sqrt(level2))`, the scale entering
    /// "driver within radius R" statements.
    pub fn radius(&self) -> f64 {
        self.level1.max(self.level2.sqrt())
    }
}

/// Which grid pairs enter the seminorm suprema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Every pair `i < j` — exact, O(n²).
    Full,
    /// Pairs at dyadic index gaps `j = i + 2^m` — O(n log n) coarse mode.
    DyadicGaps,
}

impl EnhancedPath {
    /// Build a path from explicit per-point values and from-origin areas.
    ///
    /// Area matrices are antisymmetrized exactly on ingestion; anything whose
    /// symmetric part exceeds `1e-12` of its scale is rejected.
    pub fn new(
        times: Vec<f64>,
        dim: usize,
        values: Vec<f64>,
        areas: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let n = times.len();
        if n == 0 || times[0] != 0.0 {
            return Err(Error::NonMonotoneTimes(0));
        }
        for i in 1..n {
            if !(times[i] > times[i - 1]) {
                return Err(Error::NonMonotoneTimes(i));
            }
        }
        if values.len() != n * dim || areas.len() != n * dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values and {} area entries, got {} and {}",
                n * dim,
                n * dim * dim,
                values.len(),
                areas.len()
            )));
        }
        let head = linalg::norm(&values[0..dim]);
        if head != 0.0 {
            return Err(Error::FirstValueNonzero(head));
        }
        let mut areas = areas;
        let scale = 1.0 + linalg::norm(&areas);
        for point in 0..n {
            let a = &mut areas[point * dim * dim..(point + 1) * dim * dim];
            for k in 0..dim {
                a[k * dim + k] = 0.0;
                for l in k + 1..dim {
                    let sym = a[k * dim + l] + a[l * dim + k];
                    if sym.abs() > 1e-12 * scale {
                        return Err(Error::DimensionMismatch(format!(
                            "area matrix at point {point} is not antisymmetric (residual {sym:e})"
                        )));
                    }
                    let v = 0.5 * (a[k * dim + l] - a[l * dim + k]);
                    a[k * dim + l] = v;
                    a[l * dim + k] = -v;
                }
            }
        }
        let mut p = Self {
            times,
            dim,
            values,
            areas,
            alpha: 0.0,
        };
        p.set_alpha(alpha)?;
        Ok(p)
    }

    fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::InvalidModel(format!(
                "alpha = {alpha} outside the admissible band (0, 1/2)"
            )));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Value row at grid point `i`.
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// From-origin area matrix (flat row-major) at grid point `i`.
    pub fn area(&self, i: usize) -> &[f64] {
        &self.areas[i * self.dim * self.dim..(i + 1) * self.dim * self.dim]
    }

    pub fn value_vec(&self, i: usize) -> DVector<f64> {
        DVector::from_row_slice(self.value(i))
    }

    pub fn area_mat(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, self.area(i))
    }

    /// Value increment between grid points `i < j`.
    pub fn value_increment(&self, i: usize, j: usize, out: &mut [f64]) {
        let (a, b) = (self.value(i), self.value(j));
        for k in 0..self.dim {
            out[k] = b[k] - a[k];
        }
    }

    /// Increment area over `[t_i, t_j]` via the Chen relation,
    /// `A_{i,j} = A_j − A_i − ½(Y_i ⊗ ΔY − ΔY ⊗ Y_i)`.
    pub fn increment_area(&self, i: usize, j: usize, out: &mut [f64]) {
        let d = self.dim;
        let (ai, aj) = (self.area(i), self.area(j));
        let yi = self.value(i);
        let yj = self.value(j);
        for k in 0..d {
            for l in 0..d {
                let dy_k = yj[k] - yi[k];
                let dy_l = yj[l] - yi[l];
                out[k * d + l] = aj[k * d + l] - ai[k * d + l] - 0.5 * (yi[k] * dy_l - dy_k * yi[l]);
            }
        }
    }

    /// Max Chen-identity residual over grid triples `s < u < t`, relative to
    /// the path's level-2 scale. Exhaustive for small grids, sampled above
    /// `max_triples`.
    pub fn chen_residual(&self, max_triples: usize, seed: u64) -> f64 {
        let n = self.len();
        if n < 3 {
            return 0.0;
        }
        let d = self.dim;
        let scale = 1.0 + self.areas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut a_su = vec![0.0; d * d];
        let mut a_ut = vec![0.0; d * d];
        let mut a_st = vec![0.0; d * d];
        let mut dy_su = vec![0.0; d];
        let mut dy_ut = vec![0.0; d];
        let mut worst = 0.0f64;
        let check = |s: usize, u: usize, t: usize,
                         a_su: &mut [f64],
                         a_ut: &mut [f64],
                         a_st: &mut [f64],
                         dy_su: &mut [f64],
                         dy_ut: &mut [f64]| {
            self.increment_area(s, u, a_su);
            self.increment_area(u, t, a_ut);
            self.increment_area(s, t, a_st);
            self.value_increment(s, u, dy_su);
            self.value_increment(u, t, dy_ut);
            let mut local = 0.0f64;
            for k in 0..d {
                for l in 0..d {
                    let cross = 0.5 * (dy_su[k] * dy_ut[l] - dy_ut[k] * dy_su[l]);
                    let r = a_st[k * d + l] - (a_su[k * d + l] + a_ut[k * d + l] + cross);
                    local = local.max(r.abs());
                }
            }
            local
        };
        let total = n * (n - 1) * (n - 2) / 6;
        if total <= max_triples {
            for s in 0..n {
                for u in s + 1..n {
                    for t in u + 1..n {
                        worst = worst.max(check(
                            s, u, t, &mut a_su, &mut a_ut, &mut a_st, &mut dy_su, &mut dy_ut,
                        ));
                    }
                }
            }
        } else {
            let mut rng = crate::rng::stream(seed, 0);
            use rand::Rng;
            for _ in 0..max_triples {
                let mut idx = [
                    rng.random_range(0..n),
                    rng.random_range(0..n),
                    rng.random_range(0..n),
                ];
                idx.sort_unstable();
                let [s, u, t] = idx;
                if s == u || u == t {
                    continue;
                }
                worst = worst.max(check(
                    s, u, t, &mut a_su, &mut a_ut, &mut a_st, &mut dy_su, &mut dy_ut,
                ));
            }
        }
        worst / scale
    }

    /// Max antisymmetry violation over all stored area matrices (exactly zero
    /// for paths built through this module).
    pub fn antisymmetry_residual(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            let a = self.area(i);
            for k in 0..d {
                for l in 0..d {
                    worst = worst.max((a[k * d + l] + a[l * d + k]).abs());
                }
            }
        }
        worst
    }

    /// Scale the level-1 values by `factor`, leaving areas untouched.
    pub fn scale_values(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= factor;
        }
        out
    }

    /// Dilate the path: values by `lambda`, areas by `lambda²`.
    pub fn dilate(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= lambda;
        }
        let l2 = lambda * lambda;
        for a in &mut out.areas {
            *a *= l2;
        }
        out
    }

    /// Shift one antisymmetric area entry `(k, l)` by `delta` at every grid
    /// point from `from_index` on — a pure level-2 perturbation, values
    /// untouched.
    pub fn shift_area(&self, k: usize, l: usize, delta: f64, from_index: usize) -> Result<Self> {
        let d = self.dim;
        if k >= d || l >= d || k == l {
            return Err(Error::DimensionMismatch(format!(
                "area entry ({k},{l}) invalid for dimension {d}"
            )));
        }
        let mut out = self.clone();
        for i in from_index.max(1)..self.len() {
            out.areas[i * d * d + k * d + l] += delta;
            out.areas[i * d * d + l * d + k] -= delta;
        }
        Ok(out)
    }

    /// Restrict the path to a subset of its grid (times must match grid
    /// points exactly; the from-origin areas are retained, so the restriction
    /// keeps the true level-2 data).
    pub fn restrict_to_times(&self, times: &[f64]) -> Result<Self> {
        let d = self.dim;
        let mut values = Vec::with_capacity(times.len() * d);
        let mut areas = Vec::with_capacity(times.len() * d * d);
        let mut cursor = 0usize;
        for &t in times {
            while cursor < self.len() && self.times[cursor] < t {
                cursor += 1;
            }
            if cursor >= self.len() || self.times[cursor] != t {
                return Err(Error::GridMismatch(format!(
                    "time {t} is not a grid point of the source path"
                )));
            }
            values.extend_from_slice(self.value(cursor));
            areas.extend_from_slice(self.area(cursor));
        }
        Self::new(times.to_vec(), d, values, areas, self.alpha)
    }
}

/// Lift discrete samples to a level-2 rough path by piecewise-linear
/// interpolation: each chord has zero increment area, so the from-origin
/// area accumulates purely through the Chen relation.
pub fn lift_piecewise_linear(times: &[f64], dim: usize, values: &[f64], alpha: f64) -> Result<EnhancedPath> {
    let n = times.len();
    if values.len() != n * dim {
        return Err(Error::DimensionMismatch(format!(
            "{} samples of dimension {} need {} values, got {}",
            n,
            dim,
            n * dim,
            values.len()
        )));
    }
    let mut areas = vec![0.0; n * dim * dim];
    for i in 0..n.saturating_sub(1) {
        let (prev, next) = areas.split_at_mut((i + 1) * dim * dim);
        let a_prev = &prev[i * dim * dim..];
        let a_next = &mut next[..dim * dim];
        let yi = &values[i * dim..(i + 1) * dim];
        let yj = &values[(i + 1) * dim..(i + 2) * dim];
        for k in 0..dim {
            for l in 0..dim {
                let dy_k = yj[k] - yi[k];
                let dy_l = yj[l] - yi[l];
                a_next[k * dim + l] = a_prev[k * dim + l] + 0.5 * (yi[k] * dy_l - dy_k * yi[l]);
            }
        }
    }
    EnhancedPath::new(times.to_vec(), dim, values.to_vec(), areas, alpha)
}

// ---------------------------------------------------------------------------
// Geodesic interpolation
// ---------------------------------------------------------------------------

enum Piece {
    Chord { v: Vec<f64>, len: f64 },
    Loop { p: Vec<f64>, q: Vec<f64>, radius: f64, len: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match self {
            Piece::Chord { len, .. } | Piece::Loop { len, .. } => *len,
        }
    }

    /// Partial increment `(value, area)` of the piece at local fraction `s`.
    fn eval(&self, s: f64, dim: usize, value: &mut [f64], area: &mut [f64]) {
        value.fill(0.0);
        area.fill(0.0);
        match self {
            Piece::Chord { v, .. } => {
                for k in 0..dim {
                    value[k] = s * v[k];
                }
            }
            Piece::Loop { p, q, radius, .. } => {
                let theta = 2.0 * PI * s;
                let (sin, cos) = theta.sin_cos();
                let r = *radius;
                for k in 0..dim {
                    value[k] = r * ((cos - 1.0) * q[k] + sin * p[k]);
                }
                let a = 0.5 * r * r * (theta - sin);
                for k in 0..dim {
                    for l in 0..dim {
                        area[k * dim + l] = a * (q[k] * p[l] - p[k] * q[l]);
                    }
                }
            }
        }
    }
}

/// One segment's increment rendered as chord + area-realizing loops.
struct GeodesicSegment {
    pieces: Vec<Piece>,
    total_len: f64,
    dim: usize,
}

/// `(v1,A1) ⊗ (v2,A2) = (v1+v2, A1+A2+½(v1⊗v2 − v2⊗v1))`, written into the
/// first pair.
fn compose_increment(v1: &mut [f64], a1: &mut [f64], v2: &[f64], a2: &[f64], dim: usize) {
    for k in 0..dim {
        for l in 0..dim {
            a1[k * dim + l] += a2[k * dim + l] + 0.5 * (v1[k] * v2[l] - v2[k] * v1[l]);
        }
    }
    for k in 0..dim {
        v1[k] += v2[k];
    }
}

/// Split an antisymmetric matrix into invariant 2-planes: `A = Σ a_m (q_m ⊗ p_m − p_m ⊗ q_m)`
/// with `a_m > 0` and `{p_m, q_m}` orthonormal.
fn plane_decomposition(a: &[f64], dim: usize) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    let scale = linalg::frobenius(a);
    if scale <= 1e-300 {
        return Vec::new();
    }
    let am = DMatrix::from_row_slice(dim, dim, a);
    let m = &am * am.transpose(); // = −A², symmetric PSD
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let tol = 1e-13 * scale;
    let mut planes: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for &idx in &order {
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda.sqrt() <= tol {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // deflate against already accepted planes
        for (_, p, q) in &planes {
            let cp: f64 = v.iter().zip(p).map(|(x, y)| x * y).sum();
            let cq: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
            for k in 0..dim {
                v[k] -= cp * p[k] + cq * q[k];
            }
        }
        let nv = linalg::norm(&v);
        if nv < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= nv;
        }
        let mut av = vec![0.0; dim];
        linalg::matvec(a, &v, &mut av, dim, dim);
        let strength = linalg::norm(&av);
        if strength <= tol {
            continue;
        }
        for x in &mut av {
            *x /= strength;
        }
        planes.push((strength, v, av));
    }
    planes
}

impl GeodesicSegment {
    fn build(v: &[f64], a: &[f64], dim: usize) -> Self {
        let mut pieces = Vec::new();
        let chord_len = linalg::norm(v);
        if chord_len > 0.0 {
            pieces.push(Piece::Chord {
                v: v.to_vec(),
                len: chord_len,
            });
        }
        for (strength, p, q) in plane_decomposition(a, dim) {
            let radius = (strength / PI).sqrt();
            pieces.push(Piece::Loop {
                p,
                q,
                radius,
                len: 2.0 * PI * radius,
            });
        }
        let total_len = pieces.iter().map(Piece::len).sum();
        GeodesicSegment {
            pieces,
            total_len,
            dim,
        }
    }

    /// Increment `(value, area)` of the geodesic from the segment start to
    /// overall fraction `u ∈ [0, 1]`.
    fn eval(&self, u: f64, value: &mut [f64], area: &mut [f64]) {
        let dim = self.dim;
        value.fill(0.0);
        area.fill(0.0);
        if self.total_len == 0.0 {
            return;
        }
        let mut remaining = u.clamp(0.0, 1.0) * self.total_len;
        let mut pv = vec![0.0; dim];
        let mut pa = vec![0.0; dim * dim];
        for piece in &self.pieces {
            let len = piece.len();
            let frac = if len > 0.0 { (remaining / len).min(1.0) } else { 1.0 };
            piece.eval(frac, dim, &mut pv, &mut pa);
            compose_increment(value, area, &pv, &pa, dim);
            remaining -= frac * len;
            if remaining <= 0.0 {
                break;
            }
        }
    }
}

/// Interpolate a rough path at `query_times` along per-segment geodesics in
/// the step-2 group: exact at original grid points, endpoint increments and
/// areas matched, Chen consistency preserved.
pub fn geodesic_interpolate(path: &EnhancedPath, query_times: &[f64]) -> Result<EnhancedPath> {
    let n = query_times.len();
    let d = path.dim();
    if n == 0 || query_times[0] != 0.0 {
        return Err(Error::NonMonotoneTimes(0));
    }
    let horizon = path.horizon();
    for (i, &t) in query_times.iter().enumerate() {
        if i > 0 && !(t > query_times[i - 1]) {
            return Err(Error::NonMonotoneTimes(i));
        }
        if t < 0.0 || t > horizon {
            return Err(Error::QueryOutOfRange { t, horizon });
        }
    }
    let mut segments: Vec<Option<GeodesicSegment>> = Vec::new();
    segments.resize_with(path.len().saturating_sub(1), || None);
    let mut values = vec![0.0; n * d];
    let mut areas = vec![0.0; n * d * d];
    let mut inc_v = vec![0.0; d];
    let mut inc_a = vec![0.0; d * d];
    let mut seg_v = vec![0.0; d];
    let mut seg_a = vec![0.0; d * d];
    let mut cursor = 0usize;
    for (qi, &t) in query_times.iter().enumerate() {
        while cursor + 1 < path.len() && path.times()[cursor + 1] <= t {
            cursor += 1;
        }
        let out_v = &mut values[qi * d..(qi + 1) * d];
        let out_a = &mut areas[qi * d * d..(qi + 1) * d * d];
        if path.times()[cursor] == t {
            out_v.copy_from_slice(path.value(cursor));
            out_a.copy_from_slice(path.area(cursor));
            continue;
        }
        // strictly interior to segment [cursor, cursor+1]
        let t0 = path.times()[cursor];
        let t1 = path.times()[cursor + 1];
        let u = (t - t0) / (t1 - t0);
        let seg = segments[cursor].get_or_insert_with(|| {
            let mut v = vec![0.0; d];
            let mut a = vec![0.0; d * d];
            path.value_increment(cursor, cursor + 1, &mut v);
            path.increment_area(cursor, cursor + 1, &mut a);
            GeodesicSegment::build(&v, &a, d)
        });
        seg.eval(u, &mut seg_v, &mut seg_a);
        // compose the base-point group element with the partial increment
        inc_v.copy_from_slice(path.value(cursor));
        inc_a.copy_from_slice(path.area(cursor));
        compose_increment(&mut inc_v, &mut inc_a, &seg_v, &seg_a, d);
        out_v.copy_from_slice(&inc_v);
        out_a.copy_from_slice(&inc_a);
    }
    EnhancedPath::new(query_times.to_vec(), d, values, areas, path.alpha())
}

// ---------------------------------------------------------------------------
// Seminorms and distance
// ---------------------------------------------------------------------------

fn pairs(n: usize, mode: PairMode) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    match mode {
        PairMode::Full => {
            for i in 0..n {
                for j in i + 1..n {
                    out.push((i, j));
                }
            }
        }
        PairMode::DyadicGaps => {
            // dyadic gaps with quarter-octave fill-ins
            let mut gaps = Vec::new();
            let mut gap = 1usize;
            while gap < n {
                for num in [4usize, 5, 6, 7] {
                    let g = gap * num / 4;
                    if g < n && Some(&g) != gaps.last() {
                        gaps.push(g);
                    }
                }
                gap *= 2;
            }
            gaps.dedup();
            for g in gaps {
                for i in 0..n - g {
                    out.push((i, i + g));
                }
            }
        }
    }
    out
}

/// Hölder seminorms over all grid pairs (exact mode).
pub fn holder_seminorms(path: &EnhancedPath) -> HolderSeminorms {
    holder_seminorms_with(path, PairMode::Full)
}

/// Hölder seminorms with an explicit pair policy.
pub fn holder_seminorms_with(path: &EnhancedPath, mode: PairMode) -> HolderSeminorms {
    let d = path.dim();
    let alpha = path.alpha();
    let mut dy = vec![0.0; d];
    let mut da = vec![0.0; d * d];
    let mut level1 = 0.0f64;
    let mut level2 = 0.0f64;
    for (i, j) in pairs(path.len(), mode) {
        let dt = path.times()[j] - path.times()[i];
        path.value_increment(i, j, &mut dy);
        path.increment_area(i, j, &mut da);
        level1 = level1.max(linalg::norm(&dy) / dt.powf(alpha));
        level2 = level2.max(linalg::frobenius(&da) / dt.powf(2.0 * alpha));
    }
    HolderSeminorms {
        level1,
        level2,
        alpha,
    }
}

/// Inhomogeneous α-Hölder rough-path distance between two paths on a common
/// grid: max over levels k ∈ {1,2} of the sup over grid pairs of
/// `|Δ_k(p1) − Δ_k(p2)| / |u−s|^{kα}`.
pub fn holder_distance(p1: &EnhancedPath, p2: &EnhancedPath) -> Result<f64> {
    if p1.alpha() != p2.alpha() {
        return Err(Error::AlphaMismatch(p1.alpha(), p2.alpha()));
    }
    if p1.dim() != p2.dim() {
        return Err(Error::DimensionMismatch(format!(
            "path dimensions {} vs {}",
            p1.dim(),
            p2.dim()
        )));
    }
    if p1.len() != p2.len() {
        return Err(Error::GridMismatch(format!(
            "grid sizes {} vs {}",
            p1.len(),
            p2.len()
        )));
    }
    let tol = 1e-12 * (1.0 + p1.horizon().abs());
    for (a, b) in p1.times().iter().zip(p2.times()) {
        if (a - b).abs() > tol {
            return Err(Error::GridMismatch(format!("grid times differ: {a} vs {b}")));
        }
    }
    let d = p1.dim();
    let alpha = p1.alpha();
    let mut dy1 = vec![0.0; d];
    let mut dy2 = vec![0.0; d];
    let mut da1 = vec![0.0; d * d];
    let mut da2 = vec![0.0; d * d];
    let mut dist = 0.0f64;
    for (i, j) in pairs(p1.len(), PairMode::Full) {
        let dt = p1.times()[j] - p1.times()[i];
        p1.value_increment(i, j, &mut dy1);
        p2.value_increment(i, j, &mut dy2);
        for k in 0..d {
            dy1[k] -= dy2[k];
        }
        dist = dist.max(linalg::norm(&dy1) / dt.powf(alpha));
        p1.increment_area(i, j, &mut da1);
        p2.increment_area(i, j, &mut da2);
        for k in 0..d * d {
            da1[k] -= da2[k];
        }
        dist = dist.max(linalg::frobenius(&da1) / dt.powf(2.0 * alpha));
    }
    Ok(dist)
}

// ---------------------------------------------------------------------------
// Grid helpers and samplers
// ---------------------------------------------------------------------------

/// Uniform grid of `n_steps + 1` points on `[0, horizon]`.
pub fn uniform_grid(n_steps: usize, horizon: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        out.push(i as f64 * horizon / n_steps as f64);
    }
    *out.last_mut().unwrap() = horizon;
    out
}

/// Sorted union of two grids (duplicates within `1e-12·horizon` collapse to
/// the first grid's representative).
pub fn merge_grids(a: &[f64], b: &[f64]) -> Vec<f64> {
    let horizon = a.last().copied().unwrap_or(0.0).max(b.last().copied().unwrap_or(0.0));
    let tol = 1e-12 * (1.0 + horizon);
    let mut out: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out.dedup_by(|x, y| (*x - *y).abs() <= tol);
    out
}

/// Piecewise-linear lift of a Brownian sample on a uniform grid —
/// the workhorse driver generator for experiments.
pub fn sample_brownian_lift(
    dim: usize,
    n_steps: usize,
    horizon: f64,
    seed: u64,
    alpha: f64,
) -> EnhancedPath {
    let times = uniform_grid(n_steps, horizon);
    let dt = horizon / n_steps as f64;
    let scale = dt.sqrt();
    let mut rng = crate::rng::stream(seed, 0);
    let normal = StandardNormal;
    let mut values = vec![0.0; (n_steps + 1) * dim];
    for i in 0..n_steps {
        for k in 0..dim {
            let z: f64 = normal.sample(&mut rng);
            values[(i + 1) * dim + k] = values[i * dim + k] + scale * z;
        }
    }
    lift_piecewise_linear(&times, dim, &values, alpha).expect("generated samples are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l_path() -> EnhancedPath {
        // (0,0) -> (1,0) -> (1,1)
        lift_piecewise_linear(
            &[0.0, 0.5, 1.0],
            2,
            &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0],
            0.4,
        )
        .unwrap()
    }

    #[test]
    fn l_path_area_is_half() {
        let p = l_path();
        let a = p.area(2);
        assert_eq!(a[0 * 2 + 1], 0.5);
        assert_eq!(a[1 * 2 + 0], -0.5);
    }

    #[test]
    fn straight_segment_has_zero_area() {
        let p = lift_piecewise_linear(&[0.0, 1.0], 3, &[0.0, 0.0, 0.0, 0.3, -1.2, 2.0], 0.4).unwrap();
        assert!(p.area(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lift_rejects_bad_input() {
        assert!(matches!(
            lift_piecewise_linear(&[0.0, 0.0], 1, &[0.0, 1.0], 0.4),
            Err(Error::NonMonotoneTimes(1))
        ));
        assert!(matches!(
            lift_piecewise_linear(&[0.0, 1.0], 1, &[0.5, 1.0], 0.4),
            Err(Error::FirstValueNonzero(_))
        ));
    }

    #[test]
    fn collinear_insertion_is_invariant() {
        let coarse = lift_piecewise_linear(&[0.0, 1.0, 2.0], 2, &[0.0, 0.0, 1.0, 0.5, 0.2, 1.7], 0.4).unwrap();
        // insert midpoints on each chord
        let mid1 = [0.5, 0.25];
        let mid2 = [0.6, 1.1];
        let fine = lift_piecewise_linear(
            &[0.0, 0.5, 1.0, 1.5, 2.0],
            2,
            &[0.0, 0.0, mid1[0], mid1[1], 1.0, 0.5, mid2[0], mid2[1], 0.2, 1.7],
            0.4,
        )
        .unwrap();
        for (ci, fi) in [(1usize, 2usize), (2, 4)] {
            for k in 0..4 {
                assert!((coarse.area(ci)[k] - fine.area(fi)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brownian_area_self_converges_with_richardson_trend() {
        // reference: level-14 sampling of one fixed Brownian record
        let fine_level = 14u32;
        let n = 1usize << fine_level;
        let p = sample_brownian_lift(2, n, 1.0, 99, 0.4);
        let reference = p.area(n)[1];
        let mut errs = Vec::new();
        for level in [4u32, 6, 8, 10] {
            let stride = 1usize << (fine_level - level);
            let m = 1usize << level;
            let mut times = Vec::with_capacity(m + 1);
            let mut values = Vec::with_capacity((m + 1) * 2);
            for i in 0..=m {
                times.push(p.times()[i * stride]);
                values.extend_from_slice(p.value(i * stride));
            }
            let sub = lift_piecewise_linear(&times, 2, &values, 0.4).unwrap();
            errs.push((sub.area(m)[1] - reference).abs());
        }
        // self-convergence: the coarsest error dominates the finest clearly
        assert!(errs[3] < errs[0] * 0.5, "errors {errs:?} do not shrink");
        // Richardson-style trend: two-level refinement shrinks the error
        assert!(errs[2] < errs[0], "errors {errs:?} not monotone over two levels");
        assert!(errs[3] < errs[1], "errors {errs:?} not monotone over two levels");
    }

    #[test]
    fn geodesic_identity_on_original_grid() {
        let p = l_path();
        let q = geodesic_interpolate(&p, p.times()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn geodesic_zero_area_midpoint_is_chord() {
        let p = lift_piecewise_linear(&[0.0, 1.0], 2, &[0.0, 0.0, 0.8, -0.4], 0.4).unwrap();
        let q = geodesic_interpolate(&p, &[0.0, 0.5, 1.0]).unwrap();
        assert!((q.value(1)[0] - 0.4).abs() < 1e-14);
        assert!((q.value(1)[1] + 0.2).abs() < 1e-14);
        assert!(q.area(1).iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn geodesic_pure_area_midpoint_on_circle() {
        // one segment, zero increment, area a12 = π
        let areas = vec![0.0, 0.0, 0.0, 0.0, 0.0, PI, -PI, 0.0];
        let p = EnhancedPath::new(vec![0.0, 1.0], 2, vec![0.0; 4], areas, 0.4).unwrap();
        let q = geodesic_interpolate(&p, &[0.0, 0.5, 1.0]).unwrap();
        // midpoint: halfway around a circle of enclosed area π (radius 1)
        let v = q.value(1);
        let dist_from_origin = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((dist_from_origin - 2.0).abs() < 1e-12, "midpoint {v:?}");
        assert!((q.area(1)[1] - PI / 2.0).abs() < 1e-12);
        // endpoint reproduced
        assert!(linalg::norm(q.value(2)) < 1e-12);
        assert!((q.area(2)[1] - PI).abs() < 1e-12);
    }

    #[test]
    fn geodesic_relift_matches_fine_polygon() {
        // render the pure-area circle finely, re-lift the polygon, compare areas
        let areas = vec![0.0, 0.0, 0.0, 0.0, 0.0, PI, -PI, 0.0];
        let p = EnhancedPath::new(vec![0.0, 1.0], 2, vec![0.0; 4], areas, 0.4).unwrap();
        let m = 4096;
        let grid = uniform_grid(m, 1.0);
        let q = geodesic_interpolate(&p, &grid).unwrap();
        // re-lift from level-1 values only
        let mut vals = Vec::with_capacity((m + 1) * 2);
        for i in 0..=m {
            vals.extend_from_slice(q.value(i));
        }
        let relift = lift_piecewise_linear(q.times(), 2, &vals, 0.4).unwrap();
        // inscribed polygon area converges O(m^{-2}); at 4096 within 1e-5
        assert!((relift.area(m)[1] - PI).abs() < 1e-5);
        // and the interpolated path's own stored area is exact
        assert!((q.area(m)[1] - PI).abs() < 1e-12);
    }

    #[test]
    fn geodesic_rejects_out_of_range() {
        let p = l_path();
        assert!(matches!(
            geodesic_interpolate(&p, &[0.0, 1.5]),
            Err(Error::QueryOutOfRange { .. })
        ));
    }

    #[test]
    fn seminorms_zero_path() {
        let p = lift_piecewise_linear(&[0.0, 1.0], 2, &[0.0; 4], 0.4).unwrap();
        let s = holder_seminorms(&p);
        assert_eq!(s.level1, 0.0);
        assert_eq!(s.level2, 0.0);
    }

    #[test]
    fn seminorm_straight_segment_attained_at_full_interval() {
        let p = lift_piecewise_linear(
            &[0.0, 0.25, 0.5, 0.75, 1.0],
            2,
            &[0.0, 0.0, 0.75, 1.0, 1.5, 2.0, 2.25, 3.0, 3.0, 4.0],
            0.4,
        )
        .unwrap();
        let s = holder_seminorms(&p);
        assert!((s.level1 - 5.0).abs() < 1e-12); // |v| = |(3,4)| = 5
    }

    #[test]
    fn dyadic_mode_close_to_full_on_brownian_sample() {
        let p = sample_brownian_lift(2, 512, 1.0, 2024, 0.4);
        let full = holder_seminorms_with(&p, PairMode::Full);
        let dyadic = holder_seminorms_with(&p, PairMode::DyadicGaps);
        assert!(dyadic.level1 <= full.level1 + 1e-12);
        assert!(dyadic.level2 <= full.level2 + 1e-12);
        assert!(dyadic.level1 > 0.9 * full.level1, "{} vs {}", dyadic.level1, full.level1);
        assert!(dyadic.level2 > 0.9 * full.level2, "{} vs {}", dyadic.level2, full.level2);
    }

    #[test]
    fn distance_identity_and_scaling() {
        let p = sample_brownian_lift(2, 64, 1.0, 5, 0.4);
        assert_eq!(holder_distance(&p, &p).unwrap(), 0.0);
        let delta = 1e-3;
        let q = p.scale_values(1.0 + delta);
        // direct enumeration oracle for the level-1 part
        let d = holder_distance(&p, &q).unwrap();
        let mut level1_direct = 0.0f64;
        let mut dy = vec![0.0; 2];
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let dt = p.times()[j] - p.times()[i];
                p.value_increment(i, j, &mut dy);
                level1_direct = level1_direct.max(delta * linalg::norm(&dy) / dt.powf(0.4));
            }
        }
        let s = holder_seminorms(&p);
        assert!((level1_direct - delta * s.level1).abs() < 1e-12);
        assert!(d >= level1_direct - 1e-12);
    }

    #[test]
    fn distance_triangle_inequality_spot_check() {
        let a = sample_brownian_lift(2, 32, 1.0, 11, 0.4);
        let b = sample_brownian_lift(2, 32, 1.0, 12, 0.4);
        let c = sample_brownian_lift(2, 32, 1.0, 13, 0.4);
        let ab = holder_distance(&a, &b).unwrap();
        let bc = holder_distance(&b, &c).unwrap();
        let ac = holder_distance(&a, &c).unwrap();
        assert!(ac <= ab + bc + 1e-12);
        assert!(ab <= ac + bc + 1e-12);
    }

    #[test]
    fn distance_errors() {
        let a = sample_brownian_lift(2, 32, 1.0, 11, 0.4);
        let b = sample_brownian_lift(2, 16, 1.0, 11, 0.4);
        assert!(matches!(holder_distance(&a, &b), Err(Error::GridMismatch(_))));
        let c = sample_brownian_lift(2, 32, 1.0, 11, 0.35);
        assert!(matches!(holder_distance(&a, &c), Err(Error::AlphaMismatch(_, _))));
    }

    #[test]
    fn restriction_keeps_true_areas() {
        let p = sample_brownian_lift(2, 256, 1.0, 3, 0.4);
        let coarse_times: Vec<f64> = (0..=16).map(|i| p.times()[i * 16]).collect();
        let r = p.restrict_to_times(&coarse_times).unwrap();
        for i in 0..=16 {
            assert_eq!(r.value(i), p.value(i * 16));
            assert_eq!(r.area(i), p.area(i * 16));
        }
        // the restriction differs from a plain re-lift exactly by the
        // sub-grid Lévy area
        let mut vals = Vec::new();
        for i in 0..=16 {
            vals.extend_from_slice(p.value(i * 16));
        }
        let relift = lift_piecewise_linear(&coarse_times, 2, &vals, 0.4).unwrap();
        let mut diff = 0.0f64;
        for i in 0..=16 {
            diff = diff.max((r.area(i)[1] - relift.area(i)[1]).abs());
        }
        assert!(diff > 1e-6, "Brownian sub-grid area unexpectedly tiny");
    }

    #[test]
    fn chen_residual_small_for_lifts() {
        let p = sample_brownian_lift(3, 128, 1.0, 21, 0.4);
        assert!(p.chen_residual(20_000, 0) < 1e-12);
        assert_eq!(p.antisymmetry_residual(), 0.0);
    }

    #[test]
    fn shift_area_pure_level2() {
        let p = sample_brownian_lift(2, 32, 1.0, 2, 0.4);
        let q = p.shift_area(0, 1, 0.25, 16).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.value(i), q.value(i));
        }
        assert_eq!(q.area(20)[1] - p.area(20)[1], 0.25);
        assert_eq!(q.area(20)[2] - p.area(20)[2], -0.25);
        assert_eq!(q.area(8), p.area(8));
    }
}
