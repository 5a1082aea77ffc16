//! Monte Carlo evaluation of the robust filter functionals.
//!
//! `g^f(ρ) = Ē[f(X^ρ_T, Y^ρ_T) exp(I^ρ_T)]`, `g¹(ρ) = Ē[exp(I^ρ_T)]` and
//! `θ = g^f/g¹` are estimated over independent auxiliary-noise draws, one
//! counter-based RNG stream per sample. The likelihood exponent `I` is kept
//! in log space until the single exponentiation per sample; leaving the
//! double range is an error, never a clamp. The ratio's standard error uses
//! the delta method with the empirical covariance of `(f·e^I, e^I)`.
//!
//! Samples may run on any number of workers: the reduction always walks
//! sample indices in order, so results are bit-identical for a fixed seed.

use crate::error::{Error, Result};
use crate::io::format_f64;
use crate::rough_path::{
    geodesic_interpolate, holder_distance, merge_grids, uniform_grid, EnhancedPath,
};
use crate::sde::{build_filter_system, FilterModel, RoughSdeSolver};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// A bounded Lipschitz test function on `(x, y)`.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// declared bound; evaluations are checked against it
    pub bound: f64,
    /// declared Lipschitz constant (recorded, not checked)
    pub lipschitz: f64,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        bound: f64,
        lipschitz: f64,
    ) -> Self {
        TestFunction {
            name: name.into(),
            f: Arc::new(f),
            bound,
            lipschitz,
        }
    }

    /// `f ≡ 1`.
    pub fn one() -> Self {
        Self::new("one", |_| 1.0, 1.0, 0.0)
    }

    /// `f(x, y) = tanh(x₁)`.
    pub fn tanh_x1() -> Self {
        Self::new("tanh_x1", |xy| xy[0].tanh(), 1.0, 1.0)
    }

    pub fn eval(&self, xy: &[f64]) -> Result<f64> {
        let v = (self.f)(xy);
        if v.abs() > self.bound + 1e-12 {
            return Err(Error::BoundViolation {
                observed: v.abs(),
                bound: self.bound,
            });
        }
        Ok(v)
    }

    pub fn is_constant_one(&self) -> bool {
        self.name == "one"
    }
}

/// Evaluation options for [`evaluate_theta`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaOptions {
    /// Target number of uniform simulation steps; the driver is refined to
    /// the merged grid through geodesic interpolation. `0` consumes the
    /// driver grid as-is.
    pub sim_steps: usize,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        ThetaOptions { sim_steps: 512 }
    }
}

/// Monte Carlo estimate of `(g^f, g¹, θ)` with delta-method errors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThetaEstimate {
    pub gf_mean: f64,
    pub gf_stderr: f64,
    pub g1_mean: f64,
    pub g1_stderr: f64,
    pub theta: f64,
    pub theta_stderr: f64,
    pub n_samples: u64,
    pub seed: u64,
    pub grid: String,
}

impl ThetaEstimate {
    /// JSON record with floats as 17-digit decimal strings (bit-exact replay).
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "gf_mean": format_f64(self.gf_mean),
            "gf_stderr": format_f64(self.gf_stderr),
            "g1_mean": format_f64(self.g1_mean),
            "g1_stderr": format_f64(self.g1_stderr),
            "theta": format_f64(self.theta),
            "theta_stderr": format_f64(self.theta_stderr),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "grid": self.grid,
        })
    }
}

/// Ratio statistics of paired samples `(u, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStats {
    pub gf_mean: f64,
    pub gf_stderr: f64,
    pub g1_mean: f64,
    pub g1_stderr: f64,
    pub theta: f64,
    pub theta_stderr: f64,
}

/// Means, standard errors and the delta-method error of
/// `mean(u)/mean(w)` for paired samples, reduced in index order.
///
/// Exposed separately so independent estimators (the particle filter) share
/// the same reduction, and so ratio invariances can be tested directly.
pub fn ratio_estimate(us: &[f64], ws: &[f64]) -> RatioStats {
    assert_eq!(us.len(), ws.len());
    let n = us.len() as f64;
    let mut su = 0.0;
    let mut sw = 0.0;
    for i in 0..us.len() {
        su += us[i];
        sw += ws[i];
    }
    let mu = su / n;
    let mw = sw / n;
    let mut cuu = 0.0;
    let mut cww = 0.0;
    let mut cuw = 0.0;
    for i in 0..us.len() {
        let du = us[i] - mu;
        let dw = ws[i] - mw;
        cuu += du * du;
        cww += dw * dw;
        cuw += du * dw;
    }
    let denom = (n - 1.0).max(1.0);
    cuu /= denom;
    cww /= denom;
    cuw /= denom;
    let gf_stderr = (cuu / n).sqrt();
    let g1_stderr = (cww / n).sqrt();
    let theta = mu / mw;
    let var = (cuu - 2.0 * theta * cuw + theta * theta * cww) / (n * mw * mw);
    let theta_stderr = var.max(0.0).sqrt();
    RatioStats {
        gf_mean: mu,
        gf_stderr,
        g1_mean: mw,
        g1_stderr,
        theta,
        theta_stderr,
    }
}

/// Refine a driver to the merged `uniform(sim_steps) ∪ driver grid`.
pub fn refine_driver(driver: &EnhancedPath, sim_steps: usize) -> Result<EnhancedPath> {
    if sim_steps == 0 || sim_steps + 1 <= driver.len() {
        return Ok(driver.clone());
    }
    let grid = merge_grids(&uniform_grid(sim_steps, driver.horizon()), driver.times());
    geodesic_interpolate(driver, &grid)
}

fn brownian_increments(
    times: &[f64],
    d_b: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let n = times.len() - 1;
    let normal = StandardNormal;
    let mut out = vec![0.0; n * d_b];
    for i in 0..n {
        let sq = (times[i + 1] - times[i]).sqrt();
        for k in 0..d_b {
            let g: f64 = normal.sample(rng);
            out[i * d_b + k] = sq * g;
        }
    }
    out
}

const EXP_OVERFLOW_LIMIT: f64 = 709.0;

struct SampleEngine {
    solver: RoughSdeSolver,
    d_x: usize,
    d_y: usize,
    seed: u64,
    /// For systems without auxiliary noise the path is a deterministic
    /// function of S₀; solutions per support point are computed once.
    cache: Option<HashMap<Vec<u64>, (Vec<f64>, f64)>>,
}

impl SampleEngine {
    fn new(model: &FilterModel, driver: &EnhancedPath, seed: u64) -> Result<Self> {
        let system = build_filter_system(model)?;
        let d_b = system.d_b;
        let solver = RoughSdeSolver::new(system, driver)?;
        let mut cache = None;
        if d_b == 0 {
            if let Some(points) = solver.system().s0_law.support_points() {
                let points: Vec<Vec<f64>> = points.to_vec();
                let mut map = HashMap::new();
                let mut ws = solver.make_workspace();
                for p in &points {
                    let path = solver.solve_with(&[], p, &mut ws)?;
                    let (x, y, i_val) = path.split_xyi(model.d_x, model.d_y, path.len() - 1);
                    let mut xy = x.to_vec();
                    xy.extend_from_slice(y);
                    let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
                    map.insert(key, (xy, i_val));
                }
                cache = Some(map);
            }
        }
        Ok(SampleEngine {
            solver,
            d_x: model.d_x,
            d_y: model.d_y,
            seed,
            cache,
        })
    }

    /// Terminal `(x, y)` and `I` for sample index `j`.
    fn terminal(&self, j: u64) -> Result<(Vec<f64>, f64)> {
        let mut rng = crate::rng::stream(self.seed, j);
        let s0 = self.solver.system().s0_law.sample(&mut rng);
        if let Some(cache) = &self.cache {
            let key: Vec<u64> = s0.iter().map(|v| v.to_bits()).collect();
            let (xy, i_val) = cache
                .get(&key)
                .expect("support point missing from cache");
            return Ok((xy.clone(), *i_val));
        }
        let d_b = self.solver.system().d_b;
        let brownian = brownian_increments(self.solver.times(), d_b, &mut rng);
        let mut ws = self.solver.make_workspace();
        let path = self.solver.solve_with(&brownian, &s0, &mut ws)?;
        let (x, y, i_val) = path.split_xyi(self.d_x, self.d_y, path.len() - 1);
        let mut xy = x.to_vec();
        xy.extend_from_slice(y);
        Ok((xy, i_val))
    }
}

/// Estimate `θ(driver) = g^f/g¹` over `n_samples` auxiliary-noise draws.
///
/// Reproducible for a fixed seed regardless of worker count.
pub fn evaluate_theta(
    model: &FilterModel,
    driver: &EnhancedPath,
    f: &TestFunction,
    n_samples: u64,
    seed: u64,
    opts: ThetaOptions,
) -> Result<ThetaEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidModel(format!(
            "n_samples = {n_samples}, need at least 2"
        )));
    }
    let refined = refine_driver(driver, opts.sim_steps)?;
    let engine = SampleEngine::new(model, &refined, seed)?;
    let grid = format!(
        "driver:{}pts;sim:{}steps;horizon:{}",
        driver.len(),
        engine.solver.n_steps(),
        format_f64(driver.horizon())
    );
    let pairs: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|j| -> Result<(f64, f64)> {
            let (xy, i_val) = engine.terminal(j)?;
            if i_val > EXP_OVERFLOW_LIMIT {
                return Err(Error::ExpOverflow(i_val));
            }
            let w = i_val.exp();
            let u = f.eval(&xy)? * w;
            Ok((u, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let us: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ws: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let stats = ratio_estimate(&us, &ws);
    if !(stats.g1_mean > 0.0) {
        return Err(Error::InvalidModel(format!(
            "g1 estimate {} is not positive; likelihood weights degenerated",
            stats.g1_mean
        )));
    }
    Ok(ThetaEstimate {
        gf_mean: stats.gf_mean,
        gf_stderr: stats.gf_stderr,
        g1_mean: stats.g1_mean,
        g1_stderr: stats.g1_stderr,
        theta: stats.theta,
        theta_stderr: stats.theta_stderr,
        n_samples,
        seed,
        grid,
    })
}

/// One row of a continuity probe: a perturbed driver's rough-path distance
/// from the base and the common-seed change in θ.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuityRow {
    pub distance: f64,
    pub theta: f64,
    pub delta_theta: f64,
    /// |Δθ| / distance; `None` for the zero perturbation
    pub ratio: Option<f64>,
    pub theta_stderr: f64,
}

/// Common-seed evaluation of θ across perturbed drivers, sorted by
/// rough-path distance.
pub fn continuity_probe(
    model: &FilterModel,
    driver: &EnhancedPath,
    f: &TestFunction,
    perturbations: &[EnhancedPath],
    n_samples: u64,
    seed: u64,
    opts: ThetaOptions,
) -> Result<(ThetaEstimate, Vec<ContinuityRow>)> {
    let base = evaluate_theta(model, driver, f, n_samples, seed, opts)?;
    let mut rows = Vec::with_capacity(perturbations.len());
    for p in perturbations {
        let distance = holder_distance(driver, p)?;
        let est = evaluate_theta(model, p, f, n_samples, seed, opts)?;
        let delta_theta = est.theta - base.theta;
        rows.push(ContinuityRow {
            distance,
            theta: est.theta,
            delta_theta,
            ratio: if distance > 0.0 {
                Some(delta_theta.abs() / distance)
            } else {
                None
            },
            theta_stderr: est.theta_stderr,
        });
    }
    rows.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
    Ok((base, rows))
}

/// Value-scaling perturbations `(1+δ)·values` of a driver, one per δ.
pub fn scale_perturbations(driver: &EnhancedPath, deltas: &[f64]) -> Vec<EnhancedPath> {
    deltas
        .iter()
        .map(|&d| driver.scale_values(1.0 + d))
        .collect()
}
