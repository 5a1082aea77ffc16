//! Built-in model catalog and inline model specifications.
//!
//! Four builtins span the regimes of interest:
//!
//! * `example_s1` — two observation channels driving the signal through
//!   `Z_k(x) = x`, no auxiliary noise; the conditional expectation has a
//!   closed form (see [`crate::reference::example_closed_form`]).
//! * `uncorrelated_1d` — `Z ≡ 0`, `h = h(x)`: the classical regime where the
//!   integration-by-parts weight applies.
//! * `correlated_linear` — scalar observation, linear/constant coefficients.
//! * `correlated_2obs` — two observations with noncommuting `Z` columns, the
//!   regime where supremum-norm robustness fails and the level-2 data
//!   genuinely matters.
//!
//! Inline models come as a small JSON spec with expression-valued
//! coefficients over `(x1.., y1..)`; boundedness of user expressions is
//! asserted, not checked.

use crate::error::{Error, Result};
use crate::estimator::TestFunction;
use crate::expr::Expr;
use crate::flow::CoeffFn;
use crate::rough_path::{lift_piecewise_linear, uniform_grid, EnhancedPath};
use crate::sde::{DriftSpec, FilterModel, InitialLaw};
use serde::{Deserialize, Serialize};

/// Default Hölder exponent; admissible for `ε = 0.6` since
/// `1/(2+ε) = 0.3846.. < 0.4 < 0.5`.
pub const DEFAULT_ALPHA: f64 = 0.4;
/// Default `ε` entering the admissible band `(1/(2+ε), 1/2)`.
pub const DEFAULT_EPSILON: f64 = 0.6;
/// Declared coefficient grade `4 + ε`.
pub const DEFAULT_GRADE: f64 = 4.0 + DEFAULT_EPSILON;

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

/// The two-observation example model: `dX = X d(Y¹+Y²) + X dt` (Itô),
/// `h^k(x) = tanh(x)`, no auxiliary noise, `X₀ ∈ {0, 1}` fair.
fn example_s1() -> FilterModel {
    FilterModel {
        d_x: 1,
        d_y: 2,
        d_b: 0,
        h: CoeffFn::matrix(3, 2, 1, |xy, out| {
            let t = xy[0].tanh();
            out[0] = t;
            out[1] = t;
        })
        .with_jacobian(|xy, out| {
            out.fill(0.0);
            let s = sech2(xy[0]);
            out[0] = s;
            out[3] = s;
        }),
        z: CoeffFn::matrix(3, 1, 2, |xy, out| {
            out[0] = xy[0];
            out[1] = xy[0];
        })
        .with_jacobian(|_xy, out| {
            out.fill(0.0);
            out[0] = 1.0;
            out[3] = 1.0;
        }),
        l: CoeffFn::zero(3, 1, 0),
        drift: DriftSpec::Ito(CoeffFn::vector(3, 1, |xy, out| out[0] = xy[0])),
        x0_law: InitialLaw::two_point(0.0, 1.0),
        grade: DEFAULT_GRADE,
    }
}

/// `Z ≡ 0`, `h = tanh(x)`: the classical uncorrelated regime.
fn uncorrelated_1d() -> FilterModel {
    FilterModel {
        d_x: 1,
        d_y: 1,
        d_b: 1,
        h: CoeffFn::matrix(2, 1, 1, |xy, out| out[0] = xy[0].tanh()).with_jacobian(|xy, out| {
            out[0] = sech2(xy[0]);
            out[1] = 0.0;
        }),
        z: CoeffFn::zero(2, 1, 1),
        l: CoeffFn::matrix(2, 1, 1, |_xy, out| out[0] = 0.5),
        drift: DriftSpec::Ito(CoeffFn::vector(2, 1, |xy, out| {
            out[0] = -0.3 * xy[0].tanh()
        })),
        x0_law: InitialLaw::two_point(-0.5, 0.7),
        grade: DEFAULT_GRADE,
    }
}

/// Scalar correlated model with linear/constant coefficients (bounded `h`).
fn correlated_linear() -> FilterModel {
    FilterModel {
        d_x: 1,
        d_y: 1,
        d_b: 1,
        h: CoeffFn::matrix(2, 1, 1, |xy, out| out[0] = (0.8 * xy[0]).tanh()).with_jacobian(
            |xy, out| {
                out[0] = 0.8 * sech2(0.8 * xy[0]);
                out[1] = 0.0;
            },
        ),
        z: CoeffFn::matrix(2, 1, 1, |xy, out| out[0] = 0.4 * xy[0]).with_jacobian(|_xy, out| {
            out[0] = 0.4;
            out[1] = 0.0;
        }),
        l: CoeffFn::matrix(2, 1, 1, |_xy, out| out[0] = 0.5),
        drift: DriftSpec::Ito(CoeffFn::vector(2, 1, |xy, out| out[0] = -0.3 * xy[0])),
        x0_law: InitialLaw::Point(vec![0.5]),
        grade: DEFAULT_GRADE,
    }
}

/// Two observations, noncommuting bounded `Z` columns, `h` mixing `x` and
/// `y₂` — classical robustness fails here, the level-2 lift is what carries
/// the missing information.
fn correlated_2obs() -> FilterModel {
    FilterModel {
        d_x: 1,
        d_y: 2,
        d_b: 1,
        h: CoeffFn::matrix(3, 2, 1, |xy, out| {
            out[0] = 0.8 * xy[0].tanh();
            out[1] = 0.6 * (xy[0] + 0.4 * xy[2]).tanh();
        })
        .with_jacobian(|xy, out| {
            out.fill(0.0);
            out[0] = 0.8 * sech2(xy[0]);
            let s = 0.6 * sech2(xy[0] + 0.4 * xy[2]);
            out[3] = s;
            out[5] = 0.4 * s;
        }),
        z: CoeffFn::matrix(3, 1, 2, |xy, out| {
            out[0] = 0.5 * xy[0].tanh() + 0.3;
            out[1] = 0.4 * xy[1].tanh() + 0.2;
        })
        .with_jacobian(|xy, out| {
            out.fill(0.0);
            out[0] = 0.5 * sech2(xy[0]);
            out[4] = 0.4 * sech2(xy[1]);
        }),
        l: CoeffFn::matrix(3, 1, 1, |_xy, out| out[0] = 0.5),
        drift: DriftSpec::Ito(CoeffFn::vector(3, 1, |xy, out| {
            out[0] = -0.4 * xy[0].tanh()
        })),
        x0_law: InitialLaw::two_point(-0.6, 0.8),
        grade: DEFAULT_GRADE,
    }
}

pub const CATALOG: &[&str] = &[
    "example_s1",
    "uncorrelated_1d",
    "correlated_linear",
    "correlated_2obs",
];

/// Look up a built-in model by name.
pub fn catalog_model(name: &str) -> Result<FilterModel> {
    match name {
        "example_s1" => Ok(example_s1()),
        "uncorrelated_1d" => Ok(uncorrelated_1d()),
        "correlated_linear" => Ok(correlated_linear()),
        "correlated_2obs" => Ok(correlated_2obs()),
        other => Err(Error::InvalidModel(format!(
            "unknown model {other:?}; catalog: {}",
            CATALOG.join(", ")
        ))),
    }
}

/// Initial-law spec for inline models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Spec {
    Point(Vec<f64>),
    TwoPoint(f64, f64),
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Discrete { points: Vec<Vec<f64>>, probs: Vec<f64> },
}

impl X0Spec {
    fn to_law(&self) -> InitialLaw {
        match self {
            X0Spec::Point(p) => InitialLaw::Point(p.clone()),
            X0Spec::TwoPoint(a, b) => InitialLaw::two_point(*a, *b),
            X0Spec::Uniform { lo, hi } => InitialLaw::UniformBox {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            X0Spec::Discrete { points, probs } => InitialLaw::Discrete {
                points: points.clone(),
                probs: probs.clone(),
            },
        }
    }
}

/// Inline coefficient spec: expressions over `(x1.., y1..)` per entry.
/// `z[j][k]` is the j-th component of column `Z_k`; `l[j][l]` likewise for
/// `L_l`; `l0_bar` is the Itô drift under the reference measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterModelSpec {
    pub d_x: usize,
    pub d_y: usize,
    pub d_b: usize,
    pub l0_bar: Vec<String>,
    pub z: Vec<Vec<String>>,
    pub l: Vec<Vec<String>>,
    pub h: Vec<String>,
    pub x0: X0Spec,
    #[serde(default)]
    pub grade: Option<f64>,
}

fn expr_matrix(
    entries: &[Vec<String>],
    rows: usize,
    cols: usize,
    d_x: usize,
    d_y: usize,
    what: &str,
) -> Result<CoeffFn> {
    if entries.len() != rows || entries.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidModel(format!(
            "{what} must be {rows}x{cols} expressions"
        )));
    }
    let mut compiled = Vec::with_capacity(rows * cols);
    for row in entries {
        for src in row {
            compiled.push(Expr::parse(src, d_x, d_y)?);
        }
    }
    let m = d_x + d_y;
    Ok(CoeffFn::matrix(m, rows, cols, move |xy, out| {
        for (o, e) in out.iter_mut().zip(&compiled) {
            *o = e.eval(xy);
        }
    }))
}

impl FilterModelSpec {
    pub fn parse_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::Parse(format!("bad model spec JSON: {e}")))
    }

    pub fn to_model(&self) -> Result<FilterModel> {
        let (d_x, d_y, d_b) = (self.d_x, self.d_y, self.d_b);
        if d_x == 0 || d_y == 0 {
            return Err(Error::InvalidModel("d_x and d_y must be positive".into()));
        }
        let h_entries: Vec<Vec<String>> = self.h.iter().map(|e| vec![e.clone()]).collect();
        let l0_entries: Vec<Vec<String>> = self.l0_bar.iter().map(|e| vec![e.clone()]).collect();
        let model = FilterModel {
            d_x,
            d_y,
            d_b,
            h: expr_matrix(&h_entries, d_y, 1, d_x, d_y, "h")?,
            z: expr_matrix(&self.z, d_x, d_y, d_x, d_y, "z")?,
            l: if d_b == 0 {
                CoeffFn::zero(d_x + d_y, d_x, 0)
            } else {
                expr_matrix(&self.l, d_x, d_b, d_x, d_y, "l")?
            },
            drift: DriftSpec::Ito(expr_matrix(&l0_entries, d_x, 1, d_x, d_y, "l0_bar")?),
            x0_law: self.x0.to_law(),
            grade: self.grade.unwrap_or(DEFAULT_GRADE),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Resolve a `--model` argument: catalog name or inline JSON (`{...}`).
pub fn resolve_model(arg: &str) -> Result<FilterModel> {
    if arg.trim_start().starts_with('{') {
        FilterModelSpec::parse_json(arg)?.to_model()
    } else {
        catalog_model(arg)
    }
}

/// Resolve an `--f` argument: `one`, `tanh_x1`, or an expression over
/// `(x.., y..)` with a declared bound.
pub fn resolve_test_function(arg: &str, d_x: usize, d_y: usize, bound: f64) -> Result<TestFunction> {
    match arg {
        "one" => Ok(TestFunction::one()),
        "tanh_x1" => Ok(TestFunction::tanh_x1()),
        src => {
            let expr = Expr::parse(src, d_x, d_y)?;
            let name = format!("expr:{src}");
            Ok(TestFunction::new(
                name,
                move |xy| expr.eval(xy),
                bound,
                f64::NAN,
            ))
        }
    }
}

/// Smooth spiral sample path in `R²` starting at the origin:
/// `y(t) = 0.5·t·(cos 2πt, sin 2πt)`.
pub fn spiral_samples(n_steps: usize, horizon: f64) -> (Vec<f64>, Vec<f64>) {
    let times = uniform_grid(n_steps, horizon);
    let mut values = Vec::with_capacity((n_steps + 1) * 2);
    for &t in &times {
        let phase = 2.0 * std::f64::consts::PI * t;
        values.push(0.5 * t * phase.cos());
        values.push(0.5 * t * phase.sin());
    }
    (times, values)
}

/// The spiral lifted at `n_steps` resolution.
pub fn spiral_driver(n_steps: usize, horizon: f64, alpha: f64) -> EnhancedPath {
    let (times, values) = spiral_samples(n_steps, horizon);
    lift_piecewise_linear(&times, 2, &values, alpha).expect("spiral samples are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_models_validate() {
        for name in CATALOG {
            let m = catalog_model(name).unwrap();
            m.validate().unwrap();
        }
        assert!(catalog_model("nope").is_err());
    }

    #[test]
    fn catalog_jacobians_match_finite_differences() {
        // analytic z/h jacobians against the FD fallback
        for name in CATALOG {
            let m = catalog_model(name).unwrap();
            let xy: Vec<f64> = (0..m.xy_dim()).map(|i| 0.3 + 0.2 * i as f64).collect();
            for (coeff, what) in [(&m.z, "z"), (&m.h, "h")] {
                let n = coeff.out_len() * coeff.in_dim();
                let mut analytic = vec![0.0; n];
                let mut scratch = Vec::new();
                coeff.jacobian_into(&xy, &mut analytic, &mut scratch);
                let stripped = CoeffFn::matrix(coeff.in_dim(), coeff.rows(), coeff.cols(), {
                    let c = coeff.clone();
                    move |x, out| c.eval_into(x, out)
                });
                let mut fd = vec![0.0; n];
                stripped.jacobian_into(&xy, &mut fd, &mut scratch);
                for i in 0..n {
                    assert!(
                        (analytic[i] - fd[i]).abs() < 1e-7,
                        "{name}/{what}[{i}]: {} vs {}",
                        analytic[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn inline_spec_roundtrip() {
        let json = r#"{
            "d_x": 1, "d_y": 2, "d_b": 1,
            "l0_bar": ["-0.5*tanh(x1)"],
            "z": [["0.4*tanh(x1)", "0.3*tanh(y1)"]],
            "l": [["0.5"]],
            "h": ["tanh(x1)", "0.5*tanh(x1+y2)"],
            "x0": {"two_point": [-0.5, 0.5]}
        }"#;
        let model = resolve_model(json).unwrap();
        assert_eq!(model.d_x, 1);
        assert_eq!(model.d_y, 2);
        let mut h = vec![0.0; 2];
        model.h.eval_into(&[0.3, 0.1, 0.2], &mut h);
        assert!((h[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!((h[1] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn test_function_resolution() {
        let f = resolve_test_function("one", 1, 2, 1.0).unwrap();
        assert_eq!(f.eval(&[9.0, 0.0, 0.0]).unwrap(), 1.0);
        let f = resolve_test_function("tanh_x1", 1, 2, 1.0).unwrap();
        assert!((f.eval(&[0.5, 0.0, 0.0]).unwrap() - 0.5f64.tanh()).abs() < 1e-15);
        let f = resolve_test_function("0.5*tanh(x1)+0.1", 1, 2, 0.7).unwrap();
        assert!((f.eval(&[1.0, 0.0, 0.0]).unwrap() - (0.5 * 1.0f64.tanh() + 0.1)).abs() < 1e-15);
        assert!(resolve_test_function("bogus(", 1, 1, 1.0).is_err());
    }

    #[test]
    fn spiral_starts_at_origin() {
        let p = spiral_driver(64, 1.0, DEFAULT_ALPHA);
        assert_eq!(p.value(0), &[0.0, 0.0]);
        assert_eq!(p.dim(), 2);
        // genuinely curved: nonzero terminal area
        assert!(p.area(64)[1].abs() > 1e-3);
    }
}
