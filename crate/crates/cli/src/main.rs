//! `rfilter` — experiments on pathwise-robust nonlinear filtering.
//!
//! Subcommands: `lift`, `theta`, `compare`, `continuity`, `convergence`,
//! `simulate`. Results are deterministic given the config and seed; every
//! output echoes its config, and wall-clock metadata lives in a separate
//! field so payloads stay byte-comparable.

use clap::{Args, Parser, Subcommand};
use rfilter_core::io::{
    format_f64, path_to_csv_string, read_path_csv, read_record_csv, write_record_csv,
};
use rfilter_core::models::{resolve_model, resolve_test_function, DEFAULT_ALPHA, DEFAULT_EPSILON};
use rfilter_core::reference::particle_filter_estimate;
use rfilter_core::rough_path::sample_brownian_lift;
use rfilter_core::{
    continuity_probe, evaluate_theta, example_closed_form, Error, ThetaOptions,
};
use serde_json::{json, Value};
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "rfilter", version, about = "Robust filtering on rough observation lifts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Catalog model name or inline JSON spec
    #[arg(long, default_value = "correlated_2obs")]
    model: String,
    /// Input path/record CSV
    #[arg(long)]
    path: Option<PathBuf>,
    /// Hölder exponent of the lift
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Band parameter ε: alpha must lie in (1/(2+ε), 1/2)
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Simulation grid (steps)
    #[arg(long, default_value_t = 512)]
    grid: usize,
    /// Monte Carlo samples
    #[arg(long, default_value_t = 10_000)]
    samples: u64,
    /// RNG seed (falls back to RFILTER_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Test function: one | tanh_x1 | expression over (x1.., y1..)
    #[arg(long, default_value = "tanh_x1")]
    f: String,
    /// Declared bound for expression test functions
    #[arg(long, default_value_t = 1.0)]
    f_bound: f64,
    /// Output file (payload also goes to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lift a sampled path CSV to a level-2 rough path CSV
    Lift {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo estimate of θ = g^f/g¹ on a driver
    Theta {
        #[command(flatten)]
        common: Common,
    },
    /// θ vs particle filter (and closed form where available) on a record
    Compare {
        #[command(flatten)]
        common: Common,
        /// Particle count for the reference filter
        #[arg(long, default_value_t = 2000)]
        particles: u64,
    },
    /// Common-seed θ across value-scaled driver perturbations
    Continuity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated perturbation scales
        #[arg(long, default_value = "1e-1,1e-2,1e-3")]
        scales: String,
    },
    /// θ across dyadic simulation meshes up to --grid
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Smallest dyadic mesh exponent
        #[arg(long, default_value_t = 6)]
        mesh_min: u32,
    },
    /// Simulate an (X, Y) observation record under the physical measure
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Time horizon
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.or_else(|| {
        std::env::var("RFILTER_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn validate_alpha(alpha: f64, epsilon: f64) -> Result<(), Error> {
    let lo = 1.0 / (2.0 + epsilon);
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidModel(format!(
            "epsilon = {epsilon} outside (0, 1)"
        )));
    }
    if !(alpha > lo && alpha < 0.5) {
        return Err(Error::InvalidModel(format!(
            "alpha = {alpha} outside the admissible band ({lo:.4}, 0.5) for epsilon = {epsilon}"
        )));
    }
    Ok(())
}

fn config_echo(cmd: &str, common: &Common, seed: u64, extra: Value) -> Value {
    let mut cfg = json!({
        "command": cmd,
        "model": common.model,
        "path": common.path.as_ref().map(|p| p.display().to_string()),
        "alpha": format_f64(common.alpha),
        "epsilon": format_f64(common.epsilon),
        "grid": common.grid,
        "samples": common.samples,
        "seed": seed,
        "f": common.f,
        "f_bound": format_f64(common.f_bound),
    });
    if let Value::Object(extras) = extra {
        cfg.as_object_mut().unwrap().extend(extras);
    }
    cfg
}

fn emit(common: &Common, payload: &str) -> Result<(), Error> {
    println!("{payload}");
    if let Some(out) = &common.out {
        fs::write(out, format!("{payload}\n"))?;
    }
    Ok(())
}

fn emit_json(common: &Common, config: Value, result: Value) -> Result<(), Error> {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    // deterministic payload first, metadata appended as a separate field
    let body = json!({ "config": config, "result": result, "metadata": { "timestamp_unix_ms": ts } });
    emit(common, &serde_json::to_string(&body).expect("serializable"))
}

fn load_driver(common: &Common) -> Result<rfilter_core::EnhancedPath, Error> {
    match &common.path {
        Some(p) => {
            let file = fs::File::open(p)?;
            read_path_csv(BufReader::new(file), common.alpha)
        }
        // no file: a seeded Brownian driver at the requested grid
        None => Ok(sample_brownian_lift(
            driver_dim(common)?,
            common.grid.max(8),
            1.0,
            resolve_seed(common.seed).wrapping_add(0x9E37),
            common.alpha,
        )),
    }
}

fn driver_dim(common: &Common) -> Result<usize, Error> {
    Ok(resolve_model(&common.model)?.d_y)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Lift { common } => {
            let path = common
                .path
                .as_ref()
                .ok_or_else(|| Error::InvalidModel("lift needs --path".into()))?;
            validate_alpha(common.alpha, common.epsilon)?;
            let file = fs::File::open(path)?;
            let lifted = read_path_csv(BufReader::new(file), common.alpha)?;
            let csv = path_to_csv_string(&lifted);
            print!("{csv}");
            if let Some(out) = &common.out {
                fs::write(out, &csv)?;
            }
            Ok(())
        }
        Cmd::Theta { common } => {
            validate_alpha(common.alpha, common.epsilon)?;
            let seed = resolve_seed(common.seed);
            let model = resolve_model(&common.model)?;
            let f = resolve_test_function(&common.f, model.d_x, model.d_y, common.f_bound)?;
            let driver = load_driver(&common)?;
            let est = evaluate_theta(
                &model,
                &driver,
                &f,
                common.samples,
                seed,
                ThetaOptions {
                    sim_steps: common.grid,
                },
            )?;
            let cfg = config_echo("theta", &common, seed, json!({}));
            emit_json(&common, cfg, est.to_json_value())
        }
        Cmd::Compare { common, particles } => {
            validate_alpha(common.alpha, common.epsilon)?;
            let seed = resolve_seed(common.seed);
            let model = resolve_model(&common.model)?;
            let f = resolve_test_function(&common.f, model.d_x, model.d_y, common.f_bound)?;
            let record = match &common.path {
                Some(p) => {
                    let file = fs::File::open(p)?;
                    read_record_csv(BufReader::new(file))?
                }
                None => rfilter_core::simulate_observations(
                    &model,
                    1 << 14,
                    1.0,
                    seed.wrapping_add(0x5151),
                )?,
            };
            if record.d_y != model.d_y || record.d_x != model.d_x {
                return Err(Error::DimensionMismatch(
                    "record dimensions do not match the model".into(),
                ));
            }
            // particle filter consumes the (subsampled) fine record directly
            let pf_record = record.subsample(record.times.len().saturating_sub(1) / 4096);
            let pf = particle_filter_estimate(
                &model,
                &pf_record.times,
                &pf_record.y,
                &f,
                particles,
                seed.wrapping_add(1),
            )?;
            // θ consumes the lifted record restricted to the simulation grid
            let driver = record.to_driver(common.grid, common.alpha)?;
            let est = evaluate_theta(
                &model,
                &driver,
                &f,
                common.samples,
                seed,
                ThetaOptions { sim_steps: 0 },
            )?;
            let combined = (pf.stderr.powi(2) + est.theta_stderr.powi(2)).sqrt();
            let z_theta_pf = (est.theta - pf.value) / combined.max(1e-300);
            let mut result = json!({
                "theta": est.to_json_value(),
                "pf": {
                    "value": format_f64(pf.value),
                    "stderr": format_f64(pf.stderr),
                    "ess": format_f64(pf.ess),
                    "n_particles": pf.n_particles,
                    "low_ess": pf.low_ess,
                },
                "z_scores": { "theta_vs_pf": format_f64(z_theta_pf) },
            });
            if common.model == "example_s1" {
                let cf = example_closed_form(
                    |x| x.tanh(),
                    |x| [x.tanh(), x.tanh()],
                    &record.times,
                    &record.y,
                )?;
                let z_cf = (est.theta - cf) / est.theta_stderr.max(1e-300);
                let obj = result.as_object_mut().unwrap();
                obj.insert("closed_form".into(), Value::String(format_f64(cf)));
                obj["z_scores"]
                    .as_object_mut()
                    .unwrap()
                    .insert("theta_vs_closed_form".into(), Value::String(format_f64(z_cf)));
            }
            let cfg = config_echo("compare", &common, seed, json!({"particles": particles}));
            emit_json(&common, cfg, result)
        }
        Cmd::Continuity { common, scales } => {
            validate_alpha(common.alpha, common.epsilon)?;
            let seed = resolve_seed(common.seed);
            let model = resolve_model(&common.model)?;
            let f = resolve_test_function(&common.f, model.d_x, model.d_y, common.f_bound)?;
            let driver = load_driver(&common)?;
            let deltas: Vec<f64> = scales
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad scale {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let perturbations = rfilter_core::estimator::scale_perturbations(&driver, &deltas);
            let (base, rows) = continuity_probe(
                &model,
                &driver,
                &f,
                &perturbations,
                common.samples,
                seed,
                ThetaOptions {
                    sim_steps: common.grid,
                },
            )?;
            let cfg = config_echo("continuity", &common, seed, json!({"scales": scales}));
            let mut csv = String::new();
            csv.push_str(&format!(
                "# config {}\n",
                serde_json::to_string(&cfg).expect("serializable")
            ));
            csv.push_str(&format!("# theta_base {}\n", format_f64(base.theta)));
            csv.push_str("distance,theta,delta_theta,abs_ratio,theta_stderr\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    format_f64(r.distance),
                    format_f64(r.theta),
                    format_f64(r.delta_theta),
                    r.ratio.map(format_f64).unwrap_or_default(),
                    format_f64(r.theta_stderr),
                ));
            }
            emit(&common, csv.trim_end())
        }
        Cmd::Convergence { common, mesh_min } => {
            validate_alpha(common.alpha, common.epsilon)?;
            let seed = resolve_seed(common.seed);
            let model = resolve_model(&common.model)?;
            let f = resolve_test_function(&common.f, model.d_x, model.d_y, common.f_bound)?;
            let driver = load_driver(&common)?;
            let max_exp = (common.grid as f64).log2().floor() as u32;
            if max_exp < mesh_min {
                return Err(Error::InvalidModel(format!(
                    "--grid {} is below the smallest mesh 2^{mesh_min}",
                    common.grid
                )));
            }
            let cfg = config_echo("convergence", &common, seed, json!({"mesh_min": mesh_min}));
            let mut csv = String::new();
            csv.push_str(&format!(
                "# config {}\n",
                serde_json::to_string(&cfg).expect("serializable")
            ));
            csv.push_str("mesh,theta,theta_stderr\n");
            for e in mesh_min..=max_exp {
                let mesh = 1usize << e;
                let est = evaluate_theta(
                    &model,
                    &driver,
                    &f,
                    common.samples,
                    seed,
                    ThetaOptions { sim_steps: mesh },
                )?;
                csv.push_str(&format!(
                    "{mesh},{},{}\n",
                    format_f64(est.theta),
                    format_f64(est.theta_stderr),
                ));
            }
            emit(&common, csv.trim_end())
        }
        Cmd::Simulate { common, horizon } => {
            validate_alpha(common.alpha, common.epsilon)?;
            let seed = resolve_seed(common.seed);
            let model = resolve_model(&common.model)?;
            let record = rfilter_core::simulate_observations(&model, common.grid, horizon, seed)?;
            let mut buf = Vec::new();
            write_record_csv(&record, &mut buf)?;
            let csv = String::from_utf8(buf).expect("CSV is ASCII");
            print!("{csv}");
            if let Some(out) = &common.out {
                fs::write(out, &csv)?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let workers = match &cli.command {
        Cmd::Lift { common }
        | Cmd::Theta { common }
        | Cmd::Compare { common, .. }
        | Cmd::Continuity { common, .. }
        | Cmd::Convergence { common, .. }
        | Cmd::Simulate { common, .. } => common.workers,
    };
    if let Some(w) = workers {
        // results are worker-count independent; this only bounds concurrency
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global();
    }
    if let Err(e) = run(cli) {
        let msg = serde_json::json!({ "error": e.to_string() });
        eprintln!("{msg}");
        std::process::exit(1);
    }
}
