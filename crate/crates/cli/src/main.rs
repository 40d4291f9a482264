use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pflow::biot_savart::{sample_blobs, VorticityBlob};
use pflow::corrector::{estimate_constants, CellSolver};
use pflow::cutoff::verify_cutoff_norms;
use pflow::euler::{yudovich_report, EulerSolver};
use pflow::fields::{Boundary, Grid};
use pflow::geometry::{lattice_centers, DRule, LatticeConfig, ObstacleShape};
use pflow::initial_data::{measure_initial_rate, InitialRateOptions};
use pflow::ns::{taylor_green, NsSolver, SimParams};
use pflow::study::{run_study, GridSpec, StudyConfig, StudyRecord, StudySetup, CSV_HEADER, csv_row};

#[derive(Parser)]
#[command(name = "pflow", version, about = "Flows past perforated lattices: cutoffs, correctors, Euler and penalized Navier-Stokes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Disk,
    Square,
}

impl Shape {
    fn obstacle(self, corner: f64) -> ObstacleShape<f64> {
        match self {
            Shape::Disk => ObstacleShape::Disk,
            Shape::Square => ObstacleShape::SmoothedSquare { corner_radius: corner },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cutoff defect norms against their scaling over an eps sweep (d = eps).
    CutoffNorms {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.025")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Empirical constants of the reference cell (C_tilde_p, K1, K2).
    Constants {
        #[arg(long, value_enum, default_value = "disk")]
        shape: Shape,
        #[arg(long, default_value_t = 0.5)]
        corner: f64,
        #[arg(long, default_value_t = 4.0)]
        p: f64,
        #[arg(long, default_value_t = 50)]
        ensemble: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// ||v^eps - u_0|| over an eps sweep with d = eps.
    InitialRate {
        #[arg(long, value_delimiter = ',', default_value = "0.08,0.04,0.02")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        /// JSON list of vorticity blobs; a single bump by default.
        #[arg(long)]
        omega0: Option<PathBuf>,
    },
    /// Free-space Euler run with vorticity norms and the gradient envelope.
    Euler {
        #[arg(long)]
        config: PathBuf,
    },
    /// Taylor-Green check of the penalized Navier-Stokes solver.
    Ns {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        nu: f64,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
    },
    /// Vanishing-viscosity rate study.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Directory for results.csv, summary.md and records.json.
        #[arg(long, default_value = "study_out")]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct EulerConfig {
    omega0: Vec<VorticityBlob<f64>>,
    grid: GridSpec<f64>,
    #[serde(rename = "T")]
    t_final: f64,
    #[serde(default = "ten")]
    snapshots: usize,
}

fn ten() -> usize {
    10
}

#[derive(Serialize)]
struct EulerRow {
    time: f64,
    vorticity_norms: [f64; 3],
    grad_sup: f64,
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::CutoffNorms { eps, mu, p } => {
            println!("eps,d,mu,p,lhs,bound_shape,ratio");
            for e in eps {
                let geo = lattice_centers(LatticeConfig::new(e, e, mu, ObstacleShape::Disk))?;
                let g = Grid::covering([-0.1, -0.1], [1.1, 1.1], e / 16.0, Boundary::Open)?;
                let r = verify_cutoff_norms(&geo, &g, p)?;
                println!("{e},{e},{mu},{p},{:e},{:e},{:.4}", r.lhs, r.bound_shape, r.ratio);
            }
        }
        Command::Constants { shape, corner, p, ensemble, seed } => {
            let solver = CellSolver::new(shape.obstacle(corner))?;
            print_json(&estimate_constants(&solver, p, ensemble, seed)?)?;
        }
        Command::InitialRate { eps, mu, omega0 } => {
            let blobs: Vec<VorticityBlob<f64>> = match omega0 {
                Some(path) => serde_json::from_str(&fs::read_to_string(&path).with_context(|| path.display().to_string())?)?,
                None => vec![VorticityBlob::bump([0.5, 1.3], 0.15, 1.0)],
            };
            let recs = measure_initial_rate(&blobs, ObstacleShape::Disk, mu, &eps, DRule::Equal, InitialRateOptions::default())?;
            print_json(&recs)?;
        }
        Command::Euler { config } => {
            let c: EulerConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            let b = c.grid.bbox;
            let g = Grid::new(b.lo, b.length / c.grid.n as f64, c.grid.n, c.grid.n, Boundary::Open)?;
            let solver = EulerSolver::new(g)?;
            let state = solver.initial_state(sample_blobs(&c.omega0, &g))?;
            let mut rows = Vec::new();
            solver.run(state, c.t_final, 0.9, c.t_final / c.snapshots as f64, |s| {
                rows.push(EulerRow { time: s.time, vorticity_norms: s.vorticity_norms()?, grad_sup: s.grad_sup() });
                Ok(())
            })?;
            let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.time, r.grad_sup)).collect();
            print_json(&serde_json::json!({ "snapshots": rows, "yudovich": yudovich_report(&series) }))?;
        }
        Command::Ns { n, nu, t } => {
            let g = Grid::periodic([0.0, 0.0], 2.0 * std::f64::consts::PI, n)?;
            let solver = NsSolver::new(SimParams::for_grid(g, nu, t), None)?;
            let u0 = taylor_green(g, 1.0);
            let a0 = u0.max_abs();
            let (end, ledger) = solver.run(solver.initial_state(u0)?, |_| Ok(()))?;
            let rate = -(end.u.max_abs() / a0).ln() / end.time;
            print_json(&serde_json::json!({
                "time": end.time,
                "decay_rate": rate,
                "exact_rate": 2.0 * nu,
                "ledger_violations": ledger.violations,
                "max_excess": ledger.max_excess,
                "energy_nonincreasing": ledger.energy_nonincreasing(),
            }))?;
        }
        Command::Study { config, out } => {
            let cfg = StudyConfig::<f64>::from_json(&fs::read_to_string(&config).with_context(|| config.display().to_string())?)?;
            fs::create_dir_all(&out)?;
            let setup = StudySetup::from_config(&cfg)?;
            // completion-order progress log; the final CSV carries the fitted B_T
            let mut log = fs::File::create(out.join("progress.csv"))?;
            writeln!(log, "{CSV_HEADER}")?;
            let outcome = run_study(&cfg, &setup, |r: &StudyRecord<f64>| {
                let _ = writeln!(log, "{}", csv_row(r, None));
                eprintln!("nu = {:e}, eps = {:.4}: sup error {:.4e} ({:.0} s)", r.nu, r.epsilon, r.sup_error, r.wall_seconds);
            })?;
            fs::write(out.join("results.csv"), outcome.csv())?;
            fs::write(out.join("summary.md"), outcome.markdown())?;
            fs::write(out.join("records.json"), serde_json::to_string_pretty(&outcome)?)?;
            print!("{}", outcome.markdown());
            if outcome.fit.is_none() {
                bail!("rate fit failed: {}", outcome.fit_error.unwrap_or_default());
            }
        }
    }
    Ok(())
}
