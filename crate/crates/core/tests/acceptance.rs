//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! PASS/FAIL line straight to stderr so it survives output capture.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pflow::biot_savart::{biot_savart_direct, biot_savart_fft, sample_blobs, VorticityBlob};
use pflow::corrector::{
    assemble_h_epsilon, corrector_norms, euler_corrector, random_rhs_ensemble, CellProblem, CellSolver, ScaledSobolevNorm,
};
use pflow::cutoff::{lattice_cutoff_with_grad, verify_cutoff_norms, CutoffProfile};
use pflow::euler::EulerSolver;
use pflow::fields::{Boundary, Grid, ScalarField, VectorField};
use pflow::geometry::{check_disjoint, lattice_centers, rasterize, DRule, Geometry, LatticeConfig, ObstacleShape, Region};
use pflow::initial_data::{measure_initial_rate, w_decomposition, InitialRateOptions};
use pflow::ns::{taylor_green, NsSolver, SimParams};
use pflow::study::{coupling_sup, ledger_report, rate_fit, run_point, run_study, CompatibilityRule, PointSpec, StudyConfig, StudySetup};

fn report(id: u32, name: &str, pass: bool, secs: f64, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[criterion {id}] {verdict} {name} ({secs:.1} s): {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().copied().fold(f64::MIN, f64::max);
    let lo = v.iter().copied().fold(f64::MAX, f64::min);
    hi / lo
}

#[test]
fn criterion_1_biot_savart_oracle() {
    let t = Instant::now();
    let g = Grid::new([-1.0, -1.0], 2.0 / 96.0, 96, 96, Boundary::Open).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blobs: Vec<_> = (0..5)
        .map(|_| {
            let c = [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)];
            VorticityBlob::bump(c, rng.gen_range(0.1..0.25), rng.gen_range(-2.0..2.0))
        })
        .collect();
    let omega = sample_blobs(&blobs, &g);
    let fast = biot_savart_fft(&omega).unwrap();
    let pts: Vec<[f64; 2]> = (0..g.len()).map(|k| g.point(k % g.nx, k / g.nx)).collect();
    let slow = biot_savart_direct(&omega, &pts);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, s) in slow.iter().enumerate() {
        num += (fast.x[k] - s[0]).powi(2) + (fast.y[k] - s[1]).powi(2);
        den += s[0] * s[0] + s[1] * s[1];
    }
    let rel = (num / den).sqrt();
    let secs = t.elapsed().as_secs_f64();
    let pass = rel <= 1e-4 && secs < 10.0;
    report(1, "FFT vs direct Biot-Savart at 96^2", pass, secs, format!("relative L2 difference {rel:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_2_geometry_invariants() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..200 {
        let eps = rng.gen_range(0.02..0.2);
        let d = rng.gen_range(eps..0.5);
        let mu = rng.gen_range(0.0..=1.0);
        let shape = if rng.gen_bool(0.5) {
            ObstacleShape::Disk
        } else {
            ObstacleShape::SmoothedSquare { corner_radius: rng.gen_range(0.1..=1.0) }
        };
        let g = lattice_centers(LatticeConfig::new(eps, d, mu, shape)).unwrap();
        if !(check_disjoint(&g) && g.count_bound_holds()) {
            failures += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures == 0 && secs < 1.0;
    report(2, "lattice disjointness and count bound", pass, secs, format!("{failures} of 200 configs failed"));
    assert!(pass);
}

#[test]
fn criterion_3_cutoff_scaling() {
    let t = Instant::now();
    let mut ratios = Vec::new();
    for mu in [0.0, 1.0] {
        for eps in [0.1, 0.05, 0.025] {
            let g = lattice_centers(LatticeConfig::new(eps, eps, mu, ObstacleShape::Disk)).unwrap();
            let grid = Grid::covering([-0.1, -0.1], [1.1, 1.1], eps / 16.0, Boundary::Open).unwrap();
            for p in [2.0, 4.0] {
                ratios.push(verify_cutoff_norms(&g, &grid, p).unwrap().ratio);
            }
        }
    }
    let s = spread(&ratios);
    let secs = t.elapsed().as_secs_f64();
    let pass = s < 3.0 && secs < 30.0;
    report(3, "cutoff norms against eps^(2/p)/d^((1+mu)/p)", pass, secs, format!("ratio spread {s:.3} over 12 points"));
    assert!(pass);
}

#[test]
fn criterion_4_cell_divergence_solver() {
    let t = Instant::now();
    let solver = CellSolver::new(ObstacleShape::Disk).unwrap();
    let rhs = random_rhs_ensemble(&solver, 50, 4);
    let (mut worst_residual, mut boundary, mut ratios, mut cells) = (0.0f64, 0.0f64, Vec::new(), Vec::new());
    for f in rhs {
        let sol = solver.solve(&CellProblem::new(f.clone())).unwrap();
        worst_residual = worst_residual.max(sol.residual);
        boundary = boundary.max(sol.outer_boundary_max());
        for k in 0..64 {
            let th = std::f64::consts::TAU * k as f64 / 64.0;
            // points of the unit circle, rounded onto the closed disk
            let mut xi = [th.cos(), th.sin()];
            while !ObstacleShape::Disk.contains(xi) {
                xi = [xi[0] * (1.0 - f64::EPSILON), xi[1] * (1.0 - f64::EPSILON)];
            }
            let v = sol.eval(xi);
            boundary = boundary.max(v[0].abs()).max(v[1].abs());
        }
        ratios.push(sol.w1p_norm(4.0) / solver.rhs_norm(&f, 4.0));
        if cells.len() < 4 {
            cells.push(sol);
        }
    }
    let mut identity = 0.0f64;
    for p in [2.0, 4.0] {
        for e in [0.1, 0.01] {
            let n = ScaledSobolevNorm { epsilon: e, p };
            let (a, b) = (n.from_reference(&cells), n.physical(&cells));
            identity = identity.max((a - b).abs() / a);
        }
    }
    let s = spread(&ratios);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_residual <= 1e-8 && boundary == 0.0 && s < 2.0 && identity <= 1e-12 && secs < 120.0;
    report(
        4,
        "cell divergence problem on 50 random rhs",
        pass,
        secs,
        format!("max residual {worst_residual:.1e}, boundary max {boundary:e}, C4 spread {s:.3}, scaled-norm identity {identity:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_corrector_bounds() {
    let t = Instant::now();
    let coarse = Grid::new([-1.0, -1.0], 3.0 / 256.0, 256, 256, Boundary::Open).unwrap();
    let euler = EulerSolver::new(coarse).unwrap();
    let st = euler.initial_state(sample_blobs(&[VorticityBlob::bump([0.5, 0.5], 0.3, 1.0)], &coarse)).unwrap();
    let st = euler.step(&st, 0.05).unwrap();
    let dt = 0.01;
    let later = euler.step(&st, dt).unwrap();
    let solver = CellSolver::new(ObstacleShape::Disk).unwrap();
    let mut rows: Vec<[f64; 4]> = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let geo = lattice_centers(LatticeConfig::new(eps, eps, 1.0, ObstacleShape::Disk)).unwrap();
        let grid = Grid::covering([-0.1, -0.1], [1.1, 1.1], eps / 8.0, Boundary::Open).unwrap();
        let fine = |u: &VectorField<f64>| VectorField::from_fn(grid, |x| u.sample(x));
        let (u0, u1) = (fine(&st.u), fine(&later.u));
        let cut = lattice_cutoff_with_grad(&geo, &grid, &CutoffProfile::Smoothstep).unwrap();
        let prev = assemble_h_epsilon(&solver, &geo, &u0).unwrap();
        let c = euler_corrector(&solver, &geo, &u1, &cut.phi).unwrap();
        let n = corrector_norms(&geo, &u1, &c, Some((&prev, dt))).unwrap();
        rows.push([
            n.h_l4 / n.small_shape,
            n.dt_h_l2.unwrap() / n.small_shape,
            n.grad_h_l2 / n.gradient_shape,
            n.defect_l4 / n.small_shape,
        ]);
    }
    let spreads: Vec<f64> = (0..4).map(|q| spread(&rows.iter().map(|r| r[q]).collect::<Vec<_>>())).collect();
    let secs = t.elapsed().as_secs_f64();
    let pass = spreads.iter().all(|&s| s < 3.0) && rows.iter().flatten().all(|v| v.is_finite()) && secs < 300.0;
    report(
        5,
        "corrector norms over eps in {0.1, 0.05, 0.025}",
        pass,
        secs,
        format!(
            "ratio spreads: |h|_4 {:.2}, |dt h|_2 {:.2}, |grad h|_2 {:.2}, |u^E - u^eps|_4 {:.2}",
            spreads[0], spreads[1], spreads[2], spreads[3]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_initial_data_rate() {
    let t = Instant::now();
    let blobs = [VorticityBlob::bump([0.5, 0.55], 0.2, 1.0)];
    let recs = measure_initial_rate(&blobs, ObstacleShape::Disk, 0.0, &[0.08, 0.04, 0.02], DRule::Equal, InitialRateOptions::default())
        .unwrap();
    let ratios: Vec<f64> = recs.iter().map(|r| r.ratio).collect();
    let c = ratios.iter().copied().fold(0.0, f64::max);
    let bounded = recs.iter().all(|r| r.l2_error <= c * r.bound_shape);
    let monotone = recs.windows(2).all(|w| w[1].l2_error < w[0].l2_error);
    let geo = lattice_centers(LatticeConfig::new(0.08, 0.08, 0.0, ObstacleShape::Disk)).unwrap();
    let grid = Grid::covering([-0.6, -0.6], [1.6, 1.6], 0.01, Boundary::Open).unwrap();
    let d = w_decomposition(&geo, &blobs, &grid).unwrap();
    let exact_zero = d.w1.max_abs() == 0.0 && d.w3.max_abs() == 0.0;
    let residual = d.residual / (d.norms[1] + d.norms[3]);
    let s = spread(&ratios);
    let secs = t.elapsed().as_secs_f64();
    let pass = bounded && monotone && s < 3.0 && exact_zero && residual <= 1e-12 && secs < 300.0;
    let errs: Vec<String> = recs.iter().map(|r| format!("{:.3e}", r.l2_error)).collect();
    report(
        6,
        "initial-data error against eps|ln eps|/d^((1+mu)/2)",
        pass,
        secs,
        format!("errors [{}], C = {c:.3}, ratio spread {s:.2}, w1 = w3 = 0: {exact_zero}, reconstruction {residual:.1e}", errs.join(", ")),
    );
    assert!(pass);
}

fn centroid_angle(omega: &ScalarField<f64>) -> f64 {
    // principal axis of the second moments about the vorticity centroid
    let g = omega.grid;
    let (mut m, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..g.len() {
        let x = g.point(k % g.nx, k / g.nx);
        let w = omega.data[k];
        m += w;
        cx += w * x[0];
        cy += w * x[1];
    }
    let (cx, cy) = (cx / m, cy / m);
    let (mut ixx, mut ixy, mut iyy) = (0.0, 0.0, 0.0);
    for k in 0..g.len() {
        let x = g.point(k % g.nx, k / g.nx);
        let (dx, dy) = (x[0] - cx, x[1] - cy);
        let w = omega.data[k];
        ixx += w * dx * dx;
        ixy += w * dx * dy;
        iyy += w * dy * dy;
    }
    0.5 * (2.0 * ixy).atan2(ixx - iyy)
}

#[test]
fn criterion_7_euler_solver() {
    let t = Instant::now();
    let g = Grid::<f64>::new([-2.0, -2.0], 4.0 / 256.0, 256, 256, Boundary::Open).unwrap();
    let solver = EulerSolver::new(g).unwrap();

    let w0 = sample_blobs(&[VorticityBlob::gaussian([0.0, 0.0], 0.2, 5.0)], &g);
    let st = solver.initial_state(w0.clone()).unwrap();
    let n0 = st.vorticity_norms().unwrap();
    let end = solver.run(st, 1.0, 0.9, 1.0, |_| Ok(())).unwrap();
    let drift = end.omega.sub(&w0).lp_norm(2.0, None).unwrap() / w0.lp_norm(2.0, None).unwrap();
    let n1 = end.vorticity_norms().unwrap();
    let nd: Vec<f64> = (0..3).map(|i| (n1[i] - n0[i]).abs() / n0[i]).collect();

    // two equal Gaussian vortices a distance D apart turn at Gamma / (pi D^2)
    let (r, sep, amp) = (0.08, 0.6, 56.0);
    let pair = [VorticityBlob::gaussian([-sep / 2.0, 0.0], r, amp), VorticityBlob::gaussian([sep / 2.0, 0.0], r, amp)];
    let st = solver.initial_state(sample_blobs(&pair, &g)).unwrap();
    let gamma = st.omega.integral() / 2.0;
    let omega_oracle = gamma / (std::f64::consts::PI * sep * sep);
    let (mut samples, mut last, mut turn) = (Vec::new(), 0.0f64, 0.0f64);
    solver
        .run(st, 1.0, 0.9, 0.1, |s| {
            let a = centroid_angle(&s.omega);
            // unwrap the axis angle (period pi)
            let mut da = a - last;
            while da > std::f64::consts::FRAC_PI_2 {
                da -= std::f64::consts::PI;
            }
            while da < -std::f64::consts::FRAC_PI_2 {
                da += std::f64::consts::PI;
            }
            turn += da;
            last = a;
            samples.push((s.time, turn));
            Ok(())
        })
        .unwrap();
    let n = samples.len() as f64;
    let (mt, ma) = (samples.iter().map(|s| s.0).sum::<f64>() / n, samples.iter().map(|s| s.1).sum::<f64>() / n);
    let slope = samples.iter().map(|s| (s.0 - mt) * (s.1 - ma)).sum::<f64>() / samples.iter().map(|s| (s.0 - mt).powi(2)).sum::<f64>();
    let rot_err = (slope - omega_oracle).abs() / omega_oracle;

    let secs = t.elapsed().as_secs_f64();
    let pass = drift <= 1e-3 && nd[0] <= 1e-3 && nd[1] <= 5e-3 && nd[2] <= 1e-2 && rot_err <= 0.05 && secs < 600.0;
    report(
        7,
        "Euler: radial steady state and co-rotating pair at 256^2",
        pass,
        secs,
        format!(
            "drift {drift:.2e}, norm drifts L1 {:.2e} L2 {:.2e} Linf {:.2e}, angular velocity {slope:.4} vs {omega_oracle:.4} ({:.2}%)",
            nd[0],
            nd[1],
            nd[2],
            100.0 * rot_err
        ),
    );
    assert!(pass);
}

fn solid_constant(eta_scale: f64) -> (f64, usize) {
    let g = Grid::periodic([-1.0, -1.0], 2.0, 64).unwrap();
    let cfg = LatticeConfig::new(0.3, 0.3, 1.0, ObstacleShape::Disk);
    let geo = Geometry::from_centers(cfg, vec![[0.0, 0.0]]);
    let solid = rasterize(&geo, &g, Region::Solid).unwrap();
    let nu = 1.0;
    let mut p = SimParams::for_grid(g, nu, 0.02);
    p.eta *= eta_scale;
    p.dt = p.dt.min(p.eta);
    let s = NsSolver::new(p, Some(&solid)).unwrap();
    let u0 = VectorField::from_fn(g, |x| [(std::f64::consts::PI * x[1]).sin(), 0.3 * (std::f64::consts::PI * x[0]).cos()]);
    let (end, ledger) = s.run(s.initial_state(u0).unwrap(), |_| Ok(())).unwrap();
    (s.solid_max(&end.u) / (nu * p.eta).sqrt(), ledger.violations)
}

#[test]
fn criterion_8_ns_solver() {
    let t = Instant::now();
    let g = Grid::periodic([0.0, 0.0], std::f64::consts::TAU, 128).unwrap();
    let nu = 0.05;
    let s = NsSolver::new(SimParams::for_grid(g, nu, 1.0), None).unwrap();
    let u0 = taylor_green(g, 1.0);
    let a0 = u0.max_abs();
    let (end, ledger) = s.run(s.initial_state(u0).unwrap(), |_| Ok(())).unwrap();
    let rate = -(end.u.max_abs() / a0).ln() / end.time;
    let rate_err = (rate - 2.0 * nu).abs() / (2.0 * nu);
    let (c1, v1) = solid_constant(1.0);
    let (c2, v2) = solid_constant(0.5);
    let stable = (0.5..=2.0).contains(&(c2 / c1));
    let secs = t.elapsed().as_secs_f64();
    let pass = rate_err <= 0.01
        && ledger.energy_nonincreasing()
        && ledger.max_excess < 1e-3
        && v1 + v2 == 0
        && stable
        && secs < 600.0;
    report(
        8,
        "NS: Taylor-Green rate, energy ledger, penalization scaling",
        pass,
        secs,
        format!(
            "rate error {:.3}%, ledger violations {} (max excess {:.1e}), solid C {c1:.2} -> {c2:.2} under eta/2",
            100.0 * rate_err,
            ledger.violations + v1 + v2,
            ledger.max_excess
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_rate_study() {
    let t = Instant::now();
    let mut cfg = StudyConfig::<f64>::from_json(include_str!("../../../configs/study_single.json")).unwrap();
    cfg.control = false;
    let setup = StudySetup::from_config(&cfg).unwrap();
    let out = run_study(&cfg, &setup, |_| {}).unwrap();
    let fit = rate_fit(&out.records);
    let admissible: Vec<_> = out.records.iter().filter(|r| r.admissible).collect();
    let coefficients_ok = out.records.iter().zip(&out.ledgers).filter(|(r, _)| r.admissible).all(|(_, l)| l.coefficient_ok);
    let (monotone, b_t, ratio_spread) = match &fit {
        Ok(f) => (f.monotone, f.b_t, spread(&f.ratios)),
        Err(_) => (false, f64::NAN, f64::NAN),
    };

    // multi-obstacle spot check: 3x3 lattice at the calibrated A
    let multi = lattice_centers(LatticeConfig::new(0.1, 0.1, 1.0, ObstacleShape::Disk)).unwrap();
    let rule = CompatibilityRule::new(out.a, setup.m0);
    let g = coupling_sup(&setup, &multi, 5).unwrap();
    let nu_multi = 1.25 * (setup.m0 / out.a).max(4.0 * setup.k2 * setup.k2 * 0.1 * g);
    let rec = run_point(&setup, Some(&rule), &PointSpec { nu: nu_multi, geometry: multi });
    let lm = ledger_report(&rec);
    let multi_ok = rec.completed() && rec.admissible && lm.coefficient_ok && lm.triangle_ok && lm.all_finite && rec.ledger_violations == 0;

    let secs = t.elapsed().as_secs_f64();
    let pass = fit.is_ok() && admissible.len() == 3 && monotone && ratio_spread < 3.0 && coefficients_ok && multi_ok && secs < 3600.0;
    let errs: Vec<String> = out.records.iter().map(|r| format!("nu {:.0e}: eps {:.3} err {:.3e}", r.nu, r.epsilon, r.sup_error)).collect();
    report(
        9,
        "vanishing-viscosity study, single obstacle + 3x3 spot check",
        pass,
        secs,
        format!(
            "A = {:.3}, [{}], monotone {monotone}, B_T = {b_t:.3e} (ratio spread {ratio_spread:.2}), coefficient check {coefficients_ok}; 3x3 at nu = {nu_multi:.2e}: err {:.3e}, coefficient/nu {:.3}, ok {multi_ok}",
            out.a,
            errs.join("; "),
            rec.sup_error,
            lm.coefficient / nu_multi
        ),
    );
    assert!(pass);
}
