//! Subcommand bodies. Each returns the files it wrote through [`Outputs`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rvm_core::bounds::{
    audit_aronson, audit_sharp_bound, calibrate_aronson_m, calibrate_kappa, gaussian_density, verify_i_bound,
    verify_j_bound, BoundReport, McParams, ScalarField, StructureConstants,
};
use rvm_core::drift::{DriftField, GridField, SpaceGrid, TimeGrid};
use rvm_core::fixedpoint::{apply_k_diamond, picard_solve, DiamondConfig, PicardOptions, PicardState};
use rvm_core::io::csv_row;
use rvm_core::kernel::Lattice;
use rvm_core::rng::StreamKey;
use rvm_core::stats::Estimate;
use rvm_core::vortex::{
    compare_lamb_oseen, divergence_check, recover_velocity, recover_vorticity, residual_check, run_particle_system,
    second_radial_moment, write_radial_profile, LambOseen, Mode, ParticleConfig, ParticleSystemState,
};
use rvm_core::{norm, Error};
use serde_json::{json, Value};

use crate::config::{ConfigError, ModeName, Omega0Spec, RunConfig};
use crate::manifest::Outputs;

/// Failure of a command, mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("bound violated: {0}")]
    BoundViolated(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(ConfigError::Read(_)) => 2,
            CmdError::Config(_) | CmdError::Usage(_) => 2,
            CmdError::Core(e) => match e {
                Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Format(_) => 2,
                Error::NonConvergence { .. } => 3,
                Error::NotFinite { .. } => 4,
                Error::BlowUp { .. } => 5,
                Error::Degenerate(_) => 4,
                Error::Io(_) => 1,
            },
            CmdError::BoundViolated(_) => 6,
            CmdError::Io(_) => 1,
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub emit_plot_data: bool,
}

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CmdError::Usage(msg.into()))
}

fn create(out: &mut Outputs, name: &str) -> CmdResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.file(name))?))
}

fn write_json_line(out: &mut Outputs, name: &str, v: &Value) -> CmdResult<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer(&mut w, v).map_err(std::io::Error::other)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// `key=value` text form; infinities print as `inf`.
pub fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn structure_constants(cfg: &RunConfig) -> CmdResult<StructureConstants> {
    Ok(StructureConstants::new(&cfg.constant_inputs()?)?)
}

pub fn constants(ctx: &Context, out: &mut Outputs) -> CmdResult<()> {
    let sc = structure_constants(&ctx.cfg)?;
    let mut stdout = std::io::stdout().lock();
    let mut rec = serde_json::Map::new();
    for (k, v) in sc.entries() {
        writeln!(stdout, "{k}={}", fmt_value(v))?;
        rec.insert(k.into(), json!(v));
    }
    rec.insert("T_K_unbounded".into(), json!(sc.t_k.is_infinite()));
    write_json_line(out, "constants.ndjson", &Value::Object(rec))
}

/// Relative L2 distance of `b` to the Lamb–Oseen velocity over slices
/// `j >= 1` and nodes with `0.2 <= r <= 3`.
pub fn lamb_oseen_drift_error(b: &DriftField, exact: &LambOseen) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for j in 1..=b.time.n_slices {
        let t = b.time.time(j);
        for node in 0..b.space.len() {
            let x = b.space.node(node);
            let r = norm(&x);
            if !(0.2..=3.0).contains(&r) {
                continue;
            }
            let e = exact.velocity(&x, t);
            let v = b.node_value(j, node);
            num += (v[0] - e[0]).powi(2) + (v[1] - e[1]).powi(2);
            den += e[0] * e[0] + e[1] * e[1];
        }
    }
    (num / den).sqrt()
}

fn picard_summary(st: &PicardState) -> Value {
    json!({
        "converged": st.converged,
        "iterations": st.iterations,
        "residuals": st.residuals,
        "ratios": st.ratios,
        "noise_floor": st.noise_floor,
        "tol_fp": st.tol_fp,
        "within_proven_regime": st.within_proven_regime,
        "certified_residual": st.certified_residual,
        "max_dropped_fraction": st.max_dropped_fraction,
        "sup_norm": st.current.sup_norm(),
    })
}

pub fn solve_drift(ctx: &Context, out: &mut Outputs, allow_beyond_tk: bool) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let sc = structure_constants(cfg)?;
    if cfg.grid.horizon > sc.t_k && !allow_beyond_tk {
        return usage(format!(
            "horizon {} exceeds T_K = {}; pass --allow-beyond-tk to run anyway",
            cfg.grid.horizon, sc.t_k
        ));
    }
    let kernel = cfg.build_kernel()?;
    let lattice = cfg.build_lattice()?;
    let space = cfg.space()?;
    let time = cfg.time()?;
    let dcfg = DiamondConfig {
        paths_per_point: cfg.solver.paths_per_point,
        dt: cfg.solver_dt(),
        substeps: cfg.solver.substeps,
        key: StreamKey::named(ctx.seed, "drift-solve"),
        estimator: cfg.estimator(),
    };
    let opts = PicardOptions {
        tol_fp: cfg.tolerances.tol_fp,
        max_iter: cfg.tolerances.max_iter,
        proven_horizon: Some(sc.t_l_derived),
        certify: cfg.tolerances.certify,
    };
    match picard_solve(&kernel, &lattice, cfg.nu, &space, &time, &dcfg, &opts) {
        Ok(st) => {
            let mut w = create(out, "drift.ndjson")?;
            st.current.write_ndjson(&mut w)?;
            w.flush()?;
            let mut w = create(out, "picard.csv")?;
            st.write_csv(&mut w)?;
            w.flush()?;
            let mut summary = picard_summary(&st);
            // lattice quadrature error: K<>b* on the halved mesh, same numbers
            let fine = Lattice::from_field(&cfg.build_field()?, 0.5 * cfg.solver.eps)?;
            let refined = apply_k_diamond(&st.current, &kernel, &fine, cfg.nu, &dcfg)?;
            summary["richardson_sup_diff"] = json!(refined.field.sup_distance(&st.current)?);
            summary["T_K"] = json!(sc.t_k);
            summary["T_L_derived"] = json!(sc.t_l_derived);
            if let Some((gamma, t0)) = cfg.lamb_oseen().filter(|_| cfg.d == 2) {
                let exact = LambOseen { circulation: gamma, t0, nu: cfg.nu };
                summary["lamb_oseen_l2_rel"] = json!(lamb_oseen_drift_error(&st.current, &exact));
            }
            write_json_line(out, "solve.ndjson", &summary)?;
            println!(
                "converged iterations={} residual={} noise_floor={}",
                st.iterations,
                fmt_value(*st.residuals.last().unwrap_or(&0.0)),
                fmt_value(st.noise_floor)
            );
            Ok(())
        }
        Err(Error::NonConvergence { iterations, last_residual, state }) => {
            let mut w = create(out, "picard.csv")?;
            state.write_csv(&mut w)?;
            w.flush()?;
            write_json_line(out, "solve.ndjson", &picard_summary(&state))?;
            Err(Error::NonConvergence { iterations, last_residual, state }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn read_drift(path: &Path) -> CmdResult<DriftField> {
    Ok(DriftField::read_ndjson(BufReader::new(File::open(path)?))?)
}

/// Indices `(i-1, i, i+1)` of equally spaced snapshot triples.
fn equal_triples(times: &[f64]) -> Vec<usize> {
    (1..times.len().saturating_sub(1))
        .filter(|&i| {
            let (a, b) = (times[i] - times[i - 1], times[i + 1] - times[i]);
            a > 0.0 && (a - b).abs() <= 1e-9 * a
        })
        .collect()
}

/// Per-copy displacement of lattice point 0: with zero drift it is `sqrt(2 nu) B_t`.
fn brownian_spread(lattice: &Lattice, st: &ParticleSystemState) -> Estimate {
    let y = lattice.points[0];
    let sq: Vec<f64> = (0..st.n_copies).map(|n| (st.positions[n * st.n_points][0] - y[0]).powi(2)).collect();
    Estimate::from_samples(&sq)
}

pub fn simulate(ctx: &Context, out: &mut Outputs, drift: Option<&Path>, mode: Option<ModeName>) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let mode = mode.unwrap_or(cfg.simulate.mode);
    let kernel = cfg.build_kernel()?;
    let field = cfg.build_field()?;
    let lattice = cfg.build_lattice()?;
    let grid = cfg.space()?;
    let b = match (mode, drift) {
        (ModeName::MeanField, Some(p)) => Some(read_drift(p)?),
        (ModeName::MeanField, None) => return usage("mean-field simulation needs --drift"),
        (ModeName::Empirical, _) => None,
    };
    let pc = ParticleConfig {
        n_copies: cfg.solver.n_copies,
        nu: cfg.nu,
        dt: cfg.solver_dt(),
        key: StreamKey::named(ctx.seed, "simulate"),
        blowup_radius: cfg.solver.blowup_factor * field.support_radius().max(cfg.grid.radius),
    };
    let times = cfg.snapshot_times();
    let pmode = match &b {
        Some(b) => Mode::MeanField(b),
        None => Mode::EmpiricalCoupled,
    };
    let states = run_particle_system(&kernel, &lattice, pmode, &pc, &times)?;

    let mut w = create(out, "snapshots.csv")?;
    for (i, st) in states.iter().enumerate() {
        st.write_csv(&lattice, &mut w, i == 0)?;
    }
    w.flush()?;

    let exact = cfg.lamb_oseen().filter(|_| cfg.d == 2).map(|(c, t0)| LambOseen { circulation: c, t0, nu: cfg.nu });
    let recover = pc.n_copies >= 1000;
    let bandwidth = cfg.bandwidth();
    let mut records = Vec::new();
    for (j, st) in states.iter().enumerate() {
        let mut rec = json!({ "snapshot": j, "t": st.t });
        if cfg.d == 2 {
            rec["second_moment"] = json!(second_radial_moment(&lattice, st));
            if let Some(e) = &exact {
                rec["second_moment_exact"] = json!(e.second_moment(st.t));
            }
        }
        if matches!(cfg.omega0, Omega0Spec::Zero) && st.t > 0.0 {
            let s = brownian_spread(&lattice, st);
            rec["brownian_variance"] = json!(s.estimate);
            rec["brownian_variance_se"] = json!(s.std_error);
            rec["brownian_variance_exact"] = json!(2.0 * cfg.nu * st.t);
        }
        if recover {
            let omega = recover_vorticity(&lattice, st, &grid, bandwidth)?;
            let u = recover_velocity(&omega, &kernel)?;
            let mass = omega.integral();
            let mass0 = lattice.total_weight();
            rec["mass"] = json!(mass[..omega.ncomp]);
            rec["mass_initial"] = json!(mass0[..omega.ncomp]);
            let m0 = norm(&mass0);
            rec["mass_rel_error"] =
                json!(if m0 > 0.0 { norm(&rvm_core::sub(&mass, &mass0)) / m0 } else { norm(&mass) });
            let div = divergence_check(&u)?;
            rec["divergence_max"] = json!(div.max);
            rec["divergence_l2"] = json!(div.l2);
            rec["gradient_max"] = json!(div.max_gradient);
            if let Some(e) = &exact {
                let errs = compare_lamb_oseen(&omega, &u, e, st.t)?;
                rec["omega_l1_rel"] = json!(errs.omega_l1_rel);
                rec["u_l2_rel"] = json!(errs.u_l2_rel);
                rec["peak_error"] = json!(errs.peak_error);
                if ctx.emit_plot_data {
                    let mut w = create(out, &format!("radial_{j}.csv"))?;
                    write_radial_profile(&omega, &u, e, st.t, grid.h, &mut w)?;
                    w.flush()?;
                }
            }
            let mut w = create(out, &format!("vorticity_{j}.ndjson"))?;
            omega.write_ndjson(&mut w)?;
            w.flush()?;
            let mut w = create(out, &format!("velocity_{j}.ndjson"))?;
            u.write_ndjson(&mut w)?;
            w.flush()?;
        }
        records.push(rec);
    }
    if recover {
        for i in equal_triples(&times) {
            let chk = residual_check(
                &kernel,
                &lattice,
                [&states[i - 1], &states[i], &states[i + 1]],
                &grid,
                bandwidth,
                cfg.nu,
            )?;
            let rec = &mut records[i];
            rec["residual_l2"] = json!(chk.residual.l2);
            rec["residual_sup"] = json!(chk.residual.sup);
            rec["residual_noise"] = json!(chk.noise);
            rec["residual_bandwidth"] = json!(chk.bandwidth);
        }
    }
    let mut w = create(out, "simulate.ndjson")?;
    for rec in &records {
        serde_json::to_writer(&mut w, rec).map_err(std::io::Error::other)?;
        writeln!(w)?;
    }
    w.flush()?;
    println!("simulated {} snapshots with N={} copies", states.len(), pc.n_copies);
    Ok(())
}

fn bound_row(w: &mut impl Write, bound: &str, param: &str, r: &BoundReport) -> std::io::Result<()> {
    writeln!(
        w,
        "{bound},{param},{},{}",
        csv_row(&[r.lhs_estimate, r.lhs_std_error, r.rhs_bound, r.margin]),
        r.satisfied
    )
}

pub fn verify_bounds(ctx: &Context, out: &mut Outputs) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let bc = &cfg.bounds;
    let d = cfg.d;
    let mut sc = structure_constants(cfg)?;
    let ts = linspace(bc.t_min, bc.t_max, bc.n_t);
    let rs = linspace(0.0, bc.r_max, bc.n_r);
    let a = bc.drift;
    sc.kappa = cfg.constants.kappa.unwrap_or_else(|| calibrate_kappa(a, sc.q, &ts, &rs));
    let mut rows: Vec<(String, String, BoundReport)> = Vec::new();
    rows.push(("sharp".into(), format!("A={a};kappa={}", sc.kappa), audit_sharp_bound(a, &sc, &ts, &rs)));

    let heat = |t: f64, r: f64| gaussian_density(d, t, r);
    let m = match bc.aronson_m {
        Some(m) => m,
        None => calibrate_aronson_m(d, &ts, &rs, &heat)?,
    };
    rows.push(("aronson".into(), format!("M={m}"), audit_aronson(m, d, &ts, &rs, &heat)?));

    let f = ScalarField::Gaussian { amp: bc.f_amp, sigma: bc.f_sigma };
    let x = [0.0; 3];
    for (i, &t) in bc.ij_times.iter().enumerate() {
        let b = if a != 0.0 {
            let half = 8.0 * bc.f_sigma + a * t + 8.0 * t.sqrt() + 1.0;
            let space = SpaceGrid::new(d, half, half / 32.0)?;
            Some(DriftField::from_fn(space, TimeGrid::covering(t, 2)?, |_, _| [a, 0.0, 0.0])?)
        } else {
            None
        };
        let mc = McParams { n_samples: bc.samples, dt: bc.dt.min(t), key: StreamKey::named(ctx.seed, "bounds").child(i as u64) };
        let param = format!("t={t};rho={};gamma={}", bc.rho, bc.gamma);
        rows.push(("I".into(), param.clone(), verify_i_bound(&f, &x, t, bc.rho, bc.gamma, b.as_ref(), &sc, &mc)?));
        rows.push(("J".into(), param, verify_j_bound(&f, &x, t, bc.rho, bc.gamma, b.as_ref(), d, &mc)?));
    }

    let mut w = create(out, "bounds.csv")?;
    writeln!(w, "bound,param,lhs,lhs_se,rhs,margin,satisfied")?;
    for (name, param, r) in &rows {
        bound_row(&mut w, name, param, r)?;
    }
    w.flush()?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.2.satisfied).map(|r| r.0.as_str()).collect();
    for (name, param, r) in &rows {
        println!("{name} {param} margin={} satisfied={}", fmt_value(r.margin), r.satisfied);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CmdError::BoundViolated(failed.join(",")))
    }
}

pub fn compare(ctx: &Context, out: &mut Outputs, vorticity: &Path, velocity: &Path) -> CmdResult<()> {
    let cfg = &ctx.cfg;
    let Some((c, t0)) = cfg.lamb_oseen().filter(|_| cfg.d == 2) else {
        return usage("compare needs d = 2 and a lamb_oseen omega0");
    };
    let grid = cfg.space()?;
    let omega = GridField::read_ndjson(BufReader::new(File::open(vorticity)?), grid.clone())?;
    let u = GridField::read_ndjson(BufReader::new(File::open(velocity)?), grid.clone())?;
    if omega.ncomp != 1 || u.ncomp != 2 {
        return usage("expected a scalar vorticity file and a 2-component velocity file");
    }
    let exact = LambOseen { circulation: c, t0, nu: cfg.nu };
    let t = omega.t;
    let errs = compare_lamb_oseen(&omega, &u, &exact, t)?;
    let mut w = create(out, "compare.csv")?;
    write_radial_profile(&omega, &u, &exact, t, grid.h, &mut w)?;
    w.flush()?;
    write_json_line(
        out,
        "compare.ndjson",
        &json!({
            "t": t,
            "omega_l1_rel": errs.omega_l1_rel,
            "u_l2_rel": errs.u_l2_rel,
            "peak_error": errs.peak_error,
        }),
    )?;
    println!(
        "t={} omega_l1_rel={} u_l2_rel={} peak_error={}",
        fmt_value(t),
        fmt_value(errs.omega_l1_rel),
        fmt_value(errs.u_l2_rel),
        fmt_value(errs.peak_error)
    );
    Ok(())
}
