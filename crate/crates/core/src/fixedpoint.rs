//! The map `b -> K<>b` and the Picard iteration for its fixed point.
//!
//! `(K<>b)(x, t) = sum_k eps^d E[K(x - Z(y_k, t))] omega_0(y_k)` where `Z(y, .)`
//! is the diffusion with drift `b` started at `y`.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::drift::{DriftField, SpaceGrid, TimeGrid};
use crate::error::invalid;
use crate::io::fmt_num;
use crate::kernel::{Lattice, Particles, SingularKernel};
use crate::rng::StreamKey;
use crate::sde::brownian_increment;
use crate::stats::linear_fit;
use crate::{Error, Point, Result, ZERO};

/// How `E[K(x - Z)]` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Euler–Maruyama paths of the drifted diffusion.
    DirectSimulation,
    /// Brownian paths reweighted by the Cameron–Martin density.
    CameronMartinWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiamondConfig {
    /// Monte Carlo paths per lattice point.
    pub paths_per_point: usize,
    /// Solver step; must divide the grid's time step.
    pub dt: f64,
    pub substeps: u32,
    pub key: StreamKey,
    pub estimator: Estimator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiamondOutput {
    pub field: DriftField,
    /// Fraction of kernel evaluations dropped by the cutoff.
    pub dropped_fraction: f64,
}

struct PathState {
    x: Point,
    log_r: f64,
}

fn steps_per_slice(time: &TimeGrid, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return invalid(format!("solver step must be positive, got {dt}"));
    }
    let s = (time.dt / dt).round().max(1.0);
    if ((s * dt) - time.dt).abs() > 1e-9 * time.dt {
        return invalid(format!("solver step {dt} does not divide the grid step {}", time.dt));
    }
    Ok(s as usize)
}

/// One application of `K<>` to `b`, on `b`'s grid.
///
/// Path `m` of lattice point `k` draws its noise from stream `k M + m`, so
/// identical keys give common random numbers across calls.
pub fn apply_k_diamond(
    b: &DriftField,
    kernel: &SingularKernel,
    lattice: &Lattice,
    nu: f64,
    cfg: &DiamondConfig,
) -> Result<DiamondOutput> {
    let d = b.dim();
    if kernel.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: kernel.dim() });
    }
    if lattice.d != d {
        return Err(Error::DimensionMismatch { expected: d, got: lattice.d });
    }
    if cfg.paths_per_point == 0 {
        return invalid("paths_per_point must be >= 1");
    }
    if !(nu > 0.0) {
        return invalid(format!("viscosity must be positive, got {nu}"));
    }
    let space = &b.space;
    let time = b.time;
    let spl = steps_per_slice(&time, cfg.dt)?;
    let dt = time.dt / spl as f64;
    let m = cfg.paths_per_point;
    let sig = (2.0 * nu).sqrt();
    let active: Vec<usize> = (0..lattice.len()).filter(|&k| lattice.weights[k] != ZERO).collect();
    let nodes = space.nodes();
    let mut values = vec![0.0; (time.n_slices + 1) * space.len() * d];
    let (mut dropped, mut total) = (0usize, 0usize);

    // t = 0: every path sits at its lattice point
    let mut start = Particles::with_capacity(active.len());
    for &k in &active {
        start.push(&lattice.points[k], &lattice.weights[k]);
    }
    let (slice0, drop0) = sum_on_nodes(kernel, &nodes, &start);
    values[..space.len() * d].copy_from_slice(&flatten(&slice0, d));
    dropped += drop0 * m;
    total += nodes.len() * start.len() * m;

    let mut paths: Vec<PathState> = active
        .iter()
        .flat_map(|&k| (0..m).map(move |_| PathState { x: lattice.points[k], log_r: 0.0 }))
        .collect();
    let inv_m = 1.0 / m as f64;
    for j in 1..=time.n_slices {
        let first = (j - 1) * spl;
        paths.par_iter_mut().enumerate().for_each(|(p, st)| {
            let k = active[p / m];
            let stream = (k * m + p % m) as u64;
            for s in first..first + spl {
                let t = s as f64 * dt;
                let db = brownian_increment(&cfg.key, stream, s as u64, dt, cfg.substeps, d);
                let v = b.eval(&st.x, t);
                match cfg.estimator {
                    Estimator::DirectSimulation => {
                        for c in 0..d {
                            st.x[c] += v[c] * dt + sig * db[c];
                        }
                    }
                    Estimator::CameronMartinWeighted => {
                        for c in 0..d {
                            let bt = v[c] / sig;
                            st.log_r += bt * db[c] - 0.5 * bt * bt * dt;
                            st.x[c] += sig * db[c];
                        }
                    }
                }
            }
        });
        let mut parts = Particles::with_capacity(paths.len());
        for (p, st) in paths.iter().enumerate() {
            let w = lattice.weights[active[p / m]];
            let scale = inv_m * st.log_r.exp();
            parts.push(&st.x, &crate::scale(&w, scale));
        }
        let (slice, drop) = sum_on_nodes(kernel, &nodes, &parts);
        let off = j * space.len() * d;
        values[off..off + space.len() * d].copy_from_slice(&flatten(&slice, d));
        dropped += drop;
        total += nodes.len() * parts.len();
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite drift value at flat index {i}"));
    }
    let field = DriftField::new(space.clone(), time, values)?;
    let dropped_fraction = if total == 0 { 0.0 } else { dropped as f64 / total as f64 };
    Ok(DiamondOutput { field, dropped_fraction })
}

fn sum_on_nodes(kernel: &SingularKernel, nodes: &[Point], parts: &Particles) -> (Vec<Point>, usize) {
    let res: Vec<(Point, usize)> = nodes.par_iter().map(|x| kernel.sum_at(x, parts)).collect();
    let dropped = res.iter().map(|r| r.1).sum();
    (res.into_iter().map(|r| r.0).collect(), dropped)
}

fn flatten(v: &[Point], d: usize) -> Vec<f64> {
    v.iter().flat_map(|p| p[..d].iter().copied()).collect()
}

/// Stopping and reporting options for [`picard_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    /// Residual tolerance; defaults to the estimated noise floor.
    pub tol_fp: Option<f64>,
    pub max_iter: usize,
    /// Horizon up to which contraction is proven (`T_L`), if known.
    pub proven_horizon: Option<f64>,
    /// Re-evaluate the map at the solution with a fresh seed.
    pub certify: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol_fp: None, max_iter: 8, proven_horizon: None, certify: false }
    }
}

/// Diagnostics of a Picard run; `current` is the latest accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardState {
    pub iterations: usize,
    pub current: DriftField,
    /// `r_n = |b_{n+1} - b_n|` (grid sup).
    pub residuals: Vec<f64>,
    /// `r_n / r_{n-1}`, recorded only when `r_{n-1}` exceeds ten noise floors.
    pub ratios: Vec<Option<f64>>,
    /// `|b_{n+1}|` (grid sup).
    pub sup_norms: Vec<f64>,
    pub seconds: Vec<f64>,
    pub noise_floor: f64,
    pub tol_fp: f64,
    pub within_proven_regime: bool,
    /// `|K<>b* - b*|` with a fresh seed, when requested.
    pub certified_residual: Option<f64>,
    pub max_dropped_fraction: f64,
    pub converged: bool,
}

impl PicardState {
    /// CSV with columns `iter,residual,ratio,sup_norm,seconds`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,residual,ratio,sup_norm,seconds")?;
        for n in 0..self.residuals.len() {
            let ratio = self.ratios[n].map(fmt_num).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                n,
                fmt_num(self.residuals[n]),
                ratio,
                fmt_num(self.sup_norms[n]),
                fmt_num(self.seconds[n])
            )?;
        }
        Ok(())
    }

    /// Recorded ratios.
    pub fn recorded_ratios(&self) -> Vec<f64> {
        self.ratios.iter().flatten().copied().collect()
    }
}

/// Iterates `b_{n+1} = K<>b_n` from `b_0 = 0` with common random numbers until
/// `|b_{n+1} - b_n| <= tol_fp`, returning `b_n`.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    kernel: &SingularKernel,
    lattice: &Lattice,
    nu: f64,
    space: &SpaceGrid,
    time: &TimeGrid,
    cfg: &DiamondConfig,
    opts: &PicardOptions,
) -> Result<PicardState> {
    if opts.max_iter == 0 {
        return invalid("max_iter must be >= 1");
    }
    let mut b = DriftField::zero(space.clone(), *time);
    let clock = Instant::now();
    let first = apply_k_diamond(&b, kernel, lattice, nu, cfg)?;
    let elapsed0 = clock.elapsed().as_secs_f64();
    let twin_cfg = DiamondConfig { key: cfg.key.child(1), ..*cfg };
    let twin = apply_k_diamond(&b, kernel, lattice, nu, &twin_cfg)?;
    let noise_floor = first.field.sup_distance(&twin.field)?;
    let tol = opts.tol_fp.unwrap_or(noise_floor);
    let mut state = PicardState {
        iterations: 0,
        current: b.clone(),
        residuals: vec![],
        ratios: vec![],
        sup_norms: vec![],
        seconds: vec![],
        noise_floor,
        tol_fp: tol,
        within_proven_regime: opts.proven_horizon.is_some_and(|tl| time.horizon() <= tl * (1.0 + 1e-12)),
        certified_residual: None,
        max_dropped_fraction: first.dropped_fraction,
        converged: false,
    };
    let mut next = first;
    let mut secs = elapsed0;
    loop {
        let n = state.residuals.len();
        state.iterations = n + 1;
        if next.field.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite { iteration: n + 1 });
        }
        let r = next.field.sup_distance(&b)?;
        if !r.is_finite() {
            return Err(Error::NotFinite { iteration: n + 1 });
        }
        let ratio = match state.residuals.last() {
            Some(&prev) if prev > 10.0 * noise_floor && prev > 0.0 => Some(r / prev),
            _ => None,
        };
        state.residuals.push(r);
        state.ratios.push(ratio);
        state.sup_norms.push(next.field.sup_norm());
        state.seconds.push(secs);
        state.max_dropped_fraction = state.max_dropped_fraction.max(next.dropped_fraction);
        if r <= tol {
            state.converged = true;
            state.current = b;
            break;
        }
        if state.iterations >= opts.max_iter {
            state.current = next.field;
            return Err(Error::NonConvergence { iterations: state.iterations, last_residual: r, state: Box::new(state) });
        }
        b = next.field;
        let clock = Instant::now();
        next = apply_k_diamond(&b, kernel, lattice, nu, cfg)?;
        secs = clock.elapsed().as_secs_f64();
    }
    if opts.certify {
        let fresh_cfg = DiamondConfig { key: cfg.key.child(2), ..*cfg };
        let fresh = apply_k_diamond(&state.current, kernel, lattice, nu, &fresh_cfg)?;
        state.certified_residual = Some(fresh.field.sup_distance(&state.current)?);
    }
    Ok(state)
}

/// Empirical Lipschitz ratio of `K<>` at one time slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionRow {
    pub pair: usize,
    pub t: f64,
    /// `|K<>b - K<>b~|(., t) / |b - b~|`.
    pub ratio: f64,
    /// `(t + sqrt t) C_L`.
    pub bound: f64,
    pub satisfied: bool,
}

/// Compares `|K<>b - K<>b~|_sup / |b - b~|_sup` with `(t + sqrt t) C_L` per slice,
/// using common random numbers for both members of each pair.
pub fn contraction_diagnostics(
    kernel: &SingularKernel,
    lattice: &Lattice,
    nu: f64,
    pairs: &[(DriftField, DriftField)],
    cfg: &DiamondConfig,
    c_l: f64,
) -> Result<Vec<ContractionRow>> {
    let mut rows = Vec::new();
    for (i, (b, bt)) in pairs.iter().enumerate() {
        let gap = b.sup_distance(bt)?;
        if gap == 0.0 {
            return invalid(format!("pair {i} has identical drifts"));
        }
        let kb = apply_k_diamond(b, kernel, lattice, nu, cfg)?.field;
        let kbt = apply_k_diamond(bt, kernel, lattice, nu, cfg)?.field;
        for j in 0..=b.time.n_slices {
            let t = b.time.time(j);
            let ratio = kb.slice_sup_distance(&kbt, j)? / gap;
            let bound = (t + t.sqrt()) * c_l;
            rows.push(ContractionRow { pair: i, t, ratio, bound, satisfied: ratio <= bound });
        }
    }
    Ok(rows)
}

/// Fitted `|b(x') - b(x)| ~ C |x' - x|^a` in space and `~ C' |t' - t|^{a'/2}` in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoelderReport {
    pub space_exponent: f64,
    pub space_constant: f64,
    pub time_exponent: Option<f64>,
    pub time_constant: Option<f64>,
}

fn fit_exponent(lags: &[f64], incs: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = lags.iter().zip(incs).filter(|(_, &i)| i > 0.0).map(|(&l, &i)| (l.ln(), i.ln())).collect();
    if pts.len() < 2 {
        return (1.0, 0.0);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let (slope, _) = linear_fit(&x, &y);
    let a = slope.clamp(f64::EPSILON, 1.0);
    let c = (y.iter().zip(&x).map(|(yi, xi)| yi - a * xi).sum::<f64>() / x.len() as f64).exp();
    (a, c)
}

/// Hölder fit of a drift field on the window `|x|_inf <= window`, `t >= t_min`.
///
/// Space lags are in grid nodes, time lags in slices (the time fit is skipped
/// when `time_lags` is empty). Increments are maximised over the window.
pub fn hoelder_modulus(
    b: &DriftField,
    window: f64,
    t_min: f64,
    space_lags: &[usize],
    time_lags: &[usize],
) -> Result<HoelderReport> {
    if space_lags.len() < 4 {
        return invalid(format!("at least 4 space lags needed, got {}", space_lags.len()));
    }
    if !time_lags.is_empty() && time_lags.len() < 4 {
        return invalid(format!("at least 4 time lags needed, got {}", time_lags.len()));
    }
    let g = &b.space;
    if !(window > 0.0 && window < g.radius) {
        return invalid(format!("window {window} must lie strictly inside the grid radius {}", g.radius));
    }
    if !(t_min > 0.0) {
        return invalid("t_min must be positive");
    }
    let d = g.d;
    let j0 = b.time.slice_at(t_min).max(1);
    let inside = |i: usize| g.coord(i).abs() <= window + 1e-12;
    let node_in = |idx: &[usize; 3]| (0..d).all(|c| inside(idx[c]));
    let mut space_inc = Vec::new();
    for &lag in space_lags {
        let mut m: f64 = 0.0;
        for j in j0..=b.time.n_slices {
            for f in 0..g.len() {
                let idx = g.multi_index(f);
                if !node_in(&idx) {
                    continue;
                }
                for c in 0..d {
                    let mut other = idx;
                    other[c] += lag;
                    if other[c] >= g.n || !inside(other[c]) {
                        continue;
                    }
                    let diff = crate::sub(&b.node_value(j, g.flat(&other)), &b.node_value(j, f));
                    m = m.max(crate::norm(&diff));
                }
            }
        }
        space_inc.push(m);
    }
    if space_inc.iter().all(|&v| v == 0.0) && space_lags.iter().all(|&l| l > 0) {
        return Ok(HoelderReport {
            space_exponent: 1.0,
            space_constant: 0.0,
            time_exponent: (!time_lags.is_empty()).then_some(1.0),
            time_constant: (!time_lags.is_empty()).then_some(0.0),
        });
    }
    let lags: Vec<f64> = space_lags.iter().map(|&l| l as f64 * g.h).collect();
    let (sa, sc) = fit_exponent(&lags, &space_inc);
    let (mut ta, mut tc) = (None, None);
    if !time_lags.is_empty() {
        let mut incs = Vec::new();
        let mut used = Vec::new();
        for &lag in time_lags {
            if j0 + lag > b.time.n_slices {
                continue;
            }
            let mut m: f64 = 0.0;
            for j in j0..=b.time.n_slices - lag {
                for f in 0..g.len() {
                    if node_in(&g.multi_index(f)) {
                        let diff = crate::sub(&b.node_value(j + lag, f), &b.node_value(j, f));
                        m = m.max(crate::norm(&diff));
                    }
                }
            }
            incs.push(m);
            used.push((lag as f64 * b.time.dt).sqrt());
        }
        if used.len() >= 4 {
            let (a, c) = fit_exponent(&used, &incs);
            ta = Some(a);
            tc = Some(c);
        }
    }
    Ok(HoelderReport { space_exponent: sa, space_constant: sc, time_exponent: ta, time_constant: tc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{make_builtin_kernel, BuiltinKernel, Normalization, VorticityField};

    fn bs2() -> SingularKernel {
        make_builtin_kernel(BuiltinKernel::BiotSavart2d, 2, Normalization::QuarterPi).unwrap()
    }

    fn cfg(m: usize, dt: f64, seed: u64) -> DiamondConfig {
        DiamondConfig {
            paths_per_point: m,
            dt,
            substeps: 1,
            key: StreamKey::from_seed(seed),
            estimator: Estimator::DirectSimulation,
        }
    }

    #[test]
    fn zero_vorticity_maps_to_zero() {
        let space = SpaceGrid::new(2, 2.0, 0.5).unwrap();
        let time = TimeGrid::new(0.1, 2).unwrap();
        let lattice = Lattice::from_field(&VorticityField::zero(2).unwrap(), 0.5).unwrap();
        let out = apply_k_diamond(&DriftField::zero(space.clone(), time), &bs2(), &lattice, 0.5, &cfg(10, 0.05, 1)).unwrap();
        assert_eq!(out.field.sup_norm(), 0.0);
        let st = picard_solve(&bs2(), &lattice, 0.5, &space, &time, &cfg(10, 0.05, 1), &PicardOptions::default()).unwrap();
        assert_eq!(st.iterations, 1);
        assert_eq!(st.residuals, vec![0.0]);
        assert!(st.converged);
    }

    #[test]
    fn first_slice_is_plain_convolution() {
        let space = SpaceGrid::new(2, 2.0, 0.5).unwrap();
        let time = TimeGrid::new(0.1, 1).unwrap();
        let field = VorticityField::lamb_oseen(1.0, 1.0, 0.5, 1e-2).unwrap();
        let lattice = Lattice::from_field(&field, 0.3).unwrap();
        let k = bs2().with_cutoff(0.075).unwrap();
        let b = DriftField::from_fn(space.clone(), time, |x, _| [x[1], -x[0], 0.0]).unwrap();
        let out = apply_k_diamond(&b, &k, &lattice, 0.5, &cfg(3, 0.05, 2)).unwrap().field;
        for node in [0, 7, 40] {
            let x = space.node(node);
            let mut expect = ZERO;
            for (p, w) in lattice.points.iter().zip(&lattice.weights) {
                let z = crate::sub(&x, p);
                if crate::norm(&z) >= 0.075 {
                    expect = crate::add(&expect, &k.apply(&z, w));
                }
            }
            let got = out.node_value(0, node);
            assert!((got[0] - expect[0]).abs() < 1e-14 && (got[1] - expect[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn output_is_linear_in_vorticity_under_common_numbers() {
        let space = SpaceGrid::new(2, 2.0, 0.5).unwrap();
        let time = TimeGrid::new(0.1, 2).unwrap();
        let field = VorticityField::lamb_oseen(1.0, 1.0, 0.5, 1e-2).unwrap();
        let lattice = Lattice::from_field(&field, 0.5).unwrap();
        let b = DriftField::from_fn(space.clone(), time, |x, _| [0.1 * x[1], -0.1 * x[0], 0.0]).unwrap();
        let c = cfg(5, 0.05, 3);
        let one = apply_k_diamond(&b, &bs2(), &lattice, 0.5, &c).unwrap().field;
        let three = apply_k_diamond(&b, &bs2(), &lattice.scaled(3.0), 0.5, &c).unwrap().field;
        for (a, b3) in one.values.iter().zip(&three.values) {
            assert!((3.0 * a - b3).abs() <= 1e-13 * (1.0 + b3.abs()));
        }
    }

    #[test]
    fn rejects_mismatched_dimensions_and_steps() {
        let space = SpaceGrid::new(2, 2.0, 0.5).unwrap();
        let time = TimeGrid::new(0.1, 2).unwrap();
        let lattice = Lattice::from_field(&VorticityField::zero(2).unwrap(), 0.5).unwrap();
        let k3 = make_builtin_kernel(BuiltinKernel::BiotSavart3d, 3, Normalization::QuarterPi).unwrap();
        let b = DriftField::zero(space, time);
        assert!(apply_k_diamond(&b, &k3, &lattice, 0.5, &cfg(1, 0.05, 1)).is_err());
        assert!(apply_k_diamond(&b, &bs2(), &lattice, 0.5, &cfg(1, 0.03, 1)).is_err());
        assert!(contraction_diagnostics(&bs2(), &lattice, 0.5, &[(b.clone(), b.clone())], &cfg(1, 0.05, 1), 1.0).is_err());
    }

    #[test]
    fn non_convergence_carries_history() {
        let space = SpaceGrid::new(2, 2.0, 0.5).unwrap();
        let time = TimeGrid::new(0.1, 2).unwrap();
        let field = VorticityField::lamb_oseen(1.0, 1.0, 0.5, 1e-2).unwrap();
        let lattice = Lattice::from_field(&field, 0.5).unwrap();
        let opts = PicardOptions { tol_fp: Some(0.0), max_iter: 2, ..Default::default() };
        match picard_solve(&bs2(), &lattice, 0.5, &space, &time, &cfg(4, 0.05, 4), &opts) {
            Err(Error::NonConvergence { iterations, state, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(state.residuals.len(), 2);
                let mut csv = Vec::new();
                state.write_csv(&mut csv).unwrap();
                assert!(String::from_utf8(csv).unwrap().starts_with("iter,residual,ratio,sup_norm,seconds\n"));
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn hoelder_of_constant_and_smooth_fields() {
        let space = SpaceGrid::new(2, 3.0, 0.1).unwrap();
        let time = TimeGrid::new(0.05, 6).unwrap();
        let c = DriftField::from_fn(space.clone(), time, |_, _| [0.3, -0.1, 0.0]).unwrap();
        let rep = hoelder_modulus(&c, 2.0, 0.05, &[1, 2, 4, 8], &[1, 2, 3, 4]).unwrap();
        assert_eq!((rep.space_exponent, rep.space_constant), (1.0, 0.0));
        let lo = |x: &Point, t: f64| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            let s = 2.0 * (t + 1.0);
            let f = if r2 == 0.0 { 1.0 / s } else { (1.0 - (-r2 / s).exp()) / r2 };
            [-x[1] * f / (2.0 * std::f64::consts::PI), x[0] * f / (2.0 * std::f64::consts::PI), 0.0]
        };
        let smooth = DriftField::from_fn(space, time, lo).unwrap();
        let rep = hoelder_modulus(&smooth, 2.0, 0.05, &[1, 2, 3, 4], &[]).unwrap();
        assert!(rep.space_exponent >= 0.9, "{rep:?}");
        assert!(hoelder_modulus(&smooth, 2.0, 0.05, &[1, 2, 3], &[]).is_err());
    }
}
