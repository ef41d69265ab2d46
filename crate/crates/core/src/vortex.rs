//! The lattice particle system and the recovery of vorticity and velocity
//! from particle laws.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;

use crate::drift::{DriftField, GridField, SpaceGrid};
use crate::error::invalid;
use crate::io::{coord_header, csv_row, fmt_num};
use crate::kernel::{Lattice, Particles, SingularKernel};
use crate::rng::StreamKey;
use crate::sde::{brownian_increment, kde_add, observation_steps, Bandwidth};
use crate::{Error, Point, Result, ZERO};

/// How the particles are driven.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Drift frozen to a precomputed field.
    MeanField(&'a DriftField),
    /// Drift from the running empirical measure of all particles.
    EmpiricalCoupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleConfig {
    pub n_copies: usize,
    pub nu: f64,
    pub dt: f64,
    pub key: StreamKey,
    /// Abort once any particle leaves this radius.
    pub blowup_radius: f64,
}

/// Particle positions at one time; particle `(n, k)` is `positions[n K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystemState {
    pub t: f64,
    pub n_copies: usize,
    pub n_points: usize,
    pub positions: Vec<Point>,
}

impl ParticleSystemState {
    pub fn copy_positions(&self, k: usize) -> Vec<Point> {
        (0..self.n_copies).map(|n| self.positions[n * self.n_points + k]).collect()
    }

    /// The copies with `n % 2 == parity`.
    pub fn half(&self, parity: usize) -> Self {
        let copies: Vec<usize> = (0..self.n_copies).filter(|n| n % 2 == parity).collect();
        let mut positions = Vec::with_capacity(copies.len() * self.n_points);
        for n in &copies {
            positions.extend_from_slice(&self.positions[n * self.n_points..(n + 1) * self.n_points]);
        }
        ParticleSystemState { t: self.t, n_copies: copies.len(), n_points: self.n_points, positions }
    }

    /// CSV with columns `t,copy,k1..kd,x1..xd`.
    pub fn write_csv<W: Write>(&self, lattice: &Lattice, mut w: W, header: bool) -> Result<()> {
        let d = lattice.d;
        if header {
            writeln!(w, "t,copy,{},{}", coord_header("k", d), coord_header("x", d))?;
        }
        for n in 0..self.n_copies {
            for k in 0..self.n_points {
                let idx: Vec<String> = lattice.indices[k][..d].iter().map(|i| i.to_string()).collect();
                let x = &self.positions[n * self.n_points + k];
                writeln!(w, "{},{},{},{}", fmt_num(self.t), n, idx.join(","), csv_row(&x[..d]))?;
            }
        }
        Ok(())
    }
}

fn sources(lattice: &Lattice, positions: &[Point], n_copies: usize) -> Particles {
    let kk = lattice.len();
    let inv = 1.0 / n_copies as f64;
    let mut parts = Particles::with_capacity(positions.len());
    for (i, x) in positions.iter().enumerate() {
        let w = &lattice.weights[i % kk];
        if *w != ZERO {
            parts.push(x, &crate::scale(w, inv));
        }
    }
    parts
}

/// `(1/N) sum_{(m,j)} eps^d K(X_{n,k} - X_{m,j}) omega_0(y_j)` for every
/// particle, dropping sources within the kernel cutoff (the self-term
/// included).
pub fn coupled_drift(kernel: &SingularKernel, lattice: &Lattice, positions: &[Point], n_copies: usize) -> Vec<Point> {
    let parts = sources(lattice, positions, n_copies);
    positions.par_iter().map(|x| kernel.sum_at(x, &parts).0).collect()
}

/// Evolves `X_{n,k}` from `y_k` by Euler–Maruyama. Copy `n` is driven by
/// Brownian stream `n`, shared across lattice points. Returns one state per
/// snapshot time (snapped to the step grid).
pub fn run_particle_system(
    kernel: &SingularKernel,
    lattice: &Lattice,
    mode: Mode<'_>,
    cfg: &ParticleConfig,
    snapshot_times: &[f64],
) -> Result<Vec<ParticleSystemState>> {
    let d = lattice.d;
    if kernel.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: kernel.dim() });
    }
    if cfg.n_copies == 0 || lattice.is_empty() {
        return invalid("particle system needs N >= 1 and a non-empty lattice");
    }
    if !(cfg.nu > 0.0 && cfg.dt > 0.0) {
        return invalid("particle system needs nu > 0 and dt > 0");
    }
    let horizon = match mode {
        Mode::MeanField(b) => {
            if b.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
            }
            b.time.horizon()
        }
        Mode::EmpiricalCoupled => f64::INFINITY,
    };
    let steps = observation_steps(snapshot_times, cfg.dt, horizon)?;
    let last = steps.iter().copied().max().unwrap_or(0);
    let kk = lattice.len();
    let mut x: Vec<Point> = (0..cfg.n_copies).flat_map(|_| lattice.points.iter().copied()).collect();
    let sig = (2.0 * cfg.nu).sqrt();
    let mut snaps: Vec<Option<ParticleSystemState>> = vec![None; steps.len()];
    let record = |step: usize, x: &[Point], snaps: &mut Vec<Option<ParticleSystemState>>| {
        for (i, &s) in steps.iter().enumerate() {
            if s == step {
                snaps[i] = Some(ParticleSystemState {
                    t: step as f64 * cfg.dt,
                    n_copies: cfg.n_copies,
                    n_points: kk,
                    positions: x.to_vec(),
                });
            }
        }
    };
    record(0, &x, &mut snaps);
    for step in 0..last {
        let t = step as f64 * cfg.dt;
        let drift: Vec<Point> = match mode {
            Mode::MeanField(b) => x.par_iter().map(|p| b.eval(p, t)).collect(),
            Mode::EmpiricalCoupled => coupled_drift(kernel, lattice, &x, cfg.n_copies),
        };
        let noise: Vec<Point> = (0..cfg.n_copies as u64)
            .into_par_iter()
            .map(|n| brownian_increment(&cfg.key, n, step as u64, cfg.dt, 1, d))
            .collect();
        x.par_iter_mut().enumerate().for_each(|(i, p)| {
            let db = &noise[i / kk];
            for c in 0..d {
                p[c] += drift[i][c] * cfg.dt + sig * db[c];
            }
        });
        let worst = x.iter().map(crate::norm).fold(0.0, f64::max);
        if !worst.is_finite() || worst > cfg.blowup_radius {
            return Err(Error::BlowUp { t: t + cfg.dt, radius: worst, limit: cfg.blowup_radius });
        }
        record(step + 1, &x, &mut snaps);
    }
    Ok(snaps.into_iter().map(|s| s.expect("every snapshot step is visited")).collect())
}

/// Number of field components: scalar vorticity in 2D, vector otherwise.
pub fn vorticity_components(d: usize) -> usize {
    if d == 2 {
        1
    } else {
        d
    }
}

const LATTICE_GROUP: usize = 32;

/// `omega(x, t) = sum_k eps^d omega_0(y_k) p_k(x)` with `p_k` the KDE of the
/// copies started at `y_k` (kernel tails beyond `8 h` dropped).
pub fn recover_vorticity(
    lattice: &Lattice,
    state: &ParticleSystemState,
    grid: &SpaceGrid,
    bandwidth: Bandwidth,
) -> Result<GridField> {
    let d = lattice.d;
    if grid.d != d {
        return Err(Error::DimensionMismatch { expected: d, got: grid.d });
    }
    if state.n_copies < 1000 {
        return invalid(format!("vorticity recovery needs >= 1000 copies, got {}", state.n_copies));
    }
    kde_vorticity(lattice, state, grid, bandwidth)
}

fn kde_vorticity(
    lattice: &Lattice,
    state: &ParticleSystemState,
    grid: &SpaceGrid,
    bandwidth: Bandwidth,
) -> Result<GridField> {
    let d = lattice.d;
    let ncomp = vorticity_components(d);
    let active: Vec<usize> = (0..lattice.len()).filter(|&k| lattice.weights[k] != ZERO).collect();
    let mut bands = Vec::with_capacity(active.len());
    for &k in &active {
        bands.push(bandwidth.resolve(&state.copy_positions(k), d)?);
    }
    let uniform = vec![1.0 / state.n_copies as f64; state.n_copies];
    let groups: Vec<Vec<f64>> = active
        .par_chunks(LATTICE_GROUP)
        .enumerate()
        .map(|(g, ks)| {
            let mut out = vec![0.0; grid.len() * ncomp];
            let mut dens = vec![0.0; grid.len()];
            for (i, &k) in ks.iter().enumerate() {
                dens.iter_mut().for_each(|v| *v = 0.0);
                kde_add(grid, &state.copy_positions(k), &uniform, &bands[g * LATTICE_GROUP + i], Some(8.0), &mut dens);
                let w = lattice.weights[k];
                for (node, p) in dens.iter().enumerate() {
                    if *p != 0.0 {
                        for c in 0..ncomp {
                            out[node * ncomp + c] += w[c] * p;
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut values = vec![0.0; grid.len() * ncomp];
    for g in groups {
        for (v, x) in values.iter_mut().zip(g) {
            *v += x;
        }
    }
    Ok(GridField { grid: grid.clone(), t: state.t, ncomp, values })
}

/// `u(x) = sum_{y != x} K(x - y) omega(y) h^d` over grid nodes.
///
/// The kernel cutoff is replaced by `h/2`: a cutoff equal to a node distance
/// would drop neighbours asymmetrically under rounding.
pub fn recover_velocity(omega: &GridField, kernel: &SingularKernel) -> Result<GridField> {
    let d = omega.grid.d;
    if kernel.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: kernel.dim() });
    }
    if omega.ncomp != vorticity_components(d) {
        return invalid(format!("vorticity in d = {d} needs {} components", vorticity_components(d)));
    }
    let kernel = &kernel.clone().with_cutoff(0.5 * omega.grid.h)?;
    let vol = omega.grid.cell_volume();
    let mut parts = Particles::with_capacity(omega.grid.len());
    for node in 0..omega.grid.len() {
        let w = omega.at(node);
        if w != ZERO {
            parts.push(&omega.grid.node(node), &crate::scale(&w, vol));
        }
    }
    velocity_on_grid(&omega.grid, omega.t, kernel, &parts)
}

/// Direct summation over the particles: `(1/N) sum_{n,k} eps^d K(x - X_{n,k}) omega_0(y_k)`.
pub fn recover_velocity_particles(
    kernel: &SingularKernel,
    lattice: &Lattice,
    state: &ParticleSystemState,
    grid: &SpaceGrid,
) -> Result<GridField> {
    if kernel.dim() != grid.d || lattice.d != grid.d {
        return Err(Error::DimensionMismatch { expected: grid.d, got: kernel.dim() });
    }
    let parts = sources(lattice, &state.positions, state.n_copies);
    velocity_on_grid(grid, state.t, kernel, &parts)
}

fn velocity_on_grid(grid: &SpaceGrid, t: f64, kernel: &SingularKernel, parts: &Particles) -> Result<GridField> {
    let d = grid.d;
    let u: Vec<Point> = grid.nodes().par_iter().map(|x| kernel.sum_at(x, parts).0).collect();
    let values = u.iter().flat_map(|p| p[..d].iter().copied()).collect();
    Ok(GridField { grid: grid.clone(), t, ncomp: d, values })
}

/// Pointwise residual with its norms over interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// Zero on the boundary layer.
    pub field: GridField,
    /// `(sum_interior |R|^2 h^d)^{1/2}`.
    pub l2: f64,
    pub sup: f64,
}

fn neighbours(grid: &SpaceGrid, node: usize, c: usize) -> (usize, usize) {
    let mut idx = grid.multi_index(node);
    idx[c] += 1;
    let up = grid.flat(&idx);
    idx[c] -= 2;
    (up, grid.flat(&idx))
}

/// `dw/dt + u . grad w - nu Lap w + (div u) w` by central differences on the
/// interior nodes, from snapshots at `t - lag`, `t`, `t + lag`.
pub fn pde_residual(
    prev: &GridField,
    cur: &GridField,
    next: &GridField,
    u: &GridField,
    nu: f64,
    lag: f64,
) -> Result<Residual> {
    cur.check_compatible(prev)?;
    cur.check_compatible(next)?;
    let g = &cur.grid;
    let d = g.d;
    if u.grid != *g || u.ncomp != d {
        return invalid("velocity grid does not match the vorticity grid");
    }
    if !(lag > 0.0) {
        return invalid("time lag must be positive");
    }
    let nc = cur.ncomp;
    let h = g.h;
    let mut field = GridField::zeros(g.clone(), cur.t, nc);
    let (mut ss, mut sup) = (0.0, 0.0f64);
    for node in 0..g.len() {
        if !g.is_interior(node, 1) {
            continue;
        }
        let mut div = 0.0;
        for a in 0..d {
            let (up, dn) = neighbours(g, node, a);
            div += (u.values[up * d + a] - u.values[dn * d + a]) / (2.0 * h);
        }
        for c in 0..nc {
            let w = cur.values[node * nc + c];
            let dt = (next.values[node * nc + c] - prev.values[node * nc + c]) / (2.0 * lag);
            let (mut adv, mut lap) = (0.0, 0.0);
            for a in 0..d {
                let (up, dn) = neighbours(g, node, a);
                let (wu, wd) = (cur.values[up * nc + c], cur.values[dn * nc + c]);
                adv += u.values[node * d + a] * (wu - wd) / (2.0 * h);
                lap += (wu - 2.0 * w + wd) / (h * h);
            }
            let r = dt + adv - nu * lap + div * w;
            field.values[node * nc + c] = r;
            ss += r * r;
            sup = sup.max(r.abs());
        }
    }
    Ok(Residual { field, l2: (ss * g.cell_volume()).sqrt(), sup })
}

/// Central-difference divergence over interior nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceReport {
    pub max: f64,
    pub l2: f64,
    /// Largest `|du_a/dx_c|` over the same nodes.
    pub max_gradient: f64,
}

pub fn divergence_check(u: &GridField) -> Result<DivergenceReport> {
    let g = &u.grid;
    let d = g.d;
    if u.ncomp != d {
        return invalid("divergence needs a d-component field");
    }
    let (mut max, mut ss, mut grad) = (0.0f64, 0.0, 0.0f64);
    for node in 0..g.len() {
        if !g.is_interior(node, 1) {
            continue;
        }
        let mut div = 0.0;
        for c in 0..d {
            let (up, dn) = neighbours(g, node, c);
            for a in 0..d {
                let der = (u.values[up * d + a] - u.values[dn * d + a]) / (2.0 * g.h);
                grad = grad.max(der.abs());
                if a == c {
                    div += der;
                }
            }
        }
        max = max.max(div.abs());
        ss += div * div;
    }
    Ok(DivergenceReport { max, l2: (ss * g.cell_volume()).sqrt(), max_gradient: grad })
}

/// Residual of the recovered pair together with a half-sample noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCheck {
    pub residual: Residual,
    /// `|R_even - R_odd|_2 / 2`, the noise in the full-sample residual.
    pub noise: f64,
    pub bandwidth: f64,
    /// `sum omega h^d` at the middle snapshot.
    pub mass: Point,
}

/// Recovers `omega` at three snapshots with one fixed bandwidth, the velocity
/// at the middle one, and the residual for the full sample and both halves.
pub fn residual_check(
    kernel: &SingularKernel,
    lattice: &Lattice,
    states: [&ParticleSystemState; 3],
    grid: &SpaceGrid,
    bandwidth: Bandwidth,
    nu: f64,
) -> Result<ResidualCheck> {
    if let Some(s) = states.iter().find(|s| s.n_copies < 1000) {
        return invalid(format!("vorticity recovery needs >= 1000 copies, got {}", s.n_copies));
    }
    let lag = states[1].t - states[0].t;
    if (states[2].t - states[1].t - lag).abs() > 1e-9 * lag.max(1e-300) {
        return invalid("snapshots must be equally spaced");
    }
    // one bandwidth for all snapshots and halves, fixed from the middle one
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        rule => {
            let active = (0..lattice.len()).find(|&k| lattice.weights[k] != ZERO);
            match active {
                None => 1.0,
                Some(k) => rule.resolve(&states[1].copy_positions(k), grid.d)?[0],
            }
        }
    };
    let fixed = Bandwidth::Fixed(h);
    let run = |ss: [ParticleSystemState; 3]| -> Result<(Residual, GridField)> {
        let w: Vec<GridField> = ss.iter().map(|s| kde_vorticity(lattice, s, grid, fixed)).collect::<Result<_>>()?;
        let u = recover_velocity(&w[1], kernel)?;
        Ok((pde_residual(&w[0], &w[1], &w[2], &u, nu, lag)?, w[1].clone()))
    };
    let (full, mid) = run([states[0].clone(), states[1].clone(), states[2].clone()])?;
    let (even, _) = run([states[0].half(0), states[1].half(0), states[2].half(0)])?;
    let (odd, _) = run([states[0].half(1), states[1].half(1), states[2].half(1)])?;
    let noise = 0.5 * even.field.l2_distance(&odd.field)?;
    Ok(ResidualCheck { residual: full, noise, bandwidth: h, mass: mid.integral() })
}

/// Lamb–Oseen vortex `omega = Gamma/(4 pi nu s) e^{-r^2/(4 nu s)}`, `s = t + t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambOseen {
    pub circulation: f64,
    pub t0: f64,
    pub nu: f64,
}

impl LambOseen {
    fn spread(&self, t: f64) -> f64 {
        4.0 * self.nu * (t + self.t0)
    }

    pub fn vorticity(&self, r: f64, t: f64) -> f64 {
        let s = self.spread(t);
        self.circulation / (PI * s) * (-r * r / s).exp()
    }

    pub fn azimuthal_velocity(&self, r: f64, t: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        self.circulation / (2.0 * PI * r) * -(-r * r / self.spread(t)).exp_m1()
    }

    pub fn velocity(&self, x: &Point, t: f64) -> Point {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if r == 0.0 {
            return ZERO;
        }
        let v = self.azimuthal_velocity(r, t) / r;
        [-v * x[1], v * x[0], 0.0]
    }

    /// `int r^2 omega dx / Gamma = 4 nu (t + t0)`.
    pub fn second_moment(&self, t: f64) -> f64 {
        self.spread(t)
    }
}

/// Errors of recovered fields against the Lamb–Oseen solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambOseenErrors {
    /// `sum |w - w_exact| / sum |w_exact|` over the grid.
    pub omega_l1_rel: f64,
    /// Relative L2 velocity error over nodes with `0.2 <= r <= 3`.
    pub u_l2_rel: f64,
    /// Distance from the vorticity maximum to the origin.
    pub peak_error: f64,
}

pub fn compare_lamb_oseen(omega: &GridField, u: &GridField, exact: &LambOseen, t: f64) -> Result<LambOseenErrors> {
    if omega.grid.d != 2 || u.grid.d != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: omega.grid.d.max(u.grid.d) });
    }
    if omega.ncomp != 1 || u.ncomp != 2 {
        return invalid("expected scalar vorticity and 2-component velocity");
    }
    let (mut num, mut den) = (0.0, 0.0);
    let mut peak = (f64::NEG_INFINITY, ZERO);
    for node in 0..omega.grid.len() {
        let x = omega.grid.node(node);
        let e = exact.vorticity(crate::norm(&x), t);
        let w = omega.values[node];
        num += (w - e).abs();
        den += e.abs();
        if w > peak.0 {
            peak = (w, x);
        }
    }
    let (mut un, mut ud) = (0.0, 0.0);
    for node in 0..u.grid.len() {
        let x = u.grid.node(node);
        let r = crate::norm(&x);
        if !(0.2..=3.0).contains(&r) {
            continue;
        }
        let e = exact.velocity(&x, t);
        let (a, b) = (u.values[2 * node], u.values[2 * node + 1]);
        un += (a - e[0]).powi(2) + (b - e[1]).powi(2);
        ud += e[0] * e[0] + e[1] * e[1];
    }
    Ok(LambOseenErrors {
        omega_l1_rel: num / den,
        u_l2_rel: (un / ud).sqrt(),
        peak_error: crate::norm(&peak.1),
    })
}

/// CSV `r,omega,omega_exact,u_theta,u_exact` of node values averaged in
/// radial bins of width `dr`.
pub fn write_radial_profile<W: Write>(
    omega: &GridField,
    u: &GridField,
    exact: &LambOseen,
    t: f64,
    dr: f64,
    mut w: W,
) -> Result<()> {
    omega.grid.eq(&u.grid).then_some(()).ok_or_else(|| Error::InvalidInput("grid mismatch".into()))?;
    let nbins = (omega.grid.radius / dr).floor() as usize;
    let mut acc = vec![[0.0f64; 5]; nbins];
    let mut count = vec![0usize; nbins];
    for node in 0..omega.grid.len() {
        let x = omega.grid.node(node);
        let r = crate::norm(&x);
        let b = (r / dr).floor() as usize;
        if b >= nbins || r == 0.0 {
            continue;
        }
        let ut = (-x[1] * u.values[2 * node] + x[0] * u.values[2 * node + 1]) / r;
        let row = [r, omega.values[node], exact.vorticity(r, t), ut, exact.azimuthal_velocity(r, t)];
        for (a, v) in acc[b].iter_mut().zip(row) {
            *a += v;
        }
        count[b] += 1;
    }
    writeln!(w, "r,omega,omega_exact,u_theta,u_exact")?;
    for (row, n) in acc.iter().zip(&count) {
        if *n > 0 {
            let avg: Vec<f64> = row.iter().map(|v| v / *n as f64).collect();
            writeln!(w, "{}", csv_row(&avg))?;
        }
    }
    Ok(())
}

/// Weighted mean of `|X|^2` over all particles (2D scalar weights).
pub fn second_radial_moment(lattice: &Lattice, state: &ParticleSystemState) -> f64 {
    let kk = lattice.len();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, x) in state.positions.iter().enumerate() {
        let w = lattice.weights[i % kk][0];
        num += w * crate::norm2(x);
        den += w;
    }
    num / den
}
