//! Euler–Maruyama simulation of `dX = b(X,t) dt + sqrt(2 nu) dB`, Cameron–Martin
//! weights, Feynman–Kac estimators and kernel density estimates.

use std::io::Write;

use rayon::prelude::*;

use crate::drift::{DriftField, GridField, SpaceGrid};
use crate::error::invalid;
use crate::io::{coord_header, csv_row, fmt_num};
use crate::rng::StreamKey;
use crate::stats::{pairwise_sum, Estimate};
use crate::{Error, Point, Result, MAX_DIM, ZERO};

/// Integrator settings shared by every path of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub nu: f64,
    pub dt: f64,
    /// Each solver increment is the sum of this many base increments of
    /// length `dt / substeps`, so runs with different `dt` can share noise.
    pub substeps: u32,
    pub key: StreamKey,
}

impl SimConfig {
    pub fn new(nu: f64, dt: f64, key: StreamKey) -> Self {
        SimConfig { nu, dt, substeps: 1, key }
    }

    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return invalid(format!("viscosity must be positive, got {}", self.nu));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("time step must be positive, got {}", self.dt));
        }
        if self.substeps == 0 {
            return invalid("substeps must be >= 1");
        }
        Ok(())
    }
}

/// Standard Brownian increment over solver step `step` of stream `stream`.
#[inline]
pub fn brownian_increment(key: &StreamKey, stream: u64, step: u64, dt: f64, substeps: u32, d: usize) -> Point {
    let mut out = ZERO;
    let mut xi = [0.0; MAX_DIM];
    let s = (dt / substeps as f64).sqrt();
    for j in 0..substeps as u64 {
        key.normals(stream, step * substeps as u64 + j, &mut xi[..d]);
        for c in 0..d {
            out[c] += s * xi[c];
        }
    }
    out
}

/// The first `n_steps` increments of one stream.
pub fn brownian_increments(key: &StreamKey, stream: u64, n_steps: usize, dt: f64, substeps: u32, d: usize) -> Vec<Point> {
    (0..n_steps as u64).map(|s| brownian_increment(key, stream, s, dt, substeps, d)).collect()
}

/// Solver steps for observation times, validated against the horizon.
pub fn observation_steps(times: &[f64], dt: f64, horizon: f64) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            if !(t >= 0.0) || t > horizon * (1.0 + 1e-12) + 1e-15 {
                return invalid(format!("observation time {t} outside [0, {horizon}]"));
            }
            Ok((t / dt).round() as usize)
        })
        .collect()
}

/// Euler–Maruyama positions of a path at the given (sorted) steps.
#[allow(clippy::too_many_arguments)]
fn euler_path(b: &DriftField, x0: &Point, cfg: &SimConfig, stream: u64, obs_steps: &[usize], out: &mut [Point]) {
    let d = b.dim();
    let sig = (2.0 * cfg.nu).sqrt();
    let mut x = *x0;
    let mut step = 0usize;
    for (o, &target) in obs_steps.iter().enumerate() {
        while step < target {
            let v = b.eval(&x, step as f64 * cfg.dt);
            let db = brownian_increment(&cfg.key, stream, step as u64, cfg.dt, cfg.substeps, d);
            for c in 0..d {
                x[c] += v[c] * cfg.dt + sig * db[c];
            }
            step += 1;
        }
        out[o] = x;
    }
}

/// Positions of many paths at a common set of observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub d: usize,
    pub nu: f64,
    pub dt: f64,
    pub starts: Vec<Point>,
    pub n_per_start: usize,
    /// Observation times snapped to the solver grid.
    pub observe_times: Vec<f64>,
    /// `positions[obs][path]`; path `start_id * n_per_start + m`.
    pub positions: Vec<Vec<Point>>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.starts.len() * self.n_per_start
    }

    /// CSV with columns `path_id,start_id,t,x1..xd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_id,start_id,t,{}", coord_header("x", self.d))?;
        for (o, t) in self.observe_times.iter().enumerate() {
            for (p, x) in self.positions[o].iter().enumerate() {
                writeln!(w, "{},{},{},{}", p, p / self.n_per_start, fmt_num(*t), csv_row(&x[..self.d]))?;
            }
        }
        Ok(())
    }
}

/// Simulates `n_per_start` paths from each start. Path `p` draws its noise
/// from stream `p` of `cfg.key`.
pub fn simulate_paths(
    b: &DriftField,
    starts: &[Point],
    n_per_start: usize,
    observe_times: &[f64],
    cfg: &SimConfig,
) -> Result<PathBatch> {
    cfg.validate()?;
    if n_per_start == 0 || starts.is_empty() {
        return invalid("simulate_paths needs at least one start and one path per start");
    }
    let mut order: Vec<usize> = (0..observe_times.len()).collect();
    let steps = observation_steps(observe_times, cfg.dt, b.time.horizon())?;
    order.sort_by_key(|&i| steps[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| steps[i]).collect();
    let n = starts.len() * n_per_start;
    let per_path: Vec<Vec<Point>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut out = vec![ZERO; sorted.len()];
            euler_path(b, &starts[p / n_per_start], cfg, p as u64, &sorted, &mut out);
            out
        })
        .collect();
    let mut positions = vec![vec![ZERO; n]; observe_times.len()];
    for (p, obs) in per_path.into_iter().enumerate() {
        for (k, &i) in order.iter().enumerate() {
            positions[i][p] = obs[k];
        }
    }
    Ok(PathBatch {
        d: b.dim(),
        nu: cfg.nu,
        dt: cfg.dt,
        starts: starts.to_vec(),
        n_per_start,
        observe_times: steps.iter().map(|&s| s as f64 * cfg.dt).collect(),
        positions,
    })
}

/// Cameron–Martin density `R = e^N` of one Brownian path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CMWeight {
    pub value: f64,
    pub log_value: f64,
    /// `int b~ . dB`.
    pub stochastic: f64,
    /// `int |b~|^2 dr` (enters `N` with factor `-1/2`).
    pub quadratic: f64,
}

/// Left-point discretization of `N = int_tau^t b~(r, W_r) dB_r - 1/2 int |b~|^2 dr`
/// with `W_r = x + sqrt(2 nu)(B_r - B_tau)` and `b~ = b / sqrt(2 nu)`.
///
/// `increments[s]` is the standard Brownian increment over
/// `[tau + s dt, tau + (s+1) dt]`.
pub fn cameron_martin_weight(
    increments: &[Point],
    dt: f64,
    b: &DriftField,
    tau: f64,
    x: &Point,
    t: f64,
    nu: f64,
) -> Result<CMWeight> {
    let n = ((t - tau) / dt).round() as usize;
    if increments.len() < n {
        return invalid(format!("path has {} increments, {n} needed", increments.len()));
    }
    let d = b.dim();
    let sig = (2.0 * nu).sqrt();
    let mut w = *x;
    let (mut stoch, mut quad) = (0.0, 0.0);
    for (s, db) in increments.iter().take(n).enumerate() {
        let v = b.eval(&w, tau + s as f64 * dt);
        for c in 0..d {
            let bt = v[c] / sig;
            stoch += bt * db[c];
            quad += bt * bt * dt;
            w[c] += sig * db[c];
        }
    }
    let log_value = stoch - 0.5 * quad;
    Ok(CMWeight { value: log_value.exp(), log_value, stochastic: stoch, quadratic: quad })
}

/// `E[R f(x + sqrt(2 nu)(B_t - B_tau))]`, which equals `E f(X_t)` for the
/// diffusion started at `x` at time `tau`.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_expectation<F>(
    f: F,
    b: &DriftField,
    tau: f64,
    x: &Point,
    t: f64,
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<Estimate>
where
    F: Fn(&Point) -> f64 + Sync,
{
    cfg.validate()?;
    if n_paths < 100 {
        return invalid(format!("at least 100 paths needed, got {n_paths}"));
    }
    let d = b.dim();
    let n = ((t - tau) / cfg.dt).round() as usize;
    let sig = (2.0 * cfg.nu).sqrt();
    let values: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let inc = brownian_increments(&cfg.key, p, n, cfg.dt, cfg.substeps, d);
            let r = cameron_martin_weight(&inc, cfg.dt, b, tau, x, t, cfg.nu).expect("increments cover [tau, t]");
            let mut end = *x;
            for db in &inc {
                for c in 0..d {
                    end[c] += sig * db[c];
                }
            }
            r.value * f(&end)
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Kernel bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `multiplier * sigma_hat_i * n^{-1/(d+4)}` per coordinate.
    RuleOfThumb { multiplier: f64 },
    Fixed(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::RuleOfThumb { multiplier: 1.0 }
    }
}

impl Bandwidth {
    /// Per-coordinate bandwidths for a sample; zero-variance samples are rejected.
    pub fn resolve(&self, samples: &[Point], d: usize) -> Result<Point> {
        let n = samples.len();
        let mut h = ZERO;
        for c in 0..d {
            let col: Vec<f64> = samples.iter().map(|p| p[c]).collect();
            let var = crate::stats::sample_variance(&col);
            if !(var > 0.0) {
                return Err(Error::Degenerate(format!("coordinate {} of the sample has zero variance", c + 1)));
            }
            h[c] = match *self {
                Bandwidth::RuleOfThumb { multiplier } => multiplier * var.sqrt() * (n as f64).powf(-1.0 / (d as f64 + 4.0)),
                Bandwidth::Fixed(v) => v,
            };
            if !(h[c] > 0.0 && h[c].is_finite()) {
                return Err(Error::Degenerate(format!("bandwidth {} is not positive", h[c])));
            }
        }
        Ok(h)
    }
}

const KDE_CHUNK: usize = 2048;

/// Accumulates `sum_i w_i prod_c phi_{h_c}(x_c - X_{i,c})` on the grid nodes.
///
/// Work is split into fixed chunks reduced in chunk order, so the result does
/// not depend on the thread count. With `truncate = Some(k)`, kernel tails
/// beyond `k h` are dropped.
pub fn kde_accumulate(grid: &SpaceGrid, samples: &[Point], weights: &[f64], h: &Point, truncate: Option<f64>) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = samples
        .par_chunks(KDE_CHUNK)
        .zip(weights.par_chunks(KDE_CHUNK))
        .map(|(xs, ws)| {
            let mut acc = vec![0.0; grid.len()];
            kde_add(grid, xs, ws, h, truncate, &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; grid.len()];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Sequential kernel sum of `samples` into `acc` (one value per grid node).
pub fn kde_add(grid: &SpaceGrid, xs: &[Point], ws: &[f64], h: &Point, truncate: Option<f64>, acc: &mut [f64]) {
    let d = grid.d;
    let n = grid.n;
    let mut k = vec![[0.0; MAX_DIM]; n];
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    for (x, &w) in xs.iter().zip(ws) {
        if w == 0.0 {
            continue;
        }
        let mut empty = false;
        for c in 0..d {
            let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h[c]);
            let (a, b) = match truncate {
                Some(m) => {
                    let s0 = ((x[c] - m * h[c] + grid.radius) / grid.h).ceil().max(0.0);
                    let s1 = ((x[c] + m * h[c] + grid.radius) / grid.h).floor().min((n - 1) as f64);
                    if s1 < s0 {
                        empty = true;
                        (0, 0)
                    } else {
                        (s0 as usize, s1 as usize + 1)
                    }
                }
                None => (0, n),
            };
            lo[c] = a;
            hi[c] = b;
            for (j, kj) in k.iter_mut().enumerate().take(b).skip(a) {
                let z = (grid.coord(j) - x[c]) / h[c];
                kj[c] = norm * (-0.5 * z * z).exp();
            }
        }
        if empty {
            continue;
        }
        match d {
            1 => {
                for j0 in lo[0]..hi[0] {
                    acc[j0] += w * k[j0][0];
                }
            }
            2 => {
                for j1 in lo[1]..hi[1] {
                    let w1 = w * k[j1][1];
                    let row = &mut acc[j1 * n..(j1 + 1) * n];
                    for j0 in lo[0]..hi[0] {
                        row[j0] += w1 * k[j0][0];
                    }
                }
            }
            _ => {
                for j2 in lo[2]..hi[2] {
                    let w2 = w * k[j2][2];
                    for j1 in lo[1]..hi[1] {
                        let w1 = w2 * k[j1][1];
                        let off = (j2 * n + j1) * n;
                        for j0 in lo[0]..hi[0] {
                            acc[off + j0] += w1 * k[j0][0];
                        }
                    }
                }
            }
        }
    }
}

/// Gaussian-product KDE of the batch's positions at observation `obs` over
/// `grid`, with the bandwidth actually used.
pub fn density_kde(batch: &PathBatch, obs: usize, grid: &SpaceGrid, bandwidth: Bandwidth) -> Result<(GridField, Point)> {
    if grid.d != batch.d {
        return Err(Error::DimensionMismatch { expected: batch.d, got: grid.d });
    }
    let samples = batch
        .positions
        .get(obs)
        .ok_or_else(|| Error::InvalidInput(format!("no observation {obs}")))?;
    if samples.len() < 1000 {
        return invalid(format!("density_kde needs >= 1000 paths, got {}", samples.len()));
    }
    let h = bandwidth.resolve(samples, batch.d)?;
    let w = vec![1.0 / samples.len() as f64; samples.len()];
    let values = kde_accumulate(grid, samples, &w, &h, None);
    Ok((GridField { grid: grid.clone(), t: batch.observe_times[obs], ncomp: 1, values }, h))
}

/// Sample mean of one coordinate across a batch observation.
pub fn coordinate_estimate(batch: &PathBatch, obs: usize, c: usize) -> Estimate {
    let col: Vec<f64> = batch.positions[obs].iter().map(|p| p[c]).collect();
    Estimate::from_samples(&col)
}

/// Sample variance of one coordinate with its standard error
/// (`sqrt((m4 - s^4) / n)`).
pub fn variance_estimate(batch: &PathBatch, obs: usize, c: usize) -> Estimate {
    let col: Vec<f64> = batch.positions[obs].iter().map(|p| p[c]).collect();
    let n = col.len() as f64;
    let mean = pairwise_sum(&col) / n;
    let sq: Vec<f64> = col.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    let q: Vec<f64> = sq.iter().map(|s| s * s).collect();
    let m4 = pairwise_sum(&q) / n;
    Estimate { estimate: var, std_error: ((m4 - var * var).max(0.0) / n).sqrt() }
}

/// The map between engine units (`sqrt(2 nu) dB`) and unit-diffusion units
/// (`dB`): `X = sqrt(2 nu) Y`, `b = sqrt(2 nu) b~`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionScaling {
    pub nu: f64,
}

impl DiffusionScaling {
    fn s(&self) -> f64 {
        (2.0 * self.nu).sqrt()
    }
    pub fn to_unit(&self, v: &Point) -> Point {
        crate::scale(v, 1.0 / self.s())
    }
    pub fn from_unit(&self, v: &Point) -> Point {
        crate::scale(v, self.s())
    }
}
