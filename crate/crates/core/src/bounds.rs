//! Explicit structure constants, heat-kernel envelopes and Monte Carlo audits
//! of the singular-integral estimates.
//!
//! Everything here is in unit-diffusion units: `dX = b dt + dB`.

use std::f64::consts::PI;

use crate::drift::DriftField;
use crate::error::invalid;
use crate::quad::{gamma, gaussian_sphere_average, integrate};
use crate::rng::StreamKey;
use crate::stats::Estimate;
use crate::{check_dim, norm, Point, Result, MAX_DIM, ZERO};

/// `Vol(S^{d-1}) = 2 pi^{d/2} / Gamma(d/2)`.
pub fn sphere_surface(d: usize) -> Result<f64> {
    if d == 0 {
        return invalid("sphere_surface needs d >= 1");
    }
    let h = 0.5 * d as f64;
    Ok(2.0 * PI.powf(h) / gamma(h))
}

/// Upper end of the admissible `q` range, `d / (d - 1)` (infinite for `d = 1`).
pub fn q_upper(d: usize) -> f64 {
    if d == 1 {
        f64::INFINITY
    } else {
        d as f64 / (d as f64 - 1.0)
    }
}

/// Midpoint of `(1, d/(d-1))`; `2` when `d = 1`.
pub fn default_q(d: usize) -> f64 {
    if d == 1 {
        2.0
    } else {
        0.5 * (1.0 + q_upper(d))
    }
}

/// `(1 + d/gamma1)/2`, or `2` when `gamma1 = 0`.
pub fn default_alpha(d: usize, gamma1: f64) -> f64 {
    if gamma1 > 0.0 {
        0.5 * (1.0 + d as f64 / gamma1)
    } else {
        2.0
    }
}

/// `(2 beta)^beta`.
pub fn default_c_beta(beta: f64) -> f64 {
    (2.0 * beta).powf(beta)
}

fn check_q(d: usize, q: f64) -> Result<()> {
    if !(q > 1.0 && q < q_upper(d)) {
        return invalid(format!("q must lie in (1, {}), got {q}", q_upper(d)));
    }
    Ok(())
}

/// `int (1 + |y|) (2 pi)^{-d/2} e^{-|y|^2 / (2q)} dy` in closed form.
pub fn gaussian_moment_integral(d: usize, q: f64) -> f64 {
    let h = 0.5 * d as f64;
    q.powf(h) * (1.0 + (2.0 * q).sqrt() * gamma(h + 0.5) / gamma(h))
}

/// The same integral by radial quadrature.
pub fn gaussian_moment_integral_quadrature(d: usize, q: f64) -> Result<f64> {
    let s = sphere_surface(d)?;
    let c = (2.0 * PI).powf(-0.5 * d as f64);
    let upper = 60.0 * q.sqrt();
    let radial = integrate(
        |r: f64| (1.0 + r) * r.powi(d as i32 - 1) * (-r * r / (2.0 * q)).exp(),
        0.0,
        upper,
        1e-15,
        1e-13,
    );
    Ok(s * c * radial)
}

/// `kappa1 = max{Vol(S^{d-1}), kappa * int (1+|y|) (2pi)^{-d/2} e^{-|y|^2/(2q)} dy}`.
pub fn kappa1(d: usize, q: f64, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_q(d, q)?;
    if !(kappa > 0.0) {
        return invalid(format!("kappa must be positive, got {kappa}"));
    }
    Ok(sphere_surface(d)?.max(kappa * gaussian_moment_integral(d, q)))
}

/// [`kappa1`] with the integral evaluated by quadrature.
pub fn kappa1_quadrature(d: usize, q: f64, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    check_q(d, q)?;
    if !(kappa > 0.0) {
        return invalid(format!("kappa must be positive, got {kappa}"));
    }
    Ok(sphere_surface(d)?.max(kappa * gaussian_moment_integral_quadrature(d, q)?))
}

/// `kappa1`, `C_K` and `T_K = 1/C_K^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    pub kappa1: f64,
    pub c_k: f64,
    /// Infinite when `C_K = 0` (no interaction).
    pub t_k: f64,
}

impl KernelConstants {
    pub fn t_k_unbounded(&self) -> bool {
        self.t_k.is_infinite()
    }
}

/// `C_K = C0 (kappa1 C_inf / (d - gamma1) (1 + e^{1/(2(q-1))}) + C1)`.
pub fn structure_constants(
    c0: f64,
    c1: f64,
    cinf: f64,
    gamma1: f64,
    d: usize,
    q: f64,
    kappa: f64,
) -> Result<KernelConstants> {
    check_dim(d)?;
    if !(0.0..d as f64).contains(&gamma1) {
        return invalid(format!("gamma1 must lie in [0, {d}), got {gamma1}"));
    }
    if !(c0 >= 0.0 && c1 >= 0.0 && cinf >= 0.0) {
        return invalid("C0, C1 and Cinf must be nonnegative");
    }
    let k1 = kappa1(d, q, kappa)?;
    let c_k = c0 * (k1 * cinf / (d as f64 - gamma1) * (1.0 + (1.0 / (2.0 * (q - 1.0))).exp()) + c1);
    let t_k = if c_k == 0.0 { f64::INFINITY } else { 1.0 / (c_k * c_k) };
    Ok(KernelConstants { kappa1: k1, c_k, t_k })
}

/// User-facing inputs; `None` selects the default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantInputs {
    pub d: usize,
    pub c0: f64,
    pub c1: f64,
    pub cinf: f64,
    pub gamma1: f64,
    pub q: Option<f64>,
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
    pub c_beta: Option<f64>,
}

/// Every explicit constant of the existence theory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureConstants {
    pub d: usize,
    pub q: f64,
    pub kappa: f64,
    pub kappa1: f64,
    pub c0: f64,
    pub c1: f64,
    pub cinf: f64,
    pub gamma1: f64,
    pub c_k: f64,
    pub t_k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c_beta: f64,
    pub c_l: f64,
    pub t_l_derived: f64,
    pub t_l_paper_literal: f64,
}

/// `C_L` and the two readings of `T_L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lipschitz {
    pub c_l: f64,
    /// `min(T_K, sup{t : (t + sqrt t) C_L <= 1/2})`.
    pub t_l_derived: f64,
    /// `min(C_L / 4, 1)`, for reference.
    pub t_l_paper_literal: f64,
}

impl StructureConstants {
    pub fn new(inp: &ConstantInputs) -> Result<Self> {
        let d = inp.d;
        check_dim(d)?;
        let q = inp.q.unwrap_or_else(|| default_q(d));
        let kappa = inp.kappa.unwrap_or(1.0);
        let kc = structure_constants(inp.c0, inp.c1, inp.cinf, inp.gamma1, d, q, kappa)?;
        let alpha = inp.alpha.unwrap_or_else(|| default_alpha(d, inp.gamma1));
        if !(alpha > 1.0) {
            return invalid(format!("alpha must exceed 1, got {alpha}"));
        }
        let beta = alpha / (alpha - 1.0);
        let c_beta = inp.c_beta.unwrap_or_else(|| default_c_beta(beta));
        if !(c_beta > 0.0) || inp.c_beta.is_some_and(|c| !c.is_finite()) {
            return invalid(format!("C_beta must be positive, got {c_beta}"));
        }
        let mut sc = StructureConstants {
            d,
            q,
            kappa,
            kappa1: kc.kappa1,
            c0: inp.c0,
            c1: inp.c1,
            cinf: inp.cinf,
            gamma1: inp.gamma1,
            c_k: kc.c_k,
            t_k: kc.t_k,
            alpha,
            beta,
            c_beta,
            c_l: 0.0,
            t_l_derived: 0.0,
            t_l_paper_literal: 0.0,
        };
        let lip = lipschitz_constant(&sc)?;
        sc.c_l = lip.c_l;
        sc.t_l_derived = lip.t_l_derived;
        sc.t_l_paper_literal = lip.t_l_paper_literal;
        Ok(sc)
    }

    /// `(name, value)` pairs in reporting order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("d", self.d as f64),
            ("q", self.q),
            ("kappa", self.kappa),
            ("kappa1", self.kappa1),
            ("C0", self.c0),
            ("C1", self.c1),
            ("Cinf", self.cinf),
            ("gamma1", self.gamma1),
            ("C_K", self.c_k),
            ("T_K", self.t_k),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("C_beta", self.c_beta),
            ("C_L", self.c_l),
            ("T_L_derived", self.t_l_derived),
            ("T_L_paper_literal", self.t_l_paper_literal),
        ]
    }
}

/// The three-term Lipschitz constant and the admissible horizons.
pub fn lipschitz_constant(sc: &StructureConstants) -> Result<Lipschitz> {
    let (d, a, g1) = (sc.d as f64, sc.alpha, sc.gamma1);
    if !(a > 1.0) {
        return invalid(format!("alpha must exceed 1, got {a}"));
    }
    if a * g1 >= d {
        return invalid(format!("alpha * gamma1 = {} must be below d = {d}", a * g1));
    }
    let beta = a / (a - 1.0);
    let eq = (1.0 / (2.0 * (sc.q - 1.0))).exp();
    let lead = sc.c0 * sc.c1;
    let t1 = if lead == 0.0 { 0.0 } else { lead * ((a * a - 1.0) / 4.0).exp() * (sc.c_k + 1.0) };
    let t2 = sc.c0 * sc.cinf * sc.c_k * sc.kappa1 * (1.0 + eq) / (d - g1);
    let t3 = if lead == 0.0 {
        0.0
    } else {
        // in logs: e^{a^2/(2(q-1))} overflows for large alpha
        let x = a * a / (2.0 * (sc.q - 1.0));
        let ln_inner = sc.kappa1.ln() + x + (a + (-x).exp()).ln() - (d - a * g1).ln();
        // (2 beta)^beta overflows as alpha -> 1; its beta-th root is 2 beta
        let ln_root = if sc.c_beta.is_finite() { sc.c_beta.ln() / beta } else { (2.0 * beta).ln() };
        (sc.c0.ln() + sc.c1.ln() / beta + ln_root + (a * a - 1.0) / (2.0 * a) + ln_inner / a).exp()
    };
    let c_l = t1 + t2 + t3;
    let t_l_derived = if c_l == 0.0 {
        sc.t_k
    } else {
        // sqrt t solves s^2 + s = 1/(2 C_L); rationalised root
        let s = 1.0 / (c_l * (1.0 + (1.0 + 2.0 / c_l).sqrt()));
        (s * s).min(sc.t_k)
    };
    Ok(Lipschitz { c_l, t_l_derived, t_l_paper_literal: (0.25 * c_l).min(1.0) })
}

/// Gaussian transition density `(2 pi t)^{-d/2} e^{-r^2/(2t)}`.
pub fn gaussian_density(d: usize, t: f64, r: f64) -> f64 {
    (-r * r / (2.0 * t)).exp() / (2.0 * PI * t).powf(0.5 * d as f64)
}

/// Sharp upper bound on the transition density of a diffusion with `|b| <= A`.
pub fn sharp_density_bound(a: f64, t: f64, r: f64, sc: &StructureConstants) -> f64 {
    sharp_density_bound_with(a, t, r, sc.d, sc.q, sc.kappa)
}

pub fn sharp_density_bound_with(a: f64, t: f64, r: f64, d: usize, q: f64, kappa: f64) -> f64 {
    let g = gaussian_density(d, t, r);
    if a == 0.0 {
        return g;
    }
    let ex = (q - 1.0) * r * r / (2.0 * q * t) + a * a * t / (2.0 * (q - 1.0));
    g * (1.0 + kappa * a * (t.sqrt() + r) * ex.exp())
}

/// Density of `x + A e t + B_t` at distance `r` from `x` along `e`.
pub fn constant_drift_density(d: usize, a: f64, t: f64, r: f64) -> f64 {
    let s = r - a * t;
    (-s * s / (2.0 * t)).exp() / (2.0 * PI * t).powf(0.5 * d as f64)
}

/// Smallest `kappa` for which the sharp bound dominates the exact
/// constant-drift density on the grid (0 when any `kappa` works).
pub fn calibrate_kappa(a: f64, q: f64, ts: &[f64], rs: &[f64]) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let mut k: f64 = 0.0;
    for &t in ts {
        for &r in rs {
            // p / g = e^{rA - A^2 t/2}; bound / g = 1 + kappa A (sqrt t + r) e^{...}
            let excess = (r * a - 0.5 * a * a * t).exp_m1();
            if excess <= 0.0 {
                continue;
            }
            let ex = (q - 1.0) * r * r / (2.0 * q * t) + a * a * t / (2.0 * (q - 1.0));
            k = k.max(excess / (a * (t.sqrt() + r) * ex.exp()));
        }
    }
    k
}

/// Lower and upper two-sided Gaussian envelopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub lower: f64,
    pub upper: f64,
}

/// `(1/(M t^{d/2})) e^{-M r^2/t}` and `(M/t^{d/2}) e^{-r^2/(M t)}`.
pub fn aronson_envelope(m: f64, t: f64, r: f64, d: usize) -> Result<Envelope> {
    if !(m >= 1.0) {
        return invalid(format!("Aronson constant must be >= 1, got {m}"));
    }
    if !(t > 0.0) {
        return invalid(format!("time must be positive, got {t}"));
    }
    let td = t.powf(0.5 * d as f64);
    Ok(Envelope {
        lower: (-m * r * r / t).exp() / (m * td),
        upper: m / td * (-r * r / (m * t)).exp(),
    })
}

fn inside(m: f64, d: usize, ts: &[f64], rs: &[f64], density: &dyn Fn(f64, f64) -> f64) -> bool {
    ts.iter().all(|&t| {
        rs.iter().all(|&r| {
            let e = aronson_envelope(m, t, r, d).expect("m >= 1, t > 0");
            let p = density(t, r);
            e.lower <= p && p <= e.upper
        })
    })
}

/// Smallest `M >= 1` (to relative `1e-12`) whose envelope contains
/// `density(t, r)` on the grid, by bisection. Fails if none up to `1e6` does.
pub fn calibrate_aronson_m(d: usize, ts: &[f64], rs: &[f64], density: &dyn Fn(f64, f64) -> f64) -> Result<f64> {
    if inside(1.0, d, ts, rs, density) {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while !inside(hi, d, ts, rs, density) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return invalid("no Aronson constant up to 1e6 contains the density");
        }
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if inside(mid, d, ts, rs, density) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Outcome of one audited inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub lhs_estimate: f64,
    pub lhs_std_error: f64,
    pub rhs_bound: f64,
    pub satisfied: bool,
    /// `rhs - lhs`.
    pub margin: f64,
}

impl BoundReport {
    pub fn new(lhs: f64, se: f64, rhs: f64) -> Self {
        BoundReport {
            lhs_estimate: lhs,
            lhs_std_error: se,
            rhs_bound: rhs,
            satisfied: lhs - 3.0 * se <= rhs,
            margin: rhs - lhs,
        }
    }
}

/// Worst point of the sharp bound against the exact constant-drift density.
pub fn audit_sharp_bound(a: f64, sc: &StructureConstants, ts: &[f64], rs: &[f64]) -> BoundReport {
    let mut worst: Option<BoundReport> = None;
    for &t in ts {
        for &r in rs {
            let rep = BoundReport::new(constant_drift_density(sc.d, a, t, r), 0.0, sharp_density_bound(a, t, r, sc));
            if worst.is_none_or(|w| rep.margin < w.margin) {
                worst = Some(rep);
            }
        }
    }
    worst.unwrap_or(BoundReport::new(0.0, 0.0, 0.0))
}

/// Worst side of the Aronson sandwich for `density(t, r)`.
///
/// Each point contributes two reports, `lower <= p` and `p <= upper`; the
/// one with the smallest margin is returned.
pub fn audit_aronson(
    m: f64,
    d: usize,
    ts: &[f64],
    rs: &[f64],
    density: &dyn Fn(f64, f64) -> f64,
) -> Result<BoundReport> {
    let mut worst: Option<BoundReport> = None;
    for &t in ts {
        for &r in rs {
            let e = aronson_envelope(m, t, r, d)?;
            let p = density(t, r);
            for rep in [BoundReport::new(e.lower, 0.0, p), BoundReport::new(p, 0.0, e.upper)] {
                if worst.is_none_or(|w| rep.margin < w.margin) {
                    worst = Some(rep);
                }
            }
        }
    }
    Ok(worst.unwrap_or(BoundReport::new(0.0, 0.0, 0.0)))
}

/// Test integrands `f` for the I/J audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarField {
    Zero,
    /// `height * 1{|y| < radius}`.
    BallIndicator { radius: f64, height: f64 },
    /// `amp * e^{-|y|^2/(2 sigma^2)}`, sampled on `|y_i| <= 8 sigma`.
    Gaussian { amp: f64, sigma: f64 },
}

impl ScalarField {
    pub fn value(&self, y: &Point) -> f64 {
        match *self {
            ScalarField::Zero => 0.0,
            ScalarField::BallIndicator { radius, height } => {
                if norm(y) < radius {
                    height
                } else {
                    0.0
                }
            }
            ScalarField::Gaussian { amp, sigma } => amp * (-crate::norm2(y) / (2.0 * sigma * sigma)).exp(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match *self {
            ScalarField::Zero => 0.0,
            ScalarField::BallIndicator { height, .. } => height.abs(),
            ScalarField::Gaussian { amp, .. } => amp.abs(),
        }
    }

    pub fn l1_norm(&self, d: usize) -> f64 {
        match *self {
            ScalarField::Zero => 0.0,
            ScalarField::BallIndicator { radius, height } => {
                height.abs() * sphere_surface(d).unwrap_or(0.0) * radius.powi(d as i32) / d as f64
            }
            ScalarField::Gaussian { amp, sigma } => amp.abs() * (2.0 * PI * sigma * sigma).powf(0.5 * d as f64),
        }
    }

    /// Half-width of the sampling box.
    pub fn support_half_width(&self) -> f64 {
        match *self {
            ScalarField::Zero => 1.0,
            ScalarField::BallIndicator { radius, .. } => radius,
            ScalarField::Gaussian { sigma, .. } => 8.0 * sigma,
        }
    }
}

/// Monte Carlo settings for the I/J audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub n_samples: usize,
    /// Euler step of the simulated diffusion.
    pub dt: f64,
    pub key: StreamKey,
}

/// Per-sample `(|f(y)| * box volume, distance from x to the Gaussian mean of
/// the final step, variance of the final step)`.
fn endpoint_samples(
    f: &ScalarField,
    d: usize,
    x: &Point,
    t: f64,
    b: Option<&DriftField>,
    mc: &McParams,
) -> Vec<(f64, f64, f64)> {
    use rayon::prelude::*;
    let w = f.support_half_width();
    let vol = (2.0 * w).powi(d as i32);
    let n_steps = ((t / mc.dt).round() as usize).max(1);
    let dt = t / n_steps as f64;
    (0..mc.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut u = [0.0; MAX_DIM];
            mc.key.uniforms(i, 0, &mut u[..d]);
            let mut y = ZERO;
            for c in 0..d {
                y[c] = -w + 2.0 * w * u[c];
            }
            let weight = f.value(&y).abs() * vol;
            if weight == 0.0 {
                return (0.0, 0.0, t);
            }
            let (mean, var) = match b {
                None => (y, t),
                Some(b) => {
                    let mut z = y;
                    let mut xi = [0.0; MAX_DIM];
                    for s in 0..n_steps - 1 {
                        let v = b.eval(&z, s as f64 * dt);
                        mc.key.normals(i, s as u64 + 1, &mut xi[..d]);
                        for c in 0..d {
                            z[c] += v[c] * dt + dt.sqrt() * xi[c];
                        }
                    }
                    let v = b.eval(&z, (n_steps - 1) as f64 * dt);
                    (crate::add(&z, &crate::scale(&v, dt)), dt)
                }
            };
            (weight, norm(&crate::sub(x, &mean)), var)
        })
        .collect()
}

fn report_from(values: &[f64], rhs: f64) -> BoundReport {
    let e = Estimate::from_samples(values);
    BoundReport::new(e.estimate, e.std_error, rhs)
}

fn check_mc(mc: &McParams, gamma: f64, rho: f64, t: f64) -> Result<()> {
    if mc.n_samples < 100 {
        return invalid(format!("at least 100 Monte Carlo samples needed, got {}", mc.n_samples));
    }
    if !(rho > 0.0 && t > 0.0 && gamma >= 0.0 && mc.dt > 0.0) {
        return invalid("audit needs rho > 0, t > 0, gamma >= 0 and dt > 0");
    }
    Ok(())
}

/// Audits `I(f,x,t,rho,gamma) <= rho^{d-gamma}/(d-gamma) kappa1 |f|_inf (1 + A sqrt t e^{A^2 t/(2(q-1))})`.
///
/// `y` is sampled uniformly in the support box of `f`; the diffusion is
/// simulated to the last step and the final Gaussian step is integrated
/// exactly over the ball `|z| < rho`. `A` is the recorded sup of `b`.
#[allow(clippy::too_many_arguments)]
pub fn verify_i_bound(
    f: &ScalarField,
    x: &Point,
    t: f64,
    rho: f64,
    gamma: f64,
    b: Option<&DriftField>,
    sc: &StructureConstants,
    mc: &McParams,
) -> Result<BoundReport> {
    check_mc(mc, gamma, rho, t)?;
    let d = sc.d;
    if gamma >= d as f64 {
        return invalid(format!("gamma must lie in [0, {d}), got {gamma}"));
    }
    let p = d as f64 - gamma;
    let pref = rho.powf(p) / p;
    let samples = endpoint_samples(f, d, x, t, b, mc);
    let values: Vec<f64> = samples
        .iter()
        .map(|&(w, a, s)| {
            if w == 0.0 {
                return 0.0;
            }
            // r = rho u^{1/(d-gamma)} turns r^{d-1-gamma} dr into pref du
            let inner = integrate(|u: f64| gaussian_sphere_average(d, a, rho * u.powf(1.0 / p), s), 0.0, 1.0, 1e-14, 1e-9);
            w * pref * inner
        })
        .collect();
    let a = b.map_or(0.0, DriftField::sup_norm);
    let rhs = pref * sc.kappa1 * f.sup_norm() * (1.0 + a * t.sqrt() * (a * a * t / (2.0 * (sc.q - 1.0))).exp());
    Ok(report_from(&values, rhs))
}

/// Audits `J(f,x,t,rho,gamma) <= |f|_1 / rho^gamma`.
#[allow(clippy::too_many_arguments)]
pub fn verify_j_bound(
    f: &ScalarField,
    x: &Point,
    t: f64,
    rho: f64,
    gamma: f64,
    b: Option<&DriftField>,
    d: usize,
    mc: &McParams,
) -> Result<BoundReport> {
    check_mc(mc, gamma, rho, t)?;
    check_dim(d)?;
    let samples = endpoint_samples(f, d, x, t, b, mc);
    let values: Vec<f64> = samples
        .iter()
        .map(|&(w, a, s)| {
            if w == 0.0 {
                return 0.0;
            }
            let top = a + 12.0 * s.sqrt();
            if top <= rho {
                return 0.0;
            }
            let radial = |r: f64| r.powf(d as f64 - 1.0 - gamma) * gaussian_sphere_average(d, a, r, s);
            // split at the mode so the adaptive rule sees the peak
            let mid = a.clamp(rho, top);
            w * (integrate(radial, rho, mid, 1e-15, 1e-10) + integrate(radial, mid, top, 1e-15, 1e-10))
        })
        .collect();
    Ok(report_from(&values, f.l1_norm(d) / rho.powf(gamma)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn example() -> StructureConstants {
        StructureConstants::new(&ConstantInputs {
            d: 2,
            c0: 1.0,
            c1: 1.0,
            cinf: 1.0,
            gamma1: 1.0,
            q: Some(1.5),
            kappa: Some(1.0),
            alpha: None,
            c_beta: None,
        })
        .unwrap()
    }

    #[test]
    fn sphere_surfaces() {
        assert_relative_eq!(sphere_surface(1).unwrap(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(sphere_surface(2).unwrap(), 2.0 * PI, max_relative = 1e-15);
        assert_relative_eq!(sphere_surface(3).unwrap(), 4.0 * PI, max_relative = 1e-14);
        assert!(sphere_surface(0).is_err());
    }

    #[test]
    fn kappa1_example_values() {
        // 1.5 (1 + sqrt(3) sqrt(pi) / 2)
        let integral = 1.5 * (1.0 + 3f64.sqrt() * PI.sqrt() / 2.0);
        assert_relative_eq!(gaussian_moment_integral(2, 1.5), integral, max_relative = 1e-14);
        assert!((integral - 3.8024).abs() < 1e-4);
        assert_relative_eq!(kappa1(2, 1.5, 1.0).unwrap(), 2.0 * PI, max_relative = 1e-15);
        assert_relative_eq!(kappa1(2, 1.5, 1e-9).unwrap(), 2.0 * PI, max_relative = 1e-15);
        // d = 3: q^{3/2} (1 + sqrt(2q) Gamma(2)/Gamma(3/2)) = q^{3/2} (1 + 2 sqrt(2q/pi))
        let q: f64 = 1.2;
        let closed = 10.0 * q.powf(1.5) * (1.0 + 2.0 * (2.0 * q / PI).sqrt());
        assert_relative_eq!(kappa1(3, q, 10.0).unwrap(), closed, max_relative = 1e-13);
        assert!(kappa1(2, 2.0, 1.0).is_err());
        assert!(kappa1(2, 1.0, 1.0).is_err());
    }

    #[test]
    fn constants_reproduce_hand_oracle() {
        let sc = example();
        let c_k = 2.0 * PI * (1.0 + E) + 1.0;
        assert_relative_eq!(sc.kappa1, 2.0 * PI, max_relative = 1e-12);
        assert_relative_eq!(sc.c_k, c_k, max_relative = 1e-12);
        assert_relative_eq!(sc.t_k, 1.0 / (c_k * c_k), max_relative = 1e-12);
        assert!((sc.c_k - 24.3626).abs() < 1e-3);
        assert!((sc.t_k - 1.6848e-3).abs() < 1e-7);
        assert_eq!(sc.alpha, 1.5);
        assert_eq!(sc.beta, 3.0);
        assert_eq!(sc.c_beta, 216.0);
    }

    #[test]
    fn lipschitz_matches_term_by_term_oracle() {
        let sc = example();
        // alpha = 3/2, beta = 3, C_beta = 216, q = 3/2, kappa1 = 2 pi
        let t1 = (5.0f64 / 8.0).exp().sqrt() * (sc.c_k + 1.0);
        let t2 = sc.c_k * 2.0 * PI * (1.0 + E);
        let t3 = 216f64.cbrt() * (5.0f64 / 12.0).exp() * (2.0 * PI * (1.0 + 1.5 * 2.25f64.exp()) / 0.5).powf(2.0 / 3.0);
        assert_relative_eq!(sc.c_l, t1 + t2 + t3, max_relative = 1e-13);
        let s = sc.t_l_derived.sqrt();
        assert!((sc.t_l_derived + s) * sc.c_l <= 0.5 + 1e-12);
        assert!(((sc.t_l_derived + s) * sc.c_l - 0.5).abs() < 1e-12 || sc.t_l_derived == sc.t_k);
        assert_eq!(sc.t_l_paper_literal, 1.0);
    }

    #[test]
    fn lamb_oseen_constants() {
        let sc = StructureConstants::new(&ConstantInputs {
            d: 2,
            c0: 1.0 / (2.0 * PI),
            c1: 1.0,
            cinf: 1.0 / (2.0 * PI),
            gamma1: 1.0,
            q: None,
            kappa: None,
            alpha: None,
            c_beta: None,
        })
        .unwrap();
        assert_relative_eq!(sc.c_k, (2.0 + E) / (2.0 * PI), max_relative = 1e-13);
        assert!((sc.c_l - 48.9).abs() < 0.1, "{}", sc.c_l);
        assert!((sc.t_l_derived - 1.02e-4).abs() < 0.01e-4, "{}", sc.t_l_derived);
    }

    #[test]
    fn zero_kernel_constants() {
        let sc = StructureConstants::new(&ConstantInputs {
            d: 2,
            c0: 0.0,
            c1: 1.0,
            cinf: 1.0,
            gamma1: 1.0,
            q: None,
            kappa: None,
            alpha: None,
            c_beta: None,
        })
        .unwrap();
        assert_eq!(sc.c_k, 0.0);
        assert!(sc.t_k.is_infinite());
        assert_eq!(sc.c_l, 0.0);
        assert_eq!(sc.t_l_derived, sc.t_k);
    }

    #[test]
    fn invalid_exponents_rejected() {
        let mut inp = ConstantInputs {
            d: 2,
            c0: 1.0,
            c1: 1.0,
            cinf: 1.0,
            gamma1: 2.0,
            q: None,
            kappa: None,
            alpha: None,
            c_beta: None,
        };
        assert!(StructureConstants::new(&inp).is_err());
        inp.gamma1 = 1.0;
        inp.alpha = Some(2.5);
        assert!(StructureConstants::new(&inp).is_err());
        inp.alpha = Some(1.0);
        assert!(StructureConstants::new(&inp).is_err());
    }

    #[test]
    fn sharp_bound_values() {
        let sc = example();
        assert_relative_eq!(sharp_density_bound(1.0, 1.0, 0.0, &sc), (1.0 + E) / (2.0 * PI), max_relative = 1e-14);
        assert!((sharp_density_bound(1.0, 1.0, 0.0, &sc) - 0.591783).abs() < 1e-6);
        let ts: Vec<f64> = (0..=20).map(|i| 0.01 + 0.99 * i as f64 / 20.0).collect();
        let rs: Vec<f64> = (0..=50).map(|i| 0.1 * i as f64).collect();
        let k = calibrate_kappa(1.0, 1.5, &ts, &rs);
        assert!(k > 0.0 && k <= 2.0, "{k}");
        let mut sc2 = sc;
        sc2.kappa = 2.0;
        assert!(audit_sharp_bound(1.0, &sc2, &ts, &rs).satisfied);
        sc2.kappa = k;
        assert!(audit_sharp_bound(1.0, &sc2, &ts, &rs).margin >= -1e-15);
        sc2.kappa = 1e-6;
        assert!(!audit_sharp_bound(1.0, &sc2, &ts, &rs).satisfied);
    }

    #[test]
    fn aronson_envelope_cases() {
        let e = aronson_envelope(1.0, 0.7, 1.3, 2).unwrap();
        assert_relative_eq!(e.lower, e.upper, max_relative = 1e-15);
        assert!(aronson_envelope(0.5, 1.0, 0.0, 2).is_err());
        let ts: Vec<f64> = (0..=10).map(|i| 0.01 + 0.099 * i as f64).collect();
        let rs: Vec<f64> = (0..=25).map(|i| 0.2 * i as f64).collect();
        let g = |t: f64, r: f64| gaussian_density(2, t, r);
        let m = calibrate_aronson_m(2, &ts, &rs, &g).unwrap();
        assert_relative_eq!(m, 2.0 * PI, max_relative = 1e-11);
        assert!(audit_aronson(2.0 * PI, 2, &ts, &rs, &g).unwrap().satisfied);
        assert!(!audit_aronson(6.0, 2, &ts, &rs, &g).unwrap().satisfied);
    }

    fn mc(n: usize, seed: u64) -> McParams {
        McParams { n_samples: n, dt: 0.05, key: StreamKey::from_seed(seed) }
    }

    #[test]
    fn zero_field_audits_are_trivial() {
        let sc = example();
        let r = verify_i_bound(&ScalarField::Zero, &ZERO, 0.5, 1.0, 1.0, None, &sc, &mc(200, 1)).unwrap();
        assert_eq!(r.lhs_estimate, 0.0);
        assert!(r.satisfied);
        assert!(verify_i_bound(&ScalarField::Zero, &ZERO, 0.5, 1.0, 1.0, None, &sc, &mc(99, 1)).is_err());
    }

    #[test]
    fn j_bound_with_gamma_zero_is_a_mass_bound() {
        let f = ScalarField::BallIndicator { radius: 1.0, height: 2.0 / PI };
        assert_relative_eq!(f.l1_norm(2), 2.0, max_relative = 1e-14);
        let r = verify_j_bound(&f, &[0.3, 0.0, 0.0], 0.5, 2.0, 1.0, None, 2, &mc(2000, 2)).unwrap();
        assert_relative_eq!(r.rhs_bound, 1.0, max_relative = 1e-14);
        assert!(r.satisfied && r.margin >= 0.0);
        let r0 = verify_j_bound(&f, &ZERO, 0.5, 1e-3, 0.0, None, 2, &mc(2000, 3)).unwrap();
        assert!(r0.lhs_estimate <= 2.0 + 3.0 * r0.lhs_std_error && r0.satisfied);
    }

    proptest! {
        #[test]
        fn derived_horizon_is_admissible(c0 in 0.0f64..10.0, c1 in 0.0f64..10.0, cinf in 0.0f64..10.0,
                                         gamma1 in 0.0f64..1.99, kappa in 0.01f64..10.0) {
            let sc = StructureConstants::new(&ConstantInputs {
                d: 2, c0, c1, cinf, gamma1, q: None, kappa: Some(kappa), alpha: None, c_beta: None,
            }).unwrap();
            prop_assert!(sc.t_l_derived <= sc.t_k);
            if sc.c_l > 0.0 && sc.c_l.is_finite() {
                prop_assert!((sc.t_l_derived + sc.t_l_derived.sqrt()) * sc.c_l <= 0.5 + 1e-12);
            }
            if sc.c_k > 0.0 {
                prop_assert!((sc.t_k * sc.c_k * sc.c_k - 1.0).abs() < 1e-15);
            }
            let again = StructureConstants::new(&ConstantInputs {
                d: 2, c0, c1, cinf, gamma1, q: None, kappa: Some(kappa), alpha: None, c_beta: None,
            }).unwrap();
            prop_assert_eq!(sc, again);
        }

        #[test]
        fn c_l_increases_with_c0(c0 in 0.01f64..5.0, bump in 0.01f64..2.0) {
            let mk = |c0| StructureConstants::new(&ConstantInputs {
                d: 3, c0, c1: 1.0, cinf: 1.0, gamma1: 2.0, q: None, kappa: None, alpha: None, c_beta: None,
            }).unwrap();
            let (a, b) = (mk(c0), mk(c0 + bump));
            prop_assert!(b.c_l > a.c_l);
            prop_assert!(b.t_l_derived < a.t_l_derived);
            prop_assert!((mk(2.0 * c0).c_k / a.c_k - 2.0).abs() < 1e-13);
        }

        #[test]
        fn sharp_bound_without_drift_is_gaussian(t in 0.001f64..5.0, r in 0.0f64..10.0) {
            let sc = example();
            prop_assert_eq!(sharp_density_bound(0.0, t, r, &sc), gaussian_density(2, t, r));
        }

        #[test]
        fn envelope_ratio_grows_with_m(m in 1.0f64..50.0, dm in 0.01f64..5.0, t in 0.01f64..1.0, r in 0.0f64..3.0) {
            let a = aronson_envelope(m, t, r, 2).unwrap();
            let b = aronson_envelope(m + dm, t, r, 2).unwrap();
            prop_assert!(b.upper / b.lower >= a.upper / a.lower);
        }
    }

    #[test]
    fn kappa1_closed_form_matches_quadrature() {
        for d in 1..=3 {
            let hi = q_upper(d).min(3.0);
            for i in 1..=10 {
                let q = 1.0 + (hi - 1.0) * i as f64 / 11.0;
                let a = gaussian_moment_integral(d, q);
                let b = gaussian_moment_integral_quadrature(d, q).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-8);
            }
        }
    }
}
