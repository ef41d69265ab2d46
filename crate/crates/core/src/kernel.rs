//! Singular integral kernels, initial vorticity data and convolutions of
//! kernels against empirical laws.
//!
//! Kernels are `d x d` matrix valued. Scalar kernels (Riesz, Green) occupy the
//! `(0, 0)` entry, and 2D vorticity is a scalar carried in component 0, so a
//! 2D Biot–Savart kernel stores its velocity in column 0 and leaves column 1
//! empty. One code path then serves every dimension.

use std::f64::consts::{E, PI};

use nalgebra::Matrix3;

use crate::error::invalid;
use crate::rng::StreamKey;
use crate::{check_dim, norm, norm2, sub, Error, Mat, Point, Result, MAX_DIM, ZERO};

/// Built-in kernel families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinKernel {
    /// `K^i_j = eps^{ikj} G^k`, `G(x) = -x / |x|^3`.
    BiotSavart3d,
    /// `K(x) = (-x_2, x_1) / |x|^2` acting on scalar vorticity.
    BiotSavart2d,
    /// `1 / |x|^gamma`, `0 <= gamma < d`.
    Riesz { gamma: f64 },
    /// `ln|x|` in 2D, `1 / |x|^{d-2}` for `d > 2`.
    Green,
}

/// Prefactor convention for the Biot–Savart kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Physical Biot–Savart law: `1/(4 pi)` in 3D, `1/(2 pi)` in 2D.
    QuarterPi,
    /// No prefactor.
    Unnormalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    BiotSavart3d,
    BiotSavart2d,
    Riesz(f64),
    Log,
}

/// A matrix-valued kernel with its growth metadata.
///
/// The growth envelope is `|K(x)| <= C0 / |x|^gamma1` for `0 < |x| < 1` and
/// `|K(x)| <= C0 / |x|^gamma2` for `|x| >= 1`, with `|.|` the spectral norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularKernel {
    shape: Shape,
    d: usize,
    factor: f64,
    c0: f64,
    gamma1: f64,
    gamma2: f64,
    cutoff: f64,
}

const DEFAULT_CUTOFF: f64 = 1e-9;

pub fn make_builtin_kernel(
    kind: BuiltinKernel,
    d: usize,
    normalization: Normalization,
) -> Result<SingularKernel> {
    check_dim(d)?;
    let quarter = normalization == Normalization::QuarterPi;
    let (shape, factor, c0, g1, g2) = match kind {
        BuiltinKernel::BiotSavart3d => {
            if d != 3 {
                return Err(Error::DimensionMismatch { expected: 3, got: d });
            }
            let f = if quarter { 1.0 / (4.0 * PI) } else { 1.0 };
            (Shape::BiotSavart3d, f, f, 2.0, 2.0)
        }
        BuiltinKernel::BiotSavart2d => {
            if d != 2 {
                return Err(Error::DimensionMismatch { expected: 2, got: d });
            }
            let f = if quarter { 1.0 / (2.0 * PI) } else { 1.0 };
            (Shape::BiotSavart2d, f, f, 1.0, 1.0)
        }
        BuiltinKernel::Riesz { gamma } => {
            if !(0.0..d as f64).contains(&gamma) {
                return invalid(format!("riesz exponent must lie in [0, {d}), got {gamma}"));
            }
            (Shape::Riesz(gamma), 1.0, 1.0, gamma, gamma)
        }
        BuiltinKernel::Green => match d {
            // sup_{r<1} |ln r| r^{1/2} = sup_{r>=1} ln r / r^{1/2} = 2/e; the
            // outer exponent is negative since ln grows
            2 => (Shape::Log, 1.0, 2.0 / E, 0.5, -0.5),
            d if d > 2 => {
                let p = (d - 2) as f64;
                (Shape::Riesz(p), 1.0, 1.0, p, p)
            }
            _ => return invalid("green kernel needs d >= 2"),
        },
    };
    Ok(SingularKernel {
        shape,
        d,
        factor,
        c0,
        gamma1: g1,
        gamma2: g2,
        cutoff: DEFAULT_CUTOFF,
    })
}

impl SingularKernel {
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn c0(&self) -> f64 {
        self.c0
    }
    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }
    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Sets the desingularization radius: source points closer than this to
    /// the evaluation point are dropped.
    pub fn with_cutoff(mut self, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("kernel cutoff must be positive, got {delta}"));
        }
        self.cutoff = delta;
        Ok(self)
    }

    /// Multiplies the kernel and its growth constant by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        self.factor *= s;
        self.c0 *= s.abs();
        self
    }

    /// Overrides the declared growth constant without touching the kernel.
    pub fn with_c0(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self
    }

    /// Whether `K(-x) = -K(x)`.
    pub fn is_odd(&self) -> bool {
        matches!(self.shape, Shape::BiotSavart2d | Shape::BiotSavart3d)
    }

    /// Whether the kernel acts on a scalar stored in component 0.
    pub fn is_scalar(&self) -> bool {
        matches!(self.shape, Shape::Riesz(_) | Shape::Log)
    }

    /// `K(x)` as a padded matrix; the zero matrix at `x = 0`.
    pub fn eval(&self, x: &Point) -> Mat {
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        let r2 = norm2(x);
        if r2 == 0.0 {
            return m;
        }
        let f = self.factor;
        match self.shape {
            Shape::BiotSavart3d => {
                // G = -x/|x|^3, K^i_j = eps^{ikj} G^k, i.e. K w = G x w
                let c = -f / (r2 * r2.sqrt());
                let g = [c * x[0], c * x[1], c * x[2]];
                m[0][1] = -g[2];
                m[0][2] = g[1];
                m[1][0] = g[2];
                m[1][2] = -g[0];
                m[2][0] = -g[1];
                m[2][1] = g[0];
            }
            Shape::BiotSavart2d => {
                let c = f / r2;
                m[0][0] = -c * x[1];
                m[1][0] = c * x[0];
            }
            Shape::Riesz(g) => {
                m[0][0] = if g == 0.0 { f } else { f * r2.powf(-0.5 * g) };
            }
            Shape::Log => {
                m[0][0] = f * 0.5 * r2.ln();
            }
        }
        m
    }

    /// `K(z) w`, specialised per kernel family. Zero at `z = 0`.
    #[inline]
    pub fn apply(&self, z: &Point, w: &Point) -> Point {
        let r2 = norm2(z);
        if r2 == 0.0 {
            return ZERO;
        }
        let f = self.factor;
        match self.shape {
            Shape::BiotSavart2d => {
                let c = f * w[0] / r2;
                [-c * z[1], c * z[0], 0.0]
            }
            Shape::BiotSavart3d => {
                let c = -f / (r2 * r2.sqrt());
                [
                    c * (z[1] * w[2] - z[2] * w[1]),
                    c * (z[2] * w[0] - z[0] * w[2]),
                    c * (z[0] * w[1] - z[1] * w[0]),
                ]
            }
            Shape::Riesz(g) => {
                let v = if g == 0.0 { f } else { f * r2.powf(-0.5 * g) };
                [v * w[0], 0.0, 0.0]
            }
            Shape::Log => [f * 0.5 * r2.ln() * w[0], 0.0, 0.0],
        }
    }

    /// Spectral norm `|K(x)|`.
    pub fn norm_at(&self, x: &Point) -> f64 {
        let m = self.eval(x);
        let mat = Matrix3::from_fn(|i, j| m[i][j]);
        mat.singular_values().max()
    }
}

/// Source points with vector weights, stored as separate coordinate arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Particles {
    pub x: [Vec<f64>; MAX_DIM],
    pub w: [Vec<f64>; MAX_DIM],
}

impl Particles {
    pub fn with_capacity(n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Particles { x: [v(), v(), v()], w: [v(), v(), v()] }
    }

    pub fn push(&mut self, p: &Point, w: &Point) {
        for c in 0..MAX_DIM {
            self.x[c].push(p[c]);
            self.w[c].push(w[c]);
        }
    }

    pub fn len(&self) -> usize {
        self.x[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.x[0].is_empty()
    }
}

impl SingularKernel {
    /// `sum_i K(x - p_i) w_i` over sources farther than the cutoff, and the
    /// number of sources dropped.
    pub fn sum_at(&self, x: &Point, parts: &Particles) -> (Point, usize) {
        let cut2 = self.cutoff * self.cutoff;
        let [px, py, pz] = &parts.x;
        let [w0, w1, w2] = &parts.w;
        let n = parts.len();
        let mut dropped = 0usize;
        let f = self.factor;
        match self.shape {
            Shape::BiotSavart2d => {
                let (mut u0, mut u1) = (0.0, 0.0);
                for i in 0..n {
                    let dx = x[0] - px[i];
                    let dy = x[1] - py[i];
                    let r2 = dx * dx + dy * dy;
                    if r2 < cut2 {
                        dropped += 1;
                        continue;
                    }
                    let c = w0[i] / r2;
                    u0 -= c * dy;
                    u1 += c * dx;
                }
                ([f * u0, f * u1, 0.0], dropped)
            }
            Shape::BiotSavart3d => {
                let mut u = ZERO;
                for i in 0..n {
                    let z = [x[0] - px[i], x[1] - py[i], x[2] - pz[i]];
                    let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
                    if r2 < cut2 {
                        dropped += 1;
                        continue;
                    }
                    let c = 1.0 / (r2 * r2.sqrt());
                    u[0] += c * (z[1] * w2[i] - z[2] * w1[i]);
                    u[1] += c * (z[2] * w0[i] - z[0] * w2[i]);
                    u[2] += c * (z[0] * w1[i] - z[1] * w0[i]);
                }
                ([-f * u[0], -f * u[1], -f * u[2]], dropped)
            }
            Shape::Riesz(_) | Shape::Log => {
                let mut s = 0.0;
                for i in 0..n {
                    let z = [x[0] - px[i], x[1] - py[i], x[2] - pz[i]];
                    if norm2(&z) < cut2 {
                        dropped += 1;
                        continue;
                    }
                    s += self.apply(&z, &[w0[i], 0.0, 0.0])[0];
                }
                ([s, 0.0, 0.0], dropped)
            }
        }
    }
}

/// Result of a growth-envelope audit.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    /// `sup |K(x)| |x|^gamma1 / C0` over samples with `|x| < 1`.
    pub max_ratio_inner: f64,
    /// `sup |K(x)| |x|^gamma2 / C0` over samples with `|x| >= 1`.
    pub max_ratio_outer: f64,
    pub argmax_inner: Point,
    pub argmax_outer: Point,
    pub violated: bool,
}

/// Samples log-uniform radii in `[1e-6, 1)` and `[1, 1e6]` with uniform
/// directions and reports the worst envelope ratio on each side.
pub fn check_growth(kernel: &SingularKernel, n_samples: usize, seed: u64) -> Result<GrowthReport> {
    if n_samples == 0 {
        return invalid("check_growth needs n_samples >= 1");
    }
    let key = StreamKey::named(seed, "growth");
    let d = kernel.d;
    let ratio = |x: &Point, gamma: f64| -> f64 {
        let k = kernel.norm_at(x);
        if kernel.c0 == 0.0 {
            return if k == 0.0 { 0.0 } else { f64::INFINITY };
        }
        k * norm(x).powf(gamma) / kernel.c0
    };
    let mut report = GrowthReport {
        max_ratio_inner: 0.0,
        max_ratio_outer: 0.0,
        argmax_inner: ZERO,
        argmax_outer: ZERO,
        violated: false,
    };
    let mut u = [0.0; 1];
    let mut z = [0.0; MAX_DIM];
    for i in 0..n_samples as u64 {
        for (side, (lo, hi)) in [(-6.0f64, 0.0f64), (0.0, 6.0)].into_iter().enumerate() {
            key.uniforms(i, 2 * side as u64, &mut u);
            // u in (0,1); the outer side includes |x| = 1 exactly on its first sample
            let log_r = if side == 1 && i == 0 { 0.0 } else { lo + (hi - lo) * u[0] };
            let r = 10f64.powf(log_r);
            key.normals(i, 2 * side as u64 + 1, &mut z[..d]);
            let zn = norm(&z);
            let x = crate::scale(&z, r / zn);
            if side == 0 {
                let q = ratio(&x, kernel.gamma1);
                if q > report.max_ratio_inner {
                    report.max_ratio_inner = q;
                    report.argmax_inner = x;
                }
            } else {
                let q = ratio(&x, kernel.gamma2);
                if q > report.max_ratio_outer {
                    report.max_ratio_outer = q;
                    report.argmax_outer = x;
                }
            }
        }
    }
    report.violated = report.max_ratio_inner > 1.0 + 1e-12 || report.max_ratio_outer > 1.0 + 1e-12;
    Ok(report)
}

/// An empirical probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct LawSample {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl LawSample {
    pub fn new(points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return invalid("law needs matching, non-empty points and weights");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid("law weights must be nonnegative");
        }
        let total = crate::stats::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("law weights sum to {total}, not 1"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return invalid("law points must be finite");
        }
        Ok(LawSample { points, weights })
    }

    /// Equal-weight empirical measure.
    pub fn uniform(points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn point_mass(x: Point) -> Self {
        LawSample { points: vec![x], weights: vec![1.0] }
    }
}

/// `K * L(U)(x)` with its desingularization bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Convolution {
    pub value: Mat,
    /// Number of law atoms within the kernel cutoff of `x`.
    pub dropped: usize,
}

/// `sum_m w_m K(x - u_m)`, dropping atoms with `|x - u_m| < delta`.
pub fn convolve_with_law(kernel: &SingularKernel, law: &LawSample, x: &Point) -> Convolution {
    let cut2 = kernel.cutoff * kernel.cutoff;
    let mut value = [[0.0; MAX_DIM]; MAX_DIM];
    let mut dropped = 0;
    for (u, w) in law.points.iter().zip(&law.weights) {
        let z = sub(x, u);
        if norm2(&z) < cut2 {
            dropped += 1;
            continue;
        }
        let k = kernel.eval(&z);
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                value[i][j] += w * k[i][j];
            }
        }
    }
    Convolution { value, dropped }
}

/// Built-in initial vorticity profiles.
#[derive(Debug, Clone, PartialEq)]
pub enum VorticityProfile {
    Zero,
    /// 2D Gaussian vortex `Gamma / (4 pi nu t0) exp(-r^2 / (4 nu t0))`.
    LambOseen { circulation: f64, t0: f64, nu: f64 },
    /// `amplitude * exp(-|y - center|^2 / (2 sigma^2))`.
    GaussianBlob { amplitude: Point, sigma: f64, center: Point },
}

/// Initial vorticity `omega_0` truncated to a ball of radius `support_radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct VorticityField {
    d: usize,
    profile: VorticityProfile,
    support_radius: f64,
}

impl VorticityField {
    pub fn new(d: usize, profile: VorticityProfile, support_radius: f64) -> Result<Self> {
        check_dim(d)?;
        if !(support_radius > 0.0 && support_radius.is_finite()) {
            return invalid(format!("support radius must be positive, got {support_radius}"));
        }
        match &profile {
            VorticityProfile::LambOseen { t0, nu, .. } => {
                if d != 2 {
                    return Err(Error::DimensionMismatch { expected: 2, got: d });
                }
                if !(*t0 > 0.0 && *nu > 0.0) {
                    return invalid("lamb_oseen needs t0 > 0 and nu > 0");
                }
            }
            VorticityProfile::GaussianBlob { sigma, .. } => {
                if !(*sigma > 0.0) {
                    return invalid("gaussian_blob needs sigma > 0");
                }
            }
            VorticityProfile::Zero => {}
        }
        Ok(VorticityField { d, profile, support_radius })
    }

    pub fn zero(d: usize) -> Result<Self> {
        Self::new(d, VorticityProfile::Zero, 1.0)
    }

    /// Lamb–Oseen data truncated where the outside circulation drops below
    /// `mass_tol * |Gamma|`.
    pub fn lamb_oseen(circulation: f64, t0: f64, nu: f64, mass_tol: f64) -> Result<Self> {
        let radius = (4.0 * nu * t0 * (1.0 / mass_tol).ln()).sqrt();
        Self::new(2, VorticityProfile::LambOseen { circulation, t0, nu }, radius)
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn profile(&self) -> &VorticityProfile {
        &self.profile
    }
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn center(&self) -> Point {
        match &self.profile {
            VorticityProfile::GaussianBlob { center, .. } => *center,
            _ => ZERO,
        }
    }

    /// `omega_0(y)`; 2D values live in component 0.
    pub fn eval(&self, y: &Point) -> Point {
        let c = self.center();
        let r2 = norm2(&sub(y, &c));
        if r2 > self.support_radius * self.support_radius {
            return ZERO;
        }
        match &self.profile {
            VorticityProfile::Zero => ZERO,
            VorticityProfile::LambOseen { circulation, t0, nu } => {
                let s = 4.0 * nu * t0;
                [circulation / (PI * s) * (-r2 / s).exp(), 0.0, 0.0]
            }
            VorticityProfile::GaussianBlob { amplitude, sigma, .. } => {
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                let mut v = crate::scale(amplitude, g);
                if self.d == 2 {
                    v[1] = 0.0;
                    v[2] = 0.0;
                }
                v
            }
        }
    }

    fn amplitude_norm(&self, a: &Point) -> f64 {
        if self.d == 2 {
            a[0].abs()
        } else {
            norm(a)
        }
    }

    /// `C_1`: the L1 norm of the untruncated profile (an upper bound for the
    /// truncated one).
    pub fn l1_norm(&self) -> f64 {
        match &self.profile {
            VorticityProfile::Zero => 0.0,
            VorticityProfile::LambOseen { circulation, .. } => circulation.abs(),
            VorticityProfile::GaussianBlob { amplitude, sigma, .. } => {
                self.amplitude_norm(amplitude) * (2.0 * PI * sigma * sigma).powf(0.5 * self.d as f64)
            }
        }
    }

    /// `C_inf`: the sup norm.
    pub fn sup_norm(&self) -> f64 {
        match &self.profile {
            VorticityProfile::Zero => 0.0,
            VorticityProfile::LambOseen { circulation, t0, nu } => circulation.abs() / (4.0 * PI * nu * t0),
            VorticityProfile::GaussianBlob { amplitude, .. } => self.amplitude_norm(amplitude),
        }
    }
}

/// Quadrature lattice `y_k = eps k` with weights `eps^d omega_0(y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub d: usize,
    pub eps: f64,
    pub indices: Vec<[i64; MAX_DIM]>,
    pub points: Vec<Point>,
    pub weights: Vec<Point>,
}

impl Lattice {
    /// Midpoint lattice over the box `center +- support_radius`.
    pub fn from_field(field: &VorticityField, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return invalid(format!("lattice mesh must be positive, got {eps}"));
        }
        let d = field.d;
        let c = field.center();
        let r = field.support_radius;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for i in 0..d {
            lo[i] = ((c[i] - r) / eps).ceil() as i64;
            hi[i] = ((c[i] + r) / eps).floor() as i64;
        }
        let vol = eps.powi(d as i32);
        let mut lattice = Lattice { d, eps, indices: vec![], points: vec![], weights: vec![] };
        let mut k = lo;
        loop {
            let y = [k[0] as f64 * eps, k[1] as f64 * eps, k[2] as f64 * eps];
            lattice.indices.push(k);
            lattice.points.push(y);
            lattice.weights.push(crate::scale(&field.eval(&y), vol));
            // odometer over the first d coordinates, first coordinate fastest
            let mut axis = 0;
            loop {
                if axis == d {
                    return Ok(lattice);
                }
                if k[axis] < hi[axis] {
                    k[axis] += 1;
                    break;
                }
                k[axis] = lo[axis];
                axis += 1;
            }
        }
    }

    /// A single lattice point carrying the whole weight (one vortex).
    pub fn point_vortex(d: usize, position: Point, weight: Point) -> Result<Self> {
        check_dim(d)?;
        Ok(Lattice {
            d,
            eps: 1.0,
            indices: vec![[0; MAX_DIM]],
            points: vec![position],
            weights: vec![weight],
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lattice with every weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut l = self.clone();
        for w in &mut l.weights {
            *w = crate::scale(w, s);
        }
        l
    }

    /// `sum_k eps^d omega_0(y_k)`.
    pub fn total_weight(&self) -> Point {
        self.weights.iter().fold(ZERO, |acc, w| crate::add(&acc, w))
    }

    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }
}

/// `b_Z(x) = sum_k [K * L(Z(y_k))](x) eps^d omega_0(y_k)`.
pub fn drift_from_ensemble(
    kernel: &SingularKernel,
    lattice: &Lattice,
    clouds: &[LawSample],
    x: &Point,
) -> Result<Point> {
    if lattice.is_empty() {
        return invalid("drift_from_ensemble: empty lattice");
    }
    if clouds.len() != lattice.len() {
        return invalid(format!(
            "drift_from_ensemble: {} clouds for {} lattice points",
            clouds.len(),
            lattice.len()
        ));
    }
    if kernel.d != lattice.d {
        return Err(Error::DimensionMismatch { expected: kernel.d, got: lattice.d });
    }
    let mut out = ZERO;
    for (cloud, w) in clouds.iter().zip(&lattice.weights) {
        if *w == ZERO {
            continue;
        }
        let conv = convolve_with_law(kernel, cloud, x);
        out = crate::add(&out, &crate::mat_vec(&conv.value, w));
    }
    Ok(out)
}
