//! One-dimensional adaptive quadrature and the few special functions the
//! bound audits need.

use std::f64::consts::PI;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Kronrod 7/15 on `[a, b]`: returns (integral, error estimate).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// Bisects until each panel's error estimate is below its share of
/// `max(abs_tol, rel_tol * |I|)` or the depth limit is hit.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (whole, err) = gk15(&f, a, b);
    let tol = abs_tol.max(rel_tol * whole.abs());
    if err <= tol {
        return whole;
    }
    recurse(&f, a, b, whole, tol, 0)
}

fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (l, el) = gk15(f, a, m);
    let (r, er) = gk15(f, m, b);
    if el + er <= tol || depth >= 48 || (el + er - (whole - l - r).abs()).is_nan() {
        return l + r;
    }
    recurse(f, a, m, l, 0.5 * tol, depth + 1) + recurse(f, m, b, r, 0.5 * tol, depth + 1)
}

pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Exponentially scaled modified Bessel function `e^{-z} I_0(z)` for `z >= 0`.
pub fn bessel_i0e(z: f64) -> f64 {
    let z = z.abs();
    if z <= 20.0 {
        // power series, terms positive so no cancellation
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum * (-z).exp()
    } else {
        // asymptotic expansion, coefficients ((2k-1)!!)^2 / (k! 8^k)
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..12 {
            let kk = k as f64;
            term *= (2.0 * kk - 1.0) * (2.0 * kk - 1.0) / (kk * 8.0 * z);
            sum += term;
        }
        sum / (2.0 * PI * z).sqrt()
    }
}

/// `e^{-z} * \int_{S^{d-1}} e^{z theta_1} dtheta` for `d = 1, 2, 3`, `z >= 0`.
///
/// This is the angular part of a Gaussian integrated over a sphere of radius
/// `r` around a point at distance `a`, with `z = a r / s`.
pub fn sphere_exp_scaled(d: usize, z: f64) -> f64 {
    match d {
        1 => 1.0 + (-2.0 * z).exp(),
        2 => 2.0 * PI * bessel_i0e(z),
        3 => {
            if z < 1e-8 {
                4.0 * PI * (1.0 - z)
            } else {
                4.0 * PI * (-(-2.0 * z).exp_m1()) / (2.0 * z)
            }
        }
        _ => panic!("sphere_exp_scaled: unsupported dimension {d}"),
    }
}

/// `\int_{S^{d-1}} g(a e_1 - r theta) dtheta` where `g` is the `N(0, s I_d)`
/// density: the Gaussian integrated over unit directions at radius `r`, for a
/// centre at distance `a`.
pub fn gaussian_sphere_average(d: usize, a: f64, r: f64, s: f64) -> f64 {
    let z = a * r / s;
    let gauss = (-(a - r) * (a - r) / (2.0 * s)).exp() / (2.0 * PI * s).powf(0.5 * d as f64);
    gauss * sphere_exp_scaled(d, z)
}
