use rvm_core::kernel::{
    check_growth, convolve_with_law, make_builtin_kernel, BuiltinKernel, Lattice, LawSample, Normalization,
    VorticityField,
};
use rvm_core::rng::StreamKey;
use rvm_core::{norm, Point};
use std::f64::consts::PI;

fn erf(x: f64) -> f64 {
    // Maclaurin series, accurate to ~1e-13 for |x| < 3
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / PI.sqrt() * sum
}

fn gaussian_law(n: usize, sigma: f64, d: usize, seed: u64) -> LawSample {
    let key = StreamKey::from_seed(seed);
    let pts: Vec<Point> = (0..n as u64)
        .map(|i| {
            let mut z = [0.0; 3];
            key.normals(i, 0, &mut z[..d]);
            [sigma * z[0], sigma * z[1], sigma * z[2]]
        })
        .collect();
    LawSample::uniform(pts).unwrap()
}

#[test]
fn riesz_potential_of_a_gaussian_law() {
    // E 1/|x - Z| for Z ~ N(0, s^2 I_3) equals erf(|x| / (s sqrt 2)) / |x|
    let k = make_builtin_kernel(BuiltinKernel::Riesz { gamma: 1.0 }, 3, Normalization::QuarterPi).unwrap();
    let sigma = 0.8;
    let law = gaussian_law(200_000, sigma, 3, 11);
    for x in [[0.5, 0.0, 0.0], [1.0, -1.0, 0.5], [0.0, 0.0, 3.0]] {
        let r = norm(&x);
        let exact = erf(r / (sigma * 2f64.sqrt())) / r;
        let got = convolve_with_law(&k, &law, &x).value[0][0];
        assert!((got - exact).abs() < 0.01 * exact, "x = {x:?}: {got} vs {exact}");
    }
}

#[test]
fn biot_savart_2d_of_a_gaussian_law_is_lamb_oseen() {
    // the 2D Biot–Savart velocity of N(0, s^2 I) is (1 - e^{-r^2/(2 s^2)}) / (2 pi r) azimuthally
    let k = make_builtin_kernel(BuiltinKernel::BiotSavart2d, 2, Normalization::QuarterPi).unwrap();
    // E|K|^2 diverges in 2D, so use a midpoint quadrature law instead of samples
    let sigma = 0.6;
    let h = 0.004;
    let m = (4.0 * sigma / h) as i64;
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    for i in -m..m {
        for j in -m..m {
            let y = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, 0.0];
            pts.push(y);
            ws.push((-(y[0] * y[0] + y[1] * y[1]) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = ws.iter().sum();
    let law = LawSample::new(pts, ws.iter().map(|w| w / total).collect()).unwrap();
    for x in [[0.4, 0.3, 0.0], [-1.2, 0.5, 0.0]] {
        let r = norm(&x);
        let ut = -(-r * r / (2.0 * sigma * sigma)).exp_m1() / (2.0 * PI * r);
        let got = convolve_with_law(&k, &law, &x).value;
        let (ux, uy) = (got[0][0], got[1][0]);
        assert!((ux + ut * x[1] / r).abs() < 0.01 * ut, "{ux}");
        assert!((uy - ut * x[0] / r).abs() < 0.01 * ut, "{uy}");
    }
}

#[test]
fn builtin_envelopes_hold() {
    let kernels = [
        make_builtin_kernel(BuiltinKernel::BiotSavart3d, 3, Normalization::QuarterPi).unwrap(),
        make_builtin_kernel(BuiltinKernel::BiotSavart2d, 2, Normalization::QuarterPi).unwrap(),
        make_builtin_kernel(BuiltinKernel::BiotSavart3d, 3, Normalization::Unnormalized).unwrap(),
        make_builtin_kernel(BuiltinKernel::Riesz { gamma: 0.5 }, 2, Normalization::QuarterPi).unwrap(),
        make_builtin_kernel(BuiltinKernel::Green, 2, Normalization::QuarterPi).unwrap(),
        make_builtin_kernel(BuiltinKernel::Green, 3, Normalization::QuarterPi).unwrap(),
    ];
    for k in &kernels {
        let rep = check_growth(k, 2000, 7).unwrap();
        assert!(!rep.violated, "{rep:?}");
    }
}

#[test]
fn lamb_oseen_lattice_reproduces_circulation() {
    let field = VorticityField::lamb_oseen(1.0, 1.0, 0.5, 1e-6).unwrap();
    for eps in [0.2, 0.1, 0.05] {
        let lattice = Lattice::from_field(&field, eps).unwrap();
        let total = lattice.total_weight()[0];
        assert!((total - 1.0).abs() < 2e-6, "eps = {eps}: {total}");
    }
}
