//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rvm_core::drift::{DriftField, SpaceGrid, TimeGrid};
use rvm_core::kernel::{make_builtin_kernel, BuiltinKernel, Lattice, Normalization};
use rvm_core::rng::StreamKey;
use rvm_core::vortex::{recover_velocity_particles, run_particle_system, Mode, ParticleConfig};
use serde_json::Value;

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

struct Run {
    code: Option<i32>,
    stdout: String,
    stderr: String,
}

fn rvm(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_rvm"))
        .arg(cmd)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("spawn rvm");
    Run {
        code: o.status.code(),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn expect_ok(r: &Run, what: &str) -> Result<(), String> {
    if r.code == Some(0) {
        Ok(())
    } else {
        Err(format!("{what} exited with {:?}: {}", r.code, r.stderr.trim()))
    }
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn num(map: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    map.get(key).ok_or(format!("missing {key}"))?.parse().map_err(|e| format!("{key}: {e}"))
}

fn ndjson(path: &Path) -> Result<Vec<Value>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn f(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or(format!("missing number {key}"))
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn check(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn criterion_1(dir: &Path) -> Outcome {
    let r = rvm("constants", &configs().join("constants.toml"), &dir.join("c1"), &[]);
    expect_ok(&r, "constants")?;
    let kv = key_values(&r.stdout);
    let kappa1 = 2.0 * PI;
    let c_k = 2.0 * PI * (1.0 + E) + 1.0;
    let t_k = 1.0 / (c_k * c_k);
    for (key, oracle) in [("kappa1", kappa1), ("C_K", c_k), ("T_K", t_k)] {
        let got = num(&kv, key)?;
        check(rel(got, oracle) <= 1e-10, format!("{key} = {got}, oracle {oracle}"))?;
    }
    check(rel(num(&kv, "T_K")?, 1.6848e-3) < 1e-4, "T_K differs from 1.6848e-3".into())?;
    Ok(format!("kappa1 = 2 pi, C_K = {c_k:.6}, T_K = {t_k:.6e} (rel 1e-10)"))
}

fn criterion_2(dir: &Path) -> Outcome {
    let out = dir.join("c2");
    let r = rvm("verify-bounds", &configs().join("bounds.toml"), &out, &[]);
    expect_ok(&r, "verify-bounds")?;
    let csv = fs::read_to_string(out.join("bounds.csv")).map_err(|e| e.to_string())?;
    let mut seen = BTreeMap::new();
    let mut worst = f64::INFINITY;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let margin: f64 = cols[5].parse().map_err(|e| format!("{e}"))?;
        check(cols[6] == "true" && margin >= 0.0, format!("row failed: {line}"))?;
        *seen.entry(cols[0].to_string()).or_insert(0) += 1;
        worst = worst.min(margin);
    }
    for b in ["sharp", "aronson", "I", "J"] {
        check(seen.contains_key(b), format!("no {b} row"))?;
    }
    Ok(format!("{} rows satisfied, smallest margin {worst:.3e}", seen.values().sum::<i32>()))
}

/// Contraction run on the Lamb–Oseen vortex at `T = min(T_L_derived, 0.2)`.
fn contraction_run(dir: &Path) -> Result<(PathBuf, f64), String> {
    let base = fs::read_to_string(configs().join("lamb_oseen.toml")).map_err(|e| e.to_string())?;
    let probe = dir.join("c3_probe.toml");
    fs::write(&probe, &base).map_err(|e| e.to_string())?;
    let r = rvm("constants", &probe, &dir.join("c3_constants"), &[]);
    expect_ok(&r, "constants")?;
    let t = num(&key_values(&r.stdout), "T_L_derived")?.min(0.2);
    // nodes at odd multiples of h/2 sit between lattice points
    let text = format!(
        "d = 2\nnu = 0.5\n\n[kernel]\nname = \"biot_savart_2d\"\n\n[omega0]\nkind = \"lamb_oseen\"\ncirculation = 1.0\nt0 = 1.0\n\n\
         [grid]\nradius = 3.875\nh = 0.25\nhorizon = {t:e}\ndt = {:e}\n\n[solver]\neps = 0.25\npaths_per_point = 200\nseed = 11\n",
        t / 2.0
    );
    let cfg = dir.join("c3.toml");
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let out = dir.join("c3");
    let r = rvm("solve-drift", &cfg, &out, &[]);
    expect_ok(&r, "solve-drift")?;
    Ok((out, t))
}

fn criterion_3(out: &Path, t: f64) -> Outcome {
    let s = &ndjson(&out.join("solve.ndjson"))?[0];
    let res: Vec<f64> = s["residuals"].as_array().ok_or("no residuals")?.iter().filter_map(Value::as_f64).collect();
    let ratios: Vec<f64> = s["ratios"].as_array().ok_or("no ratios")?.iter().filter_map(Value::as_f64).collect();
    let floor = f(s, "noise_floor")?;
    check(s["converged"] == true, "not converged".into())?;
    check(res.len() <= 8, format!("{} iterations", res.len()))?;
    check(res.windows(2).all(|w| w[1] < w[0]), format!("residuals not monotone: {res:?}"))?;
    check(*res.last().unwrap() <= floor, format!("last residual above floor {floor}"))?;
    check(ratios.iter().all(|&r| r < 1.0), format!("ratio >= 1: {ratios:?}"))?;
    let proven = s["within_proven_regime"] == true;
    check(!proven || ratios.iter().all(|&r| r <= 0.65), format!("ratio above 0.65 for T <= T_L: {ratios:?}"))?;
    check(proven, format!("T = {t} not within the proven regime"))?;
    Ok(format!("T = {t:.4e}, residuals [{}], ratios [{}], floor {floor:.2e}", sci(&res), sci(&ratios)))
}

/// Relative L2 error of a drift file against the Lamb–Oseen velocity on
/// `0.2 <= r <= 3` over slices `j >= 1`.
fn lamb_oseen_drift_error(path: &Path, gamma: f64, t0: f64, nu: f64) -> Result<f64, String> {
    let recs = ndjson(path)?;
    let h0 = &recs[0];
    let (radius, h, n, dt) = (f(h0, "radius")?, f(h0, "h")?, h0["n"].as_u64().ok_or("n")? as usize, f(h0, "dt")?);
    let (mut num, mut den) = (0.0, 0.0);
    for rec in &recs[2..] {
        let t = rec["slice"].as_u64().ok_or("slice")? as f64 * dt;
        let vals = rec["values"].as_array().ok_or("values")?;
        for i1 in 0..n {
            for i0 in 0..n {
                let (x, y) = (-radius + i0 as f64 * h, -radius + i1 as f64 * h);
                let r = x.hypot(y);
                if !(0.2..=3.0).contains(&r) {
                    continue;
                }
                let s = 4.0 * nu * (t + t0);
                let ut = gamma / (2.0 * PI * r) * (1.0 - (-r * r / s).exp());
                let (ex, ey) = (-ut * y / r, ut * x / r);
                let node = i0 + n * i1;
                let (vx, vy) = (vals[2 * node].as_f64().unwrap(), vals[2 * node + 1].as_f64().unwrap());
                num += (vx - ex).powi(2) + (vy - ey).powi(2);
                den += ex * ex + ey * ey;
            }
        }
    }
    Ok((num / den).sqrt())
}

fn criterion_4(out: &Path) -> Outcome {
    let err = lamb_oseen_drift_error(&out.join("drift.ndjson"), 1.0, 1.0, 0.5)?;
    check(err < 0.05, format!("relative L2 error {err:.4}"))?;
    Ok(format!("relative L2 error of b* on the annulus {err:.4} < 0.05"))
}

fn criterion_5(dir: &Path) -> Outcome {
    let cfg = configs().join("lamb_oseen.toml");
    let out = dir.join("c5");
    expect_ok(&rvm("solve-drift", &cfg, &out, &[]), "solve-drift")?;
    let drift = out.join("drift.ndjson");
    expect_ok(&rvm("simulate", &cfg, &out, &["--drift", drift.to_str().unwrap()]), "simulate")?;
    let snaps = fs::read_to_string(out.join("snapshots.csv")).map_err(|e| e.to_string())?;
    let recs = ndjson(&out.join("simulate.ndjson"))?;
    let samples = (snaps.lines().count() - 1) / recs.len();
    check(samples >= 100_000, format!("only {samples} samples"))?;
    let mut detail = format!("{samples} samples");
    for rec in &recs {
        let mass = f(rec, "mass_rel_error")?;
        check(mass < 0.02, format!("mass error {mass}"))?;
        let (div, grad) = (f(rec, "divergence_max")?, f(rec, "gradient_max")?);
        check(div < 0.02 * grad, format!("divergence {div} vs gradient {grad}"))?;
    }
    let mid = recs.iter().find(|r| r.get("residual_l2").is_some()).ok_or("no residual check")?;
    let (res, noise) = (f(mid, "residual_l2")?, f(mid, "residual_noise")?);
    check(res < 3.0 * noise, format!("residual {res} vs noise {noise}"))?;
    detail += &format!(", residual {res:.3e} < 3 x noise {noise:.3e}, mass and divergence within bounds");
    Ok(detail)
}

fn criterion_6(dir: &Path) -> Outcome {
    let cfg = configs().join("zero.toml");
    let out = dir.join("c6");
    let r = rvm("solve-drift", &cfg, &out, &[]);
    expect_ok(&r, "solve-drift")?;
    let s = &ndjson(&out.join("solve.ndjson"))?[0];
    check(s["iterations"] == 1, format!("{} iterations", s["iterations"]))?;
    let drift = ndjson(&out.join("drift.ndjson"))?;
    let nonzero = drift[1..]
        .iter()
        .flat_map(|r| r["values"].as_array().cloned().unwrap_or_default())
        .any(|v| v.as_f64() != Some(0.0));
    check(!nonzero, "b* is not identically zero".into())?;
    let path = out.join("drift.ndjson");
    expect_ok(&rvm("simulate", &cfg, &out, &["--drift", path.to_str().unwrap()]), "simulate")?;
    let recs = ndjson(&out.join("simulate.ndjson"))?;
    for (j, rec) in recs.iter().enumerate() {
        let (v, se, exact) = (f(rec, "brownian_variance")?, f(rec, "brownian_variance_se")?, f(rec, "brownian_variance_exact")?);
        check((v - exact).abs() <= 4.0 * se, format!("variance {v} vs 2 nu t = {exact} (se {se})"))?;
        let w = ndjson(&out.join(format!("vorticity_{j}.ndjson")))?;
        check(w.iter().all(|r| r["p"].as_f64() == Some(0.0)), format!("vorticity {j} not zero"))?;
    }
    let res = recs.iter().find_map(|r| r.get("residual_l2").and_then(Value::as_f64)).ok_or("no residual")?;
    check(res == 0.0, format!("residual {res}"))?;
    Ok(format!("b* = 0 after 1 iteration, Brownian variance within 4 se at {} snapshots, zero fields", recs.len()))
}

fn strip_seconds(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a)).collect::<Vec<_>>().join("\n")
}

fn checksums(out: &Path) -> Result<BTreeMap<String, String>, String> {
    let m = &ndjson(&out.join("manifest.json"))?[0];
    Ok(m["files"]
        .as_array()
        .ok_or("no files")?
        .iter()
        .map(|e| (e["path"].as_str().unwrap_or("").to_string(), e["sha256"].as_str().unwrap_or("").to_string()))
        .collect())
}

fn criterion_7(dir: &Path) -> Outcome {
    let cfg = configs().join("lamb_oseen.toml");
    let mut sums = Vec::new();
    for rep in 0..2 {
        let solve = dir.join(format!("c7_solve_{rep}"));
        let sim = dir.join(format!("c7_sim_{rep}"));
        expect_ok(&rvm("solve-drift", &cfg, &solve, &["--threads", "2", "--seed", "5"]), "solve-drift")?;
        let drift = solve.join("drift.ndjson");
        expect_ok(
            &rvm("simulate", &cfg, &sim, &["--threads", "2", "--seed", "5", "--drift", drift.to_str().unwrap()]),
            "simulate",
        )?;
        let mut s = checksums(&solve)?;
        // the picard log records wall-clock seconds per iteration
        s.remove("picard.csv");
        s.extend(checksums(&sim)?.into_iter().map(|(k, v)| (format!("sim/{k}"), v)));
        let picard = fs::read_to_string(solve.join("picard.csv")).map_err(|e| e.to_string())?;
        sums.push((s, strip_seconds(&picard)));
    }
    check(sums[0].0 == sums[1].0, "output checksums differ between runs".into())?;
    check(sums[0].1 == sums[1].1, "picard history differs between runs".into())?;
    Ok(format!("{} files bit-identical across two runs", sums[0].0.len() + 1))
}

fn criterion_8() -> Outcome {
    let nu = 0.5;
    let kernel = make_builtin_kernel(BuiltinKernel::BiotSavart2d, 2, Normalization::QuarterPi)
        .and_then(|k| k.with_cutoff(0.05))
        .map_err(|e| e.to_string())?;
    let lattice = Lattice::point_vortex(2, [0.0; 3], [1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let (horizon, dt) = (0.5, 0.05);
    // mean-field drift of a point vortex: the heat-smoothed vortex
    let b = DriftField::from_fn(
        SpaceGrid::new(2, 8.0, 0.05).map_err(|e| e.to_string())?,
        TimeGrid::covering(horizon, 10).map_err(|e| e.to_string())?,
        |x, t| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 == 0.0 {
                return [0.0; 3];
            }
            let v = (1.0 - (-r2 / (4.0 * nu * t)).exp()) / (2.0 * PI * r2);
            [-v * x[1], v * x[0], 0.0]
        },
    )
    .map_err(|e| e.to_string())?;
    let grid = SpaceGrid::new(2, 3.0, 0.1).map_err(|e| e.to_string())?;
    let mut diffs = Vec::new();
    for n in [2_000usize, 8_000, 32_000] {
        let cfg = ParticleConfig { n_copies: n, nu, dt, key: StreamKey::named(3, "simulate"), blowup_radius: 100.0 };
        let emp = run_particle_system(&kernel, &lattice, Mode::EmpiricalCoupled, &cfg, &[horizon]).map_err(|e| e.to_string())?;
        let mf = run_particle_system(&kernel, &lattice, Mode::MeanField(&b), &cfg, &[horizon]).map_err(|e| e.to_string())?;
        let ue = recover_velocity_particles(&kernel, &lattice, &emp[0], &grid).map_err(|e| e.to_string())?;
        let um = recover_velocity_particles(&kernel, &lattice, &mf[0], &grid).map_err(|e| e.to_string())?;
        diffs.push(ue.l2_distance(&um).map_err(|e| e.to_string())?);
    }
    check(diffs.windows(2).all(|w| w[1] < w[0]), format!("not monotone: [{}]", sci(&diffs)))?;
    Ok(format!("velocity L2 difference [{}] for N = 2e3, 8e3, 3.2e4", sci(&diffs)))
}

fn report(k: usize, name: &str, clock: Instant, r: Outcome) -> bool {
    let secs = clock.elapsed().as_secs_f64();
    match r {
        Ok(msg) => {
            println!("PASS criterion {k} ({name}, {secs:.1}s): {msg}");
            true
        }
        Err(msg) => {
            println!("FAIL criterion {k} ({name}, {secs:.1}s): {msg}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters only need a well-behaved exit
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut ok = true;
    let c = Instant::now();
    ok &= report(1, "constants", c, criterion_1(dir));
    let c = Instant::now();
    ok &= report(2, "bound audit", c, criterion_2(dir));
    let c = Instant::now();
    match contraction_run(dir) {
        Ok((out, t)) => {
            ok &= report(3, "contraction", c, criterion_3(&out, t));
            let c = Instant::now();
            ok &= report(4, "fixed point vs Lamb-Oseen", c, criterion_4(&out));
        }
        Err(e) => {
            ok &= report(3, "contraction", c, Err(e.clone()));
            ok &= report(4, "fixed point vs Lamb-Oseen", c, Err(e));
        }
    }
    let c = Instant::now();
    ok &= report(5, "PDE recovery", c, criterion_5(dir));
    let c = Instant::now();
    ok &= report(6, "trivial limits", c, criterion_6(dir));
    let c = Instant::now();
    ok &= report(7, "determinism", c, criterion_7(dir));
    let c = Instant::now();
    ok &= report(8, "mean field vs empirical", c, criterion_8());
    if !ok {
        std::process::exit(1);
    }
}
