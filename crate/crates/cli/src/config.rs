//! Run configuration: a TOML file with typed sections, validated on load.

use std::path::Path;

use rvm_core::bounds::ConstantInputs;
use rvm_core::drift::{SpaceGrid, TimeGrid};
use rvm_core::fixedpoint::Estimator;
use rvm_core::kernel::{
    make_builtin_kernel, BuiltinKernel, Lattice, Normalization, SingularKernel, VorticityField, VorticityProfile,
};
use rvm_core::sde::Bandwidth;
use rvm_core::Point;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub nu: f64,
    pub kernel: KernelSpec,
    pub omega0: Omega0Spec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub bounds: BoundsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    #[serde(rename = "biot_savart_3d")]
    BiotSavart3d,
    #[serde(rename = "biot_savart_2d")]
    BiotSavart2d,
    Riesz,
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationName {
    #[default]
    QuarterPi,
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub name: KernelName,
    /// Riesz exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub normalization: NormalizationName,
    /// Singular cutoff; defaults to a quarter of the lattice mesh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Omega0Spec {
    LambOseen {
        circulation: f64,
        t0: f64,
        /// Mass left outside the truncation ball.
        #[serde(default = "default_mass_tol")]
        mass_tol: f64,
    },
    GaussianBlob {
        amplitude: Vec<f64>,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        /// Defaults to `6 sigma`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support_radius: Option<f64>,
    },
    Zero,
}

fn default_mass_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Half-width of the evaluation box.
    pub radius: f64,
    pub h: f64,
    /// Time horizon `T`.
    pub horizon: f64,
    /// Time-slice spacing of drift fields.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    #[default]
    Direct,
    CameronMartin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    /// Euler step; defaults to the grid time spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub substeps: u32,
    /// Lattice mesh.
    pub eps: f64,
    /// Particle copies per lattice point.
    pub n_copies: usize,
    /// Monte Carlo paths per lattice point in the drift solve.
    pub paths_per_point: usize,
    pub seed: u64,
    pub estimator: EstimatorName,
    /// Blow-up radius as a multiple of the vorticity support radius.
    pub blowup_factor: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            dt: None,
            substeps: 1,
            eps: 0.25,
            n_copies: 1000,
            paths_per_point: 200,
            seed: 0,
            estimator: EstimatorName::Direct,
            blowup_factor: 100.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cinf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceSpec {
    /// Picard tolerance; defaults to the estimated noise floor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_fp: Option<f64>,
    pub max_iter: usize,
    pub certify: bool,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec { tol_fp: None, max_iter: 8, certify: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    MeanField,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSpec {
    pub mode: ModeName,
    /// Defaults to the horizon alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_times: Option<Vec<f64>>,
    /// Fixed KDE bandwidth; the rule of thumb is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub bandwidth_multiplier: f64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec { mode: ModeName::MeanField, snapshot_times: None, bandwidth: None, bandwidth_multiplier: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub n_t: usize,
    pub r_max: f64,
    pub n_r: usize,
    /// Constant drift magnitude used for the sharp density bound.
    pub drift: f64,
    /// Aronson constant; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aronson_m: Option<f64>,
    /// Integration radius and singularity exponent of the I/J audits.
    pub rho: f64,
    pub gamma: f64,
    /// Test integrand `amp e^{-|y|^2/(2 sigma^2)}`.
    pub f_amp: f64,
    pub f_sigma: f64,
    pub ij_times: Vec<f64>,
    pub samples: usize,
    pub dt: f64,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        BoundsSpec {
            t_min: 0.01,
            t_max: 1.0,
            n_t: 20,
            r_max: 5.0,
            n_r: 50,
            drift: 0.0,
            aronson_m: None,
            rho: 1.0,
            gamma: 1.0,
            f_amp: 1.0,
            f_sigma: 0.5,
            ij_times: vec![0.01, 0.1, 1.0],
            samples: 20_000,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Read(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Range { field: &'static str, message: String },
}

fn range(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range { field, message: message.into() }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range(field, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config re-serialized with every default filled in.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=3).contains(&self.d) {
            return Err(range("d", format!("must be 1, 2 or 3, got {}", self.d)));
        }
        positive("nu", self.nu)?;
        match self.kernel.name {
            KernelName::BiotSavart2d if self.d != 2 => return Err(range("kernel.name", "biot_savart_2d needs d = 2")),
            KernelName::BiotSavart3d if self.d != 3 => return Err(range("kernel.name", "biot_savart_3d needs d = 3")),
            KernelName::Riesz => {
                let g = self.kernel.gamma.ok_or_else(|| range("kernel.gamma", "required for riesz"))?;
                if !(0.0..self.d as f64).contains(&g) {
                    return Err(range("kernel.gamma", format!("must lie in [0, {}), got {g}", self.d)));
                }
            }
            KernelName::Green if self.d < 2 => return Err(range("kernel.name", "green needs d >= 2")),
            _ => {}
        }
        if self.kernel.name != KernelName::Riesz && self.kernel.gamma.is_some() {
            return Err(range("kernel.gamma", "only valid for riesz"));
        }
        if let Some(c) = self.kernel.cutoff {
            positive("kernel.cutoff", c)?;
        }
        match &self.omega0 {
            Omega0Spec::LambOseen { circulation, t0, mass_tol } => {
                if self.d != 2 {
                    return Err(range("omega0.kind", "lamb_oseen needs d = 2"));
                }
                if !circulation.is_finite() {
                    return Err(range("omega0.circulation", "must be finite"));
                }
                positive("omega0.t0", *t0)?;
                if !(*mass_tol > 0.0 && *mass_tol < 1.0) {
                    return Err(range("omega0.mass_tol", format!("must lie in (0, 1), got {mass_tol}")));
                }
            }
            Omega0Spec::GaussianBlob { amplitude, sigma, center, support_radius } => {
                let comps = if self.d == 2 { 1 } else { self.d };
                if amplitude.len() != comps {
                    return Err(range("omega0.amplitude", format!("needs {comps} components, got {}", amplitude.len())));
                }
                positive("omega0.sigma", *sigma)?;
                if let Some(c) = center {
                    if c.len() != self.d {
                        return Err(range("omega0.center", format!("needs {} components, got {}", self.d, c.len())));
                    }
                }
                if let Some(r) = support_radius {
                    positive("omega0.support_radius", *r)?;
                }
            }
            Omega0Spec::Zero => {}
        }
        positive("grid.radius", self.grid.radius)?;
        positive("grid.h", self.grid.h)?;
        positive("grid.horizon", self.grid.horizon)?;
        positive("grid.dt", self.grid.dt)?;
        let cells = 2.0 * self.grid.radius / self.grid.h;
        if (cells - cells.round()).abs() > 1e-9 * cells || cells.round() < 2.0 {
            return Err(range("grid.h", "must divide 2 * grid.radius into at least 2 cells"));
        }
        let slices = self.grid.horizon / self.grid.dt;
        if (slices - slices.round()).abs() > 1e-9 * slices || slices.round() < 1.0 {
            return Err(range("grid.dt", "must divide grid.horizon"));
        }
        if let Some(dt) = self.solver.dt {
            positive("solver.dt", dt)?;
            let s = self.grid.dt / dt;
            if (s - s.round()).abs() > 1e-9 * s || s.round() < 1.0 {
                return Err(range("solver.dt", "must divide grid.dt"));
            }
        }
        if self.solver.substeps == 0 {
            return Err(range("solver.substeps", "must be >= 1"));
        }
        positive("solver.eps", self.solver.eps)?;
        if self.solver.n_copies == 0 {
            return Err(range("solver.n_copies", "must be >= 1"));
        }
        if self.solver.paths_per_point == 0 {
            return Err(range("solver.paths_per_point", "must be >= 1"));
        }
        positive("solver.blowup_factor", self.solver.blowup_factor)?;
        let c = &self.constants;
        for (field, v) in [("constants.c0", c.c0), ("constants.c1", c.c1), ("constants.cinf", c.cinf)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(range(field, format!("must be nonnegative and finite, got {v}")));
                }
            }
        }
        if let Some(g) = c.gamma1 {
            if !(0.0..self.d as f64).contains(&g) {
                return Err(range("constants.gamma1", format!("must lie in [0, {}), got {g}", self.d)));
            }
        }
        if let Some(q) = c.q {
            let top = if self.d == 1 { f64::INFINITY } else { self.d as f64 / (self.d as f64 - 1.0) };
            if !(q > 1.0 && q < top) {
                return Err(range("constants.q", format!("must lie in (1, {top}), got {q}")));
            }
        }
        if let Some(k) = c.kappa {
            positive("constants.kappa", k)?;
        }
        if let Some(a) = c.alpha {
            if !(a > 1.0 && a.is_finite()) {
                return Err(range("constants.alpha", format!("must exceed 1, got {a}")));
            }
        }
        if let Some(cb) = c.c_beta {
            positive("constants.c_beta", cb)?;
        }
        if let Some(tol) = self.tolerances.tol_fp {
            positive("tolerances.tol_fp", tol)?;
        }
        if self.tolerances.max_iter == 0 {
            return Err(range("tolerances.max_iter", "must be >= 1"));
        }
        if let Some(times) = &self.simulate.snapshot_times {
            if times.is_empty() {
                return Err(range("simulate.snapshot_times", "must not be empty"));
            }
            if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                return Err(range("simulate.snapshot_times", "must be nonnegative and finite"));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(range("simulate.snapshot_times", "must be strictly increasing"));
            }
        }
        if let Some(h) = self.simulate.bandwidth {
            positive("simulate.bandwidth", h)?;
        }
        positive("simulate.bandwidth_multiplier", self.simulate.bandwidth_multiplier)?;
        let b = &self.bounds;
        positive("bounds.t_min", b.t_min)?;
        if !(b.t_max >= b.t_min && b.t_max.is_finite()) {
            return Err(range("bounds.t_max", "must be finite and >= bounds.t_min"));
        }
        if b.n_t == 0 || b.n_r == 0 {
            return Err(range("bounds.n_t", "bounds.n_t and bounds.n_r must be >= 1"));
        }
        if !(b.r_max >= 0.0 && b.r_max.is_finite()) {
            return Err(range("bounds.r_max", "must be nonnegative and finite"));
        }
        if !(b.drift >= 0.0 && b.drift.is_finite()) {
            return Err(range("bounds.drift", "must be nonnegative and finite"));
        }
        if let Some(m) = b.aronson_m {
            if !(m >= 1.0 && m.is_finite()) {
                return Err(range("bounds.aronson_m", format!("must be >= 1, got {m}")));
            }
        }
        positive("bounds.rho", b.rho)?;
        if !(b.gamma >= 0.0 && b.gamma < self.d as f64) {
            return Err(range("bounds.gamma", format!("must lie in [0, {}), got {}", self.d, b.gamma)));
        }
        positive("bounds.f_sigma", b.f_sigma)?;
        if !b.f_amp.is_finite() {
            return Err(range("bounds.f_amp", "must be finite"));
        }
        if b.ij_times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(range("bounds.ij_times", "must be positive and finite"));
        }
        if b.samples < 100 {
            return Err(range("bounds.samples", "must be >= 100"));
        }
        positive("bounds.dt", b.dt)?;
        Ok(())
    }

    pub fn cutoff(&self) -> f64 {
        self.kernel.cutoff.unwrap_or(0.25 * self.solver.eps)
    }

    pub fn build_kernel(&self) -> rvm_core::Result<SingularKernel> {
        let kind = match self.kernel.name {
            KernelName::BiotSavart3d => BuiltinKernel::BiotSavart3d,
            KernelName::BiotSavart2d => BuiltinKernel::BiotSavart2d,
            KernelName::Riesz => BuiltinKernel::Riesz { gamma: self.kernel.gamma.unwrap_or(0.0) },
            KernelName::Green => BuiltinKernel::Green,
        };
        let norm = match self.kernel.normalization {
            NormalizationName::QuarterPi => Normalization::QuarterPi,
            NormalizationName::Unnormalized => Normalization::Unnormalized,
        };
        make_builtin_kernel(kind, self.d, norm)?.with_cutoff(self.cutoff())
    }

    pub fn build_field(&self) -> rvm_core::Result<VorticityField> {
        match &self.omega0 {
            Omega0Spec::LambOseen { circulation, t0, mass_tol } => {
                VorticityField::lamb_oseen(*circulation, *t0, self.nu, *mass_tol)
            }
            Omega0Spec::GaussianBlob { amplitude, sigma, center, support_radius } => {
                let mut amp: Point = [0.0; 3];
                amp[..amplitude.len()].copy_from_slice(amplitude);
                let c = center.as_deref().map(rvm_core::point).unwrap_or([0.0; 3]);
                VorticityField::new(
                    self.d,
                    VorticityProfile::GaussianBlob { amplitude: amp, sigma: *sigma, center: c },
                    support_radius.unwrap_or(6.0 * sigma),
                )
            }
            Omega0Spec::Zero => VorticityField::zero(self.d),
        }
    }

    pub fn build_lattice(&self) -> rvm_core::Result<Lattice> {
        Lattice::from_field(&self.build_field()?, self.solver.eps)
    }

    pub fn space(&self) -> rvm_core::Result<SpaceGrid> {
        SpaceGrid::new(self.d, self.grid.radius, self.grid.h)
    }

    pub fn time(&self) -> rvm_core::Result<TimeGrid> {
        TimeGrid::new(self.grid.dt, (self.grid.horizon / self.grid.dt).round() as usize)
    }

    pub fn solver_dt(&self) -> f64 {
        self.solver.dt.unwrap_or(self.grid.dt)
    }

    pub fn estimator(&self) -> Estimator {
        match self.solver.estimator {
            EstimatorName::Direct => Estimator::DirectSimulation,
            EstimatorName::CameronMartin => Estimator::CameronMartinWeighted,
        }
    }

    pub fn bandwidth(&self) -> Bandwidth {
        match self.simulate.bandwidth {
            Some(h) => Bandwidth::Fixed(h),
            None => Bandwidth::RuleOfThumb { multiplier: self.simulate.bandwidth_multiplier },
        }
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.simulate.snapshot_times.clone().unwrap_or_else(|| vec![self.grid.horizon])
    }

    /// Structure-constant inputs: kernel and vorticity values unless overridden.
    pub fn constant_inputs(&self) -> rvm_core::Result<ConstantInputs> {
        let kernel = self.build_kernel()?;
        let field = self.build_field()?;
        let c = &self.constants;
        Ok(ConstantInputs {
            d: self.d,
            c0: c.c0.unwrap_or(kernel.c0()),
            c1: c.c1.unwrap_or_else(|| field.l1_norm()),
            cinf: c.cinf.unwrap_or_else(|| field.sup_norm()),
            gamma1: c.gamma1.unwrap_or(kernel.gamma1()),
            q: c.q,
            kappa: c.kappa,
            alpha: c.alpha,
            c_beta: c.c_beta,
        })
    }

    /// Lamb–Oseen parameters `(circulation, t0)` when `omega0` is a Lamb–Oseen vortex.
    pub fn lamb_oseen(&self) -> Option<(f64, f64)> {
        match self.omega0 {
            Omega0Spec::LambOseen { circulation, t0, .. } => Some((circulation, t0)),
            _ => None,
        }
    }
}
