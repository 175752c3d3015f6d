//! Constitutive relations of the two-phase system: relative permeabilities,
//! mobilities, capillary pressure, the mixing free energy and its continuous
//! and discrete chemical potentials.
//!
//! Saturation always means the aqueous saturation `s`; the liquid
//! saturation is `1 - s`.

use thiserror::Error;

/// Lower clamp applied to saturations before any log or power evaluation.
pub const S_MIN: f64 = 1e-10;
/// Upper clamp applied to saturations before any log or power evaluation.
pub const S_MAX: f64 = 1.0 - 1e-10;

/// Below this increment the discrete chemical potential falls back to the
/// continuous one at the midpoint.
pub const NU_HALF_DEGENERATE: f64 = 1e-8;

/// Capillary coefficient of the manufactured-solution model, `6.3 / ln 0.01`.
pub fn log_capillary_coefficient() -> f64 {
    6.3 / 0.01f64.ln()
}

#[inline]
pub fn clamp_saturation(s: f64) -> f64 {
    s.clamp(S_MIN, S_MAX)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("saturation is not finite")]
    NonFinite,
    #[error("saturation {0} outside the admissible range")]
    OutOfRange(f64),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Liquid,
    Aqueous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelativePermeability {
    /// `κ_ℓ = s_ℓ (s_ℓ + s_a)(1 − s_a) = (1 − s)²`, `κ_a = s²`.
    Manufactured,
    /// Brooks–Corey with pore-size index `λ`:
    /// `κ_ℓ = (1 − s)²(1 − s^{(2+λ)/λ})`, `κ_a = s^{(2+3λ)/λ}`.
    BrooksCorey { pore_index: f64 },
    /// Saturation-independent values, for tests and frozen-coefficient runs.
    Constant { liquid: f64, aqueous: f64 },
}

impl RelativePermeability {
    pub fn liquid(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        match *self {
            RelativePermeability::Manufactured => (1.0 - s) * (1.0 - s),
            RelativePermeability::BrooksCorey { pore_index } => {
                let e = (2.0 + pore_index) / pore_index;
                (1.0 - s) * (1.0 - s) * (1.0 - s.powf(e))
            }
            RelativePermeability::Constant { liquid, .. } => liquid,
        }
    }

    pub fn aqueous(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        match *self {
            RelativePermeability::Manufactured => s * s,
            RelativePermeability::BrooksCorey { pore_index } => s.powf((2.0 + 3.0 * pore_index) / pore_index),
            RelativePermeability::Constant { aqueous, .. } => aqueous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapillaryModel {
    /// `p_c = c ln s`.
    Log { coefficient: f64 },
    /// `p_c = p_e s^{−e}`.
    BrooksCorey { entry_pressure: f64, exponent: f64 },
    /// `p_c = intercept + slope·s`; constant derivative.
    Linear { intercept: f64, slope: f64 },
}

impl CapillaryModel {
    pub fn manufactured() -> Self {
        CapillaryModel::Log {
            coefficient: log_capillary_coefficient(),
        }
    }

    /// Capillary pressure with the saturation clamped.
    pub fn pressure(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        match *self {
            CapillaryModel::Log { coefficient } => coefficient * s.ln(),
            CapillaryModel::BrooksCorey { entry_pressure, exponent } => entry_pressure * s.powf(-exponent),
            CapillaryModel::Linear { intercept, slope } => intercept + slope * s,
        }
    }

    /// `dp_c/ds` with the saturation clamped.
    pub fn derivative(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        match *self {
            CapillaryModel::Log { coefficient } => coefficient / s,
            CapillaryModel::BrooksCorey { entry_pressure, exponent } => {
                -exponent * entry_pressure * s.powf(-exponent - 1.0)
            }
            CapillaryModel::Linear { slope, .. } => slope,
        }
    }
}

/// Constant parameters of the mixing free energy
/// `F(s) = γ_a s(ln s − 1) + γ_ℓ (1−s)(ln(1−s) − 1) + γ_aℓ s(1−s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub gamma_a: f64,
    pub gamma_l: f64,
    pub gamma_al: f64,
}

impl EnergyParams {
    pub fn new(gamma_a: f64, gamma_l: f64, gamma_al: f64) -> Self {
        EnergyParams {
            gamma_a,
            gamma_l,
            gamma_al,
        }
    }

    /// The parameters for which `ν = −p_c` holds with the logarithmic
    /// capillary model `p_c = (6.3 / ln 0.01) ln s`.
    pub fn consistent_with_log() -> Self {
        EnergyParams::new(-log_capillary_coefficient(), 0.0, 0.0)
    }

    pub fn zero() -> Self {
        EnergyParams::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.gamma_a.is_finite() && self.gamma_l.is_finite() && self.gamma_al.is_finite()
    }

    /// Free energy density `F(s)`.
    pub fn free_energy(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        let u = 1.0 - s;
        let mut f = 0.0;
        if self.gamma_a != 0.0 {
            f += self.gamma_a * s * (s.ln() - 1.0);
        }
        if self.gamma_l != 0.0 {
            f += self.gamma_l * u * (u.ln() - 1.0);
        }
        f + self.gamma_al * s * u
    }

    /// Chemical potential `ν(s) = F'(s)`.
    pub fn nu(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        let mut v = self.gamma_al * (1.0 - 2.0 * s);
        if self.gamma_a != 0.0 {
            v += self.gamma_a * s.ln();
        }
        if self.gamma_l != 0.0 {
            v -= self.gamma_l * (1.0 - s).ln();
        }
        v
    }

    /// `F''(s)`.
    pub fn d2(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        self.gamma_a / s + self.gamma_l / (1.0 - s) - 2.0 * self.gamma_al
    }

    /// `F'''(s)`.
    pub fn d3(&self, s: f64) -> f64 {
        let s = clamp_saturation(s);
        -self.gamma_a / (s * s) + self.gamma_l / ((1.0 - s) * (1.0 - s))
    }

    /// Discrete chemical potential between two saturation levels.
    ///
    /// Satisfies `F(b) − F(a) = ν_half(a, b)·(b − a)` up to round-off and is
    /// symmetric in its arguments. Logarithm differences are formed with
    /// `ln_1p` so the quotient stays accurate for small increments.
    pub fn nu_half(&self, s_old: f64, s_new: f64) -> f64 {
        let a = clamp_saturation(s_old);
        let b = clamp_saturation(s_new);
        // Order the arguments so the result is bitwise symmetric.
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let delta = b - a;
        let m = 0.5 * (a + b);
        if delta < NU_HALF_DEGENERATE {
            return self.nu(m);
        }
        let mut v = self.gamma_al * (1.0 - 2.0 * m);
        if self.gamma_a != 0.0 {
            let dlog = (delta / a).ln_1p();
            v += self.gamma_a * (0.5 * (b.ln() + a.ln()) + m * dlog / delta - 1.0);
        }
        if self.gamma_l != 0.0 {
            let (la, lb) = ((1.0 - a).ln(), (1.0 - b).ln());
            let dlog = (-delta / (1.0 - a)).ln_1p();
            v += self.gamma_l * (-0.5 * (lb + la) + (1.0 - m) * dlog / delta + 1.0);
        }
        v
    }

    /// Partial derivatives `(∂ν_half/∂s_old, ∂ν_half/∂s_new)`.
    pub fn nu_half_partials(&self, s_old: f64, s_new: f64) -> (f64, f64) {
        let a = clamp_saturation(s_old);
        let b = clamp_saturation(s_new);
        let delta = b - a;
        if delta.abs() < 1e-5 {
            let m = 0.5 * (a + b);
            let half = 0.5 * self.d2(m);
            let skew = self.d3(m) * delta / 12.0;
            return (half - skew, half + skew);
        }
        let v = self.nu_half(a, b);
        ((v - self.nu(a)) / delta, (self.nu(b) - v) / delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidModel {
    pub porosity: f64,
    pub mu_liquid: f64,
    pub mu_aqueous: f64,
    pub relperm: RelativePermeability,
    pub capillary: CapillaryModel,
    /// Free-energy parameters, present only when they are consistent with
    /// the capillary model.
    pub energy: Option<EnergyParams>,
}

impl FluidModel {
    /// Parameters of the manufactured-solution problem.
    pub fn manufactured() -> Self {
        FluidModel {
            porosity: 0.2,
            mu_liquid: 0.75,
            mu_aqueous: 0.5,
            relperm: RelativePermeability::Manufactured,
            capillary: CapillaryModel::manufactured(),
            energy: Some(EnergyParams::consistent_with_log()),
        }
    }

    /// Brooks–Corey water flood of the quarter-five-spot problem.
    pub fn quarter_five_spot() -> Self {
        FluidModel {
            porosity: 0.2,
            mu_liquid: 2e-3,
            mu_aqueous: 5e-4,
            relperm: RelativePermeability::BrooksCorey { pore_index: 3.0 },
            capillary: CapillaryModel::BrooksCorey {
                entry_pressure: 5e3,
                exponent: 1.0 / 3.0,
            },
            energy: None,
        }
    }

    pub fn check_parameters(&self) -> Result<(), PhysicsError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PhysicsError::InvalidParameter(format!("{name} = {v} must be positive")))
            }
        };
        positive("porosity", self.porosity)?;
        positive("mu_liquid", self.mu_liquid)?;
        positive("mu_aqueous", self.mu_aqueous)?;
        if let RelativePermeability::BrooksCorey { pore_index } = self.relperm {
            positive("pore_index", pore_index)?;
        }
        if let Some(e) = self.energy {
            if !e.is_finite() {
                return Err(PhysicsError::InvalidParameter("energy parameters must be finite".into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn lambda_liquid(&self, s: f64) -> f64 {
        self.relperm.liquid(s) / self.mu_liquid
    }

    #[inline]
    pub fn lambda_aqueous(&self, s: f64) -> f64 {
        self.relperm.aqueous(s) / self.mu_aqueous
    }

    #[inline]
    pub fn lambda_total(&self, s: f64) -> f64 {
        self.lambda_liquid(s) + self.lambda_aqueous(s)
    }

    #[inline]
    pub fn pc(&self, s: f64) -> f64 {
        self.capillary.pressure(s)
    }

    #[inline]
    pub fn dpc(&self, s: f64) -> f64 {
        self.capillary.derivative(s)
    }
}

fn check_finite(s: f64) -> Result<(), PhysicsError> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::NonFinite)
    }
}

/// Mobility `λ_j = κ_rj(s)/μ_j` of one phase.
pub fn mobility(model: &FluidModel, phase: Phase, s: f64) -> Result<f64, PhysicsError> {
    check_finite(s)?;
    Ok(match phase {
        Phase::Liquid => model.lambda_liquid(s),
        Phase::Aqueous => model.lambda_aqueous(s),
    })
}

pub fn capillary_pressure(model: &CapillaryModel, s: f64) -> Result<f64, PhysicsError> {
    check_finite(s)?;
    if s <= 0.0 {
        return Err(PhysicsError::OutOfRange(s));
    }
    Ok(model.pressure(s))
}

pub fn capillary_derivative(model: &CapillaryModel, s: f64) -> Result<f64, PhysicsError> {
    check_finite(s)?;
    if s <= 0.0 {
        return Err(PhysicsError::OutOfRange(s));
    }
    Ok(model.derivative(s))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveMobility { phase: Phase, s: f64 },
    NonPositiveTotalMobility { s: f64 },
    NonDecreasingCapillary { s: f64 },
    NonFinite { s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn empty() -> Self {
        Range {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn add(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }
}

/// Bounds and empirical Lipschitz constants of a model over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub lambda_liquid: Range,
    pub lambda_aqueous: Range,
    pub lambda_total: Range,
    /// Range of `−p_c'`.
    pub neg_dpc: Range,
    pub lipschitz_lambda_liquid: f64,
    pub lipschitz_lambda_aqueous: f64,
    pub lipschitz_pc: f64,
    pub violations: Vec<Violation>,
}

impl ModelReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks positivity of the mobilities and monotonicity of the capillary
/// pressure on the sampled saturations and measures how fast the
/// coefficients vary.
pub fn validate_model(model: &FluidModel, samples: &[f64]) -> ModelReport {
    let mut s: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    let mut report = ModelReport {
        lambda_liquid: Range::empty(),
        lambda_aqueous: Range::empty(),
        lambda_total: Range::empty(),
        neg_dpc: Range::empty(),
        lipschitz_lambda_liquid: 0.0,
        lipschitz_lambda_aqueous: 0.0,
        lipschitz_pc: 0.0,
        violations: samples
            .iter()
            .filter(|v| !v.is_finite())
            .map(|&v| Violation::NonFinite { s: v })
            .collect(),
    };
    for &si in &s {
        let (ll, la, dpc) = (model.lambda_liquid(si), model.lambda_aqueous(si), model.dpc(si));
        if !(ll.is_finite() && la.is_finite() && dpc.is_finite()) {
            report.violations.push(Violation::NonFinite { s: si });
            continue;
        }
        report.lambda_liquid.add(ll);
        report.lambda_aqueous.add(la);
        report.lambda_total.add(ll + la);
        report.neg_dpc.add(-dpc);
        if ll <= 0.0 {
            report.violations.push(Violation::NonPositiveMobility {
                phase: Phase::Liquid,
                s: si,
            });
        }
        if la <= 0.0 {
            report.violations.push(Violation::NonPositiveMobility {
                phase: Phase::Aqueous,
                s: si,
            });
        }
        if ll + la <= 0.0 {
            report.violations.push(Violation::NonPositiveTotalMobility { s: si });
        }
        if dpc >= 0.0 {
            report.violations.push(Violation::NonDecreasingCapillary { s: si });
        }
    }
    let lip = |f: &dyn Fn(f64) -> f64| {
        s.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| ((f(w[1]) - f(w[0])) / (w[1] - w[0])).abs())
            .fold(0.0, f64::max)
    };
    report.lipschitz_lambda_liquid = lip(&|x| model.lambda_liquid(x));
    report.lipschitz_lambda_aqueous = lip(&|x| model.lambda_aqueous(x));
    report.lipschitz_pc = lip(&|x| model.pc(x));
    report
}
