//! Manufactured solution on the unit square with closed-form sources.
//!
//! Exact fields:
//!
//! ```text
//! p(x, y, t) = e^{t−T} (2 + x y² + x² sin y)
//! s(x, y, t) = e^{t−T} (2 + x² y² + cos x) / 8
//! ```
//!
//! with `κ = 1`, `κ_ℓ = (1 − s)²`, `κ_a = s²` and `p_c = c ln s`. The
//! sources are derived by hand from the strong form
//!
//! ```text
//! −∇·(λκ∇p) + ∇·(λ_a κ ∇p_c) = q
//! φ ∂_t s + ∇·(λ_a κ p_c' ∇s) − ∇·(λ_a κ ∇p) = q_a
//! ```
//!
//! and checked against a finite-difference evaluation in the tests.

use crate::physics::{CapillaryModel, FluidModel, RelativePermeability};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unknown {
    Pressure,
    Saturation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedCase {
    pub t_final: f64,
    model: FluidModel,
    /// Capillary coefficient `c` in `p_c = c ln s`.
    c: f64,
}

impl ManufacturedCase {
    pub fn new(t_final: f64) -> Self {
        let model = FluidModel::manufactured();
        let c = match model.capillary {
            CapillaryModel::Log { coefficient } => coefficient,
            _ => unreachable!(),
        };
        debug_assert_eq!(model.relperm, RelativePermeability::Manufactured);
        ManufacturedCase { t_final, model, c }
    }

    pub fn model(&self) -> &FluidModel {
        &self.model
    }

    #[inline]
    fn time_factor(&self, t: f64) -> f64 {
        (t - self.t_final).exp()
    }

    pub fn pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t) * (2.0 + x * y * y + x * x * y.sin())
    }

    pub fn saturation(&self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t) * (2.0 + x * x * y * y + x.cos()) / 8.0
    }

    pub fn exact(&self, which: Unknown, x: f64, y: f64, t: f64) -> f64 {
        match which {
            Unknown::Pressure => self.pressure(x, y, t),
            Unknown::Saturation => self.saturation(x, y, t),
        }
    }

    /// Dirichlet data: the trace of the exact solution.
    pub fn dirichlet_value(&self, which: Unknown, x: f64, y: f64, t: f64) -> f64 {
        self.exact(which, x, y, t)
    }

    pub fn grad_pressure(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let e = self.time_factor(t);
        [e * (y * y + 2.0 * x * y.sin()), e * (2.0 * x * y + x * x * y.cos())]
    }

    pub fn grad_saturation(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let e = self.time_factor(t) / 8.0;
        [e * (2.0 * x * y * y - x.sin()), e * 2.0 * x * x * y]
    }

    pub fn grad(&self, which: Unknown, x: f64, y: f64, t: f64) -> [f64; 2] {
        match which {
            Unknown::Pressure => self.grad_pressure(x, y, t),
            Unknown::Saturation => self.grad_saturation(x, y, t),
        }
    }

    pub fn laplacian_pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t) * (2.0 * y.sin() + 2.0 * x - x * x * y.sin())
    }

    pub fn laplacian_saturation(&self, x: f64, y: f64, t: f64) -> f64 {
        self.time_factor(t) / 8.0 * (2.0 * y * y - x.cos() + 2.0 * x * x)
    }

    /// `∂_t s = s` because of the separable `e^t` factor.
    pub fn dsdt(&self, x: f64, y: f64, t: f64) -> f64 {
        self.saturation(x, y, t)
    }

    /// Divergence of `λ_a κ ∇p_c = (c/μ_a) s ∇s`.
    fn capillary_divergence(&self, s: f64, gs: [f64; 2], lap_s: f64) -> f64 {
        self.c / self.model.mu_aqueous * (gs[0] * gs[0] + gs[1] * gs[1] + s * lap_s)
    }

    /// Source terms `(q, q_a)` of the pressure and saturation equations.
    pub fn sources(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let m = &self.model;
        let s = self.saturation(x, y, t);
        let gs = self.grad_saturation(x, y, t);
        let gp = self.grad_pressure(x, y, t);
        let lap_p = self.laplacian_pressure(x, y, t);
        let lap_s = self.laplacian_saturation(x, y, t);
        let gs_gp = gs[0] * gp[0] + gs[1] * gp[1];

        let lambda_a = s * s / m.mu_aqueous;
        let lambda_l = (1.0 - s) * (1.0 - s) / m.mu_liquid;
        let dlambda_a = 2.0 * s / m.mu_aqueous;
        let dlambda_l = -2.0 * (1.0 - s) / m.mu_liquid;
        let cap = self.capillary_divergence(s, gs, lap_s);

        let q = -((dlambda_a + dlambda_l) * gs_gp + (lambda_a + lambda_l) * lap_p) + cap;
        let q_a = m.porosity * self.dsdt(x, y, t) + cap - (dlambda_a * gs_gp + lambda_a * lap_p);
        (q, q_a)
    }

    /// Liquid-phase source `q_ℓ` from `φ ∂_t(1 − s) − ∇·(λ_ℓ κ ∇p) = q_ℓ`.
    pub fn liquid_source(&self, x: f64, y: f64, t: f64) -> f64 {
        let m = &self.model;
        let s = self.saturation(x, y, t);
        let gs = self.grad_saturation(x, y, t);
        let gp = self.grad_pressure(x, y, t);
        let lambda_l = (1.0 - s) * (1.0 - s) / m.mu_liquid;
        let dlambda_l = -2.0 * (1.0 - s) / m.mu_liquid;
        -m.porosity * self.dsdt(x, y, t)
            - (dlambda_l * (gs[0] * gp[0] + gs[1] * gp[1]) + lambda_l * self.laplacian_pressure(x, y, t))
    }
}
