//! Energy bookkeeping, error series and convergence tables.

use std::io::{self, Write};

use crate::mesh::BoundaryTag;
use crate::mms::ManufacturedCase;
use crate::physics::{clamp_saturation, EnergyParams, FluidModel};
use crate::spatial::{self, BoundaryConditions, FeSpace, Field, Sources};
use crate::timestepping::{StepReport, StepperState};

/// Result of comparing `E(s^{n+1}) − E(s^n)` with the discrete-gradient sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainRuleCheck {
    pub energy_old: f64,
    pub energy_new: f64,
    /// `Σ_q w_q φ ν_half(s^n, s^{n+1}) (s^{n+1} − s^n)`.
    pub gradient_sum: f64,
    /// `E^{n+1} − E^n − gradient_sum`.
    pub residual: f64,
}

impl ChainRuleCheck {
    /// `1 + |E^{n+1}| + |E^n|`.
    pub fn scale(&self) -> f64 {
        1.0 + self.energy_new.abs() + self.energy_old.abs()
    }

    pub fn relative(&self) -> f64 {
        self.residual.abs() / self.scale()
    }
}

/// Discrete chain rule on the cell quadrature. `None` when the model has no
/// free energy consistent with its capillary pressure.
pub fn chain_rule_check(space: &FeSpace, model: &FluidModel, s_old: &Field, s_new: &Field) -> Option<ChainRuleCheck> {
    let params = model.energy?;
    Some(chain_rule_with(space, model.porosity, s_old, s_new, |a, b| params.nu_half(a, b), &params))
}

/// Same bookkeeping with an arbitrary two-point potential in place of
/// `ν_half`.
pub fn chain_rule_with(
    space: &FeSpace,
    porosity: f64,
    s_old: &Field,
    s_new: &Field,
    potential: impl Fn(f64, f64) -> f64,
    params: &EnergyParams,
) -> ChainRuleCheck {
    let qa = space.evaluate_at_quadrature(s_old);
    let qb = space.evaluate_at_quadrature(s_new);
    let energy_old = spatial::energy_from_quadrature(space, params, porosity, &qa);
    let energy_new = spatial::energy_from_quadrature(space, params, porosity, &qb);
    let gradient_sum = space.integrate(|gq| {
        let (a, b) = (qa.values[gq], qb.values[gq]);
        porosity * potential(a, b) * (clamp_saturation(b) - clamp_saturation(a))
    });
    ChainRuleCheck {
        energy_old,
        energy_new,
        gradient_sum,
        residual: energy_new - energy_old - gradient_sum,
    }
}

/// One row of the discrete energy balance of a midpoint step
/// `E^{n+1} − E^n + τ D = τ (S + B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
    /// `(E^{n+1} − E^n)/τ`.
    pub energy_rate: f64,
    /// `‖√(λ_ℓκ)∇p_ℓ‖² + ‖√(λ_aκ)∇p_a‖²` at the half step.
    pub dissipation: f64,
    /// `(q_ℓ, p_ℓ) + (q_a, p_a)`.
    pub source_supply: f64,
    /// `∮ (p_ℓ λ_ℓκ∇p_ℓ + p_a λ_aκ∇p_a)·n` over Dirichlet pressure edges.
    pub boundary_supply: f64,
    pub chain_rule_residual: f64,
    /// `E^{n+1} − E^n + τ D − τ (S + B)`.
    pub balance_residual: f64,
}

/// Inputs of one energy-balance row.
pub struct BalanceInput<'a> {
    pub step: usize,
    pub t_old: f64,
    pub tau: f64,
    pub s_old: &'a Field,
    pub s_new: &'a Field,
    /// Liquid pressure at the half step.
    pub p_half: &'a Field,
}

/// Assembles every term of the balance by quadrature, with
/// `p_a = ν_half + p_ℓ`. `None` when the model has no consistent energy.
pub fn energy_balance_row(
    space: &FeSpace,
    model: &FluidModel,
    sources: &Sources,
    bc: &BoundaryConditions,
    input: &BalanceInput<'_>,
) -> Option<EnergyRow> {
    let params = model.energy?;
    let chain = chain_rule_check(space, model, input.s_old, input.s_new)?;
    let tau = input.tau;
    let t_half = input.t_old + 0.5 * tau;
    let nq = space.nq();
    let qa = space.evaluate_at_quadrature(input.s_old);
    let qb = space.evaluate_at_quadrature(input.s_new);
    let qp = space.evaluate_at_quadrature(input.p_half);
    let (q, q_a) = sources.at_quadrature(space, t_half);

    // Potentials and their gradients at one evaluation point.
    let potentials = |a: f64, b: f64, ga: [f64; 2], gb: [f64; 2], p: f64, gp: [f64; 2]| {
        let nu = params.nu_half(a, b);
        let (da, db) = params.nu_half_partials(a, b);
        let g_nu = [da * ga[0] + db * gb[0], da * ga[1] + db * gb[1]];
        (nu + p, [g_nu[0] + gp[0], g_nu[1] + gp[1]])
    };

    let mut dissipation = 0.0;
    let mut source_supply = 0.0;
    for (gq, &w) in space.jxw().iter().enumerate() {
        let kappa = space.mesh().permeability(gq / nq);
        let (a, b) = (qa.values[gq], qb.values[gq]);
        let s_mid = 0.5 * (a + b);
        let (pa, gpa) = potentials(a, b, qa.grads[gq], qb.grads[gq], qp.values[gq], qp.grads[gq]);
        let gpl = qp.grads[gq];
        let ll = model.lambda_liquid(s_mid) * kappa;
        let la = model.lambda_aqueous(s_mid) * kappa;
        dissipation += w * (ll * (gpl[0] * gpl[0] + gpl[1] * gpl[1]) + la * (gpa[0] * gpa[0] + gpa[1] * gpa[1]));
        let q_l = q[gq] - q_a[gq];
        source_supply += w * (q_l * qp.values[gq] + q_a[gq] * pa);
    }

    let dirichlet_tags: Vec<BoundaryTag> = bc.pressure.iter().map(|(t, _)| *t).collect();
    let ea = space.evaluate_on_edges(input.s_old);
    let eb = space.evaluate_on_edges(input.s_new);
    let ep = space.evaluate_on_edges(input.p_half);
    let neq = space.nq_edge();
    let mut boundary_supply = 0.0;
    for (ei, e) in space.boundary_edges().iter().enumerate() {
        if !dirichlet_tags.contains(&e.tag) && !dirichlet_tags.contains(&BoundaryTag::DirichletAll) {
            continue;
        }
        let kappa = space.mesh().permeability(e.cell);
        for k in 0..neq {
            let i = ei * neq + k;
            let (a, b) = (ea.values[i], eb.values[i]);
            let s_mid = 0.5 * (a + b);
            let (pa, gpa) = potentials(a, b, ea.grads[i], eb.grads[i], ep.values[i], ep.grads[i]);
            let (pl, gpl) = (ep.values[i], ep.grads[i]);
            let n = e.normal;
            let flux_l = model.lambda_liquid(s_mid) * kappa * (gpl[0] * n[0] + gpl[1] * n[1]);
            let flux_a = model.lambda_aqueous(s_mid) * kappa * (gpa[0] * n[0] + gpa[1] * n[1]);
            boundary_supply += e.weights[k] * (pl * flux_l + pa * flux_a);
        }
    }

    let delta = chain.energy_new - chain.energy_old;
    Some(EnergyRow {
        step: input.step,
        t: input.t_old + tau,
        energy: chain.energy_new,
        energy_rate: delta / tau,
        dissipation,
        source_supply,
        boundary_supply,
        chain_rule_residual: chain.residual,
        balance_residual: delta + tau * dissipation - tau * (source_supply + boundary_supply),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyLedger {
    pub initial_energy: f64,
    pub rows: Vec<EnergyRow>,
}

impl EnergyLedger {
    pub fn new(initial_energy: f64) -> Self {
        EnergyLedger {
            initial_energy,
            rows: Vec::new(),
        }
    }

    /// Largest `|chain-rule residual| / (1 + |E^{n+1}| + |E^n|)`.
    pub fn max_relative_chain_rule(&self) -> f64 {
        let mut prev = self.initial_energy;
        let mut worst: f64 = 0.0;
        for r in &self.rows {
            worst = worst.max(r.chain_rule_residual.abs() / (1.0 + r.energy.abs() + prev.abs()));
            prev = r.energy;
        }
        worst
    }

    /// Whether `E` never increases, allowing round-off of relative size `tol`.
    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        let mut prev = self.initial_energy;
        for r in &self.rows {
            if r.energy > prev + tol * (1.0 + prev.abs()) {
                return false;
            }
            prev = r.energy;
        }
        true
    }

    /// Largest `|balance residual| / τ`.
    pub fn max_balance_rate(&self, tau: f64) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.balance_residual.abs() / tau))
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(
            w,
            "step,t,energy,energy_rate,dissipation,source_supply,boundary_supply,chain_rule_residual,balance_residual"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e}",
                r.step,
                fmt_t(r.t),
                r.energy,
                r.energy_rate,
                r.dissipation,
                r.source_supply,
                r.boundary_supply,
                r.chain_rule_residual,
                r.balance_residual
            )?;
        }
        Ok(())
    }
}

fn fmt_t(t: f64) -> String {
    format!("{:.10}", t).trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Per-step log: `step,t,iterations,increment_pl,increment_sa,linear_solves,bootstrap`.
/// Wall time is left out so repeated runs write identical files.
pub fn write_step_log(reports: &[StepReport], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "step,t,iterations,increment_pl,increment_sa,linear_solves,bootstrap")?;
    for r in reports {
        let (dp, ds) = r.subiteration.as_ref().map_or((String::new(), String::new()), |s| {
            let last = |v: &[f64]| v.last().map_or(String::new(), |d| format!("{d:.6e}"));
            (last(&s.pressure_increments), last(&s.saturation_increments))
        });
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.n,
            fmt_t(r.t),
            r.iterations(),
            dp,
            ds,
            r.linear_solves,
            u8::from(r.bootstrap)
        )?;
    }
    Ok(())
}

/// Energy of the exact saturation, using its values at the quadrature
/// points directly.
pub fn exact_energy(space: &FeSpace, params: &EnergyParams, porosity: f64, s: impl Fn(f64, f64) -> f64) -> f64 {
    let pts = space.quadrature_points();
    space.integrate(|gq| porosity * params.free_energy(s(pts[gq][0], pts[gq][1])))
}

/// Per-step L² errors against a manufactured solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSeries {
    pub t: Vec<f64>,
    pub err_p: Vec<f64>,
    pub err_s: Vec<f64>,
    /// `|E_h − E| / |E|`, when the model carries an energy.
    pub energy_rel: Vec<f64>,
}

impl ErrorSeries {
    /// Records the errors of `state`. The pressure error is taken at the
    /// time the stored pressure refers to.
    pub fn record(&mut self, space: &FeSpace, case: &ManufacturedCase, state: &StepperState) {
        let (t, tp) = (state.t, state.p_time);
        self.t.push(t);
        self.err_p.push(spatial::l2_error(space, &state.p, |x, y| case.pressure(x, y, tp)));
        self.err_s.push(spatial::l2_error(space, &state.s, |x, y| case.saturation(x, y, t)));
        if let Some(params) = case.model().energy {
            let phi = case.model().porosity;
            let e_h = spatial::energy_integral(space, &params, phi, &state.s);
            let e = exact_energy(space, &params, phi, |x, y| case.saturation(x, y, t));
            self.energy_rel.push((e_h - e).abs() / e.abs());
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn max_p(&self) -> f64 {
        max_of(&self.err_p)
    }

    pub fn max_s(&self) -> f64 {
        max_of(&self.err_s)
    }

    pub fn max_energy(&self) -> f64 {
        max_of(&self.energy_rel)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "t,err_pl,err_sa,energy_rel")?;
        for i in 0..self.len() {
            let e = self.energy_rel.get(i).map_or(String::new(), |v| format!("{v:.6e}"));
            writeln!(w, "{},{:.6e},{:.6e},{}", fmt_t(self.t[i]), self.err_p[i], self.err_s[i], e)?;
        }
        Ok(())
    }
}

/// Maximum ignoring nothing: a NaN entry makes the result NaN.
fn max_of(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, &x| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x) })
}

/// Final-time errors of one run in a refinement study.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub tau: f64,
    pub h: f64,
    pub dofs: usize,
    pub err_p: f64,
    pub err_s: f64,
    /// Failure cause when the run did not finish.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub error: ErrorRow,
    pub rate_p: Option<f64>,
    pub rate_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

/// `log(e_{k−1}/e_k) / log(h_{k−1}/h_k)`, undefined for zero, failed or
/// non-finite errors.
pub fn observed_rate(e_prev: f64, e: f64, h_prev: f64, h: f64) -> Option<f64> {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if !(ok(e_prev) && ok(e) && ok(h_prev) && ok(h)) || h_prev == h {
        return None;
    }
    Some((e_prev / e).ln() / (h_prev / h).ln())
}

pub fn convergence_rates(rows: Vec<ErrorRow>) -> ConvergenceTable {
    let mut out: Vec<ConvergenceRow> = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let (rate_p, rate_s) = match k {
            0 => (None, None),
            _ => {
                let prev = &rows[k - 1];
                (
                    observed_rate(prev.err_p, row.err_p, prev.h, row.h),
                    observed_rate(prev.err_s, row.err_s, prev.h, row.h),
                )
            }
        };
        out.push(ConvergenceRow {
            error: row.clone(),
            rate_p,
            rate_s,
        });
    }
    ConvergenceTable { rows: out }
}

impl ConvergenceTable {
    pub fn last_rates(&self) -> (Option<f64>, Option<f64>) {
        self.rows.last().map_or((None, None), |r| (r.rate_p, r.rate_s))
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "tau,dofs,err_pl,rate_pl,err_sa,rate_sa,status")?;
        let rate = |r: Option<f64>| r.map_or(String::new(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let e = &r.error;
            writeln!(
                w,
                "{},{},{:.6e},{},{:.6e},{},{}",
                fmt_t(e.tau),
                e.dofs,
                e.err_p,
                rate(r.rate_p),
                e.err_s,
                rate(r.rate_s),
                e.failure.as_deref().unwrap_or("ok")
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use crate::physics::EnergyParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space(n: usize, p: usize) -> FeSpace {
        FeSpace::new(Arc::new(Mesh::unit_square(n).unwrap()), p).unwrap()
    }

    fn random_smooth(space: &FeSpace, rng: &mut ChaCha8Rng) -> Field {
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        Field::interpolate(space, |x, y| 0.35 + 0.2 * (3.0 * a * x + b).sin() * (2.0 * c * y).cos())
    }

    #[test]
    fn chain_rule_trivial_and_exact() {
        let sp = space(8, 2);
        let model = FluidModel::manufactured();
        let s = Field::interpolate(&sp, |x, y| 0.3 + 0.1 * x * y);
        let c = chain_rule_check(&sp, &model, &s, &s).unwrap();
        assert_eq!(c.residual, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_smooth(&sp, &mut rng);
            let b = random_smooth(&sp, &mut rng);
            let c = chain_rule_check(&sp, &model, &a, &b).unwrap();
            assert!(c.relative() <= 1e-12, "{c:?}");
        }
    }

    #[test]
    fn chain_rule_negative_control() {
        let sp = space(8, 1);
        let model = FluidModel::manufactured();
        let params = model.energy.unwrap();
        let a = Field::interpolate(&sp, |x, y| 0.2 + 0.1 * x * y);
        let b = Field::interpolate(&sp, |x, y| 0.5 + 0.2 * x * x - 0.1 * y);
        let exact = chain_rule_check(&sp, &model, &a, &b).unwrap();
        let midpoint = chain_rule_with(&sp, model.porosity, &a, &b, |u, v| params.nu(0.5 * (u + v)), &params);
        assert!(exact.relative() < 1e-12);
        assert!(midpoint.relative() > 1e-5, "{midpoint:?}");
    }

    #[test]
    fn chain_rule_absent_without_energy() {
        let sp = space(2, 1);
        let s = Field::constant(&sp, 0.3);
        assert!(chain_rule_check(&sp, &FluidModel::quarter_five_spot(), &s, &s).is_none());
    }

    #[test]
    fn balance_terms_vanish_at_rest() {
        let sp = space(4, 1);
        let model = FluidModel::manufactured();
        let s = Field::constant(&sp, 0.4);
        let p = Field::constant(&sp, 2.0);
        let row = energy_balance_row(
            &sp,
            &model,
            &Sources::none(),
            &BoundaryConditions::no_flow(),
            &BalanceInput {
                step: 1,
                t_old: 0.0,
                tau: 0.1,
                s_old: &s,
                s_new: &s,
                p_half: &p,
            },
        )
        .unwrap();
        assert_eq!(row.energy_rate, 0.0);
        assert!(row.dissipation.abs() < 1e-20);
        assert_eq!(row.source_supply, 0.0);
        assert_eq!(row.boundary_supply, 0.0);
        assert!(row.balance_residual.abs() < 1e-20);
        let e = spatial::energy_integral(&sp, &EnergyParams::consistent_with_log(), 0.2, &s);
        assert!((row.energy - e).abs() < 1e-15);
    }

    #[test]
    fn rates() {
        let r = observed_rate(1.16e-2, 3.16e-3, 0.5, 0.25).unwrap();
        assert!((r - 1.88).abs() < 5e-3, "{r}");
        let r = observed_rate(3.19e-4, 1.53e-4, 0.5, 0.25).unwrap();
        assert!((r - 1.06).abs() < 5e-3, "{r}");
        assert_eq!(observed_rate(4.0, 1.0, 0.5, 0.25), Some(2.0));
        assert_eq!(observed_rate(0.0, 1.0, 0.5, 0.25), None);
        assert_eq!(observed_rate(f64::NAN, 1.0, 0.5, 0.25), None);

        let row = |h: f64, e: f64| ErrorRow {
            tau: h,
            h,
            dofs: 1,
            err_p: e,
            err_s: 3.0 * e,
            failure: None,
        };
        let t = convergence_rates(vec![row(0.5, 1.0), row(0.25, 0.25), row(0.125, 0.0625)]);
        assert_eq!(t.rows[0].rate_p, None);
        assert_eq!(t.last_rates(), (Some(2.0), Some(2.0)));
        let single = convergence_rates(vec![row(0.5, 1.0)]);
        assert_eq!(single.last_rates(), (None, None));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau,dofs,err_pl,rate_pl,err_sa,rate_sa,status\n0.5,1,"));
    }

    proptest::proptest! {
        #[test]
        fn rates_are_scale_invariant(e1 in 1e-8f64..1.0, e2 in 1e-8f64..1.0, c in 1e-3f64..1e3) {
            let a = observed_rate(e1, e2, 0.5, 0.25).unwrap();
            let b = observed_rate(c * e1, c * e2, 0.5, 0.25).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn error_series_of_exact_interpolant() {
        let case = ManufacturedCase::new(1.0);
        let sp = space(4, 2);
        let mut series = ErrorSeries::default();
        for n in 0..3 {
            let t = 0.25 * n as f64;
            let state = StepperState {
                p_time: t,
                ..StepperState::initial(
                    Field::interpolate(&sp, |x, y| case.pressure(x, y, t)),
                    Field::interpolate(&sp, |x, y| case.saturation(x, y, t)),
                )
            };
            let state = StepperState { t, n, ..state };
            series.record(&sp, &case, &state);
        }
        assert_eq!(series.len(), 3);
        // Only interpolation error remains.
        assert!(series.max_p() < 1e-3 && series.max_s() < 1e-3);
        assert!(series.max_energy() < 1e-4);
    }
}
