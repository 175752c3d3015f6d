//! Time integrators for the pressure/saturation system.
//!
//! The refactorized θ-method splits a step into a backward-Euler solve to
//! `t^{n+θ}` (decoupled by sequential subiterations) and a linear forward
//! extrapolation to `t^{n+1}`. `θ = 1/2` is the implicit midpoint rule (MP),
//! `θ = 1` plain backward Euler (BE). The time-lagging schemes TL1 and TL2
//! take one pressure and one saturation solve per step with coefficients
//! from previous levels.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::linalg::{DirectSolver, LinalgError, RESIDUAL_TOL};
use crate::physics::FluidModel;
use crate::spatial::{
    self, BoundaryConditions, FeSpace, Field, PressureCoefficients, SaturationCoefficients, Sources,
    SpatialError,
};

pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Saturations beyond this magnitude count as a blow-up.
pub const BLOW_UP_BOUND: f64 = 10.0;
/// The bootstrap step tightens the subiteration tolerance by this factor.
pub const BOOTSTRAP_TOL_FACTOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchemeKind {
    Theta(f64),
    Tl1,
    Tl2,
}

impl SchemeKind {
    pub const MP: SchemeKind = SchemeKind::Theta(0.5);
    pub const BE: SchemeKind = SchemeKind::Theta(1.0);

    /// The four schemes compared throughout.
    pub const STANDARD: [SchemeKind; 4] = [SchemeKind::MP, SchemeKind::BE, SchemeKind::Tl1, SchemeKind::Tl2];

    pub fn name(&self) -> String {
        match *self {
            SchemeKind::Theta(0.5) => "MP".into(),
            SchemeKind::Theta(1.0) => "BE".into(),
            SchemeKind::Theta(t) => format!("theta{t}"),
            SchemeKind::Tl1 => "TL1".into(),
            SchemeKind::Tl2 => "TL2".into(),
        }
    }

    /// Accepts `MP`, `BE`, `TL1`, `TL2` (any case) and `theta<value>`.
    pub fn parse(s: &str) -> Option<SchemeKind> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "mp" | "midpoint" => Some(SchemeKind::MP),
            "be" | "backward-euler" => Some(SchemeKind::BE),
            "tl1" => Some(SchemeKind::Tl1),
            "tl2" => Some(SchemeKind::Tl2),
            other => other
                .strip_prefix("theta")
                .and_then(|v| v.trim_start_matches(['=', ':']).parse::<f64>().ok())
                .map(SchemeKind::Theta),
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            SchemeKind::Theta(t) => Some(t),
            _ => None,
        }
    }

    /// Whether the first step is taken by the midpoint bootstrap.
    pub fn needs_bootstrap(&self) -> bool {
        !matches!(self, SchemeKind::Tl1)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub tau: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, tau: f64) -> Self {
        SchemeConfig {
            kind,
            tau,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        let bad = |m: String| Err(StepError::InvalidConfig(m));
        if let SchemeKind::Theta(t) = self.kind {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("theta must lie in (0, 1], got {t}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("time step must be positive, got {}", self.tau));
        }
        if !(self.tol > RESIDUAL_TOL && self.tol.is_finite()) {
            return bad(format!("tolerance {} must exceed the solver tolerance {RESIDUAL_TOL}", self.tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("blow-up at step {step}: {reason}")]
    BlowUp { step: usize, reason: String },
    #[error("subiteration did not converge in {iterations} iterations at step {step} (last increment {last_increment:.3e})")]
    NonConvergence {
        step: usize,
        iterations: usize,
        last_increment: f64,
    },
    #[error("missing history: {0}")]
    MissingHistory(&'static str),
    #[error("invalid scheme configuration: {0}")]
    InvalidConfig(String),
    #[error("linear solve failed at step {step}: {source}")]
    Linalg { step: usize, source: LinalgError },
    #[error(transparent)]
    Spatial(SpatialError),
}

impl StepError {
    /// Short machine-readable cause.
    pub fn cause(&self) -> &'static str {
        match self {
            StepError::BlowUp { .. } => "blow_up",
            StepError::NonConvergence { .. } => "nonconvergence",
            StepError::MissingHistory(_) => "missing_history",
            StepError::InvalidConfig(_) => "invalid_config",
            StepError::Linalg { .. } => "linear_solver",
            StepError::Spatial(_) => "spatial",
        }
    }

    /// Divergence of the discrete solution, as opposed to a usage error.
    pub fn is_numerical_failure(&self) -> bool {
        matches!(
            self,
            StepError::BlowUp { .. } | StepError::NonConvergence { .. } | StepError::Linalg { .. }
        )
    }
}

/// Everything that defines the continuous problem on a given space.
#[derive(Clone, Debug)]
pub struct Problem {
    pub space: Arc<FeSpace>,
    pub model: FluidModel,
    pub sources: Sources,
    pub bc: BoundaryConditions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepperState {
    pub n: usize,
    pub t: f64,
    /// `s^n`.
    pub s: Field,
    /// `s^{n−1}`.
    pub s_prev: Option<Field>,
    /// Most recent pressure, valid at `p_time`.
    pub p: Field,
    pub p_time: f64,
    /// θ-point pressures `(t, p)`, oldest first, at most two.
    pub theta_pressures: Vec<(f64, Field)>,
}

impl StepperState {
    /// State at `t = 0` without any history.
    pub fn initial(p0: Field, s0: Field) -> Self {
        StepperState {
            n: 0,
            t: 0.0,
            s: s0,
            s_prev: None,
            p: p0,
            p_time: 0.0,
            theta_pressures: Vec::new(),
        }
    }

    /// Latest θ-point pressure, if any.
    pub fn theta_pressure(&self) -> Option<&(f64, Field)> {
        self.theta_pressures.last()
    }

    fn push_theta_pressure(&mut self, t: f64, p: Field) {
        self.theta_pressures.push((t, p));
        if self.theta_pressures.len() > 2 {
            self.theta_pressures.remove(0);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubiterationReport {
    pub iterations: usize,
    pub pressure_increments: Vec<f64>,
    pub saturation_increments: Vec<f64>,
    pub converged: bool,
}

impl SubiterationReport {
    pub fn last_increment(&self) -> f64 {
        match (self.pressure_increments.last(), self.saturation_increments.last()) {
            (Some(p), Some(s)) => p.max(*s),
            _ => f64::INFINITY,
        }
    }

    /// Geometric decay ratio of the saturation increments, fitted by least
    /// squares to `log δ_i`. Needs at least three increments; the first is
    /// skipped since it measures the guess rather than the iteration.
    pub fn contraction_ratio(&self) -> Option<f64> {
        let inc: Vec<(f64, f64)> = self
            .saturation_increments
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, d)| **d > 0.0)
            .map(|(i, d)| (i as f64, d.ln()))
            .collect();
        if inc.len() < 2 {
            return None;
        }
        let n = inc.len() as f64;
        let mx = inc.iter().map(|p| p.0).sum::<f64>() / n;
        let my = inc.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = inc.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = inc.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some((sxy / sxx).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Index of the level reached by this step.
    pub n: usize,
    pub t: f64,
    pub scheme: SchemeKind,
    /// Present for θ-steps.
    pub subiteration: Option<SubiterationReport>,
    /// Set when the step was the midpoint bootstrap.
    pub bootstrap: bool,
    pub linear_solves: usize,
    pub wall_time: f64,
}

impl StepReport {
    /// Subiterations taken, or 1 for single-solve schemes.
    pub fn iterations(&self) -> usize {
        self.subiteration.as_ref().map_or(1, |r| r.iterations)
    }
}

/// Initial guesses: `s` linearly extrapolated to `t^{n+θ}` from the two
/// whole steps, `p` linearly extrapolated through the two stored θ-point
/// pressures.
pub fn initial_guess(state: &StepperState, theta: f64, tau: f64) -> Result<(Field, Field), StepError> {
    let s_prev = state.s_prev.as_ref().ok_or(StepError::MissingHistory("s^{n-1}"))?;
    // Steps are uniform, so the previous step equals the current one.
    let tau_prev = tau;
    let r = theta * tau / tau_prev;
    let s_guess = state.s.combine(1.0 + r, s_prev, -r);
    let t_target = state.t + theta * tau;
    let p_guess = match state.theta_pressures.as_slice() {
        [] => return Err(StepError::MissingHistory("theta-point pressure")),
        [(_, p)] => p.clone(),
        [.., (t1, p1), (t2, p2)] => {
            let w = (t_target - t1) / (t2 - t1);
            p2.combine(w, p1, 1.0 - w)
        }
    };
    Ok((p_guess, s_guess))
}

/// Extrapolation to the whole step: `s^{n+1} = s^{n+θ}/θ − (1−θ)/θ · s^n`.
pub fn forward_extrapolate(s_theta: &Field, s_n: &Field, theta: f64) -> Result<Field, StepError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(StepError::InvalidConfig(format!("theta must lie in (0, 1], got {theta}")));
    }
    if theta == 1.0 {
        return Ok(s_theta.clone());
    }
    Ok(s_theta.combine(1.0 / theta, s_n, -(1.0 - theta) / theta))
}

/// Below this norm an iterate is treated as zero and the increment is
/// measured in absolute terms.
const ZERO_NORM: f64 = 1e-12;
/// Increments are measured relative to at least this fraction of the
/// largest norm seen so far, so a field decaying to zero (the pressure of a
/// closed system at rest) is not judged against its own round-off.
const NORM_FLOOR: f64 = 1e-6;

fn relative_increment(space: &FeSpace, new: &Field, old: &Field, reference: &mut f64) -> f64 {
    let diff = spatial::l2_distance(space, new, old);
    let norm = spatial::l2_norm(space, new);
    *reference = reference.max(norm);
    let denom = norm.max(NORM_FLOOR * *reference);
    if denom > ZERO_NORM {
        diff / denom
    } else {
        diff
    }
}

fn check_blow_up(step: usize, what: &str, f: &Field, bound: Option<f64>) -> Result<(), StepError> {
    if !f.is_finite() {
        return Err(StepError::BlowUp {
            step,
            reason: format!("non-finite {what}"),
        });
    }
    if let Some(b) = bound {
        let m = f.max_abs();
        if m > b {
            return Err(StepError::BlowUp {
                step,
                reason: format!("|{what}| reached {m:.3e}"),
            });
        }
    }
    Ok(())
}

/// Advances a [`StepperState`] with a fixed scheme and step size.
pub struct Stepper {
    problem: Problem,
    config: SchemeConfig,
    solver: DirectSolver,
    /// For θ < 1, also solve the pressure equation at `(s^{n+1}, t^{n+1})`
    /// so that `state.p` is a whole-step pressure. Otherwise `state.p` is
    /// the θ-point pressure.
    pub whole_step_pressure: bool,
    /// Reset Dirichlet saturation dofs to the data at `t^{n+1}` after the
    /// extrapolation step.
    pub reimpose_dirichlet: bool,
    /// Largest pressure and saturation norms seen by the subiteration.
    norm_scale: [f64; 2],
}

impl Stepper {
    pub fn new(problem: Problem, config: SchemeConfig) -> Result<Self, StepError> {
        config.validate()?;
        problem
            .model
            .check_parameters()
            .map_err(|e| StepError::InvalidConfig(e.to_string()))?;
        Ok(Stepper {
            problem,
            config,
            solver: DirectSolver::new(),
            whole_step_pressure: true,
            reimpose_dirichlet: false,
            norm_scale: [0.0; 2],
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn space(&self) -> &FeSpace {
        &self.problem.space
    }

    fn solve(&mut self, step: usize, sys: &spatial::LinearSystem) -> Result<Field, StepError> {
        match self.solver.solve(&sys.matrix, &sys.rhs) {
            Ok((x, _)) => Ok(Field { values: x }),
            Err(LinalgError::NonFinite(what)) => Err(StepError::BlowUp {
                step,
                reason: format!("non-finite {what}"),
            }),
            Err(source) => Err(StepError::Linalg { step, source }),
        }
    }

    fn spatial_err(step: usize, e: SpatialError) -> StepError {
        match e {
            SpatialError::NonFinite(what) => StepError::BlowUp {
                step,
                reason: format!("non-finite {what} system"),
            },
            other => StepError::Spatial(other),
        }
    }

    /// Pressure with coefficients frozen at `s`, sources and data at `t`.
    pub fn solve_pressure(&mut self, step: usize, s: &Field, t: f64) -> Result<Field, StepError> {
        let space = Arc::clone(&self.problem.space);
        let sq = space.evaluate_at_quadrature(s);
        let coeffs = PressureCoefficients::frozen(&space, &self.problem.model, &sq);
        let (q, _) = self.problem.sources.at_quadrature(&space, t);
        let sys = spatial::assemble_pressure_with(&space, &coeffs, &q, &self.problem.bc, t)
            .map_err(|e| Self::spatial_err(step, e))?;
        let p = self.solve(step, &sys)?;
        check_blow_up(step, "pressure", &p, None)?;
        Ok(p)
    }

    /// Sequential subiterations for the backward-Euler problem over
    /// `[t^n, t^n + θτ]`, starting from the given guesses.
    #[allow(clippy::too_many_arguments)]
    pub fn be_subiterate(
        &mut self,
        step: usize,
        s_n: &Field,
        theta_tau: f64,
        t_eval: f64,
        p_guess: Field,
        s_guess: Field,
        tol: f64,
    ) -> Result<(Field, Field, SubiterationReport), StepError> {
        let space = Arc::clone(&self.problem.space);
        let model = self.problem.model;
        let (q, q_a) = self.problem.sources.at_quadrature(&space, t_eval);
        let history = space.evaluate_at_quadrature(s_n).values;
        let mut report = SubiterationReport::default();
        let (mut p_i, mut s_i) = (p_guess, s_guess);
        for _ in 0..self.config.max_iters {
            let sq = space.evaluate_at_quadrature(&s_i);
            let se = space.evaluate_on_edges(&s_i);
            let pc = PressureCoefficients::frozen(&space, &model, &sq);
            let sys = spatial::assemble_pressure_with(&space, &pc, &q, &self.problem.bc, t_eval)
                .map_err(|e| Self::spatial_err(step, e))?;
            let p_new = self.solve(step, &sys)?;
            check_blow_up(step, "pressure", &p_new, None)?;

            let sc = SaturationCoefficients::frozen(&space, &model, &sq, &se, 1.0 / theta_tau, history.clone())
                .map_err(|e| Self::spatial_err(step, e))?;
            let pq = space.evaluate_at_quadrature(&p_new);
            let pe = space.evaluate_on_edges(&p_new);
            let sys = spatial::assemble_saturation_with(&space, &sc, &pq, &pe, &q_a, &self.problem.bc, t_eval)
                .map_err(|e| Self::spatial_err(step, e))?;
            let s_new = self.solve(step, &sys)?;
            check_blow_up(step, "saturation", &s_new, Some(BLOW_UP_BOUND))?;

            let dp = relative_increment(&space, &p_new, &p_i, &mut self.norm_scale[0]);
            let ds = relative_increment(&space, &s_new, &s_i, &mut self.norm_scale[1]);
            report.iterations += 1;
            report.pressure_increments.push(dp);
            report.saturation_increments.push(ds);
            p_i = p_new;
            s_i = s_new;
            if dp.max(ds) < tol {
                report.converged = true;
                return Ok((p_i, s_i, report));
            }
        }
        Err(StepError::NonConvergence {
            step,
            iterations: report.iterations,
            last_increment: report.last_increment(),
        })
    }

    fn theta_step_from(
        &mut self,
        state: &StepperState,
        theta: f64,
        guess: (Field, Field),
        tol: f64,
    ) -> Result<(StepperState, SubiterationReport, usize), StepError> {
        let tau = self.config.tau;
        let step = state.n + 1;
        let t_theta = state.t + theta * tau;
        let (p_theta, s_theta, rep) = self.be_subiterate(step, &state.s, theta * tau, t_theta, guess.0, guess.1, tol)?;
        let mut s_new = forward_extrapolate(&s_theta, &state.s, theta)?;
        let t_new = step as f64 * tau;
        if self.reimpose_dirichlet {
            let (dofs, values) = self.problem.bc.saturation_dirichlet(&self.problem.space, t_new).map_err(StepError::Spatial)?;
            for (d, v) in dofs.into_iter().zip(values) {
                s_new.values[d] = v;
            }
        }
        check_blow_up(step, "saturation", &s_new, Some(BLOW_UP_BOUND))?;
        let mut solves = 2 * rep.iterations;
        let (p, p_time) = if theta == 1.0 || !self.whole_step_pressure {
            (p_theta.clone(), t_theta)
        } else {
            solves += 1;
            (self.solve_pressure(step, &s_new, t_new)?, t_new)
        };
        let mut next = StepperState {
            n: step,
            t: t_new,
            s: s_new,
            s_prev: Some(state.s.clone()),
            p,
            p_time,
            theta_pressures: state.theta_pressures.clone(),
        };
        next.push_theta_pressure(t_theta, p_theta);
        Ok((next, rep, solves))
    }

    /// One refactorized θ-step: guess, subiterate to the θ-point, extrapolate.
    pub fn step_theta(&mut self, state: &StepperState, theta: f64) -> Result<(StepperState, StepReport), StepError> {
        let start = Instant::now();
        let guess = initial_guess(state, theta, self.config.tau)?;
        let (next, rep, solves) = self.theta_step_from(state, theta, guess, self.config.tol)?;
        Ok((
            next,
            StepReport {
                n: state.n + 1,
                t: (state.n + 1) as f64 * self.config.tau,
                scheme: SchemeKind::Theta(theta),
                subiteration: Some(rep),
                bootstrap: false,
                linear_solves: solves,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ))
    }

    /// One midpoint step from `(p⁰, s⁰)` with the guess replaced by the
    /// initial data and a tightened tolerance. Populates every history the
    /// schemes need.
    pub fn bootstrap(&mut self, p0: Field, s0: Field) -> Result<(StepperState, StepReport), StepError> {
        let start = Instant::now();
        let state = StepperState::initial(p0.clone(), s0.clone());
        let tol = self.config.tol * BOOTSTRAP_TOL_FACTOR;
        let (mut next, rep, solves) = self.theta_step_from(&state, 0.5, (p0.clone(), s0), tol)?;
        next.theta_pressures.insert(0, (0.0, p0));
        Ok((
            next,
            StepReport {
                n: 1,
                t: self.config.tau,
                scheme: SchemeKind::MP,
                subiteration: Some(rep),
                bootstrap: true,
                linear_solves: solves,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ))
    }

    /// First-order time lagging: coefficients and capillary term at `s^n`,
    /// one pressure then one saturation solve.
    pub fn step_tl1(&mut self, state: &StepperState) -> Result<(StepperState, StepReport), StepError> {
        let start = Instant::now();
        let tau = self.config.tau;
        let step = state.n + 1;
        let t_new = step as f64 * tau;
        let space = Arc::clone(&self.problem.space);
        let model = self.problem.model;
        let sq = space.evaluate_at_quadrature(&state.s);
        let se = space.evaluate_on_edges(&state.s);
        let (q, q_a) = self.problem.sources.at_quadrature(&space, t_new);

        let pc = PressureCoefficients::frozen(&space, &model, &sq);
        let sys = spatial::assemble_pressure_with(&space, &pc, &q, &self.problem.bc, t_new)
            .map_err(|e| Self::spatial_err(step, e))?;
        let p = self.solve(step, &sys)?;
        check_blow_up(step, "pressure", &p, None)?;

        let sc = SaturationCoefficients::frozen(&space, &model, &sq, &se, 1.0 / tau, sq.values.clone())
            .map_err(|e| Self::spatial_err(step, e))?;
        let sys = spatial::assemble_saturation_with(
            &space,
            &sc,
            &space.evaluate_at_quadrature(&p),
            &space.evaluate_on_edges(&p),
            &q_a,
            &self.problem.bc,
            t_new,
        )
        .map_err(|e| Self::spatial_err(step, e))?;
        let s = self.solve(step, &sys)?;
        check_blow_up(step, "saturation", &s, Some(BLOW_UP_BOUND))?;

        let next = StepperState {
            n: step,
            t: t_new,
            s,
            s_prev: Some(state.s.clone()),
            p,
            p_time: t_new,
            theta_pressures: Vec::new(),
        };
        Ok((
            next,
            StepReport {
                n: step,
                t: t_new,
                scheme: SchemeKind::Tl1,
                subiteration: None,
                bootstrap: false,
                linear_solves: 2,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ))
    }

    /// Second-order time lagging: BDF2 in time with every coefficient
    /// replaced by its extrapolation `2(·)^n − (·)^{n−1}`.
    pub fn step_tl2(&mut self, state: &StepperState) -> Result<(StepperState, StepReport), StepError> {
        let start = Instant::now();
        let s_prev = state.s_prev.as_ref().ok_or(StepError::MissingHistory("s^{n-1}"))?;
        let tau = self.config.tau;
        let step = state.n + 1;
        let t_new = step as f64 * tau;
        let space = Arc::clone(&self.problem.space);
        let model = self.problem.model;
        let nq = space.nq();
        let sn = space.evaluate_at_quadrature(&state.s);
        let sm = space.evaluate_at_quadrature(s_prev);
        let (q, q_a) = self.problem.sources.at_quadrature(&space, t_new);

        let n_qp = sn.values.len();
        let mut mobility = Vec::with_capacity(n_qp);
        let mut capillary_flux = Vec::with_capacity(n_qp);
        let mut diffusion = Vec::with_capacity(n_qp);
        let mut advection = Vec::with_capacity(n_qp);
        let mut history = Vec::with_capacity(n_qp);
        for gq in 0..n_qp {
            let kappa = space.mesh().permeability(gq / nq);
            let (a, b) = (sn.values[gq], sm.values[gq]);
            let (ga, gb) = (sn.grads[gq], sm.grads[gq]);
            let la = 2.0 * model.lambda_aqueous(a) - model.lambda_aqueous(b);
            let lt = 2.0 * model.lambda_total(a) - model.lambda_total(b);
            let (da, db) = (model.dpc(a), model.dpc(b));
            mobility.push(kappa * lt);
            capillary_flux.push([
                kappa * la * (2.0 * da * ga[0] - db * gb[0]),
                kappa * la * (2.0 * da * ga[1] - db * gb[1]),
            ]);
            advection.push(kappa * la);
            diffusion.push(-kappa * la * (2.0 * da - db));
            history.push((4.0 * a - b) / 3.0);
        }
        let edge_advection = extrapolated_edge_advection(&space, &model, &state.s, s_prev);

        let pc = PressureCoefficients {
            mobility,
            capillary_flux,
        };
        let sys = spatial::assemble_pressure_with(&space, &pc, &q, &self.problem.bc, t_new)
            .map_err(|e| Self::spatial_err(step, e))?;
        let p = self.solve(step, &sys)?;
        check_blow_up(step, "pressure", &p, None)?;

        let sc = SaturationCoefficients {
            mass: model.porosity * 1.5 / tau,
            history,
            diffusion,
            advection,
            edge_advection,
        };
        let sys = spatial::assemble_saturation_with(
            &space,
            &sc,
            &space.evaluate_at_quadrature(&p),
            &space.evaluate_on_edges(&p),
            &q_a,
            &self.problem.bc,
            t_new,
        )
        .map_err(|e| Self::spatial_err(step, e))?;
        let s = self.solve(step, &sys)?;
        check_blow_up(step, "saturation", &s, Some(BLOW_UP_BOUND))?;

        let next = StepperState {
            n: step,
            t: t_new,
            s,
            s_prev: Some(state.s.clone()),
            p,
            p_time: t_new,
            theta_pressures: Vec::new(),
        };
        Ok((
            next,
            StepReport {
                n: step,
                t: t_new,
                scheme: SchemeKind::Tl2,
                subiteration: None,
                bootstrap: false,
                linear_solves: 2,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ))
    }

    /// One step of the configured scheme.
    pub fn step(&mut self, state: &StepperState) -> Result<(StepperState, StepReport), StepError> {
        match self.config.kind {
            SchemeKind::Theta(theta) => self.step_theta(state, theta),
            SchemeKind::Tl1 => self.step_tl1(state),
            SchemeKind::Tl2 => self.step_tl2(state),
        }
    }

    /// First step of a run: the midpoint bootstrap where the scheme needs
    /// history, otherwise a regular step.
    pub fn start(&mut self, p0: Field, s0: Field) -> Result<(StepperState, StepReport), StepError> {
        if self.config.kind.needs_bootstrap() {
            self.bootstrap(p0, s0)
        } else {
            self.step(&StepperState::initial(p0, s0))
        }
    }
}

fn extrapolated_edge_advection(space: &FeSpace, model: &FluidModel, s_n: &Field, s_m: &Field) -> Vec<f64> {
    let en = space.evaluate_on_edges(s_n);
    let em = space.evaluate_on_edges(s_m);
    let neq = space.nq_edge();
    en.values
        .iter()
        .zip(&em.values)
        .enumerate()
        .map(|(k, (&a, &b))| {
            let kappa = space.mesh().permeability(space.boundary_edges()[k / neq].cell);
            kappa * (2.0 * model.lambda_aqueous(a) - model.lambda_aqueous(b))
        })
        .collect()
}

/// Data handed to a run observer after each step.
pub struct StepEvent<'a> {
    pub previous: &'a StepperState,
    pub current: &'a StepperState,
    pub report: &'a StepReport,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    Failed(StepError),
}

impl RunOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunOutcome::Completed)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_state: StepperState,
    pub reports: Vec<StepReport>,
    pub outcome: RunOutcome,
}

impl RunSummary {
    /// Mean subiterations per step over the completed steps.
    pub fn mean_iterations(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().map(|r| r.iterations() as f64).sum::<f64>() / self.reports.len() as f64
    }
}

/// Number of steps of size `tau` that reach `t_final`.
pub fn step_count(t_final: f64, tau: f64) -> Result<usize, StepError> {
    let n = (t_final / tau).round();
    if n.is_nan() || n < 1.0 || ((n * tau - t_final).abs() > 1e-9 * t_final.max(1.0)) {
        return Err(StepError::InvalidConfig(format!(
            "final time {t_final} is not a positive multiple of the step {tau}"
        )));
    }
    Ok(n as usize)
}

/// Fixed-step loop from `(p⁰, s⁰)` to `t_final`. The observer sees the
/// initial state (with `previous == current`) and then every step. The
/// first failing step ends the run and is reported in the outcome.
pub fn run(
    stepper: &mut Stepper,
    p0: Field,
    s0: Field,
    t_final: f64,
    mut observer: impl FnMut(&StepEvent<'_>),
) -> Result<RunSummary, StepError> {
    let steps = step_count(t_final, stepper.config.tau)?;
    let initial = StepperState::initial(p0.clone(), s0.clone());
    let init_report = StepReport {
        n: 0,
        t: 0.0,
        scheme: stepper.config.kind,
        subiteration: None,
        bootstrap: false,
        linear_solves: 0,
        wall_time: 0.0,
    };
    observer(&StepEvent {
        previous: &initial,
        current: &initial,
        report: &init_report,
    });
    let mut reports = Vec::with_capacity(steps);
    let mut state = match stepper.start(p0, s0) {
        Ok((st, rep)) => {
            observer(&StepEvent {
                previous: &initial,
                current: &st,
                report: &rep,
            });
            reports.push(rep);
            st
        }
        Err(e) if e.is_numerical_failure() => {
            return Ok(RunSummary {
                final_state: initial,
                reports,
                outcome: RunOutcome::Failed(e),
            })
        }
        Err(e) => return Err(e),
    };
    while state.n < steps {
        match stepper.step(&state) {
            Ok((next, rep)) => {
                observer(&StepEvent {
                    previous: &state,
                    current: &next,
                    report: &rep,
                });
                reports.push(rep);
                state = next;
            }
            Err(e) if e.is_numerical_failure() => {
                return Ok(RunSummary {
                    final_state: state,
                    reports,
                    outcome: RunOutcome::Failed(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunSummary {
        final_state: state,
        reports,
        outcome: RunOutcome::Completed,
    })
}
