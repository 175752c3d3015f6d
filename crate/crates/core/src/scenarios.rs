//! Drivers for the manufactured-solution studies, the quarter-five-spot
//! flood and the closed-system dissipation run.

use std::sync::Arc;

use thiserror::Error;

use crate::diagnostics::{self, BalanceInput, ConvergenceTable, EnergyLedger, ErrorRow, ErrorSeries};
use crate::mesh::{CornerCut, Mesh, MeshError};
use crate::mms::ManufacturedCase;
use crate::par::{self, Execution};
use crate::physics::FluidModel;
use crate::spatial::{self, BoundaryConditions, FeSpace, Field, Sources, SpatialError};
use crate::timestepping::{
    self, Problem, RunOutcome, RunSummary, SchemeConfig, SchemeKind, StepError, StepReport, Stepper, StepperState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Settings shared by the manufactured-solution runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmsOptions {
    pub degree: usize,
    pub t_final: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub exec: Execution,
    /// Record L² errors and relative energy errors after every step.
    pub track_errors: bool,
    /// Record the energy ledger (midpoint runs only).
    pub track_energy: bool,
}

impl Default for MmsOptions {
    fn default() -> Self {
        MmsOptions {
            degree: 1,
            t_final: 1.0,
            tol: timestepping::DEFAULT_TOL,
            max_iters: timestepping::DEFAULT_MAX_ITERS,
            exec: Execution::default(),
            track_errors: false,
            track_energy: false,
        }
    }
}

/// Manufactured problem on an `n × n` unit-square mesh with Dirichlet data
/// everywhere.
pub fn mms_problem(n: usize, degree: usize, t_final: f64, exec: Execution) -> Result<(Problem, ManufacturedCase), ScenarioError> {
    let case = ManufacturedCase::new(t_final);
    let mesh = Arc::new(Mesh::unit_square(n)?);
    let space = Arc::new(FeSpace::new(mesh, degree)?.with_execution(exec));
    let (c1, c2, c3, c4) = (case, case, case, case);
    let problem = Problem {
        space,
        model: *case.model(),
        sources: Sources {
            q: Some(Arc::new(move |x, y, t| c1.sources(x, y, t).0)),
            q_a: Some(Arc::new(move |x, y, t| c2.sources(x, y, t).1)),
        },
        bc: BoundaryConditions::dirichlet_all(
            Arc::new(move |x, y, t| c3.pressure(x, y, t)),
            Arc::new(move |x, y, t| c4.saturation(x, y, t)),
        ),
    };
    Ok((problem, case))
}

/// Exact fields interpolated at time `t`.
pub fn mms_initial(problem: &Problem, case: &ManufacturedCase, t: f64) -> (Field, Field) {
    (
        Field::interpolate(&problem.space, |x, y| case.pressure(x, y, t)),
        Field::interpolate(&problem.space, |x, y| case.saturation(x, y, t)),
    )
}

#[derive(Debug, Clone)]
pub struct MmsRun {
    pub scheme: SchemeKind,
    pub n: usize,
    pub tau: f64,
    pub dofs: usize,
    pub summary: RunSummary,
    /// Errors at the final state (`NaN` when the run failed).
    pub err_p: f64,
    pub err_s: f64,
    pub series: ErrorSeries,
    pub ledger: Option<EnergyLedger>,
    pub space: Arc<FeSpace>,
}

impl MmsRun {
    pub fn completed(&self) -> bool {
        self.summary.outcome.is_completed()
    }
}

/// Manufactured-solution run from the exact initial data to `t_final`.
pub fn run_mms(kind: SchemeKind, tau: f64, n: usize, opts: &MmsOptions) -> Result<MmsRun, ScenarioError> {
    let (problem, case) = mms_problem(n, opts.degree, opts.t_final, opts.exec)?;
    let space = Arc::clone(&problem.space);
    let (p0, s0) = mms_initial(&problem, &case, 0.0);
    let config = SchemeConfig {
        kind,
        tau,
        tol: opts.tol,
        max_iters: opts.max_iters,
    };
    let mut stepper = Stepper::new(problem.clone(), config)?;
    let mut series = ErrorSeries::default();
    let energy_on = opts.track_energy && kind == SchemeKind::MP && problem.model.energy.is_some();
    let mut ledger = energy_on.then(|| {
        let params = problem.model.energy.expect("checked above");
        EnergyLedger::new(spatial::energy_integral(&space, &params, problem.model.porosity, &s0))
    });
    let summary = timestepping::run(&mut stepper, p0, s0, opts.t_final, |ev| {
        if ev.report.n == 0 {
            return;
        }
        if opts.track_errors {
            series.record(&space, &case, ev.current);
        }
        if let (Some(ledger), Some((_, p_half))) = (ledger.as_mut(), ev.current.theta_pressure()) {
            let row = diagnostics::energy_balance_row(
                &space,
                &problem.model,
                &problem.sources,
                &problem.bc,
                &BalanceInput {
                    step: ev.current.n,
                    t_old: ev.previous.t,
                    tau,
                    s_old: &ev.previous.s,
                    s_new: &ev.current.s,
                    p_half,
                },
            );
            ledger.rows.extend(row);
        }
    })?;
    let (err_p, err_s) = if summary.outcome.is_completed() {
        let st = &summary.final_state;
        let (t, tp) = (st.t, st.p_time);
        (
            spatial::l2_error(&space, &st.p, |x, y| case.pressure(x, y, tp)),
            spatial::l2_error(&space, &st.s, |x, y| case.saturation(x, y, t)),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(MmsRun {
        scheme: kind,
        n,
        tau,
        dofs: space.n_dofs(),
        summary,
        err_p,
        err_s,
        series,
        ledger,
        space,
    })
}

/// Mesh sizes `n = 2, 4, …` up to `n_max` (a power of two).
pub fn dyadic_levels(n_max: usize) -> Vec<usize> {
    std::iter::successors(Some(2usize), |n| Some(n * 2)).take_while(|n| *n <= n_max).collect()
}

/// `τ = h` refinement study. Levels run concurrently; failures are kept as
/// rows and do not stop the study.
pub fn convergence_study(kind: SchemeKind, levels: &[usize], opts: &MmsOptions) -> Result<ConvergenceTable, ScenarioError> {
    let runs = par::map_slice(opts.exec, levels, |&n| {
        let inner = MmsOptions {
            track_errors: false,
            track_energy: false,
            ..*opts
        };
        run_mms(kind, 1.0 / n as f64, n, &inner)
    });
    let mut rows = Vec::with_capacity(levels.len());
    for run in runs {
        let run = run?;
        let failure = match &run.summary.outcome {
            RunOutcome::Completed => None,
            RunOutcome::Failed(e) => Some(e.cause().to_string()),
        };
        rows.push(ErrorRow {
            tau: run.tau,
            h: 1.0 / run.n as f64,
            dofs: run.dofs,
            err_p: run.err_p,
            err_s: run.err_s,
            failure,
        });
    }
    Ok(diagnostics::convergence_rates(rows))
}

/// Long-horizon run recording per-step errors and relative energy errors.
pub fn longtime_run(kind: SchemeKind, tau: f64, n: usize, opts: &MmsOptions) -> Result<MmsRun, ScenarioError> {
    let o = MmsOptions {
        track_errors: true,
        ..*opts
    };
    run_mms(kind, tau, n, &o)
}

/// Settings of the quarter-five-spot flood.
#[derive(Debug, Clone, PartialEq)]
pub struct Q5SpotOptions {
    /// Cells per side; the corner cut is snapped to whole cells.
    pub n: usize,
    pub degree: usize,
    pub t_final: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub exec: Execution,
    /// Times at which `s_a` is kept.
    pub snapshots: Vec<f64>,
}

impl Default for Q5SpotOptions {
    fn default() -> Self {
        Q5SpotOptions {
            n: 38,
            degree: 2,
            t_final: 750.0,
            tol: timestepping::DEFAULT_TOL,
            max_iters: timestepping::DEFAULT_MAX_ITERS,
            exec: Execution::default(),
            snapshots: vec![250.0, 500.0, 750.0],
        }
    }
}

pub const Q5SPOT_INITIAL_PRESSURE: f64 = 1e5;
pub const Q5SPOT_INITIAL_SATURATION: f64 = 0.2;

pub fn q5spot_problem(opts: &Q5SpotOptions) -> Result<(Problem, CornerCut), ScenarioError> {
    let (mesh, cut) = Mesh::quarter_five_spot_snapped(opts.n)?;
    let space = Arc::new(FeSpace::new(Arc::new(mesh), opts.degree)?.with_execution(opts.exec));
    Ok((
        Problem {
            space,
            model: FluidModel::quarter_five_spot(),
            sources: Sources::none(),
            bc: BoundaryConditions::quarter_five_spot(),
        },
        cut,
    ))
}

#[derive(Debug, Clone)]
pub struct Q5SpotRun {
    pub scheme: SchemeKind,
    pub tau: f64,
    pub outcome: RunOutcome,
    pub steps: usize,
    pub mean_iterations: f64,
    pub cut: CornerCut,
    pub initial: Field,
    /// `(t, s_a)` at the requested snapshot times that were reached.
    pub snapshots: Vec<(f64, Field)>,
    pub reports: Vec<StepReport>,
    pub final_state: StepperState,
    pub space: Arc<FeSpace>,
}

impl Q5SpotRun {
    pub fn completed(&self) -> bool {
        self.outcome.is_completed()
    }

    /// `s_a(x, x)` sampled at `samples` points along the diagonal.
    pub fn diagonal_profile(&self, samples: usize) -> Vec<(f64, f64)> {
        diagonal_profile(&self.space, &self.final_state.s, samples)
    }
}

/// Samples `field` along the diagonal of the grid's bounding box, skipping
/// points outside the domain.
pub fn diagonal_profile(space: &FeSpace, field: &Field, samples: usize) -> Vec<(f64, f64)> {
    let g = space.mesh().grid();
    let side = (g.nx as f64 * g.spacing[0]).min(g.ny as f64 * g.spacing[1]);
    let denom = (samples.max(2) - 1) as f64;
    (0..samples)
        .filter_map(|k| {
            let d = side * k as f64 / denom;
            let (x, y) = (g.origin[0] + d, g.origin[1] + d);
            space.evaluate_point(field, x, y).map(|v| (d, v))
        })
        .collect()
}

pub fn q5spot_run(kind: SchemeKind, tau: f64, opts: &Q5SpotOptions) -> Result<Q5SpotRun, ScenarioError> {
    let (problem, cut) = q5spot_problem(opts)?;
    let space = Arc::clone(&problem.space);
    let p0 = Field::constant(&space, Q5SPOT_INITIAL_PRESSURE);
    let s0 = Field::constant(&space, Q5SPOT_INITIAL_SATURATION);
    let config = SchemeConfig {
        kind,
        tau,
        tol: opts.tol,
        max_iters: opts.max_iters,
    };
    let mut stepper = Stepper::new(problem, config)?;
    let mut snapshots = Vec::new();
    let summary = timestepping::run(&mut stepper, p0, s0.clone(), opts.t_final, |ev| {
        if ev.report.n > 0 && opts.snapshots.iter().any(|ts| (ev.current.t - ts).abs() < 0.5 * tau) {
            snapshots.push((ev.current.t, ev.current.s.clone()));
        }
    })?;
    Ok(Q5SpotRun {
        scheme: kind,
        tau,
        steps: summary.reports.len(),
        mean_iterations: summary.mean_iterations(),
        outcome: summary.outcome,
        cut,
        initial: s0,
        snapshots,
        reports: summary.reports,
        final_state: summary.final_state,
        space,
    })
}

/// Largest step in `taus` at which a run completed.
pub fn tau_max<'a>(runs: impl IntoIterator<Item = &'a Q5SpotRun>) -> Option<f64> {
    runs.into_iter()
        .filter(|r| r.completed())
        .map(|r| r.tau)
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))))
}

/// Closed system without sources, started from a non-uniform saturation,
/// integrated with the midpoint scheme while recording the energy ledger.
pub fn dissipation_run(
    n: usize,
    tau: f64,
    t_final: f64,
    degree: usize,
    exec: Execution,
) -> Result<(EnergyLedger, RunSummary), ScenarioError> {
    let mesh = Arc::new(Mesh::unit_square(n)?);
    let space = Arc::new(FeSpace::new(mesh, degree)?.with_execution(exec));
    let problem = Problem {
        space: Arc::clone(&space),
        model: FluidModel::manufactured(),
        sources: Sources::none(),
        bc: BoundaryConditions::no_flow(),
    };
    let params = problem.model.energy.expect("manufactured model carries an energy");
    let s0 = Field::interpolate(&space, |x, y| {
        use std::f64::consts::PI;
        0.35 + 0.15 * (PI * x).cos() * (PI * y).cos()
    });
    let p0 = Field::zeros(&space);
    let mut ledger = EnergyLedger::new(spatial::energy_integral(&space, &params, problem.model.porosity, &s0));
    let mut stepper = Stepper::new(problem.clone(), SchemeConfig::new(SchemeKind::MP, tau))?;
    let summary = timestepping::run(&mut stepper, p0, s0, t_final, |ev| {
        if ev.report.n == 0 {
            return;
        }
        if let Some((_, p_half)) = ev.current.theta_pressure() {
            ledger.rows.extend(diagnostics::energy_balance_row(
                &space,
                &problem.model,
                &problem.sources,
                &problem.bc,
                &BalanceInput {
                    step: ev.current.n,
                    t_old: ev.previous.t,
                    tau,
                    s_old: &ev.previous.s,
                    s_new: &ev.current.s,
                    p_half,
                },
            ));
        }
    })?;
    Ok((ledger, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels() {
        assert_eq!(dyadic_levels(16), vec![2, 4, 8, 16]);
        assert_eq!(dyadic_levels(1), Vec::<usize>::new());
    }

    #[test]
    fn mms_smoke_run() {
        let opts = MmsOptions {
            t_final: 0.5,
            track_errors: true,
            track_energy: true,
            ..Default::default()
        };
        let run = run_mms(SchemeKind::MP, 0.25, 4, &opts).unwrap();
        assert!(run.completed());
        assert_eq!(run.series.len(), 2);
        assert!(run.err_p < 0.1 && run.err_s < 0.1);
        let ledger = run.ledger.unwrap();
        assert_eq!(ledger.rows.len(), 2);
        assert!(ledger.max_relative_chain_rule() < 1e-12);
    }

    #[test]
    fn midpoint_converges_at_second_order() {
        let table = convergence_study(SchemeKind::MP, &[4, 8, 16], &MmsOptions::default()).unwrap();
        let (rp, rs) = table.last_rates();
        assert!(rp.unwrap() > 1.7 && rs.unwrap() > 1.7, "{table:?}");
    }

    #[test]
    fn q5spot_initial_state() {
        let opts = Q5SpotOptions {
            n: 20,
            degree: 1,
            t_final: 2.0,
            snapshots: vec![1.0],
            ..Default::default()
        };
        let run = q5spot_run(SchemeKind::MP, 1.0, &opts).unwrap();
        assert!(run.initial.values.iter().all(|&v| v == 0.2));
        assert!(run.completed(), "{:?}", run.outcome);
        assert_eq!(run.snapshots.len(), 1);
        assert!(!run.diagonal_profile(11).is_empty());
    }

    #[test]
    fn closed_system_dissipates() {
        let (ledger, summary) = dissipation_run(8, 0.05, 0.5, 1, Execution::default()).unwrap();
        assert!(summary.outcome.is_completed());
        assert_eq!(ledger.rows.len(), 10);
        assert!(ledger.is_nonincreasing(1e-12));
        assert!(ledger.max_relative_chain_rule() < 1e-12);
    }
}
