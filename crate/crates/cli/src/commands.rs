use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use twophase_core::diagnostics;
use twophase_core::scenarios::{self, MmsOptions, Q5SpotOptions, ScenarioError};
use twophase_core::spatial::{self, Field};
use twophase_core::timestepping::{RunOutcome, SchemeKind};

use crate::config::{ProblemKind, RunConfig, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    /// A run failed where failure is not an expected outcome.
    #[error("{scheme} at tau = {tau}: {cause}")]
    Numerical { scheme: String, tau: f64, cause: String },
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(dir: &str) -> Result<Self, RunError> {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir).map_err(|source| RunError::Io {
            context: format!("creating {}", dir.display()),
            source,
        })?;
        Ok(Output { dir })
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<PathBuf, RunError> {
        let path = self.dir.join(name);
        let io_err = |source| RunError::Io {
            context: format!("writing {}", path.display()),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
        Ok(path)
    }

    fn path(&self) -> &Path {
        &self.dir
    }
}

fn tag(kind: SchemeKind, tau: f64) -> String {
    format!("{}_tau{}", kind.name(), tau)
}

fn outcome_label(outcome: &RunOutcome) -> String {
    match outcome {
        RunOutcome::Completed => "completed".into(),
        RunOutcome::Failed(e) => e.cause().into(),
    }
}

fn mms_options(cfg: &RunConfig) -> MmsOptions {
    MmsOptions {
        degree: cfg.degree,
        t_final: cfg.t_final,
        tol: cfg.tol,
        max_iters: cfg.max_iters,
        exec: cfg.exec(),
        ..Default::default()
    }
}

pub fn execute(cfg: &RunConfig) -> Result<(), RunError> {
    let out = Output::create(&cfg.out)?;
    out.write("config.toml", |w| w.write_all(cfg.to_toml().as_bytes()))?;
    match cfg.scenario {
        Scenario::Converge => converge(cfg, &out),
        Scenario::Longtime => longtime(cfg, &out),
        Scenario::Q5spot => q5spot(cfg, &out),
        Scenario::Custom => custom(cfg, &out),
    }?;
    println!("outputs in {}", out.path().display());
    Ok(())
}

fn converge(cfg: &RunConfig, out: &Output) -> Result<(), RunError> {
    let opts = mms_options(cfg);
    let levels = scenarios::dyadic_levels(cfg.mesh);
    for kind in cfg.scheme_kinds() {
        let table = scenarios::convergence_study(kind, &levels, &opts)?;
        out.write(&format!("converge_{}.csv", kind.name()), |w| table.write_csv(w))?;
        let (rp, rs) = table.last_rates();
        let fmt = |r: Option<f64>| r.map_or("-".into(), |v| format!("{v:.2}"));
        println!("{:>4}: last rates p_l {} s_a {}", kind.name(), fmt(rp), fmt(rs));
    }
    Ok(())
}

fn longtime(cfg: &RunConfig, out: &Output) -> Result<(), RunError> {
    let opts = MmsOptions {
        track_errors: true,
        track_energy: true,
        ..mms_options(cfg)
    };
    let mut rows = Vec::new();
    for &tau in &cfg.taus {
        for kind in cfg.scheme_kinds() {
            let run = scenarios::longtime_run(kind, tau, cfg.mesh, &opts)?;
            let t = tag(kind, tau);
            out.write(&format!("errors_{t}.csv"), |w| run.series.write_csv(w))?;
            out.write(&format!("steps_{t}.csv"), |w| diagnostics::write_step_log(&run.summary.reports, w))?;
            if let Some(ledger) = &run.ledger {
                out.write(&format!("energy_{t}.csv"), |w| ledger.write_csv(w))?;
            }
            println!(
                "{:>4} tau {tau}: {} max err p_l {:.3e} s_a {:.3e} energy {:.3e}",
                kind.name(),
                outcome_label(&run.summary.outcome),
                run.series.max_p(),
                run.series.max_s(),
                run.series.max_energy()
            );
            rows.push(format!(
                "{},{},{},{:.6e},{:.6e},{:.6e}",
                kind.name(),
                tau,
                outcome_label(&run.summary.outcome),
                run.series.max_p(),
                run.series.max_s(),
                run.series.max_energy()
            ));
        }
    }
    out.write("longtime_summary.csv", |w| {
        writeln!(w, "scheme,tau,status,max_err_pl,max_err_sa,max_energy_rel")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    Ok(())
}

fn q5spot_options(cfg: &RunConfig) -> Q5SpotOptions {
    Q5SpotOptions {
        n: cfg.mesh,
        degree: cfg.degree,
        t_final: cfg.t_final,
        tol: cfg.tol,
        max_iters: cfg.max_iters,
        exec: cfg.exec(),
        snapshots: cfg.snapshots.clone(),
    }
}

fn write_saturation(out: &Output, name: &str, space: &spatial::FeSpace, s: &Field) -> Result<(), RunError> {
    out.write(name, |w| spatial::write_vtk(space, &[("s_a", s)], w)).map(|_| ())
}

fn q5spot(cfg: &RunConfig, out: &Output) -> Result<(), RunError> {
    let opts = q5spot_options(cfg);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for kind in cfg.scheme_kinds() {
        for &tau in &cfg.taus {
            let run = scenarios::q5spot_run(kind, tau, &opts)?;
            let t = tag(kind, tau);
            write_saturation(out, &format!("saturation_{t}_t0.vtk"), &run.space, &run.initial)?;
            for (time, s) in &run.snapshots {
                write_saturation(out, &format!("saturation_{t}_t{}.vtk", time.round()), &run.space, s)?;
            }
            out.write(&format!("steps_{t}.csv"), |w| diagnostics::write_step_log(&run.reports, w))?;
            if run.completed() {
                out.write(&format!("diagonal_{t}.csv"), |w| {
                    writeln!(w, "d,s_a")?;
                    run.diagonal_profile(201)
                        .iter()
                        .try_for_each(|(d, s)| writeln!(w, "{d:.6},{s:.6e}"))
                })?;
            }
            let s = &run.final_state.s;
            let status = outcome_label(&run.outcome);
            println!(
                "{:>4} tau {tau}: {status} after {} steps, mean iterations {:.2}",
                kind.name(),
                run.steps,
                run.mean_iterations
            );
            rows.push(format!(
                "{},{},{},{},{:.4},{:.6},{:.6}",
                kind.name(),
                tau,
                status,
                run.steps,
                run.mean_iterations,
                s.min(),
                s.max()
            ));
            runs.push(run);
        }
    }
    out.write("q5spot_summary.csv", |w| {
        writeln!(w, "scheme,tau,status,steps,mean_iterations,s_min,s_max")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    for kind in cfg.scheme_kinds() {
        let tmax = scenarios::tau_max(runs.iter().filter(|r| r.scheme == kind));
        println!("{:>4}: tau_max {}", kind.name(), tmax.map_or("none".into(), |t| t.to_string()));
    }
    Ok(())
}

fn custom(cfg: &RunConfig, out: &Output) -> Result<(), RunError> {
    let kind = cfg.scheme_kinds()[0];
    let tau = cfg.taus[0];
    let outcome = match cfg.problem.unwrap_or(ProblemKind::Mms) {
        ProblemKind::Mms => {
            let opts = MmsOptions {
                track_errors: true,
                track_energy: true,
                ..mms_options(cfg)
            };
            let run = scenarios::run_mms(kind, tau, cfg.mesh, &opts)?;
            out.write("errors.csv", |w| run.series.write_csv(w))?;
            if let Some(ledger) = &run.ledger {
                out.write("energy.csv", |w| ledger.write_csv(w))?;
            }
            out.write("steps.csv", |w| diagnostics::write_step_log(&run.summary.reports, w))?;
            let st = &run.summary.final_state;
            out.write("final.vtk", |w| spatial::write_vtk(&run.space, &[("p_l", &st.p), ("s_a", &st.s)], w))?;
            println!("final L2 errors p_l {:.4e} s_a {:.4e}", run.err_p, run.err_s);
            run.summary.outcome
        }
        ProblemKind::Q5spot => {
            let run = scenarios::q5spot_run(kind, tau, &q5spot_options(cfg))?;
            out.write("steps.csv", |w| diagnostics::write_step_log(&run.reports, w))?;
            let st = &run.final_state;
            out.write("final.vtk", |w| spatial::write_vtk(&run.space, &[("p_l", &st.p), ("s_a", &st.s)], w))?;
            run.outcome
        }
        ProblemKind::Closed => {
            let (ledger, summary) = scenarios::dissipation_run(cfg.mesh, tau, cfg.t_final, cfg.degree, cfg.exec())?;
            out.write("energy.csv", |w| ledger.write_csv(w))?;
            out.write("steps.csv", |w| diagnostics::write_step_log(&summary.reports, w))?;
            println!(
                "energy {:.6e} -> {:.6e}",
                ledger.initial_energy,
                ledger.rows.last().map_or(ledger.initial_energy, |r| r.energy)
            );
            summary.outcome
        }
    };
    match outcome {
        RunOutcome::Completed => {
            println!("{} tau {tau}: completed", kind.name());
            Ok(())
        }
        RunOutcome::Failed(e) => Err(RunError::Numerical {
            scheme: kind.name(),
            tau,
            cause: e.to_string(),
        }),
    }
}
