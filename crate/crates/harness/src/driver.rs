//! Simulation setup, the time loop and the study drivers.

use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::Serialize;

use hyflux_core::basis::{ReferenceElement, Scheme};
use hyflux_core::filter::{apply_filter, build_filter, ModalFilter};
use hyflux_core::fr::Discretization;
use hyflux_core::hfr::Timings;
use hyflux_core::imex::{explicit_rk_step, load_tableau_pair, shipped_pair, ExplicitTableau, ImexIntegrator, NewtonSettings};
use hyflux_core::linalg::GmresSettings;
use hyflux_core::mesh::{
    compute_geometric_factors, generate_annulus, generate_stretched_band, generate_uniform_periodic, import_mesh, Mesh,
};
use hyflux_core::partition::{flag_implicit, stiffness_indicators};
use hyflux_core::physics::ConservationLaw;

use crate::config::{FilterRegion, InitialConfig, LawConfig, MeshConfig, RunConfig};
use crate::output::{write_csv, write_vtk};
use crate::HarnessError;

/// Accumulated timings in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TimingReport {
    pub t_g: f64,
    pub t_l: f64,
    pub t_j: f64,
    pub t_rim: f64,
    pub t_rex: f64,
    pub t_w: f64,
}

impl TimingReport {
    pub fn from_timings(t: &Timings, wall: Duration) -> Self {
        TimingReport {
            t_g: t.global.as_secs_f64(),
            t_l: t.local.as_secs_f64(),
            t_j: t.jacobian.as_secs_f64(),
            t_rim: t.residual_implicit.as_secs_f64(),
            t_rex: t.residual_explicit.as_secs_f64(),
            t_w: wall.as_secs_f64(),
        }
    }

    pub fn components(&self) -> f64 {
        self.t_g + self.t_l + self.t_j + self.t_rim + self.t_rex
    }
}

pub fn build_mesh(cfg: &MeshConfig) -> Result<Mesh, HarnessError> {
    let mesh = match cfg {
        MeshConfig::Band { n, length, layers, ratio } => generate_stretched_band(*n, *length, *layers, *ratio),
        MeshConfig::Uniform { nx, ny, lx, ly } => generate_uniform_periodic(*nx, *ny, *lx, *ly),
        MeshConfig::Annulus { n_theta, n_radial, r_in, r_out, growth } => generate_annulus(*n_theta, *n_radial, *r_in, *r_out, *growth),
        MeshConfig::File { path } => import_mesh(path),
    };
    mesh.map_err(|e| HarnessError::Config(format!("mesh: {e}")))
}

/// Period of the domain in each direction for the generated periodic meshes.
pub fn domain_period(cfg: &MeshConfig) -> Option<[f64; 2]> {
    match *cfg {
        MeshConfig::Band { length, .. } => Some([length, length]),
        MeshConfig::Uniform { lx, ly, .. } => Some([lx, ly]),
        _ => None,
    }
}

pub fn build_law(cfg: &LawConfig) -> Result<ConservationLaw, HarnessError> {
    let law = match *cfg {
        LawConfig::Advection { velocity } => ConservationLaw::advection(velocity),
        LawConfig::Edac { theta, nu } => ConservationLaw::edac(theta, nu),
    };
    law.map_err(|e| HarnessError::Config(format!("law: {e}")))
}

fn wrap(d: f64, period: Option<f64>) -> f64 {
    match period {
        Some(l) => d - l * (d / l).round(),
        None => d,
    }
}

/// Exact solution of the configured problem, where one is known.
pub fn exact_solution(cfg: &RunConfig) -> Option<Box<dyn Fn([f64; 2], f64) -> Vec<f64> + Send + Sync>> {
    let period = domain_period(&cfg.mesh);
    match (&cfg.initial, &cfg.law) {
        (InitialConfig::Gaussian { center, width, amplitude, images }, LawConfig::Advection { velocity }) => {
            let (c, w, amp, a) = (*center, *width, *amplitude, *velocity);
            let k = if period.is_some() { *images as i64 } else { 0 };
            let l = period.unwrap_or([0.0; 2]);
            Some(Box::new(move |x, t| {
                let dx = wrap(x[0] - c[0] - a[0] * t, period.map(|p| p[0]));
                let dy = wrap(x[1] - c[1] - a[1] * t, period.map(|p| p[1]));
                let mut s = 0.0;
                for i in -k..=k {
                    for j in -k..=k {
                        let (px, py) = (dx + i as f64 * l[0], dy + j as f64 * l[1]);
                        s += (-(px * px + py * py) / w).exp();
                    }
                }
                vec![amp * s]
            }))
        }
        (InitialConfig::Constant { state }, _) => {
            let s = state.clone();
            Some(Box::new(move |_, _| s.clone()))
        }
        (InitialConfig::TaylorGreen { amplitude }, LawConfig::Edac { nu, .. }) => {
            let (a, nu) = (*amplitude, *nu);
            Some(Box::new(move |x, t| {
                let f = (-2.0 * nu * t).exp();
                let p = 0.25 * a * a * ((2.0 * x[0]).cos() + (2.0 * x[1]).cos()) * f * f;
                vec![p, a * x[0].sin() * x[1].cos() * f, -a * x[0].cos() * x[1].sin() * f]
            }))
        }
        _ => None,
    }
}

/// `sqrt(sum_k sum_i w_i J_ki (u - exact)^2)` per variable.
pub fn l2_error(d: &Discretization, u: &[f64], exact: &dyn Fn([f64; 2], f64) -> Vec<f64>, t: f64) -> Vec<f64> {
    let (ns, nv) = (d.n_solution(), d.n_vars());
    let mut acc = vec![0.0; nv];
    for (e, g) in d.geom.elements.iter().enumerate() {
        for i in 0..ns {
            let ex = exact(g.coords[i], t);
            let w = d.re.weights[i] * g.jac[i];
            for v in 0..nv {
                let diff = u[(e * ns + i) * nv + v] - ex[v];
                acc[v] += w * diff * diff;
            }
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// `sum_v integral of u_v^2`.
pub fn discrete_energy(d: &Discretization, u: &[f64]) -> f64 {
    let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
    d.integral(&sq, None).iter().sum()
}

#[derive(Debug, Clone)]
enum Stepper {
    Imex(Box<ImexIntegrator>),
    Explicit { tableau: ExplicitTableau, timings: Timings },
}

/// A configured discretization with its state and time integrator.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RunConfig,
    pub disc: Discretization,
    pub indicators: Vec<f64>,
    pub u: Vec<f64>,
    pub uhat: Vec<f64>,
    pub t: f64,
    pub steps: usize,
    stepper: Stepper,
    /// Filter with the step size it was built for.
    filter: Option<(ModalFilter, f64)>,
    filter_elems: Option<Vec<usize>>,
    wall: Duration,
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mesh = build_mesh(&cfg.mesh)?;
        let law = build_law(&cfg.law)?;
        let scheme: Scheme = cfg.discretization.scheme.into();
        let p = cfg.discretization.degree;
        let re = ReferenceElement::new(p, scheme).map_err(|e| HarnessError::Config(e.to_string()))?;
        let geom = compute_geometric_factors(&mesh, &re).map_err(|e| HarnessError::Config(e.to_string()))?;
        let indicators = stiffness_indicators(&geom, &re);
        let partition = flag_implicit(&mesh, &indicators, cfg.partition.cutoff);
        let disc = Discretization::new(mesh, p, scheme, law, partition, &cfg.boundary).map_err(|e| HarnessError::Config(e.to_string()))?;
        let stepper = if cfg.time.tableau == "rk4" {
            if disc.partition.n_implicit() > 0 {
                return Err(HarnessError::Config("tableau rk4 is explicit; it needs a partition with no implicit elements".into()));
            }
            Stepper::Explicit { tableau: ExplicitTableau::rk4(), timings: Timings::default() }
        } else {
            let pair = match shipped_pair(&cfg.time.tableau) {
                Ok(p) => p,
                Err(_) => load_tableau_pair(Path::new(&cfg.time.tableau)).map_err(|e| HarnessError::Config(e.to_string()))?,
            };
            let s = &cfg.solver;
            let newton = NewtonSettings {
                tol_abs: s.newton_atol,
                tol_rel: s.newton_rtol,
                max_iterations: s.newton_max_iterations,
                freeze_steps: s.freeze_steps,
                gmres: GmresSettings { restart: s.gmres_restart, rtol: s.gmres_rtol, max_iterations: s.gmres_max_iterations },
            };
            Stepper::Imex(Box::new(ImexIntegrator::new(pair, newton)))
        };
        let u = initial_state(cfg, &disc)?;
        let uhat = disc.initial_trace(&u);
        let filter_elems = match cfg.filter.region {
            FilterRegion::All => None,
            FilterRegion::Implicit => Some(disc.partition.implicit_elements()),
            FilterRegion::Explicit => Some(disc.partition.explicit_elements()),
        };
        info!(
            "{} elements, {} implicit ({:.3}), {} trace points, {} interface faces",
            disc.n_elements(),
            disc.partition.n_implicit(),
            disc.partition.implicit_fraction,
            disc.trace.n_points,
            disc.partition.interface_faces.len()
        );
        Ok(Simulation {
            config: cfg.clone(),
            disc,
            indicators,
            u,
            uhat,
            t: 0.0,
            steps: 0,
            stepper,
            filter: None,
            filter_elems,
            wall: Duration::ZERO,
        })
    }

    pub fn timings(&self) -> Timings {
        match &self.stepper {
            Stepper::Imex(i) => i.timings.clone(),
            Stepper::Explicit { timings, .. } => timings.clone(),
        }
    }

    pub fn timing_report(&self) -> TimingReport {
        TimingReport::from_timings(&self.timings(), self.wall)
    }

    pub fn integrator(&self) -> Option<&ImexIntegrator> {
        match &self.stepper {
            Stepper::Imex(i) => Some(i),
            Stepper::Explicit { .. } => None,
        }
    }

    pub fn integrator_mut(&mut self) -> Option<&mut ImexIntegrator> {
        match &mut self.stepper {
            Stepper::Imex(i) => Some(i),
            Stepper::Explicit { .. } => None,
        }
    }

    /// One step of size `dt`, followed by the filter when enabled.
    pub fn step(&mut self, dt: f64) -> Result<(), HarnessError> {
        let t0 = Instant::now();
        let fail = |msg: String, s: &Simulation| HarnessError::Numerical { step: s.steps + 1, time: s.t, msg };
        let next = match &mut self.stepper {
            Stepper::Imex(integ) => integ.step(&self.disc, &self.u, &mut self.uhat, dt),
            Stepper::Explicit { tableau, timings } => {
                let t1 = Instant::now();
                let r = explicit_rk_step(&self.disc, &self.u, dt, tableau);
                timings.residual_explicit += t1.elapsed();
                r
            }
        };
        self.u = next.map_err(|e| fail(e.to_string(), self))?;
        if self.config.filter.enabled {
            let f = &self.config.filter;
            if self.filter.as_ref().is_none_or(|(_, h)| *h != dt) {
                let m = build_filter(&self.disc.re, f.alpha, f.s, f.eta_c, dt, f.t_ref).map_err(|e| HarnessError::Config(e.to_string()))?;
                self.filter = Some((m, dt));
            }
            let (m, _) = self.filter.as_ref().expect("filter");
            apply_filter(&mut self.u, m, self.disc.n_vars(), self.filter_elems.as_deref());
        }
        self.t += dt;
        self.steps += 1;
        self.wall += t0.elapsed();
        Ok(())
    }

    /// Advance to `t_end` with the configured step, shortening the last one.
    /// `observer` runs after every step.
    pub fn run_to(&mut self, t_end: f64, mut observer: impl FnMut(&Simulation) -> Result<(), HarnessError>) -> Result<(), HarnessError> {
        let dt = self.config.time.dt;
        let tol = 1e-9 * dt;
        while self.t < t_end - tol {
            let h = if self.t + dt > t_end - tol { t_end - self.t } else { dt };
            self.step(h)?;
            if self.steps % 100 == 0 {
                debug!("step {} t = {:.6}", self.steps, self.t);
            }
            observer(self)?;
        }
        Ok(())
    }

    pub fn l2_error(&self) -> Option<Vec<f64>> {
        let exact = exact_solution(&self.config)?;
        Some(l2_error(&self.disc, &self.u, &exact, self.t))
    }
}

fn initial_state(cfg: &RunConfig, d: &Discretization) -> Result<Vec<f64>, HarnessError> {
    let exact = exact_solution(cfg).ok_or_else(|| HarnessError::Config("initial condition does not match the law".into()))?;
    Ok(d.project(|x| exact(x, 0.0)))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub time: f64,
    pub n_elements: usize,
    pub n_implicit: usize,
    pub implicit_fraction: f64,
    pub trace_unknowns: usize,
    pub newton_iterations: usize,
    pub jacobian_builds: usize,
    pub linear_iterations: usize,
    pub l2_error: Option<f64>,
    #[serde(skip)]
    pub timing: TimingReport,
}

impl RunSummary {
    fn of(sim: &Simulation) -> Self {
        let stats = sim.integrator().map(|i| i.stats).unwrap_or_default();
        RunSummary {
            steps: sim.steps,
            time: sim.t,
            n_elements: sim.disc.n_elements(),
            n_implicit: sim.disc.partition.n_implicit(),
            implicit_fraction: sim.disc.partition.implicit_fraction,
            trace_unknowns: sim.disc.trace_len(),
            newton_iterations: stats.iterations,
            jacobian_builds: stats.jacobian_builds,
            linear_iterations: stats.linear_iterations,
            l2_error: sim.l2_error().map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt()),
            timing: sim.timing_report(),
        }
    }
}

/// Full run; with `output_dir`, writes VTK dumps, `summary.csv` and `timing.csv`.
pub fn run(cfg: &RunConfig, output_dir: Option<&Path>) -> Result<(Simulation, RunSummary), HarnessError> {
    let mut sim = Simulation::new(cfg)?;
    let names = variable_names(&cfg.law);
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    let every = cfg.output.every;
    let dump = |sim: &Simulation| -> Result<(), HarnessError> {
        if let Some(dir) = output_dir {
            if cfg.output.vtk {
                let path = dir.join(format!("{}_{:06}.vtk", cfg.output.prefix, sim.steps));
                write_vtk(&sim.disc, &sim.u, &names, &path)?;
            }
        }
        Ok(())
    };
    if every > 0 {
        dump(&sim)?;
    }
    sim.run_to(cfg.time.t_end, |s| if every > 0 && s.steps % every == 0 { dump(s) } else { Ok(()) })?;
    if every == 0 || sim.steps % every != 0 {
        dump(&sim)?;
    }
    let summary = RunSummary::of(&sim);
    if let Some(dir) = output_dir {
        write_csv(std::slice::from_ref(&summary), &dir.join("summary.csv"))?;
        write_csv(std::slice::from_ref(&summary.timing), &dir.join("timing.csv"))?;
    }
    info!("finished {} steps at t = {}", sim.steps, sim.t);
    Ok((sim, summary))
}

pub fn variable_names(law: &LawConfig) -> Vec<&'static str> {
    match law {
        LawConfig::Advection { .. } => vec!["u"],
        LawConfig::Edac { .. } => vec!["P", "vx", "vy"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub l2: f64,
    pub order: Option<f64>,
}

/// Runs to `time.t_end` for each step size; orders are `log2` ratios scaled by the step ratio.
pub fn convergence_study(cfg: &RunConfig, dts: &[f64]) -> Result<Vec<ConvergenceRow>, HarnessError> {
    if dts.len() < 2 {
        return Err(HarnessError::Config("a convergence study needs at least two step sizes".into()));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(dts.len());
    for &dt in dts {
        let mut c = cfg.clone();
        c.time.dt = dt;
        let mut sim = Simulation::new(&c)?;
        sim.run_to(c.time.t_end, |_| Ok(()))?;
        let err = sim.l2_error().ok_or_else(|| HarnessError::Config("no exact solution for this configuration".into()))?;
        let l2 = err.iter().map(|x| x * x).sum::<f64>().sqrt();
        let order = rows.last().map(|prev| (prev.l2 / l2).ln() / (prev.dt / dt).ln());
        info!("dt = {dt}: L2 = {l2:.3e}, order = {order:?}");
        rows.push(ConvergenceRow { dt, l2, order });
    }
    Ok(rows)
}

/// Growth bound on the discrete energy that still counts as stable.
pub const ENERGY_GROWTH_LIMIT: f64 = 10.0;

/// Stable iff the run reaches `horizon` without a numerical failure and the energy
/// never exceeds `ENERGY_GROWTH_LIMIT` times its initial value.
pub fn is_stable(cfg: &RunConfig, dt: f64, horizon: f64) -> Result<bool, HarnessError> {
    let mut c = cfg.clone();
    c.time.dt = dt;
    let mut sim = Simulation::new(&c)?;
    let e0 = discrete_energy(&sim.disc, &sim.u);
    let res = sim.run_to(horizon, |s| {
        let e = discrete_energy(&s.disc, &s.u);
        if !e.is_finite() || e > ENERGY_GROWTH_LIMIT * e0 {
            return Err(HarnessError::Numerical { step: s.steps, time: s.t, msg: format!("energy grew from {e0:e} to {e:e}") });
        }
        Ok(())
    });
    match res {
        Ok(()) => Ok(true),
        Err(HarnessError::Numerical { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DtMaxResult {
    pub dt_max: f64,
    pub capped: bool,
    pub evaluations: usize,
}

/// Largest stable step within a 5% relative bracket, or `cap` if that is stable.
pub fn dtmax_bisection(cfg: &RunConfig, lo: f64, hi: f64, horizon: f64, cap: f64) -> Result<DtMaxResult, HarnessError> {
    let hi = hi.min(cap);
    if !(lo > 0.0 && lo < hi) {
        return Err(HarnessError::Config(format!("invalid bracket [{lo}, {hi}]")));
    }
    let mut evaluations = 1;
    if !is_stable(cfg, lo, horizon)? {
        return Err(HarnessError::Numerical { step: 0, time: 0.0, msg: format!("lower bound dt = {lo} is already unstable") });
    }
    evaluations += 1;
    if is_stable(cfg, hi, horizon)? {
        return Ok(DtMaxResult { dt_max: hi, capped: hi >= cap, evaluations });
    }
    let (mut a, mut b) = (lo, hi);
    while (b - a) > 0.05 * b {
        let m = 0.5 * (a + b);
        evaluations += 1;
        if is_stable(cfg, m, horizon)? {
            a = m;
        } else {
            b = m;
        }
    }
    debug!("dt_max bracket [{a}, {b}] after {evaluations} runs");
    Ok(DtMaxResult { dt_max: a, capped: false, evaluations })
}
