//! Butcher pairs, explicit Runge-Kutta steps and the partitioned IMEX step.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::basis::Scheme;
use crate::fr::Discretization;
use crate::hfr::{stage_residuals, HfrError, HybridLinearization, MonolithicLinearization, Timings};
use crate::linalg::GmresSettings;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableauError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{part} tableau: expected {expected} rows/entries, found {found}")]
    Size { part: &'static str, expected: usize, found: usize },
    #[error("implicit tableau row {row}: first row and column must be zero padding")]
    Padding { row: usize },
    #[error("implicit tableau row {row}: entries above the diagonal")]
    NotLowerTriangular { row: usize },
    #[error("explicit tableau row {row}: entries on or above the diagonal")]
    NotStrictlyLower { row: usize },
    #[error("stage {row}: explicit node {explicit} differs from implicit node {implicit}")]
    NodeMismatch { row: usize, implicit: f64, explicit: f64 },
    #[error("{part} tableau row {row}: row sum {sum} differs from node {node}")]
    RowSum { part: &'static str, row: usize, sum: f64, node: f64 },
    #[error("{part} weights sum to {sum}, expected 1")]
    WeightSum { part: &'static str, sum: f64 },
    #[error("unknown tableau {0}")]
    Unknown(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Explicit Runge-Kutta tableau.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ExplicitTableau {
    pub fn rk4() -> Self {
        ExplicitTableau {
            a: vec![vec![0.0; 4], vec![0.5, 0.0, 0.0, 0.0], vec![0.0, 0.5, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 0.5, 1.0],
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

/// Implicit and explicit tableaus sharing `sigma = s + 1` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherPair {
    pub name: String,
    pub order: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub a_ex: Vec<Vec<f64>>,
    pub b_ex: Vec<f64>,
    pub c_ex: Vec<f64>,
}

impl ButcherPair {
    /// Padded stage count `sigma`.
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn explicit_part(&self) -> ExplicitTableau {
        ExplicitTableau { a: self.a_ex.clone(), b: self.b_ex.clone(), c: self.c_ex.clone() }
    }

    pub fn validate(&self) -> Result<(), TableauError> {
        let n = self.b.len();
        for (part, a, b, c) in [("implicit", &self.a, &self.b, &self.c), ("explicit", &self.a_ex, &self.b_ex, &self.c_ex)] {
            if a.len() != n {
                return Err(TableauError::Size { part, expected: n, found: a.len() });
            }
            for row in a {
                if row.len() != n {
                    return Err(TableauError::Size { part, expected: n, found: row.len() });
                }
            }
            if b.len() != n || c.len() != n {
                return Err(TableauError::Size { part, expected: n, found: b.len().min(c.len()) });
            }
        }
        for i in 0..n {
            if self.a[0][i] != 0.0 || self.a[i][0] != 0.0 {
                return Err(TableauError::Padding { row: i });
            }
            if self.a[i][i + 1..].iter().any(|&x| x != 0.0) {
                return Err(TableauError::NotLowerTriangular { row: i });
            }
            if self.a_ex[i][i..].iter().any(|&x| x != 0.0) {
                return Err(TableauError::NotStrictlyLower { row: i });
            }
        }
        if self.b[0] != 0.0 {
            return Err(TableauError::Padding { row: 0 });
        }
        for i in 0..n {
            if (self.c[i] - self.c_ex[i]).abs() > ROW_SUM_TOL {
                return Err(TableauError::NodeMismatch { row: i, implicit: self.c[i], explicit: self.c_ex[i] });
            }
            for (part, a, c) in [("implicit", &self.a, &self.c), ("explicit", &self.a_ex, &self.c_ex)] {
                let sum: f64 = a[i].iter().sum();
                if (sum - c[i]).abs() > ROW_SUM_TOL {
                    return Err(TableauError::RowSum { part, row: i, sum, node: c[i] });
                }
            }
        }
        for (part, b) in [("implicit", &self.b), ("explicit", &self.b_ex)] {
            let sum: f64 = b.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(TableauError::WeightSum { part, sum });
            }
        }
        Ok(())
    }
}

/// Two-stage, second-order SDIRK (padded) with its explicit companion.
pub fn sdirk2_tableau() -> ButcherPair {
    let g = 1.0 - std::f64::consts::SQRT_2 / 2.0;
    let d = -2.0 * std::f64::consts::SQRT_2 / 3.0;
    ButcherPair {
        name: "sdirk2".into(),
        order: 2,
        a: vec![vec![0.0, 0.0, 0.0], vec![0.0, g, 0.0], vec![0.0, 1.0 - g, g]],
        b: vec![0.0, 1.0 - g, g],
        c: vec![0.0, g, 1.0],
        a_ex: vec![vec![0.0, 0.0, 0.0], vec![g, 0.0, 0.0], vec![d, 1.0 - d, 0.0]],
        b_ex: vec![0.0, 1.0 - g, g],
        c_ex: vec![0.0, g, 1.0],
    }
}

const SHIPPED: [(&str, &str); 2] = [("imex32", include_str!("../tableaus/imex32.txt")), ("imex53", include_str!("../tableaus/imex53.txt"))];

/// A tableau shipped with the library, by name.
pub fn shipped_pair(name: &str) -> Result<ButcherPair, TableauError> {
    if name == "sdirk2" {
        return Ok(sdirk2_tableau());
    }
    let text = SHIPPED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| TableauError::Unknown(name.to_string()))?;
    parse_tableau_pair(text)
}

pub fn load_tableau_pair(path: &Path) -> Result<ButcherPair, TableauError> {
    let text = std::fs::read_to_string(path).map_err(|e| TableauError::Io(format!("{}: {e}", path.display())))?;
    parse_tableau_pair(&text)
}

fn parse_number(tok: &str, line: usize) -> Result<f64, TableauError> {
    let err = || TableauError::Parse { line, msg: format!("bad number `{tok}`") };
    match tok.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.parse().map_err(|_| err())?;
            let q: f64 = q.parse().map_err(|_| err())?;
            Ok(p / q)
        }
        None => tok.parse().map_err(|_| err()),
    }
}

/// Parse and validate the `imex-pair v1` text format.
pub fn parse_tableau_pair(text: &str) -> Result<ButcherPair, TableauError> {
    let mut lines =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim())).filter(|(_, l)| !l.is_empty()).peekable();
    let perr = |line: usize, msg: &str| TableauError::Parse { line, msg: msg.to_string() };
    match lines.next() {
        Some((_, "imex-pair v1")) => {}
        Some((l, _)) => return Err(perr(l, "expected header `imex-pair v1`")),
        None => return Err(perr(1, "empty tableau file")),
    }
    let mut name = String::from("unnamed");
    if let Some(&(_, l)) = lines.peek() {
        if let Some(n) = l.strip_prefix("name ") {
            name = n.trim().to_string();
            lines.next();
        }
    }
    let (sl, sline) = lines.next().ok_or_else(|| perr(1, "missing `s <count> q <order>` line"))?;
    let t: Vec<&str> = sline.split_whitespace().collect();
    let (s, q) = match t.as_slice() {
        ["s", s, "q", q] => {
            (s.parse::<usize>().map_err(|_| perr(sl, "bad stage count"))?, q.parse::<usize>().map_err(|_| perr(sl, "bad order"))?)
        }
        _ => return Err(perr(sl, "expected `s <count> q <order>`")),
    };
    let sigma = s + 1;
    let mut read_part = |label: &str| -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>), TableauError> {
        match lines.next() {
            Some((_, l)) if l == label => {}
            Some((l, _)) => return Err(perr(l, &format!("expected `{label}`"))),
            None => return Err(perr(sl, &format!("missing `{label}` section"))),
        }
        let mut rows = Vec::with_capacity(sigma);
        for _ in 0..sigma {
            let (ln, l) = lines.next().ok_or_else(|| perr(sl, &format!("{label} tableau has fewer than {sigma} rows")))?;
            let row: Vec<f64> = l.split_whitespace().map(|t| parse_number(t, ln)).collect::<Result<_, _>>()?;
            if row.len() != sigma {
                return Err(perr(ln, &format!("row has {} entries, expected {sigma}", row.len())));
            }
            rows.push(row);
        }
        let mut vec_line = |key: &str| -> Result<Vec<f64>, TableauError> {
            let (ln, l) = lines.next().ok_or_else(|| perr(sl, &format!("missing `{key}` line")))?;
            let mut toks = l.split_whitespace();
            if toks.next() != Some(key) {
                return Err(perr(ln, &format!("expected `{key} ...`")));
            }
            let v: Vec<f64> = toks.map(|t| parse_number(t, ln)).collect::<Result<_, _>>()?;
            if v.len() != sigma {
                return Err(perr(ln, &format!("`{key}` has {} entries, expected {sigma}", v.len())));
            }
            Ok(v)
        };
        let b = vec_line("b")?;
        let c = vec_line("c")?;
        Ok((rows, b, c))
    };
    let (a, b, c) = read_part("implicit")?;
    let (a_ex, b_ex, c_ex) = read_part("explicit")?;
    if let Some((l, _)) = lines.next() {
        return Err(perr(l, "trailing content"));
    }
    let pair = ButcherPair { name, order: q, a, b, c, a_ex, b_ex, c_ex };
    pair.validate()?;
    Ok(pair)
}

/// Serialize a pair in the text format (17 significant digits).
pub fn format_tableau_pair(pair: &ButcherPair) -> String {
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ");
    let mut s = format!("imex-pair v1\nname {}\ns {} q {}\nimplicit\n", pair.name, pair.stages() - 1, pair.order);
    for r in &pair.a {
        s += &row(r);
        s.push('\n');
    }
    s += &format!("b {}\nc {}\nexplicit\n", row(&pair.b), row(&pair.c));
    for r in &pair.a_ex {
        s += &row(r);
        s.push('\n');
    }
    s += &format!("b {}\nc {}\n", row(&pair.b_ex), row(&pair.c_ex));
    s
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImexError {
    #[error("stage {stage}: Newton did not converge in {iterations} iterations (residual history {history:?})")]
    Newton { stage: usize, iterations: usize, history: Vec<f64> },
    #[error(transparent)]
    Hfr(#[from] HfrError),
    #[error("non-finite solution after the step")]
    Instability,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub tol_abs: f64,
    /// Relative drop of the residual norm that also counts as converged (0 disables).
    pub tol_rel: f64,
    pub max_iterations: usize,
    pub gmres: GmresSettings,
    /// Steps a Jacobian may be reused for nonlinear laws (0 refreshes every iteration).
    pub freeze_steps: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { tol_abs: 1e-6, tol_rel: 0.0, max_iterations: 20, gmres: GmresSettings::default(), freeze_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NewtonStats {
    pub stage_solves: usize,
    pub iterations: usize,
    pub max_iterations: usize,
    pub linear_iterations: usize,
    pub jacobian_builds: usize,
}

/// Data access recorded during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageEvent {
    /// Residual of `stage` evaluated from the stage solution of index `reads`.
    ExplicitResidual {
        stage: usize,
        reads: usize,
    },
    ImplicitResidual {
        stage: usize,
        reads: usize,
    },
    /// Explicit stage update combining explicit residuals `0..=last_used`.
    ExplicitUpdate {
        stage: usize,
        last_used: Option<usize>,
    },
    ImplicitSolve {
        stage: usize,
    },
}

#[derive(Debug, Clone)]
enum Linearization {
    Hybrid(HybridLinearization),
    Monolithic(MonolithicLinearization),
}

impl Linearization {
    fn a_dt(&self) -> f64 {
        match self {
            Self::Hybrid(l) => l.a_dt,
            Self::Monolithic(l) => l.a_dt,
        }
    }
}

/// Partitioned IMEX integrator; owns Jacobian caches and diagnostics.
#[derive(Debug, Clone)]
pub struct ImexIntegrator {
    pub pair: ButcherPair,
    pub newton: NewtonSettings,
    pub timings: Timings,
    pub stats: NewtonStats,
    pub events: Option<Vec<StageEvent>>,
    /// Linearizations keyed by `a_dt`, with the step they were built in.
    cache: Vec<(Linearization, usize)>,
    steps: usize,
}

fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

impl ImexIntegrator {
    pub fn new(pair: ButcherPair, newton: NewtonSettings) -> Self {
        ImexIntegrator {
            pair,
            newton,
            timings: Timings::default(),
            stats: NewtonStats::default(),
            events: None,
            cache: Vec::new(),
            steps: 0,
        }
    }

    pub fn record_events(&mut self) {
        self.events = Some(Vec::new());
    }

    fn log(&mut self, ev: StageEvent) {
        if let Some(evs) = &mut self.events {
            evs.push(ev);
        }
    }

    /// One step from `u`; `uhat` is reset to the interior-average guess and
    /// returned holding the final-stage trace.
    pub fn step(&mut self, d: &Discretization, u: &[f64], uhat: &mut Vec<f64>, dt: f64) -> Result<Vec<f64>, ImexError> {
        let im = d.partition.implicit_elements();
        let ex = d.partition.explicit_elements();
        let bl = d.block_len();
        let sigma = self.pair.stages();
        *uhat = d.initial_trace(u);
        let mut r_im: Vec<Option<Vec<f64>>> = vec![None; sigma];
        let mut r_ex: Vec<Option<Vec<f64>>> = vec![None; sigma];
        let needs_im = |pair: &ButcherPair, j: usize| pair.b[j] != 0.0 || (j + 1..sigma).any(|i| pair.a[i][j] != 0.0);
        let needs_ex = |pair: &ButcherPair, j: usize| pair.b_ex[j] != 0.0 || (j + 1..sigma).any(|i| pair.a_ex[i][j] != 0.0);
        let mut stage = u.to_vec();
        for i in 0..sigma {
            if i > 0 {
                let mut last = None;
                for &e in &ex {
                    for k in e * bl..(e + 1) * bl {
                        stage[k] = u[k];
                    }
                }
                for j in 0..i {
                    let a = self.pair.a_ex[i][j];
                    if a == 0.0 || ex.is_empty() {
                        continue;
                    }
                    last = Some(j);
                    let r = r_ex[j].as_ref().expect("explicit residual of an earlier stage");
                    for &e in &ex {
                        for k in e * bl..(e + 1) * bl {
                            stage[k] += dt * a * r[k];
                        }
                    }
                }
                self.log(StageEvent::ExplicitUpdate { stage: i, last_used: last });
                if !im.is_empty() {
                    let mut ustar = u.to_vec();
                    for j in 0..i {
                        let a = self.pair.a[i][j];
                        if a == 0.0 {
                            continue;
                        }
                        let r = r_im[j].as_ref().expect("implicit residual of an earlier stage");
                        for &e in &im {
                            for k in e * bl..(e + 1) * bl {
                                ustar[k] += dt * a * r[k];
                            }
                        }
                    }
                    let a_dt = self.pair.a[i][i] * dt;
                    if a_dt == 0.0 {
                        for &e in &im {
                            stage[e * bl..(e + 1) * bl].copy_from_slice(&ustar[e * bl..(e + 1) * bl]);
                        }
                        // The trace still has to satisfy the transmission condition.
                        if d.scheme != Scheme::Fr && needs_im(&self.pair, i) {
                            self.log(StageEvent::ImplicitSolve { stage: i });
                            self.newton_solve(d, &im, &mut stage, uhat, &ustar, 0.0, i)?;
                        }
                    } else {
                        self.log(StageEvent::ImplicitSolve { stage: i });
                        self.newton_solve(d, &im, &mut stage, uhat, &ustar, a_dt, i)?;
                    }
                }
            }
            if !im.is_empty() && needs_im(&self.pair, i) {
                let t0 = Instant::now();
                r_im[i] = Some(d.residual(&stage, uhat, &im));
                self.timings.residual_implicit += t0.elapsed();
                self.log(StageEvent::ImplicitResidual { stage: i, reads: i });
            }
            if !ex.is_empty() && needs_ex(&self.pair, i) {
                let t0 = Instant::now();
                r_ex[i] = Some(d.residual(&stage, uhat, &ex));
                self.timings.residual_explicit += t0.elapsed();
                self.log(StageEvent::ExplicitResidual { stage: i, reads: i });
            }
        }
        let mut next = u.to_vec();
        for j in 0..sigma {
            for (elems, w, r) in [(&im, self.pair.b[j], &r_im[j]), (&ex, self.pair.b_ex[j], &r_ex[j])] {
                if w == 0.0 || elems.is_empty() {
                    continue;
                }
                let r = r.as_ref().expect("weighted residual");
                for &e in elems.iter() {
                    for k in e * bl..(e + 1) * bl {
                        next[k] += dt * w * r[k];
                    }
                }
            }
        }
        self.steps += 1;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(ImexError::Instability);
        }
        Ok(next)
    }

    /// Index of a reusable cached linearization for `a_dt`.
    fn cached_linearization(&self, d: &Discretization, a_dt: f64) -> Option<usize> {
        let k = self.cache.iter().position(|(lin, _)| lin.a_dt() == a_dt)?;
        let built = self.cache[k].1;
        let reusable = (d.law.is_linear() && !d.law.has_viscous()) || self.steps < built + self.newton.freeze_steps;
        reusable.then_some(k)
    }

    /// Newton iteration for the stage equations of the implicit elements.
    /// Returns the number of iterations used.
    #[allow(clippy::too_many_arguments)]
    pub fn newton_solve(
        &mut self,
        d: &Discretization,
        im: &[usize],
        u: &mut [f64],
        uhat: &mut [f64],
        ustar: &[f64],
        a_dt: f64,
        stage: usize,
    ) -> Result<usize, ImexError> {
        let hybrid = d.scheme != Scheme::Fr;
        let mut history = Vec::new();
        self.stats.stage_solves += 1;
        for it in 0..=self.newton.max_iterations {
            let t0 = Instant::now();
            let (h, g) = if hybrid {
                stage_residuals(d, im, u, uhat, ustar, a_dt)
            } else {
                let r = d.residual(u, &[], im);
                let bl = d.block_len();
                let mut h = vec![0.0; u.len()];
                for &e in im {
                    for k in e * bl..(e + 1) * bl {
                        h[k] = u[k] - ustar[k] - a_dt * r[k];
                    }
                }
                (h, Vec::new())
            };
            self.timings.residual_implicit += t0.elapsed();
            let norm = norm_inf(&h).max(norm_inf(&g));
            history.push(norm);
            if !norm.is_finite() {
                break;
            }
            let converged =
                norm <= self.newton.tol_abs || (it > 0 && self.newton.tol_rel > 0.0 && norm <= self.newton.tol_rel * history[0]);
            if converged {
                self.stats.iterations += it;
                self.stats.max_iterations = self.stats.max_iterations.max(it);
                return Ok(it);
            }
            if it == self.newton.max_iterations {
                break;
            }
            let k = match self.cached_linearization(d, a_dt) {
                Some(k) => k,
                None => {
                    let t1 = Instant::now();
                    let lin = if hybrid {
                        Linearization::Hybrid(HybridLinearization::build(d, im, u, uhat, a_dt)?)
                    } else {
                        Linearization::Monolithic(MonolithicLinearization::build(d, im, u, a_dt)?)
                    };
                    self.timings.jacobian += t1.elapsed();
                    self.stats.jacobian_builds += 1;
                    self.cache.retain(|(l, _)| l.a_dt() != a_dt);
                    self.cache.push((lin, self.steps));
                    self.cache.len() - 1
                }
            };
            match &self.cache[k].0 {
                Linearization::Hybrid(l) => {
                    let (du, duhat, its) = l.solve(d, &h, &g, self.newton.gmres, &mut self.timings)?;
                    self.stats.linear_iterations += its;
                    u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
                    uhat.iter_mut().zip(&duhat).for_each(|(a, b)| *a += b);
                }
                Linearization::Monolithic(l) => {
                    let (du, its) = l.solve(d, &h, self.newton.gmres, &mut self.timings)?;
                    self.stats.linear_iterations += its;
                    u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
                }
            }
        }
        Err(ImexError::Newton { stage, iterations: history.len().saturating_sub(1), history })
    }
}

/// Explicit Runge-Kutta step over all elements.
pub fn explicit_rk_step(d: &Discretization, u: &[f64], dt: f64, tab: &ExplicitTableau) -> Result<Vec<f64>, ImexError> {
    let all: Vec<usize> = (0..d.n_elements()).collect();
    let s = tab.stages();
    let mut k: Vec<Option<Vec<f64>>> = vec![None; s];
    for i in 0..s {
        let needed = tab.b[i] != 0.0 || (i + 1..s).any(|r| tab.a[r][i] != 0.0);
        if !needed {
            continue;
        }
        let mut stage = u.to_vec();
        for j in 0..i {
            if tab.a[i][j] != 0.0 {
                let kj = k[j].as_ref().expect("earlier stage");
                for (x, r) in stage.iter_mut().zip(kj) {
                    *x += dt * tab.a[i][j] * r;
                }
            }
        }
        k[i] = Some(d.residual(&stage, &[], &all));
    }
    let mut next = u.to_vec();
    for i in 0..s {
        if tab.b[i] != 0.0 {
            let ki = k[i].as_ref().expect("weighted stage");
            for (x, r) in next.iter_mut().zip(ki) {
                *x += dt * tab.b[i] * r;
            }
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(ImexError::Instability);
    }
    Ok(next)
}
