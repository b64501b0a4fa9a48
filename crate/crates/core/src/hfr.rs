//! Hybridized implicit stages: trace spaces, transmission conditions,
//! element blocks, static condensation and the condensed global solve.
//!
//! A stage on the implicit elements solves `h = u - u* - a dt R(u, uhat) = 0`
//! together with the transmission condition `G(u, uhat) = 0`. Newton updates
//! satisfy `[A B; C D] [du; duhat] = [-h; -G]`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::Scheme;
use crate::fr::{kron_identity, Discretization, FaceClass};
use crate::linalg::{gmres, BlockJacobi, CsrMatrix, GmresInfo, GmresSettings, LinearSolveError};
use crate::mesh::{FaceSide, Mesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HfrError {
    #[error("element {0}: stage block A is singular")]
    SingularBlock(usize),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
}

/// Global numbering of the trace points.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpace {
    pub kind: Scheme,
    pub n_points: usize,
    /// Per element and local face: global point indices in the element's
    /// counterclockwise flux-point order (trace faces only).
    pub element_faces: Vec<[Option<Vec<usize>>; 4]>,
    /// Per skeleton face: global indices in the minus side's order.
    pub faces: Vec<Option<Vec<usize>>>,
}

/// Number the trace points of every hybridized face. Continuous traces share
/// the end points of faces meeting at a vertex (periodic images included).
pub fn build_trace_space(mesh: &Mesh, face_class: &[FaceClass], scheme: Scheme, nf: usize) -> TraceSpace {
    let mut element_faces: Vec<[Option<Vec<usize>>; 4]> = vec![Default::default(); mesh.n_elements()];
    let mut faces = vec![None; mesh.faces.len()];
    let mut n_points = 0;
    let mut vertex_ids: HashMap<usize, usize> = HashMap::new();
    let continuous = scheme == Scheme::Efr && nf >= 2;
    for (fi, face) in mesh.faces.iter().enumerate() {
        if face_class[fi] != FaceClass::Trace {
            continue;
        }
        let mut ids = Vec::with_capacity(nf);
        let corners = mesh.face_corners(face.minus);
        for m in 0..nf {
            let vertex = if continuous && m == 0 {
                Some(corners[0])
            } else if continuous && m == nf - 1 {
                Some(corners[1])
            } else {
                None
            };
            let id = match vertex {
                Some(node) => *vertex_ids.entry(mesh.periodic_node_map[node]).or_insert_with(|| {
                    n_points += 1;
                    n_points - 1
                }),
                None => {
                    n_points += 1;
                    n_points - 1
                }
            };
            ids.push(id);
        }
        let plus = face.plus.expect("trace faces are interior");
        let FaceSide { elem, local } = face.minus;
        element_faces[elem][local] = Some(ids.clone());
        element_faces[plus.elem][plus.local] = Some(ids.iter().rev().copied().collect());
        faces[fi] = Some(ids);
    }
    TraceSpace { kind: scheme, n_points, element_faces, faces }
}

/// Wall-clock split of the implicit work.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    /// Global (condensed or monolithic) solves.
    pub global: Duration,
    /// Local recovery.
    pub local: Duration,
    /// Block Jacobians, condensation and assembly.
    pub jacobian: Duration,
    /// Implicit-element residuals.
    pub residual_implicit: Duration,
    /// Explicit-element residuals.
    pub residual_explicit: Duration,
}

impl Timings {
    pub fn add(&mut self, other: &Timings) {
        self.global += other.global;
        self.local += other.local;
        self.jacobian += other.jacobian;
        self.residual_implicit += other.residual_implicit;
        self.residual_explicit += other.residual_explicit;
    }
}

/// `J_f F^` of element `e` on its trace face `f`, nodal, including the
/// element's own viscous flux.
fn trace_side_flux(d: &Discretization, e: usize, f: usize, traces: &[f64], uhat: &[f64], grads: Option<&[[f64; 2]]>) -> Vec<f64> {
    let (nf, nv) = (d.n_face_points(), d.n_vars());
    let fg = d.geom.elements[e].face(d.side_kind(e, f), f);
    let mut out = d.common_normal_flux(e, f, traces, uhat);
    if let Some(fgrad) = grads {
        let nu = d.law.nu();
        for m in 0..nf {
            let n = fg.normal[m];
            for v in 0..nv {
                let g = fgrad[(e * 4 + f) * nf * nv + m * nv + v];
                out[m * nv + v] -= nu * (g[0] * n[0] + g[1] * n[1]);
            }
        }
    }
    for m in 0..nf {
        for v in 0..nv {
            out[m * nv + v] *= fg.jac[m];
        }
    }
    out
}

/// Transmission residual `G`: the weak flux jump tested with each trace basis function.
pub fn transmission_residual(d: &Discretization, u: &[f64], uhat: &[f64]) -> Vec<f64> {
    let (nf, nv) = (d.n_face_points(), d.n_vars());
    let traces = d.interpolate_to_faces(u, None);
    let grads = d.law.has_viscous().then(|| d.face_gradients(u, &traces, uhat));
    let mut g = vec![0.0; d.trace_len()];
    for e in 0..d.n_elements() {
        for f in 0..4 {
            let Some(ids) = &d.trace.element_faces[e][f] else { continue };
            let jf = trace_side_flux(d, e, f, &traces, uhat, grads.as_deref());
            let mass = &d.re.face(d.side_kind(e, f), f).mass;
            for m in 0..nf {
                for v in 0..nv {
                    let s: f64 = (0..nf).map(|n| mass[(m, n)] * jf[n * nv + v]).sum();
                    g[ids[m] * nv + v] += s;
                }
            }
        }
    }
    g
}

/// Largest pointwise mismatch of `J_f F^` across implicit/explicit interface faces.
pub fn interface_flux_jump(d: &Discretization, u: &[f64]) -> f64 {
    let (nf, nv) = (d.n_face_points(), d.n_vars());
    let traces = d.interpolate_to_faces(u, None);
    let mut worst = 0.0f64;
    for (fi, face) in d.mesh.faces.iter().enumerate() {
        if d.face_class[fi] != FaceClass::Interface {
            continue;
        }
        let plus = face.plus.expect("interface faces are interior");
        let a = trace_side_flux(d, face.minus.elem, face.minus.local, &traces, &[], None);
        let b = trace_side_flux(d, plus.elem, plus.local, &traces, &[], None);
        for m in 0..nf {
            for v in 0..nv {
                worst = worst.max((a[m * nv + v] + b[(nf - 1 - m) * nv + v]).abs());
            }
        }
    }
    worst
}

/// Stage residual `h` (blocks of `elems` only) and transmission residual `G`.
pub fn stage_residuals(d: &Discretization, elems: &[usize], u: &[f64], uhat: &[f64], ustar: &[f64], a_dt: f64) -> (Vec<f64>, Vec<f64>) {
    let bl = d.block_len();
    let r = d.residual(u, uhat, elems);
    let mut h = vec![0.0; d.state_len()];
    for &e in elems {
        for k in e * bl..(e + 1) * bl {
            h[k] = u[k] - ustar[k] - a_dt * r[k];
        }
    }
    (h, transmission_residual(d, u, uhat))
}

/// Newton blocks of one implicit element.
#[derive(Debug, Clone)]
pub struct ElementBlocks {
    pub elem: usize,
    /// `dh/du`.
    pub a: DMatrix<f64>,
    /// `dh/duhat` over the element's trace slots.
    pub b: DMatrix<f64>,
    /// `dG/du` restricted to the element's trace slots.
    pub c: DMatrix<f64>,
    /// The element's contribution to `dG/duhat`.
    pub d: DMatrix<f64>,
    /// Global scalar trace index of each local trace slot.
    pub slots: Vec<usize>,
}

/// Analytic Newton blocks (the viscous part is lagged).
pub fn elemental_blocks(d: &Discretization, e: usize, u: &[f64], uhat: &[f64], a_dt: f64) -> ElementBlocks {
    let (nf, nv, bl) = (d.n_face_points(), d.n_vars(), d.block_len());
    let jac = d.element_jacobian(e, u, uhat, false);
    let trace_faces: Vec<usize> = (0..4).filter(|&f| d.trace.element_faces[e][f].is_some()).collect();
    let nr = trace_faces.len() * nf * nv;
    let mut a = -a_dt * jac.self_block;
    for k in 0..bl {
        a[(k, k)] += 1.0;
    }
    let mut b = DMatrix::zeros(bl, nr);
    let mut c = DMatrix::zeros(nr, bl);
    let mut dd = DMatrix::zeros(nr, nr);
    let mut slots = Vec::with_capacity(nr);
    let ue = &u[e * bl..(e + 1) * bl];
    for (t, &f) in trace_faces.iter().enumerate() {
        let ids = d.trace.element_faces[e][f].as_ref().expect("trace face");
        for &g in ids {
            for v in 0..nv {
                slots.push(g * nv + v);
            }
        }
        let off = t * nf * nv;
        let tb = jac.trace[f].as_ref().expect("trace block");
        b.view_mut((0, off), (bl, nf * nv)).copy_from(&(-a_dt * tb));
        let kind = d.side_kind(e, f);
        let ops = d.re.face(kind, f);
        let fg = d.geom.elements[e].face(kind, f);
        let own = d.element_face_values(e, f, ue);
        let mut du = DMatrix::zeros(nf * nv, nf * nv);
        let mut duh = DMatrix::zeros(nf * nv, nf * nv);
        for m in 0..nf {
            let gi = ids[m];
            let (_, d_uh, d_u) = d.law.hybrid_flux_jacobians(&uhat[gi * nv..(gi + 1) * nv], &own[m * nv..(m + 1) * nv], fg.normal[m]);
            for v in 0..nv {
                for w in 0..nv {
                    du[(m * nv + v, m * nv + w)] = fg.jac[m] * d_u[v][w];
                    duh[(m * nv + v, m * nv + w)] = fg.jac[m] * d_uh[v][w];
                }
            }
        }
        let mass = kron_identity(&ops.mass, nv);
        let interp = kron_identity(&ops.interp, nv);
        c.view_mut((off, 0), (nf * nv, bl)).copy_from(&(&mass * du * interp));
        dd.view_mut((off, off), (nf * nv, nf * nv)).copy_from(&(&mass * duh));
    }
    ElementBlocks { elem: e, a, b, c, d: dd, slots }
}

/// Factorized element with its Schur complement.
#[derive(Debug, Clone)]
pub struct CondensedElement {
    pub elem: usize,
    pub lu: LU<f64, Dyn, Dyn>,
    /// `A^-1 B`.
    pub ainv_b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `L_k = D - C A^-1 B`.
    pub l: DMatrix<f64>,
    pub slots: Vec<usize>,
}

pub fn condense(blocks: ElementBlocks) -> Result<CondensedElement, HfrError> {
    let lu = blocks.a.lu();
    if !lu.is_invertible() {
        return Err(HfrError::SingularBlock(blocks.elem));
    }
    let ainv_b = lu.solve(&blocks.b).ok_or(HfrError::SingularBlock(blocks.elem))?;
    let l = &blocks.d - &blocks.c * &ainv_b;
    Ok(CondensedElement { elem: blocks.elem, lu, ainv_b, c: blocks.c, l, slots: blocks.slots })
}

impl CondensedElement {
    /// `A^-1 r`.
    pub fn solve_interior(&self, r: &[f64]) -> DVector<f64> {
        self.lu.solve(&DVector::from_column_slice(r)).expect("factorized block")
    }

    /// `t_k = s_k - C A^-1 r_k` given `A^-1 r_k`.
    pub fn condensed_rhs(&self, ainv_r: &DVector<f64>, s: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(s) - &self.c * ainv_r
    }

    /// `du = A^-1 (r - B duhat)` given `A^-1 r` and the gathered trace update.
    pub fn local_update(&self, ainv_r: &DVector<f64>, duhat_local: &[f64]) -> DVector<f64> {
        ainv_r - &self.ainv_b * DVector::from_column_slice(duhat_local)
    }
}

/// Condensed global system `L duhat = t`.
#[derive(Debug, Clone)]
pub struct CondensedSystem {
    pub l: CsrMatrix,
}

pub fn assemble_global(n: usize, elements: &[CondensedElement]) -> CondensedSystem {
    let mut rows = vec![Vec::new(); n];
    for el in elements {
        for &r in &el.slots {
            rows[r].extend_from_slice(&el.slots);
        }
    }
    let mut l = CsrMatrix::from_pattern(n, rows);
    for el in elements {
        for (i, &r) in el.slots.iter().enumerate() {
            for (j, &c) in el.slots.iter().enumerate() {
                l.add(r, c, el.l[(i, j)]);
            }
        }
    }
    CondensedSystem { l }
}

pub fn solve_condensed(sys: &CondensedSystem, t: &[f64], block: usize, settings: GmresSettings) -> Result<(Vec<f64>, GmresInfo), HfrError> {
    let pc = BlockJacobi::new(&sys.l, block)?;
    let mut x = vec![0.0; t.len()];
    let info = gmres(|x, y| sys.l.matvec(x, y), |x, y| pc.apply(x, y), t, &mut x, settings)?;
    Ok((x, info))
}

/// Linearized hybridized stage, reusable across Newton iterations.
#[derive(Debug, Clone)]
pub struct HybridLinearization {
    pub elements: Vec<CondensedElement>,
    pub system: CondensedSystem,
    precond: Option<BlockJacobi>,
    pub a_dt: f64,
}

impl HybridLinearization {
    pub fn build(d: &Discretization, elems: &[usize], u: &[f64], uhat: &[f64], a_dt: f64) -> Result<Self, HfrError> {
        let elements: Vec<CondensedElement> =
            elems.par_iter().map(|&e| condense(elemental_blocks(d, e, u, uhat, a_dt))).collect::<Result<_, _>>()?;
        let system = assemble_global(d.trace_len(), &elements);
        let precond = if system.l.n > 0 { Some(BlockJacobi::new(&system.l, d.n_vars())?) } else { None };
        Ok(HybridLinearization { elements, system, precond, a_dt })
    }

    /// Newton update for residuals `(h, G)`; returns `(du, duhat, gmres iterations)`.
    pub fn solve(
        &self,
        d: &Discretization,
        h: &[f64],
        g: &[f64],
        settings: GmresSettings,
        timings: &mut Timings,
    ) -> Result<(Vec<f64>, Vec<f64>, usize), HfrError> {
        let bl = d.block_len();
        let t0 = Instant::now();
        let ainv_r: Vec<DVector<f64>> = self
            .elements
            .par_iter()
            .map(|el| {
                let r: Vec<f64> = h[el.elem * bl..(el.elem + 1) * bl].iter().map(|x| -x).collect();
                el.solve_interior(&r)
            })
            .collect();
        let mut t: Vec<f64> = g.iter().map(|x| -x).collect();
        for (el, ar) in self.elements.iter().zip(&ainv_r) {
            let car = &el.c * ar;
            for (i, &slot) in el.slots.iter().enumerate() {
                t[slot] -= car[i];
            }
        }
        timings.local += t0.elapsed();
        let t1 = Instant::now();
        let mut duhat = vec![0.0; t.len()];
        let mut iterations = 0;
        if let Some(pc) = &self.precond {
            let info = gmres(|x, y| self.system.l.matvec(x, y), |x, y| pc.apply(x, y), &t, &mut duhat, settings)?;
            iterations = info.iterations;
        }
        timings.global += t1.elapsed();
        let t2 = Instant::now();
        let mut du = vec![0.0; d.state_len()];
        let updates: Vec<DVector<f64>> = self
            .elements
            .par_iter()
            .zip(&ainv_r)
            .map(|(el, ar)| {
                let local: Vec<f64> = el.slots.iter().map(|&s| duhat[s]).collect();
                el.local_update(ar, &local)
            })
            .collect();
        for (el, upd) in self.elements.iter().zip(updates) {
            du[el.elem * bl..(el.elem + 1) * bl].copy_from_slice(upd.as_slice());
        }
        timings.local += t2.elapsed();
        Ok((du, duhat, iterations))
    }
}

/// Linearized unhybridized implicit FR stage over the implicit elements.
#[derive(Debug, Clone)]
pub struct MonolithicLinearization {
    elems: Vec<usize>,
    jac: CsrMatrix,
    precond: BlockJacobi,
    pub a_dt: f64,
}

impl MonolithicLinearization {
    pub fn build(d: &Discretization, elems: &[usize], u: &[f64], a_dt: f64) -> Result<Self, HfrError> {
        let bl = d.block_len();
        let mut pos = vec![usize::MAX; d.n_elements()];
        for (k, &e) in elems.iter().enumerate() {
            pos[e] = k;
        }
        let jacs: Vec<_> = elems.par_iter().map(|&e| d.element_jacobian(e, u, &[], true)).collect();
        let n = elems.len() * bl;
        let mut rows = vec![Vec::new(); n];
        for (k, (&e, jac)) in elems.iter().zip(&jacs).enumerate() {
            let mut cols: Vec<usize> = (k * bl..(k + 1) * bl).collect();
            for (o, _) in jac.neighbours.iter().flatten() {
                if pos[*o] != usize::MAX {
                    cols.extend(pos[*o] * bl..(pos[*o] + 1) * bl);
                }
            }
            let _ = e;
            for r in k * bl..(k + 1) * bl {
                rows[r] = cols.clone();
            }
        }
        let mut m = CsrMatrix::from_pattern(n, rows);
        let mut diag = Vec::with_capacity(elems.len());
        for (k, jac) in jacs.iter().enumerate() {
            let mut blk = -a_dt * &jac.self_block;
            for i in 0..bl {
                blk[(i, i)] += 1.0;
            }
            for (o, nb) in jac.neighbours.iter().flatten() {
                let q = pos[*o];
                if q == usize::MAX {
                    continue;
                }
                if q == k {
                    blk -= a_dt * nb;
                    continue;
                }
                for r in 0..bl {
                    for c in 0..bl {
                        m.add(k * bl + r, q * bl + c, -a_dt * nb[(r, c)]);
                    }
                }
            }
            for r in 0..bl {
                for c in 0..bl {
                    m.add(k * bl + r, k * bl + c, blk[(r, c)]);
                }
            }
            diag.push(blk.try_inverse().ok_or(HfrError::SingularBlock(elems[k]))?);
        }
        Ok(MonolithicLinearization { elems: elems.to_vec(), jac: m, precond: BlockJacobi::from_blocks(bl, diag), a_dt })
    }

    pub fn solve(
        &self,
        d: &Discretization,
        h: &[f64],
        settings: GmresSettings,
        timings: &mut Timings,
    ) -> Result<(Vec<f64>, usize), HfrError> {
        let bl = d.block_len();
        let t0 = Instant::now();
        let mut rhs = Vec::with_capacity(self.elems.len() * bl);
        for &e in &self.elems {
            rhs.extend(h[e * bl..(e + 1) * bl].iter().map(|x| -x));
        }
        let mut x = vec![0.0; rhs.len()];
        let info = gmres(|x, y| self.jac.matvec(x, y), |x, y| self.precond.apply(x, y), &rhs, &mut x, settings)?;
        let mut du = vec![0.0; d.state_len()];
        for (k, &e) in self.elems.iter().enumerate() {
            du[e * bl..(e + 1) * bl].copy_from_slice(&x[k * bl..(k + 1) * bl]);
        }
        timings.global += t0.elapsed();
        Ok((du, info.iterations))
    }
}

/// Dense `[A B; C D]` over the implicit element unknowns (in `elems` order)
/// followed by all trace unknowns.
pub fn dense_stage_system(d: &Discretization, elems: &[usize], u: &[f64], uhat: &[f64], a_dt: f64) -> DMatrix<f64> {
    let bl = d.block_len();
    let ni = elems.len() * bl;
    let n = ni + d.trace_len();
    let mut m = DMatrix::zeros(n, n);
    for (k, &e) in elems.iter().enumerate() {
        let blk = elemental_blocks(d, e, u, uhat, a_dt);
        let o = k * bl;
        m.view_mut((o, o), (bl, bl)).copy_from(&blk.a);
        for (j, &s) in blk.slots.iter().enumerate() {
            for r in 0..bl {
                m[(o + r, ni + s)] += blk.b[(r, j)];
                m[(ni + s, o + r)] += blk.c[(j, r)];
            }
            for (i, &t) in blk.slots.iter().enumerate() {
                m[(ni + t, ni + s)] += blk.d[(i, j)];
            }
        }
    }
    m
}

/// Newton update from a dense LU of the full stage system.
pub fn monolithic_dense_solve(
    d: &Discretization,
    elems: &[usize],
    u: &[f64],
    uhat: &[f64],
    h: &[f64],
    g: &[f64],
    a_dt: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let bl = d.block_len();
    let m = dense_stage_system(d, elems, u, uhat, a_dt);
    let mut rhs = Vec::with_capacity(m.nrows());
    for &e in elems {
        rhs.extend(h[e * bl..(e + 1) * bl].iter().map(|x| -x));
    }
    rhs.extend(g.iter().map(|x| -x));
    let x = m.lu().solve(&DVector::from_vec(rhs))?;
    let mut du = vec![0.0; d.state_len()];
    for (k, &e) in elems.iter().enumerate() {
        du[e * bl..(e + 1) * bl].copy_from_slice(&x.as_slice()[k * bl..(k + 1) * bl]);
    }
    Some((du, x.as_slice()[elems.len() * bl..].to_vec()))
}
