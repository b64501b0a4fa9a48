//! Flux reconstruction spatial operator on a partitioned mesh.
//!
//! State vectors are element-major: entry `(e * n_s + i) * n_vars + v`.
//! Trace vectors hold `n_vars` values per global trace point.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{lagrange_basis, radau_correction_derivatives, BasisError, NodeKind, ReferenceElement, Scheme, REFERENCE_NORMALS};
use crate::hfr::{build_trace_space, TraceSpace};
use crate::mesh::{compute_geometric_factors, FaceKind, FaceSide, GeometricFactors, Mesh, MeshError};
use crate::partition::Partition;
use crate::physics::{ConservationLaw, Mat, PhysicsError, MAX_VARS};

#[derive(Debug, Error)]
pub enum DiscretizationError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("boundary tag {0} has no exterior state")]
    MissingBoundaryState(String),
    #[error("exterior state for tag {tag} has {got} entries, expected {expected}")]
    BoundaryStateSize { tag: String, got: usize, expected: usize },
    #[error("partition covers {got} elements, mesh has {expected}")]
    PartitionSize { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceClass {
    /// Riemann flux between two elements of the same region (or any pair for FR).
    Standard,
    /// Riemann flux between an implicit and an explicit element.
    Interface,
    /// Hybridized face between two implicit elements.
    Trace,
    Boundary,
}

/// One-dimensional factors of the tensor-product face operators.
#[derive(Debug, Clone)]
struct TensorOps {
    n1: usize,
    edge_lo: Vec<f64>,
    edge_hi: Vec<f64>,
    gl_d: Vec<f64>,
    gr_d: Vec<f64>,
    diff: Vec<f64>,
    /// Per node kind: solution basis at face nodes, `nf x n1`.
    interp_along: [Vec<f64>; 2],
    /// Per node kind: face basis at solution nodes, `n1 x nf`.
    lift_along: [Vec<f64>; 2],
}

fn kind_index(kind: NodeKind) -> usize {
    match kind {
        NodeKind::GaussLegendre => 0,
        NodeKind::GaussLobattoLegendre => 1,
    }
}

impl TensorOps {
    fn new(re: &ReferenceElement) -> Self {
        let n1 = re.n1d();
        let x = &re.solution_nodes.points;
        let edge_lo = lagrange_basis(x, -1.0);
        let edge_hi = lagrange_basis(x, 1.0);
        let (gl_d, gr_d) = x.iter().map(|&t| radau_correction_derivatives(re.degree, t)).unzip();
        let diff = (0..n1 * n1).map(|k| re.diff_1d[(k / n1, k % n1)]).collect();
        let build = |kind: NodeKind| -> (Vec<f64>, Vec<f64>) {
            let Some(faces) = (kind == NodeKind::GaussLegendre || re.gll_faces.is_some()).then(|| re.faces(kind)) else {
                return (Vec::new(), Vec::new());
            };
            let t = &faces[0].nodes.points;
            let interp = t.iter().flat_map(|&s| lagrange_basis(x, s)).collect();
            let lift = x.iter().flat_map(|&s| lagrange_basis(t, s)).collect();
            (interp, lift)
        };
        let (i0, l0) = build(NodeKind::GaussLegendre);
        let (i1, l1) = build(NodeKind::GaussLobattoLegendre);
        TensorOps { n1, edge_lo, edge_hi, gl_d, gr_d, diff, interp_along: [i0, i1], lift_along: [l0, l1] }
    }

    /// Values of an `nv`-component nodal field at the flux points of face `f`.
    fn interp(&self, k: usize, f: usize, field: &[f64], nv: usize, out: &mut [f64]) {
        let n1 = self.n1;
        let edge = if f == 0 || f == 3 { &self.edge_lo } else { &self.edge_hi };
        let along_xi = f == 0 || f == 2;
        let mut tmp = [0.0; MAX_VARS * (crate::basis::MAX_DEGREE + 1)];
        for a in 0..n1 {
            for (b, &w) in edge.iter().enumerate() {
                let i = if along_xi { a + n1 * b } else { b + n1 * a };
                for v in 0..nv {
                    tmp[a * nv + v] += w * field[i * nv + v];
                }
            }
        }
        let q = &self.interp_along[k];
        for m in 0..n1 {
            let s = if f < 2 { m } else { n1 - 1 - m };
            for v in 0..nv {
                out[m * nv + v] = (0..n1).map(|a| q[s * n1 + a] * tmp[a * nv + v]).sum();
            }
        }
    }

    /// `out += K_f h` for face values `h` in counterclockwise order.
    fn lift(&self, k: usize, f: usize, h: &[f64], nv: usize, out: &mut [f64]) {
        let n1 = self.n1;
        let l = &self.lift_along[k];
        let mut c = [0.0; MAX_VARS * (crate::basis::MAX_DEGREE + 1)];
        for a in 0..n1 {
            for s in 0..n1 {
                let m = if f < 2 { s } else { n1 - 1 - s };
                let w = l[a * n1 + s];
                for v in 0..nv {
                    c[a * nv + v] += w * h[m * nv + v];
                }
            }
        }
        for b in 0..n1 {
            for a in 0..n1 {
                let i = a + n1 * b;
                let (g, along) = match f {
                    0 => (-self.gl_d[b], a),
                    1 => (self.gr_d[a], b),
                    2 => (self.gr_d[b], a),
                    _ => (-self.gl_d[a], b),
                };
                for v in 0..nv {
                    out[i * nv + v] += g * c[along * nv + v];
                }
            }
        }
    }

    /// `d/dxi` and `d/deta` of a nodal field, one variable at a time.
    fn gradient(&self, field: &[f64], nv: usize, dxi: &mut [f64], deta: &mut [f64]) {
        let n1 = self.n1;
        for b in 0..n1 {
            for a in 0..n1 {
                let i = a + n1 * b;
                for v in 0..nv {
                    let mut sx = 0.0;
                    let mut sy = 0.0;
                    for c in 0..n1 {
                        sx += self.diff[a * n1 + c] * field[(c + n1 * b) * nv + v];
                        sy += self.diff[b * n1 + c] * field[(a + n1 * c) * nv + v];
                    }
                    dxi[i * nv + v] = sx;
                    deta[i * nv + v] = sy;
                }
            }
        }
    }
}

/// Gradient data for the viscous terms.
struct ViscousData {
    /// Physical gradient per `(e, i, v)`.
    grad: Vec<[f64; 2]>,
    /// Gradient interpolated to flux points per `(e, f, m, v)`.
    face_grad: Vec<[f64; 2]>,
}

/// Dense per-element derivatives of the residual (inviscid part).
#[derive(Debug, Clone)]
pub struct ElementJacobian {
    /// `dR_e / du_e`.
    pub self_block: DMatrix<f64>,
    /// Per local face: neighbour element and `dR_e / du_nb` (Riemann faces only).
    pub neighbours: [Option<(usize, DMatrix<f64>)>; 4],
    /// Per local face: `dR_e / d(uhat on that face)` (trace faces only).
    pub trace: [Option<DMatrix<f64>>; 4],
}

#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: Mesh,
    pub re: ReferenceElement,
    pub geom: GeometricFactors,
    pub law: ConservationLaw,
    pub scheme: Scheme,
    pub partition: Partition,
    pub face_class: Vec<FaceClass>,
    pub trace: TraceSpace,
    /// Exterior state per boundary face (`None` for non-boundary faces).
    face_bc: Vec<Option<Vec<f64>>>,
    ops: TensorOps,
}

impl Discretization {
    pub fn new(
        mesh: Mesh,
        degree: usize,
        scheme: Scheme,
        law: ConservationLaw,
        partition: Partition,
        boundary_states: &HashMap<String, Vec<f64>>,
    ) -> Result<Self, DiscretizationError> {
        if partition.implicit.len() != mesh.n_elements() {
            return Err(DiscretizationError::PartitionSize { got: partition.implicit.len(), expected: mesh.n_elements() });
        }
        let re = ReferenceElement::new(degree, scheme)?;
        let geom = compute_geometric_factors(&mesh, &re)?;
        let nv = law.n_vars();
        let mut face_bc = Vec::with_capacity(mesh.faces.len());
        let mut face_class = Vec::with_capacity(mesh.faces.len());
        for face in &mesh.faces {
            let class = match (&face.kind, face.plus) {
                (FaceKind::Boundary { tag }, _) => {
                    let state = boundary_states.get(tag).ok_or_else(|| DiscretizationError::MissingBoundaryState(tag.clone()))?;
                    if state.len() != nv {
                        return Err(DiscretizationError::BoundaryStateSize { tag: tag.clone(), got: state.len(), expected: nv });
                    }
                    face_bc.push(Some(state.clone()));
                    FaceClass::Boundary
                }
                (_, Some(plus)) => {
                    face_bc.push(None);
                    let (a, b) = (partition.implicit[face.minus.elem], partition.implicit[plus.elem]);
                    match (a, b) {
                        (true, true) if scheme != Scheme::Fr => FaceClass::Trace,
                        (true, false) | (false, true) => FaceClass::Interface,
                        _ => FaceClass::Standard,
                    }
                }
                (_, None) => unreachable!("non-boundary face without a plus side"),
            };
            face_class.push(class);
        }
        let trace = build_trace_space(&mesh, &face_class, scheme, re.n_face_points());
        let ops = TensorOps::new(&re);
        Ok(Discretization { mesh, re, geom, law, scheme, partition, face_class, trace, face_bc, ops })
    }

    pub fn n_vars(&self) -> usize {
        self.law.n_vars()
    }

    pub fn n_solution(&self) -> usize {
        self.re.n_solution()
    }

    pub fn n_face_points(&self) -> usize {
        self.re.n_face_points()
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    /// Entries per element block.
    pub fn block_len(&self) -> usize {
        self.n_solution() * self.n_vars()
    }

    pub fn state_len(&self) -> usize {
        self.n_elements() * self.block_len()
    }

    pub fn trace_len(&self) -> usize {
        self.trace.n_points * self.n_vars()
    }

    pub fn class_of(&self, e: usize, f: usize) -> FaceClass {
        self.face_class[self.mesh.element_faces[e][f]]
    }

    /// Flux-point family used by element `e` on its face `f`.
    pub fn side_kind(&self, e: usize, f: usize) -> NodeKind {
        if self.scheme == Scheme::Efr && self.class_of(e, f) == FaceClass::Trace {
            NodeKind::GaussLobattoLegendre
        } else {
            NodeKind::GaussLegendre
        }
    }

    /// The element and local face across face `f` of element `e`.
    pub fn neighbour(&self, e: usize, f: usize) -> Option<FaceSide> {
        self.mesh.faces[self.mesh.element_faces[e][f]].other(FaceSide { elem: e, local: f })
    }

    /// Sample `init(x, y)` at every solution point.
    pub fn project(&self, init: impl Fn([f64; 2]) -> Vec<f64>) -> Vec<f64> {
        let nv = self.n_vars();
        let mut u = Vec::with_capacity(self.state_len());
        for g in &self.geom.elements {
            for &x in &g.coords {
                let s = init(x);
                assert_eq!(s.len(), nv);
                u.extend_from_slice(&s);
            }
        }
        u
    }

    /// Per-variable integral over the elements in `elems` (all when `None`).
    pub fn integral(&self, u: &[f64], elems: Option<&[usize]>) -> Vec<f64> {
        let (ns, nv) = (self.n_solution(), self.n_vars());
        let all: Vec<usize>;
        let elems = match elems {
            Some(e) => e,
            None => {
                all = (0..self.n_elements()).collect();
                &all
            }
        };
        let mut total = vec![0.0; nv];
        for &e in elems {
            let g = &self.geom.elements[e];
            for i in 0..ns {
                let w = self.re.weights[i] * g.jac[i];
                for v in 0..nv {
                    total[v] += w * u[(e * ns + i) * nv + v];
                }
            }
        }
        total
    }

    fn face_slot(&self, e: usize, f: usize) -> usize {
        (e * 4 + f) * self.n_face_points() * self.n_vars()
    }

    /// Solution values at every flux point of every element face listed in `mask`.
    pub fn interpolate_to_faces(&self, u: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
        let (bl, nf, nv) = (self.block_len(), self.n_face_points(), self.n_vars());
        let mut traces = vec![0.0; self.n_elements() * 4 * nf * nv];
        traces.par_chunks_mut(4 * nf * nv).enumerate().for_each(|(e, out)| {
            if mask.map(|m| !m[e]).unwrap_or(false) {
                return;
            }
            let ue = &u[e * bl..(e + 1) * bl];
            for f in 0..4 {
                let k = kind_index(self.side_kind(e, f));
                self.ops.interp(k, f, ue, nv, &mut out[f * nf * nv..(f + 1) * nf * nv]);
            }
        });
        traces
    }

    /// Trace guess: mean of the interior values seen from every incident side.
    pub fn initial_trace(&self, u: &[f64]) -> Vec<f64> {
        let (nf, nv) = (self.n_face_points(), self.n_vars());
        let traces = self.interpolate_to_faces(u, None);
        let mut uhat = vec![0.0; self.trace_len()];
        let mut count = vec![0usize; self.trace.n_points];
        for e in 0..self.n_elements() {
            for f in 0..4 {
                let Some(ids) = &self.trace.element_faces[e][f] else { continue };
                let base = self.face_slot(e, f);
                for (m, &g) in ids.iter().enumerate() {
                    count[g] += 1;
                    for v in 0..nv {
                        uhat[g * nv + v] += traces[base + m * nv + v];
                    }
                }
            }
        }
        for g in 0..self.trace.n_points {
            for v in 0..nv {
                uhat[g * nv + v] /= count[g].max(1) as f64;
            }
        }
        let _ = nf;
        uhat
    }

    fn mask_with_neighbours(&self, elems: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.n_elements()];
        for &e in elems {
            mask[e] = true;
            for f in 0..4 {
                if let Some(o) = self.neighbour(e, f) {
                    mask[o.elem] = true;
                }
            }
        }
        mask
    }

    fn common_value(&self, e: usize, f: usize, m: usize, traces: &[f64], uhat: &[f64], v: usize) -> f64 {
        let (nf, nv) = (self.n_face_points(), self.n_vars());
        let own = traces[self.face_slot(e, f) + m * nv + v];
        match self.class_of(e, f) {
            FaceClass::Trace => {
                let g = self.trace.element_faces[e][f].as_ref().expect("trace map")[m];
                uhat[g * nv + v]
            }
            FaceClass::Boundary => self.face_bc[self.mesh.element_faces[e][f]].as_ref().expect("exterior state")[v],
            _ => {
                let o = self.neighbour(e, f).expect("neighbour");
                0.5 * (own + traces[self.face_slot(o.elem, o.local) + (nf - 1 - m) * nv + v])
            }
        }
    }

    /// Corrected physical gradients of every element (BR1).
    fn viscous_data(&self, u: &[f64], traces: &[f64], uhat: &[f64]) -> ViscousData {
        let (ns, nf, nv, bl) = (self.n_solution(), self.n_face_points(), self.n_vars(), self.block_len());
        let ne = self.n_elements();
        let mut grad = vec![[0.0; 2]; ne * ns * nv];
        grad.par_chunks_mut(ns * nv).enumerate().for_each(|(e, out)| {
            let ue = &u[e * bl..(e + 1) * bl];
            let mut gx = vec![0.0; bl];
            let mut gy = vec![0.0; bl];
            self.ops.gradient(ue, nv, &mut gx, &mut gy);
            let mut jump = vec![0.0; nf * nv];
            for f in 0..4 {
                let base = self.face_slot(e, f);
                for m in 0..nf {
                    for v in 0..nv {
                        jump[m * nv + v] = self.common_value(e, f, m, traces, uhat, v) - traces[base + m * nv + v];
                    }
                }
                let k = kind_index(self.side_kind(e, f));
                let nref = REFERENCE_NORMALS[f];
                if nref[0] != 0.0 {
                    if nref[0] < 0.0 {
                        jump.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.ops.lift(k, f, &jump, nv, &mut gx);
                } else {
                    if nref[1] < 0.0 {
                        jump.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.ops.lift(k, f, &jump, nv, &mut gy);
                }
            }
            let g = &self.geom.elements[e];
            for i in 0..ns {
                let ji = g.jinv[i];
                for v in 0..nv {
                    let (a, b) = (gx[i * nv + v], gy[i * nv + v]);
                    out[i * nv + v] = [ji[0][0] * a + ji[1][0] * b, ji[0][1] * a + ji[1][1] * b];
                }
            }
        });
        let mut face_grad = vec![[0.0; 2]; ne * 4 * nf * nv];
        face_grad.par_chunks_mut(4 * nf * nv).enumerate().for_each(|(e, out)| {
            let ge = &grad[e * ns * nv..(e + 1) * ns * nv];
            let mut comp = vec![0.0; ns * nv];
            let mut fv = vec![0.0; nf * nv];
            for d in 0..2 {
                for (c, g) in comp.iter_mut().zip(ge) {
                    *c = g[d];
                }
                for f in 0..4 {
                    let k = kind_index(self.side_kind(e, f));
                    self.ops.interp(k, f, &comp, nv, &mut fv);
                    for (slot, val) in out[f * nf * nv..(f + 1) * nf * nv].iter_mut().zip(&fv) {
                        slot[d] = *val;
                    }
                }
            }
        });
        ViscousData { grad, face_grad }
    }

    /// Corrected physical solution gradients at the solution points, `(e, i, v)`.
    pub fn br1_gradients(&self, u: &[f64], uhat: &[f64]) -> Vec<[f64; 2]> {
        let traces = self.interpolate_to_faces(u, None);
        self.viscous_data(u, &traces, uhat).grad
    }

    /// Corrected gradients interpolated to every flux point, `(e, f, m, v)`.
    pub fn face_gradients(&self, u: &[f64], traces: &[f64], uhat: &[f64]) -> Vec<[f64; 2]> {
        self.viscous_data(u, traces, uhat).face_grad
    }

    /// `du/dt` on the elements in `elems`; other blocks of the result are zero.
    pub fn residual(&self, u: &[f64], uhat: &[f64], elems: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_len()];
        self.residual_into(u, uhat, elems, &mut out);
        out
    }

    /// Like [`residual`](Self::residual) but writes only the blocks in `elems`.
    pub fn residual_into(&self, u: &[f64], uhat: &[f64], elems: &[usize], out: &mut [f64]) {
        let viscous = self.law.has_viscous();
        let traces = if viscous {
            self.interpolate_to_faces(u, None)
        } else {
            self.interpolate_to_faces(u, Some(&self.mask_with_neighbours(elems)))
        };
        let vd = viscous.then(|| self.viscous_data(u, &traces, uhat));
        let mut want = vec![false; self.n_elements()];
        for &e in elems {
            want[e] = true;
        }
        let bl = self.block_len();
        out.par_chunks_mut(bl).enumerate().for_each(|(e, oe)| {
            if want[e] {
                self.element_residual(e, &u[e * bl..(e + 1) * bl], &traces, uhat, vd.as_ref(), oe);
            }
        });
    }

    fn element_residual(&self, e: usize, ue: &[f64], traces: &[f64], uhat: &[f64], vd: Option<&ViscousData>, out: &mut [f64]) {
        let (ns, nf, nv) = (self.n_solution(), self.n_face_points(), self.n_vars());
        let g = &self.geom.elements[e];
        let mut fxi = vec![0.0; ns * nv];
        let mut feta = vec![0.0; ns * nv];
        for i in 0..ns {
            let mut flux = self.law.flux(&ue[i * nv..(i + 1) * nv]);
            if let Some(vd) = vd {
                let fv = self.law.viscous_flux(&vd.grad[(e * ns + i) * nv..(e * ns + i + 1) * nv]);
                for v in 0..nv {
                    flux[v][0] -= fv[v][0];
                    flux[v][1] -= fv[v][1];
                }
            }
            let m = g.metric[i];
            for v in 0..nv {
                fxi[i * nv + v] = m[0][0] * flux[v][0] + m[0][1] * flux[v][1];
                feta[i * nv + v] = m[1][0] * flux[v][0] + m[1][1] * flux[v][1];
            }
        }
        let mut div = vec![0.0; ns * nv];
        {
            let n1 = self.ops.n1;
            let d = &self.ops.diff;
            for b in 0..n1 {
                for a in 0..n1 {
                    let i = a + n1 * b;
                    for v in 0..nv {
                        let mut s = 0.0;
                        for c in 0..n1 {
                            s += d[a * n1 + c] * fxi[(c + n1 * b) * nv + v] + d[b * n1 + c] * feta[(a + n1 * c) * nv + v];
                        }
                        div[i * nv + v] = s;
                    }
                }
            }
        }
        let mut fn_int = vec![0.0; nf * nv];
        let mut h = vec![0.0; nf * nv];
        for f in 0..4 {
            let kind = self.side_kind(e, f);
            let k = kind_index(kind);
            let (src, sign) = match f {
                0 => (&feta, -1.0),
                1 => (&fxi, 1.0),
                2 => (&feta, 1.0),
                _ => (&fxi, -1.0),
            };
            self.ops.interp(k, f, src, nv, &mut fn_int);
            let fg = g.face(kind, f);
            let base = self.face_slot(e, f);
            let own = &traces[base..base + nf * nv];
            let class = self.class_of(e, f);
            let face_id = self.mesh.element_faces[e][f];
            for m in 0..nf {
                let n = fg.normal[m];
                let um = &own[m * nv..(m + 1) * nv];
                let mut common = match class {
                    FaceClass::Trace => {
                        let gi = self.trace.element_faces[e][f].as_ref().expect("trace map")[m];
                        self.law.hybrid_flux(&uhat[gi * nv..(gi + 1) * nv], um, n)
                    }
                    FaceClass::Boundary => self.law.rusanov_flux(um, self.face_bc[face_id].as_ref().expect("exterior state"), n),
                    _ => {
                        let o = self.neighbour(e, f).expect("neighbour");
                        let ob = self.face_slot(o.elem, o.local) + (nf - 1 - m) * nv;
                        self.law.rusanov_flux(um, &traces[ob..ob + nv], n)
                    }
                };
                if let Some(vd) = vd {
                    let nu = self.law.nu();
                    let gb = (e * 4 + f) * nf * nv + m * nv;
                    for v in 0..nv {
                        let go = vd.face_grad[gb + v];
                        let mut gn = go[0] * n[0] + go[1] * n[1];
                        if matches!(class, FaceClass::Standard | FaceClass::Interface) {
                            let o = self.neighbour(e, f).expect("neighbour");
                            let gp = vd.face_grad[(o.elem * 4 + o.local) * nf * nv + (nf - 1 - m) * nv + v];
                            gn = 0.5 * (gn + gp[0] * n[0] + gp[1] * n[1]);
                        }
                        common[v] -= nu * gn;
                    }
                }
                for v in 0..nv {
                    h[m * nv + v] = fg.jac[m] * common[v] - sign * fn_int[m * nv + v];
                }
            }
            self.ops.lift(k, f, &h, nv, &mut div);
        }
        for i in 0..ns {
            let s = -1.0 / g.jac[i];
            for v in 0..nv {
                out[i * nv + v] = s * div[i * nv + v];
            }
        }
    }

    /// Reference-space face flux jump `H~` of element `e` on its face `f`
    /// (inviscid), in counterclockwise flux-point order.
    pub fn face_jump(&self, e: usize, f: usize, u: &[f64], uhat: &[f64]) -> Vec<f64> {
        let (nf, nv, bl) = (self.n_face_points(), self.n_vars(), self.block_len());
        let traces = self.interpolate_to_faces(u, None);
        let ue = &u[e * bl..(e + 1) * bl];
        let kind = self.side_kind(e, f);
        let g = &self.geom.elements[e];
        let ns = self.n_solution();
        let mut comp = vec![0.0; ns * nv];
        for i in 0..ns {
            let flux = self.law.flux(&ue[i * nv..(i + 1) * nv]);
            let n = REFERENCE_NORMALS[f];
            let m = g.metric[i];
            for v in 0..nv {
                let fx = m[0][0] * flux[v][0] + m[0][1] * flux[v][1];
                let fy = m[1][0] * flux[v][0] + m[1][1] * flux[v][1];
                comp[i * nv + v] = n[0] * fx + n[1] * fy;
            }
        }
        let mut fn_int = vec![0.0; nf * nv];
        self.ops.interp(kind_index(kind), f, &comp, nv, &mut fn_int);
        let common = self.common_normal_flux(e, f, &traces, uhat);
        let fg = g.face(kind, f);
        (0..nf * nv).map(|k| fg.jac[k / nv] * common[k] - fn_int[k]).collect()
    }

    /// Inviscid common normal flux on face `f` of element `e`, `(m, v)`.
    pub fn common_normal_flux(&self, e: usize, f: usize, traces: &[f64], uhat: &[f64]) -> Vec<f64> {
        let (nf, nv) = (self.n_face_points(), self.n_vars());
        let fg = self.geom.elements[e].face(self.side_kind(e, f), f);
        let base = self.face_slot(e, f);
        let mut out = vec![0.0; nf * nv];
        for m in 0..nf {
            let um = &traces[base + m * nv..base + (m + 1) * nv];
            let n = fg.normal[m];
            let c = match self.class_of(e, f) {
                FaceClass::Trace => {
                    let gi = self.trace.element_faces[e][f].as_ref().expect("trace map")[m];
                    self.law.hybrid_flux(&uhat[gi * nv..(gi + 1) * nv], um, n)
                }
                FaceClass::Boundary => {
                    self.law.rusanov_flux(um, self.face_bc[self.mesh.element_faces[e][f]].as_ref().expect("exterior state"), n)
                }
                _ => {
                    let o = self.neighbour(e, f).expect("neighbour");
                    let ob = self.face_slot(o.elem, o.local) + (nf - 1 - m) * nv;
                    self.law.rusanov_flux(um, &traces[ob..ob + nv], n)
                }
            };
            out[m * nv..(m + 1) * nv].copy_from_slice(&c[..nv]);
        }
        out
    }

    /// Solution values of element `e` at the flux points of its face `f`.
    pub fn element_face_values(&self, e: usize, f: usize, ue: &[f64]) -> Vec<f64> {
        let (nf, nv) = (self.n_face_points(), self.n_vars());
        let mut out = vec![0.0; nf * nv];
        self.ops.interp(kind_index(self.side_kind(e, f)), f, ue, nv, &mut out);
        out
    }

    /// Inviscid residual derivatives of element `e`. Neighbour blocks are
    /// built only when `neighbours` is set.
    pub fn element_jacobian(&self, e: usize, u: &[f64], uhat: &[f64], neighbours: bool) -> ElementJacobian {
        let (ns, nf, nv, bl) = (self.n_solution(), self.n_face_points(), self.n_vars(), self.block_len());
        let g = &self.geom.elements[e];
        let ue = &u[e * bl..(e + 1) * bl];
        let a_xi: Vec<Mat> = (0..ns).map(|j| self.law.normal_flux_jacobian(&ue[j * nv..(j + 1) * nv], g.metric[j][0])).collect();
        let a_eta: Vec<Mat> = (0..ns).map(|j| self.law.normal_flux_jacobian(&ue[j * nv..(j + 1) * nv], g.metric[j][1])).collect();
        let mut s = DMatrix::<f64>::zeros(bl, bl);
        let dxi = &self.re.diff_xi;
        let deta = &self.re.diff_eta;
        for i in 0..ns {
            for j in 0..ns {
                let (cx, cy) = (dxi[(i, j)], deta[(i, j)]);
                if cx == 0.0 && cy == 0.0 {
                    continue;
                }
                for v in 0..nv {
                    for w in 0..nv {
                        s[(i * nv + v, j * nv + w)] += cx * a_xi[j][v][w] + cy * a_eta[j][v][w];
                    }
                }
            }
        }
        let mut nbr: [Option<(usize, DMatrix<f64>)>; 4] = Default::default();
        let mut trc: [Option<DMatrix<f64>>; 4] = Default::default();
        for f in 0..4 {
            let kind = self.side_kind(e, f);
            let ops = self.re.face(kind, f);
            let fg = g.face(kind, f);
            let class = self.class_of(e, f);
            let own = self.element_face_values(e, f, ue);
            let a_n: Vec<&Mat> = (0..ns).map(|j| if f % 2 == 0 { &a_eta[j] } else { &a_xi[j] }).collect();
            let sign = if f == 0 || f == 3 { -1.0 } else { 1.0 };
            // d(J F^)/d(own) and d(J F^)/d(other) at each flux point.
            let mut d_own = Vec::with_capacity(nf);
            let mut d_other = Vec::with_capacity(nf);
            let mut other_src: Option<(FaceSide, Vec<f64>)> = None;
            if matches!(class, FaceClass::Standard | FaceClass::Interface) {
                let o = self.neighbour(e, f).expect("neighbour");
                let uo = &u[o.elem * bl..(o.elem + 1) * bl];
                other_src = Some((o, self.element_face_values(o.elem, o.local, uo)));
            }
            for m in 0..nf {
                let um = &own[m * nv..(m + 1) * nv];
                let n = fg.normal[m];
                let (dl, dr) = match class {
                    FaceClass::Trace => {
                        let gi = self.trace.element_faces[e][f].as_ref().expect("trace map")[m];
                        let (_, d_uh, d_u) = self.law.hybrid_flux_jacobians(&uhat[gi * nv..(gi + 1) * nv], um, n);
                        (d_u, d_uh)
                    }
                    FaceClass::Boundary => {
                        let ub = self.face_bc[self.mesh.element_faces[e][f]].as_ref().expect("exterior state");
                        let (_, dl, dr) = self.law.rusanov_flux_jacobians(um, ub, n);
                        (dl, dr)
                    }
                    _ => {
                        let (_, vals) = other_src.as_ref().expect("neighbour values");
                        let ub = &vals[(nf - 1 - m) * nv..(nf - m) * nv];
                        let (_, dl, dr) = self.law.rusanov_flux_jacobians(um, ub, n);
                        (dl, dr)
                    }
                };
                d_own.push(dl);
                d_other.push(dr);
            }
            // P[(m, v), (j, w)] = E[m][j] (J_m dF_own - sign A_n,j).
            let mut p = DMatrix::<f64>::zeros(nf * nv, bl);
            for m in 0..nf {
                for j in 0..ns {
                    let ej = ops.interp[(m, j)];
                    if ej == 0.0 {
                        continue;
                    }
                    for v in 0..nv {
                        for w in 0..nv {
                            p[(m * nv + v, j * nv + w)] = ej * (fg.jac[m] * d_own[m][v][w] - sign * a_n[j][v][w]);
                        }
                    }
                }
            }
            let kbig = kron_identity(&ops.lift, nv);
            s.gemm(1.0, &kbig, &p, 1.0);
            match class {
                FaceClass::Trace => {
                    let mut t = DMatrix::<f64>::zeros(nf * nv, nf * nv);
                    for m in 0..nf {
                        for v in 0..nv {
                            for w in 0..nv {
                                t[(m * nv + v, m * nv + w)] = fg.jac[m] * d_other[m][v][w];
                            }
                        }
                    }
                    let mut blk = &kbig * t;
                    scale_rows_by_inverse_jac(&mut blk, &g.jac, nv);
                    trc[f] = Some(blk);
                }
                FaceClass::Standard | FaceClass::Interface if neighbours => {
                    let (o, _) = other_src.as_ref().expect("neighbour values");
                    let oops = self.re.face(self.side_kind(o.elem, o.local), o.local);
                    let mut q = DMatrix::<f64>::zeros(nf * nv, bl);
                    for m in 0..nf {
                        let mo = nf - 1 - m;
                        for j in 0..ns {
                            let ej = oops.interp[(mo, j)];
                            if ej == 0.0 {
                                continue;
                            }
                            for v in 0..nv {
                                for w in 0..nv {
                                    q[(m * nv + v, j * nv + w)] = ej * fg.jac[m] * d_other[m][v][w];
                                }
                            }
                        }
                    }
                    let mut blk = &kbig * q;
                    scale_rows_by_inverse_jac(&mut blk, &g.jac, nv);
                    nbr[f] = Some((o.elem, blk));
                }
                _ => {}
            }
        }
        scale_rows_by_inverse_jac(&mut s, &g.jac, nv);
        ElementJacobian { self_block: s, neighbours: nbr, trace: trc }
    }
}

/// `K (x) I_nv` with point-major ordering.
pub(crate) fn kron_identity(k: &DMatrix<f64>, nv: usize) -> DMatrix<f64> {
    if nv == 1 {
        return k.clone();
    }
    let mut out = DMatrix::zeros(k.nrows() * nv, k.ncols() * nv);
    for c in 0..k.ncols() {
        for r in 0..k.nrows() {
            for v in 0..nv {
                out[(r * nv + v, c * nv + v)] = k[(r, c)];
            }
        }
    }
    out
}

fn scale_rows_by_inverse_jac(m: &mut DMatrix<f64>, jac: &[f64], nv: usize) {
    for r in 0..m.nrows() {
        let s = -1.0 / jac[r / nv];
        m.row_mut(r).scale_mut(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_stretched_band, generate_uniform_periodic, tensor_grid};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn adv_disc(mesh: Mesh, p: usize, scheme: Scheme, partition: Partition) -> Discretization {
        let law = ConservationLaw::advection([1.0, 0.0]).unwrap();
        Discretization::new(mesh, p, scheme, law, partition, &HashMap::new()).unwrap()
    }

    #[test]
    fn tensor_ops_match_dense_operators() {
        for p in [1, 2, 4] {
            let re = ReferenceElement::new(p, Scheme::Efr).unwrap();
            let ops = TensorOps::new(&re);
            let ns = re.n_solution();
            let nv = 2;
            let field: Vec<f64> = (0..ns * nv).map(|k| ((k * 37 % 11) as f64 - 5.0) / 3.0).collect();
            for kind in [NodeKind::GaussLegendre, NodeKind::GaussLobattoLegendre] {
                for f in 0..4 {
                    let fo = re.face(kind, f);
                    let mut out = vec![0.0; (p + 1) * nv];
                    ops.interp(kind_index(kind), f, &field, nv, &mut out);
                    for m in 0..=p {
                        for v in 0..nv {
                            let dense: f64 = (0..ns).map(|j| fo.interp[(m, j)] * field[j * nv + v]).sum();
                            assert_abs_diff_eq!(out[m * nv + v], dense, epsilon = 1e-12);
                        }
                    }
                    let h: Vec<f64> = (0..(p + 1) * nv).map(|k| (k as f64).sin()).collect();
                    let mut lifted = vec![0.0; ns * nv];
                    ops.lift(kind_index(kind), f, &h, nv, &mut lifted);
                    for i in 0..ns {
                        for v in 0..nv {
                            let dense: f64 = (0..=p).map(|m| fo.lift[(i, m)] * h[m * nv + v]).sum();
                            assert_abs_diff_eq!(lifted[i * nv + v], dense, epsilon = 1e-11);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_state_is_steady() {
        let mesh = generate_stretched_band(6, 20.0, 5, 2.0).unwrap();
        let part = Partition::all_explicit(&mesh);
        let d = adv_disc(mesh, 4, Scheme::Fr, part);
        let u = vec![2.5; d.state_len()];
        let all: Vec<usize> = (0..d.n_elements()).collect();
        let r = d.residual(&u, &[], &all);
        assert!(r.iter().all(|x| x.abs() < 1e-11));
    }

    #[test]
    fn edac_freestream_curved_mesh() {
        let mesh = crate::mesh::generate_annulus(16, 4, 1.0, 4.0, 1.3).unwrap();
        let law = ConservationLaw::edac(100.0, 0.01).unwrap();
        let state = vec![0.3, 1.0, -0.5];
        let bcs: HashMap<String, Vec<f64>> = [("wall".to_string(), state.clone()), ("farfield".to_string(), state.clone())].into();
        let part = Partition::all_explicit(&mesh);
        let d = Discretization::new(mesh, 3, Scheme::Fr, law, part, &bcs).unwrap();
        let u = d.project(|_| state.clone());
        let all: Vec<usize> = (0..d.n_elements()).collect();
        let r = d.residual(&u, &[], &all);
        let worst = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(worst < 1e-11, "{worst}");
    }

    #[test]
    fn sine_derivative_and_conservation() {
        let l = 2.0;
        let mesh = generate_uniform_periodic(4, 2, l, l).unwrap();
        let d = adv_disc(mesh, 5, Scheme::Fr, Partition::from_flags(&generate_uniform_periodic(4, 2, l, l).unwrap(), vec![false; 8], 0.0));
        let k = 2.0 * PI / l;
        let u = d.project(|x| vec![(k * x[0]).sin()]);
        let all: Vec<usize> = (0..d.n_elements()).collect();
        let r = d.residual(&u, &[], &all);
        let coords: Vec<[f64; 2]> = d.geom.elements.iter().flat_map(|g| g.coords.clone()).collect();
        for (ri, x) in r.iter().zip(&coords) {
            assert!((ri + k * (k * x[0]).cos()).abs() < 1e-3, "{ri}");
        }
        assert!(d.integral(&r, None)[0].abs() < 1e-12);
    }

    #[test]
    fn local_conservation_matches_surface_flux() {
        let mesh = generate_stretched_band(4, 2.0, 3, 2.0).unwrap();
        let d = adv_disc(mesh, 3, Scheme::Fr, Partition::all_explicit(&generate_stretched_band(4, 2.0, 3, 2.0).unwrap()));
        let u = d.project(|x| vec![(x[0] * 2.0).sin() + x[1] * x[1]]);
        let all: Vec<usize> = (0..d.n_elements()).collect();
        let r = d.residual(&u, &[], &all);
        let traces = d.interpolate_to_faces(&u, None);
        for e in 0..d.n_elements() {
            let vol = d.integral(&r, Some(&[e]))[0];
            let mut surf = 0.0;
            for f in 0..4 {
                let c = d.common_normal_flux(e, f, &traces, &[]);
                let fg = d.geom.elements[e].face(NodeKind::GaussLegendre, f);
                let w = &d.re.gl_faces[f].basis_integrals;
                surf += (0..c.len()).map(|m| w[m] * fg.jac[m] * c[m]).sum::<f64>();
            }
            assert!((vol + surf).abs() < 1e-11, "{vol} {surf}");
        }
    }

    #[test]
    fn upwind_face_on_two_elements() {
        let mesh = tensor_grid(&[0.0, 1.0, 2.0], &[0.0, 1.0], true).unwrap();
        let part = Partition::all_explicit(&mesh);
        let d = adv_disc(mesh, 0, Scheme::Fr, part);
        // Element 0 holds 1, element 1 holds 0.
        let u = vec![1.0, 0.0];
        let traces = d.interpolate_to_faces(&u, None);
        assert_eq!(d.common_normal_flux(0, 1, &traces, &[])[0], 1.0);
        assert_eq!(d.common_normal_flux(1, 3, &traces, &[])[0], -1.0);
        // Jump on element 0's right face: J_f F^ - F~_xi = 0.5 * 1 - 0.5 * 1.
        assert_abs_diff_eq!(d.face_jump(0, 1, &u, &[])[0], 0.0, epsilon = 1e-15);
        // Finite volume limit: du/dt = -(F_out - F_in)/h.
        let all = [0, 1];
        let r = d.residual(&u, &[], &all);
        assert_abs_diff_eq!(r[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn br1_gradients() {
        let mesh = generate_uniform_periodic(3, 3, 1.0, 1.0).unwrap();
        let law = ConservationLaw::edac(100.0, 0.01).unwrap();
        let part = Partition::all_explicit(&mesh);
        let d = Discretization::new(mesh, 3, Scheme::Fr, law, part, &HashMap::new()).unwrap();
        let c = d.project(|_| vec![1.0, 2.0, 3.0]);
        let g = d.br1_gradients(&c, &[]);
        assert!(g.iter().all(|x| x[0].abs() < 1e-12 && x[1].abs() < 1e-12));

        // v_x = y: the centre element of a 3 x 3 box only sees interior faces,
        // where the averaged common value equals the continuous trace.
        let mesh = tensor_grid(&[0.0, 0.4, 1.0, 1.3], &[0.0, 0.3, 1.0, 1.8], false).unwrap();
        let law = ConservationLaw::edac(100.0, 0.01).unwrap();
        let bcs: HashMap<String, Vec<f64>> = ["bottom", "right", "top", "left"].iter().map(|n| (n.to_string(), vec![0.0; 3])).collect();
        let part = Partition::all_explicit(&mesh);
        let d = Discretization::new(mesh, 2, Scheme::Fr, law, part, &bcs).unwrap();
        let u = d.project(|x| vec![0.0, x[1], 0.0]);
        let g = d.br1_gradients(&u, &[]);
        let ns = d.n_solution();
        for i in 0..ns {
            let gi = g[(4 * ns + i) * 3 + 1];
            assert_abs_diff_eq!(gi[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(gi[1], 1.0, epsilon = 1e-12);
        }

        let mut errs = Vec::new();
        for n in [4usize, 8] {
            let mesh = generate_uniform_periodic(n, n, 1.0, 1.0).unwrap();
            let part = Partition::all_explicit(&mesh);
            let law = ConservationLaw::edac(100.0, 0.01).unwrap();
            let d = Discretization::new(mesh, 2, Scheme::Fr, law, part, &HashMap::new()).unwrap();
            let u = d.project(|x| vec![0.0, (2.0 * PI * x[1]).sin(), 0.0]);
            let g = d.br1_gradients(&u, &[]);
            let coords: Vec<[f64; 2]> = d.geom.elements.iter().flat_map(|g| g.coords.clone()).collect();
            let err =
                coords.iter().enumerate().map(|(i, x)| (g[i * 3 + 1][1] - 2.0 * PI * (2.0 * PI * x[1]).cos()).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 2.5, "{errs:?} {order}");
    }

    fn fd_jacobian_check(d: &Discretization, u: &[f64], uhat: &[f64]) {
        let bl = d.block_len();
        let all: Vec<usize> = (0..d.n_elements()).collect();
        let h = 1e-7;
        for e in 0..d.n_elements() {
            let jac = d.element_jacobian(e, u, uhat, true);
            for col in 0..bl {
                let mut up = u.to_vec();
                let mut um = u.to_vec();
                up[e * bl + col] += h;
                um[e * bl + col] -= h;
                let (rp, rm) = (d.residual(&up, uhat, &all), d.residual(&um, uhat, &all));
                for row in 0..bl {
                    let fd = (rp[e * bl + row] - rm[e * bl + row]) / (2.0 * h);
                    let an = jac.self_block[(row, col)];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "e {e} ({row},{col}) fd {fd} an {an}");
                }
            }
            for f in 0..4 {
                if let Some((o, _)) = &jac.neighbours[f] {
                    if *o == e {
                        continue;
                    }
                    for col in 0..bl {
                        let mut up = u.to_vec();
                        let mut um = u.to_vec();
                        up[o * bl + col] += h;
                        um[o * bl + col] -= h;
                        let (rp, rm) = (d.residual(&up, uhat, &all), d.residual(&um, uhat, &all));
                        // Sum contributions of every face shared with `o`.
                        let mut an = vec![0.0; bl];
                        for g in 0..4 {
                            if let Some((o2, b2)) = &jac.neighbours[g] {
                                if o2 == o {
                                    for row in 0..bl {
                                        an[row] += b2[(row, col)];
                                    }
                                }
                            }
                        }
                        for row in 0..bl {
                            let fd = (rp[e * bl + row] - rm[e * bl + row]) / (2.0 * h);
                            assert!((fd - an[row]).abs() <= 1e-6 * (1.0 + an[row].abs()), "nbr e {e} o {o} fd {fd} an {}", an[row]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn element_jacobian_matches_finite_differences_edac() {
        let mesh = tensor_grid(&[0.0, 0.6, 1.0, 1.5], &[0.0, 0.8, 1.0], true).unwrap();
        let law = ConservationLaw::edac(10.0, 0.0).unwrap();
        let part = Partition::all_explicit(&mesh);
        let d = Discretization::new(mesh, 2, Scheme::Fr, law, part, &HashMap::new()).unwrap();
        let u = d.project(|x| vec![0.3 * (3.0 * x[0]).sin(), 1.0 + 0.2 * x[1], 0.5 * (2.0 * x[0] + x[1]).cos()]);
        let u: Vec<f64> = u.iter().enumerate().map(|(k, v)| v + 0.05 * ((k * 7 % 5) as f64 - 2.0)).collect();
        fd_jacobian_check(&d, &u, &[]);
    }

    #[test]
    fn element_jacobian_matches_finite_differences_advection() {
        let mesh = generate_stretched_band(3, 1.0, 3, 2.0).unwrap();
        let law = ConservationLaw::advection([1.0, 0.7]).unwrap();
        let part = Partition::all_explicit(&mesh);
        let d = Discretization::new(mesh, 2, Scheme::Fr, law, part, &HashMap::new()).unwrap();
        let u = d.project(|x| vec![(3.0 * x[0]).sin() * x[1]]);
        fd_jacobian_check(&d, &u, &[]);
    }
}
