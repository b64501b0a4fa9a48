//! Reference-element construction on the square `[-1, 1]^2`.
//!
//! Solution points are the tensor product of 1D Gauss-Legendre nodes, indexed
//! `i = a + (p + 1) * b` with `a` running along `xi`. Faces are numbered
//! counterclockwise (bottom, right, top, left) and every face is traversed
//! counterclockwise, so flux point `m` of face `f` on a neighbouring element
//! sits at the mirrored index `p - m`.
//!
//! Correction functions are the left/right Radau polynomials (the choice that
//! makes FR reproduce nodal DG). Only their divergence at the solution points
//! is stored, as the lifting matrices `K_f`.

use nalgebra::DMatrix;
use thiserror::Error;

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("a Gauss-Legendre rule needs at least one point")]
    EmptyGaussRule,
    #[error("a Gauss-Lobatto rule needs at least two points, got {0}")]
    LobattoTooFewPoints(usize),
    #[error("polynomial degree {0} exceeds the supported maximum {MAX_DEGREE}")]
    DegreeTooHigh(usize),
    #[error("Vandermonde matrix is singular (duplicated nodes?)")]
    SingularVandermonde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    GaussLegendre,
    GaussLobattoLegendre,
}

/// Spatial scheme used inside an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Standard flux reconstruction.
    Fr,
    /// Hybridized FR with discontinuous traces.
    Hfr,
    /// Embedded (interior-continuous trace) hybridized FR.
    Efr,
}

impl Scheme {
    /// Point set carried by faces that own trace unknowns.
    pub fn trace_node_kind(self) -> NodeKind {
        match self {
            Scheme::Efr => NodeKind::GaussLobattoLegendre,
            Scheme::Fr | Scheme::Hfr => NodeKind::GaussLegendre,
        }
    }
}

/// A 1D quadrature/interpolation node set on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet1D {
    pub kind: NodeKind,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NodeSet1D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn for_kind(kind: NodeKind, n: usize) -> Result<Self, BasisError> {
        match kind {
            NodeKind::GaussLegendre => gauss_legendre(n),
            NodeKind::GaussLobattoLegendre => gauss_lobatto(n),
        }
    }
}

/// Legendre polynomial `P_n(x)` and its derivative via the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    let mut dp_prev = 0.0;
    let mut dp = 1.0;
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        let dp_next = dp_prev + (2.0 * kf + 1.0) * p;
        p_prev = p;
        p = p_next;
        dp_prev = dp;
        dp = dp_next;
    }
    (p, dp)
}

/// Orthonormal Legendre polynomial on `[-1, 1]`.
pub fn orthonormal_legendre(n: usize, x: f64) -> f64 {
    ((2.0 * n as f64 + 1.0) / 2.0).sqrt() * legendre(n, x).0
}

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

/// Gauss-Legendre nodes and weights, exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> Result<NodeSet1D, BasisError> {
    if n == 0 {
        return Err(BasisError::EmptyGaussRule);
    }
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..NEWTON_MAX_ITER {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        points[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    symmetrize(&mut points, &mut weights);
    Ok(NodeSet1D { kind: NodeKind::GaussLegendre, points, weights })
}

/// Gauss-Lobatto-Legendre nodes and weights (endpoints included).
pub fn gauss_lobatto(n: usize) -> Result<NodeSet1D, BasisError> {
    if n < 2 {
        return Err(BasisError::LobattoTooFewPoints(n));
    }
    let deg = n - 1;
    let degf = deg as f64;
    let mut points = vec![0.0; n];
    points[0] = -1.0;
    points[n - 1] = 1.0;
    for (i, point) in points.iter_mut().enumerate().take(n - 1).skip(1) {
        let mut x = -(std::f64::consts::PI * i as f64 / degf).cos();
        for _ in 0..NEWTON_MAX_ITER {
            let (p, dp) = legendre(deg, x);
            // (1 - x^2) P'' = 2 x P' - N (N + 1) P
            let d2p = (2.0 * x * dp - degf * (degf + 1.0) * p) / (1.0 - x * x);
            let dx = dp / d2p;
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                break;
            }
        }
        *point = x;
    }
    let mut weights: Vec<f64> = points
        .iter()
        .map(|&x| {
            let (p, _) = legendre(deg, x);
            2.0 / (degf * (degf + 1.0) * p * p)
        })
        .collect();
    symmetrize(&mut points, &mut weights);
    Ok(NodeSet1D { kind: NodeKind::GaussLobattoLegendre, points, weights })
}

// Roots come out symmetric only up to Newton round-off; enforce it exactly so
// that mirrored face orderings map points onto points bit-for-bit.
fn symmetrize(points: &mut [f64], weights: &mut [f64]) {
    let n = points.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (points[j] - points[i]);
        points[i] = -x;
        points[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        points[n / 2] = 0.0;
    }
}

/// Values of all Lagrange basis polynomials on `nodes` at `x`.
pub fn lagrange_basis(nodes: &[f64], x: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|j| nodes.iter().enumerate().filter(|&(k, _)| k != j).fold(1.0, |acc, (_, &xk)| acc * (x - xk) / (nodes[j] - xk)))
        .collect()
}

/// `D[i][j] = l_j'(x_i)` for the Lagrange basis on `nodes`.
pub fn lagrange_derivative_matrix(nodes: &[f64]) -> DMatrix<f64> {
    let n = nodes.len();
    let bary: Vec<f64> = (0..n).map(|j| 1.0 / (0..n).filter(|&k| k != j).fold(1.0, |acc, k| acc * (nodes[j] - nodes[k]))).collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (bary[j] / bary[i]) / (nodes[i] - nodes[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    d
}

/// Derivatives of the left and right Radau correction polynomials at `x`.
///
/// `g_L(-1) = 1, g_L(1) = 0` and `g_R(-1) = 0, g_R(1) = 1`.
pub fn radau_correction_derivatives(p: usize, x: f64) -> (f64, f64) {
    let (_, dp) = legendre(p, x);
    let (_, dp1) = legendre(p + 1, x);
    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
    (0.5 * sign * (dp - dp1), 0.5 * (dp + dp1))
}

/// Operators attached to one face of the reference element.
#[derive(Debug, Clone)]
pub struct FaceOps {
    pub nodes: NodeSet1D,
    /// Reference coordinates of the flux points, in counterclockwise order.
    pub points: Vec<[f64; 2]>,
    /// Reference outward unit normal.
    pub normal: [f64; 2],
    /// `E_f`: solution points to flux points (`n_rf x n_s`).
    pub interp: DMatrix<f64>,
    /// `K_f`: flux-point jumps to correction divergence at solution points (`n_s x n_rf`).
    pub lift: DMatrix<f64>,
    /// Exact face mass matrix of the face Lagrange basis on the reference face.
    pub mass: DMatrix<f64>,
    /// Integrals of the face basis functions (row sums of `mass`).
    pub basis_integrals: Vec<f64>,
}

/// Reference normals of faces 0..4 (bottom, right, top, left).
pub const REFERENCE_NORMALS: [[f64; 2]; 4] = [[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];

/// Reference coordinates of the point at face parameter `t` (counterclockwise).
pub fn face_point(face: usize, t: f64) -> [f64; 2] {
    match face {
        0 => [t, -1.0],
        1 => [1.0, t],
        2 => [-t, 1.0],
        3 => [-1.0, -t],
        _ => unreachable!("quadrilaterals have four faces"),
    }
}

/// Immutable per-degree operators of the tensor-product quadrilateral.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    pub degree: usize,
    pub scheme: Scheme,
    pub solution_nodes: NodeSet1D,
    /// Solution point coordinates `(xi, eta)`.
    pub points: Vec<[f64; 2]>,
    /// Tensor quadrature weights at the solution points.
    pub weights: Vec<f64>,
    pub diff_1d: DMatrix<f64>,
    pub diff_xi: DMatrix<f64>,
    pub diff_eta: DMatrix<f64>,
    pub gl_faces: [FaceOps; 4],
    /// GLL face operators, present for EFR.
    pub gll_faces: Option<[FaceOps; 4]>,
    /// `P`: GLL face values to GL face values (`(p+1) x (p+1)`).
    pub gll_to_gl: DMatrix<f64>,
    pub vandermonde: DMatrix<f64>,
    pub vandermonde_inv: DMatrix<f64>,
    /// Exponent sum of the leading term of each modal basis function.
    pub mode_degrees: Vec<usize>,
}

impl ReferenceElement {
    pub fn new(p: usize, scheme: Scheme) -> Result<Self, BasisError> {
        build_reference_element(p, scheme)
    }

    pub fn n1d(&self) -> usize {
        self.degree + 1
    }

    pub fn n_solution(&self) -> usize {
        self.points.len()
    }

    pub fn n_face_points(&self) -> usize {
        self.degree + 1
    }

    pub fn faces(&self, kind: NodeKind) -> &[FaceOps; 4] {
        match kind {
            NodeKind::GaussLegendre => &self.gl_faces,
            NodeKind::GaussLobattoLegendre => self.gll_faces.as_ref().expect("GLL face operators are only built for EFR"),
        }
    }

    pub fn face(&self, kind: NodeKind, f: usize) -> &FaceOps {
        &self.faces(kind)[f]
    }
}

/// Assemble every operator of the degree-`p` reference quadrilateral.
pub fn build_reference_element(p: usize, scheme: Scheme) -> Result<ReferenceElement, BasisError> {
    if p > MAX_DEGREE {
        return Err(BasisError::DegreeTooHigh(p));
    }
    let n1 = p + 1;
    let sol = gauss_legendre(n1)?;
    let mut points = Vec::with_capacity(n1 * n1);
    let mut weights = Vec::with_capacity(n1 * n1);
    for b in 0..n1 {
        for a in 0..n1 {
            points.push([sol.points[a], sol.points[b]]);
            weights.push(sol.weights[a] * sol.weights[b]);
        }
    }
    let diff_1d = lagrange_derivative_matrix(&sol.points);
    let eye = DMatrix::<f64>::identity(n1, n1);
    let diff_xi = eye.kronecker(&diff_1d);
    let diff_eta = diff_1d.kronecker(&eye);

    let gl_faces = face_ops(p, &sol, gauss_legendre(n1)?);
    let gll_faces = if scheme == Scheme::Efr {
        // p = 0 has a single face point; use the GL midpoint there.
        let nodes = if n1 >= 2 { gauss_lobatto(n1)? } else { gauss_legendre(n1)? };
        Some(face_ops(p, &sol, nodes))
    } else {
        None
    };
    let gll_to_gl = if n1 >= 2 {
        let gll = gauss_lobatto(n1)?;
        DMatrix::from_fn(n1, n1, |i, j| lagrange_basis(&gll.points, sol.points[i])[j])
    } else {
        DMatrix::identity(1, 1)
    };
    let vandermonde = vandermonde(p, &points)?;
    let vandermonde_inv = vandermonde.clone().try_inverse().ok_or(BasisError::SingularVandermonde)?;
    let mode_degrees = (0..n1 * n1).map(|m| m % n1 + m / n1).collect();

    Ok(ReferenceElement {
        degree: p,
        scheme,
        solution_nodes: sol,
        points,
        weights,
        diff_1d,
        diff_xi,
        diff_eta,
        gl_faces,
        gll_faces,
        gll_to_gl,
        vandermonde,
        vandermonde_inv,
        mode_degrees,
    })
}

fn face_ops(p: usize, sol: &NodeSet1D, nodes: NodeSet1D) -> [FaceOps; 4] {
    let lift = correction_divergence(p, &nodes);
    let n1 = p + 1;
    let quad = gauss_legendre(n1 + 1).expect("nonzero rule");
    let nf = nodes.len();
    let mut mass = DMatrix::zeros(nf, nf);
    for (q, &t) in quad.points.iter().enumerate() {
        let l = lagrange_basis(&nodes.points, t);
        for i in 0..nf {
            for j in 0..nf {
                mass[(i, j)] += quad.weights[q] * l[i] * l[j];
            }
        }
    }
    let basis_integrals: Vec<f64> = (0..nf).map(|i| mass.row(i).sum()).collect();
    let mut lift_iter = lift.into_iter();
    std::array::from_fn(|f| {
        let pts: Vec<[f64; 2]> = nodes.points.iter().map(|&t| face_point(f, t)).collect();
        let interp = DMatrix::from_fn(nf, n1 * n1, |m, i| {
            let (a, b) = (i % n1, i / n1);
            let lx = lagrange_basis(&sol.points, pts[m][0]);
            let ly = lagrange_basis(&sol.points, pts[m][1]);
            lx[a] * ly[b]
        });
        FaceOps {
            nodes: nodes.clone(),
            points: pts,
            normal: REFERENCE_NORMALS[f],
            interp,
            lift: lift_iter.next().expect("four faces"),
            mass: mass.clone(),
            basis_integrals: basis_integrals.clone(),
        }
    })
}

/// Lifting matrices `K_f` (one per face): divergence at the solution points of
/// the tensor-product Radau correction attached to each flux point of `face_nodes`.
pub fn correction_divergence(p: usize, face_nodes: &NodeSet1D) -> [DMatrix<f64>; 4] {
    let n1 = p + 1;
    let sol = gauss_legendre(n1).expect("nonzero rule");
    let nf = face_nodes.len();
    let radau: Vec<(f64, f64)> = sol.points.iter().map(|&x| radau_correction_derivatives(p, x)).collect();
    std::array::from_fn(|f| {
        DMatrix::from_fn(n1 * n1, nf, |i, m| {
            let (a, b) = (i % n1, i / n1);
            let (xi, eta) = (sol.points[a], sol.points[b]);
            let along = |t: f64| lagrange_basis(&face_nodes.points, t)[m];
            match f {
                0 => -radau[b].0 * along(xi),
                1 => radau[a].1 * along(eta),
                2 => radau[b].1 * along(-xi),
                3 => -radau[a].0 * along(-eta),
                _ => unreachable!(),
            }
        })
    })
}

/// Modal-to-nodal transform `V[i][(a,b)] = psi_a(xi_i) psi_b(eta_i)` with
/// orthonormal Legendre factors. Mode `(a, b)` has column `a + (p+1) b`.
pub fn vandermonde(p: usize, nodes: &[[f64; 2]]) -> Result<DMatrix<f64>, BasisError> {
    let n1 = p + 1;
    let v = DMatrix::from_fn(nodes.len(), n1 * n1, |i, m| {
        let (a, b) = (m % n1, m / n1);
        orthonormal_legendre(a, nodes[i][0]) * orthonormal_legendre(b, nodes[i][1])
    });
    if v.nrows() != v.ncols() || v.clone().lu().determinant().abs() < 1e-12 {
        return Err(BasisError::SingularVandermonde);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_small_rules() {
        let g1 = gauss_legendre(1).unwrap();
        assert_eq!(g1.points, vec![0.0]);
        assert_abs_diff_eq!(g1.weights[0], 2.0, epsilon = 1e-15);
        let g2 = gauss_legendre(2).unwrap();
        let r = 1.0 / 3f64.sqrt();
        assert_abs_diff_eq!(g2.points[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(g2.points[1], r, epsilon = 1e-15);
        assert_eq!(gauss_legendre(0), Err(BasisError::EmptyGaussRule));
    }

    #[test]
    fn gauss_lobatto_small_rules() {
        let g2 = gauss_lobatto(2).unwrap();
        assert_eq!(g2.points, vec![-1.0, 1.0]);
        let g3 = gauss_lobatto(3).unwrap();
        assert_eq!(g3.points, vec![-1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(g3.weights[1], 4.0 / 3.0, epsilon = 1e-14);
        assert_eq!(gauss_lobatto(1), Err(BasisError::LobattoTooFewPoints(1)));
    }

    #[test]
    fn weights_sum_to_interval_length() {
        for n in 1..=10 {
            let s: f64 = gauss_legendre(n).unwrap().weights.iter().sum();
            assert_abs_diff_eq!(s, 2.0, epsilon = 1e-13);
        }
        for n in 2..=10 {
            let s: f64 = gauss_lobatto(n).unwrap().weights.iter().sum();
            assert_abs_diff_eq!(s, 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn quadrature_exactness() {
        let exact = |k: usize| if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
        for n in 1..=10 {
            let g = gauss_legendre(n).unwrap();
            for k in [2 * n - 1, 2 * n - 2] {
                let q: f64 = g.points.iter().zip(&g.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert_abs_diff_eq!(q, exact(k), epsilon = 1e-12);
            }
        }
        for n in 2..=10 {
            let g = gauss_lobatto(n).unwrap();
            for k in [2 * n - 3, 2 * n - 4] {
                let q: f64 = g.points.iter().zip(&g.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert_abs_diff_eq!(q, exact(k), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn node_sets_are_ordered_and_positive() {
        for n in 2..=10 {
            for g in [gauss_legendre(n).unwrap(), gauss_lobatto(n).unwrap()] {
                assert!(g.points.windows(2).all(|w| w[0] < w[1]));
                assert!(g.weights.iter().all(|&w| w > 0.0));
            }
            let gl = gauss_legendre(n).unwrap();
            assert!(gl.points[0] > -1.0 && gl.points[n - 1] < 1.0);
        }
    }

    #[test]
    fn degree_zero_element() {
        let re = ReferenceElement::new(0, Scheme::Fr).unwrap();
        assert_eq!(re.n_solution(), 1);
        assert_eq!(re.n_face_points(), 1);
        assert_eq!(re.diff_xi[(0, 0)], 0.0);
        assert_eq!(re.diff_eta[(0, 0)], 0.0);
    }

    #[test]
    fn counting_at_degree_two() {
        let re = ReferenceElement::new(2, Scheme::Fr).unwrap();
        assert_eq!(re.n_solution(), 9);
        for f in 0..4 {
            assert_eq!(re.gl_faces[f].points.len(), 3);
            assert_eq!(re.gl_faces[f].interp.shape(), (3, 9));
            assert_eq!(re.gl_faces[f].lift.shape(), (9, 3));
        }
        assert!(re.gll_faces.is_none());
        assert!(ReferenceElement::new(10, Scheme::Fr).is_err());
    }

    #[test]
    fn differentiation_is_exact_for_degree_p() {
        let re = ReferenceElement::new(3, Scheme::Fr).unwrap();
        let u: Vec<f64> = re.points.iter().map(|x| x[0] * x[0] * x[1]).collect();
        let u = nalgebra::DVector::from_vec(u);
        let du = &re.diff_xi * &u;
        for (i, x) in re.points.iter().enumerate() {
            assert_abs_diff_eq!(du[i], 2.0 * x[0] * x[1], epsilon = 1e-12);
        }
        for d in [&re.diff_xi, &re.diff_eta] {
            for i in 0..d.nrows() {
                assert_abs_diff_eq!(d.row(i).sum(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn radau_derivative_matches_dg_lifting() {
        // For GL points the DG-recovering correction satisfies
        // g_L'(x_i) = -l_i(-1) / w_i and g_R'(x_i) = l_i(1) / w_i.
        for p in 0..=MAX_DEGREE {
            let g = gauss_legendre(p + 1).unwrap();
            let left = lagrange_basis(&g.points, -1.0);
            let right = lagrange_basis(&g.points, 1.0);
            for (i, &x) in g.points.iter().enumerate() {
                let (dl, dr) = radau_correction_derivatives(p, x);
                assert_abs_diff_eq!(dl, -left[i] / g.weights[i], epsilon = 1e-9);
                assert_abs_diff_eq!(dr, right[i] / g.weights[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn radau_p1_hand_values() {
        // g_R = (P1 + P2)/2 => g_R' = (1 + 3x)/2; g_L = -(P1 - P2)/2 => g_L' = (3x - 1)/2.
        let r = 1.0 / 3f64.sqrt();
        for x in [-r, r] {
            let (dl, dr) = radau_correction_derivatives(1, x);
            assert_abs_diff_eq!(dr, 0.5 * (1.0 + 3.0 * x), epsilon = 1e-15);
            assert_abs_diff_eq!(dl, 0.5 * (3.0 * x - 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn face_interpolation_reproduces_polynomials() {
        let re = ReferenceElement::new(4, Scheme::Efr).unwrap();
        let poly = |x: &[f64; 2]| 1.0 + x[0].powi(4) * x[1].powi(3) - 2.0 * x[0] * x[1].powi(4);
        let u = nalgebra::DVector::from_iterator(re.n_solution(), re.points.iter().map(poly));
        for kind in [NodeKind::GaussLegendre, NodeKind::GaussLobattoLegendre] {
            for face in re.faces(kind) {
                let uf = &face.interp * &u;
                for (m, x) in face.points.iter().enumerate() {
                    assert_abs_diff_eq!(uf[m], poly(x), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_jump_gives_zero_correction() {
        let re = ReferenceElement::new(3, Scheme::Fr).unwrap();
        let h = nalgebra::DVector::zeros(4);
        for face in &re.gl_faces {
            assert!((&face.lift * &h).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lifting_reproduces_surface_integrals() {
        // Discrete Kronecker property: sum_i w_i v(x_i) (K_f e_m)_i equals the
        // face integral of phi_m v for every v in Q_p.
        for p in 1..=5 {
            let re = ReferenceElement::new(p, Scheme::Efr).unwrap();
            let n1 = p + 1;
            for kind in [NodeKind::GaussLegendre, NodeKind::GaussLobattoLegendre] {
                for face in re.faces(kind) {
                    for m in 0..n1 {
                        for j in 0..re.n_solution() {
                            // v = l_j (nodal basis), so the volume sum collapses to w_j K[j, m].
                            let lhs = re.weights[j] * face.lift[(j, m)];
                            let quad = gauss_legendre(n1 + 1).unwrap();
                            let rhs: f64 = quad
                                .points
                                .iter()
                                .zip(&quad.weights)
                                .map(|(&t, &w)| {
                                    let x = face_point(REFERENCE_NORMALS.iter().position(|n| *n == face.normal).unwrap(), t);
                                    let (a, b) = (j % n1, j / n1);
                                    let lj = lagrange_basis(&re.solution_nodes.points, x[0])[a]
                                        * lagrange_basis(&re.solution_nodes.points, x[1])[b];
                                    w * lagrange_basis(&face.nodes.points, t)[m] * lj
                                })
                                .sum();
                            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unit_jump_divergence_theorem() {
        let re = ReferenceElement::new(5, Scheme::Fr).unwrap();
        let mut total = 0.0;
        let mut surface = 0.0;
        for face in &re.gl_faces {
            let h = nalgebra::DVector::from_element(face.points.len(), 1.0);
            let k = &face.lift * &h;
            total += k.iter().zip(&re.weights).map(|(k, w)| k * w).sum::<f64>();
            surface += 2.0;
        }
        assert_abs_diff_eq!(total, surface, epsilon = 1e-12);
    }

    #[test]
    fn efr_lifting_equals_gl_lifting_composed_with_interpolation() {
        for p in 1..=MAX_DEGREE {
            let re = ReferenceElement::new(p, Scheme::Efr).unwrap();
            let gll = re.gll_faces.as_ref().unwrap();
            for f in 0..4 {
                let composed = &re.gl_faces[f].lift * &re.gll_to_gl;
                assert!((composed - &gll[f].lift).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn face_mass_is_spd() {
        let re = ReferenceElement::new(4, Scheme::Efr).unwrap();
        for kind in [NodeKind::GaussLegendre, NodeKind::GaussLobattoLegendre] {
            let m = &re.face(kind, 0).mass;
            assert!((m - m.transpose()).abs().max() < 1e-15);
            assert!(m.clone().cholesky().is_some());
        }
    }

    #[test]
    fn vandermonde_properties() {
        let re = ReferenceElement::new(3, Scheme::Fr).unwrap();
        let prod = &re.vandermonde * &re.vandermonde_inv;
        assert!((prod - DMatrix::identity(16, 16)).abs().max() < 1e-12);
        let ones = nalgebra::DVector::from_element(16, 1.0);
        let modes = &re.vandermonde_inv * ones;
        assert_abs_diff_eq!(modes[0], 2.0, epsilon = 1e-12);
        assert!(modes.iter().skip(1).all(|m| m.abs() < 1e-12));
        // 1D p = 1: psi_1(x) = sqrt(3/2) x.
        let r = 1.0 / 3f64.sqrt();
        for x in [-r, r] {
            assert_abs_diff_eq!(orthonormal_legendre(1, x), 1.5f64.sqrt() * x, epsilon = 1e-15);
        }
        assert_eq!(vandermonde(1, &[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), Err(BasisError::SingularVandermonde));
    }
}
