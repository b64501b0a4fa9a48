//! Quadrilateral meshes: generators, the native text format, skeleton
//! connectivity and geometric factors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::basis::{NodeKind, ReferenceElement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("element {elem}: node index {node} out of range ({n_nodes} nodes)")]
    DanglingNode { elem: usize, node: usize, n_nodes: usize },
    #[error("face ({a}, {b}) is shared by {count} element faces")]
    NonConforming { a: usize, b: usize, count: usize },
    #[error("elements {e0} and {e1} traverse their shared face in the same direction")]
    Orientation { e0: usize, e1: usize },
    #[error("element {elem} face {face} lies on the boundary but carries no tag")]
    UntaggedBoundary { elem: usize, face: usize },
    #[error("tag {tag}: element {elem} face {face} is not a boundary face")]
    TagNotOnBoundary { tag: String, elem: usize, face: usize },
    #[error("unknown boundary tag {0}")]
    UnknownTag(String),
    #[error("periodic tags {a} and {b} cannot be matched: {msg}")]
    PeriodicMismatch { a: String, b: String, msg: String },
    #[error("nonpositive Jacobian {jac:e} in element {elem}")]
    NonPositiveJacobian { elem: usize, jac: f64 },
    #[error("invalid generator parameters: {0}")]
    InvalidParameters(String),
    #[error("unsupported mapping degree {0} (expected 1 or 2)")]
    MapDegree(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaceSide {
    pub elem: usize,
    pub local: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaceKind {
    Interior,
    /// Paired boundary faces; `shift` maps minus-side coordinates onto the plus side.
    Periodic {
        shift: [f64; 2],
    },
    Boundary {
        tag: String,
    },
}

/// One skeleton face. The plus side (if any) traverses the face in reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub minus: FaceSide,
    pub plus: Option<FaceSide>,
    pub kind: FaceKind,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.plus.is_none()
    }

    /// The side opposite to `elem`'s local face `local`.
    pub fn other(&self, side: FaceSide) -> Option<FaceSide> {
        match self.plus {
            Some(plus) if side == self.minus => Some(plus),
            Some(plus) if side == plus => Some(self.minus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTag {
    pub name: String,
    pub faces: Vec<FaceSide>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Mapping-node indices per element: 4 corners counterclockwise, then for
    /// biquadratic maps the 4 edge midpoints (bottom, right, top, left) and the centre.
    pub elements: Vec<Vec<usize>>,
    pub map_degree: usize,
    pub boundary_tags: Vec<BoundaryTag>,
    pub periodic_pairs: Vec<(String, String)>,
    pub faces: Vec<Face>,
    pub element_faces: Vec<[usize; 4]>,
    /// Canonical representative of each node under periodic identification.
    pub periodic_node_map: Vec<usize>,
}

const CORNERS: [[usize; 2]; 4] = [[0, 1], [1, 2], [2, 3], [3, 0]];

impl Mesh {
    pub fn new(
        nodes: Vec<[f64; 2]>,
        elements: Vec<Vec<usize>>,
        map_degree: usize,
        boundary_tags: Vec<BoundaryTag>,
        periodic_pairs: Vec<(String, String)>,
    ) -> Result<Self, MeshError> {
        let per_elem = match map_degree {
            1 => 4,
            2 => 9,
            d => return Err(MeshError::MapDegree(d)),
        };
        for (e, conn) in elements.iter().enumerate() {
            if conn.len() != per_elem {
                return Err(MeshError::InvalidParameters(format!("element {e} has {} nodes, expected {per_elem}", conn.len())));
            }
            if let Some(&node) = conn.iter().find(|&&n| n >= nodes.len()) {
                return Err(MeshError::DanglingNode { elem: e, node, n_nodes: nodes.len() });
            }
        }
        let mut mesh = Mesh {
            nodes,
            elements,
            map_degree,
            boundary_tags,
            periodic_pairs,
            faces: Vec::new(),
            element_faces: Vec::new(),
            periodic_node_map: Vec::new(),
        };
        mesh.build_skeleton()?;
        Ok(mesh)
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn face_corners(&self, side: FaceSide) -> [usize; 2] {
        let conn = &self.elements[side.elem];
        let [a, b] = CORNERS[side.local];
        [conn[a], conn[b]]
    }

    fn face_centroid(&self, side: FaceSide) -> [f64; 2] {
        let [a, b] = self.face_corners(side);
        let (pa, pb) = (self.nodes[a], self.nodes[b]);
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }

    fn face_nodes_along(&self, side: FaceSide) -> Vec<usize> {
        let conn = &self.elements[side.elem];
        let [a, b] = CORNERS[side.local];
        if self.map_degree == 2 {
            vec![conn[a], conn[4 + side.local], conn[b]]
        } else {
            vec![conn[a], conn[b]]
        }
    }

    fn build_skeleton(&mut self) -> Result<(), MeshError> {
        let mut by_key: HashMap<(usize, usize), Vec<FaceSide>> = HashMap::new();
        let mut order = Vec::new();
        for e in 0..self.elements.len() {
            for local in 0..4 {
                let side = FaceSide { elem: e, local };
                let [a, b] = self.face_corners(side);
                let key = (a.min(b), a.max(b));
                let entry = by_key.entry(key).or_default();
                if entry.is_empty() {
                    order.push(key);
                }
                entry.push(side);
            }
        }

        let mut faces = Vec::new();
        let mut boundary = HashMap::new();
        for key in order {
            let sides = &by_key[&key];
            match sides.len() {
                1 => {
                    boundary.insert(sides[0], ());
                }
                2 => {
                    let (s0, s1) = (sides[0], sides[1]);
                    if self.face_corners(s0)[0] != self.face_corners(s1)[1] {
                        return Err(MeshError::Orientation { e0: s0.elem, e1: s1.elem });
                    }
                    faces.push(Face { minus: s0, plus: Some(s1), kind: FaceKind::Interior });
                }
                count => return Err(MeshError::NonConforming { a: key.0, b: key.1, count }),
            }
        }

        let mut tag_of: HashMap<FaceSide, String> = HashMap::new();
        for tag in &self.boundary_tags {
            for &side in &tag.faces {
                if side.elem >= self.elements.len() || side.local >= 4 || !boundary.contains_key(&side) {
                    return Err(MeshError::TagNotOnBoundary { tag: tag.name.clone(), elem: side.elem, face: side.local });
                }
                tag_of.insert(side, tag.name.clone());
            }
        }

        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        let mut paired: HashMap<FaceSide, ()> = HashMap::new();
        for (name_a, name_b) in self.periodic_pairs.clone() {
            let tag_a = self.tag(&name_a)?.faces.clone();
            let tag_b = self.tag(&name_b)?.faces.clone();
            let mismatch = |msg: String| MeshError::PeriodicMismatch { a: name_a.clone(), b: name_b.clone(), msg };
            if tag_a.len() != tag_b.len() || tag_a.is_empty() {
                return Err(mismatch(format!("{} vs {} faces", tag_a.len(), tag_b.len())));
            }
            let mean = |faces: &[FaceSide]| {
                let mut c = [0.0, 0.0];
                for &s in faces {
                    let x = self.face_centroid(s);
                    c[0] += x[0];
                    c[1] += x[1];
                }
                [c[0] / faces.len() as f64, c[1] / faces.len() as f64]
            };
            let (ca, cb) = (mean(&tag_a), mean(&tag_b));
            let period = [cb[0] - ca[0], cb[1] - ca[1]];
            let scale = period[0].hypot(period[1]).max(1.0);
            for &sa in &tag_a {
                let xa = self.face_centroid(sa);
                let target = [xa[0] + period[0], xa[1] + period[1]];
                let sb = tag_b
                    .iter()
                    .copied()
                    .find(|&sb| {
                        let xb = self.face_centroid(sb);
                        (xb[0] - target[0]).hypot(xb[1] - target[1]) < 1e-8 * scale
                    })
                    .ok_or_else(|| mismatch(format!("no partner for element {} face {}", sa.elem, sa.local)))?;
                let len = |s: FaceSide| {
                    let [a, b] = self.face_corners(s);
                    let (pa, pb) = (self.nodes[a], self.nodes[b]);
                    (pb[0] - pa[0]).hypot(pb[1] - pa[1])
                };
                if (len(sa) - len(sb)).abs() > 1e-10 * scale {
                    return Err(mismatch("partner faces differ in length".into()));
                }
                let xb = self.face_centroid(sb);
                let shift = [xb[0] - xa[0], xb[1] - xa[1]];
                let na = self.face_nodes_along(sa);
                let nb = self.face_nodes_along(sb);
                for (i, &n) in na.iter().enumerate() {
                    union(&mut parent, n, nb[nb.len() - 1 - i]);
                }
                paired.insert(sa, ());
                paired.insert(sb, ());
                faces.push(Face { minus: sa, plus: Some(sb), kind: FaceKind::Periodic { shift } });
            }
        }

        let mut boundary_sides: Vec<FaceSide> = boundary.keys().copied().collect();
        boundary_sides.sort_by_key(|s| (s.elem, s.local));
        for side in boundary_sides {
            if paired.contains_key(&side) {
                continue;
            }
            let tag = tag_of.get(&side).ok_or(MeshError::UntaggedBoundary { elem: side.elem, face: side.local })?;
            faces.push(Face { minus: side, plus: None, kind: FaceKind::Boundary { tag: tag.clone() } });
        }

        let mut element_faces = vec![[usize::MAX; 4]; self.elements.len()];
        for (fi, face) in faces.iter().enumerate() {
            element_faces[face.minus.elem][face.minus.local] = fi;
            if let Some(plus) = face.plus {
                element_faces[plus.elem][plus.local] = fi;
            }
        }
        self.periodic_node_map = (0..self.nodes.len()).map(|n| find(&mut parent, n)).collect();
        self.faces = faces;
        self.element_faces = element_faces;
        Ok(())
    }

    pub fn tag(&self, name: &str) -> Result<&BoundaryTag, MeshError> {
        self.boundary_tags.iter().find(|t| t.name == name).ok_or_else(|| MeshError::UnknownTag(name.to_string()))
    }

    /// Uniformly scaled copy (periodic shifts scale with it).
    pub fn scaled(&self, factor: f64) -> Mesh {
        let mut m = self.clone();
        for x in &mut m.nodes {
            x[0] *= factor;
            x[1] *= factor;
        }
        for f in &mut m.faces {
            if let FaceKind::Periodic { shift } = &mut f.kind {
                shift[0] *= factor;
                shift[1] *= factor;
            }
        }
        m
    }

    /// Map reference coordinates of element `e` to physical space.
    pub fn map_point(&self, e: usize, xi: [f64; 2]) -> [f64; 2] {
        let (n, _) = shape_functions(self.map_degree, xi);
        let mut x = [0.0, 0.0];
        for (k, &node) in self.elements[e].iter().enumerate() {
            x[0] += n[k] * self.nodes[node][0];
            x[1] += n[k] * self.nodes[node][1];
        }
        x
    }

    /// Jacobian matrix `dx/dxi` of element `e`: rows x, y; columns xi, eta.
    pub fn map_jacobian(&self, e: usize, xi: [f64; 2]) -> [[f64; 2]; 2] {
        let (_, dn) = shape_functions(self.map_degree, xi);
        let mut jm = [[0.0; 2]; 2];
        for (k, &node) in self.elements[e].iter().enumerate() {
            let x = self.nodes[node];
            for r in 0..2 {
                for c in 0..2 {
                    jm[r][c] += dn[k][c] * x[r];
                }
            }
        }
        jm
    }
}

fn find(parent: &mut [usize], n: usize) -> usize {
    let mut r = n;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = n;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

fn quad_1d(t: f64) -> ([f64; 3], [f64; 3]) {
    ([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], [t - 0.5, -2.0 * t, t + 0.5])
}

/// Mapping shape functions and their reference gradients.
pub fn shape_functions(map_degree: usize, xi: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let [x, y] = xi;
    match map_degree {
        1 => {
            let sx = [-1.0, 1.0, 1.0, -1.0];
            let sy = [-1.0, -1.0, 1.0, 1.0];
            let n = (0..4).map(|k| 0.25 * (1.0 + sx[k] * x) * (1.0 + sy[k] * y)).collect();
            let dn = (0..4).map(|k| [0.25 * sx[k] * (1.0 + sy[k] * y), 0.25 * sy[k] * (1.0 + sx[k] * x)]).collect();
            (n, dn)
        }
        2 => {
            // (i, j) indices into the 1D quadratic basis on {-1, 0, 1}.
            const IDX: [(usize, usize); 9] = [(0, 0), (2, 0), (2, 2), (0, 2), (1, 0), (2, 1), (1, 2), (0, 1), (1, 1)];
            let (lx, dlx) = quad_1d(x);
            let (ly, dly) = quad_1d(y);
            let n = IDX.iter().map(|&(i, j)| lx[i] * ly[j]).collect();
            let dn = IDX.iter().map(|&(i, j)| [dlx[i] * ly[j], lx[i] * dly[j]]).collect();
            (n, dn)
        }
        d => panic!("unsupported mapping degree {d}"),
    }
}

fn rect_tags(nx: usize, ny: usize) -> Vec<BoundaryTag> {
    let idx = |i: usize, j: usize| i + nx * j;
    let mk = |name: &str, faces: Vec<FaceSide>| BoundaryTag { name: name.into(), faces };
    vec![
        mk("bottom", (0..nx).map(|i| FaceSide { elem: idx(i, 0), local: 0 }).collect()),
        mk("right", (0..ny).map(|j| FaceSide { elem: idx(nx - 1, j), local: 1 }).collect()),
        mk("top", (0..nx).map(|i| FaceSide { elem: idx(i, ny - 1), local: 2 }).collect()),
        mk("left", (0..ny).map(|j| FaceSide { elem: idx(0, j), local: 3 }).collect()),
    ]
}

/// Tensor grid of bilinear quads from sorted column and row coordinates.
pub fn tensor_grid(xs: &[f64], ys: &[f64], periodic: bool) -> Result<Mesh, MeshError> {
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    let mut nodes = Vec::with_capacity(xs.len() * ys.len());
    for &y in ys {
        for &x in xs {
            nodes.push([x, y]);
        }
    }
    let nid = |i: usize, j: usize| i + (nx + 1) * j;
    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            elements.push(vec![nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)]);
        }
    }
    let pairs =
        if periodic { vec![("left".to_string(), "right".to_string()), ("bottom".to_string(), "top".to_string())] } else { Vec::new() };
    Mesh::new(nodes, elements, 1, rect_tags(nx, ny), pairs)
}

/// `nx x ny` uniform quads on `[0, lx] x [0, ly]`, periodic in both directions.
pub fn generate_uniform_periodic(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Mesh, MeshError> {
    if nx == 0 || ny == 0 || lx <= 0.0 || ly <= 0.0 {
        return Err(MeshError::InvalidParameters(format!("nx={nx}, ny={ny}, lx={lx}, ly={ly}")));
    }
    let xs: Vec<f64> = (0..=nx).map(|i| lx * i as f64 / nx as f64).collect();
    let ys: Vec<f64> = (0..=ny).map(|j| ly * j as f64 / ny as f64).collect();
    tensor_grid(&xs, &ys, true)
}

/// Heights of the band layers: symmetric geometric progression with the
/// thinnest layer(s) at the centre, normalised to sum to `total`.
pub fn band_layer_heights(layers: usize, ratio: f64, total: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..layers)
        .map(|j| {
            let k = (2 * j as i64 - (layers as i64 - 1)).unsigned_abs() / 2;
            ratio.powi(k as i32)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|h| h * total / sum).collect()
}

/// Periodic `L x L` square of `n_base x n_base` uniform cells whose central
/// row(s) are replaced by a band of `band_layers` stretched layers.
///
/// Two rows are replaced for even `n_base` and one for odd, so the band is
/// always centred on `y = L / 2`.
pub fn generate_stretched_band(n_base: usize, length: f64, band_layers: usize, ratio: f64) -> Result<Mesh, MeshError> {
    if band_layers == 0 || ratio < 1.0 || length <= 0.0 || n_base == 0 {
        return Err(MeshError::InvalidParameters(format!("n_base={n_base}, band_layers={band_layers}, ratio={ratio}")));
    }
    let replaced = 2 - n_base % 2;
    if replaced >= n_base {
        return Err(MeshError::InvalidParameters(format!("band of {replaced} rows does not fit a {n_base}-row domain")));
    }
    let h = length / n_base as f64;
    let xs: Vec<f64> = (0..=n_base).map(|i| h * i as f64).collect();
    let below = (n_base - replaced) / 2;
    let mut ys: Vec<f64> = (0..=below).map(|j| h * j as f64).collect();
    let mut y = ys[below];
    for dh in band_layer_heights(band_layers, ratio, replaced as f64 * h) {
        y += dh;
        ys.push(y);
    }
    let last = ys.len() - 1;
    ys[last] = h * (below + replaced) as f64;
    for j in (below + replaced + 1)..=n_base {
        ys.push(h * j as f64);
    }
    tensor_grid(&xs, &ys, true)
}

/// Biquadratic O-mesh around a circle: `n_theta` cells around, `n_radial`
/// cells outwards with geometric growth. Inner ring tagged `wall`, outer `farfield`.
pub fn generate_annulus(n_theta: usize, n_radial: usize, r_in: f64, r_out: f64, growth: f64) -> Result<Mesh, MeshError> {
    if n_theta < 3 || n_radial == 0 || r_in <= 0.0 || r_out <= r_in || growth <= 0.0 {
        return Err(MeshError::InvalidParameters("annulus".into()));
    }
    // 2 n_radial + 1 radii: cell edges plus midpoints.
    let weights: Vec<f64> = (0..n_radial).map(|k| growth.powi(k as i32)).collect();
    let sum: f64 = weights.iter().sum();
    let mut edges = vec![r_in];
    for w in &weights {
        let last = *edges.last().unwrap();
        edges.push(last + (r_out - r_in) * w / sum);
    }
    let nt2 = 2 * n_theta;
    let nr2 = 2 * n_radial + 1;
    let mut nodes = Vec::with_capacity(nt2 * nr2);
    for jr in 0..nr2 {
        let r = if jr % 2 == 0 { edges[jr / 2] } else { 0.5 * (edges[jr / 2] + edges[jr / 2 + 1]) };
        for it in 0..nt2 {
            let th = std::f64::consts::PI * it as f64 / n_theta as f64;
            nodes.push([r * th.cos(), r * th.sin()]);
        }
    }
    let nid = |it: usize, jr: usize| (it % nt2) + nt2 * jr;
    let mut elements = Vec::new();
    for j in 0..n_radial {
        for i in 0..n_theta {
            let (t0, t1, t2) = (2 * i, 2 * i + 1, 2 * i + 2);
            let (r0, r1, r2) = (2 * j, 2 * j + 1, 2 * j + 2);
            // xi runs outwards, eta counterclockwise.
            elements.push(vec![
                nid(t0, r0),
                nid(t0, r2),
                nid(t2, r2),
                nid(t2, r0),
                nid(t0, r1),
                nid(t1, r2),
                nid(t2, r1),
                nid(t1, r0),
                nid(t1, r1),
            ]);
        }
    }
    let wall = (0..n_theta).map(|i| FaceSide { elem: i, local: 3 }).collect();
    let far = (0..n_theta).map(|i| FaceSide { elem: i + n_theta * (n_radial - 1), local: 1 }).collect();
    Mesh::new(
        nodes,
        elements,
        2,
        vec![BoundaryTag { name: "wall".into(), faces: wall }, BoundaryTag { name: "farfield".into(), faces: far }],
        Vec::new(),
    )
}

/// Serialize in the native `hyflux-mesh v1` format.
pub fn export_mesh(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "hyflux-mesh v1 {} {} {}", mesh.nodes.len(), mesh.elements.len(), mesh.map_degree);
    for x in &mesh.nodes {
        let _ = writeln!(s, "{:?} {:?}", x[0], x[1]);
    }
    for conn in &mesh.elements {
        let line: Vec<String> = conn.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    for tag in &mesh.boundary_tags {
        let _ = writeln!(s, "tag {}", tag.name);
        for side in &tag.faces {
            let _ = writeln!(s, "{} {}", side.elem, side.local);
        }
    }
    for (a, b) in &mesh.periodic_pairs {
        let _ = writeln!(s, "periodic {a} {b}");
    }
    s
}

/// Parse and validate the native mesh format.
pub fn parse_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim())).filter(|(_, l)| !l.is_empty());
    let perr = |line: usize, msg: &str| MeshError::Parse { line, msg: msg.to_string() };
    let (hl, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "hyflux-mesh" || h[1] != "v1" {
        return Err(perr(hl, "expected `hyflux-mesh v1 <n_nodes> <n_elems> <map_degree>`"));
    }
    let num = |line: usize, s: &str| s.parse::<usize>().map_err(|_| perr(line, &format!("bad integer `{s}`")));
    let (n_nodes, n_elems, map_degree) = (num(hl, h[2])?, num(hl, h[3])?, num(hl, h[4])?);
    let per_elem = match map_degree {
        1 => 4,
        2 => 9,
        _ => return Err(perr(hl, "map degree must be 1 or 2")),
    };
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (ln, l) = lines.next().ok_or_else(|| perr(hl, "file ends inside the node section"))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(ln, &format!("bad coordinate `{t}`"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 2 {
            return Err(perr(ln, "node lines hold exactly two coordinates"));
        }
        nodes.push([v[0], v[1]]);
    }
    let mut elements = Vec::with_capacity(n_elems);
    for e in 0..n_elems {
        let (ln, l) = lines.next().ok_or_else(|| perr(hl, "file ends inside the element section"))?;
        let conn: Vec<usize> = l.split_whitespace().map(|t| num(ln, t)).collect::<Result<_, _>>()?;
        if conn.len() != per_elem {
            return Err(perr(ln, &format!("element lines hold {per_elem} node indices")));
        }
        if let Some(&bad) = conn.iter().find(|&&n| n >= n_nodes) {
            return Err(perr(ln, &format!("element {e} references node {bad} of {n_nodes}")));
        }
        elements.push(conn);
    }
    let mut tags: Vec<BoundaryTag> = Vec::new();
    let mut pairs = Vec::new();
    for (ln, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.as_slice() {
            ["tag", name] => tags.push(BoundaryTag { name: name.to_string(), faces: Vec::new() }),
            ["periodic", a, b] => pairs.push((a.to_string(), b.to_string())),
            [e, f] => {
                let tag = tags.last_mut().ok_or_else(|| perr(ln, "face entry before any `tag` line"))?;
                let (elem, local) = (num(ln, e)?, num(ln, f)?);
                if elem >= n_elems || local >= 4 {
                    return Err(perr(ln, &format!("face ({elem}, {local}) out of range")));
                }
                tag.faces.push(FaceSide { elem, local });
            }
            _ => return Err(perr(ln, &format!("unrecognised line `{l}`"))),
        }
    }
    Mesh::new(nodes, elements, map_degree, tags, pairs)
}

pub fn import_mesh(path: &Path) -> Result<Mesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|e| MeshError::Io(format!("{}: {e}", path.display())))?;
    parse_mesh(&text)
}

/// Geometry of one face of one element at its flux points.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    /// Face Jacobian `J_f` (physical length per unit reference length).
    pub jac: Vec<f64>,
    /// Physical outward unit normal.
    pub normal: Vec<[f64; 2]>,
    pub coords: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub jac: Vec<f64>,
    /// Rows `J grad(xi)` and `J grad(eta)`: the transformed flux is `F~_r = metric[r] . F`.
    pub metric: Vec<[[f64; 2]; 2]>,
    /// `d(xi, eta)/d(x, y)`, rows xi and eta.
    pub jinv: Vec<[[f64; 2]; 2]>,
    pub coords: Vec<[f64; 2]>,
    pub gl_faces: [FaceGeometry; 4],
    pub gll_faces: Option<[FaceGeometry; 4]>,
}

impl ElementGeometry {
    pub fn face(&self, kind: NodeKind, f: usize) -> &FaceGeometry {
        match kind {
            NodeKind::GaussLegendre => &self.gl_faces[f],
            NodeKind::GaussLobattoLegendre => &self.gll_faces.as_ref().expect("GLL face geometry")[f],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeometricFactors {
    pub elements: Vec<ElementGeometry>,
}

fn face_geometry(mesh: &Mesh, e: usize, f: usize, points: &[[f64; 2]]) -> FaceGeometry {
    let mut jac = Vec::with_capacity(points.len());
    let mut normal = Vec::with_capacity(points.len());
    let mut coords = Vec::with_capacity(points.len());
    for &xi in points {
        let jm = mesh.map_jacobian(e, xi);
        // Tangent along the counterclockwise face parameter.
        let t = match f {
            0 => [jm[0][0], jm[1][0]],
            1 => [jm[0][1], jm[1][1]],
            2 => [-jm[0][0], -jm[1][0]],
            3 => [-jm[0][1], -jm[1][1]],
            _ => unreachable!(),
        };
        let len = t[0].hypot(t[1]);
        jac.push(len);
        normal.push([t[1] / len, -t[0] / len]);
        coords.push(mesh.map_point(e, xi));
    }
    FaceGeometry { jac, normal, coords }
}

/// Jacobians, metric terms, face Jacobians and normals at every solution and flux point.
pub fn compute_geometric_factors(mesh: &Mesh, re: &ReferenceElement) -> Result<GeometricFactors, MeshError> {
    let mut elements = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let n = re.n_solution();
        let mut jac = Vec::with_capacity(n);
        let mut metric = Vec::with_capacity(n);
        let mut jinv = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        for &xi in &re.points {
            let jm = mesh.map_jacobian(e, xi);
            let det = jm[0][0] * jm[1][1] - jm[0][1] * jm[1][0];
            if det <= 0.0 || !det.is_finite() {
                return Err(MeshError::NonPositiveJacobian { elem: e, jac: det });
            }
            let (x_xi, x_eta, y_xi, y_eta) = (jm[0][0], jm[0][1], jm[1][0], jm[1][1]);
            let m = [[y_eta, -x_eta], [-y_xi, x_xi]];
            jac.push(det);
            metric.push(m);
            jinv.push([[m[0][0] / det, m[0][1] / det], [m[1][0] / det, m[1][1] / det]]);
            coords.push(mesh.map_point(e, xi));
        }
        let gl_faces = std::array::from_fn(|f| face_geometry(mesh, e, f, &re.gl_faces[f].points));
        let gll_faces = re.gll_faces.as_ref().map(|faces| std::array::from_fn(|f| face_geometry(mesh, e, f, &faces[f].points)));
        for fg in gl_faces.iter().chain(gll_faces.iter().flatten()) {
            if let Some(&bad) = fg.jac.iter().find(|&&j| j <= 0.0) {
                return Err(MeshError::NonPositiveJacobian { elem: e, jac: bad });
            }
        }
        elements.push(ElementGeometry { jac, metric, jinv, coords, gl_faces, gll_faces });
    }
    Ok(GeometricFactors { elements })
}

impl GeometricFactors {
    /// `sum_k sum_i w_i J_{k,i}`.
    pub fn total_area(&self, re: &ReferenceElement) -> f64 {
        self.elements.iter().map(|g| g.jac.iter().zip(&re.weights).map(|(j, w)| j * w).sum::<f64>()).sum()
    }
}
