//! Finite element spaces on structured quadrilateral meshes, boundary-condition
//! regimes and the reduced (constraint-eliminated) coordinates built from them.
//!
//! Two scalar elements are available. `Bilinear` carries one value per node.
//! `Hermite` is the bicubic Hermite element with nodal dofs
//! `(u, d1 u, d2 u, d12 u)` in physical coordinates; on each quadrilateral the
//! parametric dofs are obtained through the bilinear geometry map, which makes
//! the element C1 on meshes of parallelograms aligned with the axes and H1 on
//! general quadrilaterals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{PlateError, Result};
use crate::jet::ScalarFunction;
use crate::mesh::{tag_directional, EdgeSelector, Mesh};
use crate::quadrature::SquareRule;

/// Gauss points per direction used for every element integral.
pub const QUAD_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Bilinear,
    Hermite,
}

impl ElementKind {
    pub fn dofs_per_node(self) -> usize {
        match self {
            ElementKind::Bilinear => 1,
            ElementKind::Hermite => 4,
        }
    }

    pub fn dofs_per_element(self) -> usize {
        4 * self.dofs_per_node()
    }
}

/// Value, gradient and Hessian `(11, 12, 22)` of a field at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointValue {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [f64; 3],
}

/// Basis functions of one element evaluated at one point.
#[derive(Debug, Clone)]
pub struct BasisEval {
    pub x: [f64; 2],
    pub det_j: f64,
    pub phi: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    pub hess: Vec<[f64; 3]>,
}

/// Quadrature data of one element: weights already include the Jacobian.
#[derive(Debug, Clone)]
pub struct ElementCache {
    pub dofs: Vec<usize>,
    pub weights: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub phi: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    pub hess: Vec<[f64; 3]>,
}

impl ElementCache {
    pub fn num_points(&self) -> usize {
        self.weights.len()
    }

    /// Field value and derivatives at quadrature point `q` from element coefficients.
    pub fn eval(&self, q: usize, local: &[f64]) -> PointValue {
        let nb = self.dofs.len();
        let mut p = PointValue::default();
        for (l, &c) in local.iter().enumerate() {
            let k = q * nb + l;
            p.v += c * self.phi[k];
            p.g[0] += c * self.grad[k][0];
            p.g[1] += c * self.grad[k][1];
            p.h[0] += c * self.hess[k][0];
            p.h[1] += c * self.hess[k][1];
            p.h[2] += c * self.hess[k][2];
        }
        p
    }

    pub fn gather(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        self.dofs.iter().map(|&d| coeffs[d]).collect()
    }
}

/// A scalar finite element space with precomputed quadrature caches.
#[derive(Debug)]
pub struct ScalarSpace {
    pub kind: ElementKind,
    pub mesh: Arc<Mesh>,
    pub ndof: usize,
    pub elements: Vec<ElementCache>,
}

const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

/// Cubic Hermite shape functions on [0, 1]: value or slope at end `c`.
fn hermite_1d(derivative: bool, c: f64, t: f64) -> [f64; 3] {
    match (derivative, c == 0.0) {
        (false, true) => [1.0 - 3.0 * t * t + 2.0 * t * t * t, -6.0 * t + 6.0 * t * t, -6.0 + 12.0 * t],
        (false, false) => [3.0 * t * t - 2.0 * t * t * t, 6.0 * t - 6.0 * t * t, 6.0 - 12.0 * t],
        (true, true) => [t - 2.0 * t * t + t * t * t, 1.0 - 4.0 * t + 3.0 * t * t, -4.0 + 6.0 * t],
        (true, false) => [-t * t + t * t * t, -2.0 * t + 3.0 * t * t, -2.0 + 6.0 * t],
    }
}

fn linear_1d(c: f64, t: f64) -> [f64; 3] {
    if c == 0.0 {
        [1.0 - t, -1.0, 0.0]
    } else {
        [t, 1.0, 0.0]
    }
}

/// Position, Jacobian columns `x_xi`, `x_eta` and the mixed derivative of the bilinear map.
fn geometry(x: &[[f64; 2]; 4], xi: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2], [f64; 2]) {
    let (s, t) = (xi[0], xi[1]);
    let n = [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t];
    let mut pos = [0.0; 2];
    let mut xs = [0.0; 2];
    let mut xt = [0.0; 2];
    let mut xst = [0.0; 2];
    for m in 0..2 {
        pos[m] = (0..4).map(|a| n[a] * x[a][m]).sum();
        xs[m] = (1.0 - t) * (x[1][m] - x[0][m]) + t * (x[2][m] - x[3][m]);
        xt[m] = (1.0 - s) * (x[3][m] - x[0][m]) + s * (x[2][m] - x[1][m]);
        xst[m] = x[0][m] - x[1][m] + x[2][m] - x[3][m];
    }
    (pos, [xs, xt], xst)
}

impl ScalarSpace {
    pub fn new(mesh: Arc<Mesh>, kind: ElementKind) -> Self {
        let rule = SquareRule::new(QUAD_POINTS);
        let dpn = kind.dofs_per_node();
        let elements = (0..mesh.elements.len())
            .map(|e| {
                let dofs = mesh.elements[e]
                    .iter()
                    .flat_map(|&n| (0..dpn).map(move |k| n * dpn + k))
                    .collect();
                let mut c = ElementCache {
                    dofs,
                    weights: vec![],
                    points: vec![],
                    phi: vec![],
                    grad: vec![],
                    hess: vec![],
                };
                for (xi, w) in rule.points.iter().zip(&rule.weights) {
                    let b = eval_basis_on(&mesh, kind, e, *xi);
                    c.weights.push(w * b.det_j);
                    c.points.push(b.x);
                    c.phi.extend(b.phi);
                    c.grad.extend(b.grad);
                    c.hess.extend(b.hess);
                }
                c
            })
            .collect();
        ScalarSpace { kind, ndof: mesh.num_nodes() * dpn, mesh, elements }
    }

    pub fn dofs_per_node(&self) -> usize {
        self.kind.dofs_per_node()
    }

    /// Basis functions of element `e` at reference point `xi` in `[0,1]^2`.
    pub fn eval_basis(&self, e: usize, xi: [f64; 2]) -> BasisEval {
        eval_basis_on(&self.mesh, self.kind, e, xi)
    }

    /// Field value and derivatives at reference point `xi` of element `e`.
    pub fn eval_point(&self, coeffs: &DVector<f64>, e: usize, xi: [f64; 2]) -> PointValue {
        let b = self.eval_basis(e, xi);
        let mut p = PointValue::default();
        for (l, &d) in self.elements[e].dofs.iter().enumerate() {
            let c = coeffs[d];
            p.v += c * b.phi[l];
            for m in 0..2 {
                p.g[m] += c * b.grad[l][m];
            }
            for m in 0..3 {
                p.h[m] += c * b.hess[l][m];
            }
        }
        p
    }

    /// Nodal interpolant. The Hermite element takes value, gradient and mixed derivative.
    pub fn interpolate(&self, f: &dyn ScalarFunction) -> DVector<f64> {
        let dpn = self.dofs_per_node();
        let mut out = DVector::zeros(self.ndof);
        for (n, &y) in self.mesh.nodes.iter().enumerate() {
            let j = f.jet(y);
            out[n * dpn] = j.v;
            if dpn == 4 {
                out[n * dpn + 1] = j.g[0];
                out[n * dpn + 2] = j.g[1];
                out[n * dpn + 3] = j.h[1];
            }
        }
        out
    }

    /// Nodal value dof of node `n`.
    pub fn value_dof(&self, n: usize) -> usize {
        n * self.dofs_per_node()
    }

    /// Integral of `f(value)` over the domain by element quadrature.
    pub fn integrate(&self, coeffs: &DVector<f64>, f: impl Fn([f64; 2], &PointValue) -> f64) -> f64 {
        self.elements
            .iter()
            .map(|c| {
                let local = c.gather(coeffs);
                (0..c.num_points())
                    .map(|q| c.weights[q] * f(c.points[q], &c.eval(q, &local)))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn eval_basis_on(mesh: &Mesh, kind: ElementKind, e: usize, xi: [f64; 2]) -> BasisEval {
    let el = mesh.elements[e];
    let x = [mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]], mesh.nodes[el[3]]];
    let (pos, jac, xst) = geometry(&x, xi);
    let [xs, xt] = jac;
    let det = xs[0] * xt[1] - xs[1] * xt[0];
    // J = [[xs0, xt0], [xs1, xt1]], inverse rows give d(xi)/dx.
    let inv = [[xt[1] / det, -xt[0] / det], [-xs[1] / det, xs[0] / det]];
    let nb = kind.dofs_per_element();
    let mut pphi = vec![0.0; nb];
    let mut pgrad = vec![[0.0; 2]; nb];
    let mut phess = vec![[0.0; 3]; nb];
    for (a, c) in CORNERS.iter().enumerate() {
        match kind {
            ElementKind::Bilinear => {
                let (u, v) = (linear_1d(c[0], xi[0]), linear_1d(c[1], xi[1]));
                pphi[a] = u[0] * v[0];
                pgrad[a] = [u[1] * v[0], u[0] * v[1]];
                phess[a] = [0.0, u[1] * v[1], 0.0];
            }
            ElementKind::Hermite => {
                let (_, ja, _) = geometry(&x, *c);
                let [as_, at] = ja;
                // Parametric dofs (u, u_xi, u_eta, u_xi_eta) in terms of physical ones.
                let m = [
                    [1.0, 0.0, 0.0, 0.0],
                    [0.0, as_[0], as_[1], 0.0],
                    [0.0, at[0], at[1], 0.0],
                    [0.0, xst[0], xst[1], as_[0] * at[1] + as_[1] * at[0]],
                ];
                for (j, (dx, dy)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
                    let u = hermite_1d(dx, c[0], xi[0]);
                    let v = hermite_1d(dy, c[1], xi[1]);
                    let psi = u[0] * v[0];
                    let g = [u[1] * v[0], u[0] * v[1]];
                    let h = [u[2] * v[0], u[1] * v[1], u[0] * v[2]];
                    for k in 0..4 {
                        let w = m[j][k];
                        if w == 0.0 {
                            continue;
                        }
                        let l = 4 * a + k;
                        pphi[l] += w * psi;
                        pgrad[l][0] += w * g[0];
                        pgrad[l][1] += w * g[1];
                        for r in 0..3 {
                            phess[l][r] += w * h[r];
                        }
                    }
                }
            }
        }
    }
    let mut grad = vec![[0.0; 2]; nb];
    let mut hess = vec![[0.0; 3]; nb];
    for l in 0..nb {
        let gp = pgrad[l];
        let gx = [
            inv[0][0] * gp[0] + inv[1][0] * gp[1],
            inv[0][1] * gp[0] + inv[1][1] * gp[1],
        ];
        grad[l] = gx;
        // H_xi - sum_m (d_m phi) X_m, where X_m only has the mixed entry.
        let mixed = phess[l][1] - gx[0] * xst[0] - gx[1] * xst[1];
        let hp = [[phess[l][0], mixed], [mixed, phess[l][2]]];
        // H_x = J^{-T} hp J^{-1}; J^{-1} = inv.
        let mut hx = [[0.0; 2]; 2];
        for (i, row) in hx.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        s += inv[p][i] * hp[p][q] * inv[q][j];
                    }
                }
                *out = s;
            }
        }
        hess[l] = [hx[0][0], hx[0][1], hx[1][1]];
    }
    BasisEval { x: pos, det_j: det, phi: pphi, grad, hess }
}

/// The tangential and transverse spaces on one mesh.
#[derive(Debug, Clone)]
pub struct FieldSpace {
    pub mesh: Arc<Mesh>,
    pub tangential: Arc<ScalarSpace>,
    pub transverse: Arc<ScalarSpace>,
}

impl FieldSpace {
    /// Hermite elements for all three components.
    pub fn new(mesh: Arc<Mesh>) -> Self {
        Self::with_tangential(mesh, ElementKind::Hermite)
    }

    pub fn with_tangential(mesh: Arc<Mesh>, kind: ElementKind) -> Self {
        let transverse = Arc::new(ScalarSpace::new(mesh.clone(), ElementKind::Hermite));
        let tangential = match kind {
            ElementKind::Hermite => transverse.clone(),
            ElementKind::Bilinear => Arc::new(ScalarSpace::new(mesh.clone(), kind)),
        };
        FieldSpace { mesh, tangential, transverse }
    }

    /// Space of component `c` (0, 1 tangential; 2 transverse).
    pub fn component(&self, c: usize) -> &ScalarSpace {
        if c < 2 {
            &self.tangential
        } else {
            &self.transverse
        }
    }

    pub fn zero_field(&self) -> DisplacementField {
        DisplacementField {
            u: [
                DVector::zeros(self.tangential.ndof),
                DVector::zeros(self.tangential.ndof),
                DVector::zeros(self.transverse.ndof),
            ],
        }
    }

    pub fn interpolate(
        &self,
        u1: &dyn ScalarFunction,
        u2: &dyn ScalarFunction,
        u3: &dyn ScalarFunction,
    ) -> DisplacementField {
        DisplacementField {
            u: [
                self.tangential.interpolate(u1),
                self.tangential.interpolate(u2),
                self.transverse.interpolate(u3),
            ],
        }
    }
}

/// Coefficient vectors of `(u1, u2, u3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u: [DVector<f64>; 3],
}

impl DisplacementField {
    pub fn scaled(&self, s: [f64; 3]) -> Self {
        DisplacementField { u: [&self.u[0] * s[0], &self.u[1] * s[1], &self.u[2] * s[2]] }
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Writes `node,y1,y2,u1,u2,u3,d1u3,d2u3` rows.
    pub fn write_csv<W: std::io::Write>(&self, space: &FieldSpace, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["node", "y1", "y2", "u1", "u2", "u3", "d1u3", "d2u3"])?;
        let dt = space.tangential.dofs_per_node();
        for (n, p) in space.mesh.nodes.iter().enumerate() {
            let row = [
                p[0],
                p[1],
                self.u[0][n * dt],
                self.u[1][n * dt],
                self.u[2][4 * n],
                self.u[2][4 * n + 1],
                self.u[2][4 * n + 2],
            ];
            let mut rec = vec![n.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// A homogeneous linear constraint on the nodal block of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofConstraint {
    pub component: usize,
    pub node: usize,
    /// Coefficients on `(u, d1 u, d2 u, d12 u)`; only the first is used for bilinear blocks.
    pub coeffs: [f64; 4],
}

/// One admissibility condition. Several may be combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regime {
    /// `u_i = d_nu u_3 = 0` on the whole boundary.
    FullClamp,
    /// `u_3 = d_nu u_3 = 0` on the whole boundary.
    TransverseClamp,
    /// `u_3 = 0` on the whole boundary.
    TransverseH10,
    /// `u_alpha = 0` on the whole boundary.
    TangentialClamp,
    /// `u_alpha = 0` on the selected edges.
    PartialTangential { edges: Vec<EdgeSelector> },
    /// `u_3 = 0`, and `d_nu u_3 = 0` if `clamp_normal`, on the selected edges.
    PartialTransverse { edges: Vec<EdgeSelector>, clamp_normal: bool },
    /// `u_alpha = 0` wherever the normal is not orthogonal to `e`.
    Directional {
        e: [f64; 2],
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Custom { constraints: Vec<DofConstraint> },
}

fn default_tau() -> f64 {
    crate::mesh::TAU_NORMAL
}

/// Extra normalization of the transverse space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum V3Normalization {
    /// All nodal dofs of `u_3` vanish on the boundary.
    H20,
    /// `u_3 = 0` on the boundary.
    H10,
    /// Values pinned at three non-collinear nodes.
    PinAffine,
    /// Value pinned at one node.
    PinConstant,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoundaryConditionSet {
    #[serde(default)]
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub v3_normalization: V3Normalization,
}

impl BoundaryConditionSet {
    pub fn new(regimes: Vec<Regime>, v3_normalization: V3Normalization) -> Self {
        BoundaryConditionSet { regimes, v3_normalization }
    }

    pub fn free() -> Self {
        Self::default()
    }

    /// Tangential clamp with pinned affine functions.
    pub fn tangential_clamp_pin_affine() -> Self {
        Self::new(vec![Regime::TangentialClamp], V3Normalization::PinAffine)
    }

    /// Both tangential and transverse components clamped, with the normal
    /// derivative, on the selected edges only.
    pub fn clamped_on(edges: Vec<EdgeSelector>) -> Self {
        Self::new(
            vec![
                Regime::PartialTangential { edges: edges.clone() },
                Regime::PartialTransverse { edges, clamp_normal: true },
            ],
            V3Normalization::None,
        )
    }
}

/// Per-node orthonormal bases of the admissible nodal blocks of one component.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub dofs_per_node: usize,
    pub blocks: Vec<DMatrix<f64>>,
}

impl Reduction {
    fn from_rows(dpn: usize, rows: &[Vec<Vec<f64>>]) -> Self {
        let blocks = rows.iter().map(|r| nullspace(dpn, r)).collect();
        Reduction { dofs_per_node: dpn, blocks }
    }

    pub fn free_count(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    /// Whether the functional `row` vanishes on every admissible block of node `n`.
    pub fn annihilates(&self, n: usize, row: &[f64]) -> bool {
        let b = &self.blocks[n];
        (0..b.ncols()).all(|c| (0..b.nrows()).map(|r| row[r] * b[(r, c)]).sum::<f64>().abs() < 1e-12)
    }

    /// `(I - T T^T)` restricted to the nodal block: projects on the constrained directions.
    pub fn constrained_projector(&self, n: usize) -> DMatrix<f64> {
        let b = &self.blocks[n];
        DMatrix::identity(self.dofs_per_node, self.dofs_per_node) - b * b.transpose()
    }
}

fn nullspace(dpn: usize, rows: &[Vec<f64>]) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(dpn, dpn);
    }
    let c = DMatrix::from_fn(rows.len(), dpn, |i, j| rows[i][j]);
    let gram = c.transpose() * &c;
    let scale = gram.diagonal().max().max(1e-300);
    let eig = SymmetricEigen::new(gram);
    let mut cols: Vec<(f64, DVector<f64>)> = (0..dpn)
        .filter(|&k| eig.eigenvalues[k] < 1e-12 * scale)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned()))
        .collect();
    cols.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut m = DMatrix::zeros(dpn, cols.len());
    for (j, (_, v)) in cols.iter().enumerate() {
        // Fix the sign so results do not depend on eigen-solver conventions.
        let piv = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() + 1e-12 { x } else { a });
        let s = if piv < 0.0 { -1.0 } else { 1.0 };
        m.set_column(j, &(v * s));
    }
    m
}

/// Displacements satisfying a set of boundary conditions, parametrized by reduced coordinates.
#[derive(Debug, Clone)]
pub struct AdmissibleSpace {
    pub space: FieldSpace,
    pub bcs: BoundaryConditionSet,
    pub reductions: [Reduction; 3],
    pub pinned_nodes: Vec<usize>,
}

impl AdmissibleSpace {
    pub fn new(space: FieldSpace, bcs: &BoundaryConditionSet) -> Result<Self> {
        let mesh = space.mesh.clone();
        let nn = mesh.num_nodes();
        let mut rows: [Vec<Vec<Vec<f64>>>; 3] = [vec![vec![]; nn], vec![vec![]; nn], vec![vec![]; nn]];
        let kinds = [space.tangential.kind, space.tangential.kind, space.transverse.kind];
        let all_edges: Vec<usize> = (0..mesh.boundary_edges.len()).collect();

        // Zero trace on an edge: value and tangential derivative at both ends.
        let trace = |rows: &mut Vec<Vec<Vec<f64>>>, kind: ElementKind, edges: &[usize], normal: bool| {
            for &k in edges {
                let e = &mesh.boundary_edges[k];
                let t = e.tangent();
                for &n in &e.nodes {
                    match kind {
                        ElementKind::Bilinear => rows[n].push(vec![1.0]),
                        ElementKind::Hermite if normal => {
                            for d in 0..4 {
                                let mut r = vec![0.0; 4];
                                r[d] = 1.0;
                                rows[n].push(r);
                            }
                        }
                        ElementKind::Hermite => {
                            rows[n].push(vec![1.0, 0.0, 0.0, 0.0]);
                            rows[n].push(vec![0.0, t[0], t[1], 0.0]);
                        }
                    }
                }
            }
        };
        let select = |sels: &[EdgeSelector]| -> Result<Vec<usize>> {
            let mut v = vec![];
            for &s in sels {
                v.extend(mesh.select(s)?);
            }
            Ok(v)
        };

        for regime in &bcs.regimes {
            match regime {
                Regime::FullClamp => {
                    for c in 0..2 {
                        trace(&mut rows[c], kinds[c], &all_edges, false);
                    }
                    trace(&mut rows[2], kinds[2], &all_edges, true);
                }
                Regime::TransverseClamp => trace(&mut rows[2], kinds[2], &all_edges, true),
                Regime::TransverseH10 => trace(&mut rows[2], kinds[2], &all_edges, false),
                Regime::TangentialClamp => {
                    for c in 0..2 {
                        trace(&mut rows[c], kinds[c], &all_edges, false);
                    }
                }
                Regime::PartialTangential { edges } => {
                    let sel = select(edges)?;
                    for c in 0..2 {
                        trace(&mut rows[c], kinds[c], &sel, false);
                    }
                }
                Regime::PartialTransverse { edges, clamp_normal } => {
                    let sel = select(edges)?;
                    trace(&mut rows[2], kinds[2], &sel, *clamp_normal);
                }
                Regime::Directional { e, tau } => {
                    let tag = tag_directional(&mesh, *e, *tau)?;
                    for c in 0..2 {
                        trace(&mut rows[c], kinds[c], &tag.gamma0, false);
                    }
                }
                Regime::Custom { constraints } => {
                    for dc in constraints {
                        if dc.component > 2 || dc.node >= nn {
                            return Err(PlateError::InvalidArgument(format!(
                                "custom constraint on component {} node {} is out of range",
                                dc.component, dc.node
                            )));
                        }
                        let dpn = kinds[dc.component].dofs_per_node();
                        rows[dc.component][dc.node].push(dc.coeffs[..dpn].to_vec());
                    }
                }
            }
        }

        let mut pinned_nodes = vec![];
        match bcs.v3_normalization {
            V3Normalization::H20 => trace(&mut rows[2], kinds[2], &all_edges, true),
            V3Normalization::H10 => trace(&mut rows[2], kinds[2], &all_edges, false),
            V3Normalization::PinConstant => pinned_nodes.push(0),
            V3Normalization::PinAffine => pinned_nodes = affine_pins(&mesh)?,
            V3Normalization::None => {}
        }
        for &n in &pinned_nodes {
            let mut r = vec![0.0; kinds[2].dofs_per_node()];
            r[0] = 1.0;
            rows[2][n].push(r);
        }

        let reductions = [
            Reduction::from_rows(kinds[0].dofs_per_node(), &rows[0]),
            Reduction::from_rows(kinds[1].dofs_per_node(), &rows[1]),
            Reduction::from_rows(kinds[2].dofs_per_node(), &rows[2]),
        ];
        Ok(AdmissibleSpace { space, bcs: bcs.clone(), reductions, pinned_nodes })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.space.mesh
    }

    /// Reduced coordinates for the listed components, ordered node by node.
    pub fn layout(&self, comps: &[usize]) -> Layout {
        let nn = self.space.mesh.num_nodes();
        let mut offsets = vec![vec![0usize; nn]; 3];
        let mut n = 0;
        for node in 0..nn {
            for &c in comps {
                offsets[c][node] = n;
                n += self.reductions[c].blocks[node].ncols();
            }
        }
        Layout { comps: comps.to_vec(), offsets, n, reductions: self.reductions.clone() }
    }

    pub fn full_layout(&self) -> Layout {
        self.layout(&[0, 1, 2])
    }

    /// Whether `u_c` vanishes identically on boundary edge `k` for every admissible field.
    pub fn trace_clamped(&self, c: usize, k: usize) -> bool {
        let e = &self.space.mesh.boundary_edges[k];
        let red = &self.reductions[c];
        let t = e.tangent();
        e.nodes.iter().all(|&n| match red.dofs_per_node {
            1 => red.annihilates(n, &[1.0]),
            _ => red.annihilates(n, &[1.0, 0.0, 0.0, 0.0]) && red.annihilates(n, &[0.0, t[0], t[1], 0.0]),
        })
    }

    /// Whether the admissible transverse space contains nonzero constants.
    pub fn contains_constants(&self) -> bool {
        let red = &self.reductions[2];
        let dpn = red.dofs_per_node;
        // A constant has nodal block e0 at every node; it is admissible iff every block keeps e0.
        (0..self.space.mesh.num_nodes()).all(|n| {
            let p = red.constrained_projector(n);
            (0..dpn).all(|i| p[(i, 0)].abs() < 1e-12)
        })
    }

    /// Dimension of the admissible affine functions of `u_3`.
    pub fn affine_dimension(&self) -> usize {
        let red = &self.reductions[2];
        let dpn = red.dofs_per_node;
        let nn = self.space.mesh.num_nodes();
        // Columns: nodal blocks of 1, y1, y2.
        let mut a = DMatrix::zeros(nn * dpn, 3);
        for (n, p) in self.space.mesh.nodes.iter().enumerate() {
            let blocks: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [p[0], 1.0, 0.0, 0.0], [p[1], 0.0, 1.0, 0.0]];
            let proj = red.constrained_projector(n);
            for (j, b) in blocks.iter().enumerate() {
                let v = DVector::from_row_slice(&b[..dpn]);
                let r = &proj * v;
                for i in 0..dpn {
                    a[(n * dpn + i, j)] = r[i];
                }
            }
        }
        let sv = a.singular_values();
        let scale = self.space.mesh.diameter.max(1.0) * 1e-10;
        3 - sv.iter().filter(|&&s| s > scale).count()
    }
}

fn affine_pins(mesh: &Mesh) -> Result<Vec<usize>> {
    let c = [
        mesh.node_index(0, 0),
        mesh.node_index(mesh.n1, 0),
        mesh.node_index(0, mesh.n2),
        mesh.node_index(mesh.n1, mesh.n2),
    ];
    let scale = mesh.diameter * mesh.diameter;
    for tri in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
        let [a, b, d] = tri.map(|k| mesh.nodes[c[k]]);
        let area = (b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0]);
        if area.abs() > 1e-8 * scale {
            return Ok(tri.iter().map(|&k| c[k]).collect());
        }
    }
    Err(PlateError::InvalidMesh("no three non-collinear corner nodes to pin".into()))
}

/// Maps between reduced coordinates and full coefficient vectors.
#[derive(Debug, Clone)]
pub struct Layout {
    pub comps: Vec<usize>,
    offsets: Vec<Vec<usize>>,
    pub n: usize,
    reductions: [Reduction; 3],
}

impl Layout {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Reduced index range and block for component `c` at node `node`.
    pub fn block(&self, c: usize, node: usize) -> (usize, &DMatrix<f64>) {
        (self.offsets[c][node], &self.reductions[c].blocks[node])
    }

    pub fn dofs_per_node(&self, c: usize) -> usize {
        self.reductions[c].dofs_per_node
    }

    /// Full coefficient vector of component `c` from reduced coordinates.
    pub fn expand_component(&self, c: usize, z: &DVector<f64>) -> DVector<f64> {
        let red = &self.reductions[c];
        let dpn = red.dofs_per_node;
        let nn = red.blocks.len();
        let mut out = DVector::zeros(nn * dpn);
        if !self.comps.contains(&c) {
            return out;
        }
        for node in 0..nn {
            let (off, b) = self.block(c, node);
            for i in 0..dpn {
                out[node * dpn + i] = (0..b.ncols()).map(|j| b[(i, j)] * z[off + j]).sum();
            }
        }
        out
    }

    /// Full displacement field from reduced coordinates; absent components are zero.
    pub fn expand(&self, z: &DVector<f64>) -> DisplacementField {
        DisplacementField { u: [0, 1, 2].map(|c| self.expand_component(c, z)) }
    }

    /// `T^T g`: reduced gradient from full gradients (absent components ignored).
    pub fn restrict(&self, g: &[DVector<f64>; 3]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for &c in &self.comps {
            let red = &self.reductions[c];
            let dpn = red.dofs_per_node;
            for node in 0..red.blocks.len() {
                let (off, b) = self.block(c, node);
                for j in 0..b.ncols() {
                    out[off + j] = (0..dpn).map(|i| b[(i, j)] * g[c][node * dpn + i]).sum();
                }
            }
        }
        out
    }

    /// Orthogonal projection coordinates `T^T u`; exact for admissible fields.
    pub fn project(&self, u: &DisplacementField) -> DVector<f64> {
        self.restrict(&u.u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{Jet2, JetFn};
    use crate::mesh::PlanarDomain;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(Mesh::build(&PlanarDomain::unit_square(), n, n).unwrap())
    }

    #[test]
    fn hermite_reproduces_linear_and_quadratic() {
        let s = ScalarSpace::new(square(3), ElementKind::Hermite);
        let lin = s.interpolate(&JetFn(|a: Jet2, _b: Jet2| a));
        let quad = s.interpolate(&JetFn(|a: Jet2, _b: Jet2| a * a));
        for c in &s.elements {
            let (l, q) = (c.gather(&lin), c.gather(&quad));
            for k in 0..c.num_points() {
                assert!((c.eval(k, &l).v - c.points[k][0]).abs() < 1e-12);
                let p = c.eval(k, &q);
                assert!((p.h[0] - 2.0).abs() < 1e-10);
                assert!(p.h[1].abs() < 1e-10 && p.h[2].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hermite_reproduces_bicubics_on_rectangles() {
        let m = Arc::new(Mesh::build(&PlanarDomain::rectangle(-1.0, 2.0, 0.5, 1.5), 3, 4).unwrap());
        let s = ScalarSpace::new(m, ElementKind::Hermite);
        let f = |a: f64, b: f64| a * a * a * b * b - 2.0 * a * b * b * b + a * b;
        let c = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a.powi(3) * b * b - 2.0 * a * b.powi(3) + a * b));
        for el in &s.elements {
            let l = el.gather(&c);
            for q in 0..el.num_points() {
                let y = el.points[q];
                assert!((el.eval(q, &l).v - f(y[0], y[1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hermite_is_c1_across_interior_edges() {
        let s = ScalarSpace::new(square(4), ElementKind::Hermite);
        let c = s.interpolate(&JetFn(|a: Jet2, b: Jet2| (a * 3.0).sin() * (b * 2.0).exp()));
        let n1 = 4;
        for j in 0..4 {
            for i in 0..3 {
                let (l, r) = (j * n1 + i, j * n1 + i + 1);
                for t in [0.1, 0.5, 0.77] {
                    let a = s.eval_point(&c, l, [1.0, t]);
                    let b = s.eval_point(&c, r, [0.0, t]);
                    assert!((a.v - b.v).abs() < 1e-10);
                    assert!((a.g[0] - b.g[0]).abs() < 1e-10);
                    assert!((a.g[1] - b.g[1]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn bilinear_patch_test_on_distorted_quads() {
        let m = Arc::new(Mesh::build(&PlanarDomain::regular_polygon(9, [0.2, -0.1], 1.3), 4, 5).unwrap());
        let s = ScalarSpace::new(m, ElementKind::Bilinear);
        let c = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * 2.0 - b * 3.0 + 1.0));
        for el in &s.elements {
            let l = el.gather(&c);
            for q in 0..el.num_points() {
                let p = el.eval(q, &l);
                assert!((p.g[0] - 2.0).abs() < 1e-12 && (p.g[1] + 3.0).abs() < 1e-12);
            }
        }
        let area = s.integrate(&c, |_, _| 1.0);
        assert!((area - s.mesh.area()).abs() < 1e-12);
    }

    #[test]
    fn hermite_affine_exact_on_general_quads() {
        let m = Arc::new(Mesh::build(&PlanarDomain::regular_polygon(7, [0.0, 0.0], 1.0), 5, 5).unwrap());
        let s = ScalarSpace::new(m, ElementKind::Hermite);
        let c = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * 0.5 - b * 2.0 + 3.0));
        for el in &s.elements {
            let l = el.gather(&c);
            for q in 0..el.num_points() {
                let p = el.eval(q, &l);
                let y = el.points[q];
                assert!((p.v - (0.5 * y[0] - 2.0 * y[1] + 3.0)).abs() < 1e-12);
                assert!((p.g[0] - 0.5).abs() < 1e-11 && (p.g[1] + 2.0).abs() < 1e-11);
                assert!(p.h.iter().all(|h| h.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn full_clamp_kills_boundary_traces() {
        let fs = FieldSpace::new(square(4));
        let adm = AdmissibleSpace::new(fs.clone(), &BoundaryConditionSet::new(vec![Regime::FullClamp], V3Normalization::None)).unwrap();
        let lay = adm.full_layout();
        let f = JetFn(|a: Jet2, b: Jet2| (a * 2.0 + b).sin() + 1.0);
        let u = fs.interpolate(&f, &f, &f);
        let z = lay.project(&u);
        let v = lay.expand(&z);
        for k in 0..fs.mesh.boundary_edges.len() {
            let e = &fs.mesh.boundary_edges[k];
            let side = e.side;
            for t in [0.13, 0.5, 0.9] {
                let xi = match side {
                    crate::mesh::Side::Bottom => [t, 0.0],
                    crate::mesh::Side::Right => [1.0, t],
                    crate::mesh::Side::Top => [t, 1.0],
                    crate::mesh::Side::Left => [0.0, t],
                };
                for c in 0..3 {
                    let p = fs.component(c).eval_point(&v.u[c], e.element, xi);
                    assert!(p.v.abs() < 1e-12);
                    if c == 2 {
                        assert!(p.g[0].abs() < 1e-12 && p.g[1].abs() < 1e-12);
                    }
                }
            }
            for c in 0..3 {
                assert!(adm.trace_clamped(c, k));
            }
        }
    }

    #[test]
    fn partial_tangential_on_graphs() {
        let fs = FieldSpace::new(square(4));
        let bcs = BoundaryConditionSet::new(
            vec![Regime::PartialTangential { edges: vec![EdgeSelector::GammaF, EdgeSelector::GammaG] }],
            V3Normalization::None,
        );
        let adm = AdmissibleSpace::new(fs.clone(), &bcs).unwrap();
        for (k, e) in fs.mesh.boundary_edges.iter().enumerate() {
            let graph = matches!(e.side, crate::mesh::Side::Bottom | crate::mesh::Side::Top);
            assert_eq!(adm.trace_clamped(0, k), graph);
            assert!(!adm.trace_clamped(2, k));
        }
        assert_eq!(adm.reductions[2].free_count(), fs.transverse.ndof);
        // Bottom and top rows of nodes lose value and d1 dofs for each tangential component.
        assert_eq!(adm.reductions[0].free_count(), fs.tangential.ndof - 2 * 2 * 5);
    }

    #[test]
    fn normalizations() {
        let fs = FieldSpace::new(square(3));
        let dim = |n| AdmissibleSpace::new(fs.clone(), &BoundaryConditionSet::new(vec![], n)).unwrap();
        assert_eq!(dim(V3Normalization::None).affine_dimension(), 3);
        assert_eq!(dim(V3Normalization::PinConstant).affine_dimension(), 2);
        assert_eq!(dim(V3Normalization::PinAffine).affine_dimension(), 0);
        assert_eq!(dim(V3Normalization::H10).affine_dimension(), 0);
        assert!(dim(V3Normalization::None).contains_constants());
        assert!(!dim(V3Normalization::PinConstant).contains_constants());
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let m = Arc::new(Mesh::build(&PlanarDomain::regular_polygon(6, [0.0, 0.0], 1.0), 3, 3).unwrap());
        let bcs = BoundaryConditionSet::new(
            vec![Regime::PartialTangential { edges: vec![EdgeSelector::GammaG] }],
            V3Normalization::None,
        );
        match AdmissibleSpace::new(FieldSpace::new(m), &bcs) {
            Err(PlateError::UnknownTag(t)) => assert_eq!(t, "gamma_g"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_roundtrip() {
        let fs = FieldSpace::new(square(3));
        let adm = AdmissibleSpace::new(fs, &BoundaryConditionSet::tangential_clamp_pin_affine()).unwrap();
        let lay = adm.full_layout();
        let z = DVector::from_fn(lay.len(), |i, _| (i as f64 * 0.37).sin());
        let u = lay.expand(&z);
        let back = lay.project(&u);
        assert!((back - &z).norm() < 1e-12);
    }

    #[test]
    fn bcs_serde() {
        let b: BoundaryConditionSet = serde_json::from_str(
            r#"{"regimes":[{"type":"partial_tangential","edges":["gamma_f","gamma_g"]},{"type":"directional","e":[0,1]}],"v3_normalization":"pin_constant"}"#,
        )
        .unwrap();
        assert_eq!(b.v3_normalization, V3Normalization::PinConstant);
        assert!(matches!(b.regimes[1], Regime::Directional { tau, .. } if tau == 1e-8));
    }
}
