//! Identities around the Hessian determinant, the log-Poisson convex weight,
//! the explicit flex of the unit square and the unbounded-below load family.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::energy::{
    bending_strain, elasticity_norm_sq, membrane_strain, mean_square, EnergyModel, LoadSpec, MaterialParams,
    ScalarField,
};
use crate::error::{PlateError, Result};
use crate::expr::Expr;
use crate::jet::{Jet2, ScalarFunction};
use crate::linalg::{factor, from_triplets};
use crate::mesh::{BoundaryEdge, Mesh, Side};
use crate::quadrature::GaussRule;
use crate::rigidity::TAU_FLEX;
use crate::space::{AdmissibleSpace, DisplacementField, ElementKind, FieldSpace, PointValue, ScalarSpace};

/// `[u, v] = d11 u d22 v + d22 u d11 v - 2 d12 u d12 v`.
pub fn bracket(u: &PointValue, v: &PointValue) -> f64 {
    u.h[0] * v.h[2] + u.h[2] * v.h[0] - 2.0 * u.h[1] * v.h[1]
}

/// Integrand of `(u, v, w)_omega`.
pub fn trilinear_volume_density(u: &PointValue, v: &PointValue, w: &PointValue) -> f64 {
    u.h[0] * v.g[1] * w.g[1] + u.h[2] * v.g[0] * w.g[0] - u.h[1] * (v.g[0] * w.g[1] + v.g[1] * w.g[0])
}

/// Integrand of `(u, v, w)_{d omega}` for outward normal `nu`.
pub fn trilinear_boundary_density(u: &PointValue, v: &PointValue, w: &PointValue, nu: [f64; 2]) -> f64 {
    (u.h[0] * v.g[1] - u.h[1] * v.g[0]) * w.v * nu[1] + (u.h[2] * v.g[0] - u.h[1] * v.g[1]) * w.v * nu[0]
}

/// The bracket of two fields and the two trilinear forms of a triple.
#[derive(Debug, Clone, Serialize)]
pub struct BracketForms {
    /// `[u, v]` at every quadrature point, element by element.
    #[serde(skip)]
    pub bracket: Vec<Vec<f64>>,
    /// `int [u, v] w`.
    pub bracket_integral: f64,
    pub trilinear_volume: f64,
    pub trilinear_boundary: f64,
}

impl BracketForms {
    /// `|int [u,v] w - (u,v,w)_{d omega} + (u,v,w)_omega|`.
    pub fn residual(&self) -> f64 {
        (self.bracket_integral - self.trilinear_boundary + self.trilinear_volume).abs()
    }
}

fn require_hermite(space: &ScalarSpace, fields: &[&DVector<f64>]) -> Result<()> {
    if space.kind != ElementKind::Hermite {
        return Err(PlateError::InvalidArgument("second derivatives need the Hermite space".into()));
    }
    for f in fields {
        if f.len() != space.ndof {
            return Err(PlateError::InvalidArgument(format!(
                "field has {} coefficients, space has {}",
                f.len(),
                space.ndof
            )));
        }
    }
    Ok(())
}

/// Reference coordinates of the point at parameter `t` along an edge's element side.
fn side_point(side: Side, t: f64) -> [f64; 2] {
    match side {
        Side::Bottom => [t, 0.0],
        Side::Right => [1.0, t],
        Side::Top => [t, 1.0],
        Side::Left => [0.0, t],
    }
}

/// `int_{d omega} g ds` where `g` sees each field at a boundary point and the outward normal.
fn boundary_integral(
    space: &ScalarSpace,
    fields: &[&DVector<f64>],
    g: impl Fn(&[PointValue], [f64; 2]) -> f64,
) -> f64 {
    let rule = GaussRule::new(4);
    space
        .mesh
        .boundary_edges
        .iter()
        .map(|edge: &BoundaryEdge| {
            rule.points
                .iter()
                .zip(&rule.weights)
                .map(|(&t, &wt)| {
                    let xi = side_point(edge.side, t);
                    let vals: Vec<PointValue> = fields.iter().map(|f| space.eval_point(f, edge.element, xi)).collect();
                    wt * edge.length * g(&vals, edge.normal)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Sum over quadrature points of `g` applied to the fields' values.
fn volume_integral(space: &ScalarSpace, fields: &[&DVector<f64>], g: impl Fn(&[PointValue]) -> f64) -> f64 {
    space
        .elements
        .iter()
        .map(|c| {
            let locals: Vec<Vec<f64>> = fields.iter().map(|f| c.gather(f)).collect();
            (0..c.num_points())
                .map(|q| {
                    let vals: Vec<PointValue> = locals.iter().map(|l| c.eval(q, l)).collect();
                    c.weights[q] * g(&vals)
                })
                .sum::<f64>()
        })
        .sum()
}

pub fn bracket_forms(space: &ScalarSpace, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> Result<BracketForms> {
    require_hermite(space, &[u, v, w])?;
    let bracket_field = space
        .elements
        .iter()
        .map(|c| {
            let (lu, lv) = (c.gather(u), c.gather(v));
            (0..c.num_points()).map(|q| bracket(&c.eval(q, &lu), &c.eval(q, &lv))).collect()
        })
        .collect();
    Ok(BracketForms {
        bracket: bracket_field,
        bracket_integral: volume_integral(space, &[u, v, w], |p| bracket(&p[0], &p[1]) * p[2].v),
        trilinear_volume: volume_integral(space, &[u, v, w], |p| trilinear_volume_density(&p[0], &p[1], &p[2])),
        trilinear_boundary: boundary_integral(space, &[u, v, w], |p, nu| {
            trilinear_boundary_density(&p[0], &p[1], &p[2], nu)
        }),
    })
}

/// Residual of the integration-by-parts identity for `int [u, v] w`.
pub fn bracket_identity_check(space: &ScalarSpace, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
    Ok(bracket_forms(space, u, v, w)?.residual())
}

/// `int [f, f] g` against `(g, f, f)_omega` for fields vanishing on the boundary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClampedBracketCheck {
    pub integral: f64,
    /// `(g, f, f)_omega`.
    pub volume: f64,
    /// `|int [f,f] g + (g,f,f)_omega|`, the identity that holds.
    pub residual: f64,
    /// `|int [f,f] g - (g,f,f)_omega|`, for comparison.
    pub opposite_sign_residual: f64,
}

fn max_boundary_value(space: &ScalarSpace, f: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for edge in &space.mesh.boundary_edges {
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            worst = worst.max(space.eval_point(f, edge.element, side_point(edge.side, t)).v.abs());
        }
    }
    worst
}

pub fn clamped_bracket_check(space: &ScalarSpace, f: &DVector<f64>, g: &DVector<f64>) -> Result<ClampedBracketCheck> {
    require_hermite(space, &[f, g])?;
    for (name, x) in [("f", f), ("g", g)] {
        let scale = 1.0 + x.amax();
        if max_boundary_value(space, x) > 1e-10 * scale {
            return Err(PlateError::InvalidArgument(format!("{name} does not vanish on the boundary")));
        }
    }
    let integral = volume_integral(space, &[f, g], |p| bracket(&p[0], &p[0]) * p[1].v);
    let volume = volume_integral(space, &[g, f], |p| trilinear_volume_density(&p[0], &p[1], &p[1]));
    Ok(ClampedBracketCheck {
        integral,
        volume,
        residual: (integral + volume).abs(),
        opposite_sign_residual: (integral - volume).abs(),
    })
}

/// `||E(u)||_{L2}` next to `||det d_ab u_3||_{L2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MongeAmpere {
    pub strain_norm: f64,
    pub det_hessian_norm: f64,
}

pub fn monge_ampere_residual(space: &FieldSpace, u: &DisplacementField) -> MongeAmpere {
    let det = volume_integral(&space.transverse, &[&u.u[2]], |p| {
        let d = p[0].h[0] * p[0].h[2] - p[0].h[1] * p[0].h[1];
        d * d
    });
    MongeAmpere { strain_norm: mean_square(space, &membrane_strain(space, u)).sqrt(), det_hessian_norm: det.sqrt() }
}

fn jet_value(j: Jet2) -> PointValue {
    PointValue { v: j.v, g: j.g, h: j.h }
}

/// Same quantities for closed-form components, sampled at the quadrature points of `space`.
pub fn monge_ampere_closed_form(space: &FieldSpace, u: [&dyn ScalarFunction; 3]) -> MongeAmpere {
    let (mut strain, mut det) = (0.0, 0.0);
    for c in &space.transverse.elements {
        for (q, &y) in c.points.iter().enumerate() {
            let p = u.map(|f| jet_value(f.jet(y)));
            let e = crate::energy::membrane_at(&p[0], &p[1], &p[2]);
            strain += c.weights[q] * (e[0] * e[0] + 2.0 * e[1] * e[1] + e[2] * e[2]);
            let d = p[2].h[0] * p[2].h[2] - p[2].h[1] * p[2].h[1];
            det += c.weights[q] * d * d;
        }
    }
    MongeAmpere { strain_norm: strain.sqrt(), det_hessian_norm: det.sqrt() }
}

/// `int |grad f|^2` and `-int |y|^2 det d_ab f`, equal for clamped `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedIdentity {
    pub lhs: f64,
    pub rhs: f64,
}

impl WeightedIdentity {
    /// `|lhs - rhs| / lhs`, or the absolute gap when `lhs = 0`.
    pub fn relative_residual(&self) -> f64 {
        let gap = (self.lhs - self.rhs).abs();
        if self.lhs > 0.0 {
            gap / self.lhs
        } else {
            gap
        }
    }
}

pub fn weighted_hessian_identity(space: &ScalarSpace, f: &DVector<f64>) -> Result<WeightedIdentity> {
    require_hermite(space, &[f])?;
    let tol = 1e-12 * (1.0 + f.amax());
    for n in (0..space.mesh.num_nodes()).filter(|&n| space.mesh.is_boundary_node(n)) {
        if (0..4).any(|k| f[4 * n + k].abs() > tol) {
            return Err(PlateError::InvalidArgument(format!("boundary dofs of node {n} are not clamped")));
        }
    }
    let lhs = space.integrate(f, |_, p| p.g[0] * p.g[0] + p.g[1] * p.g[1]);
    let rhs = -space.integrate(f, |y, p| (y[0] * y[0] + y[1] * y[1]) * (p.h[0] * p.h[2] - p.h[1] * p.h[1]));
    Ok(WeightedIdentity { lhs, rhs })
}

/// Torsion function `f` of the domain and the weight `w = -log(1 + f)`.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexWeight {
    /// Bilinear Poisson solution at the nodes.
    #[serde(skip)]
    pub nodal: DVector<f64>,
    /// Hermite lift of `f`.
    #[serde(skip)]
    pub f: DVector<f64>,
    /// Hermite coefficients of `w`.
    #[serde(skip)]
    pub w: DVector<f64>,
    #[serde(skip)]
    pub space: Arc<ScalarSpace>,
    pub min_hessian_eigenvalue: f64,
    /// Quadrature point where the minimum is attained.
    pub argmin: [f64; 2],
    /// Boundary distance below which quadrature points are left out of the minimum.
    pub margin: f64,
    pub min_interior_f: f64,
    pub max_boundary_w: f64,
}

impl ConvexWeight {
    /// Poisson solution at the node closest to `y`.
    pub fn nodal_value_near(&self, y: [f64; 2]) -> f64 {
        let d = |x: [f64; 2]| (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        let nodes = &self.space.mesh.nodes;
        let n = (0..nodes.len()).min_by(|&a, &b| d(nodes[a]).total_cmp(&d(nodes[b]))).unwrap_or(0);
        self.nodal[n]
    }
}

/// Margin, as a fraction of the diameter, kept between Hessian samples and the boundary.
pub const CONVEX_WEIGHT_MARGIN: f64 = 0.05;

/// Solves `-Laplace f = 1`, `f = 0` on the boundary, and builds `w = -log(1 + f)`.
/// The Hessian of `w` is sampled farther than `CONVEX_WEIGHT_MARGIN` times the diameter from the boundary.
pub fn convex_weight(mesh: Arc<Mesh>) -> Result<ConvexWeight> {
    let margin = CONVEX_WEIGHT_MARGIN * mesh.diameter;
    convex_weight_with_margin(mesh, margin)
}

/// As [`convex_weight`], sampling the Hessian farther than `margin` from the boundary.
pub fn convex_weight_with_margin(mesh: Arc<Mesh>, margin: f64) -> Result<ConvexWeight> {
    if !(margin >= 0.0) {
        return Err(PlateError::InvalidArgument("margin must be nonnegative".into()));
    }
    if !mesh.convex {
        return Err(PlateError::InvalidArgument("the convex weight needs a convex domain".into()));
    }
    let nodal = poisson_bilinear(&mesh)?;
    let jets = recover_derivatives(&mesh, &nodal)?;
    let space = Arc::new(ScalarSpace::new(mesh.clone(), ElementKind::Hermite));
    let mut f = DVector::zeros(space.ndof);
    let mut w = DVector::zeros(space.ndof);
    for (n, j) in jets.iter().enumerate() {
        let [v, g1, g2, h12] = *j;
        let s = 1.0 + v;
        f.as_mut_slice()[4 * n..4 * n + 4].copy_from_slice(&[v, g1, g2, h12]);
        w.as_mut_slice()[4 * n..4 * n + 4].copy_from_slice(&[-s.ln(), -g1 / s, -g2 / s, -h12 / s + g1 * g2 / (s * s)]);
    }
    let mut min_eig = f64::INFINITY;
    let mut argmin = [f64::NAN; 2];
    let mut min_f = f64::INFINITY;
    for c in &space.elements {
        let (lf, lw) = (c.gather(&f), c.gather(&w));
        for (q, &y) in c.points.iter().enumerate() {
            min_f = min_f.min(c.eval(q, &lf).v);
            if boundary_distance(&mesh, y) <= margin {
                continue;
            }
            let h = c.eval(q, &lw).h;
            let mean = 0.5 * (h[0] + h[2]);
            let rad = (0.25 * (h[0] - h[2]).powi(2) + h[1] * h[1]).sqrt();
            if mean - rad < min_eig {
                min_eig = mean - rad;
                argmin = y;
            }
        }
    }
    for n in (0..mesh.num_nodes()).filter(|&n| !mesh.is_boundary_node(n)) {
        min_f = min_f.min(nodal[n]);
    }
    let max_boundary_w = max_boundary_value(&space, &w);
    Ok(ConvexWeight { nodal, f, w, space, min_hessian_eigenvalue: min_eig, argmin, margin, min_interior_f: min_f, max_boundary_w })
}

fn boundary_distance(mesh: &Mesh, y: [f64; 2]) -> f64 {
    mesh.boundary_edges
        .iter()
        .map(|e| {
            let (a, b) = (mesh.nodes[e.nodes[0]], mesh.nodes[e.nodes[1]]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let t = (((y[0] - a[0]) * d[0] + (y[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])).clamp(0.0, 1.0);
            ((y[0] - a[0] - t * d[0]).powi(2) + (y[1] - a[1] - t * d[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Bilinear Galerkin solution of `-Laplace f = 1` with homogeneous Dirichlet data.
fn poisson_bilinear(mesh: &Arc<Mesh>) -> Result<DVector<f64>> {
    let space = ScalarSpace::new(mesh.clone(), ElementKind::Bilinear);
    let nn = mesh.num_nodes();
    let mut index = vec![usize::MAX; nn];
    let mut free = 0;
    for (n, slot) in index.iter_mut().enumerate() {
        if !mesh.is_boundary_node(n) {
            *slot = free;
            free += 1;
        }
    }
    if free == 0 {
        return Err(PlateError::InvalidMesh("the mesh has no interior nodes".into()));
    }
    let (mut rows, mut cols, mut vals) = (vec![], vec![], vec![]);
    let mut rhs = DVector::zeros(free);
    for c in &space.elements {
        let nb = c.dofs.len();
        for q in 0..c.num_points() {
            let wq = c.weights[q];
            for a in 0..nb {
                let i = index[c.dofs[a]];
                if i == usize::MAX {
                    continue;
                }
                rhs[i] += wq * c.phi[q * nb + a];
                let ga = c.grad[q * nb + a];
                for b in 0..nb {
                    let j = index[c.dofs[b]];
                    if j == usize::MAX {
                        continue;
                    }
                    let gb = c.grad[q * nb + b];
                    rows.push(i);
                    cols.push(j);
                    vals.push(wq * (ga[0] * gb[0] + ga[1] * gb[1]));
                }
            }
        }
    }
    let k = from_triplets(free, &rows, &cols, &vals);
    let sol = factor(&k)?.solve(&rhs);
    let mut out = DVector::zeros(nn);
    for n in 0..nn {
        if index[n] != usize::MAX {
            out[n] = sol[(index[n], 0)];
        }
    }
    Ok(out)
}

/// Value, gradient and mixed derivative at every node from a least-squares quadratic
/// through the 3 x 3 block of grid neighbors, shifted inward at the boundary.
/// On a uniform grid this is the central-difference stencil.
fn recover_derivatives(mesh: &Mesh, f: &DVector<f64>) -> Result<Vec<[f64; 4]>> {
    let (n1, n2) = (mesh.n1, mesh.n2);
    let mut out = vec![[0.0; 4]; mesh.num_nodes()];
    for j in 0..=n2 {
        for i in 0..=n1 {
            let k = mesh.node_index(i, j);
            let y = mesh.nodes[k];
            let (i0, j0) = (i.saturating_sub(1).min(n1 - 2), j.saturating_sub(1).min(n2 - 2));
            let mut a = DMatrix::zeros(9, 6);
            let mut b = DVector::zeros(9);
            let scale = mesh.h;
            for (r, (ii, jj)) in (j0..j0 + 3).flat_map(|jj| (i0..i0 + 3).map(move |ii| (ii, jj))).enumerate() {
                let m = mesh.node_index(ii, jj);
                let (dx, dy) = ((mesh.nodes[m][0] - y[0]) / scale, (mesh.nodes[m][1] - y[1]) / scale);
                for (c, v) in [1.0, dx, dy, dx * dx, dx * dy, dy * dy].into_iter().enumerate() {
                    a[(r, c)] = v;
                }
                b[r] = f[m];
            }
            let coef = a
                .svd(true, true)
                .solve(&b, 1e-12)
                .map_err(|e| PlateError::Numerical(format!("derivative recovery failed at node {k}: {e}")))?;
            out[k] = [f[k], coef[1] / scale, coef[2] / scale, coef[4] / (scale * scale)];
        }
    }
    // f vanishes along the boundary, so only the normal derivative survives there.
    let mut tangents: Vec<Vec<[f64; 2]>> = vec![vec![]; mesh.num_nodes()];
    for e in &mesh.boundary_edges {
        for &n in &e.nodes {
            tangents[n].push(e.tangent());
        }
    }
    for (k, ts) in tangents.iter().enumerate() {
        let Some(&t) = ts.first() else { continue };
        if ts.iter().any(|s| (s[0] * t[1] - s[1] * t[0]).abs() > 1e-9) {
            out[k][1] = 0.0;
            out[k][2] = 0.0;
        } else {
            let gt = out[k][1] * t[0] + out[k][2] * t[1];
            out[k][1] -= gt * t[0];
            out[k][2] -= gt * t[1];
        }
    }
    Ok(out)
}

/// `u_1` of the explicit flex: `-1/2 int_0^{y_1} f'(t)^2 dt`.
struct FlexTangential<'a> {
    f: &'a Expr,
    rule: GaussRule,
}

impl FlexTangential<'_> {
    fn slope(&self, t: f64) -> (f64, f64) {
        let j = self.f.jet([t, 0.0], 0.0);
        (j.g[0], j.h[0])
    }
}

impl ScalarFunction for FlexTangential<'_> {
    fn jet(&self, y: [f64; 2]) -> Jet2 {
        const PIECES: usize = 8;
        let x = y[0];
        let mut v = 0.0;
        for p in 0..PIECES {
            let (a, b) = (x * p as f64 / PIECES as f64, x * (p + 1) as f64 / PIECES as f64);
            for (&t, &w) in self.rule.points.iter().zip(&self.rule.weights) {
                let s = self.slope(a + (b - a) * t).0;
                v += (b - a) * w * s * s;
            }
        }
        let (d, dd) = self.slope(x);
        Jet2 { v: -0.5 * v, g: [-0.5 * d * d, 0.0], h: [-d * dd, 0.0, 0.0] }
    }
}

/// The zero-strain field `(-1/2 int_0^{y_1} f'^2, 0, f(y_1))` interpolated into `space`.
pub fn counterexample_field(space: &FieldSpace, f1: &Expr) -> Result<DisplacementField> {
    if f1.depends_on_x3() {
        return Err(PlateError::InvalidArgument("the profile may only depend on y1".into()));
    }
    for &y in &space.mesh.nodes {
        if f1.jet(y, 0.0).g[1].abs() > 1e-12 {
            return Err(PlateError::InvalidArgument("the profile may only depend on y1".into()));
        }
    }
    let j0 = f1.jet([0.0, 0.0], 0.0);
    if j0.v.abs() > 1e-12 || j0.g[0].abs() > 1e-12 {
        return Err(PlateError::InvalidArgument(format!(
            "the profile needs f(0) = f'(0) = 0, got f(0) = {:e}, f'(0) = {:e}",
            j0.v, j0.g[0]
        )));
    }
    let u1 = FlexTangential { f: f1, rule: GaussRule::new(8) };
    Ok(DisplacementField {
        u: [
            space.tangential.interpolate(&u1),
            DVector::zeros(space.tangential.ndof),
            space.transverse.interpolate(f1),
        ],
    })
}

/// Energies along `w_t = (t^2 w_1, t^2 w_2, t w_3)` under a load that makes them unbounded below.
#[derive(Debug, Clone, Serialize)]
pub struct BlowupFamily {
    #[serde(skip)]
    pub w: DisplacementField,
    pub load: LoadSpec,
    /// Scale of the tangential load `p_alpha = c w_alpha`.
    pub c: f64,
    pub bending_norm_sq: f64,
    pub tangential_norm_sq: f64,
    pub samples: Vec<(f64, f64)>,
    /// Least-squares fit `a_0 + a_1 t + a_2 t^2`.
    pub fit: [f64; 3],
    /// Largest fit deviation over the largest `|J|`.
    pub fit_residual: f64,
    /// Predicted coefficient of the leading power.
    pub expected_leading: f64,
}

impl BlowupFamily {
    /// `(degree, coefficient)` of the fitted leading power.
    pub fn leading(&self) -> (usize, f64) {
        if self.tangential_norm_sq > 0.0 {
            (2, self.fit[2])
        } else {
            (1, self.fit[1])
        }
    }
}

pub fn blowup_family(adm: &AdmissibleSpace, w: &DisplacementField, params: &MaterialParams, t_samples: &[f64]) -> Result<BlowupFamily> {
    params.validate()?;
    let space = &adm.space;
    if w.is_zero() {
        return Err(PlateError::InvalidArgument("the witness must be nonzero".into()));
    }
    let strain = mean_square(space, &membrane_strain(space, w)).sqrt();
    if !(strain < TAU_FLEX) {
        return Err(PlateError::InvalidArgument(format!(
            "the witness has membrane strain {strain:e}, above {TAU_FLEX:e}"
        )));
    }
    let mut distinct = t_samples.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(PlateError::InvalidArgument("need at least three distinct t samples".into()));
    }
    let bending_weight = params.epsilon.powi(3) / 6.0;
    let f2 = elasticity_norm_sq(space, &bending_strain(space, w), params)?;
    let wa2 = [0, 1].iter().map(|&c| space.tangential.integrate(&w.u[c], |_, p| p.v * p.v)).sum::<f64>();
    let (load, c, expected_leading) = if wa2 > 0.0 {
        let c = if f2 > 0.0 { 2.0 * bending_weight * f2 / wa2 } else { 1.0 };
        let p = [
            ScalarField::TangentialNodal(&w.u[0] * c),
            ScalarField::TangentialNodal(&w.u[1] * c),
            ScalarField::Zero,
        ];
        (LoadSpec::reduced(p, [ScalarField::Zero, ScalarField::Zero]), c, bending_weight * f2 - c * wa2)
    } else {
        let w3 = space.transverse.integrate(&w.u[2], |_, p| p.v * p.v);
        let p = [ScalarField::Zero, ScalarField::Zero, ScalarField::Nodal(w.u[2].clone())];
        (LoadSpec::reduced(p, [ScalarField::Zero, ScalarField::Zero]), 0.0, -w3)
    };
    let model = EnergyModel::new(adm.clone(), *params, &load)?;
    let samples: Vec<(f64, f64)> =
        t_samples.iter().map(|&t| (t, model.energy(&w.scaled([t * t, t * t, t])).total)).collect();
    let a = DMatrix::from_fn(samples.len(), 3, |r, k| samples[r].0.powi(k as i32));
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| PlateError::Numerical(format!("polynomial fit failed: {e}")))?;
    let scale = b.amax().max(f64::MIN_POSITIVE);
    let fit_residual = (&a * &coef - &b).amax() / scale;
    Ok(BlowupFamily {
        w: w.clone(),
        load,
        c,
        bending_norm_sq: f2,
        tangential_norm_sq: wa2,
        samples,
        fit: [coef[0], coef[1], coef[2]],
        fit_residual,
        expected_leading,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::JetFn;
    use crate::mesh::PlanarDomain;
    use crate::space::BoundaryConditionSet;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(Mesh::build(&PlanarDomain::unit_square(), n, n).unwrap())
    }

    #[test]
    fn bracket_identity_for_polynomials() {
        let s = ScalarSpace::new(square(3), ElementKind::Hermite);
        let u = s.interpolate(&JetFn(|a: Jet2, _| a * a));
        let v = s.interpolate(&JetFn(|_, b: Jet2| b * b));
        let one = s.interpolate(&JetFn(|a: Jet2, _| a * 0.0 + 1.0));
        let bf = bracket_forms(&s, &u, &v, &one).unwrap();
        // [y1^2, y2^2] = 4
        assert!((bf.bracket_integral - 4.0).abs() < 1e-12);
        assert!(bf.bracket.iter().flatten().all(|&b| (b - 4.0).abs() < 1e-12));
        assert!(bf.residual() < 1e-10);
        let w = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * b * b + a.powi(3) * b));
        let u2 = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * a * b - b.powi(3)));
        assert!(bracket_identity_check(&s, &u2, &w, &v).unwrap() < 1e-10);
        let affine = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * 2.0 - b + 3.0));
        let z = bracket_forms(&s, &affine, &v, &w).unwrap();
        assert!(z.bracket_integral.abs() < 1e-13 && z.trilinear_volume.abs() < 1e-13 && z.trilinear_boundary.abs() < 1e-13);
    }

    #[test]
    fn clamped_bracket_sign() {
        let s = ScalarSpace::new(square(6), ElementKind::Hermite);
        let f = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * (a * -1.0 + 1.0) * b * (b * -1.0 + 1.0) * (a + 2.0)));
        let g = s.interpolate(&JetFn(|a: Jet2, b: Jet2| (a * std::f64::consts::PI).sin() * (b * std::f64::consts::PI).sin()));
        let c = clamped_bracket_check(&s, &f, &g).unwrap();
        assert!(c.residual < 1e-12, "{c:?}");
        assert!(c.opposite_sign_residual > 1e-3);
        let not_clamped = s.interpolate(&JetFn(|a: Jet2, _| a));
        assert!(clamped_bracket_check(&s, &not_clamped, &g).is_err());
    }

    #[test]
    fn bracket_of_a_field_with_itself_is_twice_the_determinant() {
        let s = ScalarSpace::new(square(4), ElementKind::Hermite);
        let u = s.interpolate(&JetFn(|a: Jet2, b: Jet2| (a * b * 3.0).sin() + a.powi(3)));
        let bf = bracket_forms(&s, &u, &u, &u).unwrap();
        for (c, vals) in s.elements.iter().zip(&bf.bracket) {
            let l = c.gather(&u);
            for (q, &b) in vals.iter().enumerate() {
                let h = c.eval(q, &l).h;
                assert!((b - 2.0 * (h[0] * h[2] - h[1] * h[1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monge_ampere_examples() {
        let fs = FieldSpace::new(square(4));
        let ma = monge_ampere_residual(&fs, &fs.zero_field());
        assert_eq!((ma.strain_norm, ma.det_hessian_norm), (0.0, 0.0));
        let saddle = fs.interpolate(&JetFn(|a: Jet2, _| a * 0.0), &JetFn(|a: Jet2, _| a * 0.0), &JetFn(|a: Jet2, b: Jet2| a * b));
        let ma = monge_ampere_residual(&fs, &saddle);
        assert!((ma.det_hessian_norm - 1.0).abs() < 1e-12 && ma.strain_norm > 0.1);
        let f = Expr::parse("y1^2").unwrap();
        let u1 = Expr::parse("-2/3*y1^3").unwrap();
        let zero = Expr::constant(0.0);
        let ma = monge_ampere_closed_form(&fs, [&u1, &zero, &f]);
        assert!(ma.strain_norm < 1e-14 && ma.det_hessian_norm < 1e-14);
    }

    #[test]
    fn weighted_identity() {
        let s = ScalarSpace::new(square(8), ElementKind::Hermite);
        let zero = DVector::zeros(s.ndof);
        let wi = weighted_hessian_identity(&s, &zero).unwrap();
        assert_eq!((wi.lhs, wi.rhs), (0.0, 0.0));
        let pi = std::f64::consts::PI;
        let f = s.interpolate(&JetFn(move |a: Jet2, b: Jet2| (a * pi).sin().powi(2) * (b * pi).sin().powi(2)));
        let wi = weighted_hessian_identity(&s, &f).unwrap();
        assert!(wi.relative_residual() < 1e-10, "{wi:?}");
        assert!((wi.lhs - 3.0 * pi * pi / 8.0).abs() < 0.05);
        let open = s.interpolate(&JetFn(|a: Jet2, b: Jet2| a * (a * -1.0 + 1.0) * b * (b * -1.0 + 1.0)));
        assert!(weighted_hessian_identity(&s, &open).is_err());
    }

    #[test]
    fn convex_weight_on_the_square() {
        let cw = convex_weight_with_margin(square(32), 0.25).unwrap();
        assert!((cw.nodal_value_near([0.5, 0.5]) - 0.0737).abs() < 0.002);
        assert!(cw.min_interior_f > 0.0);
        assert!(cw.max_boundary_w < 1e-12);
        // Away from the corners the weight is convex; the exact minimum over
        // distance > 1/4 sits on the diagonal near 0.229.
        assert!((cw.min_hessian_eigenvalue - 0.229).abs() < 0.04, "{}", cw.min_hessian_eigenvalue);
        // Near a corner the torsion function behaves like -(2/pi) y1 y2 log r and the
        // weight is a saddle: the exact value at (0.1, 0.1) is -0.329.
        let near = convex_weight_with_margin(square(32), 0.09).unwrap();
        assert!(near.min_hessian_eigenvalue < -0.2);
        let l = Arc::new(
            Mesh::build(
                &PlanarDomain::GeneralPolygon {
                    vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.5, 0.9], [0.0, 1.0]],
                },
                4,
                4,
            )
            .unwrap(),
        );
        assert!(convex_weight(l).is_err());
    }

    #[test]
    fn counterexample_has_zero_strain() {
        let fs = FieldSpace::new(square(4));
        let u = counterexample_field(&fs, &Expr::parse("y1^2").unwrap()).unwrap();
        let exact = fs.interpolate(&JetFn(|a: Jet2, _| a.powi(3) * (-2.0 / 3.0)), &JetFn(|a: Jet2, _| a * 0.0), &JetFn(|a: Jet2, _| a * a));
        for c in 0..3 {
            assert!((&u.u[c] - &exact.u[c]).amax() < 1e-13);
        }
        assert!(monge_ampere_residual(&fs, &u).strain_norm < 1e-13);
        assert!(counterexample_field(&fs, &Expr::parse("0").unwrap()).unwrap().is_zero());
        assert!(counterexample_field(&fs, &Expr::parse("y1").unwrap()).is_err());
        assert!(counterexample_field(&fs, &Expr::parse("y1^2 + y2").unwrap()).is_err());
    }

    #[test]
    fn blowup_of_the_explicit_flex() {
        let fs = FieldSpace::new(square(4));
        let adm = AdmissibleSpace::new(fs.clone(), &BoundaryConditionSet::free()).unwrap();
        let w = counterexample_field(&fs, &Expr::parse("y1^2").unwrap()).unwrap();
        let params = MaterialParams::new(1.0, 1.0, 0.1).unwrap();
        let b = blowup_family(&adm, &w, &params, &[0.0, 1.0, 2.0, 4.0, 8.0]).unwrap();
        assert!((b.bending_norm_sq - 64.0 / 3.0).abs() < 1e-10);
        assert!((b.tangential_norm_sq - 4.0 / 63.0).abs() < 1e-12);
        let expected = -(1e-3 / 6.0) * (64.0 / 3.0);
        assert!((b.fit[2] - expected).abs() < 1e-9 * expected.abs(), "{:?}", b.fit);
        assert!(b.fit_residual < 1e-8);
        assert_eq!(b.samples[0].1, 0.0);
        assert!(b.samples.windows(2).all(|p| p[1].1 < p[0].1));
        assert!(blowup_family(&adm, &fs.zero_field(), &params, &[1.0, 2.0, 3.0]).is_err());
        let strained = fs.interpolate(&JetFn(|a: Jet2, _| a), &JetFn(|a: Jet2, _| a * 0.0), &JetFn(|a: Jet2, _| a * 0.0));
        assert!(blowup_family(&adm, &strained, &params, &[1.0, 2.0, 3.0]).is_err());
    }
}
