//! Discrete rigidity: kernels of the linearized strain and of the Hessian,
//! Korn-type constants, a search for nonlinear flexes and a verdict.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, EnergyWeights, MaterialParams};
use crate::error::{PlateError, Result};
use crate::forms::{assemble, displacement_gram, local_map, h1_gram, h2_gram, hessian_seminorm, symmetric_gradient};
use crate::linalg::{factor, from_triplets, quad_form, smallest_eigenpairs, GenEigen};
use crate::mesh::{BoundaryTag, Mesh};
use crate::minimize::{lbfgs, LbfgsOptions, LineSearch};
use crate::space::{AdmissibleSpace, DisplacementField, Layout};

/// Eigenvalues below `TAU_KERNEL * lambda_max` count as kernel.
pub const TAU_KERNEL: f64 = 1e-8;
/// Largest `||E(u)||_{L2}` at `||u|| = 1` accepted as a flex.
pub const TAU_FLEX: f64 = 1e-8;

/// Kernel of a quadratic form on a constrained space.
#[derive(Debug, Clone)]
pub struct KernelInfo {
    pub dim: usize,
    /// Kernel fields, orthonormal in the reference norm.
    pub basis: Vec<DisplacementField>,
    /// Smallest generalized eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// Reduced coordinates of the basis and the reference Gram matrix.
    pub coords: DMatrix<f64>,
    pub gram: CscMatrix<f64>,
    pub form: CscMatrix<f64>,
    pub layout: Layout,
}

impl KernelInfo {
    /// `1 / lambda_min` over the complement of the kernel; `None` if the kernel is nontrivial.
    pub fn constant(&self) -> Option<f64> {
        if self.dim > 0 {
            return None;
        }
        self.eigenvalues.first().map(|&v| 1.0 / v)
    }
}

fn kernel_of(adm: &AdmissibleSpace, comps: &[usize], form: Vec<crate::forms::Term>, gram: Vec<crate::forms::Term>, seed: u64) -> Result<KernelInfo> {
    let layout = adm.layout(comps);
    let a = assemble(adm, &layout, &form);
    let m = assemble(adm, &layout, &gram);
    if layout.is_empty() {
        return Ok(KernelInfo {
            dim: 0,
            basis: vec![],
            eigenvalues: vec![],
            lambda_max: 0.0,
            coords: DMatrix::zeros(0, 0),
            gram: m,
            form: a,
            layout,
        });
    }
    let eig: GenEigen = smallest_eigenpairs(&a, &m, 4, seed)?;
    let dim = eig.kernel_dim(TAU_KERNEL);
    let coords = eig.kernel_basis(TAU_KERNEL);
    let basis = (0..dim).map(|j| layout.expand(&coords.column(j).into_owned())).collect();
    Ok(KernelInfo { dim, basis, eigenvalues: eig.values, lambda_max: eig.lambda_max, coords, gram: m, form: a, layout })
}

/// Kernel of `(u_alpha) -> sum ||d_alpha u_beta + d_beta u_alpha||^2` against the H1 norm.
pub fn linear_strain_kernel(adm: &AdmissibleSpace) -> Result<KernelInfo> {
    kernel_of(adm, &[0, 1], symmetric_gradient(), h1_gram(&[0, 1]), 11)
}

/// Kernel of the Hessian seminorm of `u_3` against the H2 norm.
pub fn affine_kernel(adm: &AdmissibleSpace) -> Result<KernelInfo> {
    kernel_of(adm, &[2], hessian_seminorm(&[2]), h2_gram(&[2]), 13)
}

/// Smallest `C1` with `||(u_alpha)||^2_{H1} <= C1 * sum ||d_alpha u_beta + d_beta u_alpha||^2`.
pub fn korn_constant(adm: &AdmissibleSpace) -> Result<f64> {
    let k = linear_strain_kernel(adm)?;
    k.constant().ok_or(PlateError::NontrivialKernel { dim: k.dim.max(1), what: "linearized strain".into() })
}

/// Smallest `C2` with `||u_3||^2_{H2} <= C2 * sum ||d_{alpha beta} u_3||^2`.
pub fn hessian_constant(adm: &AdmissibleSpace) -> Result<f64> {
    let k = affine_kernel(adm)?;
    k.constant().ok_or(PlateError::NontrivialKernel { dim: k.dim.max(1), what: "Hessian seminorm".into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexSearchOptions {
    pub restarts: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Weight of `||Hess u_3||^2` in the smoothing phase.
    pub regularization: f64,
    pub smoothing_iterations: usize,
    pub max_iterations: usize,
}

impl Default for FlexSearchOptions {
    fn default() -> Self {
        FlexSearchOptions {
            restarts: 8,
            seed: 0,
            tolerance: TAU_FLEX,
            regularization: 1e-4,
            smoothing_iterations: 300,
            max_iterations: 500,
        }
    }
}

/// A unit-norm field with small membrane strain.
#[derive(Debug, Clone)]
pub struct FlexWitness {
    pub field: DisplacementField,
    /// `||E(u)||_{L2}`.
    pub residual: f64,
    pub restart: usize,
}

/// Outcome of every restart plus the best witness, if any.
#[derive(Debug, Clone)]
pub struct FlexSearch {
    pub witness: Option<FlexWitness>,
    pub residuals: Vec<f64>,
    pub best: Option<FlexWitness>,
}

fn flex_params() -> MaterialParams {
    // Trace coefficient 0 and 4 mu = 1 make the elasticity norm the plain L2 norm.
    MaterialParams { lambda: 0.0, mu: 0.25, epsilon: 1.0 }
}

/// Squared `||E(u)||_{L2}`.
pub fn strain_residual_sq(adm: &AdmissibleSpace, u: &DisplacementField) -> f64 {
    let m = EnergyModel::with_weights(adm.clone(), flex_params(), EnergyWeights { membrane: 1.0, bending: 0.0 });
    m.expect("valid flex parameters").energy(u).membrane
}

/// `R(u_3) = min over u_alpha of ||E(u)||^2`, with the minimizing `u_alpha`.
struct ReducedStrain {
    model: EnergyModel,
    tangential: Layout,
    transverse: Layout,
    /// Factor of the `int e(u) : e(v)` form on the tangential space.
    strain: CscCholesky<f64>,
}

impl ReducedStrain {
    fn new(adm: &AdmissibleSpace, symgrad: &CscMatrix<f64>) -> Result<Self> {
        let model = EnergyModel::with_weights(adm.clone(), flex_params(), EnergyWeights { membrane: 1.0, bending: 0.0 })?;
        let strain = factor(&(symgrad * 0.25))?;
        Ok(ReducedStrain { model, tangential: adm.layout(&[0, 1]), transverse: adm.layout(&[2]), strain })
    }

    /// Field with the optimal tangential part for transverse coordinates `z3`.
    fn field(&self, z3: &DVector<f64>) -> DisplacementField {
        let mut u = self.transverse.expand(z3);
        let (_, g) = self.model.energy_and_full_gradient(&u);
        // E is affine in u_alpha with Hessian 2 K, so the optimum solves 2 K z = -g.
        let rhs = self.tangential.restrict(&g) * -0.5;
        let za = self.strain.solve(&rhs).column(0).into_owned();
        let ua = self.tangential.expand(&za);
        u.u[0] = ua.u[0].clone();
        u.u[1] = ua.u[1].clone();
        u
    }

    /// `R` and its gradient; the envelope theorem drops the `u_alpha` dependence.
    fn eval(&self, z3: &DVector<f64>) -> (f64, DVector<f64>) {
        let u = self.field(z3);
        let (b, g) = self.model.energy_and_full_gradient(&u);
        (b.membrane, self.transverse.restrict(&g))
    }
}

/// `R(v) + delta ||Hess v||^2` at `v = z / ||z||_{H2}`.
struct SphereObjective<'a> {
    reduced: &'a ReducedStrain,
    gram: &'a CscMatrix<f64>,
    hessian: &'a CscMatrix<f64>,
    delta: f64,
}

impl SphereObjective<'_> {
    fn eval(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let gz = self.gram * z;
        let r = z.dot(&gz).sqrt();
        let v = z / r;
        let (mut f, mut g) = self.reduced.eval(&v);
        if self.delta > 0.0 {
            let hv = self.hessian * &v;
            f += self.delta * v.dot(&hv);
            g += hv * (2.0 * self.delta);
        }
        let grad = (&g - &gz * (v.dot(&g) / r)) / r;
        (f, grad)
    }
}

/// Scales `(u_alpha, u_3) -> (t^2 u_alpha, t u_3)` onto the unit sphere of the displacement norm.
fn normalize_flex(adm: &AdmissibleSpace, u: &DisplacementField) -> (DisplacementField, f64) {
    let layout = adm.full_layout();
    let gram = assemble(adm, &layout, &displacement_gram());
    let a = quad_form(&gram, &layout.project(&DisplacementField { u: [u.u[0].clone(), u.u[1].clone(), u.u[2].clone() * 0.0] }));
    let b = quad_form(&gram, &layout.project(&DisplacementField { u: [u.u[0].clone() * 0.0, u.u[1].clone() * 0.0, u.u[2].clone()] }));
    let t2 = if a > 0.0 { (-b + (b * b + 4.0 * a).sqrt()) / (2.0 * a) } else { 1.0 / b };
    (u.scaled([t2, t2, t2.sqrt()]), t2)
}

/// Gauss-Newton data of the strain residual at quadrature points: `(J^T J, J^T r, |r|^2)`.
fn strain_normal_equations(adm: &AdmissibleSpace, layout: &Layout, z: &DVector<f64>) -> (CscMatrix<f64>, DVector<f64>, f64) {
    let u = layout.expand(z);
    let space = &adm.space;
    let parts: Vec<(Vec<usize>, DMatrix<f64>, DVector<f64>, f64)> = (0..space.mesh.elements.len())
        .into_par_iter()
        .map(|e| {
            let lm = local_map(adm, layout, e);
            let nfull = lm.t.nrows();
            let caches = [0, 1, 2].map(|c| &space.component(c).elements[e]);
            let locals = [0, 1, 2].map(|c| caches[c].gather(&u.u[c]));
            let mut jt = DMatrix::zeros(nfull, 3 * caches[2].num_points());
            let mut r = DVector::zeros(3 * caches[2].num_points());
            for q in 0..caches[2].num_points() {
                let sw = caches[2].weights[q].sqrt();
                let s2 = std::f64::consts::SQRT_2;
                let pv = [0, 1, 2].map(|c| caches[c].eval(q, &locals[c]));
                let d3 = pv[2].g;
                let em = crate::energy::membrane_at(&pv[0], &pv[1], &pv[2]);
                r[3 * q] = sw * em[0];
                r[3 * q + 1] = sw * s2 * em[1];
                r[3 * q + 2] = sw * em[2];
                for c in 0..3 {
                    let nb = caches[c].dofs.len();
                    for l in 0..nb {
                        let g = caches[c].grad[q * nb + l];
                        let (a, b, d) = match c {
                            0 => (g[0], 0.5 * g[1], 0.0),
                            1 => (0.0, 0.5 * g[0], g[1]),
                            _ => (d3[0] * g[0], 0.5 * (d3[0] * g[1] + d3[1] * g[0]), d3[1] * g[1]),
                        };
                        let i = lm.comp_offset[c] + l;
                        jt[(i, 3 * q)] = sw * a;
                        jt[(i, 3 * q + 1)] = sw * s2 * b;
                        jt[(i, 3 * q + 2)] = sw * d;
                    }
                }
            }
            let jtr = lm.t.transpose() * (&jt * &r);
            let jr = lm.t.transpose() * jt;
            (lm.reduced, &jr * jr.transpose(), jtr, r.norm_squared())
        })
        .collect();
    let n = layout.len();
    let (mut rows, mut cols, mut vals) = (vec![], vec![], vec![]);
    let mut jtr = DVector::zeros(n);
    let mut rr = 0.0;
    for (idx, k, g, r) in parts {
        rr += r;
        for (a, &i) in idx.iter().enumerate() {
            jtr[i] += g[a];
            for (b, &j) in idx.iter().enumerate() {
                rows.push(i);
                cols.push(j);
                vals.push(k[(a, b)]);
            }
        }
    }
    (from_triplets(n, &rows, &cols, &vals), jtr, rr)
}

/// Levenberg-Marquardt on `|E(z)|^2 + (a.z - 1)^2` with `G`-metric damping.
///
/// The normalization is linear because the zero set is invariant under
/// `(u_alpha, u_3) -> (t^2 u_alpha, t u_3)`.
fn polish(adm: &AdmissibleSpace, layout: &Layout, gram: &CscMatrix<f64>, z0: DVector<f64>, a: DVector<f64>, target: f64, max_iter: usize) -> Result<DVector<f64>> {
    let mut z = z0;
    let mut damping = 1e-6;
    let (mut jtj, mut jtr, mut rr) = strain_normal_equations(adm, layout, &z);
    let mut c = a.dot(&z) - 1.0;
    for _ in 0..max_iter {
        if rr.sqrt() < target {
            break;
        }
        let f = rr + c * c;
        let rhs = -(&jtr + &a * c);
        let mut improved = false;
        while damping < 1e8 {
            let chol = factor(&(&jtj + &(gram * damping)))?;
            // Sherman-Morrison for the rank-one constraint term a a^T.
            let x0 = chol.solve(&rhs).column(0).into_owned();
            let y = chol.solve(&a).column(0).into_owned();
            let dz = &x0 - &y * (a.dot(&x0) / (1.0 + a.dot(&y)));
            let zn = &z + dz;
            let (jn, gn, rn) = strain_normal_equations(adm, layout, &zn);
            let cn = a.dot(&zn) - 1.0;
            if rn + cn * cn < f {
                (z, jtj, jtr, rr, c) = (zn, jn, gn, rn, cn);
                damping = (damping / 10.0).max(1e-15);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(z)
}

/// Searches for nonzero admissible fields with vanishing membrane strain.
///
/// The tangential part is eliminated by a linear solve, leaving a quartic in
/// `u_3` minimized on the unit sphere of the H2 norm from random starts.
pub fn nonlinear_flex_search(adm: &AdmissibleSpace, opts: &FlexSearchOptions) -> Result<FlexSearch> {
    if !(opts.tolerance > 0.0) || !(opts.regularization >= 0.0) {
        return Err(PlateError::InvalidArgument("flex search tolerances must be positive".into()));
    }
    let lin = linear_strain_kernel(adm)?;
    if lin.dim > 0 {
        // A linearized rigid motion is already a flex with u_3 = 0.
        let u = lin.basis[0].clone();
        let layout = adm.full_layout();
        let n = quad_form(&assemble(adm, &layout, &displacement_gram()), &layout.project(&u)).sqrt();
        let field = u.scaled([1.0 / n; 3]);
        let residual = strain_residual_sq(adm, &field).max(0.0).sqrt();
        let w = FlexWitness { field, residual, restart: 0 };
        return Ok(FlexSearch { witness: Some(w.clone()).filter(|w| w.residual < opts.tolerance), residuals: vec![residual], best: Some(w) });
    }
    let transverse = adm.layout(&[2]);
    if transverse.is_empty() {
        return Ok(FlexSearch { witness: None, residuals: vec![], best: None });
    }
    let reduced = ReducedStrain::new(adm, &lin.form)?;
    let gram = assemble(adm, &transverse, &h2_gram(&[2]));
    let hessian = assemble(adm, &transverse, &hessian_seminorm(&[2]));
    let runs: Vec<Result<DVector<f64>>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64 + 1);
            let z0 = DVector::from_fn(transverse.len(), |_, _| rng.gen::<f64>() - 0.5);
            let o = LbfgsOptions { max_iterations: opts.smoothing_iterations, gradient_tolerance: 1e-300, memory: 20, line_search: LineSearch::default() };
            let smooth = SphereObjective { reduced: &reduced, gram: &gram, hessian: &hessian, delta: opts.regularization };
            let s1 = lbfgs(|z| smooth.eval(z), z0, &o, |_, _, _, _| true)?;
            let exact = SphereObjective { delta: 0.0, ..smooth };
            let o = LbfgsOptions { max_iterations: opts.max_iterations, ..o };
            let stop = (opts.tolerance * 1e-2).powi(2);
            let z1 = &s1.x / quad_form(&gram, &s1.x).sqrt();
            let s2 = lbfgs(|z| exact.eval(z), z1, &o, |_, _, f, _| f > stop)?;
            Ok(&s2.x / quad_form(&gram, &s2.x).sqrt())
        })
        .collect();
    let mut residuals = vec![];
    let mut best: Option<FlexWitness> = None;
    let full = adm.full_layout();
    let full_gram = assemble(adm, &full, &displacement_gram());
    for (r, run) in runs.into_iter().enumerate() {
        let v = run?;
        let u = reduced.field(&v);
        let z = full.project(&u);
        // The displacement norm is block diagonal, so a.z = 1 at the start.
        let zero = DVector::zeros(u.u[0].len());
        let u3 = full.project(&DisplacementField { u: [zero.clone(), zero, u.u[2].clone()] });
        let a = (&full_gram * &u3) / quad_form(&full_gram, &u3);
        let z = polish(adm, &full, &full_gram, z, a, opts.tolerance * 1e-2, 50)?;
        let (field, _) = normalize_flex(adm, &full.expand(&z));
        let res = strain_residual_sq(adm, &field).max(0.0).sqrt();
        residuals.push(res);
        if best.as_ref().map_or(true, |b| res < b.residual) {
            best = Some(FlexWitness { field, residual: res, restart: r });
        }
    }
    let witness = best.clone().filter(|b| b.residual < opts.tolerance);
    Ok(FlexSearch { witness, residuals, best })
}

/// Sufficient condition under which rigidity is guaranteed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum RigidityCriterion {
    /// `u_alpha = 0` on the whole boundary, no constants in the transverse space.
    FullTangentialClamp,
    /// Rectangle-like domain with `u_alpha = 0` on both graphs, no constants in the transverse space.
    RectangleLikeGraphs,
    /// `u_alpha = 0` wherever the normal is not orthogonal to `e`, no constants in the transverse space.
    DirectionalClamp { e: [f64; 2] },
    /// Convex domain, `u_3 = 0` on the boundary and no rigid motions in the tangential space.
    ConvexTransverseClamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    RigidBy { criterion: RigidityCriterion },
    Nonrigid { residual: f64 },
    Undetermined { best_residual: Option<f64> },
}

impl Verdict {
    pub fn is_rigid(&self) -> bool {
        matches!(self, Verdict::RigidBy { .. })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RigidityReport {
    pub linear_kernel_dim: usize,
    #[serde(skip)]
    pub linear_kernel_basis: Vec<DisplacementField>,
    pub linear_eigenvalues: Vec<f64>,
    pub affine_kernel_dim: usize,
    pub affine_eigenvalues: Vec<f64>,
    #[serde(rename = "C1")]
    pub c1: Option<f64>,
    #[serde(rename = "C2")]
    pub c2: Option<f64>,
    #[serde(skip)]
    pub nonlinear_flex: Option<FlexWitness>,
    pub flex_residuals: Vec<f64>,
    pub verdict: Verdict,
}

fn clamped_tangential(adm: &AdmissibleSpace, k: usize) -> bool {
    adm.trace_clamped(0, k) && adm.trace_clamped(1, k)
}

/// Direction `e` such that every edge without a tangential clamp has a normal orthogonal to `e`.
fn common_direction(adm: &AdmissibleSpace) -> Option<[f64; 2]> {
    let mesh: &Mesh = adm.mesh();
    let free: Vec<[f64; 2]> = (0..mesh.boundary_edges.len())
        .filter(|&k| !clamped_tangential(adm, k))
        .map(|k| mesh.boundary_edges[k].normal)
        .collect();
    let n = *free.first()?;
    let tol = crate::mesh::TAU_NORMAL;
    free.iter().all(|m| (n[0] * m[1] - n[1] * m[0]).abs() <= tol).then_some([-n[1], n[0]])
}

/// Which sufficient rigidity condition holds, if any.
pub fn rigidity_criterion(adm: &AdmissibleSpace, linear_kernel_dim: usize) -> Option<RigidityCriterion> {
    let mesh = adm.mesh();
    let edges = 0..mesh.boundary_edges.len();
    let no_constants = !adm.contains_constants();
    if no_constants && edges.clone().all(|k| clamped_tangential(adm, k)) {
        return Some(RigidityCriterion::FullTangentialClamp);
    }
    if no_constants
        && mesh.rectangle_like
        && edges
            .clone()
            .filter(|&k| matches!(mesh.boundary_edges[k].tag, BoundaryTag::GammaF | BoundaryTag::GammaG))
            .all(|k| clamped_tangential(adm, k))
    {
        return Some(RigidityCriterion::RectangleLikeGraphs);
    }
    if no_constants {
        if let Some(e) = common_direction(adm) {
            return Some(RigidityCriterion::DirectionalClamp { e });
        }
    }
    if mesh.convex && linear_kernel_dim == 0 && edges.clone().all(|k| adm.trace_clamped(2, k)) {
        return Some(RigidityCriterion::ConvexTransverseClamp);
    }
    None
}

/// Kernels, constants and a verdict for a configured plate.
pub fn rigidity_verdict(adm: &AdmissibleSpace, flex: &FlexSearchOptions) -> Result<RigidityReport> {
    let lin = linear_strain_kernel(adm)?;
    let aff = affine_kernel(adm)?;
    let criterion = rigidity_criterion(adm, lin.dim);
    let (verdict, nonlinear_flex, flex_residuals) = match criterion {
        Some(c) => (Verdict::RigidBy { criterion: c }, None, vec![]),
        None => {
            let s = nonlinear_flex_search(adm, flex)?;
            let v = match &s.witness {
                Some(w) => Verdict::Nonrigid { residual: w.residual },
                None => Verdict::Undetermined { best_residual: s.best.as_ref().map(|b| b.residual) },
            };
            (v, s.witness, s.residuals)
        }
    };
    Ok(RigidityReport {
        linear_kernel_dim: lin.dim,
        c1: lin.constant(),
        linear_kernel_basis: lin.basis,
        linear_eigenvalues: lin.eigenvalues,
        affine_kernel_dim: aff.dim,
        c2: aff.constant(),
        affine_eigenvalues: aff.eigenvalues,
        nonlinear_flex,
        flex_residuals,
        verdict,
    })
}
