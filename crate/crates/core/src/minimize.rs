//! Limited-memory quasi-Newton descent with a backtracking line search, and
//! energy minimization with the norms that control minimizing sequences.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Mutex;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyBreakdown, EnergyModel, LoadSpec, MaterialParams};
use crate::error::{PlateError, Result};
use crate::forms::{assemble, assemble_varying, bending, displacement_gram, linear_membrane, membrane_linearized};
use crate::linalg::factor;
use crate::rigidity::{hessian_constant, korn_constant};
use crate::space::{AdmissibleSpace, DisplacementField, FieldSpace, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearch {
    /// Armijo constant `c` in `f(x + a d) <= f(x) + c a g.d`.
    pub sufficient_decrease: f64,
    pub backtracking: f64,
    pub max_backtracks: usize,
    /// A unit step is doubled while `g(x + a d).d < curvature * g(x).d`.
    pub curvature: f64,
    pub max_expansions: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch { sufficient_decrease: 1e-4, backtracking: 0.5, max_backtracks: 60, curvature: 0.9, max_expansions: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub memory: usize,
    pub line_search: LineSearch,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { max_iterations: 5000, gradient_tolerance: 1e-8, memory: 12, line_search: LineSearch::default() }
    }
}

impl LbfgsOptions {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if !(self.gradient_tolerance > 0.0) {
            return Err(PlateError::InvalidArgument("gradient_tolerance must be positive".into()));
        }
        if !(ls.backtracking > 0.0 && ls.backtracking < 1.0) {
            return Err(PlateError::InvalidArgument("backtracking factor must lie in (0, 1)".into()));
        }
        if !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0) {
            return Err(PlateError::InvalidArgument("sufficient_decrease must lie in (0, 1)".into()));
        }
        if !(ls.curvature > ls.sufficient_decrease && ls.curvature < 1.0) {
            return Err(PlateError::InvalidArgument("curvature must lie in (sufficient_decrease, 1)".into()));
        }
        if self.memory == 0 {
            return Err(PlateError::InvalidArgument("memory must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
    /// The observer asked to stop.
    Stopped,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Minimizes `f` from `x0`. `observe(k, x, f, g)` sees every accepted iterate,
/// starting with `k = 0`, and stops the run by returning `false`.
pub fn lbfgs<F, O>(f: F, x0: DVector<f64>, opts: &LbfgsOptions, observe: O) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    O: FnMut(usize, &DVector<f64>, f64, &DVector<f64>) -> bool,
{
    preconditioned_lbfgs(f, x0, opts, None, observe)
}

/// Inverse of a fixed SPD model Hessian, used as the initial inverse Hessian of every update.
pub type Preconditioner<'a> = &'a (dyn Fn(&DVector<f64>) -> DVector<f64> + Sync);

/// [`lbfgs`] with the scaled identity replaced by `precondition`.
pub fn preconditioned_lbfgs<F, O>(
    mut f: F,
    x0: DVector<f64>,
    opts: &LbfgsOptions,
    precondition: Option<Preconditioner>,
    mut observe: O,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    O: FnMut(usize, &DVector<f64>, f64, &DVector<f64>) -> bool,
{
    opts.validate()?;
    let ls = opts.line_search;
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(PlateError::Numerical("objective is not finite at the start point".into()));
    }
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let done = |x: DVector<f64>, value: f64, g: &DVector<f64>, iterations: usize, termination: Termination| LbfgsOutcome {
        x,
        value,
        gradient_norm: g.norm(),
        iterations,
        termination,
    };
    if !observe(0, &x, fx, &g) {
        return Ok(done(x, fx, &g, 0, Termination::Stopped));
    }
    for k in 1..=opts.max_iterations {
        if g.norm() < opts.gradient_tolerance {
            return Ok(done(x, fx, &g, k - 1, Termination::Converged));
        }
        let mut d = two_loop(&mem, &g, precondition);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            mem.clear();
            d = two_loop(&mem, &g, precondition);
            slope = g.dot(&d);
        }
        let mut accepted: Option<(DVector<f64>, f64, DVector<f64>)> = None;
        for attempt in 0..2 {
            let mut a = 1.0;
            for b in 0..=ls.max_backtracks {
                let xn = &x + &d * a;
                let (fnew, gn) = f(&xn);
                if fnew.is_finite() && fnew <= fx + ls.sufficient_decrease * a * slope {
                    accepted = Some((xn, fnew, gn));
                    if b == 0 {
                        // Still descending steeply: the unit step was too short.
                        for _ in 0..ls.max_expansions {
                            let (_, fa, ga) = accepted.as_ref().unwrap();
                            if ga.dot(&d) >= ls.curvature * slope {
                                break;
                            }
                            let a2 = 2.0 * a;
                            let xe = &x + &d * a2;
                            let (fe, ge) = f(&xe);
                            if !(fe.is_finite() && fe < *fa && fe <= fx + ls.sufficient_decrease * a2 * slope) {
                                break;
                            }
                            a = a2;
                            accepted = Some((xe, fe, ge));
                        }
                    }
                    break;
                }
                a *= ls.backtracking;
            }
            if accepted.is_some() || attempt == 1 || mem.is_empty() {
                break;
            }
            // Retry once along the scaled steepest descent direction.
            mem.clear();
            d = two_loop(&mem, &g, precondition);
            slope = g.dot(&d);
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Ok(done(x, fx, &g, k - 1, Termination::LineSearchFailed));
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fnew;
        g = gn;
        if !observe(k, &x, fx, &g) {
            return Ok(done(x, fx, &g, k, Termination::Stopped));
        }
    }
    let term = if g.norm() < opts.gradient_tolerance { Termination::Converged } else { Termination::MaxIterations };
    Ok(done(x, fx, &g, opts.max_iterations, term))
}

fn two_loop(
    mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    g: &DVector<f64>,
    precondition: Option<Preconditioner>,
) -> DVector<f64> {
    let Some((s, y, _)) = mem.back() else {
        return match precondition {
            Some(p) => -p(g),
            None => -g / g.norm().max(1.0),
        };
    };
    let mut q = g.clone();
    let mut alpha = vec![0.0; mem.len()];
    for (i, (s, y, rho)) in mem.iter().enumerate().rev() {
        alpha[i] = rho * s.dot(&q);
        q.axpy(-alpha[i], y, 1.0);
    }
    match precondition {
        Some(p) => q = p(&q),
        None => q *= s.dot(y) / y.dot(y),
    }
    for (i, (s, y, rho)) in mem.iter().enumerate() {
        let b = rho * y.dot(&q);
        q.axpy(alpha[i] - b, s, 1.0);
    }
    -q
}

/// Options of [`minimize_energy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub memory: usize,
    pub line_search: LineSearch,
    /// Random starts run in addition to the given start.
    pub restarts: usize,
    pub seed: u64,
    /// Uniform amplitude of random starts in reduced coordinates.
    pub restart_amplitude: f64,
    /// Stop once `||u_3||_{H2}` exceeds this factor times `1 + ||u_3(start)||_{H2}`.
    pub divergence_factor: f64,
    /// `(C1, C2)`; estimated from the space when absent.
    pub constants: Option<[f64; 2]>,
    /// Skip the eigenvalue problems behind `C1` and `C2` when they are not given.
    pub estimate_constants: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iterations: 5000,
            gradient_tolerance: 1e-8,
            memory: 12,
            line_search: LineSearch::default(),
            restarts: 0,
            seed: 0,
            restart_amplitude: 1e-2,
            divergence_factor: 1e6,
            constants: None,
            estimate_constants: true,
        }
    }
}

impl MinimizeOptions {
    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            memory: self.memory,
            line_search: self.line_search,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lbfgs().validate()?;
        if !(self.divergence_factor > 1.0) {
            return Err(PlateError::InvalidArgument("divergence_factor must exceed 1".into()));
        }
        if !(self.restart_amplitude >= 0.0) {
            return Err(PlateError::InvalidArgument("restart_amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Norms of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FieldNorms {
    /// `||(u_alpha)||_{H1}`.
    pub tangential_h1: f64,
    pub transverse_h2: f64,
    /// `||(d_alpha u_3)||_{L4}`.
    pub gradient_l4: f64,
    /// `||(d_alpha u_beta + d_beta u_alpha + d_alpha u_3 d_beta u_3)||_{L2}`.
    pub membrane_residual: f64,
    /// `||(d_{alpha beta} u_3)||_{L2}`.
    pub hessian: f64,
}

pub fn field_norms(space: &FieldSpace, u: &DisplacementField) -> FieldNorms {
    let mut acc = [0.0; 6];
    for e in 0..space.mesh.elements.len() {
        let caches = [0, 1, 2].map(|c| &space.component(c).elements[e]);
        let locals = [0, 1, 2].map(|c| caches[c].gather(&u.u[c]));
        for q in 0..caches[2].num_points() {
            let w = caches[2].weights[q];
            let p = [0, 1, 2].map(|c| caches[c].eval(q, &locals[c]));
            for a in &p[..2] {
                acc[0] += w * (a.v * a.v + a.g[0] * a.g[0] + a.g[1] * a.g[1]);
            }
            let (v, g, h) = (p[2].v, p[2].g, p[2].h);
            let hess = h[0] * h[0] + 2.0 * h[1] * h[1] + h[2] * h[2];
            let g2 = g[0] * g[0] + g[1] * g[1];
            acc[1] += w * (v * v + g2 + hess);
            acc[2] += w * g2 * g2;
            let m = crate::energy::membrane_at(&p[0], &p[1], &p[2]);
            acc[3] += w * 4.0 * (m[0] * m[0] + 2.0 * m[1] * m[1] + m[2] * m[2]);
            acc[4] += w * hess;
        }
    }
    FieldNorms {
        tangential_h1: acc[0].sqrt(),
        transverse_h2: acc[1].sqrt(),
        gradient_l4: acc[2].sqrt().sqrt(),
        membrane_residual: acc[3].sqrt(),
        hessian: acc[4].sqrt(),
    }
}

/// Constants bounding minimizing sequences of a rigid problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub a: f64,
    pub b: f64,
    /// `sqrt(3 A / (mu eps^3))`, the offset in `||Hess u_3|| <= A3 + B3 ||grad u_3||_{L4}`.
    pub a3: f64,
    pub b3: f64,
}

impl BoundConstants {
    /// `A` and `B` from the load norms `(||(p_alpha)||^2, ||p_3||^2, ||(q_alpha)||^2)`.
    pub fn new(c1: f64, c2: f64, norms_sq: (f64, f64, f64), params: &MaterialParams) -> Self {
        let (pa, p3, q) = norms_sq;
        let (mu, eps) = (params.mu, params.epsilon);
        let a = 4.0 * c1 / (mu * eps) * pa + 3.0 * c2 / (4.0 * mu * eps.powi(3)) * (p3 + q + pa);
        let b = (2.0 * c1).sqrt() * pa.sqrt();
        let s = 3.0 / (mu * eps.powi(3));
        BoundConstants { c1, c2, a, b, a3: (s * a).sqrt(), b3: (s * b).sqrt() }
    }

    /// `(mu eps/16) M^2 + (mu eps^3/3) H^2 <= A + B ||grad u_3||^2_{L4}`, with slack for roundoff.
    pub fn energy_bound_holds(&self, n: &FieldNorms, params: &MaterialParams) -> bool {
        let (mu, eps) = (params.mu, params.epsilon);
        let lhs = mu * eps / 16.0 * n.membrane_residual.powi(2) + mu * eps.powi(3) / 3.0 * n.hessian.powi(2);
        let rhs = self.a + self.b * n.gradient_l4.powi(2);
        lhs <= rhs * (1.0 + 1e-9) + 1e-14
    }

    /// `||Hess u_3|| <= 2 B3 ||grad u_3||_{L4}`.
    pub fn hessian_ratio_holds(&self, n: &FieldNorms) -> bool {
        n.hessian <= 2.0 * self.b3 * n.gradient_l4 * (1.0 + 1e-9) + 1e-14
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterateRecord {
    pub iteration: usize,
    pub energy: f64,
    pub gradient_norm: f64,
    #[serde(flatten)]
    pub norms: FieldNorms,
    /// Only checked where `J <= 0` and the constants exist.
    pub energy_bound_holds: Option<bool>,
    pub hessian_ratio_holds: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimizeStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    SuspectedUnbounded,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizeTrace {
    pub restart: usize,
    pub records: Vec<IterateRecord>,
    pub constants: Option<BoundConstants>,
    pub status: MinimizeStatus,
    pub suspected_unbounded: bool,
    /// `||u_3||_{H2}` at which the run is declared divergent.
    pub ceiling: f64,
}

impl MinimizeTrace {
    pub fn last(&self) -> Option<&IterateRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "iteration",
            "energy",
            "gradient_norm",
            "tangential_h1",
            "transverse_h2",
            "gradient_l4",
            "membrane_residual",
            "hessian",
            "energy_bound_holds",
            "hessian_ratio_holds",
        ])?;
        let flag = |f: Option<bool>| f.map(|b| b.to_string()).unwrap_or_default();
        for r in &self.records {
            let n = r.norms;
            out.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.energy),
                format!("{:e}", r.gradient_norm),
                format!("{:e}", n.tangential_h1),
                format!("{:e}", n.transverse_h2),
                format!("{:e}", n.gradient_l4),
                format!("{:e}", n.membrane_residual),
                format!("{:e}", n.hessian),
                flag(r.energy_bound_holds),
                flag(r.hessian_ratio_holds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub field: DisplacementField,
    pub energy: EnergyBreakdown,
    /// Trace of the run that produced `field`.
    pub trace: MinimizeTrace,
    /// Final energy and trace of every run, the given start first.
    pub runs: Vec<(EnergyBreakdown, MinimizeTrace)>,
}

impl MinimizeResult {
    pub fn suspected_unbounded(&self) -> bool {
        self.runs.iter().any(|r| r.1.suspected_unbounded)
    }
}

/// Bound constants for `adm` and `model`'s loads, or `None` if a kernel is nontrivial.
fn bound_constants(model: &EnergyModel, opts: &MinimizeOptions) -> Result<Option<BoundConstants>> {
    let norms = model.loads.norms_sq(model.space());
    let c = match opts.constants {
        Some(c) => Some(c),
        None if opts.estimate_constants => match (korn_constant(&model.adm), hessian_constant(&model.adm)) {
            (Ok(c1), Ok(c2)) => Some([c1, c2]),
            (Err(PlateError::NontrivialKernel { .. }), _) | (_, Err(PlateError::NontrivialKernel { .. })) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        },
        None => None,
    };
    Ok(c.map(|[c1, c2]| BoundConstants::new(c1, c2, norms, &model.params)))
}

/// Relative shift keeping the preconditioner definite on spaces with rigid motions.
const PRECONDITIONER_SHIFT: f64 = 1e-6;
/// Squared pivot ratio below which the tangential stiffness counts as singular.
const PIVOT_RATIO: f64 = 1e-12;
/// The preconditioner is rebuilt once `1 + ||u_3||_{H2}` changes by this factor.
const REFRESH_FACTOR: f64 = 2.0;

type Factor = CscCholesky<f64>;

fn diag_max(m: &CscMatrix<f64>) -> f64 {
    m.diagonal_as_csc().values().iter().fold(0.0f64, |a, &b| a.max(b))
}

/// Factor of `a`, or `None` when `a` is numerically singular.
fn definite_factor(a: &CscMatrix<f64>) -> Option<Factor> {
    let f = factor(a).ok()?;
    let d = f.l().diagonal_as_csc();
    let (lo, hi) = d.values().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x.abs()), hi.max(x.abs())));
    (d.values().len() == a.nrows() && lo * lo > PIVOT_RATIO * hi * hi).then_some(f)
}

fn solve(f: &Factor, g: &DVector<f64>) -> DVector<f64> {
    f.solve(g).column(0).into_owned()
}

/// Coordinates the descent runs in.
enum Coordinates {
    /// All free dofs.
    Full,
    /// Free dofs of `u_3`; `u_alpha` is the exact minimizer for the current `u_3`,
    /// since `J` is quadratic in `u_alpha` with a Hessian independent of `u_3`.
    Transverse {
        tangential: Layout,
        transverse: Layout,
        membrane: Factor,
        /// Position of each transverse dof inside the full layout.
        embed: Vec<usize>,
    },
}

struct Descent {
    model: EnergyModel,
    coords: Coordinates,
    gram: CscMatrix<f64>,
    shift: f64,
}

impl Descent {
    fn new(model: EnergyModel) -> Result<Self> {
        let p = model.params;
        let adm = &model.adm;
        let tangential = adm.layout(&[0, 1]);
        let transverse = adm.layout(&[2]);
        let membrane = if tangential.is_empty() || transverse.is_empty() {
            None
        } else {
            let k = assemble(adm, &tangential, &linear_membrane(model.weights.membrane, p.trace_coeff(), p.mu));
            definite_factor(&(k * 2.0))
        };
        let coords = match membrane {
            Some(membrane) => {
                let mut embed = vec![0; transverse.len()];
                for node in 0..adm.space.mesh.num_nodes() {
                    let (t, b) = transverse.block(2, node);
                    let (f, _) = model.layout.block(2, node);
                    for j in 0..b.ncols() {
                        embed[t + j] = f + j;
                    }
                }
                Coordinates::Transverse { tangential, transverse, membrane, embed }
            }
            None => Coordinates::Full,
        };
        let gram = assemble(adm, &model.layout, &displacement_gram());
        let mut d = Descent { model, coords, gram, shift: 0.0 };
        let k = d.stiffness(&d.model.space().zero_field());
        d.shift = PRECONDITIONER_SHIFT * diag_max(&k) / diag_max(&d.gram).max(f64::MIN_POSITIVE);
        Ok(d)
    }

    /// Gauss-Newton Hessian of `J` at `u`: exact at `u_3 = 0`, positive semidefinite everywhere.
    fn stiffness(&self, u: &DisplacementField) -> CscMatrix<f64> {
        let m = &self.model;
        let (p, w) = (m.params, m.weights);
        let transverse = &m.adm.space.transverse;
        let locals: Vec<Vec<f64>> = transverse.elements.iter().map(|c| c.gather(&u.u[2])).collect();
        let k = assemble_varying(&m.adm, &m.layout, |e, q| {
            let g = transverse.elements[e].eval(q, &locals[e]).g;
            let mut terms = membrane_linearized(w.membrane, p.trace_coeff(), p.mu, g);
            terms.extend(bending(w.bending, p.trace_coeff(), p.mu));
            terms
        });
        k * 2.0
    }

    fn preconditioner(&self, u: &DisplacementField) -> Result<Factor> {
        factor(&(self.stiffness(u) + &self.gram * self.shift))
    }

    fn dim(&self) -> usize {
        match &self.coords {
            Coordinates::Full => self.model.dim(),
            Coordinates::Transverse { transverse, .. } => transverse.len(),
        }
    }

    fn project(&self, u: &DisplacementField) -> DVector<f64> {
        match &self.coords {
            Coordinates::Full => self.model.layout.project(u),
            Coordinates::Transverse { transverse, .. } => transverse.project(u),
        }
    }

    fn field(&self, z: &DVector<f64>) -> DisplacementField {
        match &self.coords {
            Coordinates::Full => self.model.layout.expand(z),
            Coordinates::Transverse { tangential, transverse, membrane, .. } => {
                let mut u = transverse.expand(z);
                let (_, g) = self.model.energy_and_full_gradient(&u);
                let ua = tangential.expand(&-solve(membrane, &tangential.restrict(&g)));
                u.u[0] = ua.u[0].clone();
                u.u[1] = ua.u[1].clone();
                u
            }
        }
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        match &self.coords {
            Coordinates::Full => self.model.value_and_gradient(z),
            Coordinates::Transverse { transverse, .. } => {
                let (b, g) = self.model.energy_and_full_gradient(&self.field(z));
                (b.total, transverse.restrict(&g))
            }
        }
    }

    /// Applies the inverse Hessian; in transverse coordinates this is the inverse Schur complement.
    fn precondition(&self, f: &Factor, g: &DVector<f64>) -> DVector<f64> {
        match &self.coords {
            Coordinates::Full => solve(f, g),
            Coordinates::Transverse { embed, .. } => {
                let mut x = DVector::zeros(self.model.dim());
                for (i, &j) in embed.iter().enumerate() {
                    x[j] = g[i];
                }
                let y = solve(f, &x);
                DVector::from_iterator(embed.len(), embed.iter().map(|&j| y[j]))
            }
        }
    }
}

fn descend(
    d: &Descent,
    z0: DVector<f64>,
    opts: &MinimizeOptions,
    constants: Option<BoundConstants>,
    restart: usize,
) -> Result<(DisplacementField, EnergyBreakdown, MinimizeTrace)> {
    let space = d.model.space();
    let u0 = d.field(&z0);
    let start_h2 = field_norms(space, &u0).transverse_h2;
    let ceiling = opts.divergence_factor * (1.0 + start_h2);
    let params = d.model.params;
    let mut records = vec![];
    let mut diverged = false;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let current = Mutex::new((start_h2, d.preconditioner(&u0)?));
    let precondition = |g: &DVector<f64>| d.precondition(&current.lock().expect("preconditioner lock").1, g);
    let out = preconditioned_lbfgs(|z| d.value_and_gradient(z), z0, &opts.lbfgs(), Some(&precondition), |k, z, f, g| {
        let u = d.field(z);
        let norms = field_norms(space, &u);
        let checked = |test: bool| (f <= 0.0).then_some(test);
        records.push(IterateRecord {
            iteration: k,
            energy: f,
            gradient_norm: g.norm(),
            norms,
            energy_bound_holds: constants.and_then(|c| checked(c.energy_bound_holds(&norms, &params))),
            hessian_ratio_holds: constants.and_then(|c| checked(c.hessian_ratio_holds(&norms))),
        });
        if best.as_ref().map_or(true, |b| f < b.0) {
            best = Some((f, z.clone()));
        }
        // Descent guarantees J is still decreasing when the ceiling is crossed.
        if norms.transverse_h2 > ceiling {
            diverged = true;
            return false;
        }
        let mut cur = current.lock().expect("preconditioner lock");
        let ratio = (1.0 + norms.transverse_h2) / (1.0 + cur.0);
        if ratio.max(1.0 / ratio) > REFRESH_FACTOR {
            if let Ok(f) = d.preconditioner(&u) {
                *cur = (norms.transverse_h2, f);
            }
        }
        true
    })?;
    let status = if diverged {
        MinimizeStatus::SuspectedUnbounded
    } else {
        match out.termination {
            Termination::Converged => MinimizeStatus::Converged,
            Termination::MaxIterations | Termination::Stopped => MinimizeStatus::MaxIterations,
            Termination::LineSearchFailed => MinimizeStatus::LineSearchFailed,
        }
    };
    let u = d.field(&best.map(|b| b.1).unwrap_or(out.x));
    let energy = d.model.energy(&u);
    Ok((u, energy, MinimizeTrace { restart, records, constants, status, suspected_unbounded: diverged, ceiling }))
}

/// Minimizes `J` over `adm` from `start` (zero if absent) and from `opts.restarts` random starts.
pub fn minimize_energy(
    adm: &AdmissibleSpace,
    loads: &LoadSpec,
    params: &MaterialParams,
    start: Option<&DisplacementField>,
    opts: &MinimizeOptions,
) -> Result<MinimizeResult> {
    opts.validate()?;
    let model = EnergyModel::new(adm.clone(), *params, loads)?;
    if model.dim() == 0 {
        return Err(PlateError::InvalidArgument("the admissible space is empty".into()));
    }
    let constants = bound_constants(&model, opts)?;
    let d = Descent::new(model)?;
    let n = d.dim();
    let z_start = start.map(|u| d.project(u)).unwrap_or_else(|| DVector::zeros(n));
    let starts: Vec<DVector<f64>> = std::iter::once(z_start)
        .chain((1..=opts.restarts).map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            DVector::from_fn(n, |_, _| opts.restart_amplitude * rng.gen_range(-1.0..1.0))
        }))
        .collect();
    let mut runs: Vec<(DisplacementField, EnergyBreakdown, MinimizeTrace)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, z0)| descend(&d, z0, opts, constants, r))
        .collect::<Result<_>>()?;
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].1.total.total_cmp(&runs[b].1.total))
        .expect("at least one run");
    let field = std::mem::replace(&mut runs[best].0, DisplacementField { u: Default::default() });
    let energy = runs[best].1;
    let trace = runs[best].2.clone();
    Ok(MinimizeResult { field, energy, trace, runs: runs.into_iter().map(|r| (r.1, r.2)).collect() })
}

/// How the norms behaved along a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceBehavior {
    /// Both norm sequences stayed bounded.
    Bounded,
    /// `||(u_alpha)||_{H1}` and `||u_3||_{H2}` grew together.
    CoupledDivergence,
    /// Only one of the two grew, or the run diverged without reaching the ceiling.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SequenceDiagnostics {
    pub behavior: SequenceBehavior,
    pub max_tangential_h1: f64,
    pub max_transverse_h2: f64,
    /// Growth `last / (1 + first)` of both norms.
    pub tangential_growth: f64,
    pub transverse_growth: f64,
    /// Smallest `C3` with `||(u_alpha)||_{H1} <= C3 * membrane residual` on the first half of the run.
    pub fitted_c3: Option<f64>,
    /// Whether the fitted `C3` (with 10% slack) still bounds the second half.
    pub c3_bound_holds: Option<bool>,
}

/// Growth beyond which a norm counts as divergent.
const GROWTH_THRESHOLD: f64 = 1e3;

pub fn minimizing_sequence_diagnostics(trace: &MinimizeTrace) -> Result<SequenceDiagnostics> {
    let (Some(first), Some(last)) = (trace.records.first(), trace.records.last()) else {
        return Err(PlateError::InvalidArgument("the trace is empty".into()));
    };
    let max_of = |f: fn(&IterateRecord) -> f64| trace.records.iter().map(f).fold(0.0, f64::max);
    let tangential_growth = last.norms.tangential_h1 / (1.0 + first.norms.tangential_h1);
    let transverse_growth = last.norms.transverse_h2 / (1.0 + first.norms.transverse_h2);
    let behavior = if trace.suspected_unbounded {
        if tangential_growth > GROWTH_THRESHOLD && transverse_growth > GROWTH_THRESHOLD {
            SequenceBehavior::CoupledDivergence
        } else {
            SequenceBehavior::Inconclusive
        }
    } else {
        SequenceBehavior::Bounded
    };
    let ratio = |r: &IterateRecord| {
        (r.norms.membrane_residual > 0.0).then(|| r.norms.tangential_h1 / r.norms.membrane_residual)
    };
    let half = trace.records.len().div_ceil(2);
    let fitted_c3 = trace.records[..half].iter().filter_map(ratio).reduce(f64::max);
    let c3_bound_holds =
        fitted_c3.map(|c3| trace.records[half..].iter().filter_map(ratio).all(|x| x <= 1.1 * c3 + 1e-12));
    Ok(SequenceDiagnostics {
        behavior,
        max_tangential_h1: max_of(|r| r.norms.tangential_h1),
        max_transverse_h2: max_of(|r| r.norms.transverse_h2),
        tangential_growth,
        transverse_growth,
        fitted_c3,
        c3_bound_holds,
    })
}
