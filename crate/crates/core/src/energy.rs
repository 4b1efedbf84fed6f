//! Membrane and bending strains, the elasticity norm, load work and the total
//! plate energy with its exact gradient.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{PlateError, Result};
use crate::expr::Expr;
use crate::jet::{Jet2, ScalarFunction};
use crate::quadrature::GaussRule;
use crate::space::{AdmissibleSpace, DisplacementField, FieldSpace, Layout, PointValue};

/// Symmetric 2x2 tensor stored as `(11, 12, 22)`.
pub type Sym = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub lambda: f64,
    pub mu: f64,
    pub epsilon: f64,
}

impl MaterialParams {
    pub fn new(lambda: f64, mu: f64, epsilon: f64) -> Result<Self> {
        let p = MaterialParams { lambda, mu, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let MaterialParams { lambda, mu, epsilon } = *self;
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(PlateError::InvalidMaterial(format!("mu must be positive, got {mu}")));
        }
        if !(lambda > -2.0 * mu / 3.0) || !lambda.is_finite() {
            return Err(PlateError::InvalidMaterial(format!(
                "lambda must exceed -(2/3) mu = {}, got {lambda}",
                -2.0 * mu / 3.0
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(PlateError::InvalidMaterial(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(())
    }

    /// Coefficient of the trace term, `4 lambda mu / (lambda + 2 mu)`.
    pub fn trace_coeff(&self) -> f64 {
        4.0 * self.lambda * self.mu / (self.lambda + 2.0 * self.mu)
    }

    /// `a^{abst} s_st t_ab`.
    pub fn contract(&self, s: &Sym, t: &Sym) -> f64 {
        self.trace_coeff() * (s[0] + s[2]) * (t[0] + t[2]) + 4.0 * self.mu * (s[0] * t[0] + 2.0 * s[1] * t[1] + s[2] * t[2])
    }

    /// `a^{abst} s_st` as a symmetric tensor.
    pub fn apply(&self, s: &Sym) -> Sym {
        let tr = self.trace_coeff() * (s[0] + s[2]);
        let m = 4.0 * self.mu;
        [tr + m * s[0], m * s[1], tr + m * s[2]]
    }
}

/// `E(u)` at one point.
pub fn membrane_at(u1: &PointValue, u2: &PointValue, u3: &PointValue) -> Sym {
    [
        u1.g[0] + 0.5 * u3.g[0] * u3.g[0],
        0.5 * (u1.g[1] + u2.g[0] + u3.g[0] * u3.g[1]),
        u2.g[1] + 0.5 * u3.g[1] * u3.g[1],
    ]
}

/// A strain-like tensor field sampled at every quadrature point, element by element.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadField {
    pub values: Vec<Vec<Sym>>,
}

fn point_values(space: &FieldSpace, u: &DisplacementField, e: usize) -> Vec<[PointValue; 3]> {
    let caches = [0, 1, 2].map(|c| &space.component(c).elements[e]);
    let locals = [0, 1, 2].map(|c| caches[c].gather(&u.u[c]));
    (0..caches[2].num_points())
        .map(|q| [0, 1, 2].map(|c| caches[c].eval(q, &locals[c])))
        .collect()
}

pub fn membrane_strain(space: &FieldSpace, u: &DisplacementField) -> QuadField {
    QuadField {
        values: (0..space.mesh.elements.len())
            .map(|e| point_values(space, u, e).iter().map(|p| membrane_at(&p[0], &p[1], &p[2])).collect())
            .collect(),
    }
}

pub fn bending_strain(space: &FieldSpace, u: &DisplacementField) -> QuadField {
    QuadField {
        values: (0..space.mesh.elements.len())
            .map(|e| point_values(space, u, e).iter().map(|p| p[2].h).collect())
            .collect(),
    }
}

/// `int a^{abst} s_st s_ab`.
pub fn elasticity_norm_sq(space: &FieldSpace, s: &QuadField, params: &MaterialParams) -> Result<f64> {
    params.validate()?;
    Ok(integrate(space, s, |t| params.contract(t, t)))
}

/// Plain `int s:s`.
pub fn mean_square(space: &FieldSpace, s: &QuadField) -> f64 {
    integrate(space, s, |t| t[0] * t[0] + 2.0 * t[1] * t[1] + t[2] * t[2])
}

fn integrate(space: &FieldSpace, s: &QuadField, f: impl Fn(&Sym) -> f64) -> f64 {
    s.values
        .iter()
        .enumerate()
        .map(|(e, v)| {
            let w = &space.transverse.elements[e].weights;
            v.iter().zip(w).map(|(t, w)| w * f(t)).sum::<f64>()
        })
        .sum()
}

/// A scalar load field on the mid-surface.
#[derive(Clone, Default)]
pub enum ScalarField {
    #[default]
    Zero,
    Constant(f64),
    Expr(Expr),
    /// Coefficients on the transverse (Hermite) space.
    Nodal(DVector<f64>),
    /// Coefficients on the tangential space.
    TangentialNodal(DVector<f64>),
    Function(Arc<dyn ScalarFunction>),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Zero => write!(f, "Zero"),
            ScalarField::Constant(c) => write!(f, "Constant({c})"),
            ScalarField::Expr(e) => write!(f, "Expr({e})"),
            ScalarField::Nodal(v) | ScalarField::TangentialNodal(v) => write!(f, "Nodal({} coefficients)", v.len()),
            ScalarField::Function(_) => write!(f, "Function"),
        }
    }
}

impl Serialize for ScalarField {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ScalarField::Zero => s.serialize_f64(0.0),
            ScalarField::Constant(c) => s.serialize_f64(*c),
            ScalarField::Expr(e) => s.serialize_str(e.source()),
            ScalarField::Nodal(v) | ScalarField::TangentialNodal(v) => v.as_slice().serialize(s),
            ScalarField::Function(_) => s.serialize_str("<function>"),
        }
    }
}

impl<'de> Deserialize<'de> for ScalarField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let e = Expr::deserialize(d)?;
        Ok(ScalarField::Expr(e))
    }
}

impl ScalarField {
    pub fn is_zero(&self) -> bool {
        match self {
            ScalarField::Zero => true,
            ScalarField::Constant(c) => *c == 0.0,
            ScalarField::Nodal(v) | ScalarField::TangentialNodal(v) => v.iter().all(|&x| x == 0.0),
            _ => false,
        }
    }

    /// Closed-form jet, unavailable for nodal fields.
    fn jet(&self, y: [f64; 2]) -> Option<Jet2> {
        match self {
            ScalarField::Zero => Some(Jet2::constant(0.0)),
            ScalarField::Constant(c) => Some(Jet2::constant(*c)),
            ScalarField::Expr(e) => Some(ScalarFunction::jet(e, y)),
            ScalarField::Nodal(_) | ScalarField::TangentialNodal(_) => None,
            ScalarField::Function(f) => Some(f.jet(y)),
        }
    }

    fn check_x3(&self) -> Result<()> {
        if let ScalarField::Expr(e) = self {
            if e.depends_on_x3() {
                return Err(PlateError::InvalidArgument(format!(
                    "mid-surface field `{e}` must not depend on x3"
                )));
            }
        }
        Ok(())
    }

    /// Values at every quadrature point.
    pub fn tabulate(&self, space: &FieldSpace) -> Result<Vec<Vec<f64>>> {
        self.check_x3()?;
        let nodal = match self {
            ScalarField::Nodal(v) => Some((v, &space.transverse)),
            ScalarField::TangentialNodal(v) => Some((v, &space.tangential)),
            _ => None,
        };
        if let Some((v, sp)) = nodal {
            if v.len() != sp.ndof {
                return Err(PlateError::InvalidArgument(format!(
                    "nodal load has {} coefficients, space has {}",
                    v.len(),
                    sp.ndof
                )));
            }
            return Ok(sp
                .elements
                .iter()
                .map(|c| {
                    let l = c.gather(v);
                    (0..c.num_points()).map(|q| c.eval(q, &l).v).collect()
                })
                .collect());
        }
        Ok(space
            .transverse
            .elements
            .iter()
            .map(|c| c.points.iter().map(|&y| self.jet(y).map(|j| j.v).unwrap_or(0.0)).collect())
            .collect())
    }
}

/// How the moment load integrates through the thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentIntegrand {
    /// `int x3 f_alpha dx3`.
    #[default]
    BodyForce,
    /// `int x3 g_alpha dx3` with `g` extended affinely between the faces.
    SurfaceTraction,
}

fn default_x3_points() -> usize {
    8
}

/// Applied forces, either already reduced to the mid-surface or given in the plate volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadSpec {
    Reduced {
        #[serde(default)]
        p: [ScalarField; 3],
        #[serde(default)]
        q: [ScalarField; 2],
    },
    Volumetric {
        /// Body force densities as closed forms in `(y1, y2, x3)`.
        f: [Expr; 3],
        #[serde(default)]
        g_top: [ScalarField; 3],
        #[serde(default)]
        g_bottom: [ScalarField; 3],
        #[serde(default)]
        moment_integrand: MomentIntegrand,
        /// Gauss points across the thickness; exact for polynomials of degree `2n - 1` in x3.
        #[serde(default = "default_x3_points")]
        x3_points: usize,
    },
}

impl Default for LoadSpec {
    fn default() -> Self {
        LoadSpec::zero()
    }
}

impl LoadSpec {
    pub fn zero() -> Self {
        LoadSpec::Reduced { p: Default::default(), q: Default::default() }
    }

    pub fn reduced(p: [ScalarField; 3], q: [ScalarField; 2]) -> Self {
        LoadSpec::Reduced { p, q }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, LoadSpec::Reduced { p, q } if p.iter().all(ScalarField::is_zero) && q.iter().all(ScalarField::is_zero))
    }

    /// Reduced loads; volumetric data is integrated through the thickness first.
    pub fn to_reduced(&self, params: &MaterialParams) -> Result<([ScalarField; 3], [ScalarField; 2])> {
        match self {
            LoadSpec::Reduced { p, q } => Ok((p.clone(), q.clone())),
            v => match reduce_loads(v, params)? {
                LoadSpec::Reduced { p, q } => Ok((p, q)),
                _ => unreachable!(),
            },
        }
    }
}

struct ThroughThickness {
    f: Expr,
    moment: bool,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    top: ScalarField,
    bottom: ScalarField,
    top_coeff: f64,
    bottom_coeff: f64,
}

impl ScalarFunction for ThroughThickness {
    fn jet(&self, y: [f64; 2]) -> Jet2 {
        let mut out = Jet2::constant(0.0);
        for (&x3, &w) in self.nodes.iter().zip(&self.weights) {
            let m = if self.moment { x3 } else { 1.0 };
            out = out + self.f.jet(y, x3) * (w * m);
        }
        let t = self.top.jet(y).unwrap_or_default();
        let b = self.bottom.jet(y).unwrap_or_default();
        out + t * self.top_coeff + b * self.bottom_coeff
    }
}

/// Reduces volumetric loads to `p_i` and `q_alpha` on the mid-surface.
pub fn reduce_loads(spec: &LoadSpec, params: &MaterialParams) -> Result<LoadSpec> {
    params.validate()?;
    let LoadSpec::Volumetric { f, g_top, g_bottom, moment_integrand, x3_points } = spec else {
        return Err(PlateError::InvalidArgument("loads are already reduced".into()));
    };
    if *x3_points == 0 {
        return Err(PlateError::InvalidArgument("x3_points must be positive".into()));
    }
    for g in g_top.iter().chain(g_bottom) {
        g.check_x3()?;
        if matches!(g, ScalarField::Nodal(_) | ScalarField::TangentialNodal(_)) {
            return Err(PlateError::InvalidArgument("face tractions must be closed-form fields".into()));
        }
    }
    let eps = params.epsilon;
    let rule = GaussRule::new(*x3_points);
    let nodes: Vec<f64> = rule.points.iter().map(|t| -eps + 2.0 * eps * t).collect();
    let weights: Vec<f64> = rule.weights.iter().map(|w| 2.0 * eps * w).collect();
    let make = |c: usize, moment: bool, tc: f64, bc: f64| -> ScalarField {
        ScalarField::Function(Arc::new(ThroughThickness {
            f: f[c].clone(),
            moment,
            nodes: nodes.clone(),
            weights: weights.clone(),
            top: g_top[c].clone(),
            bottom: g_bottom[c].clone(),
            top_coeff: tc,
            bottom_coeff: bc,
        }))
    };
    let face = match moment_integrand {
        MomentIntegrand::BodyForce => eps,
        MomentIntegrand::SurfaceTraction => eps + eps * eps / 3.0,
    };
    let p = [0, 1, 2].map(|c| make(c, false, 1.0, 1.0));
    let q = [0, 1].map(|c| make(c, true, face, -face));
    Ok(LoadSpec::Reduced { p, q })
}

/// Reduced loads tabulated at quadrature points.
#[derive(Debug, Clone, Default)]
pub struct LoadTable {
    pub p: [Vec<Vec<f64>>; 3],
    pub q: [Vec<Vec<f64>>; 2],
    pub zero: bool,
}

impl LoadTable {
    pub fn new(space: &FieldSpace, loads: &LoadSpec, params: &MaterialParams) -> Result<Self> {
        let (p, q) = loads.to_reduced(params)?;
        let zero = p.iter().all(ScalarField::is_zero) && q.iter().all(ScalarField::is_zero);
        Ok(LoadTable {
            p: [p[0].tabulate(space)?, p[1].tabulate(space)?, p[2].tabulate(space)?],
            q: [q[0].tabulate(space)?, q[1].tabulate(space)?],
            zero,
        })
    }

    pub fn zeros(space: &FieldSpace) -> Self {
        let z: Vec<Vec<f64>> = space.transverse.elements.iter().map(|c| vec![0.0; c.num_points()]).collect();
        LoadTable { p: [z.clone(), z.clone(), z.clone()], q: [z.clone(), z], zero: true }
    }

    /// `int p_i u_i - q_alpha d_alpha u_3`.
    pub fn work(&self, space: &FieldSpace, u: &DisplacementField) -> f64 {
        (0..space.mesh.elements.len())
            .map(|e| {
                let w = &space.transverse.elements[e].weights;
                point_values(space, u, e)
                    .iter()
                    .enumerate()
                    .map(|(k, pv)| {
                        w[k] * (self.p[0][e][k] * pv[0].v + self.p[1][e][k] * pv[1].v + self.p[2][e][k] * pv[2].v
                            - self.q[0][e][k] * pv[2].g[0]
                            - self.q[1][e][k] * pv[2].g[1])
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Squared L2 norms `(||(p_alpha)||^2, ||p_3||^2, ||(q_alpha)||^2)`.
    pub fn norms_sq(&self, space: &FieldSpace) -> (f64, f64, f64) {
        let sq = |f: &Vec<Vec<f64>>| -> f64 {
            f.iter()
                .enumerate()
                .map(|(e, v)| v.iter().zip(&space.transverse.elements[e].weights).map(|(x, w)| w * x * x).sum::<f64>())
                .sum()
        };
        (sq(&self.p[0]) + sq(&self.p[1]), sq(&self.p[2]), sq(&self.q[0]) + sq(&self.q[1]))
    }
}

/// `L(u)` for reduced loads.
pub fn load_work(space: &FieldSpace, u: &DisplacementField, loads: &LoadSpec, params: &MaterialParams) -> Result<f64> {
    Ok(LoadTable::new(space, loads, params)?.work(space, u))
}

/// Coefficients in front of `||E||^2` and `||F||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub membrane: f64,
    pub bending: f64,
}

impl EnergyWeights {
    pub fn plate(params: &MaterialParams) -> Self {
        EnergyWeights { membrane: params.epsilon / 2.0, bending: params.epsilon.powi(3) / 6.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub membrane: f64,
    pub bending: f64,
    pub load_work: f64,
    pub total: f64,
}

/// The discrete energy on an admissible space, in reduced coordinates.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub adm: AdmissibleSpace,
    pub layout: Layout,
    pub params: MaterialParams,
    pub weights: EnergyWeights,
    pub loads: LoadTable,
}

impl EnergyModel {
    pub fn new(adm: AdmissibleSpace, params: MaterialParams, loads: &LoadSpec) -> Result<Self> {
        params.validate()?;
        let table = LoadTable::new(&adm.space, loads, &params)?;
        let layout = adm.full_layout();
        Ok(EnergyModel { adm, layout, params, weights: EnergyWeights::plate(&params), loads: table })
    }

    /// Same space with custom weights and no loads.
    pub fn with_weights(adm: AdmissibleSpace, params: MaterialParams, weights: EnergyWeights) -> Result<Self> {
        params.validate()?;
        let loads = LoadTable::zeros(&adm.space);
        let layout = adm.full_layout();
        Ok(EnergyModel { adm, layout, params, weights, loads })
    }

    pub fn space(&self) -> &FieldSpace {
        &self.adm.space
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    fn element(&self, u: &DisplacementField, e: usize, want_grad: bool) -> ([f64; 3], [Vec<f64>; 3]) {
        let space = &self.adm.space;
        let caches = [0, 1, 2].map(|c| &space.component(c).elements[e]);
        let locals = [0, 1, 2].map(|c| caches[c].gather(&u.u[c]));
        let mut grads = [0, 1, 2].map(|c| if want_grad { vec![0.0; caches[c].dofs.len()] } else { vec![] });
        let mut acc = [0.0; 3];
        let (wm, wb) = (self.weights.membrane, self.weights.bending);
        let pr = &self.params;
        for q in 0..caches[2].num_points() {
            let w = caches[2].weights[q];
            let pv = [0, 1, 2].map(|c| caches[c].eval(q, &locals[c]));
            let em = membrane_at(&pv[0], &pv[1], &pv[2]);
            let f = pv[2].h;
            let p = [self.loads.p[0][e][q], self.loads.p[1][e][q], self.loads.p[2][e][q]];
            let ql = [self.loads.q[0][e][q], self.loads.q[1][e][q]];
            acc[0] += w * wm * pr.contract(&em, &em);
            acc[1] += w * wb * pr.contract(&f, &f);
            acc[2] += w * (p[0] * pv[0].v + p[1] * pv[1].v + p[2] * pv[2].v - ql[0] * pv[2].g[0] - ql[1] * pv[2].g[1]);
            if !want_grad {
                continue;
            }
            let n = pr.apply(&em).map(|x| 2.0 * wm * w * x);
            let m = pr.apply(&f).map(|x| 2.0 * wb * w * x);
            let d3 = pv[2].g;
            let nd = [n[0] * d3[0] + n[1] * d3[1], n[1] * d3[0] + n[2] * d3[1]];
            for c in 0..2 {
                let nb = caches[c].dofs.len();
                for l in 0..nb {
                    let k = q * nb + l;
                    let g = caches[c].grad[k];
                    let phi = caches[c].phi[k];
                    grads[c][l] += if c == 0 { n[0] * g[0] + n[1] * g[1] } else { n[1] * g[0] + n[2] * g[1] } - w * p[c] * phi;
                }
            }
            let nb = caches[2].dofs.len();
            for l in 0..nb {
                let k = q * nb + l;
                let g = caches[2].grad[k];
                let h = caches[2].hess[k];
                grads[2][l] += nd[0] * g[0] + nd[1] * g[1] + m[0] * h[0] + 2.0 * m[1] * h[1] + m[2] * h[2]
                    - w * (p[2] * caches[2].phi[k] - ql[0] * g[0] - ql[1] * g[1]);
            }
        }
        (acc, grads)
    }

    fn run(&self, u: &DisplacementField, want_grad: bool) -> (EnergyBreakdown, Option<[DVector<f64>; 3]>) {
        let space = &self.adm.space;
        let parts: Vec<([f64; 3], [Vec<f64>; 3])> = (0..space.mesh.elements.len())
            .into_par_iter()
            .map(|e| self.element(u, e, want_grad))
            .collect();
        let mut acc = [0.0; 3];
        let mut grads = [0, 1, 2].map(|c| DVector::zeros(if want_grad { space.component(c).ndof } else { 0 }));
        for (e, (a, g)) in parts.iter().enumerate() {
            for k in 0..3 {
                acc[k] += a[k];
            }
            if want_grad {
                for c in 0..3 {
                    for (l, &d) in space.component(c).elements[e].dofs.iter().enumerate() {
                        grads[c][d] += g[c][l];
                    }
                }
            }
        }
        let b = EnergyBreakdown { membrane: acc[0], bending: acc[1], load_work: acc[2], total: acc[0] + acc[1] - acc[2] };
        (b, want_grad.then_some(grads))
    }

    pub fn energy(&self, u: &DisplacementField) -> EnergyBreakdown {
        self.run(u, false).0
    }

    /// Energy and the gradient with respect to full coefficient vectors.
    pub fn energy_and_full_gradient(&self, u: &DisplacementField) -> (EnergyBreakdown, [DVector<f64>; 3]) {
        let (b, g) = self.run(u, true);
        (b, g.unwrap())
    }

    /// Total energy and its gradient in reduced coordinates.
    pub fn value_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let u = self.layout.expand(z);
        let (b, g) = self.energy_and_full_gradient(&u);
        (b.total, self.layout.restrict(&g))
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        self.energy(&self.layout.expand(z)).total
    }
}

/// `J(u)` for an admissible field.
pub fn total_energy(
    adm: &AdmissibleSpace,
    u: &DisplacementField,
    loads: &LoadSpec,
    params: &MaterialParams,
) -> Result<EnergyBreakdown> {
    Ok(EnergyModel::new(adm.clone(), *params, loads)?.energy(u))
}

/// Gradient of `J` over the free coordinates of `adm`.
pub fn energy_gradient(
    adm: &AdmissibleSpace,
    u: &DisplacementField,
    loads: &LoadSpec,
    params: &MaterialParams,
) -> Result<DVector<f64>> {
    let model = EnergyModel::new(adm.clone(), *params, loads)?;
    let (_, g) = model.energy_and_full_gradient(u);
    Ok(model.layout.restrict(&g))
}
