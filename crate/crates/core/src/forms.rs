//! Quadratic forms assembled directly in reduced coordinates.

use nalgebra::DMatrix;
use nalgebra_sparse::CscMatrix;
use rayon::prelude::*;

use crate::linalg::from_triplets;
use crate::space::{AdmissibleSpace, Layout};

/// Derivative picked out of a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    V,
    D1,
    D2,
    D11,
    D12,
    D22,
}

/// One squared term `weight * (sum_k coeff_k D_k u_{c_k})^2` of a form density.
#[derive(Debug, Clone)]
pub struct Term {
    pub weight: f64,
    pub parts: Vec<(usize, Deriv, f64)>,
}

fn term(weight: f64, parts: &[(usize, Deriv, f64)]) -> Term {
    Term { weight, parts: parts.to_vec() }
}

/// `sum_{alpha beta} |d_alpha u_beta + d_beta u_alpha|^2` on the tangential components.
pub fn symmetric_gradient() -> Vec<Term> {
    vec![
        term(1.0, &[(0, Deriv::D1, 2.0)]),
        term(1.0, &[(1, Deriv::D2, 2.0)]),
        term(2.0, &[(0, Deriv::D2, 1.0), (1, Deriv::D1, 1.0)]),
    ]
}

pub fn h1_gram(comps: &[usize]) -> Vec<Term> {
    comps
        .iter()
        .flat_map(|&c| [term(1.0, &[(c, Deriv::V, 1.0)]), term(1.0, &[(c, Deriv::D1, 1.0)]), term(1.0, &[(c, Deriv::D2, 1.0)])])
        .collect()
}

/// `sum_{alpha beta} |d_{alpha beta} u|^2`.
pub fn hessian_seminorm(comps: &[usize]) -> Vec<Term> {
    comps
        .iter()
        .flat_map(|&c| [term(1.0, &[(c, Deriv::D11, 1.0)]), term(2.0, &[(c, Deriv::D12, 1.0)]), term(1.0, &[(c, Deriv::D22, 1.0)])])
        .collect()
}

pub fn h2_gram(comps: &[usize]) -> Vec<Term> {
    let mut t = h1_gram(comps);
    t.extend(hessian_seminorm(comps));
    t
}

pub fn laplace(comps: &[usize]) -> Vec<Term> {
    comps
        .iter()
        .flat_map(|&c| [term(1.0, &[(c, Deriv::D1, 1.0)]), term(1.0, &[(c, Deriv::D2, 1.0)])])
        .collect()
}

pub fn mass(comps: &[usize]) -> Vec<Term> {
    comps.iter().map(|&c| term(1.0, &[(c, Deriv::V, 1.0)])).collect()
}

/// `H1 x H1 x H2` norm used to normalize displacement fields.
pub fn displacement_gram() -> Vec<Term> {
    let mut t = h1_gram(&[0, 1]);
    t.extend(h2_gram(&[2]));
    t
}

/// `weight * a(e(u), e(u))` with `e(u)` the symmetric gradient of the tangential components and
/// `a(s, t) = trace_coeff tr s tr t + 4 mu s:t`.
pub fn linear_membrane(weight: f64, trace_coeff: f64, mu: f64) -> Vec<Term> {
    vec![
        term(weight * trace_coeff, &[(0, Deriv::D1, 1.0), (1, Deriv::D2, 1.0)]),
        term(weight * 4.0 * mu, &[(0, Deriv::D1, 1.0)]),
        term(weight * 4.0 * mu, &[(1, Deriv::D2, 1.0)]),
        term(weight * 2.0 * mu, &[(0, Deriv::D2, 1.0), (1, Deriv::D1, 1.0)]),
    ]
}

/// `weight * a(F(u), F(u))` with `F(u)` the Hessian of the transverse component.
pub fn bending(weight: f64, trace_coeff: f64, mu: f64) -> Vec<Term> {
    vec![
        term(weight * trace_coeff, &[(2, Deriv::D11, 1.0), (2, Deriv::D22, 1.0)]),
        term(weight * 4.0 * mu, &[(2, Deriv::D11, 1.0)]),
        term(weight * 8.0 * mu, &[(2, Deriv::D12, 1.0)]),
        term(weight * 4.0 * mu, &[(2, Deriv::D22, 1.0)]),
    ]
}

/// Per-element map from local full dofs to local reduced dofs.
pub(crate) struct LocalMap {
    /// Reduced global indices.
    pub reduced: Vec<usize>,
    /// `local_full x local_reduced`.
    pub t: DMatrix<f64>,
    /// Start of each layout component inside the local full vector.
    pub comp_offset: [usize; 3],
}

pub(crate) fn local_map(adm: &AdmissibleSpace, layout: &Layout, e: usize) -> LocalMap {
    let el = adm.space.mesh.elements[e];
    let mut nfull = 0;
    let mut comp_offset = [usize::MAX; 3];
    for &c in &layout.comps {
        comp_offset[c] = nfull;
        nfull += 4 * layout.dofs_per_node(c);
    }
    let mut reduced = vec![];
    let mut cols: Vec<(usize, usize, f64)> = vec![];
    for &c in &layout.comps {
        let dpn = layout.dofs_per_node(c);
        for (a, &node) in el.iter().enumerate() {
            let (off, b) = layout.block(c, node);
            for j in 0..b.ncols() {
                let col = reduced.len();
                reduced.push(off + j);
                for i in 0..dpn {
                    if b[(i, j)] != 0.0 {
                        cols.push((comp_offset[c] + a * dpn + i, col, b[(i, j)]));
                    }
                }
            }
        }
    }
    let mut t = DMatrix::zeros(nfull, reduced.len());
    for (i, j, v) in cols {
        t[(i, j)] = v;
    }
    LocalMap { reduced, t, comp_offset }
}

fn pick(d: Deriv, phi: f64, g: [f64; 2], h: [f64; 3]) -> f64 {
    match d {
        Deriv::V => phi,
        Deriv::D1 => g[0],
        Deriv::D2 => g[1],
        Deriv::D11 => h[0],
        Deriv::D12 => h[1],
        Deriv::D22 => h[2],
    }
}

/// Gauss-Newton part of `weight * a(E(u), E(u))` at a point where `grad u_3 = g`:
/// the squared linearization of the nonlinear membrane strain.
pub fn membrane_linearized(weight: f64, trace_coeff: f64, mu: f64, g: [f64; 2]) -> Vec<Term> {
    use Deriv::*;
    vec![
        term(weight * trace_coeff, &[(0, D1, 1.0), (2, D1, g[0]), (1, D2, 1.0), (2, D2, g[1])]),
        term(weight * 4.0 * mu, &[(0, D1, 1.0), (2, D1, g[0])]),
        term(weight * 4.0 * mu, &[(1, D2, 1.0), (2, D2, g[1])]),
        term(weight * 2.0 * mu, &[(0, D2, 1.0), (1, D1, 1.0), (2, D2, g[0]), (2, D1, g[1])]),
    ]
}

/// Assembles `sum_terms weight * int (L u)(L v)` over the layout's reduced coordinates.
pub fn assemble(adm: &AdmissibleSpace, layout: &Layout, terms: &[Term]) -> CscMatrix<f64> {
    assemble_varying(adm, layout, |_, _| terms.to_vec())
}

/// Like [`assemble`], with the terms chosen per element `e` and quadrature point `q`.
pub fn assemble_varying(
    adm: &AdmissibleSpace,
    layout: &Layout,
    terms_at: impl Fn(usize, usize) -> Vec<Term> + Sync,
) -> CscMatrix<f64> {
    let ne = adm.space.mesh.elements.len();
    let locals: Vec<(Vec<usize>, DMatrix<f64>)> = (0..ne)
        .into_par_iter()
        .map(|e| {
            let lm = local_map(adm, layout, e);
            let nfull = lm.t.nrows();
            let nq = adm.space.transverse.elements[e].num_points();
            let mut k = DMatrix::zeros(nfull, nfull);
            let mut row = vec![0.0; nfull];
            for q in 0..nq {
                for t in &terms_at(e, q) {
                    row.iter_mut().for_each(|r| *r = 0.0);
                    let mut w = 0.0;
                    for &(c, d, coeff) in &t.parts {
                        let cache = &adm.space.component(c).elements[e];
                        let nb = cache.dofs.len();
                        w = cache.weights[q];
                        for l in 0..nb {
                            let idx = q * nb + l;
                            row[lm.comp_offset[c] + l] += coeff * pick(d, cache.phi[idx], cache.grad[idx], cache.hess[idx]);
                        }
                    }
                    let s = t.weight * w;
                    for i in 0..nfull {
                        if row[i] == 0.0 {
                            continue;
                        }
                        let ri = s * row[i];
                        for j in 0..nfull {
                            k[(i, j)] += ri * row[j];
                        }
                    }
                }
            }
            let kr = lm.t.transpose() * k * &lm.t;
            (lm.reduced, kr)
        })
        .collect();
    let mut rows = vec![];
    let mut cols = vec![];
    let mut vals = vec![];
    for (idx, k) in locals {
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                rows.push(i);
                cols.push(j);
                vals.push(k[(a, b)]);
            }
        }
    }
    from_triplets(layout.len(), &rows, &cols, &vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{Jet2, JetFn};
    use crate::linalg::quad_form;
    use crate::mesh::{Mesh, PlanarDomain};
    use crate::space::{BoundaryConditionSet, FieldSpace};
    use std::sync::Arc;

    #[test]
    fn forms_of_closed_form_fields() {
        let m = Arc::new(Mesh::build(&PlanarDomain::unit_square(), 3, 3).unwrap());
        let fs = FieldSpace::new(m);
        let adm = AdmissibleSpace::new(fs.clone(), &BoundaryConditionSet::free()).unwrap();
        let lay = adm.full_layout();
        // u1 = y1 y2, u2 = y1^2, u3 = y1^2 y2
        let u = fs.interpolate(
            &JetFn(|a: Jet2, b: Jet2| a * b),
            &JetFn(|a: Jet2, _b: Jet2| a * a),
            &JetFn(|a: Jet2, b: Jet2| a * a * b),
        );
        let z = lay.project(&u);
        // sym grad: (2 y2)^2 + 0 + 2 (2 y1 + y1)^2 -> 4/3 + 2 * 9/3 = 22/3
        let sg = assemble(&adm, &lay, &symmetric_gradient());
        assert!((quad_form(&sg, &z) - 22.0 / 3.0).abs() < 1e-12);
        // Hessian seminorm of u3: (2 y2)^2 + 2 (2 y1)^2 = 4/3 + 8/3
        let hs = assemble(&adm, &lay, &hessian_seminorm(&[2]));
        assert!((quad_form(&hs, &z) - 4.0).abs() < 1e-12);
        // H1 gram of u2: 1/5 + 4/3
        let h1 = assemble(&adm, &lay, &h1_gram(&[1]));
        assert!((quad_form(&h1, &z) - (0.2 + 4.0 / 3.0)).abs() < 1e-12);
    }
}
