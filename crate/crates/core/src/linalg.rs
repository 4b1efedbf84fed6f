//! Sparse factorization and symmetric generalized eigenpairs `A x = lambda M x`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PlateError, Result};

/// Problems at most this large are solved densely.
pub const DENSE_LIMIT: usize = 400;

pub fn from_triplets(n: usize, rows: &[usize], cols: &[usize], vals: &[f64]) -> CscMatrix<f64> {
    let mut coo = CooMatrix::new(n, n);
    for k in 0..vals.len() {
        coo.push(rows[k], cols[k], vals[k]);
    }
    CscMatrix::from(&coo)
}

pub fn to_dense(a: &CscMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

pub fn factor(a: &CscMatrix<f64>) -> Result<CscCholesky<f64>> {
    CscCholesky::factor(a).map_err(|e| PlateError::Factorization(format!("{e:?}")))
}

/// `x^T A x`.
pub fn quad_form(a: &CscMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Smallest generalized eigenpairs, ascending. Columns of `vectors` are M-orthonormal.
#[derive(Debug, Clone)]
pub struct GenEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// Estimate of the largest eigenvalue, used as the scale for kernel tests.
    pub lambda_max: f64,
    pub iterations: usize,
}

impl GenEigen {
    /// Number of eigenvalues below `tau * lambda_max`.
    pub fn kernel_dim(&self, tau: f64) -> usize {
        self.values.iter().filter(|&&v| v < tau * self.lambda_max).count()
    }

    pub fn kernel_basis(&self, tau: f64) -> DMatrix<f64> {
        let k = self.kernel_dim(tau);
        self.vectors.columns(0, k).into_owned()
    }

    /// Smallest eigenvalue above the kernel threshold.
    pub fn smallest_nonzero(&self, tau: f64) -> Option<f64> {
        self.values.iter().copied().find(|&v| v >= tau * self.lambda_max)
    }
}

/// Dense symmetric-definite eigenproblem, all pairs ascending.
pub fn dense_generalized(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((vec![], DMatrix::zeros(0, 0)));
    }
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| PlateError::Factorization("mass form is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| PlateError::Factorization("singular Cholesky factor".into()))?;
    let mut c = &linv * a * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lt_inv = linv.transpose();
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &(&lt_inv * eig.eigenvectors.column(i)));
    }
    Ok((values, vecs))
}

/// Makes the columns of `y` M-orthonormal. Returns `None` if they are dependent.
fn m_orthonormalize(y: &DMatrix<f64>, my: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut g = y.transpose() * my;
    g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || eig.eigenvalues.min() < 1e-14 * max {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Some(y * (&eig.eigenvectors * d))
}

/// Estimates the largest eigenvalue of `A x = lambda M x` by power iteration.
fn largest_eigenvalue(a: &CscMatrix<f64>, mchol: &CscCholesky<f64>, m: &CscMatrix<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = a.nrows();
    let mut x = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
    let mut lam = 0.0;
    for _ in 0..60 {
        let ax = a * &x;
        let y = mchol.solve(&ax).column(0).into_owned();
        let nrm = quad_form(m, &y).sqrt();
        if !(nrm > 0.0) {
            break;
        }
        x = y / nrm;
        let new = quad_form(a, &x);
        if (new - lam).abs() < 1e-6 * new.abs() {
            lam = new;
            break;
        }
        lam = new;
    }
    lam
}

/// Orthonormalizes the columns of `y` in the M-inner product, dropping directions
/// whose Gram eigenvalue falls below `rel` times the largest.
fn m_orthonormalize_rank(y: &DMatrix<f64>, my: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let mut g = y.transpose() * my;
    g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let max = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| max > 0.0 && eig.eigenvalues[i] > rel * max).collect();
    let mut out = DMatrix::zeros(y.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &(y * eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
    }
    out
}

/// The `k` smallest generalized eigenpairs of symmetric `A >= 0` against SPD `M`.
///
/// Small problems go through a dense solve. Larger ones use a restarted block
/// Krylov method on `(A + s M)^{-1} M` with full reorthogonalization and
/// Rayleigh-Ritz on `A`. Convergence is required for the pairs below
/// `1e-6 * lambda_max` and the first pair above; later values are Ritz upper bounds.
pub fn smallest_eigenpairs(a: &CscMatrix<f64>, m: &CscMatrix<f64>, k: usize, seed: u64) -> Result<GenEigen> {
    // Symmetric Jacobi scaling by diag(M) leaves the eigenvalues unchanged.
    let d: Vec<f64> = m.diagonal_as_csc().values().to_vec();
    if d.len() != m.nrows() || d.iter().any(|&v| !(v > 0.0)) {
        return Err(PlateError::Factorization("mass form has a nonpositive diagonal".into()));
    }
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scale = |x: &CscMatrix<f64>| {
        let mut y = x.clone();
        let (offsets, rows, vals) = y.csc_data_mut();
        for c in 0..offsets.len() - 1 {
            for i in offsets[c]..offsets[c + 1] {
                vals[i] *= s[rows[i]] * s[c];
            }
        }
        y
    };
    let mut out = scaled_eigenpairs(&scale(a), &scale(m), k, seed)?;
    for (i, mut row) in out.vectors.row_iter_mut().enumerate() {
        row *= s[i];
    }
    Ok(out)
}

fn scaled_eigenpairs(a: &CscMatrix<f64>, m: &CscMatrix<f64>, k: usize, seed: u64) -> Result<GenEigen> {
    let n = a.nrows();
    if n <= DENSE_LIMIT {
        let (vals, vecs) = dense_generalized(&to_dense(a), &to_dense(m))?;
        let k = k.min(n);
        let lambda_max = vals.last().copied().unwrap_or(0.0).max(0.0);
        return Ok(GenEigen {
            values: vals[..k].to_vec(),
            vectors: vecs.columns(0, k).into_owned(),
            lambda_max,
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mchol = factor(m)?;
    let lambda_max = largest_eigenvalue(a, &mchol, m, &mut rng);
    if !(lambda_max > 0.0) {
        return Err(PlateError::Numerical("quadratic form vanishes identically".into()));
    }
    let kchol = factor(&(a + &(m * (1e-2 * lambda_max))))?;
    let k = k.min(n);
    let p = (k + 4).max(6).min(n);
    let max_basis = 300.min(n);
    let tol = 1e-8;
    let mut start = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() - 0.5);
    let mut worst = f64::INFINITY;
    let mut blocks = 0;
    for _restart in 0..40 {
        let mut q = DMatrix::<f64>::zeros(n, max_basis);
        let mut mq = DMatrix::<f64>::zeros(n, max_basis);
        let mut aq = DMatrix::<f64>::zeros(n, max_basis);
        let mut h = DMatrix::<f64>::zeros(max_basis, max_basis);
        let mut b = 0;
        let mut block = start.clone();
        loop {
            let mut y = block;
            for _ in 0..2 {
                if b > 0 {
                    let c = mq.columns(0, b).transpose() * &y;
                    y -= q.columns(0, b) * c;
                }
            }
            let my = m * &y;
            let yo = m_orthonormalize_rank(&y, &my, 1e-20);
            let nc = yo.ncols().min(max_basis - b);
            if nc > 0 {
                let yo = yo.columns(0, nc).into_owned();
                let ay = a * &yo;
                q.columns_mut(b, nc).copy_from(&yo);
                mq.columns_mut(b, nc).copy_from(&(m * &yo));
                aq.columns_mut(b, nc).copy_from(&ay);
                let hc = q.columns(0, b + nc).transpose() * &ay;
                h.view_mut((0, b), (b + nc, nc)).copy_from(&hc);
                h.view_mut((b, 0), (nc, b + nc)).copy_from(&hc.transpose());
                b += nc;
                blocks += 1;
            }
            let invariant = nc == 0;
            let full = b >= max_basis;
            if !(invariant || full || blocks % 4 == 0) {
                block = kchol.solve(&(m * q.columns(b - nc, nc)));
                continue;
            }
            let mut hs = h.view((0, 0), (b, b)).into_owned();
            hs = (&hs + hs.transpose()) * 0.5;
            let eig = SymmetricEigen::new(hs);
            let mut order: Vec<usize> = (0..b).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            let kk = k.min(b);
            let values: Vec<f64> = order[..kk].iter().map(|&i| eig.eigenvalues[i]).collect();
            let need = (values.iter().filter(|&&v| v < 1e-6 * lambda_max).count() + 1).min(kk);
            worst = 0.0;
            let mut ritz = DMatrix::zeros(n, p.min(b));
            for (c, &i) in order.iter().take(p.min(b)).enumerate() {
                let s = eig.eigenvectors.column(i);
                let x = q.columns(0, b) * s;
                if c < need {
                    let mx = mq.columns(0, b) * s;
                    let r = aq.columns(0, b) * s - &mx * eig.eigenvalues[i];
                    // M^{-1} norm of the residual bounds the eigenvalue error.
                    let mr = mchol.solve(&r);
                    worst = worst.max(r.dot(&mr.column(0)).max(0.0).sqrt() / lambda_max);
                }
                ritz.set_column(c, &x);
            }
            // Ghost copies of converged vectors show up as a loss of M-orthonormality.
            let kx = ritz.columns(0, kk);
            let gram = kx.transpose() * (m * kx);
            worst = worst.max((gram - DMatrix::<f64>::identity(kk, kk)).amax() * 1e-2);
            if worst < tol || invariant {
                return Ok(GenEigen {
                    values,
                    vectors: ritz.columns(0, kk).into_owned(),
                    lambda_max,
                    iterations: blocks,
                });
            }
            if full {
                start = ritz;
                break;
            }
            block = kchol.solve(&(m * q.columns(b - nc, nc)));
        }
    }
    Err(PlateError::EigenFailure { iterations: blocks, residual: worst })
}

/// Largest principal-angle sine between `span(b)` and the M-orthonormal basis `k`.
pub fn subspace_sine(m: &CscMatrix<f64>, k: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if b.ncols() == 0 {
        return 0.0;
    }
    let mb = m * b;
    let Some(bo) = m_orthonormalize(b, &mb) else {
        return 1.0;
    };
    let proj = k * (k.transpose() * (m * &bo));
    let r = &bo - proj;
    let g = r.transpose() * (m * &r);
    let g = (&g + g.transpose()) * 0.5;
    SymmetricEigen::new(g).eigenvalues.max().max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D Laplacian with Dirichlet ends against the identity-like lumped mass.
    fn laplace_1d(n: usize) -> (CscMatrix<f64>, CscMatrix<f64>) {
        let mut r = vec![];
        let mut c = vec![];
        let mut v = vec![];
        for i in 0..n {
            r.push(i);
            c.push(i);
            v.push(2.0);
            if i + 1 < n {
                r.extend([i, i + 1]);
                c.extend([i + 1, i]);
                v.extend([-1.0, -1.0]);
            }
        }
        let a = from_triplets(n, &r, &c, &v);
        let m = from_triplets(n, &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>(), &vec![1.0; n]);
        (a, m)
    }

    #[test]
    fn sparse_matches_closed_form() {
        let n = 800;
        let (a, m) = laplace_1d(n);
        let e = smallest_eigenpairs(&a, &m, 4, 7).unwrap();
        for (j, v) in e.values.iter().enumerate() {
            let exact = 2.0 - 2.0 * ((j + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert!((v - exact).abs() < 1e-10 * 4.0, "{v} vs {exact}");
        }
    }

    #[test]
    fn sparse_matches_dense_with_kernel() {
        // Neumann 1D Laplacian (constant kernel) with a nonuniform mass.
        let n = 450;
        let (mut r, mut c, mut v) = (vec![], vec![], vec![]);
        for i in 0..n - 1 {
            r.extend([i, i, i + 1, i + 1]);
            c.extend([i, i + 1, i, i + 1]);
            v.extend([1.0, -1.0, -1.0, 1.0]);
        }
        let a = from_triplets(n, &r, &c, &v);
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.1).sin().abs()).collect();
        let idx: Vec<usize> = (0..n).collect();
        let m = from_triplets(n, &idx, &idx, &diag);
        let e = smallest_eigenpairs(&a, &m, 5, 3).unwrap();
        let (dv, _) = dense_generalized(&to_dense(&a), &to_dense(&m)).unwrap();
        assert_eq!(e.kernel_dim(1e-8), 1);
        for j in 0..5 {
            assert!((e.values[j] - dv[j]).abs() < 1e-9 * dv[n - 1], "{} vs {}", e.values[j], dv[j]);
        }
        let ones = DMatrix::from_element(n, 1, 1.0);
        assert!(subspace_sine(&m, &e.kernel_basis(1e-8), &ones) < 1e-8);
    }

    #[test]
    fn dense_generalized_small() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (v, x) = dense_generalized(&a, &m).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 2.0).abs() < 1e-14);
        let g = x.transpose() * &m * &x;
        assert!((g - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
