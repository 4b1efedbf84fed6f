//! Gauss–Legendre rules on the unit interval and the unit square.

use std::f64::consts::PI;

/// A one-dimensional rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// `n`-point Gauss–Legendre rule mapped to `[0, 1]`; exact for degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a Gauss rule needs at least one point");
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            // Newton iteration on P_n from the Chebyshev-like initial guess.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            points.push(0.5 * (1.0 - x));
            weights.push(0.5 * w);
        }
        GaussRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = b - a;
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(a + h * t))
            .sum::<f64>()
            * h
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product rule on `[0, 1]^2`, ordered with the first coordinate fastest.
#[derive(Debug, Clone)]
pub struct SquareRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl SquareRule {
    pub fn new(n: usize) -> Self {
        let g = GaussRule::new(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([g.points[i], g.points[j]]);
                weights.push(g.weights[i] * g.weights[j]);
            }
        }
        SquareRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for n in 1..=8 {
            let g = GaussRule::new(n);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_max_degree() {
        for n in 1..=8 {
            let g = GaussRule::new(n);
            for deg in 0..(2 * n) {
                let got = g.integrate(0.0, 1.0, |x| x.powi(deg as i32));
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((got - exact).abs() < 1e-14, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn known_two_point_nodes() {
        let g = GaussRule::new(2);
        let mut p = g.points.clone();
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let off = 0.5 / 3f64.sqrt();
        assert!((p[0] - (0.5 - off)).abs() < 1e-15);
        assert!((p[1] - (0.5 + off)).abs() < 1e-15);
    }
}
