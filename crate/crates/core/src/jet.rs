//! Second-order forward-mode jets in two variables.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Value, gradient and Hessian `(h11, h12, h22)` of a scalar function of `(y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet2 {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [f64; 3],
}

impl Jet2 {
    pub const fn constant(v: f64) -> Self {
        Jet2 { v, g: [0.0; 2], h: [0.0; 3] }
    }

    /// The coordinate function `y_k` (k = 0 or 1) evaluated at `value`.
    pub fn variable(k: usize, value: f64) -> Self {
        let mut g = [0.0; 2];
        g[k] = 1.0;
        Jet2 { v: value, g, h: [0.0; 3] }
    }

    /// Coordinates `(y1, y2)` as jets.
    pub fn coords(y: [f64; 2]) -> [Jet2; 2] {
        [Jet2::variable(0, y[0]), Jet2::variable(1, y[1])]
    }

    /// Composes a scalar function with known derivatives `f, f', f''`.
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        let [g1, g2] = self.g;
        Jet2 {
            v: f,
            g: [df * g1, df * g2],
            h: [
                df * self.h[0] + ddf * g1 * g1,
                df * self.h[1] + ddf * g1 * g2,
                df * self.h[2] + ddf * g2 * g2,
            ],
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        let x = self.v;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn powi(self, n: i32) -> Self {
        let x = self.v;
        let nf = n as f64;
        let d1 = if n == 0 { 0.0 } else { nf * x.powi(n - 1) };
        let d2 = if n == 0 || n == 1 { 0.0 } else { nf * (nf - 1.0) * x.powi(n - 2) };
        self.chain(x.powi(n), d1, d2)
    }

    pub fn powf(self, p: f64) -> Self {
        let x = self.v;
        self.chain(x.powf(p), p * x.powf(p - 1.0), p * (p - 1.0) * x.powf(p - 2.0))
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    fn add(self, o: Jet2) -> Jet2 {
        Jet2 {
            v: self.v + o.v,
            g: [self.g[0] + o.g[0], self.g[1] + o.g[1]],
            h: [self.h[0] + o.h[0], self.h[1] + o.h[1], self.h[2] + o.h[2]],
        }
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, o: Jet2) -> Jet2 {
        self + (-o)
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        Jet2 {
            v: -self.v,
            g: [-self.g[0], -self.g[1]],
            h: [-self.h[0], -self.h[1], -self.h[2]],
        }
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, o: Jet2) -> Jet2 {
        let (a, b) = (self, o);
        Jet2 {
            v: a.v * b.v,
            g: [a.g[0] * b.v + a.v * b.g[0], a.g[1] * b.v + a.v * b.g[1]],
            h: [
                a.h[0] * b.v + 2.0 * a.g[0] * b.g[0] + a.v * b.h[0],
                a.h[1] * b.v + a.g[0] * b.g[1] + a.g[1] * b.g[0] + a.v * b.h[1],
                a.h[2] * b.v + 2.0 * a.g[1] * b.g[1] + a.v * b.h[2],
            ],
        }
    }
}

impl Div for Jet2 {
    type Output = Jet2;
    fn div(self, o: Jet2) -> Jet2 {
        let x = o.v;
        self * o.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }
}

impl Add<f64> for Jet2 {
    type Output = Jet2;
    fn add(mut self, c: f64) -> Jet2 {
        self.v += c;
        self
    }
}

impl Sub<f64> for Jet2 {
    type Output = Jet2;
    fn sub(mut self, c: f64) -> Jet2 {
        self.v -= c;
        self
    }
}

impl Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, c: f64) -> Jet2 {
        Jet2 {
            v: self.v * c,
            g: [self.g[0] * c, self.g[1] * c],
            h: [self.h[0] * c, self.h[1] * c, self.h[2] * c],
        }
    }
}

impl Mul<Jet2> for f64 {
    type Output = Jet2;
    fn mul(self, j: Jet2) -> Jet2 {
        j * self
    }
}

/// A scalar field on the mid-surface with value, gradient and Hessian.
pub trait ScalarFunction: Send + Sync {
    fn jet(&self, y: [f64; 2]) -> Jet2;

    fn value(&self, y: [f64; 2]) -> f64 {
        self.jet(y).v
    }
}

/// Wraps a closure written over jets, e.g. `JetFn(|y1, y2| (y1 * y2).sin())`.
pub struct JetFn<F>(pub F);

impl<F> ScalarFunction for JetFn<F>
where
    F: Fn(Jet2, Jet2) -> Jet2 + Send + Sync,
{
    fn jet(&self, y: [f64; 2]) -> Jet2 {
        let [a, b] = Jet2::coords(y);
        (self.0)(a, b)
    }
}
