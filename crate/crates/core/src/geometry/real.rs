use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar the polygon routines are generic over: plain `f64`, or a dual
/// number carrying a forward-mode tangent. Branches compare real parts only.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// `re + Σ eps_i · ε_i` with `ε_i ε_j = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(re: f64, i: usize) -> Self {
        let mut eps = [0.0; N];
        eps[i] = 1.0;
        Self { re, eps }
    }

    fn zip(self, o: Self, f: impl Fn(f64, f64) -> f64) -> [f64; N] {
        std::array::from_fn(|i| f(self.eps[i], o.eps[i]))
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            re: self.re + o.re,
            eps: self.zip(o, |a, b| a + b),
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            re: self.re - o.re,
            eps: self.zip(o, |a, b| a - b),
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    // product rule
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re * o.re,
            eps: self.zip(o, |a, b| a * o.re + self.re * b),
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let q = self.re * inv;
        Self {
            re: q,
            eps: self.zip(o, |a, b| (a - q * b) * inv),
        }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            re: -self.re,
            eps: self.eps.map(|e| -e),
        }
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self {
            re: v,
            eps: [0.0; N],
        }
    }
    fn re(self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        let c = self.re.cos();
        Self {
            re: self.re.sin(),
            eps: self.eps.map(|e| e * c),
        }
    }
    fn cos(self) -> Self {
        let s = -self.re.sin();
        Self {
            re: self.re.cos(),
            eps: self.eps.map(|e| e * s),
        }
    }
}
