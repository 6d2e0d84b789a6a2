//! Minimal forward-mode scalar for differentiating the refinement loss.
//!
//! The loss is evaluated generically over [`Real`]; `f64` gives the plain
//! value and [`Dual`] carries one directional derivative through the same
//! code path, so gradients match the objective by construction.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Real part (the value).
    fn re(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Value plus one directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }

    pub fn seeded(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            du: self.du + o.du,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            du: self.du - o.du,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            du: self.re * o.du + self.du * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            re: self.re / o.re,
            du: (self.du * o.re - self.re * o.du) / (o.re * o.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            du: -self.du,
        }
    }
}

impl Real for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual {
            re: r,
            du: if r > 0.0 { self.du / (2.0 * r) } else { 0.0 },
        }
    }
    fn abs(self) -> Self {
        Dual {
            re: self.re.abs(),
            du: if self.re > 0.0 {
                self.du
            } else if self.re < 0.0 {
                -self.du
            } else {
                0.0
            },
        }
    }
    fn sin(self) -> Self {
        Dual {
            re: self.re.sin(),
            du: self.du * self.re.cos(),
        }
    }
    fn cos(self) -> Self {
        Dual {
            re: self.re.cos(),
            du: -self.du * self.re.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct V3<S: Real> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> V3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    pub fn from_f64(v: &Vector3<f64>) -> Self {
        Self::new(S::from_f64(v.x), S::from_f64(v.y), S::from_f64(v.z))
    }

    pub fn scale(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }
}

impl<S: Real> Add for V3<S> {
    type Output = V3<S>;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> Sub for V3<S> {
    type Output = V3<S>;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct M3<S: Real> {
    /// Row-major entries.
    pub m: [[S; 3]; 3],
}

impl<S: Real> M3<S> {
    pub fn identity() -> Self {
        let o = S::from_f64(1.0);
        let z = S::from_f64(0.0);
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_f64(m: &Matrix3<f64>) -> Self {
        let mut out = Self::identity();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = S::from_f64(m[(r, c)]);
            }
        }
        out
    }

    pub fn mul_vec(&self, v: V3<S>) -> V3<S> {
        V3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &M3<S>) -> M3<S> {
        let mut out = Self::identity();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] =
                    self.m[r][0] * o.m[0][c] + self.m[r][1] * o.m[1][c] + self.m[r][2] * o.m[2][c];
            }
        }
        out
    }
}

/// Rodrigues rotation from an axis-angle vector, series-expanded near zero
/// so derivatives stay exact at the identity.
pub fn rotation_from_axis_angle<S: Real>(w: V3<S>) -> M3<S> {
    let t = w.dot(w); // squared angle
    let (a, b) = if t.re() < 1e-8 {
        let one = S::from_f64(1.0);
        let half = S::from_f64(0.5);
        // sin(x)/x and (1-cos(x))/x^2 in powers of t = x^2
        let a = one - t / S::from_f64(6.0) + t * t / S::from_f64(120.0);
        let b = half - t / S::from_f64(24.0) + t * t / S::from_f64(720.0);
        (a, b)
    } else {
        let theta = t.sqrt();
        (theta.sin() / theta, (S::from_f64(1.0) - theta.cos()) / t)
    };
    let z = S::from_f64(0.0);
    let skew = M3 {
        m: [[z, -w.z, w.y], [w.z, z, -w.x], [-w.y, w.x, z]],
    };
    let skew2 = skew.mul_mat(&skew);
    let mut out = M3::identity();
    for r in 0..3 {
        for c in 0..3 {
            out.m[r][c] = out.m[r][c] + skew.m[r][c] * a + skew2.m[r][c] * b;
        }
    }
    out
}
