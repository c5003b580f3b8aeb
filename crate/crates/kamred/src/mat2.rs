//! Small 2x2 matrix types: complex matrices for Fourier coefficients and
//! real traceless matrices for the constant parts.

use num_complex::Complex64;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// 2x2 complex matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub e: [[Complex64; 2]; 2],
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 {
        e: [[Complex64::new(0.0, 0.0); 2]; 2],
    };

    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Mat2 { e: [[a, b], [c, d]] }
    }

    pub fn identity() -> Self {
        Mat2::from_real(1.0, 0.0, 0.0, 1.0)
    }

    pub fn from_real(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2::new(
            Complex64::new(a, 0.0),
            Complex64::new(b, 0.0),
            Complex64::new(c, 0.0),
            Complex64::new(d, 0.0),
        )
    }

    /// Max-abs-entry norm ("the norm of the greatest coefficient").
    pub fn norm(&self) -> f64 {
        let mut m = 0.0f64;
        for r in &self.e {
            for v in r {
                m = m.max(v.norm());
            }
        }
        m
    }

    /// Largest imaginary part in absolute value.
    pub fn imag_norm(&self) -> f64 {
        let mut m = 0.0f64;
        for r in &self.e {
            for v in r {
                m = m.max(v.im.abs());
            }
        }
        m
    }

    pub fn trace(&self) -> Complex64 {
        self.e[0][0] + self.e[1][1]
    }

    pub fn det(&self) -> Complex64 {
        self.e[0][0] * self.e[1][1] - self.e[0][1] * self.e[1][0]
    }

    /// Entrywise complex conjugate (no transpose).
    pub fn conj(&self) -> Mat2 {
        Mat2::new(
            self.e[0][0].conj(),
            self.e[0][1].conj(),
            self.e[1][0].conj(),
            self.e[1][1].conj(),
        )
    }

    pub fn scale(&self, s: Complex64) -> Mat2 {
        let mut out = *self;
        for r in &mut out.e {
            for v in r {
                *v *= s;
            }
        }
        out
    }

    pub fn scale_re(&self, s: f64) -> Mat2 {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d.norm() == 0.0 {
            return None;
        }
        let inv = Complex64::new(1.0, 0.0) / d;
        Some(Mat2::new(
            self.e[1][1] * inv,
            -self.e[0][1] * inv,
            -self.e[1][0] * inv,
            self.e[0][0] * inv,
        ))
    }

    pub fn real_part(&self) -> [[f64; 2]; 2] {
        [
            [self.e[0][0].re, self.e[0][1].re],
            [self.e[1][0].re, self.e[1][1].re],
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.norm() == 0.0
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        let mut out = self;
        for i in 0..2 {
            for j in 0..2 {
                out.e[i][j] += rhs.e[i][j];
            }
        }
        out
    }
}

impl AddAssign for Mat2 {
    fn add_assign(&mut self, rhs: Mat2) {
        for i in 0..2 {
            for j in 0..2 {
                self.e[i][j] += rhs.e[i][j];
            }
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        let mut out = self;
        for i in 0..2 {
            for j in 0..2 {
                out.e[i][j] -= rhs.e[i][j];
            }
        }
        out
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.scale_re(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let mut out = Mat2::ZERO;
        for i in 0..2 {
            for j in 0..2 {
                out.e[i][j] = self.e[i][0] * rhs.e[0][j] + self.e[i][1] * rhs.e[1][j];
            }
        }
        out
    }
}

/// Real 2x2 matrix with zero trace: an element of sl(2,R).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sl2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sl2 {
    pub const ZERO: Sl2 = Sl2 { a: 0.0, b: 0.0, c: 0.0 };

    /// [[a, b], [c, -a]]
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Sl2 { a, b, c }
    }

    /// Builds from a full real matrix; the trace must vanish up to rounding.
    pub fn from_entries(m: [[f64; 2]; 2]) -> Self {
        let scale = m[0][0]
            .abs()
            .max(m[0][1].abs())
            .max(m[1][0].abs())
            .max(m[1][1].abs())
            .max(1.0);
        debug_assert!((m[0][0] + m[1][1]).abs() <= 1e-12 * scale, "trace not zero");
        Sl2::new(0.5 * (m[0][0] - m[1][1]), m[0][1], m[1][0])
    }

    /// alpha * rotation generator [[0, -alpha], [alpha, 0]].
    pub fn rotation(alpha: f64) -> Self {
        Sl2::new(0.0, -alpha, alpha)
    }

    pub fn entries(&self) -> [[f64; 2]; 2] {
        [[self.a, self.b], [self.c, -self.a]]
    }

    pub fn det(&self) -> f64 {
        -self.a * self.a - self.b * self.c
    }

    pub fn norm(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs())
    }

    pub fn to_mat2(&self) -> Mat2 {
        Mat2::from_real(self.a, self.b, self.c, -self.a)
    }

    pub fn scale(&self, s: f64) -> Sl2 {
        Sl2::new(self.a * s, self.b * s, self.c * s)
    }

    pub fn add(&self, o: &Sl2) -> Sl2 {
        Sl2::new(self.a + o.a, self.b + o.b, self.c + o.c)
    }

    pub fn sub(&self, o: &Sl2) -> Sl2 {
        Sl2::new(self.a - o.a, self.b - o.b, self.c - o.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat2_inverse_roundtrip() {
        let m = Mat2::from_real(1.0, 2.0, 3.0, 5.0);
        let inv = m.inverse().unwrap();
        let p = m * inv;
        assert!((p - Mat2::identity()).norm() < 1e-14);
    }

    #[test]
    fn sl2_det_trace() {
        let a = Sl2::new(0.3, -1.2, 0.7);
        assert!((a.to_mat2().det().re - a.det()).abs() < 1e-15);
        assert_eq!(a.to_mat2().trace().norm(), 0.0);
    }
}
