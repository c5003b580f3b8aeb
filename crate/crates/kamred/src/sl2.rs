//! Spectral classification of constant traceless real matrices, closed-form
//! eigenprojections, and the projection norm bound used by the estimates.

use num_complex::Complex64;

use crate::mat2::{Mat2, Sl2};
use crate::{invalid, numerical, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralClass {
    /// Purely imaginary eigenvalues +-i alpha, alpha > 0.
    Elliptic { alpha: f64 },
    /// Real eigenvalues +-a, a > 0.
    Hyperbolic { a: f64 },
    /// det ~ 0 but A != 0: a single Jordan block.
    Nilpotent,
    Zero,
}

impl SpectralClass {
    pub fn is_real_spectrum(&self) -> bool {
        !matches!(self, SpectralClass::Elliptic { .. })
    }
}

#[derive(Debug, Clone)]
pub struct SpectralData {
    pub class: SpectralClass,
    /// (lambda1, lambda2) with lambda1 = i alpha or +a; both zero otherwise.
    pub eigenvalues: (Complex64, Complex64),
    /// Eigenprojections, absent for nilpotent/zero.
    pub p1: Option<Mat2>,
    pub p2: Option<Mat2>,
    /// |lambda1 - lambda2|.
    pub separation: f64,
    /// max(|P1|, |P2|) when projections exist, else 1.
    pub proj_norm: f64,
}

/// Deterministic determinant tolerance relative to the square of the norm.
pub fn default_tol_det(a: &Sl2) -> f64 {
    1e-12 * a.norm().powi(2).max(1.0)
}

pub fn classify_default(a: &Sl2) -> SpectralData {
    classify(a, default_tol_det(a), 1e-12)
}

/// Total classification by the sign of det(A); the trace is zero so the
/// eigenvalues are +-sqrt(-det).
pub fn classify(a: &Sl2, tol_det: f64, tol_zero: f64) -> SpectralData {
    assert!(tol_det > 0.0 && tol_zero > 0.0, "tolerances must be positive");
    let det = a.det();
    let am = a.to_mat2();
    if det > tol_det {
        let alpha = det.sqrt();
        let l1 = Complex64::new(0.0, alpha);
        // P1 = (A - lambda2 I) / (lambda1 - lambda2), P2 = conj(P1).
        let p1 = (am + Mat2::identity().scale(l1)).scale(Complex64::new(1.0, 0.0) / (l1 * 2.0));
        let p2 = p1.conj();
        SpectralData {
            class: SpectralClass::Elliptic { alpha },
            eigenvalues: (l1, -l1),
            proj_norm: p1.norm().max(p2.norm()),
            p1: Some(p1),
            p2: Some(p2),
            separation: 2.0 * alpha,
        }
    } else if det < -tol_det {
        let av = (-det).sqrt();
        let l1 = Complex64::new(av, 0.0);
        let p1 = (am + Mat2::identity().scale(l1)).scale(Complex64::new(1.0, 0.0) / (l1 * 2.0));
        let p2 = Mat2::identity() - p1;
        SpectralData {
            class: SpectralClass::Hyperbolic { a: av },
            eigenvalues: (l1, -l1),
            proj_norm: p1.norm().max(p2.norm()),
            p1: Some(p1),
            p2: Some(p2),
            separation: 2.0 * av,
        }
    } else if a.norm() <= tol_zero {
        SpectralData {
            class: SpectralClass::Zero,
            eigenvalues: (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
            p1: None,
            p2: None,
            separation: 0.0,
            proj_norm: 1.0,
        }
    } else {
        SpectralData {
            class: SpectralClass::Nilpotent,
            eigenvalues: (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
            p1: None,
            p2: None,
            separation: 0.0,
            proj_norm: 1.0,
        }
    }
}

/// Effective projection constant against a configured C0: for kappa'-separated
/// eigenvalues the projections are bounded by C0 / kappa'^6, so the measured
/// C0_effective = max(|P1|,|P2|) kappa'^6 should stay below C0.
pub fn projection_norm_check(s: &SpectralData, kappa_p: f64, c0: f64) -> Result<(f64, bool)> {
    if !(kappa_p > 0.0 && kappa_p <= 1.0) {
        return Err(invalid("kappa' must lie in (0, 1]"));
    }
    if s.separation < kappa_p {
        return Err(numerical(format!(
            "eigenvalue separation {:.3e} below kappa' {:.3e}",
            s.separation, kappa_p
        )));
    }
    let c0_eff = s.proj_norm * kappa_p.powi(6);
    Ok((c0_eff, c0_eff <= c0))
}

/// Shifts the imaginary spectrum of an elliptic matrix: the unique traceless
/// real matrix with the same eigenvectors and eigenvalues +-i(alpha - s).
pub fn rotation_shift(a: &Sl2, s: f64) -> Result<Sl2> {
    match classify_default(a).class {
        SpectralClass::Elliptic { alpha } => Ok(a.scale((alpha - s) / alpha)),
        other => Err(invalid(format!("rotation_shift needs an elliptic matrix, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_generator_is_elliptic() {
        let a = Sl2::rotation(0.4);
        let s = classify_default(&a);
        match s.class {
            SpectralClass::Elliptic { alpha } => assert!((alpha - 0.4).abs() < 1e-15),
            _ => panic!("expected elliptic"),
        }
        assert!((s.separation - 0.8).abs() < 1e-15);
        assert!((s.eigenvalues.0 - Complex64::new(0.0, 0.4)).norm() < 1e-15);
    }

    #[test]
    fn diagonal_hyperbolic_projections() {
        let a = Sl2::new(1.3, 0.0, 0.0);
        let s = classify_default(&a);
        assert!(matches!(s.class, SpectralClass::Hyperbolic { .. }));
        let p1 = s.p1.unwrap();
        let p2 = s.p2.unwrap();
        assert!((p1 - Mat2::from_real(1.0, 0.0, 0.0, 0.0)).norm() < 1e-14);
        assert!((p2 - Mat2::from_real(0.0, 0.0, 0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn nilpotent_and_zero() {
        assert!(matches!(classify_default(&Sl2::new(0.0, 1.0, 0.0)).class, SpectralClass::Nilpotent));
        assert!(matches!(classify_default(&Sl2::ZERO).class, SpectralClass::Zero));
    }

    #[test]
    fn projection_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let a = Sl2::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let s = classify_default(&a);
            let (Some(p1), Some(p2)) = (s.p1, s.p2) else { continue };
            let am = a.to_mat2();
            assert!((p1 + p2 - Mat2::identity()).norm() < 1e-11);
            assert!((p1 * am - am * p1).norm() < 1e-11);
            assert!((p1 * am * p1 + p2 * am * p2 - am).norm() < 1e-11 * a.norm().max(1.0));
            assert!((p1 * am * p2).norm() < 1e-11 * a.norm().max(1.0));
            // Eigenvalue product equals det.
            let prod = s.eigenvalues.0 * s.eigenvalues.1;
            assert!((prod.re - a.det()).abs() < 1e-12 * a.norm().powi(2).max(1.0));
        }
    }

    #[test]
    fn near_nilpotent_projection_constant_stays_bounded() {
        // A = [[0,1],[-eps^2,0]]: alpha = eps, projections grow like 1/eps,
        // but C0_effective = max|P| kappa'^6 with kappa' = 2 eps shrinks.
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let eps = 0.1 * 0.5f64.powi(i);
            let a = Sl2::new(0.0, 1.0, -eps * eps);
            let s = classify_default(&a);
            assert!(matches!(s.class, SpectralClass::Elliptic { .. }));
            let (c0_eff, _) = projection_norm_check(&s, 2.0 * eps, 1.0).unwrap();
            assert!(c0_eff <= 1.0);
            assert!(c0_eff <= prev);
            prev = c0_eff;
        }
    }

    #[test]
    fn rotation_generator_projection_constant() {
        // Orthogonal eigenbasis: every entry of P has magnitude 1/2, so with
        // the max-entry matrix norm C0_effective = kappa'^6 / 2.
        let alpha = 0.3;
        let s = classify_default(&Sl2::rotation(alpha));
        let kp = 2.0 * alpha;
        let (c0_eff, pass) = projection_norm_check(&s, kp, 1.0).unwrap();
        assert!((c0_eff - 0.5 * kp.powi(6)).abs() < 1e-15);
        assert!(pass);
    }

    #[test]
    fn projection_check_rejects_small_separation() {
        let s = classify_default(&Sl2::rotation(0.01));
        assert!(projection_norm_check(&s, 0.5, 1.0).is_err());
    }

    #[test]
    fn rotation_shift_basics() {
        let a = Sl2::rotation(0.4);
        let same = rotation_shift(&a, 0.0).unwrap();
        assert!(same.sub(&a).norm() < 1e-15);
        let zero = rotation_shift(&a, 0.4).unwrap();
        assert!(zero.norm() < 1e-15);
        let shifted = rotation_shift(&a, 0.1).unwrap();
        assert!(shifted.sub(&Sl2::rotation(0.3)).norm() < 1e-15);
        assert!(rotation_shift(&Sl2::new(1.0, 0.0, 0.0), 0.1).is_err());
    }

    #[test]
    fn shift_then_classify_recovers_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let alpha = rng.gen_range(0.1..2.0);
            let b = rng.gen_range(-1.0f64..1.0);
            // Elliptic with prescribed alpha: a=0, bc = -alpha^2, b free.
            let b = if b.abs() < 0.05 { 0.5 } else { b };
            let a = Sl2::new(0.0, b, -alpha * alpha / b);
            let s = rng.gen_range(-0.5..0.5) * alpha;
            let shifted = rotation_shift(&a, s).unwrap();
            match classify_default(&shifted).class {
                SpectralClass::Elliptic { alpha: ap } => {
                    assert!((ap - (alpha - s)).abs() < 1e-12 * alpha.max(1.0))
                }
                c => panic!("expected elliptic, got {c:?}"),
            }
        }
    }
}
