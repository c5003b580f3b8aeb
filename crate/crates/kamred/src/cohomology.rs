//! The linearized conjugation equation d_omega X = [A~, X] + F^N - F^(0),
//! solved mode by mode with the zero mean normalization X^(0) = 0.

use num_complex::Complex64;

use crate::fourier::MatrixSeries;
use crate::mat2::{Mat2, Sl2};
use crate::sl2::{classify_default, SpectralClass};
use crate::weights::{ApproxSpec, FrequencyVector, WeightSpec};
use crate::{invalid, numerical, Result};

/// Divisors smaller than this indicate the caller violated non-resonance.
const DIVISOR_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct DivisorReport {
    /// Largest 1/|divisor| encountered.
    pub max_inv_divisor: f64,
    /// Norm amplification bound for the branch taken.
    pub bound: f64,
    /// Measured amplification |X|_0 / |rhs|_0.
    pub attained: f64,
    /// True when the measured amplification exceeds the branch bound.
    pub flagged: bool,
    pub branch: SolveBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveBranch {
    Blockwise,
    Nilpotent,
    Scalar,
}

/// Solves the equation for X supported on 0 < |k| <= N.  The caller certifies
/// that the gap of A~ is non-resonant up to order N at level kappa'.
pub fn solve(
    a_tilde: &Sl2,
    f: &MatrixSeries,
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    kappa_p: f64,
    n: f64,
) -> Result<(MatrixSeries, DivisorReport)> {
    if f.d != freq.dim() {
        return Err(invalid("series/frequency dimension mismatch"));
    }
    if !(kappa_p > 0.0 && kappa_p < 1.0) {
        return Err(invalid("kappa' must lie in (0, 1)"));
    }
    let spec = classify_default(a_tilde);
    let branch = match spec.class {
        SpectralClass::Elliptic { alpha } => {
            if 2.0 * alpha < kappa_p {
                return Err(invalid(format!(
                    "elliptic gap {:.3e} below kappa' {:.3e}: branch choice belongs to the caller",
                    2.0 * alpha,
                    kappa_p
                )));
            }
            SolveBranch::Blockwise
        }
        SpectralClass::Hyperbolic { .. } => SolveBranch::Blockwise,
        SpectralClass::Nilpotent => SolveBranch::Nilpotent,
        SpectralClass::Zero => SolveBranch::Scalar,
    };

    let mut rhs = f.truncate(n);
    rhs.remove_mean();

    let am = a_tilde.to_mat2();
    let ad = |m: Mat2| am * m - m * am;
    let mut x = MatrixSeries::zero(f.d, rhs.denom);
    let mut max_inv = 0.0f64;
    for (h, fm) in rhs.iter() {
        let k_dot: f64 = h
            .iter()
            .zip(&freq.omega)
            .map(|(hi, wi)| *hi as f64 / rhs.denom as f64 * wi)
            .sum();
        let s = Complex64::new(0.0, 2.0 * std::f64::consts::PI * k_dot);
        let xm = match branch {
            SolveBranch::Scalar => {
                check_divisor(s, &mut max_inv)?;
                fm.scale(s.inv())
            }
            SolveBranch::Nilpotent => {
                check_divisor(s, &mut max_inv)?;
                let si = s.inv();
                let a1 = ad(*fm);
                let a2 = ad(a1);
                (*fm + a1.scale(si) + a2.scale(si * si)).scale(si)
            }
            SolveBranch::Blockwise => {
                let p1 = spec.p1.unwrap();
                let p2 = spec.p2.unwrap();
                let (l1, l2) = spec.eigenvalues;
                let mut acc = Mat2::ZERO;
                for (pi, li) in [(p1, l1), (p2, l2)] {
                    for (pj, lj) in [(p1, l1), (p2, l2)] {
                        let div = s - (li - lj);
                        check_divisor(div, &mut max_inv)?;
                        acc += (pi * *fm * pj).scale(div.inv());
                    }
                }
                acc
            }
        };
        if !xm.is_zero() {
            x.set_coeff(h.clone(), xm);
        }
    }

    let psi_n = psi.eval(n);
    let bound = match branch {
        SolveBranch::Blockwise => {
            let c0_eff = spec.proj_norm * kappa_p.powi(6);
            4.0 * c0_eff * c0_eff * kappa_p.powi(-13) * psi_n
        }
        SolveBranch::Nilpotent => 3.0 * kappa_p.powi(-3) * psi_n.powi(3),
        SolveBranch::Scalar => psi_n / kappa_p,
    };
    let rhs_norm = rhs.norm0();
    let attained = if rhs_norm > 0.0 { x.norm0() / rhs_norm } else { 0.0 };
    let report = DivisorReport {
        max_inv_divisor: max_inv,
        bound,
        attained,
        flagged: attained > bound,
        branch,
    };
    Ok((x, report))
}

fn check_divisor(div: Complex64, max_inv: &mut f64) -> Result<()> {
    let m = div.norm();
    if m < DIVISOR_FLOOR {
        return Err(numerical(format!(
            "small divisor {m:.3e}: non-resonance hypothesis violated"
        )));
    }
    *max_inv = max_inv.max(1.0 / m);
    Ok(())
}

/// Weighted-norm defect of the equation: |d_omega X - [A~, X] - (F^N - F^(0))|.
pub fn residual(
    a_tilde: &Sl2,
    x: &MatrixSeries,
    f: &MatrixSeries,
    freq: &FrequencyVector,
    n: f64,
    lambda: &WeightSpec,
    r: f64,
) -> f64 {
    let am = MatrixSeries::constant(f.d, a_tilde.to_mat2());
    let mut rhs = f.truncate(n);
    rhs.remove_mean();
    let bracket = am.multiply(x).unwrap().sub(&x.multiply(&am).unwrap());
    x.derive_omega(freq).sub(&bracket).sub(&rhs).weighted_norm(lambda, r)
}
