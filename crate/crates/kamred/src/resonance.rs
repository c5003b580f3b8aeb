//! Non-resonance of the spectral gap against the frequency module, resonance
//! search, and the resonance-removing conjugation built from eigenprojections.

use crate::fourier::{MatrixSeries, TrivialMap};
use crate::mat2::Sl2;
use crate::sl2::{classify_default, rotation_shift, SpectralClass};
use crate::weights::{ApproxSpec, FrequencyVector, WeightSpec};
use crate::{invalid, numerical, Result};

/// Lattice balls larger than this are rejected rather than scanned.
const MAX_BALL: f64 = 1e8;

/// Visits every nonzero integer vector with |k|_1 <= bound.
fn for_each_lattice(d: usize, bound: i64, f: &mut impl FnMut(&[i64])) {
    fn rec(k: &mut Vec<i64>, pos: usize, left: i64, f: &mut impl FnMut(&[i64])) {
        if pos == k.len() {
            if k.iter().any(|&v| v != 0) {
                f(k);
            }
            return;
        }
        for v in -left..=left {
            k[pos] = v;
            rec(k, pos + 1, left - v.abs(), f);
        }
    }
    let mut k = vec![0i64; d];
    rec(&mut k, 0, bound, f);
}

fn ball_guard(d: usize, bound: f64) -> Result<i64> {
    if !(bound >= 1.0) {
        return Err(invalid("order bound must be >= 1"));
    }
    if bound.powi(d as i32) > MAX_BALL {
        return Err(invalid(format!(
            "lattice ball of order {bound:.3e} in dimension {d} exceeds the scan limit"
        )));
    }
    Ok(bound.floor() as i64)
}

#[derive(Debug, Clone)]
pub struct BrReport {
    pub pass: bool,
    /// Minimizing mode (zero vector when nothing was scanned).
    pub worst_k: Vec<i64>,
    /// min over k of |z - 2 pi i <k, omega>| Psi(|k|) / kappa' - 1.
    pub margin: f64,
}

/// Tests whether the spectral gap of A clears every small divisor up to
/// order N: |z - 2 pi i <k, omega>| >= kappa' / Psi(|k|) for 0 < |k| <= N.
/// Matrices with real spectrum always pass.
pub fn is_br_spectrum(
    a: &Sl2,
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    kappa_p: f64,
    n: f64,
) -> Result<BrReport> {
    let d = freq.dim();
    let s = classify_default(a);
    let SpectralClass::Elliptic { alpha } = s.class else {
        return Ok(BrReport { pass: true, worst_k: vec![0; d], margin: f64::INFINITY });
    };
    gap_br(2.0 * alpha, freq, psi, kappa_p, n)
}

/// The same test for an explicit imaginary gap 2 alpha.
pub fn gap_br(
    two_alpha: f64,
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    kappa_p: f64,
    n: f64,
) -> Result<BrReport> {
    let d = freq.dim();
    let bound = ball_guard(d, n)?;
    let mut worst = f64::INFINITY;
    let mut worst_k = vec![0i64; d];
    for_each_lattice(d, bound, &mut |k| {
        let dot: f64 = k.iter().zip(&freq.omega).map(|(a, b)| *a as f64 * b).sum();
        let kn = k.iter().map(|v| v.abs()).sum::<i64>() as f64;
        let m = (two_alpha - 2.0 * std::f64::consts::PI * dot).abs() * psi.eval(kn) / kappa_p - 1.0;
        if m < worst || (m == worst && k < worst_k.as_slice()) {
            worst = m;
            worst_k = k.to_vec();
        }
    });
    Ok(BrReport { pass: worst >= 0.0, worst_k, margin: worst })
}

#[derive(Debug, Clone)]
pub struct ResonanceResult {
    /// Resonant vector m in half-integers, stored doubled (m2 = 2m).
    pub m2: Vec<i64>,
    /// alpha' = alpha - pi <m2, omega>.
    pub shifted_alpha: f64,
    pub kappa_used: f64,
    /// Order up to which non-resonance was scanned.
    pub order: f64,
}

/// Searches 0 < |m'| <= N for |2 alpha - 2 pi <m', omega>| < kappa / Psi(|m'|);
/// the defect-minimizing m' wins, ties broken lexicographically.  Empty when
/// the gap is already non-resonant up to order N.
pub fn find_resonance(
    alpha: f64,
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    kappa: f64,
    n: f64,
) -> Result<Option<ResonanceResult>> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(invalid("kappa must lie in (0, 1)"));
    }
    let d = freq.dim();
    let bound = ball_guard(d, n)?;
    let mut best: Option<(f64, Vec<i64>, f64)> = None;
    for_each_lattice(d, bound, &mut |k| {
        let dot: f64 = k.iter().zip(&freq.omega).map(|(a, b)| *a as f64 * b).sum();
        let kn = k.iter().map(|v| v.abs()).sum::<i64>() as f64;
        let defect = (2.0 * alpha - 2.0 * std::f64::consts::PI * dot).abs();
        if defect < kappa / psi.eval(kn) {
            let better = match &best {
                None => true,
                Some((bd, bk, _)) => defect < *bd || (defect == *bd && k < bk.as_slice()),
            };
            if better {
                best = Some((defect, k.to_vec(), dot));
            }
        }
    });
    Ok(best.map(|(_, m2, dot)| ResonanceResult {
        shifted_alpha: alpha - std::f64::consts::PI * dot,
        m2,
        kappa_used: kappa,
        order: n,
    }))
}

#[derive(Debug, Clone)]
pub struct RenormReport {
    pub resonant: bool,
    pub m2: Vec<i64>,
    pub kappa2: f64,
    /// Measured projection constant max(|P1|,|P2|) kappa''^6.
    pub c0_eff: f64,
    pub shift_norm: f64,
    pub shift_ok: bool,
    pub br_margin: f64,
    pub br_ok: bool,
    /// |A_tilde| <= kappa''/2, only meaningful on the resonant branch.
    pub small_ok: Option<bool>,
    /// Norm of d_omega Phi - (A Phi - Phi A_tilde) over the coefficients.
    pub conj_residual: f64,
}

/// Removes the resonance of A (if any) up to order R N: returns a trivial map
/// Phi and the shifted constant part A_tilde with non-resonant gap, plus the
/// measured postconditions.
pub fn renormalize(
    a: &Sl2,
    freq: &FrequencyVector,
    psi: &ApproxSpec,
    kappa: f64,
    r_big: f64,
    n: f64,
) -> Result<(TrivialMap, Sl2, RenormReport)> {
    if !(r_big >= 2.0) || !(n >= 1.0) {
        return Err(invalid("renormalize needs R >= 2 and N >= 1"));
    }
    let d = freq.dim();
    let kappa2 = kappa / psi.eval(3.0 * r_big * n);
    let s = classify_default(a);

    let identity_branch = |margin: f64| -> (TrivialMap, Sl2, RenormReport) {
        (
            TrivialMap::identity(d),
            *a,
            RenormReport {
                resonant: false,
                m2: vec![0; d],
                kappa2,
                c0_eff: s.proj_norm * kappa2.powi(6),
                shift_norm: 0.0,
                shift_ok: true,
                br_margin: margin,
                br_ok: true,
                small_ok: None,
                conj_residual: 0.0,
            },
        )
    };

    let SpectralClass::Elliptic { alpha } = s.class else {
        return Ok(identity_branch(f64::INFINITY));
    };
    let br = gap_br(2.0 * alpha, freq, psi, kappa2, r_big * n)?;
    if br.pass {
        return Ok(identity_branch(br.margin));
    }
    let Some(res) = find_resonance(alpha, freq, psi, kappa2, r_big * n)? else {
        return Err(numerical(format!(
            "gap fails the non-resonance test (margin {:.3e}) yet no resonant mode found",
            br.margin
        )));
    };
    let (p1, p2) = (s.p1.expect("elliptic has projections"), s.p2.unwrap());
    let order = res.m2.iter().map(|v| v.abs()).sum::<i64>() as f64 / 2.0;
    let phi = TrivialMap::new(p1, p2, res.m2.clone(), order)?;
    let shift = alpha - res.shifted_alpha;
    let a_tilde = rotation_shift(a, shift)?;

    let shift_norm = a_tilde.sub(a).norm();
    let br2 = is_br_spectrum(&a_tilde, freq, psi, kappa2, r_big * n)?;
    let conj_residual = conjugation_residual(&phi, a, &a_tilde, freq);
    let report = RenormReport {
        resonant: true,
        m2: res.m2,
        kappa2,
        c0_eff: s.proj_norm * kappa2.powi(6),
        shift_norm,
        shift_ok: shift_norm <= std::f64::consts::PI * n * (1.0 + 1e-12),
        br_margin: br2.margin,
        br_ok: br2.pass,
        small_ok: Some(a_tilde.norm() <= kappa2 / 2.0 * (1.0 + 1e-12)),
        conj_residual,
    };
    Ok((phi, a_tilde, report))
}

/// Coefficient norm of d_omega Phi - (A Phi - Phi A_tilde).
pub fn conjugation_residual(
    phi: &TrivialMap,
    a: &Sl2,
    a_tilde: &Sl2,
    freq: &FrequencyVector,
) -> f64 {
    let d = freq.dim();
    let phi_s = phi.as_series();
    let ca = MatrixSeries::constant(d, a.to_mat2()).to_denom(2);
    let ct = MatrixSeries::constant(d, a_tilde.to_mat2()).to_denom(2);
    let lhs = phi_s.derive_omega(freq);
    let rhs = ca.multiply(&phi_s).unwrap().sub(&phi_s.multiply(&ct).unwrap());
    lhs.sub(&rhs).norm0()
}

/// Growth bound for the constructed trivial map:
/// |Phi^{+-1}|_{Lambda, r'} <= 2 C0_eff kappa''^{-6} e^{2 pi Lambda(N/2) r'}.
pub fn phi_bound_ok(
    phi: &TrivialMap,
    lambda: &WeightSpec,
    r_prime: f64,
    c0_eff: f64,
    kappa2: f64,
    n: f64,
) -> bool {
    let bound = 2.0 * c0_eff * kappa2.powi(-6)
        * (2.0 * std::f64::consts::PI * lambda.eval(n / 2.0) * r_prime).exp();
    let fwd = phi.as_series().weighted_norm(lambda, r_prime);
    let bwd = phi.inverse_series().weighted_norm(lambda, r_prime);
    fwd <= bound * (1.0 + 1e-12) && bwd <= bound * (1.0 + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GOLDEN: f64 = 0.6180339887498949;

    fn freq1() -> FrequencyVector {
        FrequencyVector::new(vec![GOLDEN]).unwrap()
    }

    #[test]
    fn hyperbolic_always_passes() {
        let a = Sl2::new(0.7, 0.1, 0.1);
        let r = is_br_spectrum(&a, &freq1(), &ApproxSpec::power(2.0).unwrap(), 0.5, 50.0).unwrap();
        assert!(r.pass);
        assert!(r.margin.is_infinite());
    }

    #[test]
    fn constructed_resonance_fails_at_k1() {
        let omega = FrequencyVector::new(vec![0.618034]).unwrap();
        let alpha = std::f64::consts::PI * 0.618034;
        let a = Sl2::rotation(alpha);
        let r = is_br_spectrum(&a, &omega, &ApproxSpec::power(2.0).unwrap(), 0.01, 5.0).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_k, vec![1]);
    }

    #[test]
    fn br_matches_exhaustive_scan_d2() {
        let freq = FrequencyVector::new(vec![GOLDEN, 0.41421356237309515]).unwrap();
        let psi = ApproxSpec::power(1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let alpha = rng.gen_range(0.05..3.0);
            let n = 7.0;
            let r = gap_br(2.0 * alpha, &freq, &psi, 0.05, n).unwrap();
            // Independent box scan with l1 filter.
            let mut worst = f64::INFINITY;
            for k0 in -7i64..=7 {
                for k1 in -7i64..=7 {
                    if k0 == 0 && k1 == 0 || k0.abs() + k1.abs() > 7 {
                        continue;
                    }
                    let dot = k0 as f64 * freq.omega[0] + k1 as f64 * freq.omega[1];
                    let kn = (k0.abs() + k1.abs()) as f64;
                    let m = (2.0 * alpha - 2.0 * std::f64::consts::PI * dot).abs()
                        * psi.eval(kn) / 0.05 - 1.0;
                    worst = worst.min(m);
                }
            }
            assert!((r.margin - worst).abs() <= 1e-12 * worst.abs().max(1.0));
            assert_eq!(r.pass, worst >= 0.0);
        }
    }

    #[test]
    fn find_resonance_empty_when_nonresonant() {
        let psi = ApproxSpec::power(2.0).unwrap();
        // Small alpha away from the frequency module.
        let r = find_resonance(0.11, &freq1(), &psi, 1e-4, 10.0).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn find_resonance_exact_cancellation() {
        let psi = ApproxSpec::power(2.0).unwrap();
        let alpha = std::f64::consts::PI * GOLDEN;
        let r = find_resonance(alpha, &freq1(), &psi, 0.05, 5.0).unwrap().unwrap();
        assert_eq!(r.m2, vec![1]);
        assert!(r.shifted_alpha.abs() < 1e-14);
    }

    #[test]
    fn find_resonance_d2_near_miss() {
        let freq = FrequencyVector::new(vec![0.618034, 0.414214]).unwrap();
        let psi = ApproxSpec::power(1.2).unwrap();
        let kappa = 0.01;
        let kp = kappa / psi.eval(1.0);
        let alpha = std::f64::consts::PI * (freq.omega[0] + freq.omega[1]) + 0.2 * kp;
        let r = find_resonance(alpha, &freq, &psi, kappa, 6.0).unwrap().unwrap();
        assert_eq!(r.m2, vec![1, 1]);
        assert!(r.shifted_alpha.abs() <= kp / 2.0 + 1e-15);
    }

    #[test]
    fn renormalize_hyperbolic_is_identity() {
        let a = Sl2::new(0.9, 0.0, 0.0);
        let psi = ApproxSpec::power(1.2).unwrap();
        let (phi, at, rep) = renormalize(&a, &freq1(), &psi, 0.5, 2.0, 3.0).unwrap();
        assert!(phi.is_identity());
        assert!(at.sub(&a).norm() == 0.0);
        assert!(!rep.resonant);
    }

    #[test]
    fn renormalize_removes_exact_resonance() {
        let psi = ApproxSpec::power(1.2).unwrap();
        let alpha = std::f64::consts::PI * GOLDEN;
        let a = Sl2::rotation(alpha);
        let (phi, at, rep) = renormalize(&a, &freq1(), &psi, 0.5, 2.0, 2.0).unwrap();
        assert!(rep.resonant);
        assert_eq!(rep.m2, vec![1]);
        assert_eq!(phi.m2, vec![1]);
        assert!(at.norm() < 1e-13, "shifted matrix should vanish, got {:.3e}", at.norm());
        assert!(rep.br_ok);
        assert!(rep.small_ok.unwrap());
        assert!(rep.conj_residual < 1e-10 * a.norm());
    }

    #[test]
    fn renormalize_near_resonance_report() {
        let psi = ApproxSpec::power(1.2).unwrap();
        let kappa = 0.5;
        let n = 2.0;
        let kappa2 = kappa / psi.eval(3.0 * 2.0 * n);
        // Gap off the resonance by a fraction of kappa''.
        let alpha = std::f64::consts::PI * GOLDEN + 0.2 * kappa2;
        let a = Sl2::rotation(alpha);
        let (phi, at, rep) = renormalize(&a, &freq1(), &psi, kappa, 2.0, n).unwrap();
        assert!(rep.resonant);
        assert!(rep.small_ok.unwrap(), "|A~| = {:.3e} vs {:.3e}", at.norm(), kappa2 / 2.0);
        assert!(rep.shift_ok);
        assert!(rep.br_ok, "margin {:.3e}", rep.br_margin);
        let lam = WeightSpec::analytic();
        assert!(phi_bound_ok(&phi, &lam, 0.05, rep.c0_eff, rep.kappa2, 2.0 * n));
        assert!(rep.conj_residual < 1e-10 * a.norm());
    }

    #[test]
    fn trivial_maps_compose_with_added_shift() {
        let a = Sl2::rotation(1.3);
        let s = crate::sl2::classify_default(&a);
        let (p1, p2) = (s.p1.unwrap(), s.p2.unwrap());
        let f1 = TrivialMap::new(p1, p2, vec![1], 0.5).unwrap();
        let f2 = TrivialMap::new(p1, p2, vec![3], 1.5).unwrap();
        let prod = f1.as_series().multiply(&f2.as_series()).unwrap();
        let expect = TrivialMap::new(p1, p2, vec![4], 2.0).unwrap().as_series();
        assert!(prod.sub(&expect).norm0() < 1e-13);
    }

    #[test]
    fn huge_ball_rejected() {
        let freq = FrequencyVector::new(vec![0.3, 0.4, 0.5]).unwrap();
        let psi = ApproxSpec::power(1.2).unwrap();
        assert!(gap_br(1.0, &freq, &psi, 0.1, 1e4).is_err());
    }
}
