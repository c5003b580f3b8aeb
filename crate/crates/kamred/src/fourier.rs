//! Finitely supported matrix-valued Fourier series on the torus and the
//! doubled torus, with the exponentially weighted norm.
//!
//! Frequencies are stored as doubled integer indices `h` with true frequency
//! `k = h / denom`, `denom` being 1 (integer frequencies) or 2 (half-integer
//! frequencies living on the doubled torus).  Real-valued series satisfy
//! `coeff(-h) = conj(coeff(h))` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::mat2::Mat2;
use crate::weights::{FrequencyVector, WeightSpec};
use crate::{invalid, numerical, Result};

/// Default absolute pruning threshold keeping supports finite.
pub const PRUNE_EPS: f64 = 1e-300;

/// Matrix norm used inside the weighted series norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixNorm {
    /// Largest entry magnitude (not submultiplicative; factor 2 slack).
    #[default]
    MaxAbs,
    /// Twice the largest entry magnitude (submultiplicative).
    ScaledMax,
}

impl MatrixNorm {
    pub fn of(&self, m: &Mat2) -> f64 {
        match self {
            MatrixNorm::MaxAbs => m.norm(),
            MatrixNorm::ScaledMax => 2.0 * m.norm(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixSeries {
    pub d: usize,
    /// 1 for integer frequencies, 2 for half-integer frequencies.
    pub denom: i64,
    coeffs: BTreeMap<Vec<i64>, Mat2>,
    /// Accumulated norm loss from pruning small coefficients.
    pub prune_loss: f64,
}

fn ell1(h: &[i64]) -> i64 {
    h.iter().map(|v| v.abs()).sum()
}

impl MatrixSeries {
    pub fn zero(d: usize, denom: i64) -> Self {
        assert!(denom == 1 || denom == 2, "denom must be 1 or 2");
        MatrixSeries { d, denom, coeffs: BTreeMap::new(), prune_loss: 0.0 }
    }

    pub fn constant(d: usize, m: Mat2) -> Self {
        let mut s = MatrixSeries::zero(d, 1);
        if !m.is_zero() {
            s.coeffs.insert(vec![0; d], m);
        }
        s
    }

    pub fn identity(d: usize) -> Self {
        MatrixSeries::constant(d, Mat2::identity())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn num_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs_iter(&self) -> impl Iterator<Item = (&Vec<i64>, &Mat2)> {
        self.coeffs.iter()
    }

    pub fn coeff(&self, h: &[i64]) -> Mat2 {
        self.coeffs.get(h).copied().unwrap_or(Mat2::ZERO)
    }

    pub fn set_coeff(&mut self, h: Vec<i64>, m: Mat2) {
        assert_eq!(h.len(), self.d);
        if m.is_zero() {
            self.coeffs.remove(&h);
        } else {
            self.coeffs.insert(h, m);
        }
    }

    /// Inserts the pair of conjugate coefficients making a real contribution:
    /// coeff(h) += m, coeff(-h) += conj(m).
    pub fn add_real_mode(&mut self, h: Vec<i64>, m: Mat2) {
        let neg: Vec<i64> = h.iter().map(|v| -v).collect();
        let cur = self.coeff(&h) + m;
        self.set_coeff(h, cur);
        let cur = self.coeff(&neg) + m.conj();
        self.set_coeff(neg, cur);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<i64>, &Mat2)> {
        self.coeffs.iter()
    }

    /// The mean value (the coefficient of the zero frequency).
    pub fn mean(&self) -> Mat2 {
        self.coeff(&vec![0; self.d])
    }

    /// Removes the zero-frequency coefficient.
    pub fn remove_mean(&mut self) {
        self.coeffs.remove(&vec![0; self.d]);
    }

    /// Embeds into the doubled-torus representation (index doubling).
    pub fn to_denom(&self, denom: i64) -> MatrixSeries {
        assert!(denom == 1 || denom == 2);
        if denom == self.denom {
            return self.clone();
        }
        if denom == 2 {
            let mut out = MatrixSeries::zero(self.d, 2);
            for (h, m) in &self.coeffs {
                out.coeffs.insert(h.iter().map(|v| 2 * v).collect(), *m);
            }
            out.prune_loss = self.prune_loss;
            out
        } else {
            // Only legal when every index is even.
            let mut out = MatrixSeries::zero(self.d, 1);
            for (h, m) in &self.coeffs {
                assert!(h.iter().all(|v| v % 2 == 0), "series has genuine half-integer modes");
                out.coeffs.insert(h.iter().map(|v| v / 2).collect(), *m);
            }
            out.prune_loss = self.prune_loss;
            out
        }
    }

    /// True when every stored index is even in doubled units, i.e. the series
    /// lives on the plain torus.
    pub fn has_integer_support(&self) -> bool {
        self.denom == 1 || self.coeffs.keys().all(|h| h.iter().all(|v| v % 2 == 0))
    }

    /// Max deviation from the reality invariant coeff(-h) = conj(coeff(h)).
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (h, m) in &self.coeffs {
            let neg: Vec<i64> = h.iter().map(|v| -v).collect();
            worst = worst.max((self.coeff(&neg) - m.conj()).norm());
        }
        worst
    }

    /// Max absolute coefficient trace (sl(2,R)-valued series are traceless).
    pub fn trace_defect(&self) -> f64 {
        self.coeffs.values().map(|m| m.trace().norm()).fold(0.0, f64::max)
    }

    /// Weighted norm with the max-abs matrix norm.
    pub fn weighted_norm(&self, lambda: &WeightSpec, r: f64) -> f64 {
        self.weighted_norm_with(lambda, r, MatrixNorm::MaxAbs)
    }

    pub fn weighted_norm_with(&self, lambda: &WeightSpec, r: f64, norm: MatrixNorm) -> f64 {
        let mut s = 0.0;
        for (h, m) in &self.coeffs {
            let k = ell1(h) as f64 / self.denom as f64;
            s += norm.of(m) * (2.0 * std::f64::consts::PI * lambda.eval(k) * r).exp();
        }
        s
    }

    /// Sum of coefficient norms (the weighted norm at r = 0).
    pub fn norm0(&self) -> f64 {
        self.coeffs.values().map(|m| m.norm()).sum()
    }

    pub fn add(&self, other: &MatrixSeries) -> MatrixSeries {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &MatrixSeries) -> MatrixSeries {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &MatrixSeries, sign: f64) -> MatrixSeries {
        assert_eq!(self.d, other.d);
        let denom = self.denom.max(other.denom);
        let a = self.to_denom(denom);
        let b = other.to_denom(denom);
        let mut out = a.clone();
        out.prune_loss += b.prune_loss;
        for (h, m) in &b.coeffs {
            let cur = out.coeff(h) + m.scale_re(sign);
            out.set_coeff(h.clone(), cur);
        }
        out.prune(PRUNE_EPS);
        out
    }

    pub fn scale(&self, s: f64) -> MatrixSeries {
        let mut out = self.clone();
        for m in out.coeffs.values_mut() {
            *m = m.scale_re(s);
        }
        out
    }

    /// Convolution product: coeff(h) = sum over h1 + h2 = h of F(h1) G(h2).
    pub fn multiply(&self, other: &MatrixSeries) -> Result<MatrixSeries> {
        if self.d != other.d {
            return Err(invalid("series dimension mismatch"));
        }
        let denom = self.denom.max(other.denom);
        let a = self.to_denom(denom);
        let b = other.to_denom(denom);
        let mut out = MatrixSeries::zero(self.d, denom);
        out.prune_loss = a.prune_loss + b.prune_loss;
        for (h1, m1) in &a.coeffs {
            for (h2, m2) in &b.coeffs {
                let h: Vec<i64> = h1.iter().zip(h2).map(|(x, y)| x + y).collect();
                let cur = out.coeff(&h) + *m1 * *m2;
                out.set_coeff(h, cur);
            }
        }
        out.prune(PRUNE_EPS);
        Ok(out)
    }

    /// Keeps exactly the coefficients with |k|_1 <= n (boundary included).
    pub fn truncate(&self, n: f64) -> MatrixSeries {
        let mut out = self.clone();
        let bound = n * self.denom as f64 + 1e-9;
        out.coeffs.retain(|h, _| (ell1(h) as f64) <= bound);
        out
    }

    /// Largest |k|_1 in the support.
    pub fn max_order(&self) -> f64 {
        self.coeffs.keys().map(|h| ell1(h)).max().unwrap_or(0) as f64 / self.denom as f64
    }

    /// Directional derivative along the flow: coeff(h) *= 2 pi i <k, omega>.
    pub fn derive_omega(&self, freq: &FrequencyVector) -> MatrixSeries {
        assert_eq!(self.d, freq.dim());
        let mut out = MatrixSeries::zero(self.d, self.denom);
        out.prune_loss = self.prune_loss;
        for (h, m) in &self.coeffs {
            let k_dot: f64 = h
                .iter()
                .zip(&freq.omega)
                .map(|(hi, wi)| *hi as f64 / self.denom as f64 * wi)
                .sum();
            let factor = Complex64::new(0.0, 2.0 * std::f64::consts::PI * k_dot);
            let v = m.scale(factor);
            if !v.is_zero() {
                out.coeffs.insert(h.clone(), v);
            }
        }
        out
    }

    /// Pointwise value as a complex matrix.
    pub fn evaluate_complex(&self, theta: &[f64]) -> Mat2 {
        assert_eq!(theta.len(), self.d);
        let mut acc = Mat2::ZERO;
        for (h, m) in &self.coeffs {
            let phase: f64 = h
                .iter()
                .zip(theta)
                .map(|(hi, ti)| *hi as f64 / self.denom as f64 * ti)
                .sum();
            let e = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * phase);
            acc += m.scale(e);
        }
        acc
    }

    /// Pointwise value as a real matrix; fails when the imaginary residue
    /// betrays a broken reality invariant.
    pub fn evaluate(&self, theta: &[f64]) -> Result<[[f64; 2]; 2]> {
        let v = self.evaluate_complex(theta);
        let scale = self.norm0();
        if v.imag_norm() > 1e-12 * scale.max(1e-300) {
            return Err(numerical(format!(
                "imaginary residue {:.3e} exceeds reality tolerance",
                v.imag_norm()
            )));
        }
        Ok(v.real_part())
    }

    /// Drops coefficients below the threshold, charging them to prune_loss.
    pub fn prune(&mut self, threshold: f64) {
        let mut loss = 0.0;
        self.coeffs.retain(|_, m| {
            if m.norm() < threshold {
                loss += m.norm();
                false
            } else {
                true
            }
        });
        self.prune_loss += loss;
    }

    /// Serializes to the plain text format (`dim=<d> denom=<1|2>` header,
    /// one coefficient per line).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dim={} denom={}", self.d, self.denom).unwrap();
        for (h, m) in &self.coeffs {
            for v in h {
                write!(out, "{} ", v).unwrap();
            }
            for i in 0..2 {
                for j in 0..2 {
                    write!(out, " {:.16e} {:.16e}", m.e[i][j].re, m.e[i][j].im).unwrap();
                }
            }
            writeln!(out).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MatrixSeries> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| invalid("empty series file"))?;
        let mut d = None;
        let mut denom = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("dim=") {
                d = Some(v.parse::<usize>().map_err(|_| invalid("bad dim"))?);
            } else if let Some(v) = tok.strip_prefix("denom=") {
                denom = Some(v.parse::<i64>().map_err(|_| invalid("bad denom"))?);
            } else {
                return Err(invalid(format!("unexpected header token '{tok}'")));
            }
        }
        let d = d.ok_or_else(|| invalid("missing dim in header"))?;
        let denom = denom.ok_or_else(|| invalid("missing denom in header"))?;
        if d == 0 || (denom != 1 && denom != 2) {
            return Err(invalid("dim must be >= 1, denom 1 or 2"));
        }
        let mut s = MatrixSeries::zero(d, denom);
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != d + 8 {
                return Err(invalid(format!(
                    "coefficient line has {} fields, expected {}",
                    toks.len(),
                    d + 8
                )));
            }
            let h: Vec<i64> = toks[..d]
                .iter()
                .map(|t| t.parse::<i64>().map_err(|_| invalid("bad index")))
                .collect::<Result<_>>()?;
            let v: Vec<f64> = toks[d..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| invalid("bad value")))
                .collect::<Result<_>>()?;
            let m = Mat2::new(
                Complex64::new(v[0], v[1]),
                Complex64::new(v[2], v[3]),
                Complex64::new(v[4], v[5]),
                Complex64::new(v[6], v[7]),
            );
            s.set_coeff(h, m);
        }
        Ok(s)
    }
}

/// A resonance-removing change of variables built from a pair of spectral
/// projections and a half-integer frequency shift:
/// theta -> e^{2 pi i <m, theta>} P1 + e^{-2 pi i <m, theta>} P2.
///
/// The vector m is stored doubled (`m2 = 2m`), so it is integral.
#[derive(Debug, Clone)]
pub struct TrivialMap {
    pub p1: Mat2,
    pub p2: Mat2,
    /// Doubled shift vector 2m (integral).
    pub m2: Vec<i64>,
    /// Order bound on |m|.
    pub order: f64,
}

impl TrivialMap {
    pub fn identity(d: usize) -> Self {
        TrivialMap {
            p1: Mat2::identity(),
            p2: Mat2::ZERO,
            m2: vec![0; d],
            order: 0.0,
        }
    }

    pub fn new(p1: Mat2, p2: Mat2, m2: Vec<i64>, order: f64) -> Result<Self> {
        let map = TrivialMap { p1, p2, m2, order };
        map.validate()?;
        Ok(map)
    }

    pub fn d(&self) -> usize {
        self.m2.len()
    }

    pub fn is_identity(&self) -> bool {
        self.m2.iter().all(|&v| v == 0)
    }

    /// Checks the projection identities P1+P2=I, Pi^2=Pi, P1 P2 = 0.
    pub fn validate(&self) -> Result<()> {
        let tol = 1e-12 * (1.0 + self.p1.norm().max(self.p2.norm())).powi(2);
        let id = Mat2::identity();
        let checks = [
            (self.p1 + self.p2 - id).norm(),
            (self.p1 * self.p1 - self.p1).norm(),
            (self.p2 * self.p2 - self.p2).norm(),
            (self.p1 * self.p2).norm(),
            (self.p2 * self.p1).norm(),
        ];
        if checks.iter().any(|&c| c > tol) {
            return Err(numerical(format!(
                "projection identities violated (worst defect {:.3e})",
                checks.iter().fold(0.0f64, |a, &b| a.max(b))
            )));
        }
        Ok(())
    }

    /// The map as a series on the doubled torus.
    pub fn as_series(&self) -> MatrixSeries {
        self.series_with_sign(1)
    }

    /// The pointwise inverse, also trivial: swap the phases.
    pub fn inverse_series(&self) -> MatrixSeries {
        self.series_with_sign(-1)
    }

    fn series_with_sign(&self, sign: i64) -> MatrixSeries {
        let mut s = MatrixSeries::zero(self.d(), 2);
        if self.is_identity() {
            s.set_coeff(vec![0; self.d()], self.p1 + self.p2);
            return s;
        }
        let h: Vec<i64> = self.m2.iter().map(|v| sign * v).collect();
        let neg: Vec<i64> = h.iter().map(|v| -v).collect();
        let cur = s.coeff(&h) + self.p1;
        s.set_coeff(h, cur);
        let cur = s.coeff(&neg) + self.p2;
        s.set_coeff(neg, cur);
        s
    }

    pub fn evaluate(&self, theta: &[f64]) -> Mat2 {
        let phase: f64 = self
            .m2
            .iter()
            .zip(theta)
            .map(|(hi, ti)| *hi as f64 / 2.0 * ti)
            .sum();
        let e = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * phase);
        self.p1.scale(e) + self.p2.scale(e.conj())
    }

    /// Norm bound factor max(|P1|, |P2|) used in the growth estimates.
    pub fn proj_norm(&self) -> f64 {
        self.p1.norm().max(self.p2.norm())
    }
}

/// Conjugates a series by a trivial map blockwise:
/// Phi F Phi^{-1} = P1 F P1 + P2 F P2 + e^{+2 pi i <2m,.>} P1 F P2
///                + e^{-2 pi i <2m,.>} P2 F P1
/// (signs swapped for the inverse side).  A torus-periodic input stays
/// torus-periodic because the shift 2m is integral.
pub fn conj_by_trivial(phi: &TrivialMap, f: &MatrixSeries, inverse_side: bool) -> Result<MatrixSeries> {
    if phi.d() != f.d {
        return Err(invalid("dimension mismatch in trivial conjugation"));
    }
    phi.validate()?;
    let sign: i64 = if inverse_side { -1 } else { 1 };
    // Shift index of e^{2 pi i <2m, .>} in the coefficient grid of f.
    let shift: Vec<i64> = phi.m2.iter().map(|v| sign * v * f.denom).collect();
    let mut out = MatrixSeries::zero(f.d, f.denom);
    out.prune_loss = f.prune_loss;
    for (h, g) in f.iter() {
        let diag = phi.p1 * *g * phi.p1 + phi.p2 * *g * phi.p2;
        if !diag.is_zero() {
            let cur = out.coeff(h) + diag;
            out.set_coeff(h.clone(), cur);
        }
        let up = phi.p1 * *g * phi.p2;
        if !up.is_zero() {
            let hp: Vec<i64> = h.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let cur = out.coeff(&hp) + up;
            out.set_coeff(hp, cur);
        }
        let dn = phi.p2 * *g * phi.p1;
        if !dn.is_zero() {
            let hm: Vec<i64> = h.iter().zip(&shift).map(|(a, b)| a - b).collect();
            let cur = out.coeff(&hm) + dn;
            out.set_coeff(hm, cur);
        }
    }
    out.prune(PRUNE_EPS);
    Ok(out)
}

/// Truncated exponential of a series, with the factorial tail below
/// `tol * max(1, |X|_r)` and small coefficients pruned into the error budget.
pub fn exp_series(
    x: &MatrixSeries,
    lambda: &WeightSpec,
    r: f64,
    tol: f64,
) -> Result<MatrixSeries> {
    let nx = x.weighted_norm(lambda, r);
    if !(nx < 50.0) {
        return Err(numerical(format!(
            "series exponential rejected: |X|_r = {nx:.3e} >= 50"
        )));
    }
    let target = tol * nx.max(1.0);
    // Smallest J with nx^{J+1}/(J+1)! e^{nx} <= target.
    let mut j_max = 0usize;
    let mut tail = nx.exp();
    loop {
        tail *= nx / (j_max + 1) as f64;
        if tail <= target || j_max > 200 {
            break;
        }
        j_max += 1;
    }
    let mut result = MatrixSeries::identity(x.d).to_denom(x.denom);
    let mut term = result.clone();
    for j in 1..=j_max {
        term = term.multiply(x)?.scale(1.0 / j as f64);
        result = result.add(&term);
    }
    let modes = result.num_modes().max(1);
    result.prune(tol / (10.0 * modes as f64) * nx.max(1.0) * 1e-3);
    Ok(result)
}
